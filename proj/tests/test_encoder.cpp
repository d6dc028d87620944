#include <doctest.h>

#include <random>
#include <sstream>

#include "msgcel/encoder.hpp"
#include "oracles.hpp"

using namespace msgcel;

namespace {

ModelConfig small_config(Activation act = Activation::tanh) {
    ModelConfig c;
    c.feature_dim = 5;
    c.hidden_dim = 7;
    c.trunk_layers = 2;
    c.groups = 3;
    c.embed_dim = 4;
    c.teacher_dim = 6;
    c.activation = act;
    c.seed = 19;
    return c;
}

// <G_h, h> + <G_l, l> as a function of the flat parameters.
double probe(const StudentNet& net, const Matrix& x, int group, const Matrix& gh, const Matrix& gl) {
    const auto [h, l] = student_forward(net, x, group);
    return h.cwiseProduct(gh).sum() + l.cwiseProduct(gl).sum();
}

}  // namespace

TEST_CASE("default architecture dimensions") {
    StudentNet net(ModelConfig{});
    const Matrix x = Matrix::Random(3, 32);
    const auto [h, l] = student_forward(net, x, 3);
    CHECK(h.cols() == 512);
    CHECK(l.cols() == 512);
    TeacherNet teacher(net, 1);
    CHECK(teacher_forward(teacher, x).cols() == 1024);
    CHECK(net.layout().total() == static_cast<std::size_t>(32 * 256 + 256 + 256 * 256 + 256 + 4 * 2 * (256 * 512 + 512)));
}

TEST_CASE("parameter count depends only on the architecture") {
    auto a = small_config();
    auto b = small_config();
    b.seed = 99;
    b.head_init_scale = 3.0;
    CHECK(StudentNet(a).params().size() == StudentNet(b).params().size());
    CHECK_FALSE(StudentNet(a).params() == StudentNet(b).params());
    CHECK(StudentNet(a).params() == StudentNet(a).params());
}

TEST_CASE("zero weights give the composed bias image") {
    for (auto act : {Activation::relu, Activation::tanh}) {
        StudentNet net(small_config(act));
        net.params().setZero();
        std::mt19937_64 rng(2);
        Vector b0 = oracle::gaussian(1, 7, rng).transpose();
        Vector b1 = oracle::gaussian(1, 7, rng).transpose();
        Vector bh = oracle::gaussian(1, 4, rng).transpose();
        view(net.params(), net.layout().at(StudentNet::trunk_bias(0))).row(0) = b0.transpose();
        view(net.params(), net.layout().at(StudentNet::trunk_bias(1))).row(0) = b1.transpose();
        view(net.params(), net.layout().at(StudentNet::head_bias('h', 1))).row(0) = bh.transpose();
        const auto [h, l] = student_forward(net, Matrix::Zero(3, 5), 1);
        for (Eigen::Index i = 0; i < 3; ++i) {
            CHECK(h.row(i) == bh.transpose());
            CHECK(l.row(i).isZero());
        }
    }
}

TEST_CASE("empty input gives empty outputs") {
    StudentNet net(small_config());
    const auto [h, l] = student_forward(net, Matrix(0, 5), 0);
    CHECK(h.rows() == 0);
    CHECK(h.cols() == 4);
    CHECK(l.rows() == 0);
    TeacherNet t(net, 3);
    const Matrix ft = teacher_forward(t, Matrix(0, 5));
    CHECK(ft.rows() == 0);
    CHECK(ft.cols() == 6);
}

TEST_CASE("forward rejects bad groups and inputs") {
    StudentNet net(small_config());
    CHECK_THROWS_AS(student_forward(net, Matrix::Zero(1, 5), 3), Error);
    CHECK_THROWS_AS(student_forward(net, Matrix::Zero(1, 5), -1), Error);
    CHECK_THROWS_AS(student_forward(net, Matrix::Zero(1, 4), 0), Error);
    Matrix bad = Matrix::Zero(2, 5);
    bad(1, 2) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(student_forward(net, bad, 0), Error);
    TeacherNet t(net, 3);
    bad(1, 2) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(teacher_forward(t, bad), Error);
}

TEST_CASE("forward is a pure function") {
    StudentNet net(small_config());
    const Matrix x = Matrix::Random(6, 5);
    const auto a = student_forward(net, x, 2);
    const auto b = student_forward(net, x, 2);
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
}

TEST_CASE("analytic parameter gradients match central differences") {
    for (auto act : {Activation::tanh, Activation::relu}) {
        for (int point = 0; point < 4; ++point) {
            auto cfg = small_config(act);
            cfg.seed = 100 + point;
            StudentNet net(cfg);
            std::mt19937_64 rng(500 + point);
            net.params() = oracle::gaussian(net.params().size(), 1, rng, 0.7);
            const Matrix x = oracle::gaussian(6, 5, rng);
            const int group = point % cfg.groups;
            const Matrix gh = oracle::gaussian(6, 4, rng);
            const Matrix gl = oracle::gaussian(6, 4, rng);

            const auto pass = net.forward(x, group);
            const Vector analytic = net.backward(pass, gh, gl);

            Matrix numeric(analytic.size(), 1);
            const double eps = 1e-5;
            for (Eigen::Index p = 0; p < analytic.size(); ++p) {
                const double keep = net.params()(p);
                net.params()(p) = keep + eps;
                const double up = probe(net, x, group, gh, gl);
                net.params()(p) = keep - eps;
                const double down = probe(net, x, group, gh, gl);
                net.params()(p) = keep;
                numeric(p, 0) = (up - down) / (2 * eps);
            }
            CHECK(oracle::relative_error(analytic, numeric) < 1e-4);
        }
    }
}

TEST_CASE("backward only touches the trunk and the pass's own heads") {
    StudentNet net(small_config());
    const Matrix x = Matrix::Random(4, 5);
    const auto pass = net.forward(x, 1);
    const Vector g = net.backward(pass, Matrix::Ones(4, 4), Matrix::Ones(4, 4));
    for (char branch : {'h', 'l'}) {
        CHECK(view(g, net.layout().at(StudentNet::head_weight(branch, 0))).isZero());
        CHECK(view(g, net.layout().at(StudentNet::head_weight(branch, 2))).isZero());
        CHECK_FALSE(view(g, net.layout().at(StudentNet::head_weight(branch, 1))).isZero());
    }
    CHECK_THROWS_AS(net.backward(pass, Matrix::Ones(3, 4), Matrix::Ones(4, 4)), Error);
}

TEST_CASE("shared head init copies group 0 into every group") {
    auto cfg = small_config();
    StudentNet shared(cfg);
    const auto w0 = view(shared.params(), shared.layout().at(StudentNet::head_weight('h', 0)));
    CHECK(view(shared.params(), shared.layout().at(StudentNet::head_weight('h', 2))) == w0);
    cfg.shared_head_init = false;
    StudentNet separate(cfg);
    CHECK_FALSE(view(separate.params(), separate.layout().at(StudentNet::head_weight('h', 2))) ==
                view(separate.params(), separate.layout().at(StudentNet::head_weight('h', 0))));
}

TEST_CASE("teacher starts as a copy of the student") {
    StudentNet net(small_config());
    TeacherNet t(net, 4);
    CHECK(t.params().head(static_cast<Eigen::Index>(t.shared_size())) == net.params());
    const Matrix x = Matrix::Random(5, 5);
    CHECK(t.trunk(x) == net.trunk(x));
    CHECK(t.head_forward(x, 1) == student_forward(net, x, 1).first);
    const Matrix ft = teacher_forward(t, x);
    for (Eigen::Index i = 0; i < ft.rows(); ++i) CHECK(ft.row(i).norm() == doctest::Approx(1.0));
    CHECK_THROWS_AS(t.head_forward(x, 5), Error);

    auto cfg = small_config();
    cfg.teacher_normalize = false;
    StudentNet raw(cfg);
    TeacherNet traw(raw, 4);
    const Matrix fr = teacher_forward(traw, x);
    CHECK(fr.row(0).norm() != doctest::Approx(1.0));
}

TEST_CASE("ema_update examples") {
    StudentNet net(small_config());
    TeacherNet t(net, 4);
    const Vector proj = t.params().tail(t.params().size() - static_cast<Eigen::Index>(t.shared_size()));

    net.params().setConstant(4.0);
    t.params().head(static_cast<Eigen::Index>(t.shared_size())).setConstant(2.0);
    ema_update(t, net, 0.5);
    CHECK(t.params().head(static_cast<Eigen::Index>(t.shared_size())).isConstant(3.0));

    ema_update(t, net, 1.0);
    CHECK(t.params().head(static_cast<Eigen::Index>(t.shared_size())).isConstant(3.0));

    ema_update(t, net, 0.0);
    CHECK(t.params().head(static_cast<Eigen::Index>(t.shared_size())) == net.params());
    CHECK(t.params().tail(proj.size()) == proj);

    CHECK_THROWS_AS(ema_update(t, net, 1.5), Error);
    CHECK_THROWS_AS(ema_update(t, net, -0.1), Error);
    auto other = small_config();
    other.hidden_dim = 8;
    StudentNet wrong(other);
    CHECK_THROWS_AS(ema_update(t, wrong, 0.5), Error);
}

TEST_CASE("ema_update contracts toward the student") {
    std::mt19937_64 rng(31);
    StudentNet net(small_config());
    TeacherNet t(net, 4);
    net.params() = oracle::gaussian(net.params().size(), 1, rng);
    const auto n = static_cast<Eigen::Index>(t.shared_size());
    for (double m : {0.0, 0.3, 0.9, 0.999}) {
        t.params().head(n) = oracle::gaussian(n, 1, rng);
        const double before = (t.params().head(n) - net.params()).norm();
        ema_update(t, net, m);
        const double after = (t.params().head(n) - net.params()).norm();
        CHECK(after == doctest::Approx(m * before).epsilon(1e-12));
    }
    // Frozen student: geometric decay.
    t.params().head(n) = oracle::gaussian(n, 1, rng);
    const double start = (t.params().head(n) - net.params()).norm();
    for (int step = 0; step < 50; ++step) ema_update(t, net, 0.9);
    CHECK((t.params().head(n) - net.params()).norm() == doctest::Approx(start * std::pow(0.9, 50)).epsilon(1e-9));
}

TEST_CASE("model config canonical text round-trips") {
    auto c = small_config(Activation::relu);
    c.head_init_scale = 0.3;
    c.shared_head_init = false;
    CHECK(ModelConfig::parse_canonical(c.canonical_text()) == c);
    CHECK_THROWS_AS(ModelConfig::parse_canonical("bogus=1\n"), ParseError);
    CHECK_THROWS_AS(ModelConfig::parse_canonical("activation=gelu\n"), ParseError);
    ModelConfig bad;
    bad.groups = 0;
    CHECK_THROWS_AS(StudentNet{bad}, ValidationError);
}

TEST_CASE("parameter checkpoints round-trip byte for byte") {
    StudentNet net(small_config());
    TeacherNet t(net, 8);
    const auto file = model_checkpoint(net, t);
    std::ostringstream os;
    file.write(os);
    std::istringstream is(os.str());
    const auto back = CheckpointFile::read(is);
    std::ostringstream again;
    back.write(again);
    CHECK(again.str() == os.str());

    StudentNet restored(ModelConfig::parse_canonical(back.config_text));
    restored.params().setZero();
    load_params(back, "student", restored.layout(), restored.params());
    CHECK(restored.params() == net.params());
    TeacherNet t2(restored, 1);
    load_params(back, "teacher", t2.layout(), t2.params());
    CHECK(t2.params() == t.params());

    CheckpointFile missing;
    Vector p;
    CHECK_THROWS_AS(load_params(missing, "student", net.layout(), p), ParseError);
}

TEST_CASE("layout bookkeeping") {
    ParamLayout l;
    l.add("a", 2, 3);
    l.add("b", 1, 4);
    CHECK(l.total() == 10);
    CHECK(l.at("b").offset == 6);
    CHECK_THROWS_AS(l.add("a", 1, 1), Error);
    CHECK_THROWS_AS(l.at("c"), Error);
    Vector flat = Vector::LinSpaced(10, 0, 9);
    CHECK(view(flat, l.at("a"))(1, 0) == 3.0);
}

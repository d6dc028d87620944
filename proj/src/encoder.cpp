#include "msgcel/encoder.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "msgcel/binary_io.hpp"

namespace msgcel {

// --- ModelConfig -------------------------------------------------------------

void ModelConfig::validate() const {
    if (feature_dim <= 0 || hidden_dim <= 0 || embed_dim <= 0 || teacher_dim <= 0) {
        throw ValidationError("model: dimensions must be positive");
    }
    if (trunk_layers < 1) throw ValidationError("model: trunk_layers must be >= 1");
    if (groups < 1) throw ValidationError("model: groups must be >= 1");
    if (!(head_init_scale > 0.0)) throw ValidationError("model: head_init_scale must be > 0");
}

std::string ModelConfig::canonical_text() const {
    std::ostringstream os;
    os << "feature_dim=" << feature_dim << '\n'
       << "hidden_dim=" << hidden_dim << '\n'
       << "trunk_layers=" << trunk_layers << '\n'
       << "groups=" << groups << '\n'
       << "embed_dim=" << embed_dim << '\n'
       << "teacher_dim=" << teacher_dim << '\n'
       << "activation=" << (activation == Activation::relu ? "relu" : "tanh") << '\n'
       << "head_init_scale=" << io::format_double(head_init_scale) << '\n'
       << "shared_head_init=" << (shared_head_init ? 1 : 0) << '\n'
       << "teacher_normalize=" << (teacher_normalize ? 1 : 0) << '\n'
       << "seed=" << seed << '\n';
    return os.str();
}

ModelConfig ModelConfig::parse_canonical(const std::string& text) {
    ModelConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("model config: bad line '" + line + "'");
        const auto key = line.substr(0, eq);
        const auto value = line.substr(eq + 1);
        if (key == "feature_dim") c.feature_dim = std::stoi(value);
        else if (key == "hidden_dim") c.hidden_dim = std::stoi(value);
        else if (key == "trunk_layers") c.trunk_layers = std::stoi(value);
        else if (key == "groups") c.groups = std::stoi(value);
        else if (key == "embed_dim") c.embed_dim = std::stoi(value);
        else if (key == "teacher_dim") c.teacher_dim = std::stoi(value);
        else if (key == "activation") {
            if (value == "relu") c.activation = Activation::relu;
            else if (value == "tanh") c.activation = Activation::tanh;
            else throw ParseError("model config: unknown activation '" + value + "'");
        } else if (key == "head_init_scale") c.head_init_scale = std::stod(value);
        else if (key == "shared_head_init") c.shared_head_init = value == "1";
        else if (key == "teacher_normalize") c.teacher_normalize = value == "1";
        else if (key == "seed") c.seed = std::stoull(value);
        else throw ParseError("model config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

// --- ParamLayout -------------------------------------------------------------

void ParamLayout::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (contains(name)) throw Error("duplicate parameter " + name);
    ParamSlice s{total_, rows, cols};
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, s);
    total_ += s.size();
}

const ParamSlice& ParamLayout::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter " + name);
    return entries_[it->second].second;
}

bool ParamLayout::operator==(const ParamLayout& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto& [na, a] = entries_[i];
        const auto& [nb, b] = o.entries_[i];
        if (na != nb || a.offset != b.offset || a.rows != b.rows || a.cols != b.cols) return false;
    }
    return true;
}

// --- Activations -------------------------------------------------------------

namespace {

Matrix activate(const Matrix& z, Activation a) {
    if (a == Activation::relu) return z.cwiseMax(0.0);
    return z.array().tanh().matrix();
}

// Derivative expressed through the pre-activation; relu'(0) = 0.
Matrix activate_grad(const Matrix& z, const Matrix& out, Activation a) {
    if (a == Activation::relu) return (z.array() > 0.0).cast<double>().matrix();
    return (1.0 - out.array().square()).matrix();
}

void check_inputs(const Matrix& inputs, int feature_dim) {
    if (inputs.cols() != feature_dim) {
        throw Error("encoder: expected " + std::to_string(feature_dim) + " input columns, got " +
                    std::to_string(inputs.cols()));
    }
    if (!inputs.allFinite()) throw Error("encoder: non-finite input");
}

void fill_gaussian(MatrixMap m, double sd, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, sd);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = dist(rng);
}

ParamLayout student_layout(const ModelConfig& c) {
    ParamLayout layout;
    for (int layer = 0; layer < c.trunk_layers; ++layer) {
        layout.add(StudentNet::trunk_weight(layer), layer == 0 ? c.feature_dim : c.hidden_dim, c.hidden_dim);
        layout.add(StudentNet::trunk_bias(layer), 1, c.hidden_dim);
    }
    for (int m = 0; m < c.groups; ++m) {
        for (char branch : {'h', 'l'}) {
            layout.add(StudentNet::head_weight(branch, m), c.hidden_dim, c.embed_dim);
            layout.add(StudentNet::head_bias(branch, m), 1, c.embed_dim);
        }
    }
    return layout;
}

Matrix run_trunk(const ModelConfig& c, const ParamLayout& layout, const Vector& params, const Matrix& inputs,
                 std::vector<Matrix>* pre, std::vector<Matrix>* post) {
    Matrix a = inputs;
    for (int layer = 0; layer < c.trunk_layers; ++layer) {
        const auto w = view(params, layout.at(StudentNet::trunk_weight(layer)));
        const auto b = view(params, layout.at(StudentNet::trunk_bias(layer)));
        Matrix z = a * w;
        z.rowwise() += b.row(0);
        a = activate(z, c.activation);
        if (pre) pre->push_back(std::move(z));
        if (post) post->push_back(a);
    }
    return a;
}

Matrix affine(const Matrix& x, ConstMatrixMap w, ConstMatrixMap b) {
    Matrix y = x * w;
    y.rowwise() += b.row(0);
    return y;
}

}  // namespace

// --- StudentNet --------------------------------------------------------------

StudentNet::StudentNet(const ModelConfig& config) : config_(config) {
    config_.validate();
    layout_ = student_layout(config_);
    params_ = Vector::Zero(static_cast<Eigen::Index>(layout_.total()));

    std::mt19937_64 rng(config_.seed);
    for (int layer = 0; layer < config_.trunk_layers; ++layer) {
        const auto& s = layout_.at(trunk_weight(layer));
        const double gain = config_.activation == Activation::relu ? std::sqrt(2.0) : 1.0;
        fill_gaussian(view(params_, s), gain / std::sqrt(static_cast<double>(s.rows)), rng);
    }
    const double head_sd = config_.head_init_scale / std::sqrt(static_cast<double>(config_.hidden_dim));
    for (int m = 0; m < config_.groups; ++m) {
        for (char branch : {'h', 'l'}) {
            auto w = view(params_, layout_.at(head_weight(branch, m)));
            if (config_.shared_head_init && m > 0) {
                w = view(params_, layout_.at(head_weight(branch, 0)));
            } else {
                fill_gaussian(w, head_sd, rng);
            }
        }
    }
}

Matrix StudentNet::trunk(const Matrix& inputs) const {
    check_inputs(inputs, config_.feature_dim);
    return run_trunk(config_, layout_, params_, inputs, nullptr, nullptr);
}

StudentPass StudentNet::forward(const Matrix& inputs, int group) const {
    if (group < 0 || group >= config_.groups) {
        throw Error("student_forward: group " + std::to_string(group) + " out of range [0, " +
                    std::to_string(config_.groups) + ")");
    }
    check_inputs(inputs, config_.feature_dim);
    StudentPass pass;
    pass.group = group;
    pass.input = inputs;
    const Matrix top = run_trunk(config_, layout_, params_, inputs, &pass.pre, &pass.post);
    pass.h = affine(top, view(params_, layout_.at(head_weight('h', group))),
                    view(params_, layout_.at(head_bias('h', group))));
    pass.l = affine(top, view(params_, layout_.at(head_weight('l', group))),
                    view(params_, layout_.at(head_bias('l', group))));
    return pass;
}

Vector StudentNet::backward(const StudentPass& pass, const Matrix& grad_h, const Matrix& grad_l) const {
    if (grad_h.rows() != pass.h.rows() || grad_h.cols() != pass.h.cols() || grad_l.rows() != pass.l.rows() ||
        grad_l.cols() != pass.l.cols()) {
        throw Error("student backward: gradient shape mismatch");
    }
    Vector grad = Vector::Zero(params_.size());
    const Matrix& top = pass.post.back();
    const int g = pass.group;

    Matrix d_top = Matrix::Zero(top.rows(), top.cols());
    const std::pair<char, const Matrix*> branches[] = {{'h', &grad_h}, {'l', &grad_l}};
    for (const auto& [branch, dy] : branches) {
        view(grad, layout_.at(head_weight(branch, g))).noalias() += top.transpose() * *dy;
        view(grad, layout_.at(head_bias(branch, g))).row(0) += dy->colwise().sum();
        d_top.noalias() += *dy * view(params_, layout_.at(head_weight(branch, g))).transpose();
    }

    Matrix d_act = std::move(d_top);
    for (int layer = config_.trunk_layers - 1; layer >= 0; --layer) {
        const auto idx = static_cast<std::size_t>(layer);
        const Matrix dz = d_act.cwiseProduct(activate_grad(pass.pre[idx], pass.post[idx], config_.activation));
        const Matrix& below = layer == 0 ? pass.input : pass.post[idx - 1];
        view(grad, layout_.at(trunk_weight(layer))).noalias() += below.transpose() * dz;
        view(grad, layout_.at(trunk_bias(layer))).row(0) += dz.colwise().sum();
        if (layer > 0) d_act = dz * view(params_, layout_.at(trunk_weight(layer))).transpose();
    }
    return grad;
}

std::pair<Matrix, Matrix> student_forward(const StudentNet& net, const Matrix& inputs, int group) {
    auto pass = net.forward(inputs, group);
    return {std::move(pass.h), std::move(pass.l)};
}

// --- TeacherNet --------------------------------------------------------------

TeacherNet::TeacherNet(const StudentNet& student, std::uint64_t seed)
    : config_(student.config()), layout_(student.layout()), shared_size_(student.layout().total()) {
    layout_.add("teacher.proj.weight", config_.hidden_dim, config_.teacher_dim);
    layout_.add("teacher.proj.bias", 1, config_.teacher_dim);
    params_ = Vector::Zero(static_cast<Eigen::Index>(layout_.total()));
    params_.head(static_cast<Eigen::Index>(shared_size_)) = student.params();
    std::mt19937_64 rng(seed);
    fill_gaussian(view(params_, layout_.at("teacher.proj.weight")), 1.0 / std::sqrt(static_cast<double>(config_.hidden_dim)),
                  rng);
}

Matrix TeacherNet::trunk(const Matrix& inputs) const {
    check_inputs(inputs, config_.feature_dim);
    return run_trunk(config_, layout_, params_, inputs, nullptr, nullptr);
}

Matrix TeacherNet::forward(const Matrix& inputs) const {
    const Matrix top = trunk(inputs);
    Matrix out = affine(top, view(params_, layout_.at("teacher.proj.weight")),
                        view(params_, layout_.at("teacher.proj.bias")));
    if (config_.teacher_normalize) {
        for (Eigen::Index i = 0; i < out.rows(); ++i) {
            const double norm = out.row(i).norm();
            if (norm > 0.0) out.row(i) /= norm;
        }
    }
    return out;
}

Matrix TeacherNet::head_forward(const Matrix& inputs, int group) const {
    if (group < 0 || group >= config_.groups) throw Error("teacher head: group out of range");
    const Matrix top = trunk(inputs);
    return affine(top, view(params_, layout_.at(StudentNet::head_weight('h', group))),
                  view(params_, layout_.at(StudentNet::head_bias('h', group))));
}

Matrix teacher_forward(const TeacherNet& net, const Matrix& inputs) { return net.forward(inputs); }

void ema_update(TeacherNet& teacher, const StudentNet& student, double momentum) {
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw Error("ema_update: momentum must be in [0,1]");
    const auto n = static_cast<Eigen::Index>(teacher.shared_size());
    if (student.params().size() != n) {
        throw Error("ema_update: parameter shape mismatch");
    }
    for (const auto& [name, slice] : student.layout().entries()) {
        if (!teacher.layout().contains(name)) throw Error("ema_update: teacher lacks " + name);
        const auto& t = teacher.layout().at(name);
        if (t.offset != slice.offset || t.rows != slice.rows || t.cols != slice.cols) {
            throw Error("ema_update: shape mismatch on " + name);
        }
    }
    auto shared = teacher.params().head(n);
    shared = momentum * shared + (1.0 - momentum) * student.params();
}

// --- Checkpoint helpers ------------------------------------------------------

void save_params(CheckpointFile& file, const std::string& prefix, const ParamLayout& layout, const Vector& params) {
    for (const auto& [name, slice] : layout.entries()) {
        const auto v = view(params, slice);
        file.put(prefix + "/" + name, std::vector<double>(v.data(), v.data() + v.size()));
    }
}

void load_params(const CheckpointFile& file, const std::string& prefix, const ParamLayout& layout, Vector& params) {
    params.resize(static_cast<Eigen::Index>(layout.total()));
    for (const auto& [name, slice] : layout.entries()) {
        const auto& v = file.f64(prefix + "/" + name);
        if (v.size() != slice.size()) throw ParseError("checkpoint: wrong size for " + prefix + "/" + name);
        std::copy(v.begin(), v.end(), params.data() + slice.offset);
    }
}

CheckpointFile model_checkpoint(const StudentNet& student, const TeacherNet& teacher) {
    CheckpointFile file;
    file.config_text = student.config().canonical_text();
    save_params(file, "student", student.layout(), student.params());
    save_params(file, "teacher", teacher.layout(), teacher.params());
    return file;
}

}  // namespace msgcel

#include <doctest.h>

#include <random>
#include <sstream>

#include "msgcel/retrieval.hpp"
#include "oracles.hpp"

using namespace msgcel;

namespace {

std::string bytes_of(const EmbeddingStore& s) {
    std::ostringstream os;
    s.write(os);
    return os.str();
}

RowVector as_query(const EmbeddingStore& s, Eigen::Index row) { return s.vectors.row(row).cast<double>(); }

std::vector<float> to_floats(const RowVector& q) {
    std::vector<float> out;
    for (Eigen::Index i = 0; i < q.size(); ++i) out.push_back(static_cast<float>(q(i)));
    return out;
}

}  // namespace

TEST_CASE("store file layout") {
    EmbeddingStore s;
    s.vectors.resize(2, 3);
    s.vectors << 1.0f, 2.0f, 3.0f, -1.0f, 0.5f, 0.0f;
    s.ids = {7, 3};
    const auto bytes = bytes_of(s);
    CHECK(bytes.size() == 4 + 4 + 4 + 8 + 2 * 3 * 4 + 2 * 8);
    CHECK(bytes.substr(0, 4) == "MSE1");
    CHECK(static_cast<unsigned char>(bytes[8]) == 3);
    CHECK(static_cast<unsigned char>(bytes[12]) == 2);
    CHECK(static_cast<unsigned char>(bytes[bytes.size() - 16]) == 7);
    std::istringstream is(bytes);
    const auto back = EmbeddingStore::read(is);
    CHECK(back == s);
    CHECK(bytes_of(back) == bytes);

    std::istringstream bad("MSE0....");
    CHECK_THROWS_WITH_AS(EmbeddingStore::read(bad), "MSE1 expected", ParseError);
    std::istringstream cut(bytes.substr(0, bytes.size() - 1));
    CHECK_THROWS_AS(EmbeddingStore::read(cut), ParseError);
    s.ids = {7, 7};
    CHECK_THROWS_AS(s.validate(), Error);
    s.ids = {7};
    CHECK_THROWS_AS(s.validate(), Error);
}

TEST_CASE("embedding routes through each object's group head") {
    SynthConfig sc;
    sc.n_objects = 120;
    sc.feature_dim = 6;
    const auto corpus = synth_generate(sc);
    const auto groups = partition_by_scale(corpus.table, 3);
    ModelConfig mc;
    mc.feature_dim = 6;
    mc.hidden_dim = 10;
    mc.embed_dim = 5;
    mc.groups = 3;
    mc.shared_head_init = false;
    StudentNet net(mc);

    const auto store = embed_all(net, corpus.table, corpus.features, groups);
    REQUIRE(store.count() == corpus.table.size());
    CHECK(store.dim() == 5);
    for (std::size_t i = 0; i < corpus.table.size(); ++i) {
        const auto& r = corpus.table.records()[i];
        CHECK(store.ids[i] == r.object_id);
        const Matrix x = corpus.features.observed.row(static_cast<Eigen::Index>(r.feature_ref));
        const auto [h, l] = student_forward(net, x, groups.group_of(r.object_id));
        CHECK(store.vectors.row(static_cast<Eigen::Index>(i)) == h.row(0).cast<float>());
        CHECK(embed_features(net, x.row(0), groups.group_of(r.object_id), HeadMode::h) == h.row(0));
    }
    CHECK(bytes_of(store) == bytes_of(embed_all(net, corpus.table, corpus.features, groups)));

    EmbedOptions fixed;
    fixed.fixed_group = 2;
    fixed.head = HeadMode::hl;
    const auto both = embed_all(net, corpus.table, corpus.features, groups, fixed);
    CHECK(both.dim() == 10);
    const auto& r0 = corpus.table.records()[0];
    const Matrix x0 = corpus.features.observed.row(static_cast<Eigen::Index>(r0.feature_ref));
    const auto [h2, l2] = student_forward(net, x0, 2);
    CHECK(both.vectors.row(0).head(5) == h2.row(0).cast<float>());
    CHECK(both.vectors.row(0).tail(5) == l2.row(0).cast<float>());

    fixed.fixed_group = 3;
    CHECK_THROWS_AS(embed_all(net, corpus.table, corpus.features, groups, fixed), Error);
    const auto empty = embed_all(net, ObjectTable{}, corpus.features, groups);
    CHECK(empty.count() == 0);
    CHECK(empty.vectors.rows() == 0);
}

TEST_CASE("query examples") {
    std::mt19937_64 rng(1);
    auto g = oracle::random_gallery(3, 4, rng, false);
    const auto first = query(g.store, g.table, as_query(g.store, 1), 10, 99);
    CHECK(first.query_id == 99);
    CHECK(first.hits.size() == 3);
    CHECK(first.hits[0].object_id == g.store.ids[1]);
    CHECK(first.hits[0].distance == 0.0);
    CHECK(first.hits[0].image_id == g.table.at(g.store.ids[1]).image_id);
    CHECK(first.hits[0].bbox == g.table.at(g.store.ids[1]).bbox);
    for (std::size_t i = 1; i < first.hits.size(); ++i) CHECK(first.hits[i - 1].distance <= first.hits[i].distance);

    CHECK_THROWS_AS(query(g.store, g.table, RowVector::Zero(3), 1), Error);
    CHECK_THROWS_AS(query(g.store, g.table, RowVector::Zero(4), 0), Error);
    CHECK_THROWS_AS(query(EmbeddingStore{}, g.table, RowVector::Zero(4), 1), Error);
}

TEST_CASE("query matches a brute-force full sort") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 40; ++trial) {
        const bool integer = trial % 2 == 0;
        const std::size_t n = 1 + rng() % 300;
        auto g = oracle::random_gallery(n, 1 + static_cast<int>(rng() % 8), rng, integer);
        RowVector q = oracle::gaussian(1, g.store.dim(), rng);
        if (integer) q = q.array().round();
        const std::size_t k = 1 + rng() % (n + 5);
        const auto got = query(g.store, g.table, q, k);
        const auto want = oracle::topk(g.store.vectors, g.store.ids, to_floats(q), k);
        REQUIRE(got.hits.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) {
            CHECK(got.hits[i].object_id == want[i].id);
            CHECK(got.hits[i].distance == doctest::Approx(want[i].dist).epsilon(1e-12));
        }
    }
}

TEST_CASE("rank_images examples") {
    RankedResult r;
    r.hits = {{1, 0.1, 10, {}}, {2, 0.2, 20, {}}, {3, 0.3, 10, {}}};
    const auto imgs = rank_images(r);
    REQUIRE(imgs.size() == 2);
    CHECK(imgs[0].image_id == 10);
    CHECK(imgs[0].best_rank == 0);
    CHECK(imgs[0].best_object == 1);
    CHECK(imgs[1].image_id == 20);
    CHECK(imgs[1].best_rank == 1);

    RankedResult one;
    one.hits = {{5, 1.0, 4, {}}};
    CHECK(rank_images(one).size() == 1);
    CHECK(rank_images(RankedResult{}).empty());
}

TEST_CASE("rank_images agrees with the group-by-image oracle") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        auto g = oracle::random_gallery(1 + rng() % 80, 3, rng, trial % 2 == 0);
        RowVector q = oracle::gaussian(1, 3, rng);
        const auto r = query(g.store, g.table, q, g.store.count());
        const auto imgs = rank_images(r);
        const auto want = oracle::image_order(r);
        REQUIRE(imgs.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) CHECK(imgs[i].image_id == want[i]);
    }
}

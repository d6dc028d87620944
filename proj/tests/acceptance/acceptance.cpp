// Prints one PASS/FAIL line per acceptance criterion. Exits 0 once every
// criterion has been evaluated; pass --strict to exit 1 on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "msgcel/config.hpp"
#include "msgcel/losses.hpp"
#include "msgcel/metrics.hpp"
#include "msgcel/pipeline.hpp"
#include "msgcel/retrieval.hpp"
#include "msgcel/sampling.hpp"
#include "msgcel/trainer.hpp"
#include "oracles.hpp"

using namespace msgcel;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = true;
    std::string detail;
    std::vector<std::string> failures;

    void expect(bool cond, const std::string& what) {
        if (!cond) {
            pass = false;
            if (failures.size() < 5) failures.push_back(what);
        }
    }
};

std::string fmt_double(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string fmt_sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

// --- 1. gradients ------------------------------------------------------------

SimilarityMatrix random_similarity(Eigen::Index rows, Eigen::Index cols, std::vector<ObjectId> ids,
                                   std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    SimilarityMatrix s;
    s.values.resize(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index l = 0; l < cols; ++l) s.values(i, l) = u(rng);
        s.values.row(i) /= s.values.row(i).sum();
    }
    s.row_ids = std::move(ids);
    return s;
}

std::vector<GroupEmbeddings> random_groups(std::mt19937_64& rng, const LossConfig& cfg, int k) {
    const std::vector<std::vector<ObjectId>> ids = {{1, 2, 3, 4, 5}, {3, 4, 6, 7}, {1, 4, 8, 9, 10}, {2, 4, 11, 12}};
    std::vector<GroupEmbeddings> g;
    for (int m = 0; m < k; ++m) {
        GroupEmbeddings e;
        e.ids = ids[static_cast<std::size_t>(m)];
        const auto n = static_cast<Eigen::Index>(e.ids.size());
        e.h = oracle::hinge_safe(n, 3, rng, cfg.delta);
        e.l = oracle::hinge_safe(n, 3, rng, cfg.delta);
        e.teacher = oracle::gaussian(n, 5, rng, 0.5);
        g.push_back(std::move(e));
    }
    return g;
}

Outcome gradient_suite() {
    Outcome o;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(101);
    const int points = 20;
    double worst = 0.0;
    auto track = [&](double err, const std::string& what) {
        worst = std::max(worst, err);
        o.expect(err < 1e-3, what + " rel err " + fmt_double(err, 6));
    };

    for (int p = 0; p < points; ++p) {
        LossConfig cfg;
        const Matrix f = oracle::hinge_safe(6, 4, rng, cfg.delta);
        const Matrix t = oracle::gaussian(6, 5, rng, 0.5);
        const auto r = relaxed_contrastive(f, t, cfg);
        track(oracle::relative_error(
                  r.grad, oracle::numeric_gradient(
                              [&](const Matrix& x) { return relaxed_contrastive(x, t, cfg).value; }, f)),
              "relaxed_contrastive");
    }
    for (int p = 0; p < points; ++p) {
        LossConfig cfg;
        cfg.full_grad = p % 2 == 1;
        const Matrix fh = oracle::gaussian(5, 4, rng);
        const Matrix fl = oracle::gaussian(5, 4, rng);
        const auto r = self_distill(fh, fl, cfg);
        track(oracle::relative_error(
                  r.grad_h, oracle::numeric_gradient(
                                [&](const Matrix& x) { return self_distill(x, fl, cfg).value; }, fh)),
              "self_distill h");
        if (cfg.full_grad) {
            track(oracle::relative_error(
                      r.grad_l, oracle::numeric_gradient(
                                    [&](const Matrix& x) { return self_distill(fh, x, cfg).value; }, fl)),
                  "self_distill l");
        }
    }
    for (int p = 0; p < points; ++p) {
        const auto a = random_similarity(4, 5, {10, 11, 12, 13}, rng);
        const auto b = random_similarity(3, 5, {12, 10, 20}, rng);
        const std::vector<ObjectId> shared = {10, 12};
        const auto r = ckd_pair(a, b, shared);
        track(oracle::relative_error(r.grad_a, oracle::numeric_gradient(
                                                   [&](const Matrix& x) {
                                                       auto s = a;
                                                       s.values = x;
                                                       return ckd_pair(s, b, shared).value;
                                                   },
                                                   a.values)),
              "ckd_pair a");
        track(oracle::relative_error(r.grad_b, oracle::numeric_gradient(
                                                   [&](const Matrix& x) {
                                                       auto s = b;
                                                       s.values = x;
                                                       return ckd_pair(a, s, shared).value;
                                                   },
                                                   b.values)),
              "ckd_pair b");
    }
    for (int p = 0; p < points; ++p) {
        LossConfig cfg;
        cfg.full_grad = p % 2 == 1;
        const auto groups = random_groups(rng, cfg, 3);
        const Matrix c = oracle::gaussian(4, 3, rng);
        const auto r = total_loss(groups, c, cfg);
        for (std::size_t m = 0; m < groups.size(); ++m) {
            track(oracle::relative_error(r.grad_h[m], oracle::numeric_gradient(
                                                          [&](const Matrix& x) {
                                                              auto g = groups;
                                                              g[m].h = x;
                                                              return total_loss(g, c, cfg).terms.total;
                                                          },
                                                          groups[m].h)),
                  "total_loss h");
            if (cfg.full_grad) {
                track(oracle::relative_error(r.grad_l[m], oracle::numeric_gradient(
                                                              [&](const Matrix& x) {
                                                                  auto g = groups;
                                                                  g[m].l = x;
                                                                  return total_loss(g, c, cfg).terms.total;
                                                              },
                                                              groups[m].l)),
                      "total_loss l");
            }
        }
    }
    const double secs = seconds_since(t0);
    o.expect(secs < 30.0, "runtime " + fmt_double(secs, 1) + " s");
    o.detail = "4 losses x 20 points, worst rel err " + fmt_sci(worst) + ", " + fmt_double(secs, 2) + " s";
    return o;
}

// --- 2. identities -----------------------------------------------------------

Outcome loss_identities() {
    Outcome o;
    LossConfig cfg;
    std::mt19937_64 rng(202);

    double worst_self = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix f = oracle::gaussian(2 + trial % 7, 4, rng);
        worst_self = std::max(worst_self, std::abs(self_distill(f, f, cfg).value));
    }
    o.expect(worst_self < 1e-12, "self_distill(F,F) = " + std::to_string(worst_self));

    Matrix tri(3, 2);
    tri << 0, 0, 5, 0, 2.5, 5 * std::sqrt(3.0) / 2;  // every relative distance is 1.5
    Matrix far = Matrix::Zero(3, 2);
    far(1, 0) = 100.0;
    far(2, 1) = 100.0;
    const auto con = relaxed_contrastive(tri, far, cfg);
    o.expect(con.value == 0.0 && con.grad.isZero(), "relaxed_contrastive with w~0, d>=delta");

    SimilarityMatrix u;
    u.values = Matrix::Constant(3, 4, 0.25);
    u.row_ids = {1, 2, 3};
    const std::vector<ObjectId> ids = {1, 2, 3};
    const double uniform = ckd_pair(u, u, ids).value;
    o.expect(std::abs(uniform - std::log(4.0)) < 1e-9, "uniform L=4 ckd_pair");
    for (int trial = 0; trial < 20; ++trial) {
        const auto s = random_similarity(3, 6, ids, rng);
        double entropy = 0.0;
        for (Eigen::Index i = 0; i < 3; ++i)
            for (Eigen::Index l = 0; l < 6; ++l) entropy -= s.values(i, l) * std::log(s.values(i, l));
        o.expect(std::abs(ckd_pair(s, s, ids).value - entropy / 3.0) < 1e-12, "ckd_pair(S,S) = entropy");
    }

    o.expect(cfg.sigma == 3.0 && cfg.delta == 1.0, "default sigma 3, delta 1");
    Matrix t(2, 3);
    t << 0, 0, 0, 1, 1, 1;  // squared distance 3
    const Matrix w = teacher_similarity(t, cfg.sigma);
    const double w_err = std::abs(w(0, 1) - std::exp(-1.0));
    o.expect(w_err < 1e-12, "w at squared distance 3");

    std::vector<SimilarityMatrix> four;
    for (int m = 0; m < 4; ++m) four.push_back(random_similarity(3, 4, ids, rng));
    const int pairs = ckd_total(four).pair_count;
    o.expect(pairs == 6, "k=4 pair count " + std::to_string(pairs));
    const auto groups = random_groups(rng, cfg, 4);
    o.expect(total_loss(groups, oracle::gaussian(5, 3, rng), cfg).ckd_pairs == 6, "total_loss k=4 pairs");

    o.detail = "self " + fmt_sci(worst_self) + ", ln4 err " + fmt_sci(std::abs(uniform - std::log(4.0))) +
               ", w err " + fmt_sci(w_err) + ", k=4 pairs " + std::to_string(pairs);
    return o;
}

// --- 3. metrics --------------------------------------------------------------

Outcome metric_oracle() {
    Outcome o;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(303);
    const EvalConfig cfg;
    int compared = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto m = oracle::random_metric_instance(rng);
        const auto gt = build_ground_truth(m.gallery, m.queries, cfg);
        double score[2][2] = {};
        for (Level level : {Level::object, Level::image}) {
            const double thr = level_threshold(cfg, level);
            const auto want = oracle::score(m.truth, m.query_class, m.rankings, thr, cfg.iou_image);
            const double r = recall_at_1(m.results, gt, cfg, level);
            const auto ap = mean_ap(m.results, gt, cfg, level);
            o.expect(r == want.recall, "recall instance " + std::to_string(trial));
            o.expect(ap.has_value() == (want.scored > 0), "scorable instance " + std::to_string(trial));
            if (ap) o.expect(*ap == want.map, "map instance " + std::to_string(trial));
            score[level == Level::image][0] = r;
            score[level == Level::image][1] = ap.value_or(0.0);
            compared += 2;
        }
        o.expect(score[1][0] >= score[0][0] && score[1][1] >= score[0][1],
                 "I >= O on instance " + std::to_string(trial));
    }
    const double secs = seconds_since(t0);
    o.expect(secs < 60.0, "runtime " + fmt_double(secs, 1) + " s");
    o.detail = "100 instances, " + std::to_string(compared) + " exact comparisons, " + fmt_double(secs, 2) + " s";
    return o;
}

// --- 4. retrieval ------------------------------------------------------------

std::string store_bytes(const EmbeddingStore& s) {
    std::ostringstream os;
    s.write(os);
    return os.str();
}

Outcome exact_retrieval() {
    Outcome o;
    std::mt19937_64 rng(404);
    std::size_t largest = 0;
    int queries = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const bool integer = trial % 2 == 0;
        const std::size_t n = trial < 3 ? 10000 : 1 + rng() % 10000;
        largest = std::max(largest, n);
        auto g = oracle::random_gallery(n, 1 + static_cast<int>(rng() % 16), rng, integer);
        for (int qi = 0; qi < 3; ++qi) {
            RowVector q = oracle::gaussian(1, g.store.dim(), rng);
            if (integer) q = q.array().round();
            const std::size_t k = 1 + rng() % (n + 5);
            const auto got = query(g.store, g.table, q, k);
            std::vector<float> qf(static_cast<std::size_t>(q.size()));
            for (Eigen::Index c = 0; c < q.size(); ++c) qf[static_cast<std::size_t>(c)] = static_cast<float>(q(c));
            const auto want = oracle::topk(g.store.vectors, g.store.ids, qf, k);
            bool same = got.hits.size() == want.size();
            for (std::size_t i = 0; same && i < want.size(); ++i)
                same = got.hits[i].object_id == want[i].id && std::abs(got.hits[i].distance - want[i].dist) <=
                                                                   1e-12 * std::max(1.0, want[i].dist);
            o.expect(same, "store " + std::to_string(trial) + " query " + std::to_string(qi));
            ++queries;
        }
    }

    SynthConfig sc;
    sc.n_objects = 2000;
    const auto a = synth_generate(sc);
    const auto b = synth_generate(sc);
    ModelConfig mc;
    mc.feature_dim = sc.feature_dim;
    const StudentNet net_a(mc);
    const StudentNet net_b(mc);
    const auto ga = partition_by_scale(a.table, mc.groups);
    const auto gb = partition_by_scale(b.table, mc.groups);
    const auto bytes_a = store_bytes(embed_all(net_a, a.table, a.features, ga));
    const auto bytes_b = store_bytes(embed_all(net_b, b.table, b.features, gb));
    o.expect(bytes_a == bytes_b, "store bytes differ across runs");
    const auto path = std::filesystem::temp_directory_path() / "msgcel_acceptance_store.mse";
    embed_all(net_a, a.table, a.features, ga).write(path);
    const auto reread = store_bytes(EmbeddingStore::read(path));
    std::filesystem::remove(path);
    o.expect(reread == bytes_a, "store file round trip");

    o.detail = "50 stores (max " + std::to_string(largest) + " rows), " + std::to_string(queries) +
               " queries, store of " + std::to_string(bytes_a.size()) + " bytes identical across runs";
    return o;
}

// --- 5. sampler --------------------------------------------------------------

ObjectTable random_table(int n, std::mt19937_64& rng, bool coarse) {
    std::uniform_real_distribution<double> side(2.0, 90.0);
    std::vector<ObjectRecord> records;
    for (int i = 0; i < n; ++i) {
        const double w = coarse ? static_cast<double>(2 + rng() % 3) : side(rng);
        const double h = coarse ? 4.0 : side(rng);
        records.push_back(make_record(1000 + 3 * i, i / 4, Box{1.0, 1.0, w, h}, std::nullopt, static_cast<std::size_t>(i)));
    }
    return ObjectTable(std::move(records));
}

Outcome sampler_suite() {
    Outcome o;
    std::mt19937_64 rng(505);

    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 600);
        const int k = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(std::min(n, 8)));
        const auto t = random_table(n, rng, trial % 3 == 0);
        const auto g = partition_by_scale(t, k);
        std::size_t lo = t.size();
        std::size_t hi = 0;
        for (const auto& m : g.members) {
            lo = std::min(lo, m.size());
            hi = std::max(hi, m.size());
        }
        o.expect(hi - lo <= 1, "group sizes n=" + std::to_string(n) + " k=" + std::to_string(k));
    }

    int knn_rows = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const int n = trial == 0 ? 500 : 10 + static_cast<int>(rng() % 491);
        const int k = 1 + static_cast<int>(rng() % 4);
        const auto t = random_table(n, rng, false);
        const auto g = partition_by_scale(t, k);
        std::vector<ObjectId> ids;
        std::vector<int> groups;
        for (const auto& r : t.records()) {
            ids.push_back(r.object_id);
            groups.push_back(g.group_of(r.object_id));
        }
        Matrix e = oracle::gaussian(n, 3, rng, 2.0);
        if (trial % 2 == 1) e = e.array().round();
        const auto table = knn_table(e, ids, g, 5);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            o.expect(table.of(ids[i]) == oracle::knn(e, ids, groups, i, 5), "knn row " + std::to_string(i));
            ++knn_rows;
        }
    }

    for (int trial = 0; trial < 100; ++trial) {
        const int n = 5 + static_cast<int>(rng() % 200);
        const int clusters = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(std::min(n, 20)));
        Matrix data = oracle::gaussian(n, 4, rng);
        if (trial % 3 == 0) data = data.array().round();
        const auto bank = kmeans(data, clusters, 25, rng());
        for (std::size_t i = 1; i < bank.inertia_history.size(); ++i)
            o.expect(bank.inertia_history[i] <= bank.inertia_history[i - 1] + 1e-9, "kmeans inertia rose");
    }

    const TrainConfig defaults;
    o.expect(defaults.refresh_period == 1000, "default refresh period");
    int fired = 0;
    for (std::int64_t s = 0; s <= 10000; ++s) {
        if (refresh_due(s, defaults.refresh_period)) {
            o.expect(s % 1000 == 0, "refresh at " + std::to_string(s));
            ++fired;
        }
    }
    o.expect(fired == 11, "refresh count");

    // The trainer itself refreshes on that schedule.
    SynthConfig sc;
    sc.n_objects = 200;
    sc.n_classes = 5;
    sc.feature_dim = 4;
    const auto corpus = synth_generate(sc);
    ModelConfig mc;
    mc.feature_dim = 4;
    mc.hidden_dim = 6;
    mc.embed_dim = 3;
    mc.teacher_dim = 4;
    TrainConfig tc;
    tc.steps = 2001;
    tc.batch = 16;
    tc.groups = mc.groups;
    tc.clusters = 4;
    tc.kmeans_iters = 2;
    tc.n_shared = 1;
    Trainer trainer(mc, tc, corpus.table, corpus.features);
    std::vector<std::int64_t> refreshes;
    std::int64_t last = -1;
    for (std::int64_t s = 0; s < tc.steps; ++s) {
        trainer.step();
        const auto now = trainer.sampler().neighbors.last_refresh_step;
        if (now != last) refreshes.push_back(now);
        last = now;
        o.expect(trainer.sampler().centroids.last_refresh_step == now, "centroids and knn refresh together");
    }
    o.expect(refreshes == std::vector<std::int64_t>{0, 1000, 2000}, "trainer refresh steps");

    o.detail = "200 partitions, " + std::to_string(knn_rows) + " knn rows, 100 k-means runs, refreshes at {0,1000,2000}";
    return o;
}

// --- 6. ablation -------------------------------------------------------------

struct RunOutput {
    double o_map = 0.0;
    double seconds = 0.0;
    std::string log_text;
    std::string store;
    std::string report;
};

RunOutput run_pipeline(AppConfig cfg) {
    sync_derived(cfg);
    const auto t0 = Clock::now();
    const auto corpus = synth_generate(cfg.synth);
    cfg.model.feature_dim = corpus.features.dim();
    const auto [train_table, heldout] = split_by_image(corpus.table, cfg.data.holdout_fraction, cfg.data.split_seed);
    const auto split = select_queries(heldout, cfg.data.max_queries, cfg.data.query_seed);
    const auto result = train(cfg.model, cfg.train, train_table, corpus.features);
    const auto model = load_trained_model(result.checkpoint);
    const auto e = evaluate(*model.student, model.groups, split, corpus.features, cfg.data, cfg.eval);
    RunOutput out;
    out.o_map = overall_object_map(e).value_or(0.0);
    std::ostringstream log;
    write_loss_log(result.log, log);
    out.log_text = log.str();
    out.store = store_bytes(e.gallery_store);
    std::ostringstream report;
    write_report(e.rows, report);
    out.report = report.str();
    out.seconds = seconds_since(t0);
    return out;
}

AppConfig seeded(std::uint64_t s) {
    AppConfig cfg;
    cfg.synth.seed = s;
    cfg.model.seed = s + 100;
    cfg.train.seed = s + 200;
    return cfg;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string join(const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : " ") + fmt_double(100.0 * x, 2);
    return s;
}

Outcome ablation() {
    Outcome o;
    std::vector<double> base;
    std::vector<double> pel;
    std::vector<double> full;
    double slowest = 0.0;
    for (std::uint64_t s = 1; s <= 5; ++s) {
        AppConfig b = seeded(s);
        b.train.groups = 1;
        b.train.loss.use_ckd = false;
        b.train.n_shared = 0;
        AppConfig p = seeded(s);
        p.train.loss.use_ckd = false;
        AppConfig f = seeded(s);
        for (auto [cfg, sink] : {std::pair{&b, &base}, std::pair{&p, &pel}, std::pair{&f, &full}}) {
            const auto r = run_pipeline(*cfg);
            sink->push_back(r.o_map);
            slowest = std::max(slowest, r.seconds);
            std::fprintf(stderr, "  seed %llu groups=%d ckd=%d O-mAP %.2f (%.1f s)\n", static_cast<unsigned long long>(s),
                         cfg->train.groups, cfg->train.loss.use_ckd ? 1 : 0, 100.0 * r.o_map, r.seconds);
        }
    }
    const double mb = median(base);
    const double mp = median(pel);
    const double mf = median(full);
    o.expect(mb < mp, "baseline < +PEL");
    o.expect(mp <= mf, "+PEL <= +CKD");
    o.expect(mf - mb >= 0.02, "full - baseline >= 2 points");
    o.expect(slowest <= 600.0, "run time");
    o.detail = "median O-mAP baseline " + fmt_double(100 * mb, 2) + " [" + join(base) + "], +PEL " +
               fmt_double(100 * mp, 2) + " [" + join(pel) + "], +CKD " + fmt_double(100 * mf, 2) + " [" + join(full) +
               "], full-baseline " + fmt_double(100 * (mf - mb), 2) + " pts, slowest run " + fmt_double(slowest, 1) +
               " s";
    return o;
}

// --- 7. determinism ----------------------------------------------------------

Outcome determinism() {
    Outcome o;
    const AppConfig cfg = seeded(7);
    const auto a = run_pipeline(cfg);
    const auto b = run_pipeline(cfg);
    std::size_t log_lines = static_cast<std::size_t>(std::count(a.log_text.begin(), a.log_text.end(), '\n'));
    o.expect(log_lines == static_cast<std::size_t>(cfg.train.steps), "log has one line per step");
    o.expect(a.log_text == b.log_text, "loss logs differ");
    o.expect(a.store == b.store, "store bytes differ");
    o.expect(a.report == b.report, "report bytes differ");
    o.detail = std::to_string(log_lines) + " log lines, " + std::to_string(a.store.size()) + " store bytes, " +
               std::to_string(a.report.size()) + " report bytes identical across two runs";
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    bool strict = false;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--strict") == 0) strict = true;
    }
    spdlog::set_level(spdlog::level::err);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"gradient suite", gradient_suite},   {"loss identities", loss_identities},
        {"metric oracle", metric_oracle},     {"exact retrieval", exact_retrieval},
        {"sampler suite", sampler_suite},     {"ablation ordering", ablation},
        {"pipeline determinism", determinism},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("threw: ") + e.what();
        }
        if (!o.pass) ++failed;
        std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
        for (const auto& f : o.failures) std::printf("    failed: %s\n", f.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return strict && failed ? 1 : 0;
}

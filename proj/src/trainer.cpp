#include "msgcel/trainer.hpp"

#include <cmath>
#include <numbers>
#include <ostream>
#include <unordered_set>

#include "msgcel/binary_io.hpp"
#include "msgcel/config.hpp"

namespace msgcel {

void TrainConfig::validate() const {
    if (steps < 0) throw ValidationError("train: steps must be >= 0");
    if (batch < 1 || groups < 1 || clusters < 1 || knn < 1 || n_shared < 0 || refresh_period < 1 || kmeans_iters < 0) {
        throw ValidationError("train: batch, groups, clusters, knn and refresh_period must be positive");
    }
    if (!(lr > 0.0)) throw ValidationError("train: lr must be > 0");
    if (!(weight_decay >= 0.0)) throw ValidationError("train: weight_decay must be >= 0");
    if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw ValidationError("train: ema_momentum must be in [0,1]");
    loss.validate();
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr) {
    if (total_steps <= 0) throw Error("cosine_lr: total_steps must be > 0");
    if (step < 0 || step > total_steps) {
        throw Error("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
    }
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

void optimizer_step(Vector& params, const Vector& grads, double lr, double weight_decay, AdamState& state,
                    const AdamConfig& config) {
    if (params.size() != grads.size()) throw Error("optimizer_step: parameter/gradient size mismatch");
    if (!grads.allFinite()) throw Error("optimizer_step: non-finite gradient, step aborted");
    if (state.m.size() == 0) {
        state.m = Vector::Zero(params.size());
        state.v = Vector::Zero(params.size());
    }
    if (state.m.size() != params.size()) throw Error("optimizer_step: state size mismatch");

    ++state.t;
    state.m = config.beta1 * state.m + (1.0 - config.beta1) * grads;
    state.v = config.beta2 * state.v + (1.0 - config.beta2) * grads.cwiseProduct(grads);
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
    params.array() -= lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + config.eps);
    params *= 1.0 - lr * weight_decay;
}

void AdamW::step(Vector& params, const Vector& grads, double lr) {
    optimizer_step(params, grads, lr, weight_decay_, state_, config_);
}

void AdamW::save(CheckpointFile& file) const {
    file.put("adam/m", to_std(state_.m));
    file.put("adam/v", to_std(state_.v));
    file.put("adam/t", std::vector<std::int64_t>{state_.t});
}

void AdamW::load(const CheckpointFile& file, Eigen::Index size) {
    const auto& m = file.f64("adam/m");
    const auto& v = file.f64("adam/v");
    state_.t = file.i64("adam/t").at(0);
    if (m.empty() && v.empty()) {
        state_ = {};
        state_.t = file.i64("adam/t").at(0);
        return;
    }
    if (static_cast<Eigen::Index>(m.size()) != size || static_cast<Eigen::Index>(v.size()) != size) {
        throw ParseError("checkpoint: optimizer state size mismatch");
    }
    state_.m = Eigen::Map<const Vector>(m.data(), size);
    state_.v = Eigen::Map<const Vector>(v.data(), size);
}

std::string format_log_line(const LossLogEntry& e) {
    using io::format_double;
    return std::to_string(e.step) + '\t' + format_double(e.lr) + '\t' + format_double(e.terms.total) + '\t' +
           format_double(e.terms.self) + '\t' + format_double(e.terms.con_h) + '\t' + format_double(e.terms.con_l) +
           '\t' + format_double(e.terms.ckd);
}

void write_loss_log(const std::vector<LossLogEntry>& log, std::ostream& os) {
    for (const auto& e : log) os << format_log_line(e) << '\n';
}

// --- Trainer -----------------------------------------------------------------

namespace {

ModelConfig with_groups(ModelConfig m, int groups) {
    m.groups = groups;
    return m;
}

constexpr std::uint64_t kTeacherProjectionSalt = 0x7465616368ull;

}  // namespace

Trainer::Trainer(const ModelConfig& model, const TrainConfig& train, const ObjectTable& table,
                 const FeatureBank& features)
    : model_(with_groups(model, train.groups)),
      train_(train),
      table_(&table),
      features_(&features),
      groups_(partition_by_scale(table, train.groups)),
      student_(model_),
      teacher_(student_, mix_seed(model_.seed, kTeacherProjectionSalt)),
      optimizer_(train.weight_decay, AdamConfig{train.beta1, train.beta2, train.adam_eps}) {
    train_.validate();
    if (features.dim() != model_.feature_dim) {
        throw Error("trainer: feature dim " + std::to_string(features.dim()) + " does not match model feature_dim " +
                    std::to_string(model_.feature_dim));
    }
    for (int m = 0; m < groups_.k; ++m) canonical_areas_.push_back(groups_.canonical_area(m, table));
}

std::string Trainer::config_text() const {
    AppConfig app;
    app.model = model_;
    app.train = train_;
    return canonical_text(app, {"model", "train", "loss"});
}

LossLogEntry Trainer::step() {
    const std::int64_t s = step_;
    if (s >= train_.steps) throw Error("trainer: run already reached " + std::to_string(train_.steps) + " steps");

    RefreshConfig rc{train_.refresh_period, train_.clusters, train_.kmeans_iters, train_.knn, train_.seed};
    refresh(s, rc, teacher_, *table_, *features_, groups_, sampler_);
    if (sampler_.neighbors.neighbors.empty()) throw Error("trainer: neighbour table was never built");

    std::mt19937_64 rng(mix_seed(train_.seed, static_cast<std::uint64_t>(s)));
    const Batch batch = assemble_batch(groups_, sampler_.neighbors, {train_.batch, train_.knn, train_.n_shared}, rng);
    const std::unordered_set<ObjectId> shared(batch.shared.begin(), batch.shared.end());

    std::vector<StudentPass> passes;
    std::vector<GroupEmbeddings> blocks;
    for (int m = 0; m < groups_.k; ++m) {
        const auto& ids = batch.blocks[static_cast<std::size_t>(m)];
        Matrix x(static_cast<Eigen::Index>(ids.size()), features_->dim());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const auto& rec = table_->at(ids[i]);
            const auto row = static_cast<Eigen::Index>(i);
            if (shared.count(ids[i])) {
                x.row(row) = features_->render(rec.feature_ref, canonical_areas_[static_cast<std::size_t>(m)], rng);
            } else {
                x.row(row) = features_->observed.row(static_cast<Eigen::Index>(rec.feature_ref));
            }
        }
        passes.push_back(student_.forward(x, m));
        blocks.push_back({ids, passes.back().h, passes.back().l, teacher_.forward(x)});
    }

    const auto result = total_loss(blocks, sampler_.centroids.centroids, train_.loss);
    Vector grad = Vector::Zero(student_.params().size());
    for (std::size_t m = 0; m < passes.size(); ++m) {
        grad += student_.backward(passes[m], result.grad_h[m], result.grad_l[m]);
    }
    const double lr = cosine_lr(s, train_.steps, train_.lr);
    optimizer_.step(student_.params(), grad, lr);
    ema_update(teacher_, student_, train_.ema_momentum);
    ++step_;
    return {s, lr, result.terms};
}

std::vector<LossLogEntry> Trainer::run_until(std::int64_t until) {
    std::vector<LossLogEntry> log;
    until = std::min(until, train_.steps);
    while (step_ < until) log.push_back(step());
    return log;
}

CheckpointFile Trainer::checkpoint() const {
    CheckpointFile file;
    file.config_text = config_text();
    file.put("meta/step", std::vector<std::int64_t>{step_});
    file.put("meta/config_hash", std::vector<std::int64_t>{static_cast<std::int64_t>(io::fnv1a64(file.config_text))});
    // Per-step generators derive from (seed, step), so this pair is the full RNG state.
    file.put("meta/rng", std::vector<std::int64_t>{static_cast<std::int64_t>(train_.seed), step_});
    save_params(file, "student", student_.layout(), student_.params());
    save_params(file, "teacher", teacher_.layout(), teacher_.params());
    optimizer_.save(file);
    file.put("scale/boundaries", groups_.boundaries);

    const auto& bank = sampler_.centroids;
    file.put("sampler/centroids", to_std(bank.centroids));
    file.put("sampler/centroid_shape", std::vector<std::int64_t>{bank.centroids.rows(), bank.centroids.cols()});
    file.put("sampler/centroid_step", std::vector<std::int64_t>{bank.last_refresh_step});

    std::vector<std::int64_t> ids, offsets{0}, flat;
    for (const auto& r : table_->records()) {
        auto it = sampler_.neighbors.neighbors.find(r.object_id);
        if (it == sampler_.neighbors.neighbors.end()) continue;
        ids.push_back(r.object_id);
        flat.insert(flat.end(), it->second.begin(), it->second.end());
        offsets.push_back(static_cast<std::int64_t>(flat.size()));
    }
    file.put("sampler/knn_ids", std::move(ids));
    file.put("sampler/knn_offsets", std::move(offsets));
    file.put("sampler/knn_flat", std::move(flat));
    file.put("sampler/knn_step", std::vector<std::int64_t>{sampler_.neighbors.last_refresh_step});
    return file;
}

namespace {

AppConfig parse_checkpoint_config(const CheckpointFile& file) {
    AppConfig app;
    apply_config_text(app, file.config_text);
    sync_derived(app);
    if (file.has("meta/config_hash") &&
        file.i64("meta/config_hash").at(0) != static_cast<std::int64_t>(io::fnv1a64(file.config_text))) {
        throw ParseError("checkpoint: config hash mismatch");
    }
    return app;
}

}  // namespace

Trainer Trainer::resume(const CheckpointFile& file, const ObjectTable& table, const FeatureBank& features) {
    const AppConfig app = parse_checkpoint_config(file);
    Trainer t(app.model, app.train, table, features);
    if (file.f64("scale/boundaries") != t.groups_.boundaries) {
        throw Error("resume: scale partition differs from the checkpoint (different training table?)");
    }
    load_params(file, "student", t.student_.layout(), t.student_.params());
    load_params(file, "teacher", t.teacher_.layout(), t.teacher_.params());
    t.optimizer_.load(file, t.student_.params().size());
    t.step_ = file.i64("meta/step").at(0);

    const auto& shape = file.i64("sampler/centroid_shape");
    t.sampler_.centroids.centroids = to_matrix(file.f64("sampler/centroids"), shape.at(0), shape.at(1));
    t.sampler_.centroids.last_refresh_step = file.i64("sampler/centroid_step").at(0);
    const auto& ids = file.i64("sampler/knn_ids");
    const auto& offsets = file.i64("sampler/knn_offsets");
    const auto& flat = file.i64("sampler/knn_flat");
    if (offsets.size() != ids.size() + 1) throw ParseError("checkpoint: inconsistent neighbour table");
    for (std::size_t i = 0; i < ids.size(); ++i) {
        t.sampler_.neighbors.neighbors[ids[i]] =
            std::vector<ObjectId>(flat.begin() + offsets[i], flat.begin() + offsets[i + 1]);
    }
    t.sampler_.neighbors.last_refresh_step = file.i64("sampler/knn_step").at(0);
    return t;
}

TrainResult train(const ModelConfig& model, const TrainConfig& config, const ObjectTable& table,
                  const FeatureBank& features, const TrainOptions& options) {
    Trainer trainer = options.resume_from ? Trainer::resume(*options.resume_from, table, features)
                                          : Trainer(model, config, table, features);
    const std::int64_t until = options.stop_at ? *options.stop_at : trainer.train_config().steps;
    TrainResult result;
    try {
        result.log = trainer.run_until(until);
    } catch (...) {
        if (options.abort_checkpoint) trainer.checkpoint().write(*options.abort_checkpoint);
        throw;
    }
    result.checkpoint = trainer.checkpoint();
    return result;
}

TrainedModel load_trained_model(const CheckpointFile& file) {
    const AppConfig app = parse_checkpoint_config(file);
    TrainedModel out;
    out.model = app.model;
    out.train = app.train;
    out.student = std::make_unique<StudentNet>(app.model);
    load_params(file, "student", out.student->layout(), out.student->params());
    out.groups.k = app.train.groups;
    out.groups.boundaries = file.f64("scale/boundaries");
    if (out.groups.boundaries.size() != static_cast<std::size_t>(out.groups.k + 1)) {
        throw ParseError("checkpoint: boundary count does not match group count");
    }
    out.groups.members.resize(static_cast<std::size_t>(out.groups.k));
    out.step = file.i64("meta/step").at(0);
    return out;
}

}  // namespace msgcel

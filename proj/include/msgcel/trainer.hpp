#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "msgcel/checkpoint.hpp"
#include "msgcel/dataset.hpp"
#include "msgcel/encoder.hpp"
#include "msgcel/losses.hpp"
#include "msgcel/sampling.hpp"

namespace msgcel {

struct TrainConfig {
    std::int64_t steps = 500;
    int batch = 120;
    int groups = 4;
    int clusters = 100;
    int knn = 5;
    int n_shared = 6;
    std::int64_t refresh_period = 1000;
    int kmeans_iters = 20;
    double lr = 1e-4;
    double weight_decay = 0.01;
    double ema_momentum = 0.999;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;
    LossConfig loss;

    void validate() const;
};

/// base_lr * (1 + cos(pi * step / total_steps)) / 2.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr);

struct AdamState {
    Vector m;
    Vector v;
    std::int64_t t = 0;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected adaptive-moment step followed by decoupled weight decay
/// theta <- theta - lr * weight_decay * theta. Non-finite gradients abort
/// the step without touching params or state.
void optimizer_step(Vector& params, const Vector& grads, double lr, double weight_decay, AdamState& state,
                    const AdamConfig& config = {});

/// Seam for alternative update rules.
class Optimizer {
public:
    virtual ~Optimizer() = default;
    virtual void step(Vector& params, const Vector& grads, double lr) = 0;
    virtual void save(CheckpointFile& file) const = 0;
    virtual void load(const CheckpointFile& file, Eigen::Index size) = 0;
};

class AdamW final : public Optimizer {
public:
    AdamW(double weight_decay, AdamConfig config) : weight_decay_(weight_decay), config_(config) {}
    void step(Vector& params, const Vector& grads, double lr) override;
    void save(CheckpointFile& file) const override;
    void load(const CheckpointFile& file, Eigen::Index size) override;
    const AdamState& state() const { return state_; }

private:
    double weight_decay_;
    AdamConfig config_;
    AdamState state_;
};

struct LossLogEntry {
    std::int64_t step = 0;
    double lr = 0.0;
    LossTerms terms;
};

/// `step \t lr \t total \t self \t con_h \t con_l \t ckd` with round-trip precision.
std::string format_log_line(const LossLogEntry& e);
void write_loss_log(const std::vector<LossLogEntry>& log, std::ostream& os);

/// Full run state: networks, optimizer, sampler tables and the step counter.
/// Class labels never enter: the trainer only sees boxes and features.
class Trainer {
public:
    Trainer(const ModelConfig& model, const TrainConfig& train, const ObjectTable& table, const FeatureBank& features);

    /// Restores a run from a checkpoint written by checkpoint().
    static Trainer resume(const CheckpointFile& file, const ObjectTable& table, const FeatureBank& features);

    /// One iteration: refresh-if-due, batch, forward, loss, update, EMA.
    LossLogEntry step();
    /// Runs until the step counter reaches `until` (clipped to config steps).
    std::vector<LossLogEntry> run_until(std::int64_t until);

    CheckpointFile checkpoint() const;

    std::int64_t current_step() const { return step_; }
    const StudentNet& student() const { return student_; }
    const TeacherNet& teacher() const { return teacher_; }
    const ScaleGroups& groups() const { return groups_; }
    const SamplerState& sampler() const { return sampler_; }
    const ModelConfig& model_config() const { return model_; }
    const TrainConfig& train_config() const { return train_; }
    const AdamW& optimizer() const { return optimizer_; }

    /// Canonical text of (model, train) configs stored in checkpoints.
    std::string config_text() const;

private:
    ModelConfig model_;
    TrainConfig train_;
    const ObjectTable* table_;
    const FeatureBank* features_;
    ScaleGroups groups_;
    std::vector<double> canonical_areas_;
    StudentNet student_;
    TeacherNet teacher_;
    AdamW optimizer_;
    SamplerState sampler_;
    std::int64_t step_ = 0;
};

struct TrainOptions {
    /// Stop early at this step (the checkpoint can be resumed).
    std::optional<std::int64_t> stop_at;
    std::optional<CheckpointFile> resume_from;
    /// Written if a step throws.
    std::optional<std::filesystem::path> abort_checkpoint;
};

struct TrainResult {
    CheckpointFile checkpoint;
    std::vector<LossLogEntry> log;
};

TrainResult train(const ModelConfig& model, const TrainConfig& config, const ObjectTable& table,
                  const FeatureBank& features, const TrainOptions& options = {});

/// Student, partition boundaries and configs recovered from a checkpoint.
struct TrainedModel {
    ModelConfig model;
    TrainConfig train;
    std::unique_ptr<StudentNet> student;
    ScaleGroups groups;  // boundaries only; members/assignment empty
    std::int64_t step = 0;
};

TrainedModel load_trained_model(const CheckpointFile& file);

}  // namespace msgcel

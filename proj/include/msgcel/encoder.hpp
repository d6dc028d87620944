#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "msgcel/checkpoint.hpp"
#include "msgcel/types.hpp"

namespace msgcel {

enum class Activation { relu, tanh };

struct ModelConfig {
    int feature_dim = 32;
    int hidden_dim = 256;
    int trunk_layers = 2;
    int groups = 4;
    int embed_dim = 512;
    int teacher_dim = 1024;
    Activation activation = Activation::tanh;
    /// Std of head weights is head_init_scale / sqrt(hidden_dim).
    double head_init_scale = 1.0;
    /// Every group's head pair starts from the same draw.
    bool shared_head_init = true;
    /// Teacher rows are L2-normalized after the projection.
    bool teacher_normalize = true;
    std::uint64_t seed = 7;

    void validate() const;
    /// `key=value` lines in fixed order; parse_canonical inverts it.
    std::string canonical_text() const;
    static ModelConfig parse_canonical(const std::string& text);

    bool operator==(const ModelConfig&) const = default;
};

/// Offset and shape of one named tensor in a flat parameter vector.
struct ParamSlice {
    std::size_t offset = 0;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

class ParamLayout {
public:
    void add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
    const ParamSlice& at(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t total() const { return total_; }
    const std::vector<std::pair<std::string, ParamSlice>>& entries() const { return entries_; }

    bool operator==(const ParamLayout& o) const;

private:
    std::vector<std::pair<std::string, ParamSlice>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
    std::size_t total_ = 0;
};

using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

inline MatrixMap view(Vector& flat, const ParamSlice& s) {
    return MatrixMap(flat.data() + s.offset, s.rows, s.cols);
}
inline ConstMatrixMap view(const Vector& flat, const ParamSlice& s) {
    return ConstMatrixMap(flat.data() + s.offset, s.rows, s.cols);
}

/// Cached activations of one student pass, consumed by backward().
struct StudentPass {
    int group = 0;
    Matrix input;
    std::vector<Matrix> pre;   // trunk pre-activations
    std::vector<Matrix> post;  // trunk activations
    Matrix h;
    Matrix l;
};

/// Shared trunk (affine + nonlinearity per layer) and one (h, l) head pair per
/// scale group. Parameters live in one flat vector described by layout().
class StudentNet {
public:
    explicit StudentNet(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const ParamLayout& layout() const { return layout_; }
    Vector& params() { return params_; }
    const Vector& params() const { return params_; }

    StudentPass forward(const Matrix& inputs, int group) const;
    /// Gradient of a scalar w.r.t. every parameter, given its gradients
    /// w.r.t. the pass's h and l outputs.
    Vector backward(const StudentPass& pass, const Matrix& grad_h, const Matrix& grad_l) const;

    /// Trunk output only.
    Matrix trunk(const Matrix& inputs) const;

    static std::string trunk_weight(int layer) { return "trunk." + std::to_string(layer) + ".weight"; }
    static std::string trunk_bias(int layer) { return "trunk." + std::to_string(layer) + ".bias"; }
    static std::string head_weight(char branch, int group) {
        return std::string("head.") + branch + "." + std::to_string(group) + ".weight";
    }
    static std::string head_bias(char branch, int group) {
        return std::string("head.") + branch + "." + std::to_string(group) + ".bias";
    }

private:
    ModelConfig config_;
    ParamLayout layout_;
    Vector params_;
};

/// (F_h, F_l) for one group.
std::pair<Matrix, Matrix> student_forward(const StudentNet& net, const Matrix& inputs, int group);

/// Student architecture followed by a fixed trunk -> teacher_dim projection.
/// The shared prefix of params() mirrors the student layout exactly; the
/// projection has no student counterpart and is only ever set at init.
class TeacherNet {
public:
    /// Copies the student's parameters and draws the projection from `seed`.
    TeacherNet(const StudentNet& student, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    const ParamLayout& layout() const { return layout_; }
    Vector& params() { return params_; }
    const Vector& params() const { return params_; }
    std::size_t shared_size() const { return shared_size_; }

    /// n x teacher_dim embeddings f^t.
    Matrix forward(const Matrix& inputs) const;
    /// The teacher's own h-head output for a group (used for clustering).
    Matrix head_forward(const Matrix& inputs, int group) const;
    Matrix trunk(const Matrix& inputs) const;

private:
    ModelConfig config_;
    ParamLayout layout_;
    Vector params_;
    std::size_t shared_size_ = 0;
};

Matrix teacher_forward(const TeacherNet& net, const Matrix& inputs);

/// theta_t <- momentum * theta_t + (1 - momentum) * theta_s on the shared prefix.
void ema_update(TeacherNet& teacher, const StudentNet& student, double momentum);

/// Stores `<prefix>/<tensor>` blobs for every layout entry.
void save_params(CheckpointFile& file, const std::string& prefix, const ParamLayout& layout, const Vector& params);
void load_params(const CheckpointFile& file, const std::string& prefix, const ParamLayout& layout, Vector& params);

/// Standalone model checkpoint: config text = ModelConfig canonical text.
CheckpointFile model_checkpoint(const StudentNet& student, const TeacherNet& teacher);

}  // namespace msgcel

#pragma once

#include <span>
#include <vector>

#include "msgcel/types.hpp"

namespace msgcel {

struct LossConfig {
    double sigma = 3.0;   // bandwidth of the teacher similarity w_ij
    double delta = 1.0;   // margin
    double tau = 1.0;     // temperature of the centroid softmax
    double epsilon_floor = 1e-12;
    /// Backpropagate through the target distribution of self-distillation too.
    bool full_grad = false;
    bool use_ckd = true;

    void validate() const;
};

// --- Relative distances ------------------------------------------------------

/// d_ij = |f_i - f_j| / mean_k |f_i - f_k|, the mean including the zero k = i term.
struct RelativeDistances {
    Matrix euclid;     // e_ij
    Vector row_mean;   // m_i
    Matrix rel;        // d_ij
};

RelativeDistances relative_distances_full(const Matrix& f);
Matrix relative_distances(const Matrix& f);

/// Pulls dL/dd back to dL/df.
Matrix relative_distances_backward(const Matrix& f, const RelativeDistances& rd, const Matrix& grad_rel);

// --- Per-group losses --------------------------------------------------------

struct LossGrad {
    double value = 0.0;
    Matrix grad;
};

/// w_ij = exp(-|t_i - t_j|^2 / sigma), teacher rows only.
Matrix teacher_similarity(const Matrix& teacher, double sigma);

/// (1/n) sum_{i != j} w_ij d_ij^2 + (1 - w_ij) [delta - d_ij]_+^2 over student rows,
/// gradient w.r.t. the student rows only.
LossGrad relaxed_contrastive(const Matrix& student, const Matrix& teacher, const LossConfig& cfg);

struct SelfDistillResult {
    double value = 0.0;
    Matrix grad_h;
    Matrix grad_l;
};

/// sum_i sum_{j != i} p_ij / n * log(p_ij / q_ij) with p = softmax(-d^l), q = softmax(-d^h)
/// taken row-wise over j != i. grad_l is zero unless cfg.full_grad.
SelfDistillResult self_distill(const Matrix& f_h, const Matrix& f_l, const LossConfig& cfg);

// --- Centroid similarity and CKD ---------------------------------------------

/// Row-stochastic similarity between embeddings (rows tagged with object ids)
/// and the centroid bank.
struct SimilarityMatrix {
    Matrix values;
    std::vector<ObjectId> row_ids;
};

/// Softmax over centroids of -|f - c|^2 / tau, mixed with a uniform floor:
/// S = (1 - L*eps) * P + eps, so every entry is >= eps and rows sum to 1.
struct SimilarityPass {
    SimilarityMatrix s;
    Matrix softmax;  // P before flooring
};

SimilarityPass centroid_similarity_pass(const Matrix& f, std::span<const ObjectId> row_ids, const Matrix& centroids,
                                        const LossConfig& cfg);
SimilarityMatrix centroid_similarity(const Matrix& f, std::span<const ObjectId> row_ids, const Matrix& centroids,
                                     const LossConfig& cfg);
Matrix centroid_similarity_backward(const Matrix& f, const Matrix& centroids, const SimilarityPass& pass,
                                    const Matrix& grad_s, const LossConfig& cfg);

struct CkdPairResult {
    double value = 0.0;
    Matrix grad_a;  // same shape as s_a.values
    Matrix grad_b;
};

/// Mean over the shared objects of -sum_l S_a(l) log S_b(l). Empty `shared`
/// gives 0 and a warning.
CkdPairResult ckd_pair(const SimilarityMatrix& s_a, const SimilarityMatrix& s_b, std::span<const ObjectId> shared);

struct CkdTotalResult {
    double value = 0.0;
    int pair_count = 0;
    std::vector<Matrix> grads;  // one per group
};

/// Mean of ckd_pair(S_a, S_b) over unordered pairs a < b, with G_{a∩b} the
/// row ids present in both matrices. Fewer than two groups gives 0.
CkdTotalResult ckd_total(std::span<const SimilarityMatrix> groups);

// --- Overall objective -------------------------------------------------------

/// Embeddings of one group's batch block.
struct GroupEmbeddings {
    std::vector<ObjectId> ids;
    Matrix h;        // n x embed_dim
    Matrix l;        // n x embed_dim
    Matrix teacher;  // n x teacher_dim
};

struct LossTerms {
    double total = 0.0;
    double self = 0.0;
    double con_h = 0.0;
    double con_l = 0.0;
    double ckd = 0.0;
};

struct TotalLossResult {
    LossTerms terms;
    int ckd_pairs = 0;
    std::vector<Matrix> grad_h;
    std::vector<Matrix> grad_l;
};

/// sum_m L_self + sum_m L_con(F_h) + sum_m L_con(F_l) + L_CKD; the CKD
/// similarities come from the h-branch embeddings.
TotalLossResult total_loss(std::span<const GroupEmbeddings> groups, const Matrix& centroids, const LossConfig& cfg);

}  // namespace msgcel

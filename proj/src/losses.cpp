#include "msgcel/losses.hpp"

#include <cmath>
#include <string>
#include <unordered_map>

#include <spdlog/spdlog.h>

namespace msgcel {

void LossConfig::validate() const {
    if (!(sigma > 0.0)) throw ValidationError("loss: sigma must be > 0");
    if (!(delta > 0.0)) throw ValidationError("loss: delta must be > 0");
    if (!(tau > 0.0)) throw ValidationError("loss: tau must be > 0");
    if (!(epsilon_floor > 0.0)) throw ValidationError("loss: epsilon_floor must be > 0");
}

// --- Relative distances ------------------------------------------------------

RelativeDistances relative_distances_full(const Matrix& f) {
    const Eigen::Index n = f.rows();
    if (n < 2) throw Error("relative_distances: need at least 2 rows, got " + std::to_string(n));
    RelativeDistances rd;
    rd.euclid = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double e = (f.row(i) - f.row(j)).norm();
            rd.euclid(i, j) = e;
            rd.euclid(j, i) = e;
        }
    }
    rd.row_mean = rd.euclid.rowwise().sum() / static_cast<double>(n);
    rd.rel.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!(rd.row_mean(i) > 0.0)) {
            throw Error("relative_distances: degenerate row " + std::to_string(i) +
                        " (all points coincide with it)");
        }
        rd.rel.row(i) = rd.euclid.row(i) / rd.row_mean(i);
    }
    return rd;
}

Matrix relative_distances(const Matrix& f) { return relative_distances_full(f).rel; }

Matrix relative_distances_backward(const Matrix& f, const RelativeDistances& rd, const Matrix& grad_rel) {
    const Eigen::Index n = f.rows();
    const double inv_n = 1.0 / static_cast<double>(n);
    // dL/de_ik for the ordered pair (i, k): e_ik enters row i both directly and through m_i.
    Matrix grad_e(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double m = rd.row_mean(i);
        double coupled = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j != i) coupled += grad_rel(i, j) * rd.euclid(i, j);
        }
        const double shared = coupled * inv_n / (m * m);
        for (Eigen::Index k = 0; k < n; ++k) {
            grad_e(i, k) = (k == i ? 0.0 : grad_rel(i, k) / m) - shared;
        }
    }
    Matrix grad = Matrix::Zero(n, f.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index k = i + 1; k < n; ++k) {
            const double e = rd.euclid(i, k);
            if (e <= 0.0) continue;  // coincident rows: zero subgradient
            const double coeff = (grad_e(i, k) + grad_e(k, i)) / e;
            const RowVector diff = coeff * (f.row(i) - f.row(k));
            grad.row(i) += diff;
            grad.row(k) -= diff;
        }
    }
    return grad;
}

// --- Relaxed contrastive -----------------------------------------------------

Matrix teacher_similarity(const Matrix& teacher, double sigma) {
    const Eigen::Index n = teacher.rows();
    Matrix w = Matrix::Ones(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double v = std::exp(-(teacher.row(i) - teacher.row(j)).squaredNorm() / sigma);
            w(i, j) = v;
            w(j, i) = v;
        }
    }
    return w;
}

LossGrad relaxed_contrastive(const Matrix& student, const Matrix& teacher, const LossConfig& cfg) {
    if (student.rows() != teacher.rows()) throw Error("relaxed_contrastive: row count mismatch");
    const Eigen::Index n = student.rows();
    const auto rd = relative_distances_full(student);
    const Matrix w = teacher_similarity(teacher, cfg.sigma);
    const double inv_n = 1.0 / static_cast<double>(n);

    LossGrad out;
    Matrix grad_rel = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            const double d = rd.rel(i, j);
            const double slack = std::max(cfg.delta - d, 0.0);
            out.value += inv_n * (w(i, j) * d * d + (1.0 - w(i, j)) * slack * slack);
            grad_rel(i, j) = inv_n * (2.0 * w(i, j) * d - 2.0 * (1.0 - w(i, j)) * slack);
        }
    }
    out.grad = relative_distances_backward(student, rd, grad_rel);
    return out;
}

// --- Self-distillation -------------------------------------------------------

namespace {

// Row-wise log-softmax of -d over j != i; the diagonal is left at 0 and unused.
Matrix log_softmax_offdiag(const Matrix& d) {
    const Eigen::Index n = d.rows();
    Matrix out = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double top = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i) top = std::max(top, -d(i, j));
        double sum = 0.0;
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i) sum += std::exp(-d(i, j) - top);
        const double log_z = top + std::log(sum);
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i) out(i, j) = -d(i, j) - log_z;
    }
    return out;
}

}  // namespace

SelfDistillResult self_distill(const Matrix& f_h, const Matrix& f_l, const LossConfig& cfg) {
    if (f_h.rows() != f_l.rows()) throw Error("self_distill: row count mismatch");
    const Eigen::Index n = f_h.rows();
    const auto rd_h = relative_distances_full(f_h);
    const auto rd_l = relative_distances_full(f_l);
    const Matrix log_p = log_softmax_offdiag(rd_l.rel);
    const Matrix log_q = log_softmax_offdiag(rd_h.rel);
    const double inv_n = 1.0 / static_cast<double>(n);

    SelfDistillResult out;
    Matrix grad_dh = Matrix::Zero(n, n);
    Matrix grad_dl = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double kl = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            const double p = std::exp(log_p(i, j));
            kl += p * (log_p(i, j) - log_q(i, j));
        }
        out.value += inv_n * kl;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            const double p = std::exp(log_p(i, j));
            const double q = std::exp(log_q(i, j));
            grad_dh(i, j) = inv_n * (p - q);
            if (cfg.full_grad) grad_dl(i, j) = -inv_n * p * ((log_p(i, j) - log_q(i, j)) - kl);
        }
    }
    out.grad_h = relative_distances_backward(f_h, rd_h, grad_dh);
    out.grad_l = cfg.full_grad ? relative_distances_backward(f_l, rd_l, grad_dl) : Matrix::Zero(n, f_l.cols());
    return out;
}

// --- Centroid similarity -----------------------------------------------------

SimilarityPass centroid_similarity_pass(const Matrix& f, std::span<const ObjectId> row_ids, const Matrix& centroids,
                                        const LossConfig& cfg) {
    const Eigen::Index n = f.rows();
    const Eigen::Index L = centroids.rows();
    if (L < 1) throw Error("centroid_similarity: empty centroid bank");
    if (centroids.cols() != f.cols()) throw Error("centroid_similarity: dimension mismatch");
    if (static_cast<Eigen::Index>(row_ids.size()) != n) throw Error("centroid_similarity: row id count mismatch");
    if (!(static_cast<double>(L) * cfg.epsilon_floor < 1.0)) throw Error("centroid_similarity: epsilon_floor too large");
    if (!f.allFinite() || !centroids.allFinite()) throw Error("centroid_similarity: non-finite input");

    SimilarityPass pass;
    pass.softmax.resize(n, L);
    for (Eigen::Index i = 0; i < n; ++i) {
        RowVector z(L);
        for (Eigen::Index l = 0; l < L; ++l) z(l) = -(f.row(i) - centroids.row(l)).squaredNorm() / cfg.tau;
        const double top = z.maxCoeff();
        RowVector e = (z.array() - top).exp().matrix();
        pass.softmax.row(i) = e / e.sum();
    }
    const double keep = 1.0 - static_cast<double>(L) * cfg.epsilon_floor;
    pass.s.values = (keep * pass.softmax.array() + cfg.epsilon_floor).matrix();
    pass.s.row_ids.assign(row_ids.begin(), row_ids.end());
    return pass;
}

SimilarityMatrix centroid_similarity(const Matrix& f, std::span<const ObjectId> row_ids, const Matrix& centroids,
                                     const LossConfig& cfg) {
    return centroid_similarity_pass(f, row_ids, centroids, cfg).s;
}

Matrix centroid_similarity_backward(const Matrix& /*f*/, const Matrix& centroids, const SimilarityPass& pass,
                                    const Matrix& grad_s, const LossConfig& cfg) {
    const double keep = 1.0 - static_cast<double>(centroids.rows()) * cfg.epsilon_floor;
    const Matrix& p = pass.softmax;
    const Matrix g = keep * grad_s;
    // Softmax Jacobian: dz_l = P_l (g_l - <P, g>).
    const Vector inner = (p.array() * g.array()).rowwise().sum();
    Matrix dz = p.array() * (g.array().colwise() - inner.array());
    // z_l = -|f - c_l|^2 / tau and sum_l dz_l = 0, so df = (2 / tau) dz C.
    return (2.0 / cfg.tau) * dz * centroids;
}

// --- CKD ---------------------------------------------------------------------

namespace {

std::unordered_map<ObjectId, Eigen::Index> row_index(const SimilarityMatrix& s) {
    std::unordered_map<ObjectId, Eigen::Index> idx;
    for (std::size_t i = 0; i < s.row_ids.size(); ++i) idx.emplace(s.row_ids[i], static_cast<Eigen::Index>(i));
    return idx;
}

}  // namespace

CkdPairResult ckd_pair(const SimilarityMatrix& s_a, const SimilarityMatrix& s_b, std::span<const ObjectId> shared) {
    if (s_a.values.cols() != s_b.values.cols()) throw Error("ckd_pair: centroid count mismatch");
    CkdPairResult out;
    out.grad_a = Matrix::Zero(s_a.values.rows(), s_a.values.cols());
    out.grad_b = Matrix::Zero(s_b.values.rows(), s_b.values.cols());
    if (shared.empty()) {
        spdlog::warn("ckd_pair: empty shared object set, contributing 0");
        return out;
    }
    const auto ia = row_index(s_a);
    const auto ib = row_index(s_b);
    const double inv = 1.0 / static_cast<double>(shared.size());
    for (ObjectId id : shared) {
        auto a = ia.find(id);
        auto b = ib.find(id);
        if (a == ia.end() || b == ib.end()) {
            throw Error("ckd_pair: shared object " + std::to_string(id) + " missing from a similarity matrix");
        }
        const auto pa = s_a.values.row(a->second);
        const auto pb = s_b.values.row(b->second);
        for (Eigen::Index l = 0; l < pa.size(); ++l) {
            const double log_q = std::log(pb(l));
            out.value -= inv * pa(l) * log_q;
            out.grad_a(a->second, l) -= inv * log_q;
            out.grad_b(b->second, l) -= inv * pa(l) / pb(l);
        }
    }
    return out;
}

CkdTotalResult ckd_total(std::span<const SimilarityMatrix> groups) {
    CkdTotalResult out;
    for (const auto& g : groups) out.grads.push_back(Matrix::Zero(g.values.rows(), g.values.cols()));
    const auto k = static_cast<int>(groups.size());
    if (k < 2) {
        spdlog::warn("ckd_total: fewer than two groups, contributing 0");
        return out;
    }
    out.pair_count = k * (k - 1) / 2;
    const double inv_q = 1.0 / static_cast<double>(out.pair_count);
    for (int a = 0; a < k; ++a) {
        for (int b = a + 1; b < k; ++b) {
            const auto& sa = groups[static_cast<std::size_t>(a)];
            const auto& sb = groups[static_cast<std::size_t>(b)];
            const auto ib = row_index(sb);
            std::vector<ObjectId> shared;
            for (ObjectId id : sa.row_ids)
                if (ib.count(id)) shared.push_back(id);
            const auto pair = ckd_pair(sa, sb, shared);
            out.value += inv_q * pair.value;
            out.grads[static_cast<std::size_t>(a)] += inv_q * pair.grad_a;
            out.grads[static_cast<std::size_t>(b)] += inv_q * pair.grad_b;
        }
    }
    return out;
}

// --- Overall objective -------------------------------------------------------

TotalLossResult total_loss(std::span<const GroupEmbeddings> groups, const Matrix& centroids, const LossConfig& cfg) {
    cfg.validate();
    TotalLossResult out;
    for (const auto& g : groups) {
        if (g.h.rows() != g.l.rows() || g.h.rows() != g.teacher.rows() ||
            static_cast<std::size_t>(g.h.rows()) != g.ids.size()) {
            throw Error("total_loss: inconsistent group block shapes");
        }
        const auto self = self_distill(g.h, g.l, cfg);
        const auto con_h = relaxed_contrastive(g.h, g.teacher, cfg);
        const auto con_l = relaxed_contrastive(g.l, g.teacher, cfg);
        out.terms.self += self.value;
        out.terms.con_h += con_h.value;
        out.terms.con_l += con_l.value;
        out.grad_h.push_back(self.grad_h + con_h.grad);
        out.grad_l.push_back(self.grad_l + con_l.grad);
    }

    if (cfg.use_ckd && groups.size() >= 2) {
        std::vector<SimilarityPass> passes;
        std::vector<SimilarityMatrix> sims;
        for (const auto& g : groups) {
            passes.push_back(centroid_similarity_pass(g.h, g.ids, centroids, cfg));
            sims.push_back(passes.back().s);
        }
        const auto ckd = ckd_total(sims);
        out.terms.ckd = ckd.value;
        out.ckd_pairs = ckd.pair_count;
        for (std::size_t m = 0; m < groups.size(); ++m) {
            out.grad_h[m] += centroid_similarity_backward(groups[m].h, centroids, passes[m], ckd.grads[m], cfg);
        }
    }
    out.terms.total = out.terms.self + out.terms.con_h + out.terms.con_l + out.terms.ckd;
    return out;
}

}  // namespace msgcel

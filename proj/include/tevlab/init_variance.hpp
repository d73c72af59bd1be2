#pragma once

// Analytic variance propagation for attention stacks at initialization, plus
// the Monte-Carlo harness that verifies the closed forms empirically.
//
// With Kaiming-uniform fan-in initialization (variance 1/(3n)) and unit
// variance zero-mean input the closed forms are dimension-free:
//   full-rank linear      sigma^2(W x)        = 1/3
//   low-rank pair         sigma^2(Wu Wd x)    = 1/9
//   attention head        sigma^2(head(x))   <= 1/9   (MLRA), 1/3 (full rank)
//   attention module      sigma^2(attn(x))   <= 1/27  (MLRA), 1/9 (full rank)

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tevlab/common.hpp"
#include "tevlab/model.hpp"
#include "tevlab/rng.hpp"
#include "tevlab/tensor.hpp"

namespace tevlab {

// ----------------------------------------------------------------------
// Closed forms
// ----------------------------------------------------------------------

/// Variance of U(-sqrt(1/n), sqrt(1/n)): 1/(3n).
inline double kaiming_uniform_variance(std::size_t n) {
    if (n == 0) throw DomainError("kaiming_uniform_variance: n must be >= 1");
    return 1.0 / (3.0 * static_cast<double>(n));
}

enum class VarianceComponent { LinearFullRank, LinearMLRA, Head, AttentionModule };

inline std::string to_string(VarianceComponent c) {
    switch (c) {
        case VarianceComponent::LinearFullRank: return "linear_full_rank";
        case VarianceComponent::LinearMLRA: return "linear_mlra";
        case VarianceComponent::Head: return "head";
        case VarianceComponent::AttentionModule: return "attention_module";
    }
    return "?";
}

struct VariancePrediction {
    VarianceComponent component;
    double value = 0.0;        // analytic value, or bound when is_upper_bound
    bool is_upper_bound = false;
    std::size_t d_model = 0;
    std::size_t rank = 0;      // 0 for full-rank components
    double var_w = 0.0;        // sigma^2 of the square weight (full-rank path)
    double var_up = 0.0;       // sigma^2(W_up)
    double var_down = 0.0;     // sigma^2(W_down)
};

/// Output-entry variance of a full-rank linear at init: d * 1/(3d) = 1/3,
/// independent of d_model.
inline VariancePrediction predict_linear_variance(std::size_t d_model) {
    VariancePrediction p;
    p.component = VarianceComponent::LinearFullRank;
    p.d_model = d_model;
    p.var_w = kaiming_uniform_variance(d_model);
    p.value = static_cast<double>(d_model) * p.var_w;  // = 1/3 exactly
    return p;
}

/// Output-entry variance of a factorized projection at init:
/// r * d * 1/(3d) * 1/(3r) = 1/9, independent of both dimensions.
inline VariancePrediction predict_mlra_variance(std::size_t d_model, std::size_t rank) {
    if (rank < 1 || rank >= d_model) {
        throw DomainError("predict_mlra_variance: need 1 <= rank < d_model, got rank " +
                          std::to_string(rank) + ", d_model " + std::to_string(d_model));
    }
    VariancePrediction p;
    p.component = VarianceComponent::LinearMLRA;
    p.d_model = d_model;
    p.rank = rank;
    p.var_up = kaiming_uniform_variance(rank);      // W_up is [d x r], fan-in r
    p.var_down = kaiming_uniform_variance(d_model); // W_down is [r x d], fan-in d
    p.value = static_cast<double>(rank) * static_cast<double>(d_model) * p.var_up * p.var_down;
    return p;
}

/// Secondary prediction mode for Normal(0, sigma^2) initialization:
/// sigma^2(W x) = d * sigma^2.
inline double predict_linear_variance_normal(std::size_t d_model, double sigma = 0.02) {
    return static_cast<double>(d_model) * sigma * sigma;
}

/// Secondary prediction mode for Normal(0, sigma^2) initialization:
/// sigma^2(Wu Wd x) = r * d * sigma^4.
inline double predict_mlra_variance_normal(std::size_t d_model, std::size_t rank,
                                           double sigma = 0.02) {
    return static_cast<double>(rank) * static_cast<double>(d_model) * sigma * sigma * sigma *
           sigma;
}

/// Upper bounds on per-head and whole-module output variance at init. The
/// row-stochastic attention matrix keeps sigma^2(A x) <= 1 for normalized
/// input, so each projection multiplies the bound by its init variance gain.
inline std::pair<VariancePrediction, VariancePrediction> head_and_attention_bounds(
    AttentionVariant variant, std::size_t d_model = 0, std::size_t rank = 0) {
    VariancePrediction head;
    head.component = VarianceComponent::Head;
    head.is_upper_bound = true;
    head.d_model = d_model;
    head.rank = rank;
    head.value = (variant == AttentionVariant::MLRA) ? 1.0 / 9.0 : 1.0 / 3.0;

    VariancePrediction attn;
    attn.component = VarianceComponent::AttentionModule;
    attn.is_upper_bound = true;
    attn.d_model = d_model;
    attn.rank = rank;
    // One more full-rank projection (W_O): multiply by d * 1/(3d) = 1/3.
    attn.value = head.value / 3.0;
    return {head, attn};
}

// ----------------------------------------------------------------------
// Numerical rank via Gaussian elimination with partial pivoting
// ----------------------------------------------------------------------

inline std::size_t matrix_rank(std::vector<double> a, std::size_t rows, std::size_t cols,
                               double tol = 1e-9) {
    if (a.size() != rows * cols) {
        throw DimensionError("matrix_rank: buffer size does not match " + std::to_string(rows) +
                             "x" + std::to_string(cols));
    }
    std::size_t rank = 0;
    std::size_t pivot_row = 0;
    for (std::size_t col = 0; col < cols && pivot_row < rows; ++col) {
        std::size_t best = pivot_row;
        double best_abs = std::fabs(a[pivot_row * cols + col]);
        for (std::size_t r = pivot_row + 1; r < rows; ++r) {
            const double v = std::fabs(a[r * cols + col]);
            if (v > best_abs) {
                best = r;
                best_abs = v;
            }
        }
        if (best_abs <= tol) continue;
        if (best != pivot_row) {
            for (std::size_t c = 0; c < cols; ++c) {
                std::swap(a[best * cols + c], a[pivot_row * cols + c]);
            }
        }
        const double pivot = a[pivot_row * cols + col];
        for (std::size_t r = pivot_row + 1; r < rows; ++r) {
            const double factor = a[r * cols + col] / pivot;
            if (factor == 0.0) continue;
            for (std::size_t c = col; c < cols; ++c) {
                a[r * cols + c] -= factor * a[pivot_row * cols + c];
            }
        }
        ++rank;
        ++pivot_row;
    }
    return rank;
}

struct RankDemoResult {
    std::size_t rank_a;
    std::size_t rank_a1;
    std::size_t rank_a2;
};

/// The 3x6 matrix with columns [e1, e2, e3, e1+e2, e1+e3, e2+e3], column-split
/// into two 3x3 halves: the full matrix and both halves all have rank 3, so a
/// rank-limited matrix can still contain full-rank per-head submatrices.
inline RankDemoResult submatrix_rank_demo() {
    const std::vector<double> a = {
        1, 0, 0, 1, 1, 0,  //
        0, 1, 0, 1, 0, 1,  //
        0, 0, 1, 0, 1, 1,
    };
    std::vector<double> a1(9), a2(9);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            a1[i * 3 + j] = a[i * 6 + j];
            a2[i * 3 + j] = a[i * 6 + 3 + j];
        }
    }
    return {matrix_rank(a, 3, 6), matrix_rank(a1, 3, 3), matrix_rank(a2, 3, 3)};
}

// ----------------------------------------------------------------------
// Monte-Carlo measurement
// ----------------------------------------------------------------------

struct EmpiricalComponent {
    enum class Kind {
        IdentityLinear,    // sanity: variance passes through unchanged
        FullRankLinear,    // one Kaiming-init d x d matrix
        MlraProjection,    // W_up * W_down factor pair
        TwoFullRankLinears,// two stacked full-rank matrices, no normalization
        AttentionHead,     // per-head output, pre-W_O
        AttentionModule,   // merged heads through W_O
    };
    Kind kind = Kind::FullRankLinear;
    AttentionVariant variant = AttentionVariant::MLRA;  // head / module kinds
    std::size_t d_model = 64;
    std::size_t rank = 0;
    std::size_t n_heads = 4;
    std::size_t sample_rows = 32;  // Gaussian input rows per trial
};

struct EmpiricalVariance {
    double mean = 0.0;      // mean over trials of per-trial output-entry variance
    double std_error = 0.0; // standard error of that mean
    double ci_low = 0.0;    // 95% interval
    double ci_high = 0.0;
    std::size_t n_trials = 0;
};

namespace detail {

inline double population_variance(const std::vector<double>& x) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double acc = 0.0;
    for (double v : x) {
        const double c = v - mean;
        acc += c * c;
    }
    return acc / static_cast<double>(x.size());
}

// One trial of the requested component: fresh init, fresh Gaussian input.
inline double empirical_trial(const EmpiricalComponent& c, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t d = c.d_model, n = c.sample_rows;
    auto x = make_tensor<double>({n, d});
    for (auto& v : x->data) v = rng.normal();

    using K = EmpiricalComponent::Kind;
    Tape<double> tape;
    switch (c.kind) {
        case K::IdentityLinear: {
            return population_variance(x->data);
        }
        case K::FullRankLinear: {
            auto w = init_linear<double>(rng, d, d, LinearInit::KaimingUniform);
            w->requires_grad = false;
            auto y = tape.matmul(x, tape.transpose(w));
            return population_variance(y->data);
        }
        case K::MlraProjection: {
            auto wu = init_linear<double>(rng, d, c.rank, LinearInit::KaimingUniform);
            auto wd = init_linear<double>(rng, c.rank, d, LinearInit::KaimingUniform);
            wu->requires_grad = wd->requires_grad = false;
            auto y = tape.matmul(tape.matmul(x, tape.transpose(wd)), tape.transpose(wu));
            return population_variance(y->data);
        }
        case K::TwoFullRankLinears: {
            auto w1 = init_linear<double>(rng, d, d, LinearInit::KaimingUniform);
            auto w2 = init_linear<double>(rng, d, d, LinearInit::KaimingUniform);
            w1->requires_grad = w2->requires_grad = false;
            auto y = tape.matmul(tape.matmul(x, tape.transpose(w1)), tape.transpose(w2));
            return population_variance(y->data);
        }
        case K::AttentionHead:
        case K::AttentionModule: {
            ModelConfig cfg;
            cfg.d_model = d;
            cfg.n_layers = 1;
            cfg.n_heads = c.n_heads;
            cfg.vocab_size = 2;  // unused by the attention path
            cfg.context_len = n;
            cfg.variant = c.variant;
            cfg.rank = (c.variant == AttentionVariant::MLRA) ? c.rank : 0;
            auto params = build_model<double>(cfg, seed);
            auto& l = params.layers[0];

            auto project = [&](const TensorPtr<double>& w, const TensorPtr<double>& wu,
                               const TensorPtr<double>& wd) {
                if (c.variant == AttentionVariant::MLRA) {
                    return tape.matmul(tape.matmul(x, tape.transpose(wd)), tape.transpose(wu));
                }
                return tape.matmul(x, tape.transpose(w));
            };
            auto q = project(l.w_q, l.wu_q, l.wd_q);
            auto k = project(l.w_k, l.wu_k, l.wd_k);
            auto v = project(l.w_v, l.wu_v, l.wd_v);

            const std::size_t dh = cfg.d_head();
            const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
            std::vector<TensorPtr<double>> heads;
            std::vector<double> head_entries;
            for (std::size_t h = 0; h < cfg.n_heads; ++h) {
                auto qh = tape.slice_cols(q, h * dh, dh);
                auto kh = tape.slice_cols(k, h * dh, dh);
                auto vh = tape.slice_cols(v, h * dh, dh);
                auto attn = tape.causal_masked_softmax(
                    tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh));
                auto out = tape.matmul(attn, vh);
                heads.push_back(out);
                head_entries.insert(head_entries.end(), out->data.begin(), out->data.end());
            }
            if (c.kind == K::AttentionHead) return population_variance(head_entries);
            auto merged = tape.concat_cols(heads);
            auto module_out = tape.matmul(merged, tape.transpose(l.w_o));
            return population_variance(module_out->data);
        }
    }
    throw ContractError("unreachable empirical component kind");
}

}  // namespace detail

/// Re-initialize the component n_trials times with unit-variance Gaussian
/// inputs; returns the mean and 95% confidence interval of the per-trial
/// output-entry variance.
inline EmpiricalVariance measure_empirical_variance(const EmpiricalComponent& component,
                                                    std::size_t n_trials, std::uint64_t seed) {
    if (n_trials < 2) {
        throw DomainError("measure_empirical_variance: need n_trials >= 2, got " +
                          std::to_string(n_trials));
    }
    std::vector<double> trials(n_trials);
    for (std::size_t t = 0; t < n_trials; ++t) {
        trials[t] = detail::empirical_trial(component, derive_seed(seed, t + 1));
    }
    EmpiricalVariance r;
    r.n_trials = n_trials;
    for (double v : trials) r.mean += v;
    r.mean /= static_cast<double>(n_trials);
    double acc = 0.0;
    for (double v : trials) {
        const double c = v - r.mean;
        acc += c * c;
    }
    const double sample_var = acc / static_cast<double>(n_trials - 1);
    r.std_error = std::sqrt(sample_var / static_cast<double>(n_trials));
    r.ci_low = r.mean - 1.96 * r.std_error;
    r.ci_high = r.mean + 1.96 * r.std_error;
    return r;
}

/// Draw `samples` values from U(-sqrt(1/n), sqrt(1/n)) and return their
/// population variance (Monte-Carlo check of kaiming_uniform_variance).
inline double empirical_kaiming_variance(std::size_t n, std::size_t samples, std::uint64_t seed) {
    Rng rng(seed);
    const double bound = std::sqrt(1.0 / static_cast<double>(n));
    std::vector<double> xs(samples);
    for (auto& x : xs) x = rng.uniform(-bound, bound);
    return detail::population_variance(xs);
}

// ----------------------------------------------------------------------
// Prediction-vs-measurement report
// ----------------------------------------------------------------------

struct VarianceReportRow {
    std::string component;
    double predicted = 0.0;
    bool is_upper_bound = false;
    double measured = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    double tolerance = 0.0;  // relative for equalities, bound multiplier for bounds
    bool pass = false;
};

/// Predicted-vs-measured table for the four analyzed components at one
/// (d_model, rank) point. Equalities must match within rel_tol; bound rows
/// must measure at or below bound * bound_slack.
inline std::vector<VarianceReportRow> variance_report(std::size_t d_model, std::size_t rank,
                                                      std::size_t n_trials, std::uint64_t seed,
                                                      double rel_tol = 0.10,
                                                      double bound_slack = 1.05) {
    std::vector<VarianceReportRow> rows;
    auto add_equality = [&](const VariancePrediction& p, EmpiricalComponent::Kind kind) {
        EmpiricalComponent c;
        c.kind = kind;
        c.d_model = d_model;
        c.rank = rank;
        auto m = measure_empirical_variance(c, n_trials, derive_seed(seed, rows.size() + 101));
        VarianceReportRow row;
        row.component = to_string(p.component);
        row.predicted = p.value;
        row.is_upper_bound = false;
        row.measured = m.mean;
        row.ci_low = m.ci_low;
        row.ci_high = m.ci_high;
        row.tolerance = rel_tol;
        row.pass = std::fabs(m.mean - p.value) <= rel_tol * p.value;
        rows.push_back(row);
    };
    auto add_bound = [&](const VariancePrediction& p, EmpiricalComponent::Kind kind) {
        EmpiricalComponent c;
        c.kind = kind;
        c.variant = AttentionVariant::MLRA;
        c.d_model = d_model;
        c.rank = rank;
        auto m = measure_empirical_variance(c, n_trials, derive_seed(seed, rows.size() + 101));
        VarianceReportRow row;
        row.component = to_string(p.component);
        row.predicted = p.value;
        row.is_upper_bound = true;
        row.measured = m.mean;
        row.ci_low = m.ci_low;
        row.ci_high = m.ci_high;
        row.tolerance = bound_slack;
        row.pass = m.mean <= p.value * bound_slack;
        rows.push_back(row);
    };

    add_equality(predict_linear_variance(d_model), EmpiricalComponent::Kind::FullRankLinear);
    add_equality(predict_mlra_variance(d_model, rank), EmpiricalComponent::Kind::MlraProjection);
    auto [head, attn] = head_and_attention_bounds(AttentionVariant::MLRA, d_model, rank);
    add_bound(head, EmpiricalComponent::Kind::AttentionHead);
    add_bound(attn, EmpiricalComponent::Kind::AttentionModule);
    return rows;
}

inline void to_json(nlohmann::json& j, const VarianceReportRow& r) {
    j = nlohmann::json{{"component", r.component}, {"predicted", r.predicted},
                       {"is_upper_bound", r.is_upper_bound}, {"measured", r.measured},
                       {"ci_low", r.ci_low},       {"ci_high", r.ci_high},
                       {"tolerance", r.tolerance}, {"pass", r.pass}};
}

}  // namespace tevlab

#pragma once

// Dense row-major tensors plus a tape for reverse-mode differentiation.
//
// The tape records every operation in execution order (which is already a
// topological order), so one backward pass walks the list once, in reverse.
// Gradients accumulate into Tensor::grad; callers zero them between steps.
// Each backward pass computes pass-local adjoints and then adds them into
// the persistent grad buffers, so running backward twice without zeroing
// doubles every gradient exactly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tevlab/common.hpp"

namespace tevlab {

template <typename Real>
struct Tensor {
    static_assert(std::is_floating_point_v<Real>);

    Shape shape;
    std::vector<Real> data;   // flat, row-major
    bool requires_grad = false;
    std::vector<Real> grad;   // empty until touched by backward

    Tensor() = default;

    explicit Tensor(Shape s, Real fill = Real(0))
        : shape(std::move(s)), data(shape_numel(shape), fill) {}

    Tensor(Shape s, std::vector<Real> values) : shape(std::move(s)), data(std::move(values)) {
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        if (!all_finite(data)) {
            throw DomainError("tensor initialized with non-finite value");
        }
    }

    std::size_t size() const { return data.size(); }
    std::size_t ndim() const { return shape.size(); }

    std::size_t rows() const {
        if (shape.size() != 2) throw DimensionError("rows() on non-2D tensor " + shape_str(shape));
        return shape[0];
    }
    std::size_t cols() const {
        if (shape.size() != 2) throw DimensionError("cols() on non-2D tensor " + shape_str(shape));
        return shape[1];
    }

    Real& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    Real at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), Real(0));
    }
};

template <typename Real>
using TensorPtr = std::shared_ptr<Tensor<Real>>;

template <typename Real>
TensorPtr<Real> make_tensor(Shape shape, Real fill = Real(0), bool requires_grad = false) {
    auto t = std::make_shared<Tensor<Real>>(std::move(shape), fill);
    t->requires_grad = requires_grad;
    return t;
}

template <typename Real>
TensorPtr<Real> make_tensor(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    auto t = std::make_shared<Tensor<Real>>(std::move(shape), std::move(values));
    t->requires_grad = requires_grad;
    return t;
}

// ----------------------------------------------------------------------
// Matmul kernels. All three accumulate into c with a fixed per-row
// reduction order; row partitioning across threads therefore yields
// bit-identical results for any thread count.
// ----------------------------------------------------------------------

namespace detail {

template <typename F>
void parallel_rows(std::size_t m, F&& body) {
    const int nt = num_threads();
    if (nt <= 1 || m < 2 * static_cast<std::size_t>(nt)) {
        body(std::size_t{0}, m);
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(nt));
    const std::size_t chunk = (m + static_cast<std::size_t>(nt) - 1) / static_cast<std::size_t>(nt);
    for (int t = 0; t < nt; ++t) {
        const std::size_t lo = std::min(m, static_cast<std::size_t>(t) * chunk);
        const std::size_t hi = std::min(m, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& w : workers) w.join();
}

// c[m x n] += a[m x k] * b[k x n]
template <typename Real>
void matmul_nn_acc(const Real* a, const Real* b, Real* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    parallel_rows(m, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            Real* ci = c + i * n;
            const Real* ai = a + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const Real aik = ai[kk];
                const Real* bk = b + kk * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
            }
        }
    });
}

// c[m x n] += a[m x k] * b[n x k]^T
template <typename Real>
void matmul_nt_acc(const Real* a, const Real* b, Real* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    parallel_rows(m, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const Real* ai = a + i * k;
            Real* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const Real* bj = b + j * k;
                Real acc = Real(0);
                for (std::size_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
                ci[j] += acc;
            }
        }
    });
}

// c[k x n] += a[m x k]^T * b[m x n]
template <typename Real>
void matmul_tn_acc(const Real* a, const Real* b, Real* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    parallel_rows(k, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            Real* ci = c + i * n;
            for (std::size_t mm = 0; mm < m; ++mm) {
                const Real ami = a[mm * k + i];
                const Real* bm = b + mm * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += ami * bm[j];
            }
        }
    });
}

template <typename Real>
void axpy(std::vector<Real>& dst, const std::vector<Real>& src, Real alpha = Real(1)) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

inline constexpr double kSqrt2 = 1.4142135623730950488016887242097;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;

}  // namespace detail

// ----------------------------------------------------------------------
// Tape
// ----------------------------------------------------------------------

template <typename Real>
class Tape {
public:
    using Ptr = TensorPtr<Real>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t num_ops() const { return ops_.size(); }

    // ---- elementwise ----

    /// out = a + b, same shape.
    Ptr add(const Ptr& a, const Ptr& b) {
        require_same_shape(a, b, "add");
        Ptr out = fresh(a->shape, a, b);
        for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + b->data[i];
        record(out, [this, a, b, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            detail::axpy(grad_buf(a), *g);
            detail::axpy(grad_buf(b), *g);
        });
        return out;
    }

    /// out = a .* b, same shape.
    Ptr mul(const Ptr& a, const Ptr& b) {
        require_same_shape(a, b, "mul");
        Ptr out = fresh(a->shape, a, b);
        for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * b->data[i];
        record(out, [this, a, b, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            auto& ga = grad_buf(a);
            auto& gb = grad_buf(b);
            for (std::size_t i = 0; i < g->size(); ++i) {
                ga[i] += (*g)[i] * b->data[i];
                gb[i] += (*g)[i] * a->data[i];
            }
        });
        return out;
    }

    /// out = c * a for a compile-time-constant scalar c (not differentiated w.r.t. c).
    Ptr scale(const Ptr& a, Real c) {
        Ptr out = fresh(a->shape, a);
        for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = c * a->data[i];
        record(out, [this, a, c, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            detail::axpy(grad_buf(a), *g, c);
        });
        return out;
    }

    /// out[i,j] = x[i,j] + bias[j]; the only broadcast this engine permits.
    Ptr add_row_bias(const Ptr& x, const Ptr& bias) {
        if (x->ndim() != 2 || bias->ndim() != 1 || bias->shape[0] != x->shape[1]) {
            throw DimensionError("add_row_bias: x " + shape_str(x->shape) +
                                 " vs bias " + shape_str(bias->shape));
        }
        const std::size_t m = x->shape[0], d = x->shape[1];
        Ptr out = fresh(x->shape, x, bias);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j)
                out->data[i * d + j] = x->data[i * d + j] + bias->data[j];
        record(out, [this, x, bias, m, d, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            detail::axpy(grad_buf(x), *g);
            auto& gb = grad_buf(bias);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) gb[j] += (*g)[i * d + j];
        });
        return out;
    }

    // ---- linear algebra ----

    /// Standard matrix product a[m x k] * b[k x n].
    Ptr matmul(const Ptr& a, const Ptr& b) {
        if (a->ndim() != 2 || b->ndim() != 2 || a->shape[1] != b->shape[0]) {
            throw DimensionError("matmul: inner dimensions disagree, a " +
                                 shape_str(a->shape) + " vs b " + shape_str(b->shape));
        }
        const std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
        Ptr out = fresh({m, n}, a, b);
        detail::matmul_nn_acc(a->data.data(), b->data.data(), out->data.data(), m, k, n);
        record(out, [this, a, b, m, k, n, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            // da += g * b^T ; db += a^T * g
            detail::matmul_nt_acc(g->data(), b->data.data(), grad_buf(a).data(), m, n, k);
            detail::matmul_tn_acc(a->data.data(), g->data(), grad_buf(b).data(), m, k, n);
        });
        return out;
    }

    /// 2-D transpose.
    Ptr transpose(const Ptr& a) {
        const std::size_t m = a->rows(), n = a->cols();
        Ptr out = fresh({n, m}, a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                out->data[j * m + i] = a->data[i * n + j];
        record(out, [this, a, m, n, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            auto& ga = grad_buf(a);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    ga[i * n + j] += (*g)[j * m + i];
        });
        return out;
    }

    // ---- normalization / activations ----

    /// Per-row layer normalization over the last dimension, then affine.
    Ptr layer_norm(const Ptr& x, const Ptr& gain, const Ptr& bias, Real eps = Real(1e-5)) {
        if (x->ndim() == 0 || x->shape.back() == 0) {
            throw DimensionError("layer_norm: empty normalized dimension");
        }
        const std::size_t d = x->shape.back();
        if (gain->size() != d || bias->size() != d) {
            throw DimensionError("layer_norm: gain/bias length must equal last dim " +
                                 std::to_string(d));
        }
        const std::size_t rows = x->size() / d;
        Ptr out = fresh(x->shape, x, gain, bias);
        auto xhat = std::make_shared<std::vector<Real>>(x->size());
        auto inv_std = std::make_shared<std::vector<Real>>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* xr = x->data.data() + r * d;
            Real mean = Real(0);
            for (std::size_t j = 0; j < d; ++j) mean += xr[j];
            mean /= static_cast<Real>(d);
            Real var = Real(0);
            for (std::size_t j = 0; j < d; ++j) {
                const Real c = xr[j] - mean;
                var += c * c;
            }
            var /= static_cast<Real>(d);
            const Real is = Real(1) / std::sqrt(var + eps);
            (*inv_std)[r] = is;
            for (std::size_t j = 0; j < d; ++j) {
                const Real xh = (xr[j] - mean) * is;
                (*xhat)[r * d + j] = xh;
                out->data[r * d + j] = gain->data[j] * xh + bias->data[j];
            }
        }
        record(out, [this, x, gain, bias, xhat, inv_std, rows, d, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            auto& gx = grad_buf(x);
            auto& gg = grad_buf(gain);
            auto& gb = grad_buf(bias);
            for (std::size_t r = 0; r < rows; ++r) {
                const Real* gr = g->data() + r * d;
                const Real* xh = xhat->data() + r * d;
                Real sum_t = Real(0), sum_tx = Real(0);
                for (std::size_t j = 0; j < d; ++j) {
                    const Real t = gr[j] * gain->data[j];
                    sum_t += t;
                    sum_tx += t * xh[j];
                }
                const Real mt = sum_t / static_cast<Real>(d);
                const Real mtx = sum_tx / static_cast<Real>(d);
                const Real is = (*inv_std)[r];
                for (std::size_t j = 0; j < d; ++j) {
                    const Real t = gr[j] * gain->data[j];
                    gx[r * d + j] += (t - mt - xh[j] * mtx) * is;
                    gg[j] += gr[j] * xh[j];
                    gb[j] += gr[j];
                }
            }
        });
        return out;
    }

    /// Row-wise softmax over the last dimension, stabilized by max-subtraction.
    Ptr softmax_rows(const Ptr& x) {
        if (x->ndim() == 0 || x->shape.back() == 0) {
            throw DimensionError("softmax_rows: empty rows");
        }
        const std::size_t n = x->shape.back();
        const std::size_t rows = x->size() / n;
        Ptr out = fresh(x->shape, x);
        for (std::size_t r = 0; r < rows; ++r) {
            softmax_row(x->data.data() + r * n, out->data.data() + r * n, n);
        }
        record(out, [this, x, out, rows, n, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            auto& gx = grad_buf(x);
            for (std::size_t r = 0; r < rows; ++r) {
                softmax_row_backward(out->data.data() + r * n, g->data() + r * n,
                                     gx.data() + r * n, n);
            }
        });
        return out;
    }

    /// Softmax of a square score matrix where row i attends to columns <= i
    /// only; masked entries are exactly zero in the output.
    Ptr causal_masked_softmax(const Ptr& scores) {
        const std::size_t n = scores->rows();
        if (scores->cols() != n) {
            throw DimensionError("causal_masked_softmax: scores must be square, got " +
                                 shape_str(scores->shape));
        }
        Ptr out = fresh(scores->shape, scores);
        for (std::size_t i = 0; i < n; ++i) {
            softmax_row(scores->data.data() + i * n, out->data.data() + i * n, i + 1);
            for (std::size_t j = i + 1; j < n; ++j) out->data[i * n + j] = Real(0);
        }
        record(out, [this, scores, out, n, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            auto& gx = grad_buf(scores);
            for (std::size_t i = 0; i < n; ++i) {
                softmax_row_backward(out->data.data() + i * n, g->data() + i * n,
                                     gx.data() + i * n, i + 1);
            }
        });
        return out;
    }

    /// Gaussian error linear unit, exact (erf) form.
    Ptr gelu(const Ptr& x) {
        Ptr out = fresh(x->shape, x);
        for (std::size_t i = 0; i < x->size(); ++i) {
            const Real v = x->data[i];
            out->data[i] = Real(0.5) * v *
                           (Real(1) + static_cast<Real>(std::erf(static_cast<double>(v) / detail::kSqrt2)));
        }
        record(out, [this, x, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            auto& gx = grad_buf(x);
            for (std::size_t i = 0; i < x->size(); ++i) {
                const double v = static_cast<double>(x->data[i]);
                const double cdf = 0.5 * (1.0 + std::erf(v / detail::kSqrt2));
                const double pdf = detail::kInvSqrt2Pi * std::exp(-0.5 * v * v);
                gx[i] += (*g)[i] * static_cast<Real>(cdf + v * pdf);
            }
        });
        return out;
    }

    // ---- losses / reductions ----

    /// Mean over positions of -log softmax(logits)[target]. exp(result) is the
    /// perplexity of the same positions.
    Ptr cross_entropy_next_token(const Ptr& logits, std::span<const int> targets) {
        const std::size_t n = logits->rows(), vocab = logits->cols();
        if (targets.size() != n) {
            throw DimensionError("cross_entropy_next_token: " + std::to_string(targets.size()) +
                                 " targets for " + std::to_string(n) + " positions");
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
                throw IndexError("target id " + std::to_string(targets[i]) +
                                 " out of range for vocab " + std::to_string(vocab));
            }
        }
        auto probs = std::make_shared<std::vector<Real>>(logits->size());
        Real loss = Real(0);
        for (std::size_t i = 0; i < n; ++i) {
            const Real* row = logits->data.data() + i * vocab;
            Real* prow = probs->data() + i * vocab;
            Real mx = row[0];
            for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
            Real z = Real(0);
            for (std::size_t j = 0; j < vocab; ++j) {
                prow[j] = std::exp(row[j] - mx);
                z += prow[j];
            }
            for (std::size_t j = 0; j < vocab; ++j) prow[j] /= z;
            loss -= row[static_cast<std::size_t>(targets[i])] - mx - std::log(z);
        }
        loss /= static_cast<Real>(n);
        Ptr out = fresh({1}, logits);
        out->data[0] = loss;
        std::vector<int> tgt(targets.begin(), targets.end());
        record(out, [this, logits, probs, tgt = std::move(tgt), n, vocab, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            const Real go = (*g)[0] / static_cast<Real>(n);
            auto& gl = grad_buf(logits);
            for (std::size_t i = 0; i < n; ++i) {
                const Real* prow = probs->data() + i * vocab;
                Real* grow = gl.data() + i * vocab;
                for (std::size_t j = 0; j < vocab; ++j) grow[j] += go * prow[j];
                grow[static_cast<std::size_t>(tgt[i])] -= go;
            }
        });
        return out;
    }

    /// Full reduction to a scalar.
    Ptr sum(const Ptr& x) {
        Ptr out = fresh({1}, x);
        Real acc = Real(0);
        for (Real v : x->data) acc += v;
        out->data[0] = acc;
        record(out, [this, x, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            auto& gx = grad_buf(x);
            const Real go = (*g)[0];
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go;
        });
        return out;
    }

    // ---- indexing / reshaping ----

    /// Gather rows of a [V x d] table by id. Backward scatters row gradients.
    Ptr embedding_rows(const Ptr& table, std::span<const int> ids) {
        const std::size_t vocab = table->rows(), d = table->cols();
        for (int id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
                throw IndexError("row id " + std::to_string(id) + " out of range for table with " +
                                 std::to_string(vocab) + " rows");
            }
        }
        const std::size_t n = ids.size();
        Ptr out = fresh({n, d}, table);
        for (std::size_t i = 0; i < n; ++i) {
            const Real* src = table->data.data() + static_cast<std::size_t>(ids[i]) * d;
            std::copy(src, src + d, out->data.data() + i * d);
        }
        std::vector<int> idv(ids.begin(), ids.end());
        record(out, [this, table, idv = std::move(idv), d, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            auto& gt = grad_buf(table);
            for (std::size_t i = 0; i < idv.size(); ++i) {
                Real* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                const Real* src = g->data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
        return out;
    }

    /// Columns [start, start+len) of a 2-D tensor.
    Ptr slice_cols(const Ptr& x, std::size_t start, std::size_t len) {
        const std::size_t m = x->rows(), d = x->cols();
        if (start + len > d) {
            throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                                 std::to_string(start + len) + ") exceeds " + std::to_string(d) +
                                 " columns");
        }
        Ptr out = fresh({m, len}, x);
        for (std::size_t i = 0; i < m; ++i) {
            std::copy(x->data.data() + i * d + start, x->data.data() + i * d + start + len,
                      out->data.data() + i * len);
        }
        record(out, [this, x, start, len, m, d, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            auto& gx = grad_buf(x);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < len; ++j)
                    gx[i * d + start + j] += (*g)[i * len + j];
        });
        return out;
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    Ptr concat_cols(const std::vector<Ptr>& parts) {
        if (parts.empty()) throw DimensionError("concat_cols: no inputs");
        const std::size_t m = parts[0]->rows();
        std::size_t total = 0;
        bool rg = false;
        for (const auto& p : parts) {
            if (p->rows() != m) {
                throw DimensionError("concat_cols: row count mismatch " +
                                     std::to_string(p->rows()) + " vs " + std::to_string(m));
            }
            total += p->cols();
            rg = rg || p->requires_grad;
        }
        Ptr out = make_tensor<Real>({m, total});
        out->requires_grad = rg;
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t w = p->cols();
            for (std::size_t i = 0; i < m; ++i) {
                std::copy(p->data.data() + i * w, p->data.data() + (i + 1) * w,
                          out->data.data() + i * total + off);
            }
            off += w;
        }
        id_of(out);
        if (rg) {
            record(out, [this, parts, m, total, oid = id_of(out)](Tape&) {
                const auto* g = out_adj(oid);
                if (!g) return;
                std::size_t o = 0;
                for (const auto& p : parts) {
                    const std::size_t w = p->cols();
                    auto& gp = grad_buf(p);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            gp[i * w + j] += (*g)[i * total + o + j];
                    o += w;
                }
            });
        }
        return out;
    }

    /// out = w * (gamma[0] * c); gamma is a learned 1-element tensor, c a
    /// per-step constant (e.g. a cached inverse spectral norm).
    Ptr scale_by_param(const Ptr& w, const Ptr& gamma, Real c) {
        if (gamma->size() != 1) {
            throw DimensionError("scale_by_param: gamma must be a 1-element tensor");
        }
        const Real s = gamma->data[0] * c;
        Ptr out = fresh(w->shape, w, gamma);
        for (std::size_t i = 0; i < w->size(); ++i) out->data[i] = w->data[i] * s;
        record(out, [this, w, gamma, c, s, oid = id_of(out)](Tape&) {
            const auto* g = out_adj(oid);
            if (!g) return;
            detail::axpy(grad_buf(w), *g, s);
            Real acc = Real(0);
            for (std::size_t i = 0; i < w->size(); ++i) acc += (*g)[i] * w->data[i];
            grad_buf(gamma)[0] += acc * c;
        });
        return out;
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Adjoints are pass-local; persistent
    /// grads of every requires_grad tensor receive `+= adjoint` at the end.
    void backward(const Ptr& root) {
        if (root->size() != 1) {
            throw ContractError("backward: root must be scalar, got shape " +
                                shape_str(root->shape));
        }
        auto it = ids_.find(root.get());
        if (it == ids_.end()) {
            throw ContractError("backward: root tensor is not on this tape");
        }
        adj_.assign(tensors_.size(), {});
        adj_[static_cast<std::size_t>(it->second)] = {Real(1)};
        for (auto op = ops_.rbegin(); op != ops_.rend(); ++op) {
            op->back(*this);
        }
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            auto& t = *tensors_[i];
            if (t.requires_grad && !adj_[i].empty()) {
                t.ensure_grad();
                detail::axpy(t.grad, adj_[i]);
            }
        }
        adj_.clear();
    }

private:
    struct OpRecord {
        std::function<void(Tape&)> back;
    };

    int id_of(const Ptr& t) {
        auto [it, inserted] = ids_.try_emplace(t.get(), static_cast<int>(tensors_.size()));
        if (inserted) tensors_.push_back(t);
        return it->second;
    }

    Ptr fresh(const Shape& shape, const Ptr& a, const Ptr& b = nullptr, const Ptr& c = nullptr) {
        Ptr out = make_tensor<Real>(shape);
        out->requires_grad = a->requires_grad || (b && b->requires_grad) || (c && c->requires_grad);
        id_of(a);
        if (b) id_of(b);
        if (c) id_of(c);
        id_of(out);
        return out;
    }

    void record(const Ptr& out, std::function<void(Tape&)> back) {
        if (out->requires_grad) ops_.push_back({std::move(back)});
    }

    const std::vector<Real>* out_adj(int id) {
        const auto& a = adj_[static_cast<std::size_t>(id)];
        return a.empty() ? nullptr : &a;
    }

    std::vector<Real>& grad_buf(const Ptr& t) {
        const std::size_t id = static_cast<std::size_t>(id_of(t));
        auto& a = adj_[id];
        if (a.empty()) a.assign(t->size(), Real(0));
        return a;
    }

    static void softmax_row(const Real* x, Real* y, std::size_t n) {
        Real mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        Real z = Real(0);
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        const Real inv = Real(1) / z;
        for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
    }

    static void softmax_row_backward(const Real* y, const Real* g, Real* gx, std::size_t n) {
        Real dot = Real(0);
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (g[j] - dot);
    }

    std::vector<Ptr> tensors_;
    std::unordered_map<const Tensor<Real>*, int> ids_;
    std::vector<OpRecord> ops_;
    std::vector<std::vector<Real>> adj_;
};

}  // namespace tevlab

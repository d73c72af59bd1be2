#pragma once

// Pre-LN GPT-style decoder with pluggable attention variants:
//   Standard     — full-rank d_model x d_model Q/K/V projections
//   MLRA         — Q/K/V stored as thin factor pairs W_up (d x r), W_down (r x d);
//                  the full product is never materialized during training
//   SigmaReparam — full-rank weights scaled by gamma / sigma_max(W), sigma_max
//                  tracked by power iteration
//
// The logit head is tied to the embedding matrix: logits = X_N * E^T uses the
// same storage as the input embedding unless tie_embeddings is false.

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tevlab/common.hpp"
#include "tevlab/rng.hpp"
#include "tevlab/tensor.hpp"

namespace tevlab {

enum class AttentionVariant { Standard, MLRA, SigmaReparam };
enum class LinearInit { KaimingUniform, Normal002 };

inline std::string to_string(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::Standard: return "standard";
        case AttentionVariant::MLRA: return "mlra";
        case AttentionVariant::SigmaReparam: return "sigma-reparam";
    }
    return "standard";
}

inline AttentionVariant attention_variant_from_string(const std::string& s) {
    if (s == "standard") return AttentionVariant::Standard;
    if (s == "mlra") return AttentionVariant::MLRA;
    if (s == "sigma-reparam") return AttentionVariant::SigmaReparam;
    throw ConfigError("unknown attention variant '" + s + "'");
}

inline std::string to_string(LinearInit v) {
    return v == LinearInit::KaimingUniform ? "kaiming-uniform" : "normal-0.02";
}

inline LinearInit linear_init_from_string(const std::string& s) {
    if (s == "kaiming-uniform") return LinearInit::KaimingUniform;
    if (s == "normal-0.02") return LinearInit::Normal002;
    throw ConfigError("unknown linear init '" + s + "'");
}

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 8;
    std::size_t n_heads = 4;
    std::size_t vocab_size = 256;
    std::size_t context_len = 128;
    AttentionVariant variant = AttentionVariant::Standard;
    std::size_t rank = 0;  // MLRA only
    bool tie_embeddings = true;
    LinearInit linear_init = LinearInit::KaimingUniform;

    std::size_t d_head() const { return d_model / n_heads; }

    void validate() const {
        if (d_model == 0) throw ConfigError("d_model must be positive");
        if (n_layers == 0) throw ConfigError("n_layers must be positive");
        if (n_heads == 0) throw ConfigError("n_heads must be positive");
        if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
        if (context_len == 0) throw ConfigError("context_len must be positive");
        if (d_model % n_heads != 0) {
            throw ConfigError("d_model (" + std::to_string(d_model) +
                              ") not divisible by n_heads (" + std::to_string(n_heads) + ")");
        }
        if (variant == AttentionVariant::MLRA) {
            if (rank < 1 || rank >= d_model) {
                throw ConfigError("MLRA requires 1 <= rank < d_model, got rank " +
                                  std::to_string(rank) + " with d_model " +
                                  std::to_string(d_model));
            }
        } else if (rank != 0) {
            throw ConfigError("rank is only meaningful for the mlra variant");
        }
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"d_model", c.d_model},
                       {"n_layers", c.n_layers},
                       {"n_heads", c.n_heads},
                       {"vocab_size", c.vocab_size},
                       {"context_len", c.context_len},
                       {"variant", to_string(c.variant)},
                       {"rank", c.rank},
                       {"tie_embeddings", c.tie_embeddings},
                       {"linear_init", to_string(c.linear_init)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("d_model").get_to(c.d_model);
    j.at("n_layers").get_to(c.n_layers);
    j.at("n_heads").get_to(c.n_heads);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("context_len").get_to(c.context_len);
    c.variant = attention_variant_from_string(j.at("variant").get<std::string>());
    j.at("rank").get_to(c.rank);
    j.at("tie_embeddings").get_to(c.tie_embeddings);
    c.linear_init = linear_init_from_string(j.at("linear_init").get<std::string>());
}

// ----------------------------------------------------------------------
// Spectral-norm tracking for the SigmaReparam variant
// ----------------------------------------------------------------------

template <typename Real>
struct SpectralState {
    std::vector<Real> u, v;  // power-iteration vectors (buffers, not learned)
    Real sigma = Real(1);    // cached sigma_max estimate
};

namespace detail {

template <typename Real>
Real normalize_vec(std::vector<Real>& x) {
    Real n2 = Real(0);
    for (Real v : x) n2 += v * v;
    const Real n = std::sqrt(n2);
    if (n > Real(1e-30)) {
        for (Real& v : x) v /= n;
    }
    return n;
}

}  // namespace detail

/// Run `iters` power-iteration steps on W (m x n), updating state.u / state.v
/// and the cached sigma estimate. Vectors are (re)initialized deterministically
/// when absent. Returns the sigma estimate, floored at 1e-12.
template <typename Real>
Real power_iterate(const Tensor<Real>& w, SpectralState<Real>& st, int iters) {
    const std::size_t m = w.rows(), n = w.cols();
    if (st.u.size() != m) {
        st.u.assign(m, Real(1) / std::sqrt(static_cast<Real>(m)));
    }
    if (st.v.size() != n) {
        st.v.assign(n, Real(1) / std::sqrt(static_cast<Real>(n)));
    }
    for (int it = 0; it < iters; ++it) {
        // v <- normalize(W^T u)
        for (std::size_t j = 0; j < n; ++j) st.v[j] = Real(0);
        for (std::size_t i = 0; i < m; ++i) {
            const Real ui = st.u[i];
            const Real* wi = w.data.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) st.v[j] += wi[j] * ui;
        }
        detail::normalize_vec(st.v);
        // u <- normalize(W v)
        for (std::size_t i = 0; i < m; ++i) {
            const Real* wi = w.data.data() + i * n;
            Real acc = Real(0);
            for (std::size_t j = 0; j < n; ++j) acc += wi[j] * st.v[j];
            st.u[i] = acc;
        }
        detail::normalize_vec(st.u);
    }
    Real sigma = Real(0);
    for (std::size_t i = 0; i < m; ++i) {
        const Real* wi = w.data.data() + i * n;
        Real acc = Real(0);
        for (std::size_t j = 0; j < n; ++j) acc += wi[j] * st.v[j];
        sigma += st.u[i] * acc;
    }
    st.sigma = std::max(sigma, Real(1e-12));
    return st.sigma;
}

/// Effective weight gamma * W / sigma_max(W). sigma_max comes from `iters`
/// power-iteration steps on the stored state. A zero matrix maps to a zero
/// matrix (sigma floored at 1e-12).
template <typename Real>
Tensor<Real> sigma_reparam_apply(const Tensor<Real>& w, SpectralState<Real>& st, Real gamma,
                                 int iters = 1) {
    if (w.ndim() != 2) throw ContractError("sigma_reparam_apply: weight must be 2-D");
    const Real sigma = power_iterate(w, st, iters);
    Tensor<Real> out(w.shape);
    const Real s = gamma / sigma;
    for (std::size_t i = 0; i < w.size(); ++i) out.data[i] = w.data[i] * s;
    return out;
}

// ----------------------------------------------------------------------
// Parameters
// ----------------------------------------------------------------------

template <typename Real>
struct LayerParams {
    TensorPtr<Real> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    // Standard / SigmaReparam projections [d x d]
    TensorPtr<Real> w_q, w_k, w_v;
    // MLRA factors: up [d x r], down [r x d]
    TensorPtr<Real> wu_q, wd_q, wu_k, wd_k, wu_v, wd_v;
    TensorPtr<Real> w_o, b_o;
    TensorPtr<Real> w_fc, b_fc, w_proj, b_proj;
    // SigmaReparam learned scales + power-iteration buffers
    TensorPtr<Real> gamma_q, gamma_k, gamma_v, gamma_o, gamma_fc, gamma_proj;
    SpectralState<Real> spec_q, spec_k, spec_v, spec_o, spec_fc, spec_proj;
};

template <typename Real>
struct Params {
    ModelConfig config;
    TensorPtr<Real> embedding;  // [V x d]; doubles as the logit head when tied
    TensorPtr<Real> pos;        // [context_len x d]
    TensorPtr<Real> lm_head;    // [V x d], untied models only
    std::vector<LayerParams<Real>> layers;
    TensorPtr<Real> final_ln_gain, final_ln_bias;

    /// Trainable tensors in a stable order (checkpoint and optimizer order).
    std::vector<std::pair<std::string, TensorPtr<Real>>> named_tensors() const {
        std::vector<std::pair<std::string, TensorPtr<Real>>> out;
        out.emplace_back("embedding.weight", embedding);
        out.emplace_back("pos.weight", pos);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            out.emplace_back(p + "ln1.gain", l.ln1_gain);
            out.emplace_back(p + "ln1.bias", l.ln1_bias);
            if (config.variant == AttentionVariant::MLRA) {
                out.emplace_back(p + "attn.q.up", l.wu_q);
                out.emplace_back(p + "attn.q.down", l.wd_q);
                out.emplace_back(p + "attn.k.up", l.wu_k);
                out.emplace_back(p + "attn.k.down", l.wd_k);
                out.emplace_back(p + "attn.v.up", l.wu_v);
                out.emplace_back(p + "attn.v.down", l.wd_v);
            } else {
                out.emplace_back(p + "attn.q.weight", l.w_q);
                out.emplace_back(p + "attn.k.weight", l.w_k);
                out.emplace_back(p + "attn.v.weight", l.w_v);
            }
            out.emplace_back(p + "attn.out.weight", l.w_o);
            out.emplace_back(p + "attn.out.bias", l.b_o);
            if (config.variant == AttentionVariant::SigmaReparam) {
                out.emplace_back(p + "attn.q.gamma", l.gamma_q);
                out.emplace_back(p + "attn.k.gamma", l.gamma_k);
                out.emplace_back(p + "attn.v.gamma", l.gamma_v);
                out.emplace_back(p + "attn.out.gamma", l.gamma_o);
                out.emplace_back(p + "mlp.fc.gamma", l.gamma_fc);
                out.emplace_back(p + "mlp.proj.gamma", l.gamma_proj);
            }
            out.emplace_back(p + "ln2.gain", l.ln2_gain);
            out.emplace_back(p + "ln2.bias", l.ln2_bias);
            out.emplace_back(p + "mlp.fc.weight", l.w_fc);
            out.emplace_back(p + "mlp.fc.bias", l.b_fc);
            out.emplace_back(p + "mlp.proj.weight", l.w_proj);
            out.emplace_back(p + "mlp.proj.bias", l.b_proj);
        }
        out.emplace_back("final_ln.gain", final_ln_gain);
        out.emplace_back("final_ln.bias", final_ln_bias);
        if (!config.tie_embeddings) out.emplace_back("lm_head.weight", lm_head);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_tensors()) n += t->size();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : named_tensors()) t->zero_grad();
    }

    /// Layer-profile slot for a parameter name: 0 for the embedding matrix,
    /// 1 + layer index for per-layer tensors, nullopt for the rest
    /// (positional table, final layer norm, untied head).
    static std::optional<std::size_t> per_layer_slot(const std::string& name) {
        if (name == "embedding.weight") return 0;
        constexpr const char* prefix = "layers.";
        if (name.rfind(prefix, 0) == 0) {
            const std::size_t dot = name.find('.', 7);
            return 1 + static_cast<std::size_t>(std::stoul(name.substr(7, dot - 7)));
        }
        return std::nullopt;
    }
};

// ----------------------------------------------------------------------
// Initialization
// ----------------------------------------------------------------------

namespace detail {

template <typename Real>
TensorPtr<Real> init_linear(Rng& rng, std::size_t out_dim, std::size_t in_dim, LinearInit mode) {
    auto w = make_tensor<Real>({out_dim, in_dim}, Real(0), true);
    if (mode == LinearInit::KaimingUniform) {
        const double bound = std::sqrt(1.0 / static_cast<double>(in_dim));
        for (auto& x : w->data) x = static_cast<Real>(rng.uniform(-bound, bound));
    } else {
        for (auto& x : w->data) x = static_cast<Real>(rng.normal(0.0, 0.02));
    }
    return w;
}

template <typename Real>
TensorPtr<Real> init_normal(Rng& rng, Shape shape, double stddev) {
    auto t = make_tensor<Real>(std::move(shape), Real(0), true);
    for (auto& x : t->data) x = static_cast<Real>(rng.normal(0.0, stddev));
    return t;
}

template <typename Real>
void init_spectral(TensorPtr<Real>& gamma, SpectralState<Real>& st, const TensorPtr<Real>& w,
                   int iters) {
    power_iterate(*w, st, iters);
    // gamma starts at the initial spectral norm so the effective weight
    // equals W at initialization.
    gamma = make_tensor<Real>({1}, st.sigma, true);
}

}  // namespace detail

constexpr int kSigmaReparamInitIters = 30;

/// Sample a fresh parameter set. Deterministic: the same (config, seed) pair
/// yields bit-identical tensors.
template <typename Real>
Params<Real> build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(derive_seed(seed, 0x6d6f64656cULL));  // model-init stream

    Params<Real> p;
    p.config = config;
    const std::size_t d = config.d_model;
    const std::size_t r = config.rank;

    p.embedding = detail::init_normal<Real>(rng, {config.vocab_size, d}, 0.02);
    p.pos = detail::init_normal<Real>(rng, {config.context_len, d}, 0.02);

    p.layers.resize(config.n_layers);
    for (auto& l : p.layers) {
        l.ln1_gain = make_tensor<Real>({d}, Real(1), true);
        l.ln1_bias = make_tensor<Real>({d}, Real(0), true);
        l.ln2_gain = make_tensor<Real>({d}, Real(1), true);
        l.ln2_bias = make_tensor<Real>({d}, Real(0), true);
        if (config.variant == AttentionVariant::MLRA) {
            l.wu_q = detail::init_linear<Real>(rng, d, r, config.linear_init);
            l.wd_q = detail::init_linear<Real>(rng, r, d, config.linear_init);
            l.wu_k = detail::init_linear<Real>(rng, d, r, config.linear_init);
            l.wd_k = detail::init_linear<Real>(rng, r, d, config.linear_init);
            l.wu_v = detail::init_linear<Real>(rng, d, r, config.linear_init);
            l.wd_v = detail::init_linear<Real>(rng, r, d, config.linear_init);
        } else {
            l.w_q = detail::init_linear<Real>(rng, d, d, config.linear_init);
            l.w_k = detail::init_linear<Real>(rng, d, d, config.linear_init);
            l.w_v = detail::init_linear<Real>(rng, d, d, config.linear_init);
        }
        l.w_o = detail::init_linear<Real>(rng, d, d, config.linear_init);
        l.b_o = make_tensor<Real>({d}, Real(0), true);
        l.w_fc = detail::init_linear<Real>(rng, 4 * d, d, config.linear_init);
        l.b_fc = make_tensor<Real>({4 * d}, Real(0), true);
        l.w_proj = detail::init_linear<Real>(rng, d, 4 * d, config.linear_init);
        l.b_proj = make_tensor<Real>({d}, Real(0), true);
        if (config.variant == AttentionVariant::SigmaReparam) {
            detail::init_spectral(l.gamma_q, l.spec_q, l.w_q, kSigmaReparamInitIters);
            detail::init_spectral(l.gamma_k, l.spec_k, l.w_k, kSigmaReparamInitIters);
            detail::init_spectral(l.gamma_v, l.spec_v, l.w_v, kSigmaReparamInitIters);
            detail::init_spectral(l.gamma_o, l.spec_o, l.w_o, kSigmaReparamInitIters);
            detail::init_spectral(l.gamma_fc, l.spec_fc, l.w_fc, kSigmaReparamInitIters);
            detail::init_spectral(l.gamma_proj, l.spec_proj, l.w_proj, kSigmaReparamInitIters);
        }
    }

    p.final_ln_gain = make_tensor<Real>({d}, Real(1), true);
    p.final_ln_bias = make_tensor<Real>({d}, Real(0), true);
    if (!config.tie_embeddings) {
        p.lm_head = detail::init_normal<Real>(rng, {config.vocab_size, d}, 0.02);
    }
    return p;
}

/// Refresh every cached spectral-norm estimate with `iters` power-iteration
/// steps. Called once per training step for SigmaReparam models so forward
/// itself stays read-only over Params.
template <typename Real>
void refresh_spectral_estimates(Params<Real>& p, int iters = 1) {
    if (p.config.variant != AttentionVariant::SigmaReparam) return;
    for (auto& l : p.layers) {
        power_iterate(*l.w_q, l.spec_q, iters);
        power_iterate(*l.w_k, l.spec_k, iters);
        power_iterate(*l.w_v, l.spec_v, iters);
        power_iterate(*l.w_o, l.spec_o, iters);
        power_iterate(*l.w_fc, l.spec_fc, iters);
        power_iterate(*l.w_proj, l.spec_proj, iters);
    }
}

// ----------------------------------------------------------------------
// Forward pass
// ----------------------------------------------------------------------

namespace detail {

template <typename Real>
TensorPtr<Real> effective_weight(Tape<Real>& tape, const TensorPtr<Real>& w,
                                 const TensorPtr<Real>& gamma, const SpectralState<Real>& st) {
    return tape.scale_by_param(w, gamma, Real(1) / st.sigma);
}

// Q/K/V projection for one matrix under the layer's variant.
template <typename Real>
TensorPtr<Real> project(Tape<Real>& tape, const TensorPtr<Real>& x, const LayerParams<Real>& l,
                        AttentionVariant variant, const TensorPtr<Real>& w,
                        const TensorPtr<Real>& wu, const TensorPtr<Real>& wd,
                        const TensorPtr<Real>& gamma, const SpectralState<Real>& st) {
    switch (variant) {
        case AttentionVariant::Standard:
            return tape.matmul(x, tape.transpose(w));
        case AttentionVariant::MLRA:
            // Two thin matmuls; the d x d product is never formed.
            return tape.matmul(tape.matmul(x, tape.transpose(wd)), tape.transpose(wu));
        case AttentionVariant::SigmaReparam:
            return tape.matmul(x, tape.transpose(effective_weight(tape, w, gamma, st)));
    }
    (void)l;
    throw ContractError("unreachable attention variant");
}

}  // namespace detail

/// Multi-head causal self-attention over a layer-normalized input x [n x d].
template <typename Real>
TensorPtr<Real> attention_block(Tape<Real>& tape, const LayerParams<Real>& l,
                                const TensorPtr<Real>& x, const ModelConfig& config) {
    const std::size_t n = x->rows();
    if (n > config.context_len) {
        throw ContractError("sequence length " + std::to_string(n) + " exceeds context_len " +
                            std::to_string(config.context_len));
    }
    const auto variant = config.variant;
    auto q = detail::project(tape, x, l, variant, l.w_q, l.wu_q, l.wd_q, l.gamma_q, l.spec_q);
    auto k = detail::project(tape, x, l, variant, l.w_k, l.wu_k, l.wd_k, l.gamma_k, l.spec_k);
    auto v = detail::project(tape, x, l, variant, l.w_v, l.wu_v, l.wd_v, l.gamma_v, l.spec_v);

    const std::size_t dh = config.d_head();
    const Real inv_sqrt_dh = Real(1) / std::sqrt(static_cast<Real>(dh));
    std::vector<TensorPtr<Real>> heads;
    heads.reserve(config.n_heads);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
        auto qh = tape.slice_cols(q, h * dh, dh);
        auto kh = tape.slice_cols(k, h * dh, dh);
        auto vh = tape.slice_cols(v, h * dh, dh);
        auto scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh);
        auto attn = tape.causal_masked_softmax(scores);
        heads.push_back(tape.matmul(attn, vh));
    }
    auto merged = tape.concat_cols(heads);

    TensorPtr<Real> wo = l.w_o;
    if (variant == AttentionVariant::SigmaReparam) {
        wo = detail::effective_weight(tape, l.w_o, l.gamma_o, l.spec_o);
    }
    return tape.add_row_bias(tape.matmul(merged, tape.transpose(wo)), l.b_o);
}

/// Full decoder forward: token + positional embeddings, N pre-LN residual
/// blocks, final layer norm, tied logit head.
template <typename Real>
TensorPtr<Real> forward(Tape<Real>& tape, const Params<Real>& p, std::span<const int> tokens) {
    const std::size_t n = tokens.size();
    if (n == 0) throw ContractError("forward: empty token sequence");
    if (n > p.config.context_len) {
        throw ContractError("sequence length " + std::to_string(n) + " exceeds context_len " +
                            std::to_string(p.config.context_len));
    }
    std::vector<int> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(i);

    auto x = tape.add(tape.embedding_rows(p.embedding, tokens),
                      tape.embedding_rows(p.pos, positions));
    for (const auto& l : p.layers) {
        auto attn_in = tape.layer_norm(x, l.ln1_gain, l.ln1_bias);
        x = tape.add(x, attention_block(tape, l, attn_in, p.config));

        auto mlp_in = tape.layer_norm(x, l.ln2_gain, l.ln2_bias);
        TensorPtr<Real> w_fc = l.w_fc, w_proj = l.w_proj;
        if (p.config.variant == AttentionVariant::SigmaReparam) {
            w_fc = detail::effective_weight(tape, l.w_fc, l.gamma_fc, l.spec_fc);
            w_proj = detail::effective_weight(tape, l.w_proj, l.gamma_proj, l.spec_proj);
        }
        auto hidden = tape.gelu(tape.add_row_bias(tape.matmul(mlp_in, tape.transpose(w_fc)), l.b_fc));
        auto mlp_out = tape.add_row_bias(tape.matmul(hidden, tape.transpose(w_proj)), l.b_proj);
        x = tape.add(x, mlp_out);
    }
    auto xf = tape.layer_norm(x, p.final_ln_gain, p.final_ln_bias);
    const TensorPtr<Real>& head = p.config.tie_embeddings ? p.embedding : p.lm_head;
    return tape.matmul(xf, tape.transpose(head));
}

// ----------------------------------------------------------------------
// MLRA -> Standard reconstruction
// ----------------------------------------------------------------------

namespace detail {

template <typename Real>
TensorPtr<Real> clone_tensor(const TensorPtr<Real>& t) {
    auto c = make_tensor<Real>(t->shape);
    c->data = t->data;
    c->requires_grad = t->requires_grad;
    return c;
}

// Plain (untaped) product W_up * W_down -> [d x d].
template <typename Real>
TensorPtr<Real> factor_product(const TensorPtr<Real>& up, const TensorPtr<Real>& down) {
    const std::size_t d = up->rows(), r = up->cols();
    auto w = make_tensor<Real>({d, down->cols()}, Real(0), true);
    matmul_nn_acc(up->data.data(), down->data.data(), w->data.data(), d, r, down->cols());
    return w;
}

}  // namespace detail

/// Collapse each MLRA factor pair into the equivalent full-rank matrix and
/// return Standard-variant parameters. Forward outputs agree with the MLRA
/// model up to rounding in the changed multiplication order.
template <typename Real>
Params<Real> reconstruct_full_weights(const Params<Real>& p) {
    if (p.config.variant != AttentionVariant::MLRA) {
        throw ContractError("reconstruct_full_weights requires an MLRA model");
    }
    Params<Real> out;
    out.config = p.config;
    out.config.variant = AttentionVariant::Standard;
    out.config.rank = 0;
    out.embedding = detail::clone_tensor(p.embedding);
    out.pos = detail::clone_tensor(p.pos);
    if (p.lm_head) out.lm_head = detail::clone_tensor(p.lm_head);
    out.final_ln_gain = detail::clone_tensor(p.final_ln_gain);
    out.final_ln_bias = detail::clone_tensor(p.final_ln_bias);
    out.layers.resize(p.layers.size());
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        const auto& src = p.layers[i];
        auto& dst = out.layers[i];
        dst.ln1_gain = detail::clone_tensor(src.ln1_gain);
        dst.ln1_bias = detail::clone_tensor(src.ln1_bias);
        dst.ln2_gain = detail::clone_tensor(src.ln2_gain);
        dst.ln2_bias = detail::clone_tensor(src.ln2_bias);
        dst.w_q = detail::factor_product(src.wu_q, src.wd_q);
        dst.w_k = detail::factor_product(src.wu_k, src.wd_k);
        dst.w_v = detail::factor_product(src.wu_v, src.wd_v);
        dst.w_o = detail::clone_tensor(src.w_o);
        dst.b_o = detail::clone_tensor(src.b_o);
        dst.w_fc = detail::clone_tensor(src.w_fc);
        dst.b_fc = detail::clone_tensor(src.b_fc);
        dst.w_proj = detail::clone_tensor(src.w_proj);
        dst.b_proj = detail::clone_tensor(src.b_proj);
    }
    return out;
}

/// Closed-form trainable-parameter count for a config; tied models share the
/// head with the embedding so it is counted once.
inline std::size_t expected_parameter_count(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    std::size_t qkv;
    if (c.variant == AttentionVariant::MLRA) {
        qkv = 3 * 2 * c.rank * d;
    } else {
        qkv = 3 * d * d;
    }
    std::size_t per_layer = 4 * d            // two layer norms
                            + qkv            // q/k/v storage
                            + d * d + d      // output projection
                            + 4 * d * d + 4 * d  // mlp fc
                            + 4 * d * d + d;     // mlp proj
    if (c.variant == AttentionVariant::SigmaReparam) per_layer += 6;  // gammas
    std::size_t total = c.vocab_size * d + c.context_len * d + c.n_layers * per_layer + 2 * d;
    if (!c.tie_embeddings) total += c.vocab_size * d;
    return total;
}

}  // namespace tevlab

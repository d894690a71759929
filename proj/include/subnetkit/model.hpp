#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "subnetkit/common.hpp"
#include "subnetkit/rng.hpp"
#include "subnetkit/tensor.hpp"

namespace subnetkit {

// Pre-norm transformer encoder for sentence-pair classification with per-head
// and per-MLP gate injection points. Each block computes
//   X <- X + sum_i gate_i * head_i(LN(X)) + (1 - gate_i) * mean_i
//   X <- X + gate_m * MLP(LN(X)) + (1 - gate_m) * mean_m
// and classification reads the CLS position through one linear layer.

struct ModelConfig {
    long layers = 4;
    long heads = 4;
    long hidden = 32;
    long mlp_hidden = 0;  // 0 -> 4 * hidden
    long vocab_size = 64;
    long max_positions = 16;
    long n_labels = 2;
    double init_scale = 0.02;

    long head_dim() const { return hidden / heads; }
    long mlp_dim() const { return mlp_hidden > 0 ? mlp_hidden : 4 * hidden; }

    void validate() const {
        if (layers < 1 || heads < 1 || hidden < 1 || vocab_size < 1 || max_positions < 1 || n_labels < 1)
            throw ConfigError("model config: all counts must be >= 1");
        if (hidden % heads != 0)
            throw ConfigError(cat("model config: hidden ", hidden, " not divisible by heads ", heads));
    }
};

// A maskable component: one attention head or one MLP layer.
struct ComponentId {
    long layer = 0;
    long head = -1;  // -1 denotes the layer's MLP

    bool is_mlp() const { return head < 0; }
    std::string name() const { return is_mlp() ? cat("L", layer, ".MLP") : cat("L", layer, ".H", head); }
    bool operator==(const ComponentId& o) const { return layer == o.layer && head == o.head; }

    static ComponentId parse(const std::string& s) {
        if (s.size() < 4 || s[0] != 'L') throw ArgumentError(cat("unknown component id '", s, "'"));
        size_t dot = s.find('.');
        if (dot == std::string::npos) throw ArgumentError(cat("unknown component id '", s, "'"));
        ComponentId c;
        try {
            c.layer = std::stol(s.substr(1, dot - 1));
            std::string rest = s.substr(dot + 1);
            if (rest == "MLP")
                c.head = -1;
            else if (!rest.empty() && rest[0] == 'H')
                c.head = std::stol(rest.substr(1));
            else
                throw ArgumentError("");
        } catch (const std::exception&) {
            throw ArgumentError(cat("unknown component id '", s, "'"));
        }
        return c;
    }
};

inline long component_count(const ModelConfig& c) { return c.layers * (c.heads + 1); }

inline long component_index(const ModelConfig& c, const ComponentId& id) {
    if (id.layer < 0 || id.layer >= c.layers || id.head >= c.heads)
        throw ArgumentError(cat("component ", id.name(), " outside model with ", c.layers, " layers x ", c.heads, " heads"));
    return id.layer * (c.heads + 1) + (id.is_mlp() ? c.heads : id.head);
}

inline ComponentId component_at(const ModelConfig& c, long index) {
    long per = c.heads + 1;
    ComponentId id;
    id.layer = index / per;
    long slot = index % per;
    id.head = slot == c.heads ? -1 : slot;
    return id;
}

// Parameter count per maskable component, canonical order.
inline Eigen::ArrayXd component_weights(const ModelConfig& c) {
    const long d = c.hidden, hd = c.head_dim(), dh = c.mlp_dim();
    const double head_w = static_cast<double>(3 * (d * hd + hd) + hd * d + d);
    const double mlp_w = static_cast<double>(d * dh + dh + dh * d + d);
    Eigen::ArrayXd w(component_count(c));
    for (long i = 0; i < w.size(); ++i) w[i] = component_at(c, i).is_mlp() ? mlp_w : head_w;
    return w;
}

template <class Scalar>
struct HeadParams {
    Tensor<Scalar> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class Scalar>
struct LayerParams {
    Tensor<Scalar> ln1_g, ln1_b;
    std::vector<HeadParams<Scalar>> heads;
    Tensor<Scalar> ln2_g, ln2_b;
    Tensor<Scalar> w_up, b_up, w_down, b_down;
};

template <class Scalar>
struct Model {
    ModelConfig config;
    Tensor<Scalar> tok_emb, pos_emb, seg_emb;
    std::vector<LayerParams<Scalar>> layers;
    Tensor<Scalar> cls_w, cls_b;

    // Stable enumeration; checkpoint manifests and the optimizer follow it.
    std::vector<std::pair<std::string, Tensor<Scalar>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<Scalar>>> out;
        out.emplace_back("emb.tok", tok_emb);
        out.emplace_back("emb.pos", pos_emb);
        out.emplace_back("emb.seg", seg_emb);
        for (size_t l = 0; l < layers.size(); ++l) {
            const auto& L = layers[l];
            std::string p = cat("layer", l, ".");
            out.emplace_back(p + "ln1.g", L.ln1_g);
            out.emplace_back(p + "ln1.b", L.ln1_b);
            for (size_t h = 0; h < L.heads.size(); ++h) {
                std::string hp = cat(p, "h", h, ".");
                const auto& H = L.heads[h];
                out.emplace_back(hp + "wq", H.wq);
                out.emplace_back(hp + "bq", H.bq);
                out.emplace_back(hp + "wk", H.wk);
                out.emplace_back(hp + "bk", H.bk);
                out.emplace_back(hp + "wv", H.wv);
                out.emplace_back(hp + "bv", H.bv);
                out.emplace_back(hp + "wo", H.wo);
                out.emplace_back(hp + "bo", H.bo);
            }
            out.emplace_back(p + "ln2.g", L.ln2_g);
            out.emplace_back(p + "ln2.b", L.ln2_b);
            out.emplace_back(p + "mlp.w_up", L.w_up);
            out.emplace_back(p + "mlp.b_up", L.b_up);
            out.emplace_back(p + "mlp.w_down", L.w_down);
            out.emplace_back(p + "mlp.b_down", L.b_down);
        }
        out.emplace_back("cls.w", cls_w);
        out.emplace_back("cls.b", cls_b);
        return out;
    }

    void set_trainable(bool v) {
        for (auto& [name, t] : named_params()) t.set_requires_grad(v);
    }

    long param_count() const {
        long n = 0;
        for (const auto& [name, t] : named_params()) n += t.numel();
        return n;
    }

    Model clone() const {
        Model m;
        m.config = config;
        auto src = named_params();
        m.tok_emb = tok_emb.detach();
        m.pos_emb = pos_emb.detach();
        m.seg_emb = seg_emb.detach();
        m.layers.resize(layers.size());
        for (size_t l = 0; l < layers.size(); ++l) {
            const auto& a = layers[l];
            auto& b = m.layers[l];
            b.ln1_g = a.ln1_g.detach();
            b.ln1_b = a.ln1_b.detach();
            b.ln2_g = a.ln2_g.detach();
            b.ln2_b = a.ln2_b.detach();
            b.w_up = a.w_up.detach();
            b.b_up = a.b_up.detach();
            b.w_down = a.w_down.detach();
            b.b_down = a.b_down.detach();
            b.heads.resize(a.heads.size());
            for (size_t h = 0; h < a.heads.size(); ++h) {
                const auto& x = a.heads[h];
                auto& y = b.heads[h];
                y.wq = x.wq.detach();
                y.bq = x.bq.detach();
                y.wk = x.wk.detach();
                y.bk = x.bk.detach();
                y.wv = x.wv.detach();
                y.bv = x.bv.detach();
                y.wo = x.wo.detach();
                y.bo = x.bo.detach();
            }
        }
        m.cls_w = cls_w.detach();
        m.cls_b = cls_b.detach();
        return m;
    }
};

namespace detail {

template <class Scalar>
Tensor<Scalar> init_weight(std::vector<long> shape, double scale, std::uint64_t seed, std::uint64_t param_idx) {
    long n = Tensor<Scalar>::count(shape);
    typename Tensor<Scalar>::Array a(n);
    for (long i = 0; i < n; ++i)
        a[i] = static_cast<Scalar>(scale * rng_normal({seed, stream_id("init"), param_idx, static_cast<std::uint64_t>(i)}));
    return Tensor<Scalar>::from_array(std::move(shape), std::move(a));
}

}  // namespace detail

template <class Scalar>
Model<Scalar> init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model<Scalar> m;
    m.config = config;
    const long d = config.hidden, hd = config.head_dim(), dh = config.mlp_dim();
    std::uint64_t idx = 0;
    auto w = [&](std::vector<long> shape) { return detail::init_weight<Scalar>(std::move(shape), config.init_scale, seed, idx++); };
    auto zeros = [&](std::vector<long> shape) {
        ++idx;
        return Tensor<Scalar>::zeros(std::move(shape));
    };
    auto ones = [&](std::vector<long> shape) {
        ++idx;
        return Tensor<Scalar>::filled(std::move(shape), Scalar(1));
    };
    m.tok_emb = w({config.vocab_size, d});
    m.pos_emb = w({config.max_positions, d});
    m.seg_emb = w({2, d});
    m.layers.resize(static_cast<size_t>(config.layers));
    for (auto& L : m.layers) {
        L.ln1_g = ones({d});
        L.ln1_b = zeros({d});
        L.heads.resize(static_cast<size_t>(config.heads));
        for (auto& H : L.heads) {
            H.wq = w({d, hd});
            H.bq = zeros({hd});
            H.wk = w({d, hd});
            H.bk = zeros({hd});
            H.wv = w({d, hd});
            H.bv = zeros({hd});
            H.wo = w({hd, d});
            H.bo = zeros({d});
        }
        L.ln2_g = ones({d});
        L.ln2_b = zeros({d});
        L.w_up = w({d, dh});
        L.b_up = zeros({dh});
        L.w_down = w({dh, d});
        L.b_down = zeros({d});
    }
    m.cls_w = w({d, config.n_labels});
    m.cls_b = zeros({config.n_labels});
    return m;
}

// ---------------------------------------------------------------------------
// Batches

struct PairBatch {
    long batch = 0;
    long seq = 0;
    std::vector<long> token_ids;            // batch*seq, row-major
    std::vector<long> segment_ids;          // batch*seq
    std::vector<std::uint8_t> valid;        // batch*seq, 0 at padding
    std::vector<long> labels;               // batch

    long token(long b, long s) const { return token_ids[static_cast<size_t>(b * seq + s)]; }
    long segment(long b, long s) const { return segment_ids[static_cast<size_t>(b * seq + s)]; }
    bool is_valid(long b, long s) const { return valid[static_cast<size_t>(b * seq + s)] != 0; }
};

// ---------------------------------------------------------------------------
// Gates

// Per-component gate state fed to the forward pass. `pass` leaves the
// component untouched (bit-exact full model), `replace` substitutes the mean,
// `blend` interpolates with a differentiable or constant gate tensor whose
// numel is 1 (shared) or batch (per-example draws).
enum class GateKind { Pass, Replace, Blend };

template <class Scalar>
struct ComponentGate {
    GateKind kind = GateKind::Pass;
    Tensor<Scalar> z;
    Eigen::VectorXd mean;
};

template <class Scalar>
using GateVector = std::vector<ComponentGate<Scalar>>;

// Continuous or discrete per-component assignment with cached means.
struct MaskAssignment {
    Eigen::ArrayXd gate;                  // in [0,1], canonical component order
    std::vector<Eigen::VectorXd> mean;    // empty vector = absent

    void validate(const ModelConfig& c) const {
        const long n = component_count(c);
        if (gate.size() != n) throw ConfigError(cat("mask assignment: ", gate.size(), " gates for ", n, " components"));
        if (static_cast<long>(mean.size()) != n)
            throw ConfigError(cat("mask assignment: ", mean.size(), " means for ", n, " components"));
        for (long i = 0; i < n; ++i) {
            if (!(gate[i] >= 0.0 && gate[i] <= 1.0))
                throw ConfigError(cat("mask assignment: gate ", num_str(gate[i]), " outside [0,1] at ",
                                      component_at(c, i).name()));
            if (gate[i] < 1.0 && mean[static_cast<size_t>(i)].size() != c.hidden)
                throw ConfigError(cat("mask assignment: gate < 1 with absent mean for ", component_at(c, i).name()));
        }
    }

    static MaskAssignment all_ones(const ModelConfig& c) {
        MaskAssignment ma;
        ma.gate = Eigen::ArrayXd::Ones(component_count(c));
        ma.mean.resize(static_cast<size_t>(component_count(c)));
        return ma;
    }
};

template <class Scalar>
GateVector<Scalar> gates_from_assignment(const ModelConfig& c, const MaskAssignment& ma) {
    ma.validate(c);
    GateVector<Scalar> gv(static_cast<size_t>(component_count(c)));
    for (long i = 0; i < component_count(c); ++i) {
        auto& g = gv[static_cast<size_t>(i)];
        if (ma.gate[i] == 1.0) {
            g.kind = GateKind::Pass;
        } else if (ma.gate[i] == 0.0) {
            g.kind = GateKind::Replace;
            g.mean = ma.mean[static_cast<size_t>(i)];
        } else {
            g.kind = GateKind::Blend;
            g.z = Tensor<Scalar>::scalar(ma.gate[i]);
            g.mean = ma.mean[static_cast<size_t>(i)];
        }
    }
    return gv;
}

// ---------------------------------------------------------------------------
// Forward

struct ForwardOptions {
    bool capture_attention = false;
    bool capture_contributions = false;
};

template <class Scalar>
struct ForwardResult {
    using MatrixRM = typename Tensor<Scalar>::MatrixRM;
    Tensor<Scalar> logits;  // [batch, n_labels]
    // attention[layer][head]: (batch*seq) x seq, post-softmax
    std::vector<std::vector<MatrixRM>> attention;
    // contribution[component]: (batch*seq) x hidden, pre-gate output
    std::vector<MatrixRM> contribution;
};

namespace detail {

template <class Scalar>
Tensor<Scalar> apply_gate(const Tensor<Scalar>& contrib, const ComponentGate<Scalar>& gate, const ModelConfig& cfg,
                          long batch, long seq, const ComponentId& id) {
    using T = Tensor<Scalar>;
    switch (gate.kind) {
        case GateKind::Pass:
            return contrib;
        case GateKind::Replace: {
            if (gate.mean.size() != cfg.hidden)
                throw ConfigError(cat("gate for ", id.name(), " replaces output but has no mean"));
            typename T::Array v(batch * seq * cfg.hidden);
            for (long r = 0; r < batch * seq; ++r)
                for (long j = 0; j < cfg.hidden; ++j) v[r * cfg.hidden + j] = static_cast<Scalar>(gate.mean[j]);
            return T::from_array({batch, seq, cfg.hidden}, std::move(v));
        }
        case GateKind::Blend: {
            if (gate.mean.size() != cfg.hidden)
                throw ConfigError(cat("gate for ", id.name(), " blends with mean but has no mean"));
            if (gate.z.numel() != 1 && gate.z.numel() != batch)
                throw DimensionError(cat("gate tensor for ", id.name(), " has ", gate.z.numel(),
                                         " elements; expected 1 or batch ", batch));
            Broadcast mode = gate.z.numel() == 1 ? Broadcast::One : Broadcast::Lead;
            typename T::Array mv(batch * seq * cfg.hidden);
            for (long r = 0; r < batch * seq; ++r)
                for (long j = 0; j < cfg.hidden; ++j) mv[r * cfg.hidden + j] = static_cast<Scalar>(gate.mean[j]);
            Tensor<Scalar> mean_full = T::from_array({batch, seq, cfg.hidden}, std::move(mv));
            Tensor<Scalar> one = T::filled(gate.z.shape(), Scalar(1));
            Tensor<Scalar> zr = gate.z.rank() == 1 ? gate.z : reshape(gate.z, {gate.z.numel()});
            Tensor<Scalar> one_minus = sub(one, gate.z, Broadcast::Same);
            Tensor<Scalar> one_minus_r = one_minus.rank() == 1 ? one_minus : reshape(one_minus, {one_minus.numel()});
            return add(mul(contrib, zr, mode), mul(mean_full, one_minus_r, mode), Broadcast::Same);
        }
    }
    throw ContractError("apply_gate: unreachable");
}

}  // namespace detail

// Additive attention bias for a batch: 0 on valid keys, -1e9 on padding.
template <class Scalar>
Tensor<Scalar> attention_bias(const PairBatch& batch) {
    const long B = batch.batch, S = batch.seq;
    typename Tensor<Scalar>::Array bias(B * S * S);
    for (long b = 0; b < B; ++b)
        for (long q = 0; q < S; ++q)
            for (long k = 0; k < S; ++k)
                bias[(b * S + q) * S + k] = batch.is_valid(b, k) ? Scalar(0) : Scalar(-1e9);
    return Tensor<Scalar>::from_array({B, S, S}, std::move(bias));
}

// One gated multi-head attention block with pre-norm and residual:
//   X + sum_i [ z_i * Attn_i(LN(X)) W_O(i) + (1 - z_i) * mean_i ].
// `gates`, when given, spans the whole model; this layer reads its own slice.
template <class Scalar>
Tensor<Scalar> attention_layer(const Tensor<Scalar>& x, const LayerParams<Scalar>& L, long layer_index,
                               const ModelConfig& cfg, const Tensor<Scalar>& attn_bias,
                               std::type_identity_t<const GateVector<Scalar>*> gates = nullptr,
                               ForwardResult<Scalar>* capture = nullptr, const ForwardOptions& opts = {}) {
    using T = Tensor<Scalar>;
    const long B = x.dim(0), S = x.dim(1), d = cfg.hidden, hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor<Scalar> h = layer_norm(x, L.ln1_g, L.ln1_b);
    Tensor<Scalar> head_sum;
    for (long i = 0; i < cfg.heads; ++i) {
        const auto& H = L.heads[static_cast<size_t>(i)];
        Tensor<Scalar> q = add(matmul(h, H.wq), H.bq, Broadcast::Last);
        Tensor<Scalar> k = add(matmul(h, H.wk), H.bk, Broadcast::Last);
        Tensor<Scalar> v = add(matmul(h, H.wv), H.bv, Broadcast::Last);
        Tensor<Scalar> scores = add(scalar_mul(matmul(q, k, /*transpose_b=*/true), scale), attn_bias, Broadcast::Same);
        Tensor<Scalar> attn = softmax_lastdim(scores);
        if (capture && opts.capture_attention) {
            typename T::CMapM amap(attn.value().data(), B * S, S);
            capture->attention[static_cast<size_t>(layer_index)][static_cast<size_t>(i)] = amap;
        }
        Tensor<Scalar> ctx = matmul(attn, v);
        Tensor<Scalar> contrib = add(matmul(ctx, H.wo), H.bo, Broadcast::Last);
        ComponentId cid{layer_index, i};
        long idx = component_index(cfg, cid);
        if (capture && opts.capture_contributions) {
            typename T::CMapM cmap(contrib.value().data(), B * S, d);
            capture->contribution[static_cast<size_t>(idx)] = cmap;
        }
        Tensor<Scalar> gated =
            gates ? detail::apply_gate(contrib, (*gates)[static_cast<size_t>(idx)], cfg, B, S, cid) : contrib;
        head_sum = head_sum.defined() ? add(head_sum, gated, Broadcast::Same) : gated;
    }
    return add(x, head_sum, Broadcast::Same);
}

// Gated MLP block with pre-norm and residual: X + GeLU(LN(X) W_U) W_D.
template <class Scalar>
Tensor<Scalar> mlp_layer(const Tensor<Scalar>& x, const LayerParams<Scalar>& L, long layer_index,
                         const ModelConfig& cfg, std::type_identity_t<const GateVector<Scalar>*> gates = nullptr,
                         ForwardResult<Scalar>* capture = nullptr, const ForwardOptions& opts = {}) {
    using T = Tensor<Scalar>;
    const long B = x.dim(0), S = x.dim(1), d = cfg.hidden;
    Tensor<Scalar> h2 = layer_norm(x, L.ln2_g, L.ln2_b);
    Tensor<Scalar> inner = gelu(add(matmul(h2, L.w_up), L.b_up, Broadcast::Last));
    Tensor<Scalar> contrib = add(matmul(inner, L.w_down), L.b_down, Broadcast::Last);
    ComponentId mid{layer_index, -1};
    long midx = component_index(cfg, mid);
    if (capture && opts.capture_contributions) {
        typename T::CMapM cmap(contrib.value().data(), B * S, d);
        capture->contribution[static_cast<size_t>(midx)] = cmap;
    }
    Tensor<Scalar> gated =
        gates ? detail::apply_gate(contrib, (*gates)[static_cast<size_t>(midx)], cfg, B, S, mid) : contrib;
    return add(x, gated, Broadcast::Same);
}

template <class Scalar>
ForwardResult<Scalar> forward(const Model<Scalar>& m, const PairBatch& batch,
                              std::type_identity_t<const GateVector<Scalar>*> gates = nullptr,
                              const ForwardOptions& opts = {}) {
    const ModelConfig& cfg = m.config;
    const long B = batch.batch, S = batch.seq, d = cfg.hidden;
    if (S > cfg.max_positions)
        throw ArgumentError(cat("forward: sequence length ", S, " exceeds max positions ", cfg.max_positions));
    for (long b = 0; b < B; ++b)
        for (long s = 0; s < S; ++s)
            if (batch.token(b, s) < 0 || batch.token(b, s) >= cfg.vocab_size)
                throw ArgumentError(cat("forward: token id ", batch.token(b, s), " out of range at example ", b));
    if (gates && static_cast<long>(gates->size()) != component_count(cfg))
        throw ConfigError(cat("forward: ", gates->size(), " gates for ", component_count(cfg), " components"));

    ForwardResult<Scalar> result;
    if (opts.capture_attention)
        result.attention.assign(static_cast<size_t>(cfg.layers),
                                std::vector<typename Tensor<Scalar>::MatrixRM>(static_cast<size_t>(cfg.heads)));
    if (opts.capture_contributions) result.contribution.resize(static_cast<size_t>(component_count(cfg)));

    std::vector<long> pos_ids(static_cast<size_t>(B * S));
    for (long b = 0; b < B; ++b)
        for (long s = 0; s < S; ++s) pos_ids[static_cast<size_t>(b * S + s)] = s;

    Tensor<Scalar> x = add(add(embedding_lookup(m.tok_emb, batch.token_ids, {B, S}),
                               embedding_lookup(m.pos_emb, pos_ids, {B, S})),
                           embedding_lookup(m.seg_emb, batch.segment_ids, {B, S}));

    Tensor<Scalar> attn_bias = attention_bias<Scalar>(batch);
    for (long l = 0; l < cfg.layers; ++l) {
        const auto& L = m.layers[static_cast<size_t>(l)];
        x = attention_layer(x, L, l, cfg, attn_bias, gates, &result, opts);
        x = mlp_layer(x, L, l, cfg, gates, &result, opts);
    }

    Tensor<Scalar> cls = reshape(slice(x, 1, 0, 1), {B, d});
    result.logits = add(matmul(cls, m.cls_w), m.cls_b, Broadcast::Last);
    return result;
}

// Deterministic argmax (ties -> lower index).
template <class Scalar>
std::vector<long> predict_labels(const Tensor<Scalar>& logits) {
    const long B = logits.dim(0), C = logits.dim(1);
    std::vector<long> out(static_cast<size_t>(B));
    for (long b = 0; b < B; ++b) {
        long best = 0;
        for (long c = 1; c < C; ++c)
            if (logits.value()[b * C + c] > logits.value()[b * C + best]) best = c;
        out[static_cast<size_t>(b)] = best;
    }
    return out;
}

}  // namespace subnetkit

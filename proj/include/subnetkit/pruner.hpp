#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "subnetkit/common.hpp"
#include "subnetkit/gates.hpp"
#include "subnetkit/model.hpp"
#include "subnetkit/rng.hpp"
#include "subnetkit/taskgen.hpp"
#include "subnetkit/tensor.hpp"

namespace subnetkit {

// Mask-only optimization: model weights stay frozen, the sampled hard
// concrete gates interpolate each component toward its cached mean, and the
// objective is KL(full || gated) plus the Lagrangian sparsity penalty.

struct PruneConfig {
    double target_sparsity = 0.5;
    std::uint64_t seed = 42;
    double lr_log_alpha = 0.1;
    double lr_lambda = 1.0;
    long warmup_steps = 0;  // 0 -> desk schedule from the target
    long total_steps = 0;   // 0 -> desk schedule from the target
    long batch_size = 64;
    long eval_every = 25;
    double threshold_grid_stride = 0.05;
    bool per_example_draws = false;

    // Desk-scale schedule: the full-scale step formulas scaled by 1/20.
    long auto_warmup() const { return std::lround(325.0 + 2.5 * target_sparsity * 100.0); }
    long auto_total() const { return auto_warmup() + std::lround(0.3 * target_sparsity * 100.0); }
    long resolved_warmup() const { return warmup_steps > 0 ? warmup_steps : auto_warmup(); }
    long resolved_total() const { return total_steps > 0 ? total_steps : auto_total(); }

    void validate() const {
        if (!(target_sparsity > 0.0 && target_sparsity < 1.0))
            throw ConfigError(cat("prune config: target sparsity ", num_str(target_sparsity), " outside (0,1)"));
        if (!(lr_log_alpha > 0.0 && lr_lambda > 0.0)) throw ConfigError("prune config: learning rates must be positive");
        if (batch_size < 1 || eval_every < 1) throw ConfigError("prune config: counts must be positive");
        if (resolved_warmup() > resolved_total())
            throw ConfigError(cat("prune config: warmup ", resolved_warmup(), " exceeds total ", resolved_total()));
        if (!(threshold_grid_stride > 0.0 && threshold_grid_stride <= 1.0))
            throw ConfigError("prune config: threshold stride outside (0,1]");
    }
};

struct MeanCache {
    std::vector<Eigen::VectorXd> mean;  // per component, canonical order
    long example_count = 0;
    long token_count = 0;
};

// Per-component mean of the post-projection contribution over all valid token
// positions of the dataset, single pass, 64-bit accumulation.
template <class Scalar>
MeanCache compute_mean_activations(const Model<Scalar>& model, const Split& split, long max_seq, long batch = 256,
                                   typename Tensor<Scalar>::MatrixRM* full_logits = nullptr) {
    if (split.empty()) throw ArgumentError("compute_mean_activations: empty dataset");
    NoGradGuard ng;
    const long n_comp = component_count(model.config);
    const long d = model.config.hidden;
    std::vector<Eigen::VectorXd> sums(static_cast<size_t>(n_comp), Eigen::VectorXd::Zero(d));
    long tokens = 0;
    if (full_logits) full_logits->resize(static_cast<long>(split.size()), model.config.n_labels);
    ForwardOptions opts;
    opts.capture_contributions = true;
    for (size_t start = 0; start < split.size(); start += static_cast<size_t>(batch)) {
        size_t end = std::min(split.size(), start + static_cast<size_t>(batch));
        std::vector<size_t> idx;
        for (size_t i = start; i < end; ++i) idx.push_back(i);
        PairBatch pb = encode_batch(split, idx, max_seq);
        auto out = forward(model, pb, nullptr, opts);
        for (long c = 0; c < n_comp; ++c) {
            const auto& contrib = out.contribution[static_cast<size_t>(c)];
            for (long b = 0; b < pb.batch; ++b)
                for (long s = 0; s < pb.seq; ++s)
                    if (pb.is_valid(b, s))
                        sums[static_cast<size_t>(c)] += contrib.row(b * pb.seq + s).template cast<double>();
        }
        for (long b = 0; b < pb.batch; ++b)
            for (long s = 0; s < pb.seq; ++s) tokens += pb.is_valid(b, s) ? 1 : 0;
        if (full_logits)
            for (long b = 0; b < pb.batch; ++b)
                full_logits->row(static_cast<long>(start) + b) =
                    Eigen::Map<const typename Tensor<Scalar>::MatrixRM>(out.logits.value().data(), pb.batch,
                                                                        model.config.n_labels)
                        .row(b);
    }
    MeanCache cache;
    cache.example_count = static_cast<long>(split.size());
    cache.token_count = tokens;
    cache.mean.reserve(static_cast<size_t>(n_comp));
    for (long c = 0; c < n_comp; ++c) cache.mean.push_back(sums[static_cast<size_t>(c)] / static_cast<double>(tokens));
    return cache;
}

// KL(full || gated), mean over examples. The full-model side is evaluated
// through the same primitives so identical logits give exactly zero.
template <class Scalar>
Tensor<Scalar> kl_faithfulness_loss(const Tensor<Scalar>& full_logits, const Tensor<Scalar>& gated_logits) {
    if (full_logits.shape() != gated_logits.shape())
        throw DimensionError(cat("kl_faithfulness_loss: shape mismatch ", shape_str(full_logits.shape()), " vs ",
                                 shape_str(gated_logits.shape())));
    const long C = gated_logits.shape().back();
    Tensor<Scalar> p_full, lp_full;
    {
        NoGradGuard ng;
        Tensor<Scalar> full_const = full_logits.detach();
        p_full = softmax_lastdim(full_const);
        lp_full = log(p_full);
    }
    Tensor<Scalar> lp_gated = log(softmax_lastdim(gated_logits));
    Tensor<Scalar> diff = sub(lp_full.detach(), lp_gated, Broadcast::Same);
    Tensor<Scalar> weighted = mul(p_full.detach(), diff, Broadcast::Same);
    Tensor<Scalar> row_sum = matmul(weighted, Tensor<Scalar>::filled({C, 1}, Scalar(1)));
    return mean(row_sum);
}

// ---------------------------------------------------------------------------

struct RunLogRow {
    long step = 0;
    double target = 0;
    double expected_sparsity = 0;
    double kl = 0;
    double lambda1 = 0;
    double lambda2 = 0;
};

struct PruneResult {
    GateSet gates;
    std::vector<std::pair<long, Eigen::ArrayXd>> trajectory;  // (step, log_alpha snapshot)
    Subnetwork subnetwork;
    std::vector<RunLogRow> log;
    std::vector<std::string> warnings;
    double final_kl = 0;
};

// Frozen-model context shared across prune runs on the same checkpoint.
template <class Scalar>
struct PruneContext {
    const Model<Scalar>* model = nullptr;
    const Split* train = nullptr;
    long max_seq = 16;
    MeanCache means;
    typename Tensor<Scalar>::MatrixRM full_logits;  // N x n_labels
};

template <class Scalar>
PruneContext<Scalar> make_prune_context(const Model<Scalar>& model, const Split& train, long max_seq) {
    PruneContext<Scalar> ctx;
    ctx.model = &model;
    ctx.train = &train;
    ctx.max_seq = max_seq;
    ctx.means = compute_mean_activations(model, train, max_seq, 256, &ctx.full_logits);
    return ctx;
}

inline constexpr double kLogAlphaInit = 2.0;  // gates start mostly open

template <class Scalar>
GateSet gateset_from_values(const ModelConfig& cfg, const Eigen::ArrayXd& log_alpha) {
    GateSet g;
    g.log_alpha = log_alpha;
    g.param_weight = component_weights(cfg);
    g.validate();
    return g;
}

template <class Scalar>
PruneResult prune(const PruneContext<Scalar>& ctx, const PruneConfig& config) {
    using T = Tensor<Scalar>;
    config.validate();
    const Model<Scalar>& model = *ctx.model;
    const Split& train = *ctx.train;
    const ModelConfig& cfg = model.config;
    const long n_comp = component_count(cfg);
    const long warmup = config.resolved_warmup();
    const long total = config.resolved_total();

    GateSet gate_hyper = gateset_from_values<Scalar>(cfg, Eigen::ArrayXd::Constant(n_comp, kLogAlphaInit));
    const double beta = gate_hyper.beta, l = gate_hyper.l, r = gate_hyper.r, geps = gate_hyper.eps;
    const double open_shift = beta * std::log(-r / l);

    Eigen::ArrayXd weights = component_weights(cfg);
    const double weight_total = weights.sum();
    typename T::Array wn(n_comp);
    for (long i = 0; i < n_comp; ++i) wn[i] = static_cast<Scalar>(weights[i] / weight_total);
    Tensor<Scalar> w_norm = T::from_array({n_comp, 1}, std::move(wn));

    Tensor<Scalar> log_alphas = T::filled({n_comp}, static_cast<Scalar>(kLogAlphaInit));
    log_alphas.set_requires_grad(true);
    std::vector<Tensor<Scalar>> params{log_alphas};
    std::vector<AdamState<Scalar>> opt{AdamState<Scalar>::fresh(n_comp, config.lr_log_alpha)};
    std::vector<std::string> names{"log_alpha"};

    LagrangianState lag;
    lag.final_target = config.target_sparsity;
    lag.warmup_steps = warmup;
    lag.lr_lambda = config.lr_lambda;

    PruneResult result;
    auto gates_now = [&]() {
        GateSet g = gate_hyper;
        g.log_alpha = log_alphas.value().template cast<double>();
        return g;
    };

    for (long step = 1; step <= total; ++step) {
        lag.target = target_schedule(step, warmup, config.target_sparsity);

        std::vector<size_t> idx(static_cast<size_t>(config.batch_size));
        for (long i = 0; i < config.batch_size; ++i)
            idx[static_cast<size_t>(i)] = rng_index(
                {config.seed, stream_id("prune-batch"), static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)},
                train.size());
        PairBatch batch = encode_batch(train, idx, ctx.max_seq);
        const long B = batch.batch;

        // Sampled hard concrete gates: u -> s -> stretch -> clamp.
        long draws_per_comp = config.per_example_draws ? B : 1;
        typename T::Array logit_u(n_comp * draws_per_comp);
        for (long c = 0; c < n_comp; ++c)
            for (long e = 0; e < draws_per_comp; ++e) {
                double u01 = rng_unit({config.seed, stream_id("gate"), static_cast<std::uint64_t>(c),
                                       static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(e)});
                double u = geps + u01 * (1.0 - 2.0 * geps);
                logit_u[c * draws_per_comp + e] = static_cast<Scalar>(std::log(u / (1.0 - u)));
            }
        Tensor<Scalar> z;
        if (config.per_example_draws) {
            Tensor<Scalar> la_col = reshape(log_alphas, {n_comp, 1});
            Tensor<Scalar> la_mat = matmul(la_col, T::filled({1, B}, Scalar(1)));
            Tensor<Scalar> pre = scalar_mul(add(la_mat, T::from_array({n_comp, B}, std::move(logit_u)), Broadcast::Same),
                                            1.0 / beta);
            z = clamp(add(scalar_mul(sigmoid(pre), r - l), T::filled({n_comp, B}, static_cast<Scalar>(l)), Broadcast::Same),
                      0.0, 1.0);
        } else {
            Tensor<Scalar> pre =
                scalar_mul(add(log_alphas, T::from_array({n_comp}, std::move(logit_u)), Broadcast::Same), 1.0 / beta);
            z = clamp(add(scalar_mul(sigmoid(pre), r - l), T::filled({n_comp}, static_cast<Scalar>(l)), Broadcast::Same),
                      0.0, 1.0);
        }

        GateVector<Scalar> gates(static_cast<size_t>(n_comp));
        for (long c = 0; c < n_comp; ++c) {
            auto& g = gates[static_cast<size_t>(c)];
            g.kind = GateKind::Blend;
            if (config.per_example_draws)
                g.z = reshape(slice(z, 0, c, 1), {B});
            else
                g.z = slice(z, 0, c, 1);
            g.mean = ctx.means.mean[static_cast<size_t>(c)];
        }

        auto out = forward(model, batch, &gates);

        typename T::Array fl(B * cfg.n_labels);
        for (long b = 0; b < B; ++b)
            for (long c = 0; c < cfg.n_labels; ++c)
                fl[b * cfg.n_labels + c] = static_cast<Scalar>(ctx.full_logits(static_cast<long>(idx[static_cast<size_t>(b)]), c));
        Tensor<Scalar> full_logits = T::from_array({B, cfg.n_labels}, std::move(fl));

        Tensor<Scalar> kl = kl_faithfulness_loss(full_logits, out.logits);
        double kl_val = kl.item();
        if (!std::isfinite(kl_val)) throw NumericError(cat("prune: KL diverged (non-finite) at step ", step));

        // Differentiable expected sparsity t from P(z != 0).
        Tensor<Scalar> p_nonzero = sigmoid(add(log_alphas, T::filled({n_comp}, static_cast<Scalar>(open_shift)), Broadcast::Same));
        Tensor<Scalar> dropped = sub(T::filled({n_comp}, Scalar(1)), p_nonzero, Broadcast::Same);
        Tensor<Scalar> t = reshape(matmul(reshape(dropped, {1, n_comp}), w_norm), {1});
        Tensor<Scalar> gap = sub(t, T::scalar(lag.target), Broadcast::Same);
        Tensor<Scalar> penalty = add(scalar_mul(gap, lag.lambda1), mul(scalar_mul(gap, lag.lambda2), gap, Broadcast::Same),
                                     Broadcast::Same);
        Tensor<Scalar> loss = add(kl, penalty, Broadcast::Same);

        double t_val = t.item();
        loss.backward();
        adam_step(params, opt, &names);
        lagrangian_update(lag, t_val);

        result.log.push_back({step, lag.target, t_val, kl_val, lag.lambda1, lag.lambda2});
        if (step % config.eval_every == 0 || step == total)
            result.trajectory.emplace_back(step, Eigen::ArrayXd(log_alphas.value().template cast<double>()));
        result.final_kl = kl_val;
    }

    result.gates = gates_now();
    double threshold = choose_threshold(result.gates, config.target_sparsity, config.threshold_grid_stride);
    result.subnetwork = discretize(result.gates, threshold);
    result.subnetwork.seed = config.seed;
    result.subnetwork.target_sparsity = config.target_sparsity;

    double max_weight_frac = weights.maxCoeff() / weight_total;
    double gap = std::abs(result.subnetwork.sparsity - config.target_sparsity);
    if (gap > max_weight_frac + config.threshold_grid_stride)
        result.warnings.push_back(cat("final sparsity ", num_str(result.subnetwork.sparsity), " misses target ",
                                      num_str(config.target_sparsity), " by more than one component weight plus grid resolution"));
    return result;
}

// Convenience wrapper matching the operation contract directly.
template <class Scalar>
PruneResult prune(const Model<Scalar>& model, const Split& train, const PruneConfig& config, long max_seq) {
    PruneContext<Scalar> ctx = make_prune_context(model, train, max_seq);
    return prune(ctx, config);
}

// Kept components gate to 1; dropped components gate to 0 with cached means.
inline MaskAssignment apply_subnetwork(const ModelConfig& cfg, const Subnetwork& sn, const MeanCache& means) {
    const long n = component_count(cfg);
    if (static_cast<long>(sn.keep.size()) != n)
        throw ConfigError(cat("apply_subnetwork: ", sn.keep.size(), " keep bits for ", n, " components"));
    MaskAssignment ma;
    ma.gate = Eigen::ArrayXd::Ones(n);
    ma.mean.resize(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) {
        if (!sn.keep[static_cast<size_t>(i)]) {
            if (static_cast<long>(means.mean.size()) != n || means.mean[static_cast<size_t>(i)].size() != cfg.hidden)
                throw ConfigError(cat("apply_subnetwork: missing mean for dropped component ",
                                      component_at(cfg, i).name()));
            ma.gate[i] = 0.0;
            ma.mean[static_cast<size_t>(i)] = means.mean[static_cast<size_t>(i)];
        }
    }
    return ma;
}

}  // namespace subnetkit

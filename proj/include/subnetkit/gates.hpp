#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "subnetkit/common.hpp"

namespace subnetkit {

// Hard concrete gate distribution over maskable components, expected-sparsity
// bookkeeping, the Lagrangian sparsity controller, and mask discretization.
// All functions here are pure double-precision math; the differentiable gate
// chain used during optimization is built from the same formulas out of
// tensor primitives in the pruner.

struct GateSet {
    Eigen::ArrayXd log_alpha;     // learnable, one per maskable component
    Eigen::ArrayXd param_weight;  // parameter count per component
    double beta = 2.0 / 3.0;      // temperature dividing the gate logit
    double l = -0.1;              // lower stretch
    double r = 1.1;               // upper stretch
    double eps = 1e-6;            // uniform-draw margin

    long size() const { return log_alpha.size(); }

    void validate() const {
        if (!(l < 0.0 && 0.0 < 1.0 && 1.0 < r))
            throw ArgumentError(cat("gates: stretch [", num_str(l), ",", num_str(r), "] must satisfy l < 0 < 1 < r"));
        if (!(beta > 0.0)) throw ArgumentError("gates: beta must be positive");
        if (!(eps > 0.0 && eps < 0.5)) throw ArgumentError("gates: eps must lie in (0, 0.5)");
        if (log_alpha.size() != param_weight.size())
            throw ArgumentError(cat("gates: ", log_alpha.size(), " log-alphas vs ", param_weight.size(), " weights"));
        for (long i = 0; i < param_weight.size(); ++i)
            if (!(param_weight[i] > 0.0)) throw ArgumentError(cat("gates: nonpositive weight at component ", i));
    }
};

inline double sigmoid_d(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Stochastic gate: u -> s -> stretched -> clamped.
inline double sample_gate(double log_alpha, double u, const GateSet& g) {
    if (!(u > 0.0 && u < 1.0)) throw ArgumentError(cat("sample_gate: u = ", num_str(u), " outside (0,1)"));
    double s = sigmoid_d((std::log(u / (1.0 - u)) + log_alpha) / g.beta);
    double stretched = s * (g.r - g.l) + g.l;
    return std::clamp(stretched, 0.0, 1.0);
}

// Deterministic gate used for discretization and faithfulness monitoring.
inline double eval_gate(double log_alpha, const GateSet& g) {
    return std::clamp(sigmoid_d(log_alpha) * (g.r - g.l) + g.l, 0.0, 1.0);
}

// P(z != 0) in closed form.
inline double prob_nonzero(double log_alpha, const GateSet& g) {
    return sigmoid_d(log_alpha + g.beta * std::log(-g.r / g.l));
}

// Parameter-weighted expected pruned fraction.
inline double expected_sparsity(const GateSet& g) {
    if (g.size() == 0) throw ArgumentError("expected_sparsity: empty gate set");
    double num = 0, den = 0;
    for (long i = 0; i < g.size(); ++i) {
        num += g.param_weight[i] * (1.0 - prob_nonzero(g.log_alpha[i], g));
        den += g.param_weight[i];
    }
    return num / den;
}

struct LagrangianState {
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    double target = 0.0;  // current target sparsity s
    double final_target = 0.0;
    long warmup_steps = 0;
    double lr_lambda = 1.0;
};

inline double lagrangian_penalty(double t, const LagrangianState& st) {
    double d = t - st.target;
    return st.lambda1 * d + st.lambda2 * d * d;
}

// Gradient ascent on the multipliers.
inline void lagrangian_update(LagrangianState& st, double t) {
    double d = t - st.target;
    st.lambda1 += st.lr_lambda * d;
    st.lambda2 += st.lr_lambda * d * d;
}

inline double target_schedule(long step, long warmup_steps, double final_target) {
    if (warmup_steps <= 0) return final_target;
    double ramped = final_target * static_cast<double>(step) / static_cast<double>(warmup_steps);
    return std::min(final_target, ramped);
}

struct Subnetwork {
    std::vector<std::uint8_t> keep;  // per maskable component, canonical order
    double sparsity = 0.0;           // parameter-weighted pruned fraction
    std::uint64_t seed = 0;
    double target_sparsity = 0.0;
    double threshold = 0.0;

    long kept_count() const {
        long c = 0;
        for (auto k : keep) c += k ? 1 : 0;
        return c;
    }
};

inline double sparsity_of(const std::vector<std::uint8_t>& keep, const Eigen::ArrayXd& weights) {
    if (static_cast<long>(keep.size()) != weights.size())
        throw ArgumentError(cat("sparsity_of: ", keep.size(), " keeps vs ", weights.size(), " weights"));
    double dropped = 0, total = 0;
    for (long i = 0; i < weights.size(); ++i) {
        total += weights[i];
        if (!keep[static_cast<size_t>(i)]) dropped += weights[i];
    }
    return dropped / total;
}

inline Subnetwork discretize(const GateSet& g, double threshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0))
        throw ArgumentError(cat("discretize: threshold ", num_str(threshold), " outside [0,1]"));
    Subnetwork sn;
    sn.keep.resize(static_cast<size_t>(g.size()));
    for (long i = 0; i < g.size(); ++i) sn.keep[static_cast<size_t>(i)] = eval_gate(g.log_alpha[i], g) >= threshold ? 1 : 0;
    sn.sparsity = sparsity_of(sn.keep, g.param_weight);
    sn.threshold = threshold;
    return sn;
}

// Grid search on [0,1]; ties resolve to the lower threshold (keeps more).
inline double choose_threshold(const GateSet& g, double target, double stride = 0.05) {
    if (!(stride > 0.0 && stride <= 1.0)) throw ArgumentError("choose_threshold: stride must lie in (0,1]");
    long n = static_cast<long>(std::llround(1.0 / stride));
    double best_thr = 0.0;
    double best_gap = std::numeric_limits<double>::infinity();
    for (long i = 0; i <= n; ++i) {
        double thr = static_cast<double>(i) / static_cast<double>(n);
        double gap = std::abs(discretize(g, thr).sparsity - target);
        if (gap < best_gap - 1e-15) {
            best_gap = gap;
            best_thr = thr;
        }
    }
    return best_thr;
}

}  // namespace subnetkit

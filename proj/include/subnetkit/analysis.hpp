#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "subnetkit/common.hpp"
#include "subnetkit/gates.hpp"
#include "subnetkit/model.hpp"
#include "subnetkit/pruner.hpp"
#include "subnetkit/taskgen.hpp"
#include "subnetkit/trainer.hpp"

namespace subnetkit {

// Measurement suite over discovered subnetworks: effective-size curves,
// head-frequency statistics with Spearman agreement, common-core
// intersections against the random baseline, mean-ablation sweeps with
// super-additivity, and the repeated-token attention-overlap metric.

enum class Selector { Id, Ood, Mixed };

inline const char* selector_name(Selector s) {
    switch (s) {
        case Selector::Id: return "id";
        case Selector::Ood: return "ood";
        case Selector::Mixed: return "mixed";
    }
    return "?";
}

struct SuiteAccuracy {
    double id = 0;
    double ood = 0;    // unweighted mean over subcases
    double mixed = 0;  // (id + ood) / 2
    std::vector<std::pair<std::string, double>> subcases;

    double by(Selector s) const {
        switch (s) {
            case Selector::Id: return id;
            case Selector::Ood: return ood;
            case Selector::Mixed: return mixed;
        }
        return 0;
    }
};

template <class Scalar>
SuiteAccuracy suite_accuracy(const Model<Scalar>& model, const DatasetBundle& data, const MaskAssignment* masks,
                             long max_seq) {
    SuiteAccuracy acc;
    acc.id = evaluate(model, data.id_val, masks, max_seq).accuracy;
    double sum = 0;
    long n = 0;
    for (const auto& [name, split] : data.ood) {
        if (split.empty()) continue;
        double a = evaluate(model, split, masks, max_seq).accuracy;
        acc.subcases.emplace_back(name, a);
        sum += a;
        ++n;
    }
    acc.ood = n > 0 ? sum / static_cast<double>(n) : 0.0;
    acc.mixed = 0.5 * (acc.id + acc.ood);
    return acc;
}

// ---------------------------------------------------------------------------
// Effective size

struct FaithfulnessQuery {
    double tolerance = 0.03;          // absolute accuracy points
    std::vector<double> grid;         // sparsities, multiples of 5% by default
    std::vector<std::uint64_t> seeds; // 3 for curves, 12 for overlap studies

    static std::vector<double> default_grid(double lo = 0.05, double hi = 0.95, double stride = 0.05) {
        std::vector<double> g;
        long n = static_cast<long>(std::llround(1.0 / stride));
        for (long i = 0; i <= n; ++i) {
            double s = static_cast<double>(i) / static_cast<double>(n);
            if (s >= lo - 1e-12 && s <= hi + 1e-12) g.push_back(s);
        }
        return g;
    }

    void validate() const {
        if (!(tolerance > 0)) throw ArgumentError("faithfulness query: tolerance must be positive");
        for (double s : grid)
            if (!(s >= 0.0 && s <= 1.0)) throw ArgumentError("faithfulness query: grid outside [0,1]");
        if (seeds.empty()) throw ArgumentError("faithfulness query: no seeds");
    }
};

using PruneFn = std::function<Subnetwork(double target_sparsity, std::uint64_t seed)>;

// Retained fraction of the smallest faithful subnetwork per dataset selector.
// Scans the sparsity grid from the top; the first faithful grid point per
// selector is the highest one. Accuracy at each grid point is the mean over
// the query's seeds. If no grid point is faithful the effective size is 1.
template <class Scalar>
std::array<double, 3> effective_size(const Model<Scalar>& model, const DatasetBundle& data, const MeanCache& means,
                                     long max_seq, const FaithfulnessQuery& query, const PruneFn& prune_fn,
                                     const SuiteAccuracy* full_acc = nullptr) {
    query.validate();
    SuiteAccuracy full = full_acc ? *full_acc : suite_accuracy(model, data, nullptr, max_seq);
    std::vector<double> grid = query.grid;
    std::sort(grid.begin(), grid.end(), std::greater<>());
    std::array<std::optional<double>, 3> found;
    for (double target : grid) {
        double sum_id = 0, sum_ood = 0, sum_mixed = 0;
        for (std::uint64_t seed : query.seeds) {
            Subnetwork sn = prune_fn(target, seed);
            MaskAssignment ma = apply_subnetwork(model.config, sn, means);
            SuiteAccuracy a = suite_accuracy(model, data, &ma, max_seq);
            sum_id += a.id;
            sum_ood += a.ood;
            sum_mixed += a.mixed;
        }
        double n = static_cast<double>(query.seeds.size());
        std::array<double, 3> mean_acc{sum_id / n, sum_ood / n, sum_mixed / n};
        for (int s = 0; s < 3; ++s) {
            Selector sel = static_cast<Selector>(s);
            if (!found[s] && std::abs(mean_acc[static_cast<size_t>(s)] - full.by(sel)) <= query.tolerance)
                found[s] = target;
        }
        if (found[0] && found[1] && found[2]) break;
    }
    std::array<double, 3> out{};
    for (int s = 0; s < 3; ++s) out[static_cast<size_t>(s)] = found[s] ? 1.0 - *found[s] : 1.0;
    return out;
}

// ---------------------------------------------------------------------------
// Frequencies, intersections

struct FrequencyTable {
    std::vector<long> count;  // per component, canonical order
    long collection = 0;
};

inline FrequencyTable head_frequencies(const std::vector<Subnetwork>& subnetworks) {
    if (subnetworks.empty()) throw ArgumentError("head_frequencies: empty collection");
    FrequencyTable t;
    t.collection = static_cast<long>(subnetworks.size());
    t.count.assign(subnetworks[0].keep.size(), 0);
    for (const auto& sn : subnetworks) {
        if (sn.keep.size() != subnetworks[0].keep.size())
            throw ArgumentError(cat("head_frequencies: mismatched component spaces (", sn.keep.size(), " vs ",
                                    subnetworks[0].keep.size(), ")"));
        for (size_t i = 0; i < sn.keep.size(); ++i)
            if (sn.keep[i]) t.count[i] += 1;
    }
    return t;
}

inline std::vector<std::uint8_t> core_intersection(const std::vector<Subnetwork>& subnetworks) {
    if (subnetworks.empty()) throw ArgumentError("core_intersection: empty collection");
    std::vector<std::uint8_t> keep = subnetworks[0].keep;
    for (const auto& sn : subnetworks) {
        if (sn.keep.size() != keep.size())
            throw ArgumentError(cat("core_intersection: mismatched component spaces (", sn.keep.size(), " vs ",
                                    keep.size(), ")"));
        for (size_t i = 0; i < keep.size(); ++i) keep[i] = keep[i] && sn.keep[i];
    }
    return keep;
}

inline double expected_random_intersection(long n_components, double keep_prob, long n_subnetworks) {
    if (!(keep_prob >= 0.0 && keep_prob <= 1.0))
        throw ArgumentError(cat("expected_random_intersection: keep_prob ", num_str(keep_prob), " outside [0,1]"));
    return static_cast<double>(n_components) * std::pow(keep_prob, static_cast<double>(n_subnetworks));
}

// ---------------------------------------------------------------------------
// Spearman rank correlation (average ranks for ties, t-approximated p-value)

struct SpearmanResult {
    bool defined = false;
    double rho = 0;
    double p_value = 1;
};

namespace detail {

inline std::vector<double> average_ranks(const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline double beta_cont_frac(double a, double b, double x) {
    constexpr int max_iter = 300;
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-15;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) break;
    }
    return h;
}

inline double reg_inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log(1.0 - x);
    double bt = std::exp(ln_bt);
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * beta_cont_frac(a, b, x) / a;
    return 1.0 - bt * beta_cont_frac(b, a, 1.0 - x) / b;
}

// Two-sided p-value of Student's t with df degrees of freedom.
inline double student_t_two_sided(double t, double df) {
    if (!std::isfinite(t)) return 0.0;
    double x = df / (df + t * t);
    return reg_inc_beta(df / 2.0, 0.5, x);
}

}  // namespace detail

inline SpearmanResult spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ArgumentError(cat("spearman_rho: lengths differ, ", a.size(), " vs ", b.size()));
    if (a.size() < 3) throw ArgumentError(cat("spearman_rho: need at least 3 pairs, got ", a.size()));
    const double n = static_cast<double>(a.size());
    std::vector<double> ra = detail::average_ranks(a);
    std::vector<double> rb = detail::average_ranks(b);
    double ma = 0, mb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    SpearmanResult res;
    if (saa == 0.0 || sbb == 0.0) return res;  // constant input: rho undefined
    res.defined = true;
    res.rho = sab / std::sqrt(saa * sbb);
    res.rho = std::clamp(res.rho, -1.0, 1.0);
    double df = n - 2.0;
    if (std::abs(res.rho) >= 1.0) {
        res.p_value = 0.0;
    } else {
        double t = res.rho * std::sqrt(df / (1.0 - res.rho * res.rho));
        res.p_value = detail::student_t_two_sided(t, df);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Ablation sweep

struct AblationCell {
    std::string dataset;  // "id" or "ood"
    std::string subcase;
    double accuracy = 0;
    double delta = 0;  // vs baseline (empty set)
    std::optional<double> superadditivity;
};

struct AblationRow {
    std::vector<ComponentId> set;
    std::string set_name;  // "none" for the baseline
    std::vector<AblationCell> cells;
};

template <class Scalar>
std::vector<AblationRow> ablation_sweep(const Model<Scalar>& model, const std::vector<std::vector<ComponentId>>& sets,
                                        const DatasetBundle& data, const MeanCache& means, long max_seq) {
    const ModelConfig& cfg = model.config;
    const long n = component_count(cfg);

    auto eval_set = [&](const std::vector<ComponentId>& set) {
        MaskAssignment ma = MaskAssignment::all_ones(cfg);
        for (const ComponentId& id : set) {
            long idx = component_index(cfg, id);
            if (static_cast<long>(means.mean.size()) != n || means.mean[static_cast<size_t>(idx)].size() != cfg.hidden)
                throw ConfigError(cat("ablation_sweep: missing mean for ", id.name()));
            ma.gate[idx] = 0.0;
            ma.mean[static_cast<size_t>(idx)] = means.mean[static_cast<size_t>(idx)];
        }
        return suite_accuracy(model, data, &ma, max_seq);
    };

    SuiteAccuracy baseline = suite_accuracy(model, data, nullptr, max_seq);

    auto make_cells = [&](const SuiteAccuracy& acc) {
        std::vector<AblationCell> cells;
        cells.push_back({"id", "id", acc.id, acc.id - baseline.id, std::nullopt});
        for (size_t i = 0; i < acc.subcases.size(); ++i)
            cells.push_back({"ood", acc.subcases[i].first, acc.subcases[i].second,
                             acc.subcases[i].second - baseline.subcases[i].second, std::nullopt});
        return cells;
    };

    // Singleton deltas, cached for super-additivity of multi-component sets.
    std::vector<std::pair<long, SuiteAccuracy>> singleton_cache;
    auto singleton_acc = [&](const ComponentId& id) -> const SuiteAccuracy& {
        long idx = component_index(cfg, id);
        for (auto& [i, a] : singleton_cache)
            if (i == idx) return a;
        singleton_cache.emplace_back(idx, eval_set({id}));
        return singleton_cache.back().second;
    };

    std::vector<AblationRow> rows;
    {
        AblationRow base;
        base.set_name = "none";
        base.cells = make_cells(baseline);
        rows.push_back(std::move(base));
    }
    for (const auto& set : sets) {
        AblationRow row;
        row.set = set;
        if (set.empty()) {
            row.set_name = "none";
            row.cells = make_cells(baseline);
            rows.push_back(std::move(row));
            continue;
        }
        std::string name;
        for (size_t i = 0; i < set.size(); ++i) name += (i ? "+" : "") + set[i].name();
        row.set_name = name;
        SuiteAccuracy acc = set.size() == 1 ? singleton_acc(set[0]) : eval_set(set);
        row.cells = make_cells(acc);
        if (set.size() > 1) {
            for (auto& cell : row.cells) {
                double singles = 0;
                for (const ComponentId& id : set) {
                    const SuiteAccuracy& sa = singleton_acc(id);
                    if (cell.dataset == "id") {
                        singles += sa.id - baseline.id;
                    } else {
                        for (size_t i = 0; i < sa.subcases.size(); ++i)
                            if (sa.subcases[i].first == cell.subcase)
                                singles += sa.subcases[i].second - baseline.subcases[i].second;
                    }
                }
                cell.superadditivity = cell.delta - singles;
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Repeated-token attention overlap

// Micro-average over the dataset of the fraction of attention mass that
// queries whose token type occurs in both sentences place on positions of the
// same type in the opposite sentence. Batches with no repeated types
// contribute nothing; heads whose denominator stays zero are undefined.
struct AttentionOverlap {
    Eigen::ArrayXd numerator;    // per head, layer-major
    Eigen::ArrayXd denominator;  // mass of qualifying queries
    long layers = 0;
    long heads = 0;

    static AttentionOverlap zero(const ModelConfig& cfg) {
        AttentionOverlap o;
        o.layers = cfg.layers;
        o.heads = cfg.heads;
        o.numerator = Eigen::ArrayXd::Zero(cfg.layers * cfg.heads);
        o.denominator = Eigen::ArrayXd::Zero(cfg.layers * cfg.heads);
        return o;
    }

    bool defined(long layer, long head) const { return denominator[layer * heads + head] > 0.0; }
    double fraction(long layer, long head) const {
        double den = denominator[layer * heads + head];
        return den > 0.0 ? numerator[layer * heads + head] / den : 0.0;
    }
};

template <class Scalar>
void accumulate_repeated_token_attention(AttentionOverlap& acc,
                                         const std::vector<std::vector<typename Tensor<Scalar>::MatrixRM>>& attention,
                                         const PairBatch& batch) {
    if (static_cast<long>(attention.size()) != acc.layers)
        throw ArgumentError(cat("attention overlap: ", attention.size(), " layers captured, expected ", acc.layers));
    const long S = batch.seq;
    auto is_content = [&](long tok) {
        return tok != TaskSpec::PAD && tok != TaskSpec::CLS && tok != TaskSpec::SEP;
    };
    for (long b = 0; b < batch.batch; ++b) {
        // Token types present in each sentence (premise = segment 0, hypothesis = segment 1).
        std::unordered_set<long> premise_types, hyp_types;
        for (long s = 0; s < S; ++s) {
            if (!batch.is_valid(b, s) || !is_content(batch.token(b, s))) continue;
            (batch.segment(b, s) == 0 ? premise_types : hyp_types).insert(batch.token(b, s));
        }
        std::unordered_set<long> both;
        for (long t : premise_types)
            if (hyp_types.count(t)) both.insert(t);
        if (both.empty()) continue;  // excluded from the micro-average
        for (long l = 0; l < acc.layers; ++l) {
            for (long h = 0; h < acc.heads; ++h) {
                const auto& amap = attention[static_cast<size_t>(l)][static_cast<size_t>(h)];
                double num = 0, den = 0;
                for (long q = 0; q < S; ++q) {
                    if (!batch.is_valid(b, q)) continue;
                    long qt = batch.token(b, q);
                    if (!is_content(qt) || !both.count(qt)) continue;
                    long qseg = batch.segment(b, q);
                    for (long k = 0; k < S; ++k) {
                        if (!batch.is_valid(b, k)) continue;
                        double w = static_cast<double>(amap(b * S + q, k));
                        den += w;
                        if (batch.segment(b, k) != qseg && batch.token(b, k) == qt) num += w;
                    }
                }
                acc.numerator[l * acc.heads + h] += num;
                acc.denominator[l * acc.heads + h] += den;
            }
        }
    }
}

template <class Scalar>
AttentionOverlap repeated_token_attention(const Model<Scalar>& model, const Split& split, long max_seq,
                                          long eval_batch = 256) {
    NoGradGuard ng;
    AttentionOverlap acc = AttentionOverlap::zero(model.config);
    ForwardOptions opts;
    opts.capture_attention = true;
    for (size_t start = 0; start < split.size(); start += static_cast<size_t>(eval_batch)) {
        size_t end = std::min(split.size(), start + static_cast<size_t>(eval_batch));
        std::vector<size_t> idx;
        for (size_t i = start; i < end; ++i) idx.push_back(i);
        PairBatch batch = encode_batch(split, idx, max_seq);
        auto out = forward(model, batch, nullptr, opts);
        accumulate_repeated_token_attention<Scalar>(acc, out.attention, batch);
    }
    return acc;
}

}  // namespace subnetkit

#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "subnetkit/common.hpp"
#include "subnetkit/model.hpp"
#include "subnetkit/rng.hpp"
#include "subnetkit/taskgen.hpp"
#include "subnetkit/tensor.hpp"

namespace subnetkit {

struct TrainConfig {
    double lr = 3e-4;
    long batch_size = 32;
    long total_steps = 3000;
    long checkpoint_every = 250;
    long eval_every = 100;
    std::uint64_t seed = 1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    long max_seq_len = 16;

    void validate() const {
        if (batch_size < 1 || total_steps < 0 || checkpoint_every < 1 || eval_every < 1 || max_seq_len < 4)
            throw ConfigError("train config: counts must be positive");
        if (!(lr >= 0)) throw ConfigError("train config: lr must be nonnegative");
    }
};

template <class Scalar>
struct Checkpoint {
    long step = 0;
    std::vector<std::pair<std::string, Tensor<Scalar>>> params;  // detached copies, canonical order
    std::vector<AdamState<Scalar>> opt;                          // aligned with params
    std::uint64_t config_fingerprint = 0;
    std::uint64_t rng_seed = 0;  // RNG cursor: (seed, next step) fully determines the stream
    long rng_next_step = 0;
};

struct MetricRow {
    long step = 0;
    std::string split;
    std::string subcase;
    double accuracy = 0;
    double loss = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
    struct Row {
        std::string subcase;
        long correct = 0;
        long total = 0;
        double accuracy = 0;
        double mean_loss = 0;
    };
    std::vector<Row> rows;
    long correct = 0;
    long total = 0;
    double accuracy = 0;
    double mean_loss = 0;
    // provenance, filled by sweep drivers
    std::optional<std::uint64_t> seed;
    std::optional<double> sparsity;
    std::vector<std::string> warnings;
};

template <class Scalar>
Tensor<Scalar> cross_entropy_loss(const Tensor<Scalar>& logits, const std::vector<long>& labels) {
    const long B = logits.dim(0), C = logits.dim(1);
    if (static_cast<long>(labels.size()) != B)
        throw DimensionError(cat("cross_entropy: ", labels.size(), " labels for batch ", B));
    typename Tensor<Scalar>::Array onehot = Tensor<Scalar>::Array::Zero(B * C);
    for (long b = 0; b < B; ++b) onehot[b * C + labels[static_cast<size_t>(b)]] = Scalar(1);
    Tensor<Scalar> oh = Tensor<Scalar>::from_array({B, C}, std::move(onehot));
    Tensor<Scalar> lp = log(softmax_lastdim(logits));
    Tensor<Scalar> picked = matmul(mul(oh, lp, Broadcast::Same), Tensor<Scalar>::filled({C, 1}, Scalar(1)));
    return scalar_mul(mean(picked), -1.0);
}

template <class Scalar>
EvalReport evaluate(const Model<Scalar>& model, const Split& split, const MaskAssignment* masks, long max_seq,
                    long eval_batch = 256) {
    NoGradGuard ng;
    EvalReport report;
    if (split.empty()) {
        report.warnings.push_back("empty split: no subcases evaluated");
        return report;
    }
    std::optional<GateVector<Scalar>> gates;
    if (masks) gates = gates_from_assignment<Scalar>(model.config, *masks);

    std::vector<std::pair<std::string, EvalReport::Row>> acc;  // insertion-ordered
    auto row_for = [&](const std::string& subcase) -> EvalReport::Row& {
        for (auto& [name, row] : acc)
            if (name == subcase) return row;
        acc.emplace_back(subcase, EvalReport::Row{subcase, 0, 0, 0, 0});
        return acc.back().second;
    };

    double loss_sum = 0;
    for (size_t start = 0; start < split.size(); start += static_cast<size_t>(eval_batch)) {
        size_t end = std::min(split.size(), start + static_cast<size_t>(eval_batch));
        std::vector<size_t> idx;
        for (size_t i = start; i < end; ++i) idx.push_back(i);
        PairBatch batch = encode_batch(split, idx, max_seq);
        auto out = forward(model, batch, gates ? &*gates : nullptr);
        auto preds = predict_labels(out.logits);
        double ce = cross_entropy_loss(out.logits, batch.labels).item();
        loss_sum += ce * static_cast<double>(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
            const Example& ex = split[idx[i]];
            auto& row = row_for(ex.subcase);
            row.total += 1;
            report.total += 1;
            if (preds[static_cast<long>(i)] == ex.label) {
                row.correct += 1;
                report.correct += 1;
            }
        }
    }
    for (auto& [name, row] : acc) {
        row.accuracy = row.total > 0 ? static_cast<double>(row.correct) / static_cast<double>(row.total) : 0.0;
        report.rows.push_back(row);
    }
    report.accuracy = report.total > 0 ? static_cast<double>(report.correct) / static_cast<double>(report.total) : 0.0;
    report.mean_loss = loss_sum / static_cast<double>(report.total);
    return report;
}

// ---------------------------------------------------------------------------
// Fine-tuning

template <class Scalar>
struct TrainResult {
    std::vector<MetricRow> metrics;
    long final_step = 0;
};

template <class Scalar>
using CheckpointSink = std::function<void(const Checkpoint<Scalar>&)>;

template <class Scalar>
Checkpoint<Scalar> snapshot_checkpoint(const Model<Scalar>& model, const std::vector<AdamState<Scalar>>& opt,
                                       long step, std::uint64_t fingerprint, std::uint64_t seed) {
    Checkpoint<Scalar> ck;
    ck.step = step;
    for (const auto& [name, t] : model.named_params()) ck.params.emplace_back(name, t.detach());
    ck.opt = opt;
    ck.config_fingerprint = fingerprint;
    ck.rng_seed = seed;
    ck.rng_next_step = step + 1;
    return ck;
}

template <class Scalar>
Model<Scalar> model_from_checkpoint(const ModelConfig& config, const Checkpoint<Scalar>& ck) {
    Model<Scalar> m = init_model<Scalar>(config, 0);
    auto params = m.named_params();
    if (params.size() != ck.params.size())
        throw ConfigError(cat("checkpoint holds ", ck.params.size(), " tensors, model needs ", params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i].first != ck.params[i].first)
            throw ConfigError(cat("checkpoint tensor '", ck.params[i].first, "' does not match model slot '",
                                  params[i].first, "'"));
        if (params[i].second.shape() != ck.params[i].second.shape())
            throw ConfigError(cat("checkpoint tensor '", ck.params[i].first, "' has shape ",
                                  shape_str(ck.params[i].second.shape()), ", expected ",
                                  shape_str(params[i].second.shape())));
        params[i].second.mutable_value() = ck.params[i].second.value();
    }
    return m;
}

namespace detail {

template <class Scalar>
std::vector<size_t> train_batch_indices(const TrainConfig& cfg, long step, size_t n) {
    std::vector<size_t> idx(static_cast<size_t>(cfg.batch_size));
    for (long i = 0; i < cfg.batch_size; ++i)
        idx[static_cast<size_t>(i)] =
            rng_index({cfg.seed, stream_id("batch"), static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)}, n);
    return idx;
}

template <class Scalar>
void log_eval_metrics(const Model<Scalar>& model, const DatasetBundle& data, const TrainConfig& cfg, long step,
                      std::vector<MetricRow>& metrics) {
    EvalReport id = evaluate(model, data.id_val, nullptr, cfg.max_seq_len);
    metrics.push_back({step, "id", "id", id.accuracy, id.mean_loss});
    for (const auto& [name, split] : data.ood) {
        if (split.empty()) continue;
        EvalReport r = evaluate(model, split, nullptr, cfg.max_seq_len);
        metrics.push_back({step, "ood", name, r.accuracy, r.mean_loss});
    }
}

}  // namespace detail

// Supervised fine-tuning with periodic evaluation and checkpoints at step 0,
// every checkpoint_every steps, and the final step. Resuming from a saved
// checkpoint reproduces the uninterrupted run bit-for-bit because every
// random choice is keyed on (seed, step).
template <class Scalar>
TrainResult<Scalar> fine_tune(Model<Scalar>& model, const DatasetBundle& data, const TrainConfig& cfg,
                              CheckpointSink<Scalar> sink = nullptr, std::uint64_t config_fingerprint = 0,
                              const Checkpoint<Scalar>* resume_from = nullptr) {
    cfg.validate();
    if (data.train.empty()) throw ArgumentError("fine_tune: empty training split");
    TrainResult<Scalar> result;

    model.set_trainable(true);
    auto named = model.named_params();
    std::vector<Tensor<Scalar>> params;
    std::vector<std::string> names;
    for (auto& [n, t] : named) {
        names.push_back(n);
        params.push_back(t);
    }
    std::vector<AdamState<Scalar>> opt;
    long start_step = 0;
    if (resume_from) {
        if (resume_from->opt.size() != params.size())
            throw ConfigError("fine_tune: resume checkpoint optimizer state does not match model");
        opt = resume_from->opt;
        start_step = resume_from->step;
    } else {
        for (const auto& p : params)
            opt.push_back(AdamState<Scalar>::fresh(p.numel(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps));
    }

    auto emit = [&](long step) {
        if (sink) sink(snapshot_checkpoint(model, opt, step, config_fingerprint, cfg.seed));
    };

    if (start_step == 0) {
        // Initial train loss probed on the first step's batch without updating.
        {
            NoGradGuard ng;
            auto idx = detail::train_batch_indices<Scalar>(cfg, 1, data.train.size());
            PairBatch batch = encode_batch(data.train, idx, cfg.max_seq_len);
            auto out = forward(model, batch, nullptr);
            double loss = cross_entropy_loss(out.logits, batch.labels).item();
            auto preds = predict_labels(out.logits);
            long correct = 0;
            for (size_t i = 0; i < idx.size(); ++i)
                if (preds[static_cast<long>(i)] == batch.labels[i]) ++correct;
            result.metrics.push_back(
                {0, "train", "all", static_cast<double>(correct) / static_cast<double>(idx.size()), loss});
        }
        detail::log_eval_metrics(model, data, cfg, 0, result.metrics);
        emit(0);
    }

    long last_good = start_step;
    for (long step = start_step + 1; step <= cfg.total_steps; ++step) {
        auto idx = detail::train_batch_indices<Scalar>(cfg, step, data.train.size());
        PairBatch batch = encode_batch(data.train, idx, cfg.max_seq_len);
        auto out = forward(model, batch, nullptr);
        Tensor<Scalar> loss = cross_entropy_loss(out.logits, batch.labels);
        double loss_val = loss.item();
        if (!std::isfinite(loss_val)) {
            emit(last_good);
            throw NumericError(cat("fine_tune: non-finite loss at step ", step, "; last good checkpoint at step ",
                                   last_good));
        }
        loss.backward();
        adam_step(params, opt, &names);
        last_good = step;

        if (step % cfg.eval_every == 0 || step == cfg.total_steps) {
            auto preds = predict_labels(out.logits);
            long correct = 0;
            for (size_t i = 0; i < idx.size(); ++i)
                if (preds[static_cast<long>(i)] == batch.labels[i]) ++correct;
            result.metrics.push_back(
                {step, "train", "all", static_cast<double>(correct) / static_cast<double>(idx.size()), loss_val});
            detail::log_eval_metrics(model, data, cfg, step, result.metrics);
        }
        if (step % cfg.checkpoint_every == 0 || step == cfg.total_steps) emit(step);
    }
    result.final_step = cfg.total_steps;
    return result;
}

}  // namespace subnetkit

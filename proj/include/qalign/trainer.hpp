#pragma once

#include <chrono>
#include <cmath>
#include <ctime>
#include <set>
#include <string>
#include <vector>

#include "qalign/data.hpp"
#include "qalign/model.hpp"
#include "qalign/optim.hpp"

// The two-stage training pipeline: supervised fine-tuning on task pairs for
// accuracy, then preference optimization against a frozen reference snapshot
// for robustness. Gradients flow through adapters only; the quantized base
// never changes (checked on every step, not assumed).

namespace qalign {

struct TrainConfig {
    std::string stage = "sft";  // "base" | "sft" | "dpo"
    double learning_rate = 2e-4;
    std::size_t steps = 60;   // sft/base budget
    std::size_t epochs = 3;   // dpo budget
    std::size_t batch_size = 8;
    double beta = 0.1;  // dpo inverse temperature
    std::uint64_t seed = 42;
    AdamWConfig adamw;  // lr field is overridden by learning_rate

    void validate() const {
        if (learning_rate <= 0.0) throw ConfigError("TrainConfig: learning_rate must be > 0");
        if (beta <= 0.0) throw ConfigError("TrainConfig: beta must be > 0");
        if (batch_size == 0) throw ConfigError("TrainConfig: batch_size must be >= 1");
    }
};

struct StepMetrics {
    std::size_t step = 0;
    double loss = 0.0;
    double margin = 0.0;  // dpo only; 0 for sft
    double lr = 0.0;
    std::string timestamp;
};

struct EpochMetrics {
    double mean_loss = 0.0;
    double mean_margin = 0.0;
};

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Immutable deep snapshot of the post-SFT policy; scoring only.
template <typename S>
class ReferenceModel {
public:
    explicit ReferenceModel(const Model<S>& policy) : model_(deep_copy(policy)) {
        model_.for_each_param(
            [](const std::string&, Tensor<S>& t) { t.set_requires_grad(false); });
        model_.for_each_adapter([](const std::string&, AdapterPair<S>& ad) {
            ad.a.set_requires_grad(false);
            ad.b.set_requires_grad(false);
        });
        checksum_ = model_.param_checksum();
    }

    const Model<S>& model() const { return model_; }
    std::uint64_t checksum() const { return checksum_; }

    void verify_unchanged() const {
        if (const_cast<Model<S>&>(model_).param_checksum() != checksum_)
            throw IntegrityError("ReferenceModel: parameters mutated during training");
    }

private:
    Model<S> model_;
    std::uint64_t checksum_;
};

template <typename S>
std::vector<Tensor<S>> adapter_params(Model<S>& model) {
    std::vector<Tensor<S>> params;
    model.for_each_adapter([&](const std::string&, AdapterPair<S>& ad) {
        params.push_back(ad.a);
        params.push_back(ad.b);
    });
    if (params.empty()) throw ConfigError("adapter_params: model has no adapters");
    return params;
}

template <typename S>
std::vector<Tensor<S>> all_params(Model<S>& model) {
    std::vector<Tensor<S>> params;
    model.for_each_param([&](const std::string&, Tensor<S>& t) {
        t.set_requires_grad(true);
        params.push_back(t);
    });
    return params;
}

// After a backward pass under adapter training, the populated-gradient set
// must be exactly the adapter set. Anything else means gradient leaked into
// the frozen base.
template <typename S>
void check_gradient_masking(Model<S>& model) {
    std::set<const void*> adapter_nodes;
    model.for_each_adapter([&](const std::string&, AdapterPair<S>& ad) {
        adapter_nodes.insert(ad.a.node_id());
        adapter_nodes.insert(ad.b.node_id());
    });
    model.for_each_param([&](const std::string& name, Tensor<S>& t) {
        const bool is_adapter = adapter_nodes.count(t.node_id()) > 0;
        if (!is_adapter && t.has_grad()) {
            for (S g : t.grad()) {
                if (g != S(0))
                    throw IntegrityError("gradient leaked into frozen parameter '" + name +
                                         "'");
            }
        }
        if (is_adapter && !t.has_grad())
            throw IntegrityError("adapter parameter '" + name +
                                 "' received no gradient after backward");
    });
}

namespace train_detail {

template <typename S>
Tensor<S> batch_cross_entropy(const Model<S>& model, const std::vector<SftExample>& data,
                              const std::vector<std::size_t>& batch_idx, bool training,
                              Rng* dropout_rng) {
    Tensor<S> total;
    for (std::size_t idx : batch_idx) {
        const SftExample& ex = data[idx];
        TokenSequence seq = with_response(ex.x.render(), ex.y);
        Tensor<S> logits = forward_logits(model, seq.ids, training, dropout_rng);
        std::vector<int> targets(seq.ids.size(), 0);
        std::vector<bool> mask(seq.ids.size(), false);
        for (std::size_t i = seq.response.begin; i < seq.response.end; ++i) {
            targets[i - 1] = seq.ids[i];
            mask[i - 1] = true;
        }
        Tensor<S> loss = softmax_cross_entropy(logits, targets, mask);
        total = total.defined() ? add(total, loss) : loss;
    }
    return scale(total, static_cast<S>(1.0 / static_cast<double>(batch_idx.size())));
}

inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n,
                                                          std::size_t batch_size,
                                                          Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < n; i += batch_size) {
        batches.emplace_back(order.begin() + static_cast<long>(i),
                             order.begin() + static_cast<long>(std::min(n, i + batch_size)));
    }
    return batches;
}

}  // namespace train_detail

// One SFT step: response-token cross-entropy on the batch, AdamW update on
// the adapter parameters only.
template <typename S>
double sft_step(Model<S>& model, const std::vector<SftExample>& data,
                const std::vector<std::size_t>& batch_idx, AdamW<S>& opt,
                std::uint64_t dropout_seed) {
    opt.zero_grad();
    Tape<S> tape;
    Tensor<S> loss;
    Rng dropout_rng(dropout_seed);
    {
        TapeScope<S> scope(tape);
        loss = train_detail::batch_cross_entropy(model, data, batch_idx, true, &dropout_rng);
        tape.backward(loss);
    }
    check_gradient_masking(model);
    opt.step();
    return static_cast<double>(loss.scalar_value());
}

template <typename S>
std::vector<StepMetrics> run_sft(Model<S>& model, const std::vector<SftExample>& data,
                                 const TrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw DataError("run_sft: empty dataset");
    model.freeze_base();
    AdamWConfig ocfg = cfg.adamw;
    ocfg.lr = cfg.learning_rate;
    AdamW<S> opt(adapter_params(model), ocfg);

    Rng shuffle_rng(derive_subseed(cfg.seed, "sft-shuffle"));
    std::vector<StepMetrics> metrics;
    std::vector<std::vector<std::size_t>> batches;
    std::size_t cursor = 0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        if (cursor == 0) batches = train_detail::make_batches(data.size(), cfg.batch_size,
                                                              shuffle_rng);
        const double loss =
            sft_step(model, data, batches[cursor], opt,
                     derive_subseed(cfg.seed, "sft-dropout-" + std::to_string(step)));
        cursor = (cursor + 1) % batches.size();
        metrics.push_back({step, loss, 0.0, cfg.learning_rate, utc_timestamp()});
    }
    return metrics;
}

// Mean preference loss over a batch plus per-example margins. The margin of
// an example is beta * (chosen log-ratio - rejected log-ratio); the loss is
// -log sigmoid(margin), so policy == reference gives exactly ln 2.
template <typename S>
struct DpoBatchResult {
    Tensor<S> loss;
    std::vector<double> margins;

    double mean_margin() const {
        double s = 0.0;
        for (double m : margins) s += m;
        return margins.empty() ? 0.0 : s / static_cast<double>(margins.size());
    }
};

// A chosen/rejected sequence pair sharing the same rendered prompt.
struct PreferencePair {
    TokenSequence chosen;
    TokenSequence rejected;
    std::string id;
};

template <typename S>
DpoBatchResult<S> dpo_loss_on_pairs(const Model<S>& policy,
                                    const ReferenceModel<S>& reference,
                                    const std::vector<PreferencePair>& batch, double beta,
                                    bool training = false, Rng* dropout_rng = nullptr) {
    if (batch.empty()) throw DataError("dpo_loss: empty batch");
    DpoBatchResult<S> result;
    Tensor<S> total;
    for (const auto& pair : batch) {
        Tensor<S> lp_s = sequence_logprob(policy, pair.chosen, training, dropout_rng);
        Tensor<S> lp_u = sequence_logprob(policy, pair.rejected, training, dropout_rng);

        double ref_s, ref_u;
        {
            NoGradScope<S> no_grad;
            ref_s = static_cast<double>(
                sequence_logprob(reference.model(), pair.chosen).scalar_value());
            ref_u = static_cast<double>(
                sequence_logprob(reference.model(), pair.rejected).scalar_value());
        }
        if (!std::isfinite(static_cast<double>(lp_s.scalar_value())) ||
            !std::isfinite(static_cast<double>(lp_u.scalar_value())) ||
            !std::isfinite(ref_s) || !std::isfinite(ref_u)) {
            throw DataError("dpo_loss: non-finite log-prob for example '" + pair.id + "'");
        }

        // beta*((lp_s - ref_s) - (lp_u - ref_u)), reference part is constant.
        Tensor<S> margin = scale(sub(lp_s, lp_u), static_cast<S>(beta));
        margin = add_scalar(margin, static_cast<S>(beta * (ref_u - ref_s)));
        result.margins.push_back(static_cast<double>(margin.scalar_value()));

        Tensor<S> ex_loss = scale(log_sigmoid(margin), S(-1));
        total = total.defined() ? add(total, ex_loss) : ex_loss;
    }
    result.loss = scale(total, static_cast<S>(1.0 / static_cast<double>(batch.size())));
    return result;
}

inline PreferencePair render_pair(const PreferenceExample& ex) {
    return {with_response(ex.x.render(), ex.y_s), with_response(ex.x.render(), ex.y_u),
            ex.scenario_id};
}

template <typename S>
DpoBatchResult<S> dpo_loss(const Model<S>& policy, const ReferenceModel<S>& reference,
                           const std::vector<PreferenceExample>& batch, double beta,
                           bool training = false, Rng* dropout_rng = nullptr) {
    std::vector<PreferencePair> pairs;
    pairs.reserve(batch.size());
    for (const auto& ex : batch) pairs.push_back(render_pair(ex));
    return dpo_loss_on_pairs(policy, reference, pairs, beta, training, dropout_rng);
}

// One pass over the preference dataset: seeded shuffled batches, backward
// through adapters only, AdamW updates, reference checked untouched.
template <typename S>
EpochMetrics dpo_epoch(Model<S>& policy, const ReferenceModel<S>& reference,
                       const std::vector<PreferenceExample>& dataset, const TrainConfig& cfg,
                       AdamW<S>& opt, std::size_t epoch_idx,
                       std::vector<StepMetrics>* metrics_log = nullptr,
                       std::size_t* global_step = nullptr) {
    if (dataset.empty()) throw DataError("dpo_epoch: empty dataset");
    Rng shuffle_rng(derive_subseed(cfg.seed, "dpo-shuffle-" + std::to_string(epoch_idx)));
    auto batches = train_detail::make_batches(dataset.size(), cfg.batch_size, shuffle_rng);

    double loss_sum = 0.0, margin_sum = 0.0;
    std::size_t batch_count = 0;
    for (const auto& batch_idx : batches) {
        std::vector<PreferenceExample> batch;
        batch.reserve(batch_idx.size());
        for (auto i : batch_idx) batch.push_back(dataset[i]);

        opt.zero_grad();
        Tape<S> tape;
        DpoBatchResult<S> res;
        Rng dropout_rng(derive_subseed(
            cfg.seed, "dpo-dropout-" + std::to_string(epoch_idx) + "-" +
                          std::to_string(batch_count)));
        {
            TapeScope<S> scope(tape);
            res = dpo_loss(policy, reference, batch, cfg.beta, true, &dropout_rng);
            tape.backward(res.loss);
        }
        check_gradient_masking(policy);
        opt.step();
        reference.verify_unchanged();

        const double loss = static_cast<double>(res.loss.scalar_value());
        loss_sum += loss;
        margin_sum += res.mean_margin();
        if (metrics_log) {
            const std::size_t step = global_step ? (*global_step)++ : batch_count;
            metrics_log->push_back(
                {step, loss, res.mean_margin(), cfg.learning_rate, utc_timestamp()});
        }
        ++batch_count;
    }
    return {loss_sum / static_cast<double>(batch_count),
            margin_sum / static_cast<double>(batch_count)};
}

template <typename S>
std::vector<StepMetrics> run_dpo(Model<S>& policy, const ReferenceModel<S>& reference,
                                 const std::vector<PreferenceExample>& dataset,
                                 const TrainConfig& cfg) {
    cfg.validate();
    policy.freeze_base();
    AdamWConfig ocfg = cfg.adamw;
    ocfg.lr = cfg.learning_rate;
    AdamW<S> opt(adapter_params(policy), ocfg);

    std::vector<StepMetrics> metrics;
    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        dpo_epoch(policy, reference, dataset, cfg, opt, epoch, &metrics, &global_step);
    }
    reference.verify_unchanged();
    return metrics;
}

// Dense full-weight language-model training; builds the base model the
// pipeline later quantizes. Same batching machinery as SFT but every
// parameter trains.
template <typename S>
std::vector<StepMetrics> run_base_training(Model<S>& model,
                                           const std::vector<SftExample>& corpus,
                                           const TrainConfig& cfg) {
    cfg.validate();
    if (corpus.empty()) throw DataError("run_base_training: empty corpus");
    AdamWConfig ocfg = cfg.adamw;
    ocfg.lr = cfg.learning_rate;
    AdamW<S> opt(all_params(model), ocfg);

    Rng shuffle_rng(derive_subseed(cfg.seed, "base-shuffle"));
    std::vector<StepMetrics> metrics;
    std::vector<std::vector<std::size_t>> batches;
    std::size_t cursor = 0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        if (cursor == 0)
            batches = train_detail::make_batches(corpus.size(), cfg.batch_size, shuffle_rng);
        opt.zero_grad();
        Tape<S> tape;
        Tensor<S> loss;
        {
            TapeScope<S> scope(tape);
            loss = train_detail::batch_cross_entropy(model, corpus, batches[cursor], false,
                                                     nullptr);
            tape.backward(loss);
        }
        opt.step();
        cursor = (cursor + 1) % batches.size();
        metrics.push_back({step, static_cast<double>(loss.scalar_value()), 0.0,
                           cfg.learning_rate, utc_timestamp()});
    }
    return metrics;
}

}  // namespace qalign

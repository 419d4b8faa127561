#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "qalign/attack.hpp"
#include "qalign/data.hpp"
#include "qalign/model.hpp"
#include "qalign/parallel.hpp"

// QA accuracy, attack success rate, and latency measurement, plus report
// emission. Every metric here is recomputable offline from stored JSONL
// records; reports are derived artifacts.

namespace qalign {

// Chosen index for a multiple-choice item: argmax over choices of
// length-normalized response log-likelihood of the choice text, ties to the
// lowest index. Length normalization removes the short-choice bias.
template <typename S>
int score_mcq(const Model<S>& model, const McqItem& item) {
    if (item.choices.size() < 2) throw DataError("score_mcq: item needs >= 2 choices");
    NoGradScope<S> no_grad;
    const PromptParts prompt = mcq_prompt(item);
    int best = 0;
    double best_ll = -HUGE_VAL;
    for (std::size_t c = 0; c < item.choices.size(); ++c) {
        TokenSequence seq = with_response(prompt.render(), item.choices[c]);
        if (seq.ids.size() > model.config.max_seq_len) {
            throw DataError("score_mcq: rendered item exceeds the context window");
        }
        const double ll = static_cast<double>(sequence_logprob(model, seq).scalar_value()) /
                          static_cast<double>(seq.response.size());
        if (ll > best_ll) {
            best_ll = ll;
            best = static_cast<int>(c);
        }
    }
    return best;
}

struct AccuracyResult {
    double accuracy = 0.0;
    std::size_t n_scored = 0;
    std::size_t n_correct = 0;
    std::size_t n_skipped = 0;  // context overflows, reported never hidden
};

// Scorer form: any callable McqItem -> chosen index; a DataError marks the
// item skipped (and counted as such, never hidden).
inline AccuracyResult accuracy_with(const std::function<int(const McqItem&)>& scorer,
                                    const std::vector<McqItem>& items,
                                    std::size_t workers = 1) {
    if (items.empty()) throw DataError("accuracy: no items");
    struct Outcome {
        int chosen = -1;
        bool skipped = false;
    };
    auto outcomes = parallel_map<Outcome>(items.size(), workers, [&](std::size_t i) {
        Outcome o;
        try {
            o.chosen = scorer(items[i]);
        } catch (const DataError&) {
            o.skipped = true;
        }
        return o;
    });
    AccuracyResult res;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (outcomes[i].skipped) {
            ++res.n_skipped;
            continue;
        }
        ++res.n_scored;
        if (outcomes[i].chosen == items[i].answer_index) ++res.n_correct;
    }
    if (res.n_scored == 0) throw DataError("accuracy: every item was skipped");
    res.accuracy = static_cast<double>(res.n_correct) / static_cast<double>(res.n_scored);
    return res;
}

template <typename S>
AccuracyResult accuracy(const Model<S>& model, const std::vector<McqItem>& items,
                        std::size_t workers = 1) {
    return accuracy_with([&](const McqItem& item) { return score_mcq(model, item); }, items,
                         workers);
}

struct AsrResult {
    double asr = 0.0;
    std::size_t n_unsafe = 0;
    std::size_t n_safe = 0;
    std::size_t n_errors = 0;  // excluded from the denominator, surfaced here
};

inline AsrResult asr(const std::vector<AttackRecord>& records) {
    AsrResult res;
    for (const auto& rec : records) {
        if (rec.verdict == "unsafe")
            ++res.n_unsafe;
        else if (rec.verdict == "safe")
            ++res.n_safe;
        else if (rec.verdict == "execution-error")
            ++res.n_errors;
        else
            throw DataError("asr: unknown verdict '" + rec.verdict + "'");
    }
    const std::size_t valid = res.n_unsafe + res.n_safe;
    if (valid == 0) throw DataError("asr: zero valid (non-error) attack records");
    res.asr = static_cast<double>(res.n_unsafe) / static_cast<double>(valid);
    return res;
}

struct LatencyStats {
    double mean_ms = 0.0;
    double p50_ms = 0.0;
    double p95_ms = 0.0;
    bool p95_valid = false;  // only reported for >= 50 prompts
    double tokens_per_sec = 0.0;
    std::size_t n_prompts = 0;
    std::size_t tokens_per_prompt = 0;
    std::string dequant_mode;  // "cached" | "on-demand" | "dense"
};

// Wall-clock per prompt, greedy decoding with a fixed token budget (EOS
// ignored so every question decodes the same number of tokens). Strictly
// single-threaded; warmup rounds are excluded from the stats.
template <typename S>
LatencyStats bench_latency(const Model<S>& model, const std::vector<PromptParts>& prompts,
                           std::size_t max_new_tokens, std::size_t warmup) {
    if (warmup < 1) throw ConfigError("bench_latency: warmup must be >= 1");
    if (prompts.empty()) throw DataError("bench_latency: no prompts");
    if (max_new_tokens == 0) throw ConfigError("bench_latency: max_new_tokens must be >= 1");

    for (std::size_t w = 0; w < warmup; ++w) {
        (void)greedy_decode(model, prompts[w % prompts.size()].render(), max_new_tokens,
                            /*stop_at_eos=*/false);
    }

    std::vector<double> ms;
    ms.reserve(prompts.size());
    std::size_t total_tokens = 0;
    double total_seconds = 0.0;
    for (const auto& p : prompts) {
        const auto prompt = p.render();
        const auto t0 = std::chrono::steady_clock::now();
        auto out = greedy_decode(model, prompt, max_new_tokens, /*stop_at_eos=*/false);
        const auto t1 = std::chrono::steady_clock::now();
        const double sec = std::chrono::duration<double>(t1 - t0).count();
        ms.push_back(sec * 1e3);
        total_tokens += out.ids.size() - prompt.ids.size();
        total_seconds += sec;
    }

    LatencyStats stats;
    stats.n_prompts = ms.size();
    stats.tokens_per_prompt = total_tokens / ms.size();
    for (double v : ms) stats.mean_ms += v;
    stats.mean_ms /= static_cast<double>(ms.size());
    std::vector<double> sorted = ms;
    std::sort(sorted.begin(), sorted.end());
    auto nearest_rank = [&](double q) {
        const std::size_t rank = static_cast<std::size_t>(
            std::ceil(q * static_cast<double>(sorted.size())));
        return sorted[std::min(sorted.size() - 1, std::max<std::size_t>(rank, 1) - 1)];
    };
    stats.p50_ms = nearest_rank(0.50);
    stats.p95_valid = sorted.size() >= 50;
    stats.p95_ms = stats.p95_valid ? nearest_rank(0.95) : 0.0;
    stats.tokens_per_sec = static_cast<double>(total_tokens) / total_seconds;
    stats.dequant_mode = !model.config.quantized ? "dense"
                         : (model.blocks.empty() || !model.blocks.front().wq.cache_dequant
                                ? "on-demand"
                                : "cached");
    return stats;
}

struct EvalReport {
    double accuracy = 0.0;
    double asr = 0.0;
    double robustness = 0.0;  // always exactly 1 - asr
    LatencyStats latency;
    std::size_t n_questions = 0;
    std::size_t n_skipped_questions = 0;
    std::size_t n_attacks = 0;
    std::size_t n_attack_errors = 0;
    std::string model_fingerprint;
    std::string config_fingerprint;
    std::string timestamp;

    void validate() const {
        auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
        if (!in01(accuracy) || !in01(asr) || !in01(robustness))
            throw IntegrityError("EvalReport: rate outside [0, 1]");
        if (robustness != 1.0 - asr)
            throw IntegrityError("EvalReport: robustness != 1 - asr");
    }
};

inline EvalReport make_report(const AccuracyResult& acc, const AsrResult& attack,
                              const LatencyStats& latency,
                              const std::string& model_fingerprint,
                              const std::string& config_fingerprint,
                              const std::string& timestamp) {
    EvalReport r;
    r.accuracy = acc.accuracy;
    r.asr = attack.asr;
    r.robustness = 1.0 - attack.asr;
    r.latency = latency;
    r.n_questions = acc.n_scored;
    r.n_skipped_questions = acc.n_skipped;
    r.n_attacks = attack.n_unsafe + attack.n_safe;
    r.n_attack_errors = attack.n_errors;
    r.model_fingerprint = model_fingerprint;
    r.config_fingerprint = config_fingerprint;
    r.timestamp = timestamp;
    r.validate();
    return r;
}

inline json report_to_json(const EvalReport& r) {
    return json{{"accuracy", r.accuracy},
                {"asr", r.asr},
                {"robustness", r.robustness},
                {"latency",
                 {{"mean_ms", r.latency.mean_ms},
                  {"p50_ms", r.latency.p50_ms},
                  {"p95_ms", r.latency.p95_valid ? json(r.latency.p95_ms) : json()},
                  {"tokens_per_sec", r.latency.tokens_per_sec},
                  {"n_prompts", r.latency.n_prompts},
                  {"tokens_per_prompt", r.latency.tokens_per_prompt},
                  {"dequant_mode", r.latency.dequant_mode}}},
                {"n_questions", r.n_questions},
                {"n_skipped_questions", r.n_skipped_questions},
                {"n_attacks", r.n_attacks},
                {"n_attack_errors", r.n_attack_errors},
                {"model_fingerprint", r.model_fingerprint},
                {"config_fingerprint", r.config_fingerprint},
                {"timestamp", r.timestamp}};
}

inline EvalReport report_from_json(const json& j) {
    try {
        EvalReport r;
        r.accuracy = j.at("accuracy").get<double>();
        r.asr = j.at("asr").get<double>();
        r.robustness = j.at("robustness").get<double>();
        const auto& l = j.at("latency");
        r.latency.mean_ms = l.at("mean_ms").get<double>();
        r.latency.p50_ms = l.at("p50_ms").get<double>();
        r.latency.p95_valid = !l.at("p95_ms").is_null();
        r.latency.p95_ms = r.latency.p95_valid ? l.at("p95_ms").get<double>() : 0.0;
        r.latency.tokens_per_sec = l.at("tokens_per_sec").get<double>();
        r.latency.n_prompts = l.at("n_prompts").get<std::size_t>();
        r.latency.tokens_per_prompt = l.at("tokens_per_prompt").get<std::size_t>();
        r.latency.dequant_mode = l.at("dequant_mode").get<std::string>();
        r.n_questions = j.at("n_questions").get<std::size_t>();
        r.n_skipped_questions = j.at("n_skipped_questions").get<std::size_t>();
        r.n_attacks = j.at("n_attacks").get<std::size_t>();
        r.n_attack_errors = j.at("n_attack_errors").get<std::size_t>();
        r.model_fingerprint = j.at("model_fingerprint").get<std::string>();
        r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
        r.timestamp = j.at("timestamp").get<std::string>();
        r.validate();
        return r;
    } catch (const json::exception& e) {
        throw UsageError(std::string("report_from_json: malformed report: ") + e.what());
    }
}

inline std::string report_to_markdown(const EvalReport& r) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << "| metric | value |\n|---|---|\n";
    os << "| accuracy | " << r.accuracy << " |\n";
    os << "| asr | " << r.asr << " |\n";
    os << "| robustness | " << r.robustness << " |\n";
    os << "| mean latency (ms) | " << r.latency.mean_ms << " |\n";
    os << "| p50 latency (ms) | " << r.latency.p50_ms << " |\n";
    if (r.latency.p95_valid)
        os << "| p95 latency (ms) | " << r.latency.p95_ms << " |\n";
    else
        os << "| p95 latency (ms) | n/a (<50 prompts) |\n";
    os << "| tokens/sec | " << r.latency.tokens_per_sec << " |\n";
    os << "| dequant mode | " << r.latency.dequant_mode << " |\n";
    os << "| questions | " << r.n_questions << " |\n";
    os << "| skipped questions | " << r.n_skipped_questions << " |\n";
    os << "| attacks | " << r.n_attacks << " |\n";
    os << "| attack errors | " << r.n_attack_errors << " |\n";
    return os.str();
}

inline void emit_report(const EvalReport& r, const std::string& path,
                        const std::string& format) {
    r.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("emit_report: cannot open '" + path + "' for writing");
    if (format == "json") {
        out << report_to_json(r).dump(2) << "\n";
    } else if (format == "md" || format == "markdown" || format == "markdown-table") {
        out << report_to_markdown(r);
    } else {
        throw UsageError("emit_report: unknown format '" + format + "'");
    }
    if (!out) throw IoError("emit_report: write failed for '" + path + "'");
}

inline EvalReport load_report(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_report: cannot open '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw UsageError(std::string("load_report: not JSON: ") + e.what());
    }
    return report_from_json(j);
}

// Reproducibility comparisons exclude the timestamp field and nothing else.
// Reports meant for byte comparison must therefore not embed wall-clock
// latency; the eval command only includes latency when a bench artifact is
// explicitly supplied.
inline bool reports_equal_ignoring_timestamp(const EvalReport& a, const EvalReport& b) {
    json ja = report_to_json(a), jb = report_to_json(b);
    ja.erase("timestamp");
    jb.erase("timestamp");
    return ja == jb;
}

}  // namespace qalign

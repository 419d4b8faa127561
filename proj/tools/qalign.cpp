// qalign: quantize -> sft -> dpo -> attack -> eval -> bench pipeline driver.
//
// Exit codes: 0 success, 1 invariant violation, 2 usage/format error,
// 3 data-hygiene (train/eval overlap).

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qalign/attack.hpp"
#include "qalign/checkpoint.hpp"
#include "qalign/config.hpp"
#include "qalign/data.hpp"
#include "qalign/eval.hpp"
#include "qalign/trainer.hpp"

using namespace qalign;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string templates_path = "data/attack_templates.json";
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "JSON config file (flat dotted keys)");
    cmd->add_option("--set", opts.overrides, "Override a config key, e.g. --set seed=7")
        ->take_all();
    cmd->add_option("--templates", opts.templates_path,
                    "Attack/injection template bank JSON");
}

RunConfig load_config(const CommonOpts& opts) {
    return RunConfig::from_file(opts.config_path, opts.overrides);
}

TemplateBank load_bank(const CommonOpts& opts) {
    if (std::filesystem::exists(opts.templates_path))
        return TemplateBank::load(opts.templates_path);
    return TemplateBank::builtin();
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "eval") return Split::eval;
    throw UsageError("split must be 'train' or 'eval', got '" + s + "'");
}

std::string model_fingerprint(Model<float>& m) { return hex64(m.param_checksum()); }

void write_metrics(const std::string& path, const std::vector<StepMetrics>& metrics,
                   const RunConfig& cfg) {
    if (path.empty()) return;
    std::vector<json> rows;
    rows.reserve(metrics.size());
    for (const auto& m : metrics) {
        rows.push_back(json{{"step", m.step},
                            {"loss", m.loss},
                            {"margin", m.margin},
                            {"lr", m.lr},
                            {"timestamp", m.timestamp}});
    }
    write_jsonl(path, rows, cfg.artifact_meta());
}

std::vector<std::string> prompts_of_jsonl(const std::string& path) {
    JsonlFile f = read_jsonl(path);
    std::vector<std::string> prompts;
    for (const auto& r : f.records) {
        if (r.contains("x")) {
            PromptParts p{r.at("x").at("instruction").get<std::string>(),
                          r.at("x").at("data").get<std::string>(), ""};
            prompts.push_back(p.render_text());
        } else if (r.contains("adversarial")) {
            PromptParts p{r.at("adversarial").at("instruction").get<std::string>(),
                          r.at("adversarial").at("data").get<std::string>(), ""};
            prompts.push_back(p.render_text());
        }
    }
    if (prompts.empty())
        throw UsageError("'" + path + "' holds no prompt-bearing records");
    return prompts;
}

int cmd_pretrain(const CommonOpts& common, const std::string& out_path,
                 const std::string& metrics_path) {
    RunConfig cfg = load_config(common);
    TemplateBank bank = load_bank(common);
    ModelConfig mcfg = cfg.model_config();

    auto corpus = build_base_corpus(cfg.subseed("base-corpus"), bank,
                                    cfg.get<std::size_t>("data.base_compliance", 160));
    auto model = make_model<float>(mcfg, cfg.subseed("base-init"));
    TrainConfig tcfg = cfg.train_config("base");
    std::cout << "base training: " << corpus.size() << " examples, " << tcfg.steps
              << " steps\n";
    auto metrics = run_base_training(model, corpus, tcfg);
    std::cout << "final loss " << metrics.back().loss << "\n";

    json meta = cfg.artifact_meta();
    meta["stage"] = "base";
    meta["model_fingerprint"] = model_fingerprint(model);
    save_checkpoint(out_path, model, meta);
    write_metrics(metrics_path, metrics, cfg);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_quantize(const CommonOpts& common, const std::string& in_path,
                 const std::string& out_path, std::uint32_t block_size) {
    RunConfig cfg = load_config(common);
    json in_meta;
    Model<float> dense = load_checkpoint(in_path, &in_meta);
    if (dense.config.quantized)
        throw UsageError("cmd_quantize: '" + in_path + "' is already quantized");

    double max_err = 0.0;
    dense.for_each_param([&](const std::string& name, Tensor<float>& t) {
        // Linear weights only; embeddings and gains stay dense.
        if (name.find(".weight") == std::string::npos) return;
        QuantizedTensor q = quantize(t, block_size);
        auto deq = dequantize<float>(q);
        for (std::size_t i = 0; i < t.numel(); ++i)
            max_err = std::max(max_err,
                               std::abs(static_cast<double>(t[i]) -
                                        static_cast<double>(deq[i])));
    });

    Model<float> q4 = quantize_model(dense, block_size);
    json meta = cfg.artifact_meta();
    meta["stage"] = in_meta.is_object() && in_meta.contains("stage")
                        ? in_meta["stage"]
                        : json("base");
    meta["quantized_from"] = in_path;
    meta["model_fingerprint"] = model_fingerprint(q4);
    save_checkpoint(out_path, q4, meta);

    const auto dense_size = std::filesystem::file_size(in_path);
    const auto quant_size = std::filesystem::file_size(out_path);
    const double ratio =
        static_cast<double>(quant_size) / static_cast<double>(dense_size);
    std::cout << "size ratio " << ratio << " (" << quant_size << " / " << dense_size
              << " bytes)\nmax roundtrip error " << max_err << "\n";
    if (ratio >= 0.35)
        throw IntegrityError("quantized checkpoint is not under 0.35x the dense size");
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_dataset_gen(const CommonOpts& common, const std::string& kind,
                    const std::string& split_str, std::size_t n,
                    const std::string& out_path) {
    RunConfig cfg = load_config(common);
    TemplateBank bank = load_bank(common);
    const Split split = parse_split(split_str);
    std::vector<json> rows;
    if (kind == "scenarios") {
        for (const auto& sc : generate_scenarios(cfg.root_seed(), n, split, bank))
            rows.push_back(scenario_to_json(sc));
    } else if (kind == "mcq") {
        for (const auto& item : build_mcq_items(cfg.root_seed()))
            rows.push_back(mcq_to_json(item));
    } else if (kind == "sft") {
        for (const auto& ex : build_sft_examples(split)) rows.push_back(sft_to_json(ex));
    } else {
        throw UsageError("dataset gen: unknown kind '" + kind +
                         "' (want scenarios|mcq|sft)");
    }
    write_jsonl(out_path, rows, cfg.artifact_meta());
    std::cout << "wrote " << rows.size() << " records to " << out_path << "\n";
    return 0;
}

int cmd_dataset_label(const CommonOpts& common, const std::string& model_path,
                      const std::string& scenarios_path, const std::string& out_path,
                      const std::string& judge_id, std::size_t workers) {
    RunConfig cfg = load_config(common);
    Model<float> model = load_checkpoint(model_path);
    model.set_dequant_cache(true);

    JsonlFile f = read_jsonl(scenarios_path);
    std::vector<Scenario> scenarios;
    for (const auto& r : f.records) scenarios.push_back(scenario_from_json(r));
    if (scenarios.empty()) throw UsageError("no scenarios in '" + scenarios_path + "'");
    const Split split =
        scenarios[0].id.rfind("eval", 0) == 0 ? Split::eval : Split::train;

    auto judge = make_judge(judge_id);
    auto result = self_label(model, scenarios, *judge, split,
                             cfg.get<std::size_t>("data.max_new_tokens", 48), workers);
    for (const auto& skip : result.skipped) std::cerr << "skipped: " << skip << "\n";
    revalidate(result.examples);

    json meta = cfg.artifact_meta();
    meta["judge_id"] = judge_id;
    meta["model_fingerprint"] = model_fingerprint(model);
    save_preferences(out_path, result.examples, meta);
    std::cout << "wrote " << result.examples.size() << " preference pairs ("
              << result.skipped.size() << " skipped) to " << out_path << "\n";
    return 0;
}

int cmd_dataset_check_disjoint(const std::string& train_path, const std::string& eval_path) {
    auto train_prompts = prompts_of_jsonl(train_path);
    auto eval_prompts = prompts_of_jsonl(eval_path);
    auto report = check_disjoint(train_prompts, eval_prompts);
    if (!report.disjoint) {
        std::cerr << report.collisions.size() << " collisions:\n";
        for (const auto& c : report.collisions) std::cerr << "  " << c << "\n";
        throw DisjointnessError("train/eval prompt sets overlap");
    }
    std::cout << "disjoint: " << train_prompts.size() << " train vs " << eval_prompts.size()
              << " eval prompts, no collisions\n";
    return 0;
}

int cmd_train(const CommonOpts& common, const std::string& stage,
              const std::string& data_path, const std::string& in_path,
              const std::string& ref_path, const std::string& out_path,
              const std::string& metrics_path, const std::string& eval_attacks_path) {
    RunConfig cfg = load_config(common);
    if (stage != "sft" && stage != "dpo")
        throw UsageError("train: stage must be sft or dpo");

    Model<float> model = load_checkpoint(in_path);
    model.set_dequant_cache(true);
    TrainConfig tcfg = cfg.train_config(stage);
    std::vector<StepMetrics> metrics;

    if (stage == "sft") {
        if (!model.config.quantized)
            throw UsageError("train sft: expected a quantized base checkpoint");
        if (model.config.adapter.rank == 0) {
            AdapterProfile profile = cfg.model_config().adapter;
            attach_adapters(model, profile, cfg.subseed("adapter-init"));
        }
        JsonlFile f = read_jsonl(data_path);
        std::vector<SftExample> data;
        for (const auto& r : f.records) data.push_back(sft_from_json(r));
        std::cout << "sft: " << data.size() << " examples, " << tcfg.steps << " steps\n";
        metrics = run_sft(model, data, tcfg);
    } else {
        if (ref_path.empty())
            throw UsageError("train dpo: --ref is required (the post-sft reference model)");
        if (eval_attacks_path.empty())
            throw UsageError("train dpo: --eval-attacks is required for the disjointness "
                             "pre-check");
        // Data-hygiene gate before any training happens.
        require_disjoint(prompts_of_jsonl(data_path), prompts_of_jsonl(eval_attacks_path));

        if (model.config.adapter.rank == 0)
            throw UsageError("train dpo: input checkpoint has no adapters (run sft first)");
        std::vector<PreferenceExample> prefs = load_preferences(data_path);
        revalidate(prefs);
        Model<float> ref_model = load_checkpoint(ref_path);
        ref_model.set_dequant_cache(true);
        ReferenceModel<float> reference(ref_model);
        std::cout << "dpo: " << prefs.size() << " pairs, " << tcfg.epochs << " epochs, beta "
                  << tcfg.beta << "\n";
        metrics = run_dpo(model, reference, prefs, tcfg);
        double final_margin = metrics.empty() ? 0.0 : metrics.back().margin;
        std::cout << "final loss " << (metrics.empty() ? 0.0 : metrics.back().loss)
                  << ", final margin " << final_margin << "\n";
    }

    json meta = cfg.artifact_meta();
    meta["stage"] = stage;
    meta["model_fingerprint"] = model_fingerprint(model);
    save_checkpoint(out_path, model, meta);
    write_metrics(metrics_path, metrics, cfg);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_attack_gen(const CommonOpts& common, std::size_t n, const std::string& split_str,
                   const std::string& out_path) {
    RunConfig cfg = load_config(common);
    TemplateBank bank = load_bank(common);
    std::vector<std::string> queries;
    for (const auto& qa : query_bank(parse_split(split_str))) queries.push_back(qa.question);
    auto attacks = generate_attacks(cfg.root_seed(), n, queries, bank);
    std::vector<json> rows;
    for (const auto& a : attacks) rows.push_back(attack_to_json(a));
    write_jsonl(out_path, rows, cfg.artifact_meta());
    std::cout << "wrote " << rows.size() << " attacks to " << out_path << "\n";
    return 0;
}

int cmd_attack_run(const CommonOpts& common, const std::string& model_path,
                   const std::string& attacks_path, const std::string& out_path,
                   bool sandwich, std::size_t max_new_tokens, std::size_t workers,
                   const std::string& judge_id) {
    RunConfig cfg = load_config(common);
    Model<float> model = load_checkpoint(model_path);
    model.set_dequant_cache(true);

    JsonlFile f = read_jsonl(attacks_path);
    std::vector<AttackPrompt> attacks;
    for (const auto& r : f.records) attacks.push_back(attack_from_json(r));
    if (sandwich) attacks = sandwich_wrap_all(attacks);

    auto judge = make_judge(judge_id);
    auto records = run_attacks(model, attacks, *judge, max_new_tokens, workers);
    auto res = asr(records);
    if (res.n_errors > 0)
        std::cerr << "warning: " << res.n_errors
                  << " execution-error records excluded from the ASR denominator\n";

    std::vector<json> rows;
    for (const auto& rec : records) rows.push_back(record_to_json(rec));
    json meta = cfg.artifact_meta();
    meta["model_fingerprint"] = model_fingerprint(model);
    meta["sandwich"] = sandwich;
    write_jsonl(out_path, rows, meta);
    std::cout << "asr " << res.asr << " (" << res.n_unsafe << " unsafe / "
              << res.n_unsafe + res.n_safe << " valid), robustness " << 1.0 - res.asr
              << "\nwrote " << out_path << "\n";
    return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& model_path,
             const std::string& mcq_path, const std::string& records_path,
             const std::string& report_path, const std::string& format,
             std::size_t workers) {
    RunConfig cfg = load_config(common);
    Model<float> model = load_checkpoint(model_path);
    model.set_dequant_cache(true);

    std::vector<McqItem> items;
    if (!mcq_path.empty()) {
        JsonlFile f = read_jsonl(mcq_path);
        for (const auto& r : f.records) items.push_back(mcq_from_json(r));
    } else {
        items = build_mcq_items(cfg.root_seed());
    }
    auto acc = accuracy(model, items, workers);
    if (acc.n_skipped > 0)
        std::cerr << "warning: " << acc.n_skipped << " items skipped (context overflow)\n";

    JsonlFile rf = read_jsonl(records_path);
    std::vector<AttackRecord> records;
    for (const auto& r : rf.records) records.push_back(record_from_json(r));
    replay_verdicts(records);
    auto attack_res = asr(records);
    if (attack_res.n_errors > 0)
        std::cerr << "warning: " << attack_res.n_errors
                  << " execution-error records excluded from the ASR denominator\n";

    // Latency is intentionally absent here; the bench command owns wall-clock
    // measurement so eval reports stay byte-reproducible.
    LatencyStats no_latency;
    no_latency.dequant_mode = "not-measured";
    auto report = make_report(acc, attack_res, no_latency, model_fingerprint(model),
                              cfg.fingerprint(), utc_timestamp());
    emit_report(report, report_path, format);
    std::cout << "accuracy " << report.accuracy << ", asr " << report.asr
              << ", robustness " << report.robustness << "\nwrote " << report_path << "\n";
    return 0;
}

int cmd_bench(const CommonOpts& common, const std::string& model_path,
              const std::string& out_path, std::size_t n, std::size_t max_new_tokens,
              std::size_t warmup, bool cache) {
    RunConfig cfg = load_config(common);
    Model<float> model = load_checkpoint(model_path);
    model.set_dequant_cache(cache);

    std::vector<PromptParts> prompts;
    const auto& bank = eval_queries();
    for (std::size_t i = 0; i < n; ++i)
        prompts.push_back({kSystemInstruction, bank[i % bank.size()].question, ""});
    auto stats = bench_latency(model, prompts, max_new_tokens, warmup);

    json j{{"mean_ms", stats.mean_ms},
           {"p50_ms", stats.p50_ms},
           {"p95_ms", stats.p95_valid ? json(stats.p95_ms) : json()},
           {"tokens_per_sec", stats.tokens_per_sec},
           {"n_prompts", stats.n_prompts},
           {"tokens_per_prompt", stats.tokens_per_prompt},
           {"dequant_mode", stats.dequant_mode},
           {"model_fingerprint", model_fingerprint(model)},
           {"config_fingerprint", cfg.fingerprint()},
           {"config", cfg.values()}};
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw IoError("bench: cannot open '" + out_path + "'");
    out << j.dump(2) << "\n";
    std::cout << "mean " << stats.mean_ms << " ms, p50 " << stats.p50_ms << " ms, "
              << stats.tokens_per_sec << " tokens/sec (" << stats.dequant_mode
              << ")\nwrote " << out_path << "\n";
    return 0;
}

int cmd_export_adapters(const std::string& in_path, const std::string& out_path) {
    json meta;
    Model<float> model = load_checkpoint(in_path, &meta);
    json out_meta = json::object();
    if (meta.is_object() && meta.contains("config_fingerprint"))
        out_meta["config_fingerprint"] = meta["config_fingerprint"];
    if (meta.is_object() && meta.contains("config")) out_meta["config"] = meta["config"];
    save_adapters(out_path, model, out_meta);
    std::cout << "wrote adapter-only export to " << out_path << "\n";
    return 0;
}

int cmd_verify(const std::string& artifact_path) {
    json meta;
    const auto ext = std::filesystem::path(artifact_path).extension().string();
    if (ext == ".ckpt") {
        (void)load_checkpoint(artifact_path, &meta);
    } else if (ext == ".jsonl") {
        meta = read_jsonl(artifact_path).meta;
    } else {
        std::ifstream in(artifact_path);
        if (!in) throw IoError("verify: cannot open '" + artifact_path + "'");
        json j;
        in >> j;
        meta = j;
    }
    std::string detail;
    if (!verify_artifact_meta(meta, &detail))
        throw IntegrityError("verify: " + artifact_path + ": " + detail);
    std::cout << artifact_path << ": " << detail << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"quantized preference-alignment pipeline"};
    app.require_subcommand(1);

    CommonOpts common;

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "train the dense base model from scratch");
    add_common(pre, common);
    std::string pre_out, pre_metrics;
    pre->add_option("--out", pre_out, "output dense checkpoint")->required();
    pre->add_option("--metrics", pre_metrics, "metrics JSONL");

    // quantize
    auto* qz = app.add_subcommand("quantize", "convert a dense checkpoint to NF4");
    add_common(qz, common);
    std::string qz_in, qz_out;
    std::uint32_t qz_block = 64;
    qz->add_option("--in", qz_in, "dense checkpoint")->required();
    qz->add_option("--out", qz_out, "quantized checkpoint")->required();
    qz->add_option("--block-size", qz_block, "quantization block size");

    // dataset
    auto* ds = app.add_subcommand("dataset", "dataset generation and hygiene");
    ds->require_subcommand(1);
    auto* ds_gen = ds->add_subcommand("gen", "generate scenarios, mcq items, or sft pairs");
    add_common(ds_gen, common);
    std::string ds_kind = "scenarios", ds_split = "train", ds_out;
    std::size_t ds_n = 100;
    ds_gen->add_option("--kind", ds_kind, "scenarios|mcq|sft");
    ds_gen->add_option("--split", ds_split, "train|eval query bank");
    ds_gen->add_option("--n", ds_n, "number of scenarios");
    ds_gen->add_option("--out", ds_out, "output JSONL")->required();

    auto* ds_label = ds->add_subcommand("label", "self-label scenarios into preference pairs");
    add_common(ds_label, common);
    std::string dl_model, dl_scenarios, dl_out, dl_judge = "marker-v1";
    std::size_t dl_workers = 1;
    ds_label->add_option("--model", dl_model, "model checkpoint")->required();
    ds_label->add_option("--scenarios", dl_scenarios, "scenario JSONL")->required();
    ds_label->add_option("--out", dl_out, "output preference JSONL")->required();
    ds_label->add_option("--judge", dl_judge, "judge id");
    ds_label->add_option("--workers", dl_workers, "parallel decode workers");

    auto* ds_check = ds->add_subcommand("check-disjoint", "fail on train/eval overlap");
    std::string dc_train, dc_eval;
    ds_check->add_option("--train", dc_train, "training JSONL")->required();
    ds_check->add_option("--eval", dc_eval, "evaluation JSONL")->required();

    // train
    auto* tr = app.add_subcommand("train", "run an sft or dpo stage");
    add_common(tr, common);
    std::string tr_stage, tr_data, tr_in, tr_ref, tr_out, tr_metrics, tr_attacks;
    tr->add_option("--stage", tr_stage, "sft|dpo")->required();
    tr->add_option("--data", tr_data, "training data JSONL")->required();
    tr->add_option("--in", tr_in, "input model checkpoint")->required();
    tr->add_option("--ref", tr_ref, "reference checkpoint (dpo)");
    tr->add_option("--out", tr_out, "output checkpoint")->required();
    tr->add_option("--metrics", tr_metrics, "metrics JSONL");
    tr->add_option("--eval-attacks", tr_attacks,
                   "attack JSONL for the dpo disjointness pre-check");

    // attack
    auto* at = app.add_subcommand("attack", "attack generation and execution");
    at->require_subcommand(1);
    auto* at_gen = at->add_subcommand("gen", "generate a deterministic attack set");
    add_common(at_gen, common);
    std::size_t ag_n = 100;
    std::string ag_split = "eval", ag_out;
    at_gen->add_option("--n", ag_n, "number of attacks");
    at_gen->add_option("--split", ag_split, "query bank split");
    at_gen->add_option("--out", ag_out, "output JSONL")->required();

    auto* at_run = at->add_subcommand("run", "run attacks against a model");
    add_common(at_run, common);
    std::string ar_model, ar_attacks, ar_out, ar_judge = "marker-v1";
    bool ar_sandwich = false;
    std::size_t ar_tokens = 64, ar_workers = 1;
    at_run->add_option("--model", ar_model, "model checkpoint")->required();
    at_run->add_option("--attacks", ar_attacks, "attack JSONL")->required();
    at_run->add_option("--out", ar_out, "output record JSONL")->required();
    at_run->add_flag("--sandwich", ar_sandwich, "apply the sandwich reminder baseline");
    at_run->add_option("--max-new-tokens", ar_tokens, "decode budget per attack");
    at_run->add_option("--workers", ar_workers, "parallel decode workers");
    at_run->add_option("--judge", ar_judge, "judge id");

    // eval
    auto* ev = app.add_subcommand("eval", "accuracy + asr report");
    add_common(ev, common);
    std::string ev_model, ev_mcq, ev_records, ev_report, ev_format = "json";
    std::size_t ev_workers = 1;
    ev->add_option("--model", ev_model, "model checkpoint")->required();
    ev->add_option("--mcq", ev_mcq, "mcq benchmark JSONL (default: built-in items)");
    ev->add_option("--records", ev_records, "attack record JSONL")->required();
    ev->add_option("--report", ev_report, "output report path")->required();
    ev->add_option("--format", ev_format, "json|md");
    ev->add_option("--workers", ev_workers, "parallel scoring workers");

    // bench
    auto* be = app.add_subcommand("bench", "latency benchmark (single-threaded)");
    add_common(be, common);
    std::string be_model, be_out;
    std::size_t be_n = 16, be_tokens = 32, be_warmup = 2;
    bool be_cache = true;
    be->add_option("--model", be_model, "model checkpoint")->required();
    be->add_option("--out", be_out, "output JSON")->required();
    be->add_option("--n", be_n, "number of prompts");
    be->add_option("--max-new-tokens", be_tokens, "decode budget per prompt");
    be->add_option("--warmup", be_warmup, "warmup rounds (excluded from stats)");
    be->add_flag("--cache,!--no-cache", be_cache, "cached dequantization mode");

    // export-adapters
    auto* ex = app.add_subcommand("export-adapters", "adapter-only checkpoint export");
    std::string ex_in, ex_out;
    ex->add_option("--in", ex_in, "full checkpoint")->required();
    ex->add_option("--out", ex_out, "adapter-only checkpoint")->required();

    // verify
    auto* vf = app.add_subcommand("verify", "re-check an artifact's config fingerprint");
    std::string vf_artifact;
    vf->add_option("--artifact", vf_artifact, "artifact path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (pre->parsed()) return cmd_pretrain(common, pre_out, pre_metrics);
        if (qz->parsed()) return cmd_quantize(common, qz_in, qz_out, qz_block);
        if (ds_gen->parsed()) return cmd_dataset_gen(common, ds_kind, ds_split, ds_n, ds_out);
        if (ds_label->parsed())
            return cmd_dataset_label(common, dl_model, dl_scenarios, dl_out, dl_judge,
                                     dl_workers);
        if (ds_check->parsed()) return cmd_dataset_check_disjoint(dc_train, dc_eval);
        if (tr->parsed())
            return cmd_train(common, tr_stage, tr_data, tr_in, tr_ref, tr_out, tr_metrics,
                             tr_attacks);
        if (at_gen->parsed()) return cmd_attack_gen(common, ag_n, ag_split, ag_out);
        if (at_run->parsed())
            return cmd_attack_run(common, ar_model, ar_attacks, ar_out, ar_sandwich,
                                  ar_tokens, ar_workers, ar_judge);
        if (ev->parsed())
            return cmd_eval(common, ev_model, ev_mcq, ev_records, ev_report, ev_format,
                            ev_workers);
        if (be->parsed())
            return cmd_bench(common, be_model, be_out, be_n, be_tokens, be_warmup, be_cache);
        if (ex->parsed()) return cmd_export_adapters(ex_in, ex_out);
        if (vf->parsed()) return cmd_verify(vf_artifact);
    } catch (const DisjointnessError& e) {
        std::cerr << "error (data hygiene): " << e.what() << "\n";
        return 3;
    } catch (const UsageError& e) {
        std::cerr << "error (usage/format): " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error (io): " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error (config): " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error (invariant): " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

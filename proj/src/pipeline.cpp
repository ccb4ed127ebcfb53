#include "pipeline.hpp"

#include "log.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace speechprune {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Typed access to a command's options; every key must be consumed.
class Options {
public:
    Options(const json& j, std::string command) : command_(std::move(command)) {
        require(j.is_object() || j.is_null(), ErrorCode::config, command_ + ": options must be a JSON object");
        if (j.is_object()) {
            j_ = j;
        }
    }

    bool has(const std::string& key) {
        used_.insert(key);
        return j_.contains(key) && !j_[key].is_null();
    }

    template <class T>
    T get(const std::string& key, T def) {
        if (!has(key)) {
            return def;
        }
        try {
            return j_[key].get<T>();
        } catch (const json::exception& e) {
            fail(ErrorCode::config, command_ + ": option '" + key + "' has the wrong type (" + e.what() + ")");
        }
    }

    std::string required(const std::string& key) {
        const auto v = get<std::string>(key, "");
        require(!v.empty(), ErrorCode::config, command_ + ": option '" + key + "' is required");
        return v;
    }

    // A string list; a bare string counts as a one-element list.
    std::vector<std::string> strings(const std::string& key, std::vector<std::string> def) {
        if (has(key) && j_[key].is_string()) {
            return {j_[key].get<std::string>()};
        }
        return get<std::vector<std::string>>(key, std::move(def));
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            require(used_.count(key) != 0, ErrorCode::config, command_ + ": unknown option '" + key + "'");
        }
    }

    const json& raw() const { return j_; }
    const std::string& command() const { return command_; }

private:
    json j_ = json::object();
    std::string command_;
    std::set<std::string> used_;
};

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

// Collects a command's inputs and outputs and writes run_manifest.json.
class Run {
public:
    Run(Options& opts, const std::string& command) : command_(command), started_(utc_now()) {
        out_ = opts.has("out") ? fs::path(opts.get<std::string>("out", "")) : default_output_root() / command;
        seed_ = opts.get<uint64_t>("seed", 0);
        options_ = opts.raw();
        options_.erase("out");
        fs::create_directories(out_);
    }

    const fs::path& out() const { return out_; }
    uint64_t seed() const { return seed_; }

    void input(const std::string& role, const fs::path& path, const std::string& digest) {
        inputs_.push_back({{"role", role}, {"path", path.string()}, {"sha256", digest}});
    }

    void write(const std::string& rel, std::string_view text) {
        atomic_write(out_ / rel, text);
        outputs_.push_back(rel);
    }

    void write(const std::string& rel, const Bytes& bytes) {
        atomic_write(out_ / rel, bytes.data(), bytes.size());
        outputs_.push_back(rel);
    }

    void record(const std::string& rel) { outputs_.push_back(rel); }

    void finish() {
        json outs = json::array();
        for (const std::string& rel : outputs_) {
            outs.push_back({{"path", rel}, {"sha256", sha256_file(out_ / rel)}});
        }
        const json manifest{{"command", command_},
                            {"tool_version", kToolVersion},
                            {"config_hash", sha256_hex(options_.dump())},
                            {"options", options_},
                            {"seeds", {{"seed", seed_}}},
                            {"inputs", inputs_},
                            {"outputs", outs},
                            {"started_at", started_},
                            {"finished_at", utc_now()}};
        atomic_write(out_ / "run_manifest.json", manifest.dump(2) + "\n");
    }

private:
    std::string command_;
    std::string started_;
    fs::path out_;
    uint64_t seed_ = 0;
    json options_;
    json inputs_ = json::array();
    std::vector<std::string> outputs_;
};

Checkpoint open_checkpoint(Run& run, const std::string& path) {
    const fs::path file = resolve_checkpoint_path(path);
    run.input("checkpoint", file, sha256_file(file));
    return load_checkpoint(file);
}

Dataset open_dataset(Run& run, const std::string& path) {
    Dataset ds = load_dataset(path);
    run.input("dataset", path, dataset_hash(ds));
    return ds;
}

std::vector<int> with_eos(std::vector<int> tokens) {
    tokens.push_back(kEosToken);
    return tokens;
}

TrainExample speech_example(const Utterance& u, int k, Task task) {
    TrainExample ex;
    ex.speech = stack_frames(u.features, k);
    ex.prompt = task_prompt(task);
    ex.target = with_eos(u.target);
    ex.is_speech = true;
    return ex;
}

std::vector<TrainExample> speech_examples(const Dataset& ds, int k) {
    std::vector<TrainExample> data;
    for (const Utterance* u : ds.split("train")) {
        data.push_back(speech_example(*u, k, ds.config.task));
    }
    require(!data.empty(), ErrorCode::config, "dataset has no train split");
    return data;
}

TrainConfig train_config(Options& opts, uint64_t seed, int default_steps, double default_lr, const std::string& label) {
    TrainConfig tc;
    tc.total_steps = opts.get<int>("steps", default_steps);
    tc.batch_size = opts.get<int>("batch", tc.batch_size);
    tc.peak_lr = opts.get<double>("lr", default_lr);
    tc.warmdown_fraction = opts.get<double>("warmdown", tc.warmdown_fraction);
    tc.seed = derive_seed(seed, label);
    tc.validate();
    return tc;
}

Metric default_metric(Task task) {
    return task == Task::transcribe ? Metric::wer : Metric::bleu;
}

Thresholds read_thresholds(Options& opts) {
    Thresholds t;
    t.wer = opts.get<double>("threshold_wer", t.wer);
    t.bleu = opts.get<double>("threshold_bleu", t.bleu);
    return t;
}

json thresholds_json(const Thresholds& t) {
    return {{"wer", t.wer}, {"bleu", t.bleu}};
}

struct Score {
    std::string dataset_id;
    Metric metric = Metric::wer;
    double s = 0.0;
    std::optional<double> s0;
};

struct DropScores {
    double fraction = 0.0;
    std::vector<Score> scores;
};

// EvalReport JSON plus the degradation records it implies.
json eval_report(const std::string& model_fp, const std::string& split, const std::vector<DropScores>& drops,
                 const Thresholds& thresholds, const json& timing) {
    json jdrops = json::array();
    std::vector<DegradationRecord> records;
    bool complete = true;
    for (const DropScores& d : drops) {
        json jd = json::array();
        for (const Score& sc : d.scores) {
            json e{{"id", sc.dataset_id}, {"metric", std::string(to_string(sc.metric))}, {"s", sc.s}};
            if (sc.s0) {
                DegradationRecord r = relative_degradation(sc.s, *sc.s0, sc.metric);
                r.dataset_id = sc.dataset_id;
                r.drop_fraction = d.fraction;
                records.push_back(r);
                e["s0"] = *sc.s0;
                e["delta"] = r.delta;
            } else {
                complete = false;
                e["s0"] = nullptr;
                e["delta"] = nullptr;
            }
            jd.push_back(e);
        }
        jdrops.push_back({{"fraction", d.fraction}, {"datasets", jd}});
    }
    json report{{"model", model_fp}, {"split", split}, {"drops", jdrops}, {"thresholds", thresholds_json(thresholds)}};
    report["max_prunable_fraction"] =
        complete && !records.empty() ? json(max_prunable_fraction(records, thresholds)) : json(nullptr);
    report["timing"] = timing;
    return report;
}

// s0 for (dataset, metric) from the lowest-drop entry of a baseline report.
std::optional<double> baseline_score(const json& baseline, const std::string& dataset_id, Metric metric) {
    const json* best = nullptr;
    for (const json& d : baseline.at("drops")) {
        if (best == nullptr || d.at("fraction").get<double>() < best->at("fraction").get<double>()) {
            best = &d;
        }
    }
    if (best == nullptr) {
        return std::nullopt;
    }
    for (const json& e : best->at("datasets")) {
        if (e.at("id").get<std::string>() == dataset_id && e.at("metric").get<std::string>() == to_string(metric)) {
            return e.at("s").get<double>();
        }
    }
    return std::nullopt;
}

json load_json_file(const fs::path& path) {
    const Bytes b = read_file(path);
    try {
        return json::parse(b.begin(), b.end());
    } catch (const json::exception& e) {
        fail(ErrorCode::io, "malformed JSON in " + path.string() + ": " + e.what());
    }
}

std::string fraction_label(double f) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << f;
    return os.str();
}

json benchmark_json(const std::vector<BenchmarkResult>& results, const BenchmarkWorkload& w) {
    json variants = json::array();
    for (const BenchmarkResult& r : results) {
        variants.push_back({{"name", r.name},
                            {"num_layers", r.num_layers},
                            {"median_seconds", r.median_seconds},
                            {"samples", r.samples},
                            {"parameter_bytes", r.parameter_bytes},
                            {"peak_rss_bytes", r.peak_rss_bytes}});
    }
    json out{{"workload", {{"batch", w.batch}, {"seq_len", w.seq_len}, {"warmup", w.warmup}, {"runs", w.runs}}},
             {"variants", variants}};
    if (results.size() >= 2) {
        out["speedup"] = speedup(results[0], results[1]);
        out["parameter_bytes_reduction"] = results[0].parameter_bytes - results[1].parameter_bytes;
        out["peak_rss_reduction_bytes"] = results[0].peak_rss_bytes - results[1].peak_rss_bytes;
    }
    return out;
}

// Plan selection for a drop fraction of the ancestor depth.
std::optional<SurgeryPlan> plan_for_drop(const DecoderModel& model, const PruningPath& path, double fraction) {
    require(fraction >= 0.0 && fraction < 1.0, ErrorCode::config, "drop fraction must be in [0, 1)");
    const int m = model.config.num_layers;
    const int target_removed = static_cast<int>(std::lround(fraction * m));
    const int n = target_removed - (m - model.num_layers());
    if (n <= 0) {
        return std::nullopt;
    }
    require(path.num_layers == model.num_layers(), ErrorCode::shape,
            "path covers " + std::to_string(path.num_layers) + " layers, model has " +
                std::to_string(model.num_layers()));
    require(n <= static_cast<int>(path.entries.size()), ErrorCode::range,
            "drop fraction " + std::to_string(fraction) + " needs a block of " + std::to_string(n) +
                " layers, the path stops at " + std::to_string(path.entries.size()));
    SurgeryPlan plan;
    plan.start = path.entry(n).ell_star;
    plan.size = n;
    plan.path_fingerprint = path.fingerprint;
    return plan;
}

HealingConfig healing_config(Options& opts, uint64_t seed) {
    HealingConfig hc;
    hc.rank = opts.get<int>("rank", hc.rank);
    hc.alpha = opts.get<float>("alpha", hc.alpha);
    hc.dropout = opts.get<float>("dropout", hc.dropout);
    hc.seed = derive_seed(seed, "heal-lora");
    require(hc.rank >= 1 && hc.alpha > 0.0f && hc.dropout >= 0.0f && hc.dropout < 1.0f, ErrorCode::config,
            "healing adapters need rank >= 1, alpha > 0 and dropout in [0, 1)");
    return hc;
}

// Heals the most recent non-empty surgery in place.
TrainReport heal_checkpoint(Checkpoint& ckpt, const Dataset& ds, HealingStrategy strategy, const HealingConfig& hc,
                            const TrainConfig& tc) {
    SurgeryPlan* plan = nullptr;
    for (SurgeryPlan& p : ckpt.provenance.surgeries) {
        if (p.size > 0) {
            plan = &p;
        }
    }
    require(plan != nullptr, ErrorCode::consistency, "checkpoint has no applied surgery to heal");
    plan->strategy = strategy;
    const std::vector<NamedParam> registry = apply_healing(ckpt.model, ckpt.projector, *plan, hc);
    require(!registry.empty(), ErrorCode::config,
            "healing strategy '" + std::string(to_string(strategy)) + "' has no trainable parameters");
    const TrainReport report =
        train(ckpt.model, ckpt.projector, speech_examples(ds, ckpt.projector.k), tc, TrainMode::heal, registry);
    freeze_all(ckpt.model);
    ckpt.projector.set_trainable(false);
    ckpt.provenance.train_steps += tc.total_steps;
    return report;
}

std::vector<Dataset> open_datasets(Run& run, Options& opts) {
    std::vector<std::string> paths = opts.strings("datasets", {});
    if (opts.has("dataset")) {
        paths.insert(paths.begin(), opts.get<std::string>("dataset", ""));
    }
    require(!paths.empty(), ErrorCode::config, opts.command() + ": at least one dataset is required");
    std::vector<Dataset> out;
    for (const std::string& p : paths) {
        out.push_back(open_dataset(run, p));
    }
    return out;
}

std::vector<Score> score_datasets(const Checkpoint& ckpt, const std::vector<Dataset>& datasets,
                                  const std::vector<std::string>& ids, const std::string& split,
                                  const std::optional<Metric>& metric, int max_len) {
    std::vector<Score> out;
    for (size_t i = 0; i < datasets.size(); ++i) {
        const Dataset& ds = datasets[i];
        const auto utts = ds.split(split);
        require(!utts.empty(), ErrorCode::config, "dataset " + ids[i] + " has no '" + split + "' split");
        Score sc;
        sc.dataset_id = ids[i];
        sc.metric = metric.value_or(default_metric(ds.config.task));
        sc.s = score_utterances(ckpt, utts, ds.config.task, sc.metric,
                                max_len > 0 ? max_len : default_max_decode_len(ds.config));
        out.push_back(sc);
    }
    return out;
}

// ---------------------------------------------------------------- commands

json cmd_gen(Options& opts) {
    Run run(opts, "gen");
    SynthConfig c;
    c.vocab_size = opts.get<int>("vocab_size", c.vocab_size);
    c.corpus_size = opts.get<int>("corpus_size", c.corpus_size);
    c.min_len = opts.get<int>("min_len", c.min_len);
    c.max_len = opts.get<int>("max_len", c.max_len);
    c.min_frames_per_token = opts.get<int>("min_frames_per_token", c.min_frames_per_token);
    c.max_frames_per_token = opts.get<int>("max_frames_per_token", c.max_frames_per_token);
    c.d_e = opts.get<int>("d_e", c.d_e);
    c.noise_std = opts.get<double>("noise_std", c.noise_std);
    c.task = parse_task(opts.get<std::string>("task", "transcribe"));
    c.mapping_seed = opts.get<uint64_t>("mapping_seed", c.mapping_seed);
    c.frame_rate_hz = opts.get<double>("frame_rate_hz", c.frame_rate_hz);
    c.seed = run.seed();
    opts.finish();
    const Dataset ds = gen_dataset(c);
    save_dataset(run.out(), ds);
    run.record("manifest.json");
    run.record("index.tsv");
    run.finish();
    std::map<std::string, int> counts;
    for (const Utterance& u : ds.utterances) {
        ++counts[u.split];
    }
    return {{"out", run.out().string()}, {"id", ds.id()}, {"hash", dataset_hash(ds)}, {"splits", counts}};
}

json cmd_pretrain(Options& opts) {
    Run run(opts, "pretrain");
    const Dataset ds = open_dataset(run, opts.required("dataset"));
    ModelConfig mc;
    mc.num_layers = opts.get<int>("layers", mc.num_layers);
    mc.d_model = opts.get<int>("d_model", mc.d_model);
    mc.num_heads = opts.get<int>("heads", mc.num_heads);
    mc.d_mlp = opts.get<int>("d_mlp", mc.d_mlp);
    mc.max_seq_len = opts.get<int>("max_seq_len", mc.max_seq_len);
    mc.vocab_size = ds.config.vocab_size;
    mc.seed = derive_seed(run.seed(), "decoder");
    const int k = opts.get<int>("k", 2);
    const int d_hidden = opts.get<int>("d_hidden", mc.d_model);
    const double speech_mix = opts.get<double>("speech_mix", 0.5);
    require(speech_mix >= 0.0 && speech_mix <= 1.0, ErrorCode::config, "speech_mix must be in [0, 1]");
    const TrainConfig tc = train_config(opts, run.seed(), 3000, 1e-3, "pretrain");
    opts.finish();

    Checkpoint ckpt;
    ckpt.model = init_decoder(mc);
    ckpt.projector = init_projector(k, ds.config.d_e, d_hidden, mc.d_model, derive_seed(run.seed(), "scratch-projector"));
    for (const NamedParam& np : named_parameters(ckpt.model)) {
        np.param->trainable = true;
    }
    ckpt.projector.set_trainable(speech_mix > 0.0);

    // Both tasks over the train transcripts; each example is rendered as
    // speech with probability speech_mix, otherwise as source tokens.
    const std::vector<int> pi = translation_permutation(ds.config);
    Rng mix_rng(derive_seed(run.seed(), "speech-mix"));
    std::vector<TrainExample> data;
    for (const Utterance* u : ds.split("train")) {
        for (const Task task : {Task::transcribe, Task::translate}) {
            TrainExample ex;
            ex.prompt = task_prompt(task);
            for (const int t : u->transcript) {
                ex.target.push_back(task == Task::translate ? pi[static_cast<size_t>(t)] : t);
            }
            ex.target.push_back(kEosToken);
            if (mix_rng.uniform() < speech_mix) {
                ex.speech = stack_frames(u->features, k);
                ex.is_speech = true;
            } else {
                ex.source = u->transcript;
                ex.is_speech = false;
            }
            data.push_back(std::move(ex));
        }
    }
    std::vector<NamedParam> registry = named_parameters(ckpt.model);
    if (ckpt.projector.trainable()) {
        for (const NamedParam& np : named_parameters(ckpt.projector)) {
            registry.push_back(np);
        }
    }
    const TrainReport report = train(ckpt.model, ckpt.projector, data, tc, TrainMode::pretrain, registry);
    freeze_all(ckpt.model);
    ckpt.projector.set_trainable(false);
    ckpt.provenance.train_steps = tc.total_steps;
    ckpt.provenance.task = "multitask";
    ckpt.provenance.seed_lineage.push_back("pretrain:" + std::to_string(run.seed()));

    save_checkpoint(run.out() / "model.ckpt", ckpt);
    run.record("model.ckpt");
    run.write("loss.csv", loss_csv(report));
    run.finish();
    return {{"out", run.out().string()}, {"final_loss", report.final_loss}, {"steps", report.steps},
            {"wall_seconds", report.wall_seconds}};
}

json cmd_train(Options& opts) {
    Run run(opts, "train");
    Checkpoint ckpt = open_checkpoint(run, opts.required("checkpoint"));
    const Dataset ds = open_dataset(run, opts.required("dataset"));
    const int k = opts.get<int>("k", ckpt.projector.k);
    const int d_hidden = opts.get<int>("d_hidden", ckpt.projector.d_hidden);
    const bool lora = opts.get<bool>("lora", false);
    const int lora_rank = opts.get<int>("lora_rank", 8);
    const auto lora_alpha = opts.get<float>("lora_alpha", 16.0f);
    const auto lora_dropout = opts.get<float>("lora_dropout", 0.05f);
    const std::string lora_targets = opts.get<std::string>("lora_targets", "attn");
    const std::string eval_split = opts.get<std::string>("eval_split", "dev");
    const TrainConfig tc = train_config(opts, run.seed(), 1000, 2e-3, "train");
    opts.finish();
    require(ds.config.vocab_size == ckpt.model.config.vocab_size, ErrorCode::vocabulary,
            "dataset vocabulary (" + std::to_string(ds.config.vocab_size) + ") differs from the model's (" +
                std::to_string(ckpt.model.config.vocab_size) + ")");

    freeze_all(ckpt.model);
    ckpt.projector =
        init_projector(k, ds.config.d_e, d_hidden, ckpt.model.config.d_model, derive_seed(run.seed(), "projector"));
    ckpt.projector.set_trainable(true);
    if (lora) {
        LoraTargets targets;
        targets.projections = parse_projection_selector(lora_targets);
        attach_lora(ckpt.model, targets, lora_rank, lora_alpha, lora_dropout, derive_seed(run.seed(), "train-lora"));
    }
    std::vector<NamedParam> registry;
    for (const NamedParam& np : named_parameters(ckpt.model)) {
        if (np.param->trainable) {
            registry.push_back(np);
        }
    }
    for (const NamedParam& np : named_parameters(ckpt.projector)) {
        registry.push_back(np);
    }
    const TrainReport report =
        train(ckpt.model, ckpt.projector, speech_examples(ds, k), tc, TrainMode::base, registry);
    freeze_all(ckpt.model);
    ckpt.projector.set_trainable(false);
    ckpt.provenance.train_steps += tc.total_steps;
    ckpt.provenance.task = std::string(to_string(ds.config.task));
    ckpt.provenance.prompt = task_prompt(ds.config.task);
    ckpt.provenance.seed_lineage.push_back("train:" + std::to_string(run.seed()));

    const Metric metric = default_metric(ds.config.task);
    const auto utts = ds.split(eval_split);
    require(!utts.empty(), ErrorCode::config, "dataset has no '" + eval_split + "' split");
    const double score = score_utterances(ckpt, utts, ds.config.task, metric, default_max_decode_len(ds.config));
    const json summary{{"final_loss", report.final_loss},
                       {"steps", report.steps},
                       {"eval", {{"split", eval_split}, {"metric", std::string(to_string(metric))}, {"score", score}}}};

    save_checkpoint(run.out() / "model.ckpt", ckpt);
    run.record("model.ckpt");
    run.write("loss.csv", loss_csv(report));
    run.write("train_report.json", summary.dump(2) + "\n");
    run.finish();
    json out = summary;
    out["out"] = run.out().string();
    out["wall_seconds"] = report.wall_seconds;
    return out;
}

json cmd_analyze(Options& opts) {
    Run run(opts, "analyze");
    const Checkpoint ckpt = open_checkpoint(run, opts.required("checkpoint"));
    const Dataset ds = open_dataset(run, opts.required("dataset"));
    const InputMode mode = parse_input_mode(opts.get<std::string>("mode", "speech"));
    const std::string split = opts.get<std::string>("split", "dev");
    const int max_examples = opts.get<int>("max_examples", 0);
    const bool allow_final = opts.get<bool>("allow_final_layer", false);
    opts.finish();

    auto utts = ds.split(split);
    require(!utts.empty(), ErrorCode::config, "dataset has no '" + split + "' split");
    if (max_examples > 0 && static_cast<int>(utts.size()) > max_examples) {
        utts.resize(static_cast<size_t>(max_examples));
    }
    const DistanceMatrix d =
        build_distance_matrix(ckpt.model, analysis_inputs(ckpt, utts, ds.config.task, mode), mode, ds.id());
    PruningPath path = pruning_path(d, allow_final);
    path.fingerprint = model_fingerprint(ckpt.model);
    run.write("heatmap.csv", heatmap_csv(d));
    run.write("path.json", path_json(path));
    run.finish();
    json entries = json::array();
    for (const PathEntry& e : path.entries) {
        entries.push_back({{"n", e.n}, {"ell_star", e.ell_star}, {"distance", e.distance}});
    }
    return {{"out", run.out().string()},
            {"samples", d.sample_count},
            {"skipped", d.skipped_count},
            {"mode", std::string(to_string(mode))},
            {"entries", entries}};
}

json cmd_prune(Options& opts) {
    Run run(opts, "prune");
    Checkpoint ckpt = open_checkpoint(run, opts.required("checkpoint"));
    const std::string path_file = opts.get<std::string>("path", "");
    const bool by_fraction = opts.has("drop_fraction");
    const double fraction = opts.get<double>("drop_fraction", 0.0);
    const bool by_block = opts.has("start") || opts.has("size");
    const int start = opts.get<int>("start", -1);
    const int size = opts.get<int>("size", -1);
    opts.finish();
    require(by_fraction != by_block, ErrorCode::config,
            "prune needs either --path with --drop-fraction or --start with --size");

    std::optional<SurgeryPlan> plan;
    if (by_fraction) {
        PruningPath path;
        if (!path_file.empty()) {
            const Bytes b = read_file(path_file);
            run.input("path", path_file, sha256_hex(b.data(), b.size()));
            path = parse_path_json(std::string(b.begin(), b.end()));
        }
        const bool empty = std::lround(fraction * ckpt.model.config.num_layers) -
                               (ckpt.model.config.num_layers - ckpt.model.num_layers()) <=
                           0;
        require(!path_file.empty() || empty, ErrorCode::config, "--drop-fraction needs --path");
        plan = plan_for_drop(ckpt.model, path, fraction);
        if (plan && plan->path_fingerprint != model_fingerprint(ckpt.model)) {
            log_warn("path " + path_file + " was computed on a different model; applying it as a transfer");
        }
    } else {
        require(start >= 0 && size >= 1, ErrorCode::config, "--start must be >= 0 and --size >= 1");
        plan = SurgeryPlan{};
        plan->start = start;
        plan->size = size;
    }

    if (plan) {
        prune_block(ckpt.model, *plan);
        ckpt.provenance.surgeries.push_back(*plan);
    } else {
        // Nothing to remove: the copy records an empty surgery.
        SurgeryPlan noop;
        noop.size = 0;
        ckpt.provenance.surgeries.push_back(noop);
    }
    save_checkpoint(run.out() / "model.ckpt", ckpt);
    run.record("model.ckpt");
    run.finish();
    return {{"out", run.out().string()},
            {"removed_original_ids", plan ? plan->removed_original_ids : std::vector<int>{}},
            {"original_layer_ids", ckpt.model.original_layer_ids},
            {"drop_fraction", ckpt.drop_fraction()}};
}

json cmd_heal(Options& opts) {
    Run run(opts, "heal");
    Checkpoint ckpt = open_checkpoint(run, opts.required("checkpoint"));
    const Dataset ds = open_dataset(run, opts.required("dataset"));
    const HealingStrategy strategy = parse_healing_strategy(opts.get<std::string>("strategy", "joint"));
    const HealingConfig hc = healing_config(opts, run.seed());
    const TrainConfig tc = train_config(opts, run.seed(), 500, 1e-3, "heal");
    opts.finish();
    require(strategy != HealingStrategy::none, ErrorCode::config,
            "healing strategy 'none' trains nothing; use the pruned checkpoint directly");
    const TrainReport report = heal_checkpoint(ckpt, ds, strategy, hc, tc);
    ckpt.provenance.seed_lineage.push_back("heal:" + std::to_string(run.seed()));
    save_checkpoint(run.out() / "model.ckpt", ckpt);
    run.record("model.ckpt");
    run.write("loss.csv", loss_csv(report));
    run.finish();
    return {{"out", run.out().string()},
            {"strategy", std::string(to_string(strategy))},
            {"final_loss", report.final_loss},
            {"wall_seconds", report.wall_seconds}};
}

json cmd_eval(Options& opts) {
    Run run(opts, "eval");
    const Checkpoint ckpt = open_checkpoint(run, opts.required("checkpoint"));
    const std::vector<Dataset> datasets = open_datasets(run, opts);
    const std::string metric_name = opts.get<std::string>("metric", "");
    const std::string baseline_path = opts.get<std::string>("baseline", "");
    const std::string split = opts.get<std::string>("split", "test");
    const int max_len = opts.get<int>("max_len", 0);
    const bool bench = opts.get<bool>("benchmark", false);
    const Thresholds thresholds = read_thresholds(opts);
    opts.finish();

    std::optional<Metric> metric;
    if (!metric_name.empty()) {
        metric = parse_metric(metric_name);
    }
    std::vector<std::string> ids;
    for (const Dataset& ds : datasets) {
        ids.push_back(ds.id());
        if (!ckpt.provenance.task.empty() && ckpt.provenance.task != to_string(ds.config.task)) {
            log_warn("evaluating a " + ckpt.provenance.task + " checkpoint on " + ds.id());
        }
    }
    DropScores drop;
    drop.fraction = ckpt.drop_fraction();
    drop.scores = score_datasets(ckpt, datasets, ids, split, metric, max_len);
    if (!baseline_path.empty()) {
        const json baseline = load_json_file(baseline_path);
        run.input("baseline", baseline_path, sha256_file(baseline_path));
        for (Score& sc : drop.scores) {
            sc.s0 = baseline_score(baseline, sc.dataset_id, sc.metric);
            require(sc.s0.has_value(), ErrorCode::config,
                    "baseline " + baseline_path + " has no " + std::string(to_string(sc.metric)) + " score for " +
                        sc.dataset_id);
        }
    }
    json timing = nullptr;
    if (bench) {
        BenchmarkWorkload w;
        w.seq_len = std::min(w.seq_len, ckpt.model.config.max_seq_len);
        w.seed = derive_seed(run.seed(), "benchmark");
        const DecoderModel model = ckpt.model;
        timing = benchmark_json(benchmark_forward({{"model", [&] { return model; }}}, w), w);
    }
    const json report = eval_report(model_fingerprint(ckpt.model), split, {drop}, thresholds, timing);
    run.write("report.json", report.dump(2) + "\n");
    run.finish();
    json out = report;
    out["out"] = run.out().string();
    return out;
}

json cmd_sweep(Options& opts) {
    Run run(opts, "sweep");
    const Checkpoint base = open_checkpoint(run, opts.required("checkpoint"));
    const std::vector<Dataset> datasets = open_datasets(run, opts);
    const std::string heal_dataset_path = opts.get<std::string>("heal_dataset", "");
    const std::vector<double> drops = opts.get<std::vector<double>>("drops", {0.125, 0.25, 0.375});
    std::vector<HealingStrategy> strategies;
    for (const std::string& s : opts.strings("strategies", {"none", "decoder", "projector", "joint"})) {
        strategies.push_back(parse_healing_strategy(s));
    }
    const std::string path_file = opts.get<std::string>("path", "");
    const std::string split = opts.get<std::string>("split", "test");
    const int max_len = opts.get<int>("max_len", 0);
    const bool save_cells = opts.get<bool>("save_checkpoints", false);
    const Thresholds thresholds = read_thresholds(opts);
    const HealingConfig hc = healing_config(opts, run.seed());
    const TrainConfig tc = train_config(opts, run.seed(), 500, 1e-3, "heal");
    opts.finish();
    require(!drops.empty() && !strategies.empty(), ErrorCode::config, "sweep needs drops and strategies");

    const Dataset heal_ds = heal_dataset_path.empty() ? datasets.front() : open_dataset(run, heal_dataset_path);
    PruningPath path;
    if (!path_file.empty()) {
        const Bytes b = read_file(path_file);
        run.input("path", path_file, sha256_hex(b.data(), b.size()));
        path = parse_path_json(std::string(b.begin(), b.end()));
    } else {
        const auto utts = heal_ds.split("dev");
        require(!utts.empty(), ErrorCode::config, "heal dataset has no dev split for path analysis");
        const DistanceMatrix d = build_distance_matrix(
            base.model, analysis_inputs(base, utts, heal_ds.config.task, InputMode::speech), InputMode::speech,
            heal_ds.id());
        path = pruning_path(d);
        path.fingerprint = model_fingerprint(base.model);
        run.write("path.json", path_json(path));
    }

    std::vector<std::string> ids;
    for (const Dataset& ds : datasets) {
        ids.push_back(ds.id());
    }
    std::optional<Metric> no_metric;
    const std::vector<Score> baseline = score_datasets(base, datasets, ids, split, no_metric, max_len);

    std::map<HealingStrategy, std::vector<DropScores>> per_strategy;
    std::ostringstream curve;
    curve << "drop,dataset,metric,delta,strategy\n" << std::setprecision(9);
    for (const double f : drops) {
        Checkpoint pruned = base;
        const std::optional<SurgeryPlan> plan = plan_for_drop(pruned.model, path, f);
        if (plan) {
            SurgeryPlan p = *plan;
            prune_block(pruned.model, p);
            pruned.provenance.surgeries.push_back(p);
        }
        for (const HealingStrategy s : strategies) {
            log_info("sweep: drop " + fraction_label(f) + " strategy " + std::string(to_string(s)));
            Checkpoint cell = pruned;
            if (plan && s != HealingStrategy::none) {
                heal_checkpoint(cell, heal_ds, s, hc, tc);
            }
            DropScores ds_scores;
            ds_scores.fraction = cell.drop_fraction();
            ds_scores.scores = plan ? score_datasets(cell, datasets, ids, split, no_metric, max_len) : baseline;
            for (size_t i = 0; i < ds_scores.scores.size(); ++i) {
                Score& sc = ds_scores.scores[i];
                sc.s0 = baseline[i].s;
                const DegradationRecord r = relative_degradation(sc.s, *sc.s0, sc.metric);
                curve << f << ',' << sc.dataset_id << ',' << to_string(sc.metric) << ',' << r.delta << ','
                      << to_string(s) << '\n';
            }
            per_strategy[s].push_back(ds_scores);
            if (save_cells) {
                const std::string rel =
                    "cells/" + fraction_label(f) + "/" + std::string(to_string(s)) + "/model.ckpt";
                save_checkpoint(run.out() / rel, cell);
                run.record(rel);
            }
        }
    }
    run.write("curve.csv", curve.str());
    json summary = json::object();
    for (const HealingStrategy s : strategies) {
        const json report = eval_report(model_fingerprint(base.model), split, per_strategy[s], thresholds, nullptr);
        run.write("report_" + std::string(to_string(s)) + ".json", report.dump(2) + "\n");
        summary[std::string(to_string(s))] = report["max_prunable_fraction"];
    }
    run.finish();
    return {{"out", run.out().string()}, {"max_prunable_fraction", summary}};
}

json cmd_compare_paths(Options& opts) {
    Run run(opts, "compare-paths");
    const std::string a = opts.required("a");
    const std::string b = opts.required("b");
    opts.finish();
    auto is_csv = [](const std::string& p) { return fs::path(p).extension() == ".csv"; };
    auto load_text = [&](const std::string& p, const std::string& role) {
        const Bytes bytes = read_file(p);
        run.input(role, p, sha256_hex(bytes.data(), bytes.size()));
        return std::string(bytes.begin(), bytes.end());
    };
    const std::string ta = load_text(a, "a");
    const std::string tb = load_text(b, "b");
    PathComparison c;
    if (is_csv(a) && is_csv(b)) {
        c = compare_paths(parse_heatmap_csv(ta), parse_heatmap_csv(tb));
    } else {
        auto as_path = [&](const std::string& p, const std::string& text) {
            return is_csv(p) ? pruning_path(parse_heatmap_csv(text)) : parse_path_json(text);
        };
        c = compare_paths(as_path(a, ta), as_path(b, tb));
    }
    const std::string text = comparison_json(c);
    run.write("comparison.json", text);
    run.finish();
    json out = json::parse(text);
    out["out"] = run.out().string();
    return out;
}

json cmd_benchmark(Options& opts) {
    Run run(opts, "benchmark");
    const std::string ckpt_path = opts.get<std::string>("checkpoint", "");
    ModelConfig mc;
    mc.num_layers = opts.get<int>("layers", 16);
    mc.d_model = opts.get<int>("d_model", mc.d_model);
    mc.num_heads = opts.get<int>("heads", mc.num_heads);
    mc.d_mlp = opts.get<int>("d_mlp", mc.d_mlp);
    mc.vocab_size = opts.get<int>("vocab_size", mc.vocab_size);
    mc.max_seq_len = opts.get<int>("max_seq_len", mc.max_seq_len);
    const double fraction = opts.get<double>("drop_fraction", 0.4);
    BenchmarkWorkload w;
    w.batch = opts.get<int>("batch", w.batch);
    w.seq_len = opts.get<int>("seq_len", w.seq_len);
    w.runs = opts.get<int>("runs", w.runs);
    w.warmup = opts.get<int>("warmup", w.warmup);
    const int start_opt = opts.get<int>("start", -1);
    opts.finish();
    w.seed = derive_seed(run.seed(), "benchmark");
    require(fraction >= 0.0 && fraction < 1.0, ErrorCode::config, "drop fraction must be in [0, 1)");

    DecoderModel proto;
    if (ckpt_path.empty()) {
        mc.seed = derive_seed(run.seed(), "decoder");
        proto = init_decoder(mc);
    } else {
        proto = open_checkpoint(run, ckpt_path).model;
    }
    const int m = proto.num_layers();
    const int n = static_cast<int>(std::lround(fraction * m));
    SurgeryPlan plan;
    plan.size = n;
    // Default block: the n layers just below the final layer.
    plan.start = start_opt >= 0 ? start_opt : m - 1 - n;
    if (n > 0) {
        validate_plan(proto, plan);
    }
    std::vector<ModelVariant> variants;
    variants.push_back({"unpruned", [&] { return proto; }});
    variants.push_back({"pruned", [&] {
                            DecoderModel pm = proto;
                            if (n > 0) {
                                SurgeryPlan p = plan;
                                prune_block(pm, p);
                            }
                            return pm;
                        }});
    const std::vector<BenchmarkResult> results = benchmark_forward(variants, w);
    json out = benchmark_json(results, w);
    out["drop_fraction"] = fraction;
    out["removed_layers"] = n;
    run.write("benchmark.json", out.dump(2) + "\n");
    run.finish();
    out["out"] = run.out().string();
    return out;
}

using CommandFn = json (*)(Options&);

const std::map<std::string, CommandFn>& command_table() {
    static const std::map<std::string, CommandFn> table{
        {"gen", cmd_gen},       {"pretrain", cmd_pretrain}, {"train", cmd_train},
        {"analyze", cmd_analyze}, {"prune", cmd_prune},     {"heal", cmd_heal},
        {"eval", cmd_eval},     {"sweep", cmd_sweep},       {"compare-paths", cmd_compare_paths},
        {"benchmark", cmd_benchmark}};
    return table;
}

}  // namespace

json run_command(std::string_view name, const json& options) {
    const auto& table = command_table();
    const auto it = table.find(std::string(name));
    require(it != table.end(), ErrorCode::config, "unknown command '" + std::string(name) + "'");
    Options opts(options, it->first);
    return it->second(opts);
}

const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& [name, fn] : command_table()) {
            out.push_back(name);
        }
        return out;
    }();
    return names;
}

fs::path default_output_root() {
    const char* env = std::getenv("SPEECHPRUNE_OUT");
    return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("runs");
}

int default_max_decode_len(const SynthConfig& config) {
    return config.max_len + 4;
}

std::vector<std::vector<int>> decode_utterances(const Checkpoint& ckpt, const std::vector<const Utterance*>& utts,
                                                const std::vector<int>& prompt, int max_len) {
    std::vector<std::vector<int>> out;
    out.reserve(utts.size());
    for (const Utterance* u : utts) {
        out.push_back(greedy_decode(ckpt.model, ckpt.projector, stack_frames(u->features, ckpt.projector.k), prompt,
                                    max_len, kEosToken));
    }
    return out;
}

double score_utterances(const Checkpoint& ckpt, const std::vector<const Utterance*>& utts, Task task, Metric metric,
                        int max_len) {
    const auto hyps = decode_utterances(ckpt, utts, task_prompt(task), max_len);
    std::vector<std::string> ref_text;
    std::vector<std::string> hyp_text;
    for (size_t i = 0; i < utts.size(); ++i) {
        ref_text.push_back(tokens_to_text(utts[i]->target));
        hyp_text.push_back(tokens_to_text(hyps[i]));
    }
    return metric == Metric::wer ? wer(ref_text, hyp_text) : bleu(ref_text, hyp_text);
}

std::vector<Mat> analysis_inputs(const Checkpoint& ckpt, const std::vector<const Utterance*>& utts, Task task,
                                 InputMode mode) {
    std::vector<Mat> out;
    out.reserve(utts.size());
    const std::vector<int> prompt = task_prompt(task);
    for (const Utterance* u : utts) {
        const Mat speech = mode == InputMode::speech ? project(ckpt.projector, stack_frames(u->features, ckpt.projector.k))
                                                     : Mat(0, ckpt.model.config.d_model);
        out.push_back(assemble(speech, prompt, with_eos(u->target), ckpt.model.embed.value).embeddings);
    }
    return out;
}

}  // namespace speechprune

// Command-line front end. Every subcommand gathers its flags into a JSON
// options object and hands it to sprn_run_command.

#include "speechprune/speechprune.h"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace {

using nlohmann::json;

enum class Kind { str, integer, uint, real, flag, strings, reals };

struct Flag {
    const char* name;  // long flag without dashes; JSON key is name with '-' -> '_'
    Kind kind;
    const char* help;
};

struct Command {
    const char* name;
    const char* help;
    std::vector<Flag> flags;
};

const std::vector<Command>& commands() {
    static const std::vector<Command> table{
        {"gen",
         "generate a synthetic speech corpus",
         {{"task", Kind::str, "transcribe | translate"},
          {"corpus-size", Kind::integer, "number of utterances"},
          {"vocab-size", Kind::integer, "vocabulary size including reserved ids"},
          {"min-len", Kind::integer, "shortest transcript"},
          {"max-len", Kind::integer, "longest transcript"},
          {"min-frames-per-token", Kind::integer, "fewest frames per token"},
          {"max-frames-per-token", Kind::integer, "most frames per token"},
          {"d-e", Kind::integer, "feature dimension"},
          {"noise-std", Kind::real, "feature noise"},
          {"mapping-seed", Kind::uint, "seed of the translation permutation"},
          {"frame-rate-hz", Kind::real, "frame rate metadata"}}},
        {"pretrain",
         "train the decoder on text (and scratch-projector speech) for both tasks",
         {{"dataset", Kind::str, "dataset directory"},
          {"layers", Kind::integer, "decoder layers"},
          {"d-model", Kind::integer, "model width"},
          {"heads", Kind::integer, "attention heads"},
          {"d-mlp", Kind::integer, "MLP width"},
          {"max-seq-len", Kind::integer, "maximum sequence length"},
          {"k", Kind::integer, "frame stacking factor"},
          {"d-hidden", Kind::integer, "projector hidden width"},
          {"speech-mix", Kind::real, "fraction of examples rendered as speech"},
          {"steps", Kind::integer, "optimizer steps"},
          {"batch", Kind::integer, "batch size"},
          {"lr", Kind::real, "peak learning rate"},
          {"warmdown", Kind::real, "warmdown fraction"}}},
        {"train",
         "train a fresh projector against the frozen decoder",
         {{"checkpoint", Kind::str, "pretrained checkpoint"},
          {"dataset", Kind::str, "dataset directory"},
          {"k", Kind::integer, "frame stacking factor"},
          {"d-hidden", Kind::integer, "projector hidden width"},
          {"lora", Kind::flag, "also adapt the decoder with LoRA"},
          {"lora-rank", Kind::integer, "LoRA rank"},
          {"lora-alpha", Kind::real, "LoRA alpha"},
          {"lora-dropout", Kind::real, "LoRA dropout"},
          {"lora-targets", Kind::str, "projection selector, e.g. attn or q,v"},
          {"eval-split", Kind::str, "split scored after training"},
          {"steps", Kind::integer, "optimizer steps"},
          {"batch", Kind::integer, "batch size"},
          {"lr", Kind::real, "peak learning rate"},
          {"warmdown", Kind::real, "warmdown fraction"}}},
        {"analyze",
         "distance heatmap and optimal pruning path",
         {{"checkpoint", Kind::str, "checkpoint"},
          {"dataset", Kind::str, "dataset directory"},
          {"mode", Kind::str, "text | speech"},
          {"split", Kind::str, "split to analyze"},
          {"max-examples", Kind::integer, "cap on analyzed utterances (0 = all)"},
          {"allow-final-layer", Kind::flag, "let blocks include the final layer"}}},
        {"prune",
         "remove a block of layers",
         {{"checkpoint", Kind::str, "checkpoint"},
          {"path", Kind::str, "path.json from analyze"},
          {"drop-fraction", Kind::real, "fraction of the original depth to remove"},
          {"start", Kind::integer, "explicit block start (layers start+1..start+size go)"},
          {"size", Kind::integer, "explicit block size"}}},
        {"heal",
         "heal a pruned checkpoint",
         {{"checkpoint", Kind::str, "pruned checkpoint"},
          {"dataset", Kind::str, "dataset directory"},
          {"strategy", Kind::str, "none | decoder | projector | joint"},
          {"rank", Kind::integer, "adapter rank"},
          {"alpha", Kind::real, "adapter alpha"},
          {"dropout", Kind::real, "adapter dropout"},
          {"steps", Kind::integer, "optimizer steps"},
          {"batch", Kind::integer, "batch size"},
          {"lr", Kind::real, "peak learning rate"},
          {"warmdown", Kind::real, "warmdown fraction"}}},
        {"eval",
         "score a checkpoint and report degradation",
         {{"checkpoint", Kind::str, "checkpoint"},
          {"dataset", Kind::str, "dataset directory"},
          {"datasets", Kind::strings, "further dataset directories"},
          {"metric", Kind::str, "wer | bleu (default: by task)"},
          {"baseline", Kind::str, "report.json of the unpruned model"},
          {"split", Kind::str, "split to score"},
          {"max-len", Kind::integer, "decode length cap (0 = by dataset)"},
          {"benchmark", Kind::flag, "add forward timing to the report"},
          {"threshold-wer", Kind::real, "WER degradation tolerance"},
          {"threshold-bleu", Kind::real, "BLEU degradation tolerance"}}},
        {"sweep",
         "degradation curves over drops and healing strategies",
         {{"checkpoint", Kind::str, "unpruned checkpoint"},
          {"dataset", Kind::str, "evaluation dataset directory"},
          {"datasets", Kind::strings, "further evaluation dataset directories"},
          {"heal-dataset", Kind::str, "dataset for healing (default: first)"},
          {"drops", Kind::reals, "drop fractions"},
          {"strategies", Kind::strings, "healing strategies"},
          {"path", Kind::str, "path.json (default: analyze in speech mode)"},
          {"split", Kind::str, "split to score"},
          {"max-len", Kind::integer, "decode length cap"},
          {"save-checkpoints", Kind::flag, "keep every cell's checkpoint"},
          {"threshold-wer", Kind::real, "WER degradation tolerance"},
          {"threshold-bleu", Kind::real, "BLEU degradation tolerance"},
          {"rank", Kind::integer, "adapter rank"},
          {"alpha", Kind::real, "adapter alpha"},
          {"dropout", Kind::real, "adapter dropout"},
          {"steps", Kind::integer, "healing steps"},
          {"batch", Kind::integer, "batch size"},
          {"lr", Kind::real, "peak learning rate"},
          {"warmdown", Kind::real, "warmdown fraction"}}},
        {"compare-paths",
         "compare two paths or heatmaps",
         {{"a", Kind::str, "path.json or heatmap.csv"}, {"b", Kind::str, "path.json or heatmap.csv"}}},
        {"benchmark",
         "forward speed and memory, unpruned vs pruned",
         {{"checkpoint", Kind::str, "checkpoint (default: fresh model)"},
          {"layers", Kind::integer, "layers of the fresh model"},
          {"d-model", Kind::integer, "model width"},
          {"heads", Kind::integer, "attention heads"},
          {"d-mlp", Kind::integer, "MLP width"},
          {"vocab-size", Kind::integer, "vocabulary size"},
          {"max-seq-len", Kind::integer, "maximum sequence length"},
          {"drop-fraction", Kind::real, "fraction of layers removed"},
          {"start", Kind::integer, "block start (default: just below the final layer)"},
          {"batch", Kind::integer, "sequences per forward batch"},
          {"seq-len", Kind::integer, "sequence length"},
          {"runs", Kind::integer, "timed runs"},
          {"warmup", Kind::integer, "untimed warmup runs"}}},
    };
    return table;
}

std::string json_key(const char* flag) {
    std::string key = flag;
    for (char& c : key) {
        if (c == '-') {
            c = '_';
        }
    }
    return key;
}

// Values are parsed by CLI11 into typed storage, then copied into JSON for
// the flags that were actually given.
struct Storage {
    std::string s;
    long long i = 0;
    unsigned long long u = 0;
    double r = 0.0;
    bool b = false;
    std::vector<std::string> ss;
    std::vector<double> rs;
    CLI::Option* opt = nullptr;
};

int exit_code_for(sprn_status status) {
    switch (status) {
        case SPRN_OK: return 0;
        case SPRN_ERR_CONFIG:
        case SPRN_ERR_SELECTOR:
        case SPRN_ERR_INVALID_ARGUMENT: return 2;
        case SPRN_ERR_IO:
        case SPRN_ERR_VERSION:
        case SPRN_ERR_CHECKSUM:
        case SPRN_ERR_VOCABULARY: return 3;
        case SPRN_ERR_NUMERIC:
        case SPRN_ERR_LOSS_UNDEFINED:
        case SPRN_ERR_DEGENERATE_VECTOR:
        case SPRN_ERR_UNDEFINED_METRIC:
        case SPRN_ERR_DOMAIN: return 4;
        case SPRN_ERR_SHAPE:
        case SPRN_ERR_LENGTH:
        case SPRN_ERR_RANGE:
        case SPRN_ERR_PLAN:
        case SPRN_ERR_CONSISTENCY:
        case SPRN_ERR_EMPTY_OUTPUT:
        case SPRN_ERR_COVERAGE: return 5;
        default: return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Layer-redundancy analysis, pruning and healing for a toy SpeechLLM"};
    app.set_config("--config", "", "INI/TOML file of option overrides");
    app.require_subcommand(1);
    unsigned long long seed = 0;
    std::string out;
    bool quiet = false;
    bool verbose = false;
    app.add_option("--seed", seed, "root seed; every stage derives sub-seeds from it");
    app.add_flag("--quiet,-q", quiet, "suppress warnings");
    app.add_flag("--verbose,-v", verbose, "print training progress");
    app.add_flag_callback("--version", [] {
        std::cout << sprn_version() << "\n";
        std::exit(0);
    }, "print the version");

    std::map<std::string, std::vector<std::pair<const Flag*, std::unique_ptr<Storage>>>> storage;
    std::map<std::string, CLI::App*> subs;
    for (const Command& cmd : commands()) {
        CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
        sub->add_option("--out,-o", out, "output directory (default: $SPEECHPRUNE_OUT/<command>)");
        subs[cmd.name] = sub;
        auto& slots = storage[cmd.name];
        for (const Flag& f : cmd.flags) {
            auto st = std::make_unique<Storage>();
            const std::string name = std::string("--") + f.name;
            switch (f.kind) {
                case Kind::str: st->opt = sub->add_option(name, st->s, f.help); break;
                case Kind::integer: st->opt = sub->add_option(name, st->i, f.help); break;
                case Kind::uint: st->opt = sub->add_option(name, st->u, f.help); break;
                case Kind::real: st->opt = sub->add_option(name, st->r, f.help); break;
                case Kind::flag: st->opt = sub->add_flag(name, st->b, f.help); break;
                case Kind::strings: st->opt = sub->add_option(name, st->ss, f.help)->delimiter(','); break;
                case Kind::reals: st->opt = sub->add_option(name, st->rs, f.help)->delimiter(','); break;
            }
            slots.emplace_back(&f, std::move(st));
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    for (const auto& [name, sub] : subs) {
        if (!sub->parsed()) {
            continue;
        }
        json options = json::object();
        options["seed"] = seed;
        if (!out.empty()) {
            options["out"] = out;
        }
        for (const auto& [flag, st] : storage[name]) {
            if (st->opt->count() == 0) {
                continue;
            }
            const std::string key = json_key(flag->name);
            switch (flag->kind) {
                case Kind::str: options[key] = st->s; break;
                case Kind::integer: options[key] = st->i; break;
                case Kind::uint: options[key] = st->u; break;
                case Kind::real: options[key] = st->r; break;
                case Kind::flag: options[key] = st->b; break;
                case Kind::strings: options[key] = st->ss; break;
                case Kind::reals: options[key] = st->rs; break;
            }
        }
        sprn_set_log_level(quiet ? 0 : (verbose ? 2 : 1));
        char* result = nullptr;
        const sprn_status status = sprn_run_command(name.c_str(), options.dump().c_str(), &result);
        if (status != SPRN_OK) {
            std::cerr << sprn_status_name(status) << ": " << sprn_last_error_message() << "\n";
            return exit_code_for(status);
        }
        std::cout << result << "\n";
        sprn_string_free(result);
        return 0;
    }
    return 2;
}

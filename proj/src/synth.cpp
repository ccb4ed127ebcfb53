#include "synth.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace speechprune {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kDatasetFormatVersion = 1;

json config_to_json(const SynthConfig& c) {
    return json{{"vocab_size", c.vocab_size},
                {"min_len", c.min_len},
                {"max_len", c.max_len},
                {"min_frames_per_token", c.min_frames_per_token},
                {"max_frames_per_token", c.max_frames_per_token},
                {"d_e", c.d_e},
                {"noise_std", c.noise_std},
                {"task", std::string(to_string(c.task))},
                {"mapping_seed", c.mapping_seed},
                {"corpus_size", c.corpus_size},
                {"seed", c.seed},
                {"frame_rate_hz", c.frame_rate_hz}};
}

SynthConfig config_from_json(const json& j) {
    SynthConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.min_len = j.at("min_len").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.min_frames_per_token = j.at("min_frames_per_token").get<int>();
    c.max_frames_per_token = j.at("max_frames_per_token").get<int>();
    c.d_e = j.at("d_e").get<int>();
    c.noise_std = j.at("noise_std").get<double>();
    c.task = parse_task(j.at("task").get<std::string>());
    c.mapping_seed = j.at("mapping_seed").get<uint64_t>();
    c.corpus_size = j.at("corpus_size").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    c.frame_rate_hz = j.at("frame_rate_hz").get<double>();
    return c;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (const char ch : line) {
        if (ch == '\t') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(std::move(cur));
    return out;
}

std::string index_tsv(const Dataset& ds) {
    std::ostringstream os;
    os << "id\ttranscript\ttarget\tfeature_file\tnum_frames\tsplit\n";
    for (const Utterance& u : ds.utterances) {
        os << u.id << '\t' << tokens_to_text(u.transcript) << '\t' << tokens_to_text(u.target) << "\tfeatures/"
           << u.id << ".feat\t" << u.features.frames.rows() << '\t' << u.split << '\n';
    }
    return os.str();
}

}  // namespace

std::string_view to_string(Task t) {
    return t == Task::transcribe ? "transcribe" : "translate";
}

Task parse_task(std::string_view s) {
    if (s == "transcribe") {
        return Task::transcribe;
    }
    if (s == "translate") {
        return Task::translate;
    }
    fail(ErrorCode::config, "unknown task '" + std::string(s) + "' (expected transcribe or translate)");
}

std::vector<int> task_prompt(Task t) {
    return {t == Task::transcribe ? kPromptTranscribe : kPromptTranslate};
}

void SynthConfig::validate() const {
    require(vocab_size > kFirstContent + 1, ErrorCode::config,
            "vocab_size must leave at least two content tokens above the reserved ids");
    require(min_len >= 1 && max_len >= min_len, ErrorCode::config, "utterance length range must satisfy 1 <= min <= max");
    require(min_frames_per_token >= 1 && max_frames_per_token >= min_frames_per_token, ErrorCode::config,
            "frames-per-token range must satisfy 1 <= min <= max");
    require(d_e >= 1, ErrorCode::config, "d_e must be >= 1");
    require(noise_std >= 0.0 && std::isfinite(noise_std), ErrorCode::config, "noise_std must be >= 0");
    require(corpus_size >= 3, ErrorCode::config, "corpus_size must be >= 3");
    require(frame_rate_hz > 0.0, ErrorCode::config, "frame_rate_hz must be positive");
}

std::string Dataset::id() const {
    return std::string(to_string(config.task)) + "-" + dataset_hash(*this).substr(0, 12);
}

std::vector<const Utterance*> Dataset::split(std::string_view name) const {
    std::vector<const Utterance*> out;
    for (const Utterance& u : utterances) {
        if (u.split == name) {
            out.push_back(&u);
        }
    }
    return out;
}

std::string tokens_to_text(const std::vector<int>& tokens) {
    std::string out;
    for (const int t : tokens) {
        if (!out.empty()) {
            out.push_back(' ');
        }
        out += "w" + std::to_string(t);
    }
    return out;
}

std::vector<int> text_to_tokens(std::string_view text, int vocab_size) {
    std::vector<int> out;
    std::istringstream is{std::string(text)};
    std::string word;
    while (is >> word) {
        int id = -1;
        if (word.size() >= 2 && word[0] == 'w' &&
            std::all_of(word.begin() + 1, word.end(), [](char c) { return c >= '0' && c <= '9'; }) &&
            word.size() <= 10) {
            id = std::stoi(word.substr(1));
        }
        require(id >= kFirstContent && id < vocab_size, ErrorCode::vocabulary,
                "'" + word + "' is not a content token of a " + std::to_string(vocab_size) + "-token vocabulary");
        out.push_back(id);
    }
    return out;
}

Mat token_templates(const SynthConfig& config) {
    Rng rng(derive_seed(config.seed, "templates"));
    Mat t(config.vocab_size, config.d_e);
    fill_normal(t, rng, 1.0);
    return t;
}

std::vector<int> translation_permutation(const SynthConfig& config) {
    std::vector<int> content;
    for (int t = kFirstContent; t < config.vocab_size; ++t) {
        content.push_back(t);
    }
    Rng rng(derive_seed(config.mapping_seed, "translation-permutation"));
    rng.shuffle(content);
    std::vector<int> pi(static_cast<size_t>(config.vocab_size));
    for (int t = 0; t < kFirstContent; ++t) {
        pi[static_cast<size_t>(t)] = t;
    }
    for (size_t i = 0; i < content.size(); ++i) {
        pi[kFirstContent + i] = content[i];
    }
    return pi;
}

FeatureMatrix synth_features(const std::vector<int>& tokens, const SynthConfig& config, const Mat& templates,
                             Rng& rng) {
    require(!tokens.empty(), ErrorCode::config, "cannot synthesize features for an empty transcript");
    std::vector<int> repeats;
    Eigen::Index total = 0;
    for (const int t : tokens) {
        require(t >= 0 && t < templates.rows(), ErrorCode::vocabulary, "token " + std::to_string(t) + " has no template");
        repeats.push_back(
            static_cast<int>(rng.uniform_int(config.min_frames_per_token, config.max_frames_per_token)));
        total += repeats.back();
    }
    FeatureMatrix f;
    f.frame_rate_hz = config.frame_rate_hz;
    f.frames.resize(total, templates.cols());
    Eigen::Index row = 0;
    for (size_t i = 0; i < tokens.size(); ++i) {
        for (int r = 0; r < repeats[i]; ++r, ++row) {
            for (Eigen::Index c = 0; c < templates.cols(); ++c) {
                const double noise = config.noise_std > 0.0 ? config.noise_std * rng.normal() : 0.0;
                f.frames(row, c) = static_cast<float>(templates(tokens[i], c) + noise);
            }
        }
    }
    return f;
}

Dataset gen_dataset(const SynthConfig& config) {
    config.validate();
    Dataset ds;
    ds.config = config;
    const Mat templates = token_templates(config);
    const std::vector<int> pi = translation_permutation(config);
    Rng text_rng(derive_seed(config.seed, "transcripts"));
    Rng feat_rng(derive_seed(config.seed, "features"));
    for (int i = 0; i < config.corpus_size; ++i) {
        Utterance u;
        std::ostringstream id;
        id << "utt" << std::setw(5) << std::setfill('0') << i;
        u.id = id.str();
        const auto len = static_cast<int>(text_rng.uniform_int(config.min_len, config.max_len));
        // Adjacent repeats would be indistinguishable from a longer frame run.
        while (static_cast<int>(u.transcript.size()) < len) {
            const auto t = static_cast<int>(text_rng.uniform_int(kFirstContent, config.vocab_size - 1));
            if (u.transcript.empty() || u.transcript.back() != t) {
                u.transcript.push_back(t);
            }
        }
        for (const int t : u.transcript) {
            u.target.push_back(config.task == Task::translate ? pi[static_cast<size_t>(t)] : t);
        }
        u.features = synth_features(u.transcript, config, templates, feat_rng);
        ds.utterances.push_back(std::move(u));
    }

    std::vector<size_t> order(ds.utterances.size());
    for (size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    Rng split_rng(derive_seed(config.seed, "splits"));
    split_rng.shuffle(order);
    const auto n = static_cast<int>(order.size());
    const int n_held = std::max(1, static_cast<int>(std::lround(0.1 * n)));
    for (int i = 0; i < n; ++i) {
        const char* split = i < n_held ? "dev" : (i < 2 * n_held ? "test" : "train");
        ds.utterances[order[static_cast<size_t>(i)]].split = split;
    }
    return ds;
}

std::string dataset_hash(const Dataset& ds) {
    std::string canon = "speechprune-dataset/" + std::to_string(kDatasetFormatVersion) + "\n";
    canon += config_to_json(ds.config).dump() + "\n";
    canon += index_tsv(ds);
    for (const Utterance& u : ds.utterances) {
        const Bytes b = encode_features(u.features);
        canon += sha256_hex(b.data(), b.size()) + "\n";
    }
    return sha256_hex(canon);
}

void save_dataset(const fs::path& dir, const Dataset& ds) {
    fs::create_directories(dir / "features");
    for (const Utterance& u : ds.utterances) {
        save_features(dir / "features" / (u.id + ".feat"), u.features);
    }
    atomic_write(dir / "index.tsv", index_tsv(ds));
    std::map<std::string, int> counts;
    for (const Utterance& u : ds.utterances) {
        ++counts[u.split];
    }
    const json manifest{{"format", "speechprune-dataset"},
                        {"version", kDatasetFormatVersion},
                        {"id", ds.id()},
                        {"hash", dataset_hash(ds)},
                        {"config", config_to_json(ds.config)},
                        {"splits", counts}};
    atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    require(fs::exists(manifest_path), ErrorCode::io, "dataset manifest missing: " + manifest_path.string());
    const Bytes mbytes = read_file(manifest_path);
    json manifest;
    try {
        manifest = json::parse(mbytes.begin(), mbytes.end());
    } catch (const json::exception& e) {
        fail(ErrorCode::io, "malformed dataset manifest " + manifest_path.string() + ": " + e.what());
    }
    Dataset ds;
    try {
        require(manifest.value("format", "") == "speechprune-dataset", ErrorCode::io,
                manifest_path.string() + " is not a dataset manifest");
        const int version = manifest.at("version").get<int>();
        require(version == kDatasetFormatVersion, ErrorCode::version,
                "dataset format version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kDatasetFormatVersion) + ")");
        ds.config = config_from_json(manifest.at("config"));
    } catch (const json::exception& e) {
        fail(ErrorCode::io, "malformed dataset manifest " + manifest_path.string() + ": " + e.what());
    }

    const fs::path index_path = dir / "index.tsv";
    require(fs::exists(index_path), ErrorCode::io, "dataset index missing: " + index_path.string());
    std::ifstream in(index_path);
    std::string line;
    std::getline(in, line);
    require(line == "id\ttranscript\ttarget\tfeature_file\tnum_frames\tsplit", ErrorCode::io,
            "unexpected header in " + index_path.string());
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        const auto cols = split_tabs(line);
        require(cols.size() == 6, ErrorCode::io,
                index_path.string() + ":" + std::to_string(lineno) + ": expected 6 columns");
        Utterance u;
        u.id = cols[0];
        u.transcript = text_to_tokens(cols[1], ds.config.vocab_size);
        u.target = text_to_tokens(cols[2], ds.config.vocab_size);
        const fs::path feat = dir / cols[3];
        require(fs::exists(feat), ErrorCode::io,
                "utterance " + u.id + ": feature file missing (" + feat.string() + ")");
        u.features = load_features(feat);
        require(std::to_string(u.features.frames.rows()) == cols[4], ErrorCode::io,
                "utterance " + u.id + ": index says " + cols[4] + " frames, file has " +
                    std::to_string(u.features.frames.rows()));
        u.split = cols[5];
        ds.utterances.push_back(std::move(u));
    }
    require(!ds.utterances.empty(), ErrorCode::io, "dataset " + dir.string() + " has no utterances");
    if (manifest.contains("hash")) {
        const std::string expected = manifest["hash"].get<std::string>();
        require(dataset_hash(ds) == expected, ErrorCode::checksum,
                "dataset " + dir.string() + " does not match the hash recorded in its manifest");
    }
    return ds;
}

}  // namespace speechprune

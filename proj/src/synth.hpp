#pragma once

#include "speech.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace speechprune {

// Fixed toy vocabulary: ids below kFirstContent are reserved.
inline constexpr int kPadToken = 0;
inline constexpr int kEosToken = 1;
inline constexpr int kPromptTranscribe = 2;
inline constexpr int kPromptTranslate = 3;
inline constexpr int kFirstContent = 4;

enum class Task : uint8_t { transcribe, translate };

std::string_view to_string(Task t);
Task parse_task(std::string_view s);
std::vector<int> task_prompt(Task t);

struct SynthConfig {
    int vocab_size = 64;
    int min_len = 4;
    int max_len = 8;
    int min_frames_per_token = 2;
    int max_frames_per_token = 4;
    int d_e = 16;
    double noise_std = 0.1;
    Task task = Task::transcribe;
    uint64_t mapping_seed = 0;
    int corpus_size = 2000;
    uint64_t seed = 0;
    double frame_rate_hz = 50.0;

    void validate() const;
};

struct Utterance {
    std::string id;
    FeatureMatrix features;
    std::vector<int> transcript;
    std::vector<int> target;  // equals transcript for the transcribe task
    std::string split;        // train / dev / test
};

struct Dataset {
    SynthConfig config;
    std::vector<Utterance> utterances;

    // Short content hash; doubles as the dataset id in reports.
    std::string id() const;
    std::vector<const Utterance*> split(std::string_view name) const;
};

// Content tokens render as "w<id>".
std::string tokens_to_text(const std::vector<int>& tokens);
std::vector<int> text_to_tokens(std::string_view text, int vocab_size);

// vocab_size x d_e per-token templates, drawn once from the corpus seed.
Mat token_templates(const SynthConfig& config);

// Content-token permutation for the translate task; identity on reserved ids.
std::vector<int> translation_permutation(const SynthConfig& config);

// Each token emits r ~ U[min_fpt, max_fpt] noisy copies of its template.
FeatureMatrix synth_features(const std::vector<int>& tokens, const SynthConfig& config, const Mat& templates,
                             Rng& rng);

Dataset gen_dataset(const SynthConfig& config);

// SHA-256 over config, index rows and feature bytes.
std::string dataset_hash(const Dataset& ds);

// Layout: manifest.json, index.tsv, features/<id>.feat.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace speechprune

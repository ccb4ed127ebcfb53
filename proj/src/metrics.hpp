#pragma once

#include "model.hpp"
#include "speech.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace speechprune {

// Lowercases ASCII, turns ASCII punctuation into spaces and collapses runs
// of whitespace. Idempotent.
std::string normalize_text(std::string_view s);

std::vector<std::string> split_words(std::string_view s);

// Word-level Levenshtein distance with unit costs.
int edit_distance(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);

struct WerStats {
    long edits = 0;
    long words = 0;
    double percent() const { return 100.0 * static_cast<double>(edits) / static_cast<double>(words); }
};

// Corpus-pooled WER after normalization, in percent.
WerStats wer_stats(const std::vector<std::string>& refs, const std::vector<std::string>& hyps);
double wer(const std::vector<std::string>& refs, const std::vector<std::string>& hyps);

// Punctuation is detached from words, then split on whitespace.
std::vector<std::string> bleu_tokenize(std::string_view s);

// Corpus BLEU-4 with exponential smoothing of zero n-gram matches, in [0, 100].
double bleu(const std::vector<std::string>& refs, const std::vector<std::string>& hyps);

enum class Metric : uint8_t { wer, bleu };

std::string_view to_string(Metric m);
Metric parse_metric(std::string_view s);

struct DegradationRecord {
    Metric metric = Metric::wer;
    double baseline = 0.0;
    double score = 0.0;
    double delta = 0.0;
    std::string dataset_id;
    double drop_fraction = 0.0;
};

// delta = (s - s0) / s0; positive is worse for WER, negative for BLEU.
DegradationRecord relative_degradation(double score, double baseline, Metric metric);

struct Thresholds {
    double wer = 0.25;
    double bleu = 0.10;
};

// True when the record is within tolerance: delta <= threshold for WER,
// -delta <= threshold for BLEU.
bool within_threshold(const DegradationRecord& r, double threshold);

// Largest drop fraction at which every dataset is within tolerance; 0 when
// none is. Throws coverage when drop levels disagree on the dataset set.
double max_prunable_fraction(const std::vector<DegradationRecord>& records, double threshold);

// Same, with the threshold chosen per record by its metric.
double max_prunable_fraction(const std::vector<DegradationRecord>& records, const Thresholds& thresholds);

// Greedy argmax continuation (ties -> smallest id) until eos or max_len.
// The returned tokens exclude eos.
std::vector<int> greedy_decode(const DecoderModel& model, const Projector& projector,
                               const StackedFeatures& features, const std::vector<int>& prompt, int max_len,
                               int eos_token);

// Same result for a batch decoded with `padding` extra zero rows appended
// past every sequence; the causal mask makes them invisible.
std::vector<std::vector<int>> greedy_decode_batch(const DecoderModel& model, const Projector& projector,
                                                  const std::vector<StackedFeatures>& features,
                                                  const std::vector<int>& prompt, int max_len, int eos_token,
                                                  int padding = 0);

struct BenchmarkWorkload {
    int batch = 8;
    int seq_len = 256;
    int warmup = 2;
    int runs = 20;
    uint64_t seed = 0;
};

struct BenchmarkResult {
    std::string name;
    int num_layers = 0;
    double median_seconds = 0.0;
    std::vector<double> samples;
    int64_t parameter_bytes = 0;
    int64_t peak_rss_bytes = 0;  // resident high-water mark during the runs, 0 if unavailable
};

struct ModelVariant {
    std::string name;
    std::function<DecoderModel()> make;
};

// Each variant is built, warmed up and timed in isolation so the memory
// high-water mark reflects only that variant.
std::vector<BenchmarkResult> benchmark_forward(const std::vector<ModelVariant>& variants,
                                               const BenchmarkWorkload& workload);

// 1 - t_variant / t_reference (fraction of wall-clock saved).
double speedup(const BenchmarkResult& reference, const BenchmarkResult& variant);

}  // namespace speechprune

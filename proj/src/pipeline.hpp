#pragma once

#include "checkpoint.hpp"
#include "metrics.hpp"
#include "redundancy.hpp"
#include "synth.hpp"
#include "trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace speechprune {

inline constexpr const char* kToolVersion = "0.1.0";

// Workflow commands. Each takes a JSON object of options (unknown keys are
// a config error), writes its artifacts plus run_manifest.json under the
// "out" directory, and returns a JSON summary.
//
//   gen            synthetic corpus
//   pretrain       full-decoder multitask training on text (and optionally
//                  speech through a scratch projector)
//   train          projector-only SLAM training on a frozen decoder
//   analyze        distance heatmap + pruning path
//   prune          block removal by path/drop fraction or explicit block
//   heal           adapter / projector healing of a pruned checkpoint
//   eval           decoding, metrics and degradation report
//   sweep          prune + heal + eval grid with degradation curves
//   compare-paths  path/heatmap agreement
//   benchmark      forward speed and memory, unpruned vs pruned
nlohmann::json run_command(std::string_view name, const nlohmann::json& options);
const std::vector<std::string>& command_names();

// $SPEECHPRUNE_OUT when set, otherwise ./runs.
std::filesystem::path default_output_root();

// Default decode length for a dataset: longest possible target plus slack.
int default_max_decode_len(const SynthConfig& config);

// Greedy transcripts for the given utterances under the checkpoint's model.
std::vector<std::vector<int>> decode_utterances(const Checkpoint& ckpt, const std::vector<const Utterance*>& utts,
                                                const std::vector<int>& prompt, int max_len);

// Corpus score (WER or BLEU) of decoded output against utterance targets.
double score_utterances(const Checkpoint& ckpt, const std::vector<const Utterance*>& utts, Task task, Metric metric,
                        int max_len);

// Embedded analysis inputs: the teacher-forced (speech?, prompt, target,
// eos) sequence of every utterance.
std::vector<Mat> analysis_inputs(const Checkpoint& ckpt, const std::vector<const Utterance*>& utts, Task task,
                                 InputMode mode);

}  // namespace speechprune

#pragma once

#include "model.hpp"
#include "speech.hpp"

#include <string>
#include <vector>

namespace speechprune {

enum class HealingStrategy : uint8_t { none, decoder, projector, joint };

std::string_view to_string(HealingStrategy s);
HealingStrategy parse_healing_strategy(std::string_view s);

// Removes layers start+1 .. start+size (1-based over the current stack), so
// h_start feeds the layer that used to follow h_{start+size}.
struct SurgeryPlan {
    int start = 0;
    int size = 1;
    std::string path_fingerprint;
    HealingStrategy strategy = HealingStrategy::none;
    std::vector<int> removed_original_ids;  // filled by prune_block

    bool operator==(const SurgeryPlan&) const = default;
};

// Throws range when the block runs past the stack and plan when it would
// remove the final layer.
void validate_plan(const DecoderModel& model, const SurgeryPlan& plan);

// Index into model.layers of the first surviving layer after the block,
// valid after pruning.
int receiving_layer(const SurgeryPlan& plan);

void prune_block(DecoderModel& model, SurgeryPlan& plan);

struct HealingConfig {
    int rank = 64;
    float alpha = 64.0f;
    float dropout = 0.05f;
    uint64_t seed = 0;
};

// Freezes everything, then unfreezes what the strategy heals. Returns the
// trainable registry (pointers into model and projector).
std::vector<NamedParam> apply_healing(DecoderModel& model, Projector& projector, const SurgeryPlan& plan,
                                      const HealingConfig& config);

}  // namespace speechprune

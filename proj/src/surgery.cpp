#include "surgery.hpp"

namespace speechprune {

std::string_view to_string(HealingStrategy s) {
    switch (s) {
        case HealingStrategy::none: return "none";
        case HealingStrategy::decoder: return "decoder";
        case HealingStrategy::projector: return "projector";
        case HealingStrategy::joint: return "joint";
    }
    return "none";
}

HealingStrategy parse_healing_strategy(std::string_view s) {
    if (s == "none") {
        return HealingStrategy::none;
    }
    if (s == "decoder" || s == "decoder-only") {
        return HealingStrategy::decoder;
    }
    if (s == "projector" || s == "projector-only") {
        return HealingStrategy::projector;
    }
    if (s == "joint") {
        return HealingStrategy::joint;
    }
    fail(ErrorCode::config, "unknown healing strategy '" + std::string(s) + "'");
}

void validate_plan(const DecoderModel& model, const SurgeryPlan& plan) {
    const int depth = model.num_layers();
    require(plan.size >= 1, ErrorCode::range, "block size must be >= 1");
    require(plan.start >= 0, ErrorCode::range, "block start must be >= 0");
    require(plan.start + plan.size <= depth, ErrorCode::range,
            "block (start " + std::to_string(plan.start) + ", size " + std::to_string(plan.size) +
                ") exceeds depth " + std::to_string(depth));
    require(plan.start + plan.size < depth, ErrorCode::plan,
            "block (start " + std::to_string(plan.start) + ", size " + std::to_string(plan.size) +
                ") would remove the final layer");
}

int receiving_layer(const SurgeryPlan& plan) {
    return plan.start;
}

void prune_block(DecoderModel& model, SurgeryPlan& plan) {
    validate_plan(model, plan);
    const auto first = model.layers.begin() + plan.start;
    const auto ids_first = model.original_layer_ids.begin() + plan.start;
    plan.removed_original_ids.assign(ids_first, ids_first + plan.size);
    model.layers.erase(first, first + plan.size);
    model.original_layer_ids.erase(ids_first, ids_first + plan.size);
}

std::vector<NamedParam> apply_healing(DecoderModel& model, Projector& projector, const SurgeryPlan& plan,
                                      const HealingConfig& config) {
    freeze_all(model);
    projector.set_trainable(false);
    std::vector<NamedParam> registry;
    if (plan.strategy == HealingStrategy::decoder || plan.strategy == HealingStrategy::joint) {
        const int recv = receiving_layer(plan);
        require(recv >= 0 && recv < model.num_layers(), ErrorCode::consistency,
                "receiving layer " + std::to_string(recv) + " is absent from the pruned model");
        LoraTargets targets;
        targets.projections = {Projection::mlp_up, Projection::mlp_down};
        targets.layers = {recv};
        attach_lora(model, targets, config.rank, config.alpha, config.dropout, config.seed);
        for (const NamedParam& np : named_parameters(model)) {
            if (np.param->trainable) {
                registry.push_back(np);
            }
        }
    }
    if (plan.strategy == HealingStrategy::projector || plan.strategy == HealingStrategy::joint) {
        projector.set_trainable(true);
        for (const NamedParam& np : named_parameters(projector)) {
            registry.push_back(np);
        }
    }
    return registry;
}

}  // namespace speechprune

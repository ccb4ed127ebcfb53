#pragma once

#include "model.hpp"
#include "speech.hpp"

#include <map>
#include <string>
#include <vector>

namespace speechprune {

struct TrainConfig {
    int total_steps = 1000;
    double peak_lr = 5e-4;
    double warmdown_fraction = 0.6;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    double grad_clip_norm = 1.0;
    int batch_size = 8;
    uint64_t seed = 0;

    void validate() const;
};

// Constant peak for the first (1 - warmdown_fraction) of the steps, then a
// linear ramp to zero at total_steps.
double lr_at(int step, const TrainConfig& config);

// Scales every gradient so the global L2 norm is at most max_norm. Returns
// the norm before clipping. Throws numeric (naming the tensor) on NaN/Inf.
double clip_gradients(const std::vector<NamedParam>& params, double max_norm);

struct AdamState {
    struct Moments {
        Mat m;
        Mat v;
    };
    std::map<std::string, Moments> moments;
    int64_t step = 0;
};

void adam_step(const std::vector<NamedParam>& params, AdamState& state, double lr, double beta1, double beta2,
               double eps);

// One supervised sequence. Speech examples carry stacked features routed
// through the projector; text examples embed `source` tokens instead.
struct TrainExample {
    StackedFeatures speech;
    std::vector<int> source;
    std::vector<int> prompt;
    std::vector<int> target;  // includes the end-of-sequence token
    bool is_speech = true;
};

enum class TrainMode : uint8_t { pretrain, base, heal };

struct TrainReport {
    std::vector<double> losses;
    std::vector<double> lrs;
    double final_loss = 0.0;
    double wall_seconds = 0.0;
    int steps = 0;
};

// Builds the decoder input for one example.
AssembledSequence assemble_example(const DecoderModel& model, const Projector& projector, const TrainExample& ex,
                                   ProjectorCache* cache);

// Mean masked NLL of the batch and its gradient into every trainable tensor.
double accumulate_batch_gradients(DecoderModel& model, Projector& projector, const std::vector<const TrainExample*>& batch,
                                  Rng* dropout_rng);

// Trains exactly the tensors in `registry`; everything else stays bitwise
// frozen. Batches are drawn from `data` by seeded epoch shuffles.
TrainReport train(DecoderModel& model, Projector& projector, const std::vector<TrainExample>& data,
                  const TrainConfig& config, TrainMode mode, const std::vector<NamedParam>& registry);

// Loss series as "step,loss,lr".
std::string loss_csv(const TrainReport& report);

}  // namespace speechprune

#pragma once

#include "common.hpp"

#include <array>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace speechprune {

struct ModelConfig {
    int num_layers = 8;
    int d_model = 128;
    int num_heads = 4;
    int d_mlp = 256;
    int vocab_size = 64;
    int max_seq_len = 512;
    double norm_eps = 1e-5;
    uint64_t seed = 0;

    int head_dim() const { return d_model / num_heads; }

    // Throws ErrorCode::config on any violated invariant.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

enum class Projection : int { q = 0, k, v, o, mlp_up, mlp_down };
inline constexpr int kNumProjections = 6;
inline constexpr std::array<Projection, kNumProjections> kAllProjections = {
    Projection::q, Projection::k, Projection::v, Projection::o, Projection::mlp_up, Projection::mlp_down};

std::string_view projection_name(Projection p);

// Low-rank update W + (alpha / rank) * A^T B^T on a d_in x d_out host.
// A is rank x d_in, B is d_out x rank; a fresh adapter has B == 0.
struct LoraAdapter {
    int rank = 0;
    float alpha = 0.0f;
    float dropout = 0.0f;
    Param a;
    Param b;

    float scale() const { return alpha / static_cast<float>(rank); }
    Eigen::Index parameter_count() const { return a.size() + b.size(); }
};

struct Linear {
    Param weight;  // d_in x d_out, y = x W
    std::optional<LoraAdapter> lora;

    Eigen::Index in_dim() const { return weight.rows(); }
    Eigen::Index out_dim() const { return weight.cols(); }
};

struct DecoderLayer {
    Param attn_norm;  // 1 x d_model gain
    Linear q, k, v, o;
    Param mlp_norm;   // 1 x d_model gain
    Linear up, down;

    Linear& projection(Projection p);
    const Linear& projection(Projection p) const;
};

struct DecoderModel {
    ModelConfig config;
    Param embed;       // vocab x d_model
    std::vector<DecoderLayer> layers;
    Param final_norm;  // 1 x d_model gain
    Param lm_head;     // d_model x vocab
    // 1-based ids of the surviving layers in the unpruned ancestor.
    std::vector<int> original_layer_ids;

    int num_layers() const { return static_cast<int>(layers.size()); }
};

struct NamedParam {
    std::string name;
    Param* param;
};

// Every tensor of the model, in a fixed order, with stable names.
std::vector<NamedParam> named_parameters(DecoderModel& model);

// Sets every parameter (base weights and adapters) to frozen.
void freeze_all(DecoderModel& model);

DecoderModel init_decoder(const ModelConfig& config);

// Last-token residual-stream states: states[0] is the input embedding,
// states[i] the stream after the i-th executed layer. Pre final norm.
struct HiddenTrace {
    std::vector<Vec> states;
};

struct LoraCache {
    Mat input;  // adapter input after dropout
    Mat mask;   // dropout scaling (empty when dropout inactive)
    Mat low;    // input * A^T
};

struct LayerCache {
    int layer_index = 0;
    Mat x_in;
    Mat n1;
    RowVec inv_rms1;
    Mat q, k, v;  // post-rotary q and k
    std::vector<Mat> probs;
    Mat ctx;
    Mat x_mid;
    Mat n2;
    RowVec inv_rms2;
    Mat up_pre;
    Mat up_act;
    std::array<LoraCache, kNumProjections> lora;
};

struct ForwardCache {
    Mat inputs;
    std::vector<LayerCache> layers;
    Mat x_final;
    RowVec inv_rms_final;
    Mat normed_final;
};

struct ForwardOptions {
    bool capture = false;
    // Training enables adapter dropout (needs dropout_rng) and keeps the
    // activation cache for backward.
    bool training = false;
    Rng* dropout_rng = nullptr;
    // Indices into model.layers that are bypassed; the residual stream
    // passes through unchanged.
    std::set<int> skip_layers;
};

struct ForwardResult {
    Mat logits;  // L x vocab
    std::optional<HiddenTrace> trace;
    std::shared_ptr<ForwardCache> cache;
};

// inputs: L x d_model embedded sequence. Causal: row t of the logits depends
// only on rows 0..t of the inputs.
ForwardResult forward(const DecoderModel& model, const Mat& inputs, const ForwardOptions& options = {});

// Accumulates gradients into trainable parameters given dL/dlogits. Returns
// dL/dinputs when need_input_grad is set, otherwise an empty matrix (and
// stops at the lowest layer that holds a trainable tensor).
Mat backward(DecoderModel& model, const ForwardCache& cache, const Mat& d_logits, bool need_input_grad);

struct LoraTargets {
    std::set<Projection> projections;
    // Indices into model.layers; empty means every layer.
    std::set<int> layers;
};

// Parses a comma-separated selector over q,k,v,o,mlp_up,mlp_down plus the
// groups "attn" (q,k,v,o) and "mlp" (mlp_up,mlp_down).
std::set<Projection> parse_projection_selector(const std::string& selector);

// Returns the names of the adapters that were attached. New adapters are
// trainable, have Gaussian A and zero B.
std::vector<std::string> attach_lora(DecoderModel& model, const LoraTargets& targets, int rank, float alpha,
                                     float dropout, uint64_t seed);

// Folds every adapter into its host weight and removes it. No-op without
// adapters.
void merge_lora(DecoderModel& model);

int count_adapters(const DecoderModel& model);

float gelu(float x);
float gelu_grad(float x);

}  // namespace speechprune

#pragma once

#include "common.hpp"
#include "io.hpp"
#include "model.hpp"

#include <filesystem>
#include <vector>

namespace speechprune {

// T' x d_e encoder output.
struct FeatureMatrix {
    Mat frames;
    double frame_rate_hz = 50.0;
};

// N x (k * d_e); row i concatenates source frames i*k .. i*k+k-1.
struct StackedFeatures {
    Mat rows;
    int k = 1;
};

// Drops the trailing T' mod k frames. Throws empty_output when T' < k.
StackedFeatures stack_frames(const FeatureMatrix& features, int k);

// Inverse of stack_frames over the first N*k frames.
Mat unstack_frames(const StackedFeatures& stacked);

// Two-layer MLP: Linear -> GELU -> Linear.
struct Projector {
    int k = 2;
    int d_e = 16;
    int d_hidden = 128;
    int d_model = 128;
    Param w1;  // (k * d_e) x d_hidden
    Param b1;  // 1 x d_hidden
    Param w2;  // d_hidden x d_model
    Param b2;  // 1 x d_model

    int input_dim() const { return k * d_e; }
    void set_trainable(bool trainable);
    bool trainable() const { return w1.trainable; }
};

Projector init_projector(int k, int d_e, int d_hidden, int d_model, uint64_t seed);

std::vector<NamedParam> named_parameters(Projector& projector);

struct ProjectorCache {
    Mat z;
    Mat pre;
    Mat act;
};

Mat project(const Projector& projector, const StackedFeatures& z, ProjectorCache* cache = nullptr);

// Accumulates into trainable projector parameters.
void project_backward(Projector& projector, const ProjectorCache& cache, const Mat& d_out);

enum class Segment : uint8_t { speech = 0, prompt = 1, target = 2 };

struct AssembledSequence {
    Mat embeddings;               // L x d_model
    std::vector<Segment> segments;
    std::vector<int> tokens;      // -1 at speech positions
    std::vector<bool> loss_mask;  // true exactly on target positions

    Eigen::Index length() const { return embeddings.rows(); }
    int speech_rows() const;
};

// speech may have zero rows (text mode). Throws vocabulary on ids >= V.
AssembledSequence assemble(const Mat& speech, const std::vector<int>& prompt, const std::vector<int>& target,
                           const Mat& embed_table);

struct NllResult {
    double sum = 0.0;  // summed -log p over masked positions
    int count = 0;

    double mean() const { return sum / count; }
};

// Next-token shift: logits row t-1 scores the token at masked position t.
NllResult nll(const Mat& logits, const AssembledSequence& seq);

// Mean NLL over masked positions; throws loss_undefined with an empty mask.
double nll_loss(const Mat& logits, const AssembledSequence& seq);

// d(scale * summed NLL)/dlogits.
Mat nll_grad(const Mat& logits, const AssembledSequence& seq, float scale);

// Feature container: "SPRNFEAT", u32 version, u32 dtype (1 = f32 LE),
// u64 rows, u64 cols, f64 frame rate, then row-major payload.
Bytes encode_features(const FeatureMatrix& features);
FeatureMatrix decode_features(const Bytes& bytes, const std::string& context);
void save_features(const std::filesystem::path& path, const FeatureMatrix& features);
FeatureMatrix load_features(const std::filesystem::path& path);

}  // namespace speechprune

#include "speech.hpp"

#include "io.hpp"

#include <cmath>

namespace speechprune {

namespace {

constexpr std::string_view kFeatureMagic = "SPRNFEAT";
constexpr uint32_t kFeatureVersion = 1;
constexpr uint32_t kDtypeF32 = 1;

}  // namespace

StackedFeatures stack_frames(const FeatureMatrix& features, int k) {
    require(k >= 1, ErrorCode::config, "stacking factor k must be >= 1");
    const Eigen::Index frames = features.frames.rows();
    const Eigen::Index d_e = features.frames.cols();
    require(frames >= k, ErrorCode::empty_output,
            "utterance has " + std::to_string(frames) + " frames, fewer than k=" + std::to_string(k));
    const Eigen::Index n = frames / k;
    StackedFeatures out;
    out.k = k;
    out.rows.resize(n, k * d_e);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) {
            out.rows.block(i, j * d_e, 1, d_e) = features.frames.row(i * k + j);
        }
    }
    return out;
}

Mat unstack_frames(const StackedFeatures& stacked) {
    const Eigen::Index d_e = stacked.rows.cols() / stacked.k;
    Mat frames(stacked.rows.rows() * stacked.k, d_e);
    for (Eigen::Index i = 0; i < stacked.rows.rows(); ++i) {
        for (int j = 0; j < stacked.k; ++j) {
            frames.row(i * stacked.k + j) = stacked.rows.block(i, j * d_e, 1, d_e);
        }
    }
    return frames;
}

void Projector::set_trainable(bool trainable) {
    for (Param* p : {&w1, &b1, &w2, &b2}) {
        p->trainable = trainable;
        if (!trainable) {
            p->grad.resize(0, 0);
        }
    }
}

Projector init_projector(int k, int d_e, int d_hidden, int d_model, uint64_t seed) {
    require(k >= 1 && d_e >= 1 && d_hidden >= 1 && d_model >= 1, ErrorCode::config,
            "projector dimensions must be >= 1");
    Projector p;
    p.k = k;
    p.d_e = d_e;
    p.d_hidden = d_hidden;
    p.d_model = d_model;
    Rng rng(derive_seed(seed, "projector-init"));
    p.w1.value.resize(p.input_dim(), d_hidden);
    fill_normal(p.w1.value, rng, 1.0 / std::sqrt(static_cast<double>(p.input_dim())));
    p.b1.value.setZero(1, d_hidden);
    p.w2.value.resize(d_hidden, d_model);
    fill_normal(p.w2.value, rng, 1.0 / std::sqrt(static_cast<double>(d_hidden)));
    p.b2.value.setZero(1, d_model);
    return p;
}

std::vector<NamedParam> named_parameters(Projector& projector) {
    return {{"projector.lin1.weight", &projector.w1},
            {"projector.lin1.bias", &projector.b1},
            {"projector.lin2.weight", &projector.w2},
            {"projector.lin2.bias", &projector.b2}};
}

Mat project(const Projector& projector, const StackedFeatures& z, ProjectorCache* cache) {
    require(z.rows.cols() == projector.input_dim(), ErrorCode::shape,
            "stacked width " + std::to_string(z.rows.cols()) + " != projector input " +
                std::to_string(projector.input_dim()));
    Mat pre = z.rows * projector.w1.value;
    pre.rowwise() += projector.b1.value.row(0);
    Mat act = pre.unaryExpr([](float u) { return gelu(u); });
    Mat out = act * projector.w2.value;
    out.rowwise() += projector.b2.value.row(0);
    if (cache != nullptr) {
        cache->z = z.rows;
        cache->pre = std::move(pre);
        cache->act = std::move(act);
    }
    return out;
}

void project_backward(Projector& projector, const ProjectorCache& cache, const Mat& d_out) {
    if (!projector.trainable()) {
        return;
    }
    auto add = [](Param& p, const Mat& g) {
        if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
            p.grad.setZero(p.value.rows(), p.value.cols());
        }
        p.grad += g;
    };
    add(projector.w2, cache.act.transpose() * d_out);
    add(projector.b2, d_out.colwise().sum());
    Mat d_pre = d_out * projector.w2.value.transpose();
    for (Eigen::Index i = 0; i < d_pre.size(); ++i) {
        d_pre.data()[i] *= gelu_grad(cache.pre.data()[i]);
    }
    add(projector.w1, cache.z.transpose() * d_pre);
    add(projector.b1, d_pre.colwise().sum());
}

int AssembledSequence::speech_rows() const {
    int n = 0;
    for (const Segment s : segments) {
        n += s == Segment::speech ? 1 : 0;
    }
    return n;
}

AssembledSequence assemble(const Mat& speech, const std::vector<int>& prompt, const std::vector<int>& target,
                           const Mat& embed_table) {
    const Eigen::Index vocab = embed_table.rows();
    const Eigen::Index d = embed_table.cols();
    require(speech.rows() == 0 || speech.cols() == d, ErrorCode::shape,
            "speech embedding width " + std::to_string(speech.cols()) + " != d_model " + std::to_string(d));
    auto check = [&](int id) {
        require(id >= 0 && id < vocab, ErrorCode::vocabulary,
                "token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
    };
    const Eigen::Index length = speech.rows() + static_cast<Eigen::Index>(prompt.size() + target.size());
    AssembledSequence seq;
    seq.embeddings.resize(length, d);
    seq.segments.reserve(static_cast<size_t>(length));
    seq.tokens.reserve(static_cast<size_t>(length));
    seq.loss_mask.reserve(static_cast<size_t>(length));
    Eigen::Index row = 0;
    for (Eigen::Index i = 0; i < speech.rows(); ++i, ++row) {
        seq.embeddings.row(row) = speech.row(i);
        seq.segments.push_back(Segment::speech);
        seq.tokens.push_back(-1);
        seq.loss_mask.push_back(false);
    }
    for (const int id : prompt) {
        check(id);
        seq.embeddings.row(row++) = embed_table.row(id);
        seq.segments.push_back(Segment::prompt);
        seq.tokens.push_back(id);
        seq.loss_mask.push_back(false);
    }
    for (const int id : target) {
        check(id);
        seq.embeddings.row(row++) = embed_table.row(id);
        seq.segments.push_back(Segment::target);
        seq.tokens.push_back(id);
        seq.loss_mask.push_back(true);
    }
    return seq;
}

NllResult nll(const Mat& logits, const AssembledSequence& seq) {
    require(logits.rows() == seq.length(), ErrorCode::shape, "logit rows do not match sequence length");
    NllResult r;
    for (Eigen::Index t = 1; t < seq.length(); ++t) {
        if (!seq.loss_mask[static_cast<size_t>(t)]) {
            continue;
        }
        const auto row = logits.row(t - 1);
        const double mx = row.maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j < row.size(); ++j) {
            z += std::exp(static_cast<double>(row(j)) - mx);
        }
        const int gold = seq.tokens[static_cast<size_t>(t)];
        r.sum += -(static_cast<double>(row(gold)) - mx - std::log(z));
        ++r.count;
    }
    return r;
}

double nll_loss(const Mat& logits, const AssembledSequence& seq) {
    const NllResult r = nll(logits, seq);
    require(r.count > 0, ErrorCode::loss_undefined, "loss mask selects no positions");
    return r.mean();
}

Mat nll_grad(const Mat& logits, const AssembledSequence& seq, float scale) {
    Mat d = Mat::Zero(logits.rows(), logits.cols());
    for (Eigen::Index t = 1; t < seq.length(); ++t) {
        if (!seq.loss_mask[static_cast<size_t>(t)]) {
            continue;
        }
        const auto row = logits.row(t - 1);
        const float mx = row.maxCoeff();
        RowVec p = (row.array() - mx).exp().matrix();
        p /= p.sum();
        p(seq.tokens[static_cast<size_t>(t)]) -= 1.0f;
        d.row(t - 1) += scale * p;
    }
    return d;
}

Bytes encode_features(const FeatureMatrix& features) {
    ByteWriter w;
    w.raw(kFeatureMagic);
    w.u32(kFeatureVersion);
    w.u32(kDtypeF32);
    w.u64(static_cast<uint64_t>(features.frames.rows()));
    w.u64(static_cast<uint64_t>(features.frames.cols()));
    w.f64(features.frame_rate_hz);
    for (Eigen::Index i = 0; i < features.frames.size(); ++i) {
        w.f32(features.frames.data()[i]);
    }
    return std::move(w.bytes());
}

FeatureMatrix decode_features(const Bytes& bytes, const std::string& context) {
    ByteReader r(bytes.data(), bytes.size(), context);
    require(r.raw(kFeatureMagic.size()) == kFeatureMagic, ErrorCode::io, context + ": not a feature file");
    const uint32_t version = r.u32();
    require(version == kFeatureVersion, ErrorCode::version,
            context + ": unsupported feature file version " + std::to_string(version));
    require(r.u32() == kDtypeF32, ErrorCode::io, context + ": unsupported dtype");
    const uint64_t rows = r.u64();
    const uint64_t cols = r.u64();
    FeatureMatrix f;
    f.frame_rate_hz = r.f64();
    require(rows >= 1 && cols >= 1, ErrorCode::io, context + ": empty feature matrix");
    require(r.remaining() == rows * cols * 4, ErrorCode::io,
            context + ": payload size mismatch (truncated or trailing bytes)");
    f.frames.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < f.frames.size(); ++i) {
        f.frames.data()[i] = r.f32();
    }
    require(f.frames.allFinite(), ErrorCode::numeric, context + ": non-finite feature values");
    return f;
}

void save_features(const std::filesystem::path& path, const FeatureMatrix& features) {
    const Bytes b = encode_features(features);
    atomic_write(path, b.data(), b.size());
}

FeatureMatrix load_features(const std::filesystem::path& path) {
    require(std::filesystem::exists(path), ErrorCode::io, "missing feature file " + path.string());
    return decode_features(read_file(path), path.string());
}

}  // namespace speechprune

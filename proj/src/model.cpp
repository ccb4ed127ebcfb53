#include "model.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

namespace speechprune {

namespace {

constexpr double kRopeBase = 10000.0;

Param make_param(Eigen::Index rows, Eigen::Index cols) {
    Param p;
    p.value.setZero(rows, cols);
    return p;
}

void accumulate(Param& p, const Mat& g) {
    if (!p.trainable) {
        return;
    }
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
        p.grad.setZero(p.value.rows(), p.value.cols());
    }
    p.grad += g;
}

struct RopeTable {
    Mat cos;  // L x half
    Mat sin;
};

RopeTable rope_table(Eigen::Index length, int head_dim) {
    const int half = head_dim / 2;
    RopeTable t;
    t.cos.resize(length, half);
    t.sin.resize(length, half);
    for (Eigen::Index pos = 0; pos < length; ++pos) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::pow(kRopeBase, -2.0 * i / head_dim);
            const double angle = static_cast<double>(pos) * freq;
            t.cos(pos, i) = static_cast<float>(std::cos(angle));
            t.sin(pos, i) = static_cast<float>(std::sin(angle));
        }
    }
    return t;
}

// Rotates each head of x in place; inverse applies the transpose rotation.
void apply_rope(Mat& x, const RopeTable& t, int num_heads, int head_dim, bool inverse) {
    const int half = head_dim / 2;
    for (Eigen::Index pos = 0; pos < x.rows(); ++pos) {
        float* row = x.row(pos).data();
        for (int h = 0; h < num_heads; ++h) {
            float* head = row + static_cast<std::ptrdiff_t>(h) * head_dim;
            for (int i = 0; i < half; ++i) {
                const float c = t.cos(pos, i);
                const float s = inverse ? -t.sin(pos, i) : t.sin(pos, i);
                const float a = head[i];
                const float b = head[i + half];
                head[i] = a * c - b * s;
                head[i + half] = a * s + b * c;
            }
        }
    }
}

Mat rms_norm(const Mat& x, const Param& gain, double eps, RowVec& inv_rms) {
    const auto cols = static_cast<float>(x.cols());
    inv_rms.resize(x.rows());
    Mat y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const float ms = x.row(r).squaredNorm() / cols;
        const float inv = 1.0f / std::sqrt(ms + static_cast<float>(eps));
        inv_rms(r) = inv;
        y.row(r) = x.row(r).cwiseProduct(gain.value.row(0)) * inv;
    }
    return y;
}

Mat rms_norm_backward(const Mat& x, const RowVec& inv_rms, Param& gain, const Mat& dy) {
    const auto cols = static_cast<float>(x.cols());
    Mat dx(x.rows(), x.cols());
    Mat dgain;
    if (gain.trainable) {
        dgain.setZero(1, x.cols());
    }
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const float inv = inv_rms(r);
        const RowVec xhat = x.row(r) * inv;
        const RowVec dxhat = dy.row(r).cwiseProduct(gain.value.row(0));
        if (gain.trainable) {
            dgain += dy.row(r).cwiseProduct(xhat);
        }
        const float proj = dxhat.dot(xhat) / cols;
        dx.row(r) = (dxhat - xhat * proj) * inv;
    }
    if (gain.trainable) {
        accumulate(gain, dgain);
    }
    return dx;
}

Mat linear_forward(const Linear& lin, const Mat& x, const ForwardOptions& opt, LoraCache* cache) {
    Mat y = x * lin.weight.value;
    if (lin.lora) {
        const LoraAdapter& ad = *lin.lora;
        Mat input;
        Mat mask;
        if (opt.training && ad.dropout > 0.0f) {
            require(opt.dropout_rng != nullptr, ErrorCode::config, "adapter dropout requires an rng");
            const float keep = 1.0f - ad.dropout;
            mask.resize(x.rows(), x.cols());
            for (Eigen::Index i = 0; i < mask.size(); ++i) {
                mask.data()[i] = opt.dropout_rng->uniform() < ad.dropout ? 0.0f : 1.0f / keep;
            }
            input = x.cwiseProduct(mask);
        } else {
            input = x;
        }
        Mat low = input * ad.a.value.transpose();
        y.noalias() += ad.scale() * (low * ad.b.value.transpose());
        if (cache != nullptr) {
            cache->input = std::move(input);
            cache->mask = std::move(mask);
            cache->low = std::move(low);
        }
    }
    return y;
}

Mat linear_backward(Linear& lin, const Mat& x, const Mat& dy, const LoraCache& cache) {
    if (lin.weight.trainable) {
        accumulate(lin.weight, x.transpose() * dy);
    }
    Mat dx = dy * lin.weight.value.transpose();
    if (lin.lora) {
        LoraAdapter& ad = *lin.lora;
        const float s = ad.scale();
        if (ad.b.trainable) {
            accumulate(ad.b, s * (dy.transpose() * cache.low));
        }
        const Mat dlow = s * (dy * ad.b.value);
        if (ad.a.trainable) {
            accumulate(ad.a, dlow.transpose() * cache.input);
        }
        Mat dinput = dlow * ad.a.value;
        if (cache.mask.size() > 0) {
            dinput = dinput.cwiseProduct(cache.mask);
        }
        dx += dinput;
    }
    return dx;
}

bool linear_has_trainable(const Linear& lin) {
    return lin.weight.trainable || (lin.lora && (lin.lora->a.trainable || lin.lora->b.trainable));
}

bool layer_has_trainable(const DecoderLayer& layer) {
    return layer.attn_norm.trainable || layer.mlp_norm.trainable || linear_has_trainable(layer.q) ||
           linear_has_trainable(layer.k) || linear_has_trainable(layer.v) || linear_has_trainable(layer.o) ||
           linear_has_trainable(layer.up) || linear_has_trainable(layer.down);
}

void softmax_causal_row(const float* scores, float* out, Eigen::Index upto, Eigen::Index width) {
    float mx = -std::numeric_limits<float>::infinity();
    for (Eigen::Index j = 0; j <= upto; ++j) {
        mx = std::max(mx, scores[j]);
    }
    float sum = 0.0f;
    for (Eigen::Index j = 0; j <= upto; ++j) {
        out[j] = std::exp(scores[j] - mx);
        sum += out[j];
    }
    const float inv = 1.0f / sum;
    for (Eigen::Index j = 0; j <= upto; ++j) {
        out[j] *= inv;
    }
    for (Eigen::Index j = upto + 1; j < width; ++j) {
        out[j] = 0.0f;
    }
}

}  // namespace

void ModelConfig::validate() const {
    require(num_layers >= 1, ErrorCode::config, "num_layers must be >= 1");
    require(d_model >= 1 && num_heads >= 1 && d_mlp >= 1 && vocab_size >= 1 && max_seq_len >= 1,
            ErrorCode::config, "all model dimensions must be >= 1");
    require(d_model % num_heads == 0, ErrorCode::config,
            "d_model (" + std::to_string(d_model) + ") is not divisible by num_heads (" +
                std::to_string(num_heads) + ")");
    require(head_dim() % 2 == 0, ErrorCode::config, "rotary encoding needs an even head dimension");
    require(norm_eps > 0.0 && std::isfinite(norm_eps), ErrorCode::config, "norm_eps must be positive");
}

std::string_view projection_name(Projection p) {
    switch (p) {
        case Projection::q: return "q";
        case Projection::k: return "k";
        case Projection::v: return "v";
        case Projection::o: return "o";
        case Projection::mlp_up: return "mlp_up";
        case Projection::mlp_down: return "mlp_down";
    }
    return "?";
}

Linear& DecoderLayer::projection(Projection p) {
    switch (p) {
        case Projection::q: return q;
        case Projection::k: return k;
        case Projection::v: return v;
        case Projection::o: return o;
        case Projection::mlp_up: return up;
        case Projection::mlp_down: return down;
    }
    fail(ErrorCode::selector, "unknown projection");
}

const Linear& DecoderLayer::projection(Projection p) const {
    return const_cast<DecoderLayer*>(this)->projection(p);
}

std::vector<NamedParam> named_parameters(DecoderModel& model) {
    std::vector<NamedParam> out;
    out.push_back({"embed", &model.embed});
    for (size_t i = 0; i < model.layers.size(); ++i) {
        DecoderLayer& layer = model.layers[i];
        const std::string prefix = "layers." + std::to_string(i) + ".";
        out.push_back({prefix + "attn_norm", &layer.attn_norm});
        for (const Projection p : kAllProjections) {
            if (p == Projection::mlp_up) {
                out.push_back({prefix + "mlp_norm", &layer.mlp_norm});
            }
            Linear& lin = layer.projection(p);
            const std::string base = prefix + std::string(projection_name(p));
            out.push_back({base + ".weight", &lin.weight});
            if (lin.lora) {
                out.push_back({base + ".lora_a", &lin.lora->a});
                out.push_back({base + ".lora_b", &lin.lora->b});
            }
        }
    }
    out.push_back({"final_norm", &model.final_norm});
    out.push_back({"lm_head", &model.lm_head});
    return out;
}

void freeze_all(DecoderModel& model) {
    for (auto& np : named_parameters(model)) {
        np.param->trainable = false;
        np.param->grad.resize(0, 0);
    }
}

DecoderModel init_decoder(const ModelConfig& config) {
    config.validate();
    DecoderModel model;
    model.config = config;
    Rng rng(derive_seed(config.seed, "decoder-init"));
    const int d = config.d_model;
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));

    model.embed = make_param(config.vocab_size, d);
    fill_normal(model.embed.value, rng, 1.0);

    for (int l = 0; l < config.num_layers; ++l) {
        DecoderLayer layer;
        layer.attn_norm = make_param(1, d);
        layer.attn_norm.value.setOnes();
        layer.mlp_norm = make_param(1, d);
        layer.mlp_norm.value.setOnes();
        for (const Projection p : kAllProjections) {
            Linear& lin = layer.projection(p);
            const int in = p == Projection::mlp_down ? config.d_mlp : d;
            const int out = p == Projection::mlp_up ? config.d_mlp : d;
            lin.weight = make_param(in, out);
            fill_normal(lin.weight.value, rng, proj_std);
        }
        model.layers.push_back(std::move(layer));
        model.original_layer_ids.push_back(l + 1);
    }
    model.final_norm = make_param(1, d);
    model.final_norm.value.setOnes();
    model.lm_head = make_param(d, config.vocab_size);
    fill_normal(model.lm_head.value, rng, proj_std);
    return model;
}

float gelu(float x) {
    return 0.5f * x * (1.0f + std::erf(x * static_cast<float>(M_SQRT1_2)));
}

float gelu_grad(float x) {
    const float cdf = 0.5f * (1.0f + std::erf(x * static_cast<float>(M_SQRT1_2)));
    const float pdf = std::exp(-0.5f * x * x) * static_cast<float>(0.5 * M_2_SQRTPI * M_SQRT1_2);
    return cdf + x * pdf;
}

ForwardResult forward(const DecoderModel& model, const Mat& inputs, const ForwardOptions& options) {
    const ModelConfig& cfg = model.config;
    const Eigen::Index length = inputs.rows();
    require(inputs.cols() == cfg.d_model, ErrorCode::shape,
            "input feature dim " + std::to_string(inputs.cols()) + " != d_model " + std::to_string(cfg.d_model));
    require(length >= 1, ErrorCode::length, "empty input sequence");
    require(length <= cfg.max_seq_len, ErrorCode::length,
            "sequence length " + std::to_string(length) + " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    require(inputs.allFinite(), ErrorCode::numeric, "non-finite value in forward inputs");

    const int heads = cfg.num_heads;
    const int hd = cfg.head_dim();
    const float attn_scale = 1.0f / std::sqrt(static_cast<float>(hd));
    const RopeTable rope = rope_table(length, hd);

    ForwardResult result;
    std::shared_ptr<ForwardCache> cache;
    if (options.training) {
        cache = std::make_shared<ForwardCache>();
        cache->inputs = inputs;
    }
    if (options.capture) {
        result.trace.emplace();
        result.trace->states.push_back(inputs.row(length - 1).transpose());
    }

    Mat x = inputs;
    Mat scores(length, length);
    Mat probs(length, length);
    for (int li = 0; li < model.num_layers(); ++li) {
        if (options.skip_layers.count(li) != 0) {
            continue;
        }
        const DecoderLayer& layer = model.layers[static_cast<size_t>(li)];
        LayerCache* lc = nullptr;
        if (cache) {
            cache->layers.emplace_back();
            lc = &cache->layers.back();
            lc->layer_index = li;
            lc->x_in = x;
        }
        auto lora_slot = [&](Projection p) -> LoraCache* {
            return lc != nullptr ? &lc->lora[static_cast<size_t>(p)] : nullptr;
        };

        RowVec inv1;
        Mat n1 = rms_norm(x, layer.attn_norm, cfg.norm_eps, inv1);
        Mat q = linear_forward(layer.q, n1, options, lora_slot(Projection::q));
        Mat k = linear_forward(layer.k, n1, options, lora_slot(Projection::k));
        Mat v = linear_forward(layer.v, n1, options, lora_slot(Projection::v));
        apply_rope(q, rope, heads, hd, false);
        apply_rope(k, rope, heads, hd, false);

        Mat ctx(length, cfg.d_model);
        for (int h = 0; h < heads; ++h) {
            const auto qh = q.middleCols(h * hd, hd);
            const auto kh = k.middleCols(h * hd, hd);
            scores.noalias() = (qh * kh.transpose()) * attn_scale;
            for (Eigen::Index i = 0; i < length; ++i) {
                softmax_causal_row(scores.row(i).data(), probs.row(i).data(), i, length);
            }
            ctx.middleCols(h * hd, hd).noalias() = probs * v.middleCols(h * hd, hd);
            if (lc != nullptr) {
                lc->probs.push_back(probs);
            }
        }
        const Mat attn_out = linear_forward(layer.o, ctx, options, lora_slot(Projection::o));
        x += attn_out;

        if (lc != nullptr) {
            lc->n1 = std::move(n1);
            lc->inv_rms1 = inv1;
            lc->q = std::move(q);
            lc->k = std::move(k);
            lc->v = std::move(v);
            lc->ctx = ctx;
            lc->x_mid = x;
        }

        RowVec inv2;
        Mat n2 = rms_norm(x, layer.mlp_norm, cfg.norm_eps, inv2);
        Mat up = linear_forward(layer.up, n2, options, lora_slot(Projection::mlp_up));
        Mat act = up.unaryExpr([](float u) { return gelu(u); });
        const Mat mlp_out = linear_forward(layer.down, act, options, lora_slot(Projection::mlp_down));
        x += mlp_out;

        if (lc != nullptr) {
            lc->n2 = std::move(n2);
            lc->inv_rms2 = inv2;
            lc->up_pre = std::move(up);
            lc->up_act = std::move(act);
        }
        if (options.capture) {
            result.trace->states.push_back(x.row(length - 1).transpose());
        }
    }

    RowVec inv_f;
    Mat xn = rms_norm(x, model.final_norm, cfg.norm_eps, inv_f);
    result.logits.noalias() = xn * model.lm_head.value;
    if (cache) {
        cache->x_final = std::move(x);
        cache->inv_rms_final = inv_f;
        cache->normed_final = std::move(xn);
        result.cache = std::move(cache);
    }
    return result;
}

Mat backward(DecoderModel& model, const ForwardCache& cache, const Mat& d_logits, bool need_input_grad) {
    const ModelConfig& cfg = model.config;
    const Eigen::Index length = cache.inputs.rows();
    const int heads = cfg.num_heads;
    const int hd = cfg.head_dim();
    const float attn_scale = 1.0f / std::sqrt(static_cast<float>(hd));

    if (model.lm_head.trainable) {
        accumulate(model.lm_head, cache.normed_final.transpose() * d_logits);
    }
    const Mat d_norm = d_logits * model.lm_head.value.transpose();
    Mat dx = rms_norm_backward(cache.x_final, cache.inv_rms_final, model.final_norm, d_norm);

    // Lowest cached layer that still needs a gradient.
    size_t stop = 0;
    if (!need_input_grad) {
        stop = cache.layers.size();
        for (size_t c = 0; c < cache.layers.size(); ++c) {
            if (layer_has_trainable(model.layers[static_cast<size_t>(cache.layers[c].layer_index)])) {
                stop = c;
                break;
            }
        }
    }

    const RopeTable rope = rope_table(length, hd);
    Mat dscores(length, length);
    for (size_t c = cache.layers.size(); c-- > stop;) {
        const LayerCache& lc = cache.layers[c];
        DecoderLayer& layer = model.layers[static_cast<size_t>(lc.layer_index)];
        auto lora_slot = [&](Projection p) -> const LoraCache& { return lc.lora[static_cast<size_t>(p)]; };

        // MLP sub-block.
        Mat d_act = linear_backward(layer.down, lc.up_act, dx, lora_slot(Projection::mlp_down));
        for (Eigen::Index i = 0; i < d_act.size(); ++i) {
            d_act.data()[i] *= gelu_grad(lc.up_pre.data()[i]);
        }
        const Mat d_n2 = linear_backward(layer.up, lc.n2, d_act, lora_slot(Projection::mlp_up));
        dx += rms_norm_backward(lc.x_mid, lc.inv_rms2, layer.mlp_norm, d_n2);

        // Attention sub-block.
        const Mat d_ctx = linear_backward(layer.o, lc.ctx, dx, lora_slot(Projection::o));
        Mat dq(length, cfg.d_model);
        Mat dk(length, cfg.d_model);
        Mat dv(length, cfg.d_model);
        for (int h = 0; h < heads; ++h) {
            const Mat& p = lc.probs[static_cast<size_t>(h)];
            const auto d_out = d_ctx.middleCols(h * hd, hd);
            dv.middleCols(h * hd, hd).noalias() = p.transpose() * d_out;
            const Mat dp = d_out * lc.v.middleCols(h * hd, hd).transpose();
            for (Eigen::Index i = 0; i < length; ++i) {
                float dot = 0.0f;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    dot += dp(i, j) * p(i, j);
                }
                for (Eigen::Index j = 0; j < length; ++j) {
                    dscores(i, j) = j <= i ? p(i, j) * (dp(i, j) - dot) * attn_scale : 0.0f;
                }
            }
            dq.middleCols(h * hd, hd).noalias() = dscores * lc.k.middleCols(h * hd, hd);
            dk.middleCols(h * hd, hd).noalias() = dscores.transpose() * lc.q.middleCols(h * hd, hd);
        }
        apply_rope(dq, rope, heads, hd, true);
        apply_rope(dk, rope, heads, hd, true);
        Mat d_n1 = linear_backward(layer.q, lc.n1, dq, lora_slot(Projection::q));
        d_n1 += linear_backward(layer.k, lc.n1, dk, lora_slot(Projection::k));
        d_n1 += linear_backward(layer.v, lc.n1, dv, lora_slot(Projection::v));
        dx += rms_norm_backward(lc.x_in, lc.inv_rms1, layer.attn_norm, d_n1);
    }
    if (!need_input_grad) {
        return {};
    }
    return dx;
}

std::set<Projection> parse_projection_selector(const std::string& selector) {
    std::set<Projection> out;
    std::stringstream ss(selector);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (item == "attn") {
            out.insert({Projection::q, Projection::k, Projection::v, Projection::o});
        } else if (item == "mlp") {
            out.insert({Projection::mlp_up, Projection::mlp_down});
        } else if (item == "all") {
            out.insert(kAllProjections.begin(), kAllProjections.end());
        } else {
            bool found = false;
            for (const Projection p : kAllProjections) {
                if (item == projection_name(p)) {
                    out.insert(p);
                    found = true;
                }
            }
            require(found, ErrorCode::selector, "unknown adapter target '" + item + "'");
        }
    }
    require(!out.empty(), ErrorCode::selector, "empty adapter target selector");
    return out;
}

std::vector<std::string> attach_lora(DecoderModel& model, const LoraTargets& targets, int rank, float alpha,
                                     float dropout, uint64_t seed) {
    require(rank >= 1, ErrorCode::config, "adapter rank must be >= 1");
    require(alpha > 0.0f, ErrorCode::config, "adapter alpha must be positive");
    require(dropout >= 0.0f && dropout < 1.0f, ErrorCode::config, "adapter dropout must be in [0, 1)");
    require(!targets.projections.empty(), ErrorCode::selector, "no adapter target projections");
    for (const int li : targets.layers) {
        require(li >= 0 && li < model.num_layers(), ErrorCode::selector,
                "adapter target layer " + std::to_string(li) + " does not exist");
    }
    std::vector<std::string> attached;
    for (int li = 0; li < model.num_layers(); ++li) {
        if (!targets.layers.empty() && targets.layers.count(li) == 0) {
            continue;
        }
        for (const Projection p : targets.projections) {
            Linear& lin = model.layers[static_cast<size_t>(li)].projection(p);
            const std::string name = "layers." + std::to_string(li) + "." + std::string(projection_name(p));
            require(!lin.lora, ErrorCode::consistency, name + " already carries an adapter");
            LoraAdapter ad;
            ad.rank = rank;
            ad.alpha = alpha;
            ad.dropout = dropout;
            ad.a.value.resize(rank, lin.in_dim());
            Rng rng(derive_seed(seed, "lora:" + name));
            fill_normal(ad.a.value, rng, 1.0 / std::sqrt(static_cast<double>(lin.in_dim())));
            ad.b.value.setZero(lin.out_dim(), rank);
            ad.a.trainable = true;
            ad.b.trainable = true;
            lin.lora = std::move(ad);
            attached.push_back(name);
        }
    }
    return attached;
}

void merge_lora(DecoderModel& model) {
    for (DecoderLayer& layer : model.layers) {
        for (const Projection p : kAllProjections) {
            Linear& lin = layer.projection(p);
            if (!lin.lora) {
                continue;
            }
            const LoraAdapter& ad = *lin.lora;
            if (!ad.b.value.isZero(0.0f)) {
                lin.weight.value.noalias() += ad.scale() * (ad.a.value.transpose() * ad.b.value.transpose());
            }
            lin.lora.reset();
        }
    }
}

int count_adapters(const DecoderModel& model) {
    int n = 0;
    for (const DecoderLayer& layer : model.layers) {
        for (const Projection p : kAllProjections) {
            n += layer.projection(p).lora ? 1 : 0;
        }
    }
    return n;
}

}  // namespace speechprune

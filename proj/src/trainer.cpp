#include "trainer.hpp"

#include "log.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace speechprune {

void TrainConfig::validate() const {
    require(total_steps >= 1, ErrorCode::config, "total_steps must be >= 1");
    require(peak_lr > 0.0, ErrorCode::config, "peak_lr must be positive");
    require(warmdown_fraction > 0.0 && warmdown_fraction <= 1.0, ErrorCode::config,
            "warmdown_fraction must be in (0, 1]");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorCode::config,
            "Adam betas must be in [0, 1)");
    require(grad_clip_norm > 0.0, ErrorCode::config, "grad_clip_norm must be positive");
    require(batch_size >= 1, ErrorCode::config, "batch_size must be >= 1");
}

double lr_at(int step, const TrainConfig& config) {
    require(step >= 0 && step <= config.total_steps, ErrorCode::range,
            "step " + std::to_string(step) + " outside 0.." + std::to_string(config.total_steps));
    const double total = config.total_steps;
    const double plateau_end = (1.0 - config.warmdown_fraction) * total;
    if (step <= plateau_end) {
        return config.peak_lr;
    }
    return config.peak_lr * (total - step) / (total - plateau_end);
}

double clip_gradients(const std::vector<NamedParam>& params, double max_norm) {
    double sq = 0.0;
    for (const NamedParam& np : params) {
        const Mat& g = np.param->grad;
        require(g.allFinite(), ErrorCode::numeric, "non-finite gradient in " + np.name);
        sq += static_cast<double>(g.squaredNorm());
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const auto scale = static_cast<float>(max_norm / norm);
        for (const NamedParam& np : params) {
            np.param->grad *= scale;
        }
    }
    return norm;
}

void adam_step(const std::vector<NamedParam>& params, AdamState& state, double lr, double beta1, double beta2,
               double eps) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    const auto b1 = static_cast<float>(beta1);
    const auto b2 = static_cast<float>(beta2);
    for (const NamedParam& np : params) {
        Param& p = *np.param;
        require(p.grad.rows() == p.value.rows() && p.grad.cols() == p.value.cols(), ErrorCode::shape,
                "gradient shape does not match parameter " + np.name);
        auto& mo = state.moments[np.name];
        if (mo.m.size() == 0) {
            mo.m.setZero(p.value.rows(), p.value.cols());
            mo.v.setZero(p.value.rows(), p.value.cols());
        }
        require(mo.m.rows() == p.value.rows() && mo.m.cols() == p.value.cols(), ErrorCode::shape,
                "optimizer state shape does not match parameter " + np.name);
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            const float g = p.grad.data()[i];
            float& m = mo.m.data()[i];
            float& v = mo.v.data()[i];
            m = b1 * m + (1.0f - b1) * g;
            v = b2 * v + (1.0f - b2) * g * g;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            p.value.data()[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

AssembledSequence assemble_example(const DecoderModel& model, const Projector& projector, const TrainExample& ex,
                                   ProjectorCache* cache) {
    if (ex.is_speech) {
        return assemble(project(projector, ex.speech, cache), ex.prompt, ex.target, model.embed.value);
    }
    std::vector<int> prefix = ex.source;
    const AssembledSequence src = assemble(Mat(0, model.config.d_model), {}, prefix, model.embed.value);
    AssembledSequence seq = assemble(src.embeddings, ex.prompt, ex.target, model.embed.value);
    for (size_t i = 0; i < prefix.size(); ++i) {
        seq.tokens[i] = prefix[i];
    }
    return seq;
}

double accumulate_batch_gradients(DecoderModel& model, Projector& projector,
                                  const std::vector<const TrainExample*>& batch, Rng* dropout_rng) {
    int total = 0;
    for (const TrainExample* ex : batch) {
        total += static_cast<int>(ex->target.size());
    }
    require(total > 0, ErrorCode::loss_undefined, "batch has no target tokens");
    const float scale = 1.0f / static_cast<float>(total);
    const bool embed_trainable = model.embed.trainable;
    double loss_sum = 0.0;
    ForwardOptions opt;
    opt.training = true;
    opt.dropout_rng = dropout_rng;
    for (const TrainExample* ex : batch) {
        ProjectorCache pcache;
        const AssembledSequence seq = assemble_example(model, projector, *ex, &pcache);
        const ForwardResult fr = forward(model, seq.embeddings, opt);
        const NllResult r = nll(fr.logits, seq);
        loss_sum += r.sum;
        const Mat d_logits = nll_grad(fr.logits, seq, scale);
        const bool need_speech_grad = ex->is_speech && projector.trainable();
        const Mat d_inputs = backward(model, *fr.cache, d_logits, need_speech_grad || embed_trainable);
        if (need_speech_grad) {
            project_backward(projector, pcache, d_inputs.topRows(seq.speech_rows()));
        }
        if (embed_trainable) {
            if (model.embed.grad.rows() != model.embed.value.rows()) {
                model.embed.grad.setZero(model.embed.value.rows(), model.embed.value.cols());
            }
            for (Eigen::Index t = 0; t < seq.length(); ++t) {
                const int tok = seq.tokens[static_cast<size_t>(t)];
                if (tok >= 0) {
                    model.embed.grad.row(tok) += d_inputs.row(t);
                }
            }
        }
    }
    return loss_sum / total;
}

TrainReport train(DecoderModel& model, Projector& projector, const std::vector<TrainExample>& data,
                  const TrainConfig& config, TrainMode mode, const std::vector<NamedParam>& registry) {
    config.validate();
    require(!registry.empty(), ErrorCode::config, "nothing to train: the trainable registry is empty");
    require(!data.empty(), ErrorCode::config, "nothing to train on: the dataset is empty");
    if (mode == TrainMode::base) {
        require(projector.trainable(), ErrorCode::config, "base training requires a trainable projector");
    }

    const auto started = std::chrono::steady_clock::now();
    Rng batch_rng(derive_seed(config.seed, "batches"));
    Rng dropout_rng(derive_seed(config.seed, "dropout"));
    std::vector<size_t> order(data.size());
    size_t cursor = order.size();
    AdamState adam;
    TrainReport report;

    for (int step = 0; step < config.total_steps; ++step) {
        for (const NamedParam& np : registry) {
            np.param->grad.setZero(np.param->value.rows(), np.param->value.cols());
        }
        std::vector<const TrainExample*> batch;
        for (int b = 0; b < config.batch_size; ++b) {
            if (cursor == order.size()) {
                for (size_t i = 0; i < order.size(); ++i) {
                    order[i] = i;
                }
                batch_rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(&data[order[cursor++]]);
        }
        const double loss = accumulate_batch_gradients(model, projector, batch, &dropout_rng);
        require(std::isfinite(loss), ErrorCode::numeric, "training loss diverged at step " + std::to_string(step));
        clip_gradients(registry, config.grad_clip_norm);
        const double lr = lr_at(step, config);
        adam_step(registry, adam, lr, config.beta1, config.beta2, config.adam_eps);
        report.losses.push_back(loss);
        report.lrs.push_back(lr);
        if ((step + 1) % 100 == 0) {
            std::ostringstream os;
            os << "step " << (step + 1) << "/" << config.total_steps << " loss " << std::setprecision(4) << loss;
            log_info(os.str());
        }
    }
    for (const NamedParam& np : registry) {
        np.param->grad.resize(0, 0);
    }
    report.steps = config.total_steps;
    report.final_loss = report.losses.back();
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return report;
}

std::string loss_csv(const TrainReport& report) {
    std::ostringstream os;
    os << "step,loss,lr\n" << std::setprecision(9);
    for (size_t i = 0; i < report.losses.size(); ++i) {
        os << i << ',' << report.losses[i] << ',' << report.lrs[i] << '\n';
    }
    return os.str();
}

}  // namespace speechprune

#pragma once

// Straight-line double-precision reimplementation of the decoder and the
// projector. Shares no arithmetic code with src/; used as the oracle for
// forward equivalence and finite-difference gradients.

#include "model.hpp"
#include "speech.hpp"

#include <cmath>
#include <set>
#include <vector>

namespace ref {

using Rows = std::vector<std::vector<double>>;

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

inline Rows to_rows(const speechprune::Mat& m) {
    Rows out(static_cast<size_t>(m.rows()), std::vector<double>(static_cast<size_t>(m.cols())));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            out[r][c] = m(r, c);
        }
    }
    return out;
}

inline Rows matmul(const Rows& x, const speechprune::Mat& w) {
    Rows y(x.size(), std::vector<double>(static_cast<size_t>(w.cols()), 0.0));
    for (size_t r = 0; r < x.size(); ++r) {
        for (Eigen::Index c = 0; c < w.cols(); ++c) {
            double s = 0.0;
            for (Eigen::Index i = 0; i < w.rows(); ++i) {
                s += x[r][i] * static_cast<double>(w(i, c));
            }
            y[r][c] = s;
        }
    }
    return y;
}

// x W + (alpha / r) * (x A^T) B^T
inline Rows linear(const speechprune::Linear& lin, const Rows& x) {
    Rows y = matmul(x, lin.weight.value);
    if (lin.lora) {
        const auto& ad = *lin.lora;
        const double scale = static_cast<double>(ad.alpha) / ad.rank;
        for (size_t r = 0; r < x.size(); ++r) {
            std::vector<double> low(static_cast<size_t>(ad.rank), 0.0);
            for (int j = 0; j < ad.rank; ++j) {
                for (size_t i = 0; i < x[r].size(); ++i) {
                    low[j] += x[r][i] * ad.a.value(j, static_cast<Eigen::Index>(i));
                }
            }
            for (size_t o = 0; o < y[r].size(); ++o) {
                double s = 0.0;
                for (int j = 0; j < ad.rank; ++j) {
                    s += ad.b.value(static_cast<Eigen::Index>(o), j) * low[j];
                }
                y[r][o] += scale * s;
            }
        }
    }
    return y;
}

inline Rows rms_norm(const Rows& x, const speechprune::Mat& gain, double eps) {
    Rows y = x;
    for (size_t r = 0; r < x.size(); ++r) {
        double ms = 0.0;
        for (const double v : x[r]) {
            ms += v * v;
        }
        ms /= static_cast<double>(x[r].size());
        const double inv = 1.0 / std::sqrt(ms + eps);
        for (size_t c = 0; c < x[r].size(); ++c) {
            y[r][c] = x[r][c] * inv * gain(0, static_cast<Eigen::Index>(c));
        }
    }
    return y;
}

inline void rope(Rows& x, int heads, int hd) {
    const int half = hd / 2;
    for (size_t pos = 0; pos < x.size(); ++pos) {
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < half; ++i) {
                const double angle = static_cast<double>(pos) * std::pow(10000.0, -2.0 * i / hd);
                const double a = x[pos][h * hd + i];
                const double b = x[pos][h * hd + i + half];
                x[pos][h * hd + i] = a * std::cos(angle) - b * std::sin(angle);
                x[pos][h * hd + i + half] = a * std::sin(angle) + b * std::cos(angle);
            }
        }
    }
}

struct Output {
    Rows logits;
    std::vector<std::vector<double>> trace;  // last-token residual states
};

inline Output forward(const speechprune::DecoderModel& model, const Rows& inputs, const std::set<int>& skip = {}) {
    const auto& cfg = model.config;
    const int heads = cfg.num_heads;
    const int hd = cfg.d_model / heads;
    const size_t len = inputs.size();
    Output out;
    Rows x = inputs;
    out.trace.push_back(x.back());
    for (int li = 0; li < model.num_layers(); ++li) {
        if (skip.count(li) != 0) {
            continue;
        }
        const auto& layer = model.layers[static_cast<size_t>(li)];
        const Rows n1 = rms_norm(x, layer.attn_norm.value, cfg.norm_eps);
        Rows q = linear(layer.q, n1);
        Rows k = linear(layer.k, n1);
        const Rows v = linear(layer.v, n1);
        rope(q, heads, hd);
        rope(k, heads, hd);
        Rows ctx(len, std::vector<double>(static_cast<size_t>(cfg.d_model), 0.0));
        for (int h = 0; h < heads; ++h) {
            for (size_t i = 0; i < len; ++i) {
                std::vector<double> w(i + 1);
                double mx = -1e300;
                for (size_t j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) {
                        s += q[i][h * hd + c] * k[j][h * hd + c];
                    }
                    w[j] = s / std::sqrt(static_cast<double>(hd));
                    mx = std::max(mx, w[j]);
                }
                double z = 0.0;
                for (double& e : w) {
                    e = std::exp(e - mx);
                    z += e;
                }
                for (size_t j = 0; j <= i; ++j) {
                    for (int c = 0; c < hd; ++c) {
                        ctx[i][h * hd + c] += w[j] / z * v[j][h * hd + c];
                    }
                }
            }
        }
        const Rows attn = linear(layer.o, ctx);
        for (size_t r = 0; r < len; ++r) {
            for (size_t c = 0; c < x[r].size(); ++c) {
                x[r][c] += attn[r][c];
            }
        }
        const Rows n2 = rms_norm(x, layer.mlp_norm.value, cfg.norm_eps);
        Rows up = linear(layer.up, n2);
        for (auto& row : up) {
            for (double& u : row) {
                u = gelu(u);
            }
        }
        const Rows down = linear(layer.down, up);
        for (size_t r = 0; r < len; ++r) {
            for (size_t c = 0; c < x[r].size(); ++c) {
                x[r][c] += down[r][c];
            }
        }
        out.trace.push_back(x.back());
    }
    out.logits = matmul(rms_norm(x, model.final_norm.value, cfg.norm_eps), model.lm_head.value);
    return out;
}

// Linear -> GELU -> Linear over stacked rows.
inline Rows project(const speechprune::Projector& p, const speechprune::Mat& z) {
    Rows h = matmul(to_rows(z), p.w1.value);
    for (auto& row : h) {
        for (size_t c = 0; c < row.size(); ++c) {
            row[c] = gelu(row[c] + p.b1.value(0, static_cast<Eigen::Index>(c)));
        }
    }
    Rows y = matmul(h, p.w2.value);
    for (auto& row : y) {
        for (size_t c = 0; c < row.size(); ++c) {
            row[c] += p.b2.value(0, static_cast<Eigen::Index>(c));
        }
    }
    return y;
}

// Mean next-token NLL over the target block of (speech, prompt, target).
inline double speech_loss(const speechprune::DecoderModel& model, const speechprune::Projector& projector,
                          const speechprune::Mat& stacked, const std::vector<int>& prompt,
                          const std::vector<int>& target) {
    Rows seq = project(projector, stacked);
    const size_t n_speech = seq.size();
    for (const int t : prompt) {
        seq.push_back(to_rows(model.embed.value.row(t))[0]);
    }
    for (const int t : target) {
        seq.push_back(to_rows(model.embed.value.row(t))[0]);
    }
    const Rows logits = forward(model, seq).logits;
    double total = 0.0;
    const size_t first = n_speech + prompt.size();
    for (size_t j = 0; j < target.size(); ++j) {
        const auto& row = logits[first + j - 1];
        double mx = -1e300;
        for (const double v : row) {
            mx = std::max(mx, v);
        }
        double z = 0.0;
        for (const double v : row) {
            z += std::exp(v - mx);
        }
        total += -(row[static_cast<size_t>(target[j])] - mx - std::log(z));
    }
    return total / static_cast<double>(target.size());
}

}  // namespace ref

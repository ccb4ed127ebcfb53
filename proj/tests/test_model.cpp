#include "model.hpp"
#include "reference.hpp"
#include "speech.hpp"

#include <doctest.h>

#include <cmath>

using namespace speechprune;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.num_layers = 2;
    c.d_model = 8;
    c.num_heads = 2;
    c.d_mlp = 16;
    c.vocab_size = 16;
    c.max_seq_len = 32;
    c.seed = 7;
    return c;
}

Mat random_inputs(int rows, int cols, uint64_t seed) {
    Mat m(rows, cols);
    Rng rng(seed);
    fill_normal(m, rng, 1.0);
    return m;
}

double max_abs_diff(const Mat& a, const ref::Rows& b) {
    double worst = 0.0;
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        for (Eigen::Index c = 0; c < a.cols(); ++c) {
            worst = std::max(worst, std::abs(static_cast<double>(a(r, c)) - b[r][c]));
        }
    }
    return worst;
}

void perturb_gains(DecoderModel& m, uint64_t seed) {
    Rng rng(seed);
    for (auto& np : named_parameters(m)) {
        if (np.param->rows() == 1) {
            for (Eigen::Index i = 0; i < np.param->size(); ++i) {
                np.param->value(0, i) = static_cast<float>(1.0 + 0.3 * rng.normal());
            }
        }
    }
}

void randomize_adapter_b(DecoderModel& m, uint64_t seed) {
    Rng rng(seed);
    for (auto& layer : m.layers) {
        for (const Projection p : kAllProjections) {
            auto& lin = layer.projection(p);
            if (lin.lora) {
                fill_normal(lin.lora->b.value, rng, 0.3);
            }
        }
    }
}

}  // namespace

TEST_CASE("forward matches the double-precision reference") {
    DecoderModel m = init_decoder(tiny_config());
    perturb_gains(m, 3);
    attach_lora(m, {{Projection::q, Projection::v, Projection::mlp_down}, {}}, 2, 4.0f, 0.0f, 11);
    randomize_adapter_b(m, 5);
    const Mat x = random_inputs(6, 8, 1);
    ForwardOptions opt;
    opt.capture = true;
    const ForwardResult got = forward(m, x, opt);
    const ref::Output want = ref::forward(m, ref::to_rows(x));
    CHECK(max_abs_diff(got.logits, want.logits) < 1e-4);
    REQUIRE(got.trace->states.size() == want.trace.size());
    for (size_t i = 0; i < want.trace.size(); ++i) {
        for (size_t c = 0; c < want.trace[i].size(); ++c) {
            CHECK(std::abs(got.trace->states[i](static_cast<Eigen::Index>(c)) - want.trace[i][c]) < 1e-4);
        }
    }
}

TEST_CASE("skip_layers matches the reference with the layer removed") {
    ModelConfig c = tiny_config();
    c.num_layers = 4;
    const DecoderModel m = init_decoder(c);
    const Mat x = random_inputs(5, 8, 2);
    ForwardOptions opt;
    opt.skip_layers = {1, 2};
    const ForwardResult got = forward(m, x, opt);
    CHECK(max_abs_diff(got.logits, ref::forward(m, ref::to_rows(x), {1, 2}).logits) < 1e-4);
}

TEST_CASE("forward is causal") {
    const DecoderModel m = init_decoder(tiny_config());
    Mat x = random_inputs(7, 8, 4);
    const Mat before = forward(m, x).logits;
    x.row(6).setConstant(3.0f);
    x.row(5).setConstant(-1.0f);
    const Mat after = forward(m, x).logits;
    CHECK((before.topRows(5) - after.topRows(5)).cwiseAbs().maxCoeff() == 0.0f);
    CHECK((before.row(6) - after.row(6)).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("init is deterministic in the seed") {
    DecoderModel a = init_decoder(tiny_config());
    DecoderModel b = init_decoder(tiny_config());
    ModelConfig c = tiny_config();
    c.seed = 8;
    DecoderModel d = init_decoder(c);
    auto pa = named_parameters(a);
    auto pb = named_parameters(b);
    auto pd = named_parameters(d);
    REQUIRE(pa.size() == pb.size());
    bool any_diff = false;
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        CHECK(pa[i].param->value == pb[i].param->value);
        any_diff = any_diff || pa[i].param->value != pd[i].param->value;
    }
    CHECK(any_diff);
}

TEST_CASE("config validation") {
    ModelConfig c = tiny_config();
    c.num_heads = 3;
    CHECK_THROWS_AS(c.validate(), Error);
    c = tiny_config();
    c.num_layers = 0;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("fresh adapter is a no-op and merge preserves outputs") {
    DecoderModel m = init_decoder(tiny_config());
    const Mat x = random_inputs(5, 8, 9);
    const Mat base = forward(m, x).logits;
    const auto names = attach_lora(m, {parse_projection_selector("attn"), {}}, 4, 8.0f, 0.1f, 1);
    CHECK(names.size() == 8);
    CHECK(count_adapters(m) == 8);
    CHECK(forward(m, x).logits == base);
    randomize_adapter_b(m, 2);
    const Mat adapted = forward(m, x).logits;
    CHECK((adapted - base).cwiseAbs().maxCoeff() > 1e-3f);
    merge_lora(m);
    CHECK(count_adapters(m) == 0);
    CHECK((forward(m, x).logits - adapted).cwiseAbs().maxCoeff() < 1e-4f);
}

TEST_CASE("projection selector") {
    CHECK(parse_projection_selector("mlp") == std::set<Projection>{Projection::mlp_up, Projection::mlp_down});
    CHECK(parse_projection_selector("q,o").size() == 2);
    CHECK_THROWS_AS(parse_projection_selector("attn,bogus"), Error);
}

namespace {

struct GradFixture {
    DecoderModel model;
    Projector projector;
    Mat stacked;
    std::vector<int> prompt{2};
    std::vector<int> target{5, 9, 1};

    GradFixture() : model(init_decoder(tiny_config())), projector(init_projector(2, 3, 8, 8, 21)) {
        perturb_gains(model, 13);
        attach_lora(model, {{Projection::k, Projection::o, Projection::mlp_up}, {}}, 2, 4.0f, 0.0f, 17);
        randomize_adapter_b(model, 19);
        stacked = random_inputs(3, 6, 23);
    }

    double loss_ref() const { return ref::speech_loss(model, projector, stacked, prompt, target); }

    void analytic() {
        ProjectorCache pc;
        StackedFeatures z{stacked, 2};
        const Mat speech = project(projector, z, &pc);
        const AssembledSequence seq = assemble(speech, prompt, target, model.embed.value);
        ForwardOptions opt;
        opt.training = true;
        const ForwardResult fr = forward(model, seq.embeddings, opt);
        const Mat dl = nll_grad(fr.logits, seq, 1.0f / static_cast<float>(target.size()));
        const Mat dx = backward(model, *fr.cache, dl, true);
        for (int i = 0; i < static_cast<int>(seq.tokens.size()); ++i) {
            if (seq.tokens[i] >= 0 && model.embed.trainable) {
                model.embed.grad.row(seq.tokens[i]) += dx.row(i);
            }
        }
        project_backward(projector, pc, dx.topRows(speech.rows()));
    }
};

// Relative error ||g - fd|| / max(||g||, ||fd||) over one tensor.
double grad_rel_error(Param& p, const std::function<double()>& loss) {
    const double h = 1e-2;
    double num = 0.0;
    double den_a = 0.0;
    double den_b = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        float& w = p.value.data()[i];
        const float saved = w;
        w = saved + static_cast<float>(h);
        const double up = loss();
        w = saved - static_cast<float>(h);
        const double down = loss();
        w = saved;
        const double fd = (up - down) / (2 * h);
        const double g = p.grad.data()[i];
        num += (g - fd) * (g - fd);
        den_a += g * g;
        den_b += fd * fd;
    }
    return std::sqrt(num) / std::max({std::sqrt(den_a), std::sqrt(den_b), 1e-12});
}

}  // namespace

TEST_CASE("backward matches finite differences on every tensor") {
    GradFixture f;
    for (auto& np : named_parameters(f.model)) {
        np.param->trainable = true;
        np.param->zero_grad();
    }
    f.projector.set_trainable(true);
    for (auto& np : named_parameters(f.projector)) {
        np.param->zero_grad();
    }
    f.analytic();
    auto loss = [&] { return f.loss_ref(); };
    for (auto& np : named_parameters(f.model)) {
        CAPTURE(np.name);
        CHECK(grad_rel_error(*np.param, loss) < 1e-3);
    }
    for (auto& np : named_parameters(f.projector)) {
        CAPTURE(np.name);
        CHECK(grad_rel_error(*np.param, loss) < 1e-3);
    }
}

TEST_CASE("frozen decoder: only adapters and projector receive gradients") {
    GradFixture f;
    freeze_all(f.model);
    for (auto& layer : f.model.layers) {
        for (const Projection p : kAllProjections) {
            if (layer.projection(p).lora) {
                layer.projection(p).lora->a.trainable = true;
                layer.projection(p).lora->b.trainable = true;
            }
        }
    }
    for (auto& np : named_parameters(f.model)) {
        np.param->zero_grad();
    }
    f.projector.set_trainable(true);
    for (auto& np : named_parameters(f.projector)) {
        np.param->zero_grad();
    }
    f.analytic();
    auto loss = [&] { return f.loss_ref(); };
    for (auto& np : named_parameters(f.model)) {
        CAPTURE(np.name);
        if (np.param->trainable) {
            CHECK(grad_rel_error(*np.param, loss) < 1e-3);
        } else {
            CHECK(np.param->grad.size() == 0);
        }
    }
    for (auto& np : named_parameters(f.projector)) {
        CAPTURE(np.name);
        CHECK(grad_rel_error(*np.param, loss) < 1e-3);
    }
}

#include <doctest.h>

#include <algorithm>

#include "grad_check.hpp"
#include "slmprop/backbone/backbone.hpp"
#include "slmprop/error.hpp"

using namespace slmprop;
using namespace slmprop::backbone;
using nn::Tape;
using nn::Tensor;
using nn::Var;
using testsupport::random_tensor;

namespace {

nn::ParamStore params_for(const BackboneConfig& cfg, uint64_t seed = 1) {
    nn::ParamStore ps;
    nn::Rng rng(seed);
    init_backbone_params(ps, cfg, rng);
    return ps;
}

BackboneConfig small() { return {16, 16, 8, 8}; }

} // namespace

TEST_CASE("config validation") {
    CHECK_NOTHROW(BackboneConfig{}.validate());
    CHECK_THROWS_AS((BackboneConfig{30, 32, 32, 32}.validate()), Error);
    CHECK_THROWS_AS((BackboneConfig{32, 32, 4, 32}.validate()), Error);
    BackboneConfig c{32, 64, 16, 8};
    nlohmann::json j = c;
    CHECK(j.get<BackboneConfig>() == c);
}

TEST_CASE("encode_image shapes and linearity at zero") {
    BackboneConfig cfg{64, 64, 64, 32};
    auto ps = params_for(cfg);
    Tape tape(false);
    nn::ParamBinding p(tape, ps);
    nn::Rng rng(2);
    Tensor img = random_tensor({1, 1, 64, 64}, rng);
    Var f = encode_image(p, cfg, tape.constant(img));
    CHECK(f.shape() == nn::Shape{1, 64, 16, 16});
    CHECK(encode_image(p, cfg, tape.constant(img)).value() == f.value());

    // Zero biases everywhere: zero image gives zero features.
    for (auto& [name, prm] : ps)
        if (name.ends_with(".b")) std::ranges::fill(prm.value.data(), 0.0);
    Tape t2(false);
    nn::ParamBinding p2(t2, ps);
    Var z = encode_image(p2, cfg, t2.constant(Tensor({1, 1, 64, 64}, 0.0)));
    for (double v : z.value().data()) CHECK(v == 0.0);
}

TEST_CASE("prompt encoder") {
    auto cfg = small();
    auto ps = params_for(cfg);
    Tape tape(false);
    nn::ParamBinding p(tape, ps);
    Var null = encode_prompt(p, cfg, tape.constant(Tensor({1, 1, 16, 16}, 0.0)));
    CHECK(null.value() == ps.value("prompt.null"));
    Var full = encode_prompt(p, cfg, tape.constant(Tensor({1, 1, 16, 16}, 1.0)));
    CHECK(full.shape() == nn::Shape{1, 8, 4, 4});
    CHECK(!(full.value() == null.value()));
}

TEST_CASE("encode_memory") {
    auto cfg = small();
    auto ps = params_for(cfg);
    nn::Rng rng(3);
    Tensor f = random_tensor({1, 8, 4, 4}, rng), s({1, 1, 16, 16});
    for (auto& v : s.data()) v = rng.uniform();
    {
        Tape tape(false);
        nn::ParamBinding p(tape, ps);
        Var m = encode_memory(p, cfg, tape.constant(f), tape.constant(s));
        CHECK(m.shape() == f.shape());
        CHECK(encode_memory(p, cfg, tape.constant(f), tape.constant(s)).value() == m.value());
    }
    // Identity fuse, zero downsample: F_M == F_I.
    auto& fw = ps.mutable_value("memory.fuse.w");
    std::ranges::fill(fw.data(), 0.0);
    for (int64_t c = 0; c < 8; ++c) fw.at(c, c, 1, 1) = 1.0;
    std::ranges::fill(ps.mutable_value("memory.fuse.b").data(), 0.0);
    auto& dw = ps.mutable_value("memory.down2.w");
    std::ranges::fill(dw.data(), 0.0);
    std::ranges::fill(ps.mutable_value("memory.down2.b").data(), 0.0);
    Tape tape(false);
    nn::ParamBinding p(tape, ps);
    CHECK(encode_memory(p, cfg, tape.constant(f), tape.constant(s)).value() == f);
}

TEST_CASE("encode_memory gradients reach features and mask") {
    auto cfg = small();
    auto ps = params_for(cfg);
    nn::Rng rng(4);
    Tape tape(true);
    nn::ParamBinding p(tape, ps);
    Var f = tape.leaf(random_tensor({1, 8, 4, 4}, rng));
    Tensor st({1, 1, 16, 16});
    for (auto& v : st.data()) v = rng.uniform();
    Var s = tape.leaf(st);
    tape.backward(nn::sum(nn::mul(encode_memory(p, cfg, f, s), tape.constant(random_tensor({1, 8, 4, 4}, rng)))));
    double gf = 0.0, gs = 0.0;
    for (double v : tape.grad(f).data()) gf += std::abs(v);
    for (double v : tape.grad(s).data()) gs += std::abs(v);
    CHECK(gf > 0.0);
    CHECK(gs > 0.0);
}

TEST_CASE("decoder contract") {
    BackboneConfig cfg{64, 64, 16, 16};
    auto ps = params_for(cfg);
    nn::Rng rng(5);
    Tape tape(false);
    nn::ParamBinding p(tape, ps);
    for (int t = 0; t < 5; ++t) {
        Var a = tape.constant(random_tensor({1, 16, 16, 16}, rng, 10.0));
        DecoderOutput o = decode(p, cfg, a, null_prompt(p), false);
        CHECK(o.mask_logits.shape() == nn::Shape{1, 1, 64, 64});
        CHECK(o.iou_pred.value()[0] >= 0.0);
        CHECK(o.iou_pred.value()[0] <= 1.0);
        CHECK(decode(p, cfg, a, null_prompt(p), false).mask_logits.value() == o.mask_logits.value());
    }
}

TEST_CASE("decoder gradients numerically") {
    auto cfg = small();
    auto ps = params_for(cfg);
    nn::Rng rng(6);
    auto r = testsupport::grad_check(
        [&](Tape& tape, const std::vector<Var>& v) {
            nn::ParamBinding p(tape, ps);
            DecoderOutput o = decode(p, cfg, v[0], v[1], true);
            return nn::add(nn::sum(o.mask_logits), nn::add(o.iou_pred, o.obj_logit));
        },
        {random_tensor({1, 8, 4, 4}, rng), random_tensor({1, 8, 4, 4}, rng)});
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("shape chain over input sizes") {
    for (int64_t s : {32, 64, 128}) {
        BackboneConfig cfg{s, s, 8, 8};
        auto ps = params_for(cfg);
        Tape tape(false);
        nn::ParamBinding p(tape, ps);
        io::Image2D img(s, s, 100.0f);
        Var f = encode_image(p, cfg, tape.constant(image_tensor(img, cfg)));
        DecoderOutput o = decode(p, cfg, f, null_prompt(p), false);
        CHECK(o.mask_logits.shape() == nn::Shape{1, 1, s, s});
    }
    // Inputs of another size are resized to the config grid.
    BackboneConfig cfg{32, 32, 8, 8};
    CHECK(image_tensor(io::Image2D(20, 48, 255.0f), cfg).shape() == nn::Shape{1, 1, 32, 32});
    CHECK(image_tensor(io::Image2D(32, 32, 255.0f), cfg)[0] == doctest::Approx(1.0));
    io::Label2D m(16, 16, 1);
    CHECK(mask_tensor(m, cfg).shape() == nn::Shape{1, 1, 32, 32});
}

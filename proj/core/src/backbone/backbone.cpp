#include "slmprop/backbone/backbone.hpp"

#include <cmath>

#include "detail/init.hpp"
#include "slmprop/error.hpp"
#include "slmprop/nn/ops.hpp"

namespace slmprop::backbone {

using nn::Var;

namespace {

Var conv(const nn::ParamBinding& p, const std::string& name, Var x, int stride, int pad) {
    return nn::conv2d(x, p[name + ".w"], p[name + ".b"], {stride, pad, 1});
}

Var norm_gelu(const nn::ParamBinding& p, const std::string& name, Var x) {
    return nn::gelu(nn::layer_norm_channels(x, p[name + ".g"], p[name + ".b"]));
}

void check_input(const BackboneConfig& cfg, Var x, const char* what) {
    const nn::Shape want{1, 1, cfg.input_h, cfg.input_w};
    if (x.shape() != want) {
        throw Error(ErrorCode::ShapeMismatch,
                    std::string(what) + " must be " + nn::shape_str(want) + ", got " + nn::shape_str(x.shape()));
    }
}

void check_features(const BackboneConfig& cfg, Var x, const char* what) {
    const nn::Shape want{1, cfg.channels, cfg.feat_h(), cfg.feat_w()};
    if (x.shape() != want) {
        throw Error(ErrorCode::ShapeMismatch,
                    std::string(what) + " must be " + nn::shape_str(want) + ", got " + nn::shape_str(x.shape()));
    }
}

} // namespace

void BackboneConfig::validate() const {
    if (input_h < 4 || input_w < 4 || input_h % 4 != 0 || input_w % 4 != 0) {
        throw Error(ErrorCode::ConfigInvalid, "input resolution must be positive multiples of 4");
    }
    if (channels < 8 || channels % 4 != 0) throw Error(ErrorCode::ConfigInvalid, "channels must be >= 8 and divisible by 4");
    if (decoder_hidden < 2 || decoder_hidden % 2 != 0) throw Error(ErrorCode::ConfigInvalid, "decoder_hidden must be even");
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = nlohmann::json{{"input_res", {c.input_h, c.input_w}},
                       {"feat_channels", c.channels},
                       {"feat_res", {c.feat_h(), c.feat_w()}},
                       {"decoder_hidden", c.decoder_hidden}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
    c = BackboneConfig{};
    if (j.contains("input_res")) {
        c.input_h = j["input_res"].at(0).get<int64_t>();
        c.input_w = j["input_res"].at(1).get<int64_t>();
    }
    c.channels = j.value("feat_channels", c.channels);
    c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
    c.validate();
}

void init_backbone_params(nn::ParamStore& ps, const BackboneConfig& cfg, nn::Rng& rng) {
    cfg.validate();
    using detail::add_conv;
    const int64_t C = cfg.channels, h = C / 2, q = C / 4, D = cfg.decoder_hidden;

    add_conv(ps, "image.conv1", h, 1, 3, rng);
    detail::add_norm(ps, "image.norm1", h);
    add_conv(ps, "image.conv2", C, h, 3, rng);
    detail::add_norm(ps, "image.norm2", C);
    add_conv(ps, "image.proj", C, C, 1, rng, 1.0);

    add_conv(ps, "prompt.conv1", q, 1, 3, rng);
    add_conv(ps, "prompt.conv2", C, q, 3, rng);
    add_conv(ps, "prompt.proj", C, C, 1, rng, 1.0);
    ps.add("prompt.null", detail::normal_tensor({1, C, cfg.feat_h(), cfg.feat_w()}, 0.02, rng));

    add_conv(ps, "memory.down1", q, 1, 3, rng);
    add_conv(ps, "memory.down2", C, q, 3, rng);
    add_conv(ps, "memory.fuse", C, C, 3, rng, 1.0);

    add_conv(ps, "decoder.conv", C, C, 3, rng);
    detail::add_conv_t(ps, "decoder.up1", C, D, 2, rng);
    detail::add_norm(ps, "decoder.norm1", D);
    detail::add_conv_t(ps, "decoder.up2", D, D / 2, 2, rng);
    add_conv(ps, "decoder.out", 1, D / 2, 3, rng, 1.0);
    // Foreground prior of 0.1.
    ps.mutable_value("decoder.out.b")[0] = -std::log(9.0);
    detail::add_linear(ps, "decoder.iou", 1, C, rng);
    detail::add_linear(ps, "decoder.obj", 1, C, rng);
}

Var encode_image(const nn::ParamBinding& p, const BackboneConfig& cfg, Var image) {
    check_input(cfg, image, "image");
    Var x = norm_gelu(p, "image.norm1", conv(p, "image.conv1", image, 2, 1));
    x = norm_gelu(p, "image.norm2", conv(p, "image.conv2", x, 2, 1));
    return conv(p, "image.proj", x, 1, 0);
}

Var null_prompt(const nn::ParamBinding& p) { return p["prompt.null"]; }

Var encode_prompt(const nn::ParamBinding& p, const BackboneConfig& cfg, Var mask) {
    check_input(cfg, mask, "prompt mask");
    bool any = false;
    for (double v : mask.value().data()) any |= v != 0.0;
    if (!any) return null_prompt(p);
    Var x = nn::gelu(conv(p, "prompt.conv1", mask, 2, 1));
    x = nn::gelu(conv(p, "prompt.conv2", x, 2, 1));
    return conv(p, "prompt.proj", x, 1, 0);
}

Var encode_memory(const nn::ParamBinding& p, const BackboneConfig& cfg, Var features, Var mask_probs) {
    check_features(cfg, features, "memory features");
    check_input(cfg, mask_probs, "memory mask");
    Var down = conv(p, "memory.down2", nn::gelu(conv(p, "memory.down1", mask_probs, 2, 1)), 2, 1);
    return conv(p, "memory.fuse", nn::add(features, down), 1, 1);
}

DecoderOutput decode(const nn::ParamBinding& p, const BackboneConfig& cfg, Var fused, Var prompt, bool is_conditional) {
    check_features(cfg, fused, "decoder input");
    Var emb = is_conditional ? prompt : null_prompt(p);
    check_features(cfg, emb, "prompt embedding");
    Var x = nn::gelu(conv(p, "decoder.conv", nn::add(fused, emb), 1, 1));
    Var pooled = nn::spatial_mean(x);
    Var u = nn::conv_transpose2d(x, p["decoder.up1.w"], p["decoder.up1.b"], 2);
    u = norm_gelu(p, "decoder.norm1", u);
    u = nn::gelu(nn::conv_transpose2d(u, p["decoder.up2.w"], p["decoder.up2.b"], 2));
    DecoderOutput out;
    out.mask_logits = conv(p, "decoder.out", u, 1, 1);
    out.iou_pred = nn::reshape(nn::sigmoid(nn::linear(pooled, p["decoder.iou.w"], p["decoder.iou.b"])), {1});
    out.obj_logit = nn::reshape(nn::linear(pooled, p["decoder.obj.w"], p["decoder.obj.b"]), {1});
    return out;
}

nn::Tensor image_tensor(const io::Image2D& slice, const BackboneConfig& cfg) {
    const io::Image2D r = io::resize_slice(slice, cfg.input_h, cfg.input_w);
    nn::Tensor t({1, 1, cfg.input_h, cfg.input_w});
    for (size_t i = 0; i < r.values.size(); ++i) t[static_cast<int64_t>(i)] = static_cast<double>(r.values[i]) / 255.0;
    return t;
}

nn::Tensor mask_tensor(const io::Label2D& mask, const BackboneConfig& cfg) {
    const io::Label2D r = io::resize_labels(mask, cfg.input_h, cfg.input_w);
    nn::Tensor t({1, 1, cfg.input_h, cfg.input_w});
    for (size_t i = 0; i < r.values.size(); ++i) t[static_cast<int64_t>(i)] = r.values[i] ? 1.0 : 0.0;
    return t;
}

} // namespace slmprop::backbone

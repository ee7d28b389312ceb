#pragma once

#include <cstdint>

#include <nlohmann/json.hpp>

#include "slmprop/io/volume.hpp"
#include "slmprop/nn/param_store.hpp"
#include "slmprop/nn/rng.hpp"

namespace slmprop::backbone {

struct BackboneConfig {
    int64_t input_h = 64;
    int64_t input_w = 64;
    int64_t channels = 64;
    int64_t decoder_hidden = 32;

    int64_t feat_h() const noexcept { return input_h / 4; }
    int64_t feat_w() const noexcept { return input_w / 4; }
    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

// Adds the image/prompt/memory encoder and decoder parameters ("image.*", "prompt.*",
// "memory.*", "decoder.*").
void init_backbone_params(nn::ParamStore& ps, const BackboneConfig& cfg, nn::Rng& rng);

struct DecoderOutput {
    nn::Var mask_logits; // [1,1,H0,W0]
    nn::Var iou_pred;    // [1], sigmoid range
    nn::Var obj_logit;   // [1]
};

// image: [1,1,H0,W0] normalized intensities (0..255 scaled to 0..1 by the caller).
nn::Var encode_image(const nn::ParamBinding& p, const BackboneConfig& cfg, nn::Var image);
// mask: [1,1,H0,W0] binary. All-zero masks return the null prompt parameter itself.
nn::Var encode_prompt(const nn::ParamBinding& p, const BackboneConfig& cfg, nn::Var mask);
nn::Var null_prompt(const nn::ParamBinding& p);
// F_M = lightconv(F_I + down(S_pred)).
nn::Var encode_memory(const nn::ParamBinding& p, const BackboneConfig& cfg, nn::Var features, nn::Var mask_probs);
// Adds the prompt embedding (the null prompt unless is_conditional) and decodes.
DecoderOutput decode(const nn::ParamBinding& p, const BackboneConfig& cfg, nn::Var fused, nn::Var prompt,
                     bool is_conditional);

// Image2D (already normalized to [0,255]) -> [1,1,H0,W0] scaled to [0,1], resized to the config.
nn::Tensor image_tensor(const io::Image2D& slice, const BackboneConfig& cfg);
nn::Tensor mask_tensor(const io::Label2D& mask, const BackboneConfig& cfg);

} // namespace slmprop::backbone

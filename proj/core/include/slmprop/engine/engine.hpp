#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "slmprop/attention/attention.hpp"
#include "slmprop/backbone/backbone.hpp"
#include "slmprop/io/volume.hpp"
#include "slmprop/nn/param_store.hpp"
#include "slmprop/synth/scenario.hpp"

namespace slmprop::engine {

struct ModelConfig {
    backbone::BackboneConfig backbone;
    attention::AttentionStackConfig stack;
    attention::FuserConfig fuser;
    attention::AblationConfig ablation;
    // Literal reading of the training pseudo-code: every frame is decoded with the user prompt.
    bool prompt_every_frame = false;

    // Keeps stack/fuser channel counts in sync with the backbone.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Desk-scale default used by experiments: 32x32 input, C=32, L=2, 4 heads.
ModelConfig desk_config(attention::AblationMode mode = attention::AblationMode::M_O_plus_M_R1);

struct Model {
    ModelConfig config;
    nn::ParamStore params;
};

Model init_model(const ModelConfig& cfg, uint64_t seed);

// `path` holds the tensor archive, `path` + ".json" the config manifest.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

struct LossWeights {
    double focal = 20.0;
    double dice = 1.0;
    double iou = 1.0;
    double ce = 1.0;
    bool operator==(const LossWeights&) const = default;
};

enum class ObjectSampling { Single, AnyObject, AllObjects };

struct TrainConfig {
    int epochs = 100;
    int seq_len = 8;
    double lr_encoder = 1e-4;
    double lr_rest = 3e-4;
    LossWeights weights;
    double flip_prob = 0.5;
    double weight_decay = 0.01;
    uint64_t seed = 0;
    // Single: `object_id` (0 = first id of each case). AnyObject: one random object per
    // sequence. AllObjects: one sequence per object, losses summed into one step.
    ObjectSampling object_sampling = ObjectSampling::Single;
    uint8_t object_id = 0;
    bool seed_short_with_conditional = true;
    // Random in-plane flip / transpose of the whole case per optimizer step (transposes only
    // for square slices). Off by default.
    bool augment_dihedral = false;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LossTerms {
    nn::Var total;
    double focal = 0, dice = 0, iou = 0, ce = 0;
};

// Actual IoU of (logits > 0) against the target; two empty masks give 1.
double binary_iou(const nn::Tensor& logits, const nn::Tensor& target);

LossTerms loss_step(nn::Var mask_logits, const nn::Tensor& target, nn::Var iou_pred, nn::Var obj_logit,
                    const LossWeights& w);

struct SequenceSample {
    std::vector<int64_t> slices; // in processing order; slices[0] is the conditional frame
    bool flipped = false;
    uint8_t object_id = 0;
};

// Draws the flip first, then a window of seq_len consecutive slices whose first processed
// slice contains the object. Throws InsufficientSlices if neither order has a valid window.
SequenceSample sample_sequence(const io::MaskVolume& mask, uint8_t object_id, int seq_len, double flip_prob,
                               nn::Rng& rng);

struct TrainResult {
    nn::ParamStore params;
    std::vector<double> losses; // L_total per optimizer step
};

using TrainObserver = std::function<void(int64_t step, double loss)>;

TrainResult train(const std::vector<synth::LabeledCase>& dataset, const TrainConfig& tcfg, const Model& init,
                  const TrainObserver& observer = {});

struct InferenceOptions {
    bool reset_between_directions = true;
    bool seed_short_with_conditional = true;
};

struct PropagationResult {
    int64_t cond_idx = 0;
    int64_t depth = 0;
    // Mask probabilities at input resolution, one per slice; the conditional slice holds the
    // prompt (0/1) verbatim.
    std::vector<io::Image2D> probs;
    std::vector<double> obj_score;
    std::vector<double> iou_pred;
    // 0 = conditional slice, 1 = forward (cond+1..D-1), 2 = backward (cond-1..0).
    std::vector<int> direction;
    std::vector<int64_t> order; // slice indices in processing order, conditional first

    // Thresholded at 0.5 and resized to the volume grid; the conditional slice is the prompt.
    io::Label2D slice_mask(int64_t z, int64_t height, int64_t width) const;
    io::Label2D prompt;
};

// Writes every object's thresholded result into one label volume (later ids win overlaps).
io::MaskVolume to_mask_volume(const std::map<uint8_t, PropagationResult>& results, const io::Dims& dims,
                              const io::Spacing& spacing);
io::MaskVolume to_mask_volume(const PropagationResult& r, uint8_t object_id, const io::Dims& dims,
                              const io::Spacing& spacing);

// SPRS little-endian layout: magic "SPRS" | version u32 | D u32 | cond u32 | prompt H,W u32 | prompt u8[H*W]
// then per slice: direction u8 | obj f64 | iou f64 | H,W u32 | probs f32[H*W]; then order u32[D].
void write_result(const PropagationResult& r, std::ostream& os);
PropagationResult read_result(std::istream& is);
void save_result(const PropagationResult& r, const std::filesystem::path& path);
PropagationResult load_result(const std::filesystem::path& path);

// Presence flags and areas on the volume grid.
nlohmann::json result_summary(const PropagationResult& r, int64_t height, int64_t width);

PropagationResult propagate(const Model& model, const io::Volume& volume, const io::Label2D& prompt, int64_t cond_idx,
                            const InferenceOptions& opts = {});

struct ObjectPrompt {
    io::Label2D mask;
    int64_t cond_idx = 0;
};

std::map<uint8_t, PropagationResult> propagate_multi(const Model& model, const io::Volume& volume,
                                                     const std::map<uint8_t, ObjectPrompt>& prompts,
                                                     const InferenceOptions& opts = {});

enum class InitialSliceRule { M_middle, L_largest, Q_quarters };

std::string_view to_string(InitialSliceRule r);
InitialSliceRule initial_slice_rule_from_string(std::string_view s);

std::vector<int64_t> select_initial_slice(const io::MaskVolume& gt, uint8_t object_id, InitialSliceRule rule);

} // namespace slmprop::engine

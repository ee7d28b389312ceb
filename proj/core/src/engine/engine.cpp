#include "slmprop/engine/engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "detail/binary_io.hpp"
#include "slmprop/error.hpp"
#include "slmprop/nn/ops.hpp"

namespace slmprop::engine {

using attention::AblationMode;
using memory::MemoryBank;
using memory::MemoryEntry;
using nn::Tensor;
using nn::Var;

namespace {

attention::ConditionConfig condition_config(const ModelConfig& c) { return {c.stack, c.fuser, c.ablation}; }

memory::BankPolicy short_policy_of(const ModelConfig& c) {
    return c.ablation.dual() ? c.ablation.short_policy() : memory::kShortBank;
}

bool is_encoder_param(std::string_view name) { return name.rfind("image.", 0) == 0; }

uint8_t resolve_object(const io::MaskVolume& mask, uint8_t requested) {
    if (requested != 0) return requested;
    if (mask.object_ids().empty()) throw Error(ErrorCode::ObjectAbsent, "mask has no objects");
    return mask.object_ids().front();
}

Tensor object_tensor(const io::MaskVolume& mask, int64_t z, uint8_t id, const backbone::BackboneConfig& cfg) {
    return backbone::mask_tensor(mask.object_slice(z, id), cfg);
}

struct PreparedCase {
    const synth::LabeledCase* source;
    std::vector<Tensor> images;
};

std::vector<Tensor> prepare_images(const io::Volume& volume, const backbone::BackboneConfig& cfg) {
    const io::Volume norm = io::normalize_volume(volume);
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(volume.dims().depth));
    for (int64_t z = 0; z < volume.dims().depth; ++z) out.push_back(backbone::image_tensor(norm.slice(z), cfg));
    return out;
}

// k in [0, 8): bit 0 flips rows, bit 1 flips columns, bit 2 transposes (square slices only).
synth::LabeledCase dihedral(const synth::LabeledCase& c, int k) {
    const auto& d = c.mask.dims();
    synth::LabeledCase out = c;
    auto src = [&](int64_t y, int64_t x) {
        if (k & 4) std::swap(y, x);
        if (k & 1) y = d.height - 1 - y;
        if (k & 2) x = d.width - 1 - x;
        return std::pair{y, x};
    };
    for (int64_t z = 0; z < d.depth; ++z)
        for (int64_t y = 0; y < d.height; ++y)
            for (int64_t x = 0; x < d.width; ++x) {
                const auto [sy, sx] = src(y, x);
                out.volume.at(z, y, x) = c.volume.at(z, sy, sx);
                out.mask.set(z, y, x, c.mask.at(z, sy, sx));
            }
    return out;
}

// Forward pass of one training sequence; returns the summed loss on `p`'s tape.
Var sequence_loss(const nn::ParamBinding& p, const ModelConfig& mc, const TrainConfig& tc, const PreparedCase& pc,
                  const SequenceSample& seq, int64_t& loss_terms) {
    nn::Tape& tape = p.tape();
    const auto& bc = mc.backbone;
    const auto cc = condition_config(mc);
    const io::MaskVolume& gt = pc.source->mask;

    MemoryBank<Var> long_bank(mc.ablation.long_policy());
    MemoryBank<Var> short_bank(short_policy_of(mc));

    const int64_t c0 = seq.slices.front();
    const Tensor prompt = object_tensor(gt, c0, seq.object_id, bc);
    Var prompt_v = tape.constant(prompt);
    Var f0 = backbone::encode_image(p, bc, tape.constant(pc.images[static_cast<size_t>(c0)]));
    Var f_p = backbone::encode_prompt(p, bc, prompt_v);
    auto out0 = backbone::decode(p, bc, nn::add_channel_vector(f0, p["no_mem_embed"]), f_p, true);
    Var total = loss_step(out0.mask_logits, prompt, out0.iou_pred, out0.obj_logit, tc.weights).total;
    ++loss_terms;

    Var m0 = backbone::encode_memory(p, bc, f0, prompt_v);
    long_bank = bank_update(long_bank, MemoryEntry<Var>{m0, c0, true});
    if (mc.ablation.dual() && tc.seed_short_with_conditional) {
        short_bank = bank_update(short_bank, MemoryEntry<Var>{m0, c0, true});
    }

    for (size_t i = 1; i < seq.slices.size(); ++i) {
        const int64_t z = seq.slices[i];
        const Tensor target = object_tensor(gt, z, seq.object_id, bc);
        Var f = backbone::encode_image(p, bc, tape.constant(pc.images[static_cast<size_t>(z)]));
        Var a = attention::condition_frame(p, cc, f, short_bank, long_bank);
        auto out = backbone::decode(p, bc, a, f_p, mc.prompt_every_frame);
        total = nn::add(total, loss_step(out.mask_logits, target, out.iou_pred, out.obj_logit, tc.weights).total);
        ++loss_terms;
        Var m = backbone::encode_memory(p, bc, f, nn::sigmoid(out.mask_logits));
        long_bank = bank_update(long_bank, MemoryEntry<Var>{m, z, false});
        if (mc.ablation.dual()) short_bank = bank_update(short_bank, MemoryEntry<Var>{m, z, false});
    }
    return total;
}

} // namespace

void ModelConfig::validate() const {
    backbone.validate();
    stack.validate();
    fuser.validate();
    if (stack.channels != backbone.channels || fuser.channels != backbone.channels) {
        throw Error(ErrorCode::ConfigInvalid, "attention/fuser channels must equal backbone feat_channels");
    }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"backbone", c.backbone},
                       {"attention", c.stack},
                       {"fuser", c.fuser},
                       {"ablation", attention::to_string(c.ablation.mode)},
                       {"prompt_every_frame", c.prompt_every_frame}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    if (j.contains("backbone")) c.backbone = j["backbone"].get<backbone::BackboneConfig>();
    c.stack.channels = c.backbone.channels;
    c.fuser.channels = c.backbone.channels;
    if (j.contains("attention")) {
        c.stack = j["attention"].get<attention::AttentionStackConfig>();
        if (!j["attention"].contains("channels")) c.stack.channels = c.backbone.channels;
    }
    if (j.contains("fuser")) {
        c.fuser = j["fuser"].get<attention::FuserConfig>();
        if (!j["fuser"].contains("channels")) c.fuser.channels = c.backbone.channels;
    }
    if (j.contains("ablation")) c.ablation.mode = attention::ablation_mode_from_string(j["ablation"].get<std::string>());
    c.prompt_every_frame = j.value("prompt_every_frame", false);
    c.validate();
}

ModelConfig desk_config(AblationMode mode) {
    ModelConfig c;
    c.backbone = {32, 32, 32, 32};
    c.stack = {2, 4, 32};
    c.fuser = {32, 4, 2, false};
    c.ablation.mode = mode;
    return c;
}

Model init_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.config = cfg;
    nn::Rng rng(nn::mix_seed(seed, 0x1417));
    backbone::init_backbone_params(m.params, cfg.backbone, rng);
    attention::init_stack_params(m.params, attention::kLongStack, cfg.stack, cfg.ablation.long_policy().n_recent + 1, rng);
    if (cfg.ablation.dual()) {
        attention::init_stack_params(m.params, attention::kShortStack, cfg.stack,
                                     cfg.ablation.short_policy().n_recent + 1, rng);
        attention::init_fuser_params(m.params, cfg.fuser, rng);
    }
    Tensor nme({cfg.backbone.channels});
    for (auto& v : nme.data()) v = 0.02 * rng.normal();
    m.params.add("no_mem_embed", nme);
    return m;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    nn::save_params(model.params, path);
    std::filesystem::path manifest = path;
    manifest += ".json";
    std::ofstream os(manifest, std::ios::binary);
    if (!os) throw Error(ErrorCode::IoFailure, "cannot write " + manifest.string());
    nlohmann::json j{{"format", "slmprop-checkpoint"}, {"version", 1}, {"model", model.config}};
    os << j.dump(2) << "\n";
    if (!os) throw Error(ErrorCode::IoFailure, "write failed for " + manifest.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::filesystem::path manifest = path;
    manifest += ".json";
    std::ifstream is(manifest, std::ios::binary);
    if (!is) throw Error(ErrorCode::IoFailure, "cannot open checkpoint manifest " + manifest.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::BadCheckpoint, manifest.string() + ": " + e.what());
    }
    Model m;
    m.config = j.at("model").get<ModelConfig>();
    m.params = nn::load_params(path);
    const Model ref = init_model(m.config, 0);
    for (const auto& [name, prm] : ref.params) {
        if (!m.params.contains(name) || m.params.value(name).shape() != prm.value.shape()) {
            throw Error(ErrorCode::BadCheckpoint, "checkpoint does not match its manifest at '" + name + "'");
        }
    }
    if (m.params.size() != ref.params.size()) throw Error(ErrorCode::BadCheckpoint, "checkpoint has extra tensors");
    return m;
}

void TrainConfig::validate() const {
    if (epochs < 0) throw Error(ErrorCode::ConfigInvalid, "epochs must be >= 0");
    if (seq_len < 2) throw Error(ErrorCode::ConfigInvalid, "seq_len must be >= 2");
    const auto& w = weights;
    if (w.focal < 0 || w.dice < 0 || w.iou < 0 || w.ce < 0 || (w.focal + w.dice + w.iou + w.ce) <= 0) {
        throw Error(ErrorCode::ConfigInvalid, "loss weights must be >= 0 with at least one positive");
    }
    if (flip_prob < 0 || flip_prob > 1) throw Error(ErrorCode::ConfigInvalid, "flip_prob must lie in [0,1]");
    if (lr_encoder < 0 || lr_rest < 0) throw Error(ErrorCode::ConfigInvalid, "learning rates must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    const char* sampling = c.object_sampling == ObjectSampling::Single      ? "Single"
                           : c.object_sampling == ObjectSampling::AnyObject ? "AnyObject"
                                                                            : "AllObjects";
    j = nlohmann::json{{"epochs", c.epochs},
                       {"seq_len", c.seq_len},
                       {"lr_encoder", c.lr_encoder},
                       {"lr_rest", c.lr_rest},
                       {"loss_weights", {c.weights.focal, c.weights.dice, c.weights.iou, c.weights.ce}},
                       {"flip_prob", c.flip_prob},
                       {"weight_decay", c.weight_decay},
                       {"seed", c.seed},
                       {"object_sampling", sampling},
                       {"object_id", c.object_id},
                       {"seed_short_with_conditional", c.seed_short_with_conditional},
                       {"augment_dihedral", c.augment_dihedral}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    c.epochs = j.value("epochs", c.epochs);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.lr_encoder = j.value("lr_encoder", c.lr_encoder);
    c.lr_rest = j.value("lr_rest", c.lr_rest);
    if (j.contains("loss_weights")) {
        const auto& w = j["loss_weights"];
        c.weights = {w.at(0).get<double>(), w.at(1).get<double>(), w.at(2).get<double>(), w.at(3).get<double>()};
    }
    c.flip_prob = j.value("flip_prob", c.flip_prob);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    const std::string s = j.value("object_sampling", std::string("Single"));
    if (s == "Single") c.object_sampling = ObjectSampling::Single;
    else if (s == "AnyObject") c.object_sampling = ObjectSampling::AnyObject;
    else if (s == "AllObjects") c.object_sampling = ObjectSampling::AllObjects;
    else throw Error(ErrorCode::ConfigInvalid, "unknown object_sampling '" + s + "'");
    c.object_id = j.value("object_id", uint8_t{0});
    c.seed_short_with_conditional = j.value("seed_short_with_conditional", true);
    c.augment_dihedral = j.value("augment_dihedral", false);
    c.validate();
}

double binary_iou(const Tensor& logits, const Tensor& target) {
    int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < logits.numel(); ++i) {
        const bool a = logits[i] > 0.0, b = target[i] > 0.5;
        inter += a && b;
        uni += a || b;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

LossTerms loss_step(Var mask_logits, const Tensor& target, Var iou_pred, Var obj_logit, const LossWeights& w) {
    if (mask_logits.value().numel() != target.numel()) {
        throw Error(ErrorCode::ShapeMismatch, "loss_step: logits " + nn::shape_str(mask_logits.shape()) + " vs target " +
                                                  nn::shape_str(target.shape()));
    }
    bool present = false;
    for (double v : target.data()) present |= v > 0.5;
    Var focal = nn::sigmoid_focal_loss(mask_logits, target);
    Var dice = nn::soft_dice_loss(mask_logits, target);
    Var iou = nn::abs_error(iou_pred, binary_iou(mask_logits.value(), target));
    Var ce = nn::bce_with_logits(obj_logit, present ? 1.0 : 0.0);
    LossTerms t;
    t.focal = focal.value().item();
    t.dice = dice.value().item();
    t.iou = iou.value().item();
    t.ce = ce.value().item();
    t.total = nn::add(nn::add(nn::scale(focal, w.focal), nn::scale(dice, w.dice)),
                      nn::add(nn::scale(iou, w.iou), nn::scale(ce, w.ce)));
    return t;
}

SequenceSample sample_sequence(const io::MaskVolume& mask, uint8_t object_id, int seq_len, double flip_prob,
                               nn::Rng& rng) {
    const int64_t D = mask.dims().depth;
    SequenceSample s;
    s.object_id = object_id;
    if (D < seq_len) {
        throw Error(ErrorCode::InsufficientSlices,
                    "volume has " + std::to_string(D) + " slices, sequence needs " + std::to_string(seq_len));
    }
    std::vector<char> present(static_cast<size_t>(D));
    for (int64_t z = 0; z < D; ++z) present[static_cast<size_t>(z)] = mask.object_present(z, object_id);
    auto starts = [&](bool flipped) {
        std::vector<int64_t> out;
        for (int64_t s0 = 0; s0 + seq_len <= D; ++s0)
            if (present[static_cast<size_t>(flipped ? s0 + seq_len - 1 : s0)]) out.push_back(s0);
        return out;
    };
    s.flipped = rng.bernoulli(flip_prob);
    std::vector<int64_t> cand = starts(s.flipped);
    if (cand.empty()) {
        s.flipped = !s.flipped;
        cand = starts(s.flipped);
    }
    if (cand.empty()) {
        throw Error(ErrorCode::InsufficientSlices, "no window of " + std::to_string(seq_len) +
                                                       " slices starts on a slice containing object " +
                                                       std::to_string(object_id));
    }
    const int64_t s0 = cand[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(cand.size()) - 1))];
    for (int64_t k = 0; k < seq_len; ++k) s.slices.push_back(s.flipped ? s0 + seq_len - 1 - k : s0 + k);
    return s;
}

TrainResult train(const std::vector<synth::LabeledCase>& dataset, const TrainConfig& tcfg, const Model& init,
                  const TrainObserver& observer) {
    tcfg.validate();
    init.config.validate();
    TrainResult res;
    res.params = init.params;
    if (tcfg.epochs == 0) return res;
    if (dataset.empty()) throw Error(ErrorCode::InsufficientSlices, "empty training set");

    std::vector<PreparedCase> cases;
    for (const auto& c : dataset) {
        if (c.mask.dims().depth < tcfg.seq_len) {
            throw Error(ErrorCode::InsufficientSlices, "case with " + std::to_string(c.mask.dims().depth) +
                                                           " slices is shorter than seq_len " +
                                                           std::to_string(tcfg.seq_len));
        }
        cases.push_back({&c, prepare_images(c.volume, init.config.backbone)});
    }

    nn::Rng rng(nn::mix_seed(tcfg.seed, 0x7EA1));
    const int64_t total_steps = static_cast<int64_t>(tcfg.epochs) * static_cast<int64_t>(cases.size());
    const nn::AdamWConfig ocfg{0.9, 0.999, 1e-8, tcfg.weight_decay};
    int64_t step = 0;
    for (int e = 0; e < tcfg.epochs; ++e) {
        for (const auto& pc : cases) {
            const io::MaskVolume& gt = pc.source->mask;
            std::vector<SequenceSample> seqs;
            switch (tcfg.object_sampling) {
            case ObjectSampling::Single:
                seqs.push_back(sample_sequence(gt, resolve_object(gt, tcfg.object_id), tcfg.seq_len, tcfg.flip_prob, rng));
                break;
            case ObjectSampling::AnyObject: {
                const auto& ids = gt.object_ids();
                if (ids.empty()) throw Error(ErrorCode::ObjectAbsent, "training case has no objects");
                const auto k = rng.uniform_int(0, static_cast<int64_t>(ids.size()) - 1);
                seqs.push_back(sample_sequence(gt, ids[static_cast<size_t>(k)], tcfg.seq_len, tcfg.flip_prob, rng));
                break;
            }
            case ObjectSampling::AllObjects:
                for (uint8_t id : gt.object_ids()) seqs.push_back(sample_sequence(gt, id, tcfg.seq_len, tcfg.flip_prob, rng));
                break;
            }

            std::optional<synth::LabeledCase> aug_case;
            std::optional<PreparedCase> aug;
            if (tcfg.augment_dihedral) {
                const auto& d = gt.dims();
                const int k = static_cast<int>(rng.uniform_int(0, d.height == d.width ? 7 : 3));
                if (k != 0) {
                    aug_case = dihedral(*pc.source, k);
                    aug = PreparedCase{&*aug_case, prepare_images(aug_case->volume, init.config.backbone)};
                }
            }
            const PreparedCase& used = aug ? *aug : pc;

            nn::Tape tape;
            nn::ParamBinding p(tape, res.params);
            int64_t terms = 0;
            Var total;
            for (const auto& seq : seqs) {
                Var l = sequence_loss(p, init.config, tcfg, used, seq, terms);
                total = total.valid() ? nn::add(total, l) : l;
            }
            tape.backward(total);
            const double lr_scale = nn::cosine_lr(step, total_steps, 1.0);
            nn::adamw_step(res.params, p.grads(), ocfg, [&](std::string_view name) {
                return lr_scale * (is_encoder_param(name) ? tcfg.lr_encoder : tcfg.lr_rest);
            });
            const double loss = total.value().item();
            res.losses.push_back(loss);
            if (observer) observer(step, loss);
            ++step;
        }
    }
    return res;
}

io::Label2D PropagationResult::slice_mask(int64_t z, int64_t height, int64_t width) const {
    if (z == cond_idx) {
        return (prompt.height == height && prompt.width == width) ? prompt : io::resize_labels(prompt, height, width);
    }
    const io::Image2D p = io::resize_slice(probs[static_cast<size_t>(z)], height, width);
    io::Label2D out(height, width);
    for (size_t i = 0; i < p.values.size(); ++i) out.values[i] = p.values[i] > 0.5f ? 1 : 0;
    return out;
}

io::MaskVolume to_mask_volume(const PropagationResult& r, uint8_t object_id, const io::Dims& dims,
                              const io::Spacing& spacing) {
    return to_mask_volume(std::map<uint8_t, PropagationResult>{{object_id, r}}, dims, spacing);
}

io::MaskVolume to_mask_volume(const std::map<uint8_t, PropagationResult>& results, const io::Dims& dims,
                              const io::Spacing& spacing) {
    io::MaskVolume m(dims, spacing);
    for (const auto& [id, r] : results) {
        m.declare_object(id);
        for (int64_t z = 0; z < dims.depth; ++z) {
            const io::Label2D s = r.slice_mask(z, dims.height, dims.width);
            for (int64_t y = 0; y < dims.height; ++y)
                for (int64_t x = 0; x < dims.width; ++x)
                    if (s.at(y, x)) m.set(z, y, x, id);
        }
    }
    return m;
}

void write_result(const PropagationResult& r, std::ostream& os) {
    using detail::write_le;
    os.write("SPRS", 4);
    write_le<uint32_t>(os, 1);
    write_le<uint32_t>(os, static_cast<uint32_t>(r.depth));
    write_le<uint32_t>(os, static_cast<uint32_t>(r.cond_idx));
    write_le<uint32_t>(os, static_cast<uint32_t>(r.prompt.height));
    write_le<uint32_t>(os, static_cast<uint32_t>(r.prompt.width));
    os.write(reinterpret_cast<const char*>(r.prompt.values.data()), static_cast<std::streamsize>(r.prompt.values.size()));
    for (int64_t z = 0; z < r.depth; ++z) {
        const auto i = static_cast<size_t>(z);
        write_le<uint8_t>(os, static_cast<uint8_t>(r.direction[i]));
        write_le<double>(os, r.obj_score[i]);
        write_le<double>(os, r.iou_pred[i]);
        write_le<uint32_t>(os, static_cast<uint32_t>(r.probs[i].height));
        write_le<uint32_t>(os, static_cast<uint32_t>(r.probs[i].width));
        for (float v : r.probs[i].values) write_le<float>(os, v);
    }
    for (int64_t z : r.order) write_le<uint32_t>(os, static_cast<uint32_t>(z));
    if (!os) throw Error(ErrorCode::IoFailure, "result write failed");
}

PropagationResult read_result(std::istream& is) {
    using detail::read_le;
    char magic[4];
    if (!is.read(magic, 4)) throw Error(ErrorCode::TruncatedFile, "file ends inside field 'magic'");
    if (std::string_view(magic, 4) != "SPRS") throw Error(ErrorCode::BadMagic, "expected SPRS");
    const auto version = read_le<uint32_t>(is, "version");
    if (version != 1) throw Error(ErrorCode::UnsupportedVersion, "field 'version' is " + std::to_string(version));
    PropagationResult r;
    r.depth = read_le<uint32_t>(is, "D");
    r.cond_idx = read_le<uint32_t>(is, "cond");
    if (r.depth == 0 || r.cond_idx >= r.depth) throw Error(ErrorCode::IndexOutOfRange, "cond outside D");
    const int64_t ph = read_le<uint32_t>(is, "prompt H"), pw = read_le<uint32_t>(is, "prompt W");
    r.prompt = io::Label2D(ph, pw);
    if (!is.read(reinterpret_cast<char*>(r.prompt.values.data()), static_cast<std::streamsize>(ph * pw)))
        throw Error(ErrorCode::TruncatedFile, "file ends inside field 'prompt'");
    for (int64_t z = 0; z < r.depth; ++z) {
        r.direction.push_back(read_le<uint8_t>(is, "direction"));
        r.obj_score.push_back(read_le<double>(is, "obj"));
        r.iou_pred.push_back(read_le<double>(is, "iou"));
        const int64_t h = read_le<uint32_t>(is, "H"), w = read_le<uint32_t>(is, "W");
        io::Image2D p(h, w);
        for (auto& v : p.values) v = read_le<float>(is, "probs");
        r.probs.push_back(std::move(p));
    }
    for (int64_t z = 0; z < r.depth; ++z) {
        const int64_t k = read_le<uint32_t>(is, "order");
        if (k >= r.depth) throw Error(ErrorCode::IndexOutOfRange, "order entry outside D");
        r.order.push_back(k);
    }
    return r;
}

void save_result(const PropagationResult& r, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    write_result(r, os);
}

PropagationResult load_result(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
    return read_result(is);
}

nlohmann::json result_summary(const PropagationResult& r, int64_t height, int64_t width) {
    nlohmann::json presence = nlohmann::json::array(), areas = nlohmann::json::array();
    for (int64_t z = 0; z < r.depth; ++z) {
        const io::Label2D m = r.slice_mask(z, height, width);
        int64_t a = 0;
        for (auto v : m.values) a += v != 0;
        presence.push_back(a > 0);
        areas.push_back(a);
    }
    return {{"depth", r.depth}, {"cond_idx", r.cond_idx}, {"presence", presence}, {"areas", areas},
            {"obj_score", r.obj_score}, {"iou_pred", r.iou_pred}, {"direction", r.direction}, {"order", r.order}};
}

namespace {

class FeatureCache {
public:
    FeatureCache(const Model& model, const io::Volume& volume)
        : model_(model), images_(prepare_images(volume, model.config.backbone)), features_(images_.size()) {}

    const Tensor& image(int64_t z) const { return images_[static_cast<size_t>(z)]; }

    const Tensor& features(int64_t z) {
        auto& slot = features_[static_cast<size_t>(z)];
        if (!slot) {
            nn::Tape tape(false);
            nn::ParamBinding p(tape, model_.params);
            slot = backbone::encode_image(p, model_.config.backbone, tape.constant(image(z))).value();
        }
        return *slot;
    }

private:
    const Model& model_;
    std::vector<Tensor> images_;
    std::vector<std::optional<Tensor>> features_;
};

PropagationResult propagate_one(const Model& model, FeatureCache& cache, int64_t depth, const io::Label2D& prompt,
                                int64_t cond_idx, const InferenceOptions& opts) {
    if (cond_idx < 0 || cond_idx >= depth) {
        throw Error(ErrorCode::IndexOutOfRange,
                    "cond_idx " + std::to_string(cond_idx) + " outside [0," + std::to_string(depth - 1) + "]");
    }
    const ModelConfig& mc = model.config;
    const auto& bc = mc.backbone;
    const auto cc = condition_config(mc);

    PropagationResult r;
    r.cond_idx = cond_idx;
    r.depth = depth;
    r.prompt = prompt;
    r.probs.assign(static_cast<size_t>(depth), io::Image2D(bc.input_h, bc.input_w));
    r.obj_score.assign(static_cast<size_t>(depth), 0.0);
    r.iou_pred.assign(static_cast<size_t>(depth), 0.0);
    r.direction.assign(static_cast<size_t>(depth), 0);

    const Tensor prompt_t = backbone::mask_tensor(prompt, bc);
    {
        const io::Label2D pr = io::resize_labels(prompt, bc.input_h, bc.input_w);
        auto& cp = r.probs[static_cast<size_t>(cond_idx)];
        for (size_t i = 0; i < pr.values.size(); ++i) cp.values[i] = pr.values[i] ? 1.0f : 0.0f;
        r.obj_score[static_cast<size_t>(cond_idx)] = 1.0;
        r.iou_pred[static_cast<size_t>(cond_idx)] = 1.0;
    }
    r.order.push_back(cond_idx);

    Tensor f_p, m_c;
    {
        nn::Tape tape(false);
        nn::ParamBinding p(tape, model.params);
        Var f = tape.constant(cache.features(cond_idx));
        f_p = backbone::encode_prompt(p, bc, tape.constant(prompt_t)).value();
        m_c = backbone::encode_memory(p, bc, f, tape.constant(prompt_t)).value();
    }

    MemoryBank<Tensor> long_bank(mc.ablation.long_policy());
    MemoryBank<Tensor> short_bank(short_policy_of(mc));
    auto seed_banks = [&] {
        long_bank = bank_update(bank_reset(long_bank, false), MemoryEntry<Tensor>{m_c, cond_idx, true});
        short_bank = bank_reset(short_bank, false);
        if (mc.ablation.dual() && opts.seed_short_with_conditional) {
            short_bank = bank_update(short_bank, MemoryEntry<Tensor>{m_c, cond_idx, true});
        }
    };

    for (int dir : {1, 2}) {
        if (dir == 1 || opts.reset_between_directions) seed_banks();
        const int64_t step = dir == 1 ? 1 : -1;
        for (int64_t z = cond_idx + step; z >= 0 && z < depth; z += step) {
            nn::Tape tape(false);
            nn::ParamBinding p(tape, model.params);
            Var f = tape.constant(cache.features(z));
            Var a = attention::condition_frame(p, cc, f, short_bank, long_bank);
            auto out = backbone::decode(p, bc, a, tape.constant(f_p), mc.prompt_every_frame);
            const Tensor& logits = out.mask_logits.value();
            Tensor binary(logits.shape());
            auto& probs = r.probs[static_cast<size_t>(z)];
            for (int64_t i = 0; i < logits.numel(); ++i) {
                const double pr = 1.0 / (1.0 + std::exp(-logits[i]));
                probs.values[static_cast<size_t>(i)] = static_cast<float>(pr);
                binary[i] = pr > 0.5 ? 1.0 : 0.0;
            }
            r.obj_score[static_cast<size_t>(z)] = 1.0 / (1.0 + std::exp(-out.obj_logit.value().item()));
            r.iou_pred[static_cast<size_t>(z)] = out.iou_pred.value().item();
            r.direction[static_cast<size_t>(z)] = dir;
            r.order.push_back(z);

            Tensor m = backbone::encode_memory(p, bc, f, tape.constant(binary)).value();
            long_bank = bank_update(long_bank, MemoryEntry<Tensor>{m, z, false});
            if (mc.ablation.dual()) short_bank = bank_update(short_bank, MemoryEntry<Tensor>{std::move(m), z, false});
        }
    }
    return r;
}

} // namespace

PropagationResult propagate(const Model& model, const io::Volume& volume, const io::Label2D& prompt, int64_t cond_idx,
                            const InferenceOptions& opts) {
    const int64_t D = volume.dims().depth;
    if (cond_idx < 0 || cond_idx >= D) {
        throw Error(ErrorCode::IndexOutOfRange,
                    "cond_idx " + std::to_string(cond_idx) + " outside [0," + std::to_string(D - 1) + "]");
    }
    FeatureCache cache(model, volume);
    return propagate_one(model, cache, D, prompt, cond_idx, opts);
}

std::map<uint8_t, PropagationResult> propagate_multi(const Model& model, const io::Volume& volume,
                                                     const std::map<uint8_t, ObjectPrompt>& prompts,
                                                     const InferenceOptions& opts) {
    if (prompts.empty()) throw Error(ErrorCode::ObjectAbsent, "propagate_multi needs at least one object prompt");
    const int64_t D = volume.dims().depth;
    for (const auto& [id, pr] : prompts) {
        if (pr.cond_idx < 0 || pr.cond_idx >= D) {
            throw Error(ErrorCode::IndexOutOfRange, "object " + std::to_string(id) + ": cond_idx " +
                                                        std::to_string(pr.cond_idx) + " out of range");
        }
    }
    FeatureCache cache(model, volume);
    std::map<uint8_t, PropagationResult> out;
    for (const auto& [id, pr] : prompts) out.emplace(id, propagate_one(model, cache, D, pr.mask, pr.cond_idx, opts));
    return out;
}

std::string_view to_string(InitialSliceRule r) {
    switch (r) {
    case InitialSliceRule::M_middle: return "M";
    case InitialSliceRule::L_largest: return "L";
    case InitialSliceRule::Q_quarters: return "Q";
    }
    return "M";
}

InitialSliceRule initial_slice_rule_from_string(std::string_view s) {
    if (s == "M" || s == "M_middle") return InitialSliceRule::M_middle;
    if (s == "L" || s == "L_largest") return InitialSliceRule::L_largest;
    if (s == "Q" || s == "Q_quarters") return InitialSliceRule::Q_quarters;
    throw Error(ErrorCode::ConfigInvalid, "unknown initial slice rule '" + std::string(s) + "'");
}

std::vector<int64_t> select_initial_slice(const io::MaskVolume& gt, uint8_t object_id, InitialSliceRule rule) {
    const int64_t D = gt.dims().depth;
    std::vector<int64_t> area(static_cast<size_t>(D));
    int64_t first = -1, last = -1;
    for (int64_t z = 0; z < D; ++z) {
        area[static_cast<size_t>(z)] = gt.object_area(z, object_id);
        if (area[static_cast<size_t>(z)] > 0) {
            if (first < 0) first = z;
            last = z;
        }
    }
    if (first < 0) throw Error(ErrorCode::ObjectAbsent, "object " + std::to_string(object_id) + " is absent");
    auto nearest_present = [&](int64_t z) {
        for (int64_t d = 0; d < D; ++d) {
            if (z - d >= 0 && area[static_cast<size_t>(z - d)] > 0) return z - d;
            if (z + d < D && area[static_cast<size_t>(z + d)] > 0) return z + d;
        }
        return z;
    };
    switch (rule) {
    case InitialSliceRule::M_middle: return {nearest_present((first + last) / 2)};
    case InitialSliceRule::L_largest: {
        int64_t best = first;
        for (int64_t z = first; z <= last; ++z)
            if (area[static_cast<size_t>(z)] > area[static_cast<size_t>(best)]) best = z;
        return {best};
    }
    case InitialSliceRule::Q_quarters: {
        const int64_t span = last - first;
        return {nearest_present(first + span / 4), nearest_present(first + (3 * span) / 4)};
    }
    }
    return {first};
}

} // namespace slmprop::engine

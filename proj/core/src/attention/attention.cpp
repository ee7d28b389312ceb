#include "slmprop/attention/attention.hpp"

#include <cmath>
#include <numbers>

#include "detail/init.hpp"
#include "slmprop/error.hpp"

namespace slmprop::attention {

using nn::Var;

namespace {

std::string key(std::string_view prefix, std::string_view rest) {
    std::string s(prefix);
    s += '.';
    s += rest;
    return s;
}

nn::AttentionWeights weights(const nn::ParamBinding& p, const std::string& name) {
    return {p[name + ".wq"], p[name + ".bq"], p[name + ".wk"], p[name + ".bk"],
            p[name + ".wv"], p[name + ".bv"], p[name + ".wo"], p[name + ".bo"]};
}

void add_attention(nn::ParamStore& ps, const std::string& name, int64_t c, nn::Rng& rng) {
    for (const char* m : {"q", "k", "v", "o"}) {
        ps.add(name + ".w" + m, detail::normal_tensor({c, c}, 1.0 / std::sqrt(static_cast<double>(c)), rng));
        ps.add(name + ".b" + m, nn::Tensor({c}, 0.0));
    }
}

Var norm(const nn::ParamBinding& p, const std::string& name, Var x) {
    return nn::layer_norm(x, p[name + ".g"], p[name + ".b"]);
}

Var to_var(nn::Tape&, const Var& v) { return v; }
Var to_var(nn::Tape& t, const nn::Tensor& v) { return t.constant(v); }

} // namespace

void AttentionStackConfig::validate() const {
    if (num_blocks < 1) throw Error(ErrorCode::ConfigInvalid, "attention stack needs at least one block");
    if (heads < 1 || channels % heads != 0) throw Error(ErrorCode::ConfigInvalid, "channels must be divisible by heads");
}

void FuserConfig::validate() const {
    if (channels < 1 || expansion < 1 || num_convnext_blocks < 0) throw Error(ErrorCode::ConfigInvalid, "bad fuser config");
}

std::string_view to_string(AblationMode m) {
    switch (m) {
    case AblationMode::M_O: return "M_O";
    case AblationMode::M_R7: return "M_R7";
    case AblationMode::M_R1: return "M_R1";
    case AblationMode::M_O_plus_M_R7: return "M_O_plus_M_R7";
    case AblationMode::M_O_plus_M_R1: return "M_O_plus_M_R1";
    }
    return "M_O";
}

AblationMode ablation_mode_from_string(std::string_view s) {
    for (auto m : {AblationMode::M_O, AblationMode::M_R7, AblationMode::M_R1, AblationMode::M_O_plus_M_R7,
                   AblationMode::M_O_plus_M_R1})
        if (s == to_string(m)) return m;
    throw Error(ErrorCode::ConfigInvalid, "unknown ablation mode '" + std::string(s) + "'");
}

memory::BankPolicy AblationConfig::long_policy() const {
    switch (mode) {
    case AblationMode::M_R7: return {7, 0};
    case AblationMode::M_R1: return {1, 0};
    default: return memory::kLongBank;
    }
}

memory::BankPolicy AblationConfig::short_policy() const {
    return mode == AblationMode::M_O_plus_M_R7 ? memory::BankPolicy{7, 0} : memory::kShortBank;
}

void to_json(nlohmann::json& j, const AttentionStackConfig& c) {
    j = nlohmann::json{{"num_blocks", c.num_blocks}, {"heads", c.heads}, {"channels", c.channels}};
}

void from_json(const nlohmann::json& j, AttentionStackConfig& c) {
    c = AttentionStackConfig{};
    c.num_blocks = j.value("num_blocks", c.num_blocks);
    c.heads = j.value("heads", c.heads);
    c.channels = j.value("channels", c.channels);
}

void to_json(nlohmann::json& j, const FuserConfig& c) {
    j = nlohmann::json{{"channels", c.channels},
                       {"expansion", c.expansion},
                       {"num_convnext_blocks", c.num_convnext_blocks},
                       {"use_projection", c.use_projection}};
}

void from_json(const nlohmann::json& j, FuserConfig& c) {
    c = FuserConfig{};
    c.channels = j.value("channels", c.channels);
    c.expansion = j.value("expansion", c.expansion);
    c.num_convnext_blocks = j.value("num_convnext_blocks", c.num_convnext_blocks);
    c.use_projection = j.value("use_projection", c.use_projection);
}

nn::Tensor positional_encoding(int64_t h, int64_t w, int64_t c) {
    nn::Tensor pe({1, h * w, c});
    const int64_t half = c / 2;
    auto fill = [&](int64_t token, int64_t offset, int64_t n, double pos) {
        for (int64_t i = 0; i < n; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(n));
            pe[token * c + offset + i] = i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
        }
    };
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const int64_t t = y * w + x;
            fill(t, 0, half, (static_cast<double>(y) + 1.0) / static_cast<double>(h) * 2.0 * std::numbers::pi);
            fill(t, half, c - half, (static_cast<double>(x) + 1.0) / static_cast<double>(w) * 2.0 * std::numbers::pi);
        }
    return pe;
}

void init_stack_params(nn::ParamStore& ps, std::string_view prefix, const AttentionStackConfig& cfg,
                       int temporal_slots, nn::Rng& rng) {
    cfg.validate();
    const int64_t C = cfg.channels;
    ps.add(key(prefix, "temporal"), detail::normal_tensor({temporal_slots, C}, 0.02, rng));
    for (int b = 0; b < cfg.num_blocks; ++b) {
        const std::string blk = key(prefix, "b" + std::to_string(b));
        detail::add_norm(ps, blk + ".n1", C);
        add_attention(ps, blk + ".sa", C, rng);
        detail::add_norm(ps, blk + ".n2", C);
        add_attention(ps, blk + ".ca", C, rng);
        detail::add_norm(ps, blk + ".n3", C);
        detail::add_linear(ps, blk + ".mlp.fc1", 4 * C, C, rng, std::sqrt(2.0));
        detail::add_linear(ps, blk + ".mlp.fc2", C, 4 * C, rng);
    }
    detail::add_norm(ps, key(prefix, "norm_out"), C);
}

void init_fuser_params(nn::ParamStore& ps, const FuserConfig& cfg, nn::Rng& rng) {
    cfg.validate();
    const int64_t C = cfg.channels, hidden = cfg.expansion * C;
    if (cfg.use_projection) {
        nn::Tensor w({C, C, 1, 1}, 0.0);
        for (int64_t i = 0; i < C; ++i) w.at(i, i, 0, 0) = 1.0;
        ps.add("fuser.proj.w", w);
        ps.add("fuser.proj.b", nn::Tensor({C}, 0.0));
    }
    for (int b = 0; b < cfg.num_convnext_blocks; ++b) {
        const std::string blk = "fuser.b" + std::to_string(b);
        detail::add_conv(ps, blk + ".dw", C, 1, 7, rng, 1.0);
        detail::add_norm(ps, blk + ".norm", C);
        detail::add_linear(ps, blk + ".fc1", hidden, C, rng, std::sqrt(2.0));
        detail::add_zero_linear(ps, blk + ".fc2", C, hidden);
    }
}

template <class Feature>
MemoryTokens memory_tokens(const nn::ParamBinding& p, std::string_view prefix, const memory::MemoryBank<Feature>& bank,
                           const nn::Tensor& pos) {
    MemoryTokens out;
    if (bank.empty()) return out;
    nn::Tape& tape = p.tape();
    Var temporal = p[key(prefix, "temporal")];
    if (temporal.dim(0) != bank.temporal_slots()) {
        throw Error(ErrorCode::ShapeMismatch, std::string(prefix) + ": temporal table has " +
                                                  std::to_string(temporal.dim(0)) + " slots, bank needs " +
                                                  std::to_string(bank.temporal_slots()));
    }
    Var pos_v = tape.constant(pos);
    std::vector<Var> keys, values;
    const auto entries = bank.ordered();
    for (size_t i = 0; i < entries.size(); ++i) {
        Var tok = nn::nchw_to_tokens(to_var(tape, entries[i]->feature));
        if (tok.shape() != pos.shape()) throw Error(ErrorCode::ShapeMismatch, "memory feature shape");
        values.push_back(tok);
        keys.push_back(nn::add_row_vector(nn::add(tok, pos_v), nn::select_row(temporal, bank.temporal_slot(i))));
    }
    out.keys = keys.size() == 1 ? keys.front() : nn::concat_tokens(keys);
    out.values = values.size() == 1 ? values.front() : nn::concat_tokens(values);
    return out;
}

Var stack_forward(const nn::ParamBinding& p, std::string_view prefix, const AttentionStackConfig& cfg, Var features,
                  const MemoryTokens& memory, const nn::Tensor& pos) {
    if (features.shape().size() != 4 || features.dim(1) != cfg.channels) {
        throw Error(ErrorCode::ShapeMismatch, "attention input must be [1,C,H,W] with C=" + std::to_string(cfg.channels));
    }
    const int64_t H = features.dim(2), W = features.dim(3);
    Var pos_v = p.tape().constant(pos);
    Var x = nn::nchw_to_tokens(features);
    for (int b = 0; b < cfg.num_blocks; ++b) {
        const std::string blk = key(prefix, "b" + std::to_string(b));
        Var h = norm(p, blk + ".n1", x);
        Var qk = nn::add(h, pos_v);
        x = nn::add(x, nn::cross_attention(qk, qk, h, weights(p, blk + ".sa"), cfg.heads));
        if (!memory.empty()) {
            h = norm(p, blk + ".n2", x);
            x = nn::add(x, nn::cross_attention(nn::add(h, pos_v), memory.keys, memory.values, weights(p, blk + ".ca"),
                                               cfg.heads));
        }
        h = norm(p, blk + ".n3", x);
        x = nn::add(x, nn::mlp2(h, p[blk + ".mlp.fc1.w"], p[blk + ".mlp.fc1.b"], p[blk + ".mlp.fc2.w"],
                                p[blk + ".mlp.fc2.b"]));
    }
    return nn::tokens_to_nchw(norm(p, key(prefix, "norm_out"), x), H, W);
}

template <class Feature>
Var memory_attention(const nn::ParamBinding& p, std::string_view prefix, const AttentionStackConfig& cfg, Var features,
                     const memory::MemoryBank<Feature>& bank) {
    if (bank.empty()) throw Error(ErrorCode::EmptyBank, std::string(prefix) + ": memory bank has no entries");
    const nn::Tensor pos = positional_encoding(features.dim(2), features.dim(3), cfg.channels);
    return stack_forward(p, prefix, cfg, features, memory_tokens(p, prefix, bank, pos), pos);
}

Var fuse(const nn::ParamBinding& p, const FuserConfig& cfg, Var a_short, Var a_long) {
    if (a_short.shape() != a_long.shape()) {
        throw Error(ErrorCode::ShapeMismatch, "fuse inputs differ: " + nn::shape_str(a_short.shape()) + " vs " +
                                                  nn::shape_str(a_long.shape()));
    }
    if (a_short.shape().size() != 4 || a_short.dim(1) != cfg.channels) throw Error(ErrorCode::ShapeMismatch, "fuse input channels");
    const int64_t C = cfg.channels, H = a_short.dim(2), W = a_short.dim(3);
    Var s = nn::add(a_short, a_long);
    if (cfg.use_projection) s = nn::conv2d(s, p["fuser.proj.w"], p["fuser.proj.b"]);
    for (int b = 0; b < cfg.num_convnext_blocks; ++b) {
        const std::string blk = "fuser.b" + std::to_string(b);
        Var d = nn::conv2d(s, p[blk + ".dw.w"], p[blk + ".dw.b"], {1, 3, static_cast<int>(C)});
        Var t = nn::layer_norm(nn::nchw_to_tokens(d), p[blk + ".norm.g"], p[blk + ".norm.b"]);
        t = nn::mlp2(t, p[blk + ".fc1.w"], p[blk + ".fc1.b"], p[blk + ".fc2.w"], p[blk + ".fc2.b"]);
        s = nn::add(s, nn::tokens_to_nchw(t, H, W));
    }
    return s;
}

template <class Feature>
Var condition_frame(const nn::ParamBinding& p, const ConditionConfig& cfg, Var features,
                    const memory::MemoryBank<Feature>& short_bank, const memory::MemoryBank<Feature>& long_bank) {
    const nn::Tensor pos = positional_encoding(features.dim(2), features.dim(3), cfg.stack.channels);
    if (!cfg.ablation.dual()) {
        if (long_bank.empty()) throw Error(ErrorCode::BothBanksEmpty, "no memory available for conditioning");
        return stack_forward(p, kLongStack, cfg.stack, features, memory_tokens(p, kLongStack, long_bank, pos), pos);
    }
    if (short_bank.empty() && long_bank.empty()) throw Error(ErrorCode::BothBanksEmpty, "no memory available for conditioning");
    Var a_long = stack_forward(p, kLongStack, cfg.stack, features, memory_tokens(p, kLongStack, long_bank, pos), pos);
    Var a_short = stack_forward(p, kShortStack, cfg.stack, features, memory_tokens(p, kShortStack, short_bank, pos), pos);
    return fuse(p, cfg.fuser, a_short, a_long);
}

template MemoryTokens memory_tokens<Var>(const nn::ParamBinding&, std::string_view, const memory::MemoryBank<Var>&,
                                         const nn::Tensor&);
template MemoryTokens memory_tokens<nn::Tensor>(const nn::ParamBinding&, std::string_view,
                                                const memory::MemoryBank<nn::Tensor>&, const nn::Tensor&);
template Var memory_attention<Var>(const nn::ParamBinding&, std::string_view, const AttentionStackConfig&, Var,
                                   const memory::MemoryBank<Var>&);
template Var memory_attention<nn::Tensor>(const nn::ParamBinding&, std::string_view, const AttentionStackConfig&, Var,
                                          const memory::MemoryBank<nn::Tensor>&);
template Var condition_frame<Var>(const nn::ParamBinding&, const ConditionConfig&, Var, const memory::MemoryBank<Var>&,
                                  const memory::MemoryBank<Var>&);
template Var condition_frame<nn::Tensor>(const nn::ParamBinding&, const ConditionConfig&, Var,
                                         const memory::MemoryBank<nn::Tensor>&, const memory::MemoryBank<nn::Tensor>&);

} // namespace slmprop::attention

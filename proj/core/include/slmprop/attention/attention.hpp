#pragma once

#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "slmprop/memory/memory_bank.hpp"
#include "slmprop/nn/ops.hpp"
#include "slmprop/nn/param_store.hpp"
#include "slmprop/nn/rng.hpp"

namespace slmprop::attention {

struct AttentionStackConfig {
    int num_blocks = 2;
    int heads = 4;
    int64_t channels = 64;

    void validate() const;
    bool operator==(const AttentionStackConfig&) const = default;
};

struct FuserConfig {
    int64_t channels = 64;
    int expansion = 4;
    int num_convnext_blocks = 2;
    bool use_projection = false;

    void validate() const;
    bool operator==(const FuserConfig&) const = default;
};

enum class AblationMode { M_O, M_R7, M_R1, M_O_plus_M_R7, M_O_plus_M_R1 };

std::string_view to_string(AblationMode m);
AblationMode ablation_mode_from_string(std::string_view s);

struct AblationConfig {
    AblationMode mode = AblationMode::M_O_plus_M_R1;

    bool dual() const noexcept { return mode == AblationMode::M_O_plus_M_R7 || mode == AblationMode::M_O_plus_M_R1; }
    // The single bank of single-bank modes, or the long bank of dual modes.
    memory::BankPolicy long_policy() const;
    // Only meaningful for dual modes.
    memory::BankPolicy short_policy() const;
    bool operator==(const AblationConfig&) const = default;
};

inline constexpr std::string_view kLongStack = "attn_long";
inline constexpr std::string_view kShortStack = "attn_short";

void to_json(nlohmann::json& j, const AttentionStackConfig& c);
void from_json(const nlohmann::json& j, AttentionStackConfig& c);
void to_json(nlohmann::json& j, const FuserConfig& c);
void from_json(const nlohmann::json& j, FuserConfig& c);

// Fixed 2D sinusoidal encoding [1, h*w, c]; first half of the channels encodes rows.
nn::Tensor positional_encoding(int64_t h, int64_t w, int64_t c);

void init_stack_params(nn::ParamStore& ps, std::string_view prefix, const AttentionStackConfig& cfg,
                       int temporal_slots, nn::Rng& rng);
// The second pointwise layer of each ConvNeXt block is zero-initialized and the optional
// projection starts as identity, so a fresh fuser returns A_short + A_long exactly.
void init_fuser_params(nn::ParamStore& ps, const FuserConfig& cfg, nn::Rng& rng);

struct MemoryTokens {
    nn::Var keys;   // features + positional + temporal embedding
    nn::Var values; // features
    bool empty() const noexcept { return !keys.valid(); }
};

// Key/value tokens of a bank of [1,C,H,W] features (Var or Tensor). Empty banks give empty
// tokens; use bank_token_count for the EmptyBank contract.
template <class Feature>
MemoryTokens memory_tokens(const nn::ParamBinding& p, std::string_view prefix, const memory::MemoryBank<Feature>& bank,
                           const nn::Tensor& pos);

// Pre-norm blocks of self-attention, cross-attention with the memory and a pointwise MLP.
// Empty memory skips the cross-attention sub-layer.
nn::Var stack_forward(const nn::ParamBinding& p, std::string_view prefix, const AttentionStackConfig& cfg,
                      nn::Var features, const MemoryTokens& memory, const nn::Tensor& pos);

// Throws EmptyBank for an empty bank.
template <class Feature>
nn::Var memory_attention(const nn::ParamBinding& p, std::string_view prefix, const AttentionStackConfig& cfg,
                         nn::Var features, const memory::MemoryBank<Feature>& bank);

nn::Var fuse(const nn::ParamBinding& p, const FuserConfig& cfg, nn::Var a_short, nn::Var a_long);

struct ConditionConfig {
    AttentionStackConfig stack;
    FuserConfig fuser;
    AblationConfig ablation;
};

// Dual modes: both stacks then the fuser; an empty bank runs its stack without
// cross-attention. Single-bank modes run the long stack on `long_bank` and skip the fuser.
template <class Feature>
nn::Var condition_frame(const nn::ParamBinding& p, const ConditionConfig& cfg, nn::Var features,
                        const memory::MemoryBank<Feature>& short_bank, const memory::MemoryBank<Feature>& long_bank);

} // namespace slmprop::attention

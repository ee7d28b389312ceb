#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "slmprop/error.hpp"
#include "slmprop/nn/tensor.hpp"

namespace slmprop::memory {

struct BankPolicy {
    int n_recent = 6;
    int m_prompted = 1;

    void validate() const {
        if (n_recent < 0 || m_prompted < 0 || n_recent + m_prompted < 1) {
            throw Error(ErrorCode::ConfigInvalid, "bank policy needs n_recent, m_prompted >= 0 and a total >= 1 (got " +
                                                      std::to_string(n_recent) + "," + std::to_string(m_prompted) + ")");
        }
    }
    bool operator==(const BankPolicy&) const = default;
};

inline constexpr BankPolicy kLongBank{6, 1};
inline constexpr BankPolicy kShortBank{1, 0};

template <class Feature>
struct MemoryEntry {
    Feature feature;
    int64_t slice_index = 0;
    bool is_conditional = false;
};

// Value type: every update returns a new bank.
template <class Feature>
class MemoryBank {
public:
    using Entry = MemoryEntry<Feature>;

    MemoryBank() : MemoryBank(kLongBank) {}
    explicit MemoryBank(BankPolicy policy) : policy_(policy) { policy_.validate(); }

    const BankPolicy& policy() const noexcept { return policy_; }
    const std::vector<Entry>& recent() const noexcept { return recent_; }
    const std::vector<Entry>& prompted() const noexcept { return prompted_; }
    size_t size() const noexcept { return recent_.size() + prompted_.size(); }
    bool empty() const noexcept { return size() == 0; }

    // Token order: prompted entries, then recent entries oldest to newest.
    std::vector<const Entry*> ordered() const {
        std::vector<const Entry*> out;
        out.reserve(size());
        for (const auto& e : prompted_) out.push_back(&e);
        for (const auto& e : recent_) out.push_back(&e);
        return out;
    }

    // Temporal embedding slot of the i-th ordered entry: recency rank (0 = newest recent
    // entry) or n_recent for conditional entries.
    int temporal_slot(size_t ordered_index) const {
        const Entry* e = ordered()[ordered_index];
        if (e->is_conditional) return policy_.n_recent;
        const size_t pos = ordered_index - prompted_.size();
        return static_cast<int>(recent_.size() - 1 - pos);
    }
    int temporal_slots() const noexcept { return policy_.n_recent + 1; }

private:
    template <class F>
    friend MemoryBank<F> bank_update(MemoryBank<F> bank, MemoryEntry<F> entry);
    template <class F>
    friend MemoryBank<F> bank_reset(MemoryBank<F> bank, bool keep_conditional);

    BankPolicy policy_;
    std::vector<Entry> recent_;
    std::vector<Entry> prompted_;
};

template <class Feature>
MemoryBank<Feature> bank_update(MemoryBank<Feature> bank, MemoryEntry<Feature> entry) {
    if (entry.is_conditional && bank.policy_.m_prompted > 0) {
        if (static_cast<int>(bank.prompted_.size()) == bank.policy_.m_prompted) bank.prompted_.erase(bank.prompted_.begin());
        bank.prompted_.push_back(std::move(entry));
        return bank;
    }
    if (bank.policy_.n_recent == 0) return bank;
    if (static_cast<int>(bank.recent_.size()) == bank.policy_.n_recent) bank.recent_.erase(bank.recent_.begin());
    bank.recent_.push_back(std::move(entry));
    return bank;
}

template <class Feature>
MemoryBank<Feature> bank_reset(MemoryBank<Feature> bank, bool keep_conditional) {
    bank.recent_.clear();
    if (!keep_conditional) bank.prompted_.clear();
    return bank;
}

// Number of key tokens a bank contributes at feature resolution h x w.
template <class Feature>
int64_t bank_token_count(const MemoryBank<Feature>& bank, int64_t h, int64_t w) {
    if (bank.empty()) throw Error(ErrorCode::EmptyBank, "memory bank has no entries");
    return static_cast<int64_t>(bank.size()) * h * w;
}

// Raw key tokens [1, Nk, C] of a bank of [1,C,H,W] features, in ordered() order, without
// temporal or positional embeddings.
using TensorBank = MemoryBank<nn::Tensor>;
nn::Tensor bank_tokens(const TensorBank& bank);

} // namespace slmprop::memory

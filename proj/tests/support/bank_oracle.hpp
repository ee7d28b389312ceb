#pragma once

#include <cstdint>
#include <vector>

#include "slmprop/memory/memory_bank.hpp"
#include "slmprop/nn/rng.hpp"

namespace testsupport {

struct Push {
    int64_t id;
    bool conditional;
};

// Contents implied by the retention rules, computed by slicing the full push history.
inline std::vector<int64_t> oracle_contents(const std::vector<Push>& history, slmprop::memory::BankPolicy p) {
    std::vector<int64_t> cond, rest;
    for (const auto& h : history) (h.conditional && p.m_prompted > 0 ? cond : rest).push_back(h.id);
    auto tail = [](const std::vector<int64_t>& v, int n) {
        const size_t k = std::min(v.size(), static_cast<size_t>(n));
        return std::vector<int64_t>(v.end() - static_cast<std::ptrdiff_t>(k), v.end());
    };
    std::vector<int64_t> out = tail(cond, p.m_prompted);
    for (int64_t id : tail(rest, p.n_recent)) out.push_back(id);
    return out;
}

inline std::vector<int64_t> bank_ids(const slmprop::memory::MemoryBank<int>& b) {
    std::vector<int64_t> ids;
    for (const auto* e : b.ordered()) ids.push_back(e->slice_index);
    return ids;
}

struct BankPropertyStats {
    int sequences = 0;
    int mismatches = 0;
    int conditional_evictions = 0;
};

// Random push sequences against the oracle. A conditional entry counts as evicted if it
// vanishes after a non-conditional push.
inline BankPropertyStats run_bank_property(int sequences, uint64_t seed) {
    using namespace slmprop::memory;
    slmprop::nn::Rng rng(seed);
    BankPropertyStats st;
    const BankPolicy policies[] = {kLongBank, kShortBank, {7, 0}, {1, 1}, {3, 2}, {0, 1}};
    for (int s = 0; s < sequences; ++s) {
        BankPolicy pol = policies[s % 6];
        if (s % 7 == 6) pol = {static_cast<int>(rng.uniform_int(0, 8)), static_cast<int>(rng.uniform_int(1, 3))};
        MemoryBank<int> bank(pol);
        std::vector<Push> hist;
        const int64_t len = rng.uniform_int(0, 30);
        const double p_cond = rng.uniform(0.0, 0.3);
        bool ok = true;
        for (int64_t i = 0; i < len; ++i) {
            const bool cond = (i == 0 && rng.bernoulli(0.7)) || rng.bernoulli(p_cond);
            auto before = bank;
            bank = bank_update(bank, MemoryEntry<int>{0, i, cond});
            hist.push_back({i, cond});
            if (bank_ids(bank) != oracle_contents(hist, pol)) ok = false;
            if (static_cast<int>(bank.recent().size()) > pol.n_recent ||
                static_cast<int>(bank.prompted().size()) > pol.m_prompted)
                ok = false;
            if (!cond && pol.m_prompted > 0) {
                for (const auto& e : before.prompted()) {
                    bool kept = false;
                    for (const auto& f : bank.prompted()) kept |= f.slice_index == e.slice_index;
                    if (!kept) ++st.conditional_evictions;
                }
            }
        }
        if (!ok) ++st.mismatches;
        ++st.sequences;
    }
    return st;
}

} // namespace testsupport

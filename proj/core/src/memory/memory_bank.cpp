#include "slmprop/memory/memory_bank.hpp"

namespace slmprop::memory {

nn::Tensor bank_tokens(const TensorBank& bank) {
    if (bank.empty()) throw Error(ErrorCode::EmptyBank, "memory bank has no entries");
    const auto entries = bank.ordered();
    const nn::Shape& s = entries.front()->feature.shape();
    if (s.size() != 4 || s[0] != 1) throw Error(ErrorCode::ShapeMismatch, "bank features must be [1,C,H,W]");
    const int64_t C = s[1], HW = s[2] * s[3];
    nn::Tensor out({1, static_cast<int64_t>(entries.size()) * HW, C});
    int64_t row = 0;
    for (const auto* e : entries) {
        if (e->feature.shape() != s) throw Error(ErrorCode::ShapeMismatch, "bank features differ in shape");
        const double* f = e->feature.ptr();
        for (int64_t p = 0; p < HW; ++p, ++row)
            for (int64_t c = 0; c < C; ++c) out[row * C + c] = f[c * HW + p];
    }
    return out;
}

} // namespace slmprop::memory

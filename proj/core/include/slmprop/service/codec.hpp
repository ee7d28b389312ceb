#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace slmprop::service {

std::string base64_encode(std::string_view bytes);
// Throws ConfigInvalid on characters outside the standard alphabet or bad padding.
std::string base64_decode(std::string_view text);

// Runs of nonzero entries over the row-major flattening as (start, length) little-endian u32
// pairs, base64 encoded. An all-zero mask encodes to "".
std::string rle_encode(std::span<const uint8_t> mask);
// Runs must be nonempty, maximal (not touching), increasing and inside `size`; returns a 0/1 mask.
std::vector<uint8_t> rle_decode(std::string_view text, size_t size);

// 8-bit grayscale (channels 1) or RGB (channels 3), filter 0 rows, zlib compressed.
std::string png_encode(std::span<const uint8_t> pixels, uint32_t width, uint32_t height, int channels);

} // namespace slmprop::service

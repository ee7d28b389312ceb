#include "slmprop/service/codec.hpp"


#include <zlib.h>

#include "slmprop/error.hpp"

namespace slmprop::service {

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int sextet(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
}

void put_u32_le(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

uint32_t get_u32_le(std::string_view s, size_t at) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
    return v;
}

void put_u32_be(std::string& out, uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void chunk(std::string& png, const char* type, const std::string& data) {
    put_u32_be(png, static_cast<uint32_t>(data.size()));
    std::string body(type, 4);
    body += data;
    png += body;
    put_u32_be(png, static_cast<uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
                                                static_cast<uInt>(body.size()))));
}

} // namespace

std::string base64_encode(std::string_view bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const uint32_t n = (static_cast<unsigned char>(bytes[i]) << 16) | (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                           static_cast<unsigned char>(bytes[i + 2]);
        out += kAlphabet[(n >> 18) & 63];
        out += kAlphabet[(n >> 12) & 63];
        out += kAlphabet[(n >> 6) & 63];
        out += kAlphabet[n & 63];
    }
    if (const size_t rest = bytes.size() - i; rest > 0) {
        uint32_t n = static_cast<unsigned char>(bytes[i]) << 16;
        if (rest == 2) n |= static_cast<unsigned char>(bytes[i + 1]) << 8;
        out += kAlphabet[(n >> 18) & 63];
        out += kAlphabet[(n >> 12) & 63];
        out += rest == 2 ? kAlphabet[(n >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

std::string base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) throw Error(ErrorCode::ConfigInvalid, "base64 length is not a multiple of 4");
    std::string out;
    out.reserve(text.size() / 4 * 3);
    for (size_t i = 0; i < text.size(); i += 4) {
        const bool last = i + 4 == text.size();
        const int pad = last ? (text[i + 3] == '=') + (text[i + 2] == '=') : 0;
        if (pad == 1 && text[i + 2] == '=') throw Error(ErrorCode::ConfigInvalid, "bad base64 padding");
        uint32_t n = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = text[i + k];
            int v = 0;
            if (k >= 4 - pad) {
                if (c != '=') throw Error(ErrorCode::ConfigInvalid, "bad base64 padding");
            } else if ((v = sextet(c)) < 0) {
                throw Error(ErrorCode::ConfigInvalid, "bad base64 character");
            }
            n = (n << 6) | static_cast<uint32_t>(v);
        }
        out += static_cast<char>((n >> 16) & 0xFF);
        if (pad < 2) out += static_cast<char>((n >> 8) & 0xFF);
        if (pad < 1) out += static_cast<char>(n & 0xFF);
    }
    return out;
}

std::string rle_encode(std::span<const uint8_t> mask) {
    std::string raw;
    size_t i = 0;
    while (i < mask.size()) {
        if (!mask[i]) {
            ++i;
            continue;
        }
        const size_t start = i;
        while (i < mask.size() && mask[i]) ++i;
        put_u32_le(raw, static_cast<uint32_t>(start));
        put_u32_le(raw, static_cast<uint32_t>(i - start));
    }
    return base64_encode(raw);
}

std::vector<uint8_t> rle_decode(std::string_view text, size_t size) {
    const std::string raw = base64_decode(text);
    if (raw.size() % 8 != 0) throw Error(ErrorCode::ConfigInvalid, "RLE payload is not a list of u32 pairs");
    std::vector<uint8_t> mask(size, 0);
    uint64_t end = 0;
    for (size_t at = 0; at < raw.size(); at += 8) {
        const uint64_t start = get_u32_le(raw, at), len = get_u32_le(raw, at + 4);
        if (len == 0) throw Error(ErrorCode::ConfigInvalid, "RLE run of length 0");
        if (at > 0 && start <= end) throw Error(ErrorCode::ConfigInvalid, "RLE runs overlap or are unordered");
        if (start + len > size) throw Error(ErrorCode::ConfigInvalid, "RLE run outside the mask");
        std::fill(mask.begin() + static_cast<std::ptrdiff_t>(start), mask.begin() + static_cast<std::ptrdiff_t>(start + len),
                  uint8_t{1});
        end = start + len;
    }
    return mask;
}

std::string png_encode(std::span<const uint8_t> pixels, uint32_t width, uint32_t height, int channels) {
    if (channels != 1 && channels != 3) throw Error(ErrorCode::ConfigInvalid, "png needs 1 or 3 channels");
    const size_t row = static_cast<size_t>(width) * static_cast<size_t>(channels);
    if (pixels.size() != row * height) throw Error(ErrorCode::DimMismatch, "pixel count does not match png size");
    std::string filtered;
    filtered.reserve((row + 1) * height);
    for (uint32_t y = 0; y < height; ++y) {
        filtered.push_back('\0');
        filtered.append(reinterpret_cast<const char*>(pixels.data()) + y * row, row);
    }
    uLongf cap = compressBound(static_cast<uLong>(filtered.size()));
    std::string z(cap, '\0');
    if (compress2(reinterpret_cast<Bytef*>(z.data()), &cap, reinterpret_cast<const Bytef*>(filtered.data()),
                  static_cast<uLong>(filtered.size()), 6) != Z_OK)
        throw Error(ErrorCode::IoFailure, "zlib compression failed");
    z.resize(cap);

    std::string png("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    put_u32_be(ihdr, width);
    put_u32_be(ihdr, height);
    ihdr += static_cast<char>(8);
    ihdr += static_cast<char>(channels == 1 ? 0 : 2);
    ihdr += std::string(3, '\0');
    chunk(png, "IHDR", ihdr);
    chunk(png, "IDAT", z);
    chunk(png, "IEND", "");
    return png;
}

} // namespace slmprop::service

#include "slmprop/io/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "detail/binary_io.hpp"
#include "slmprop/error.hpp"

namespace slmprop::io {

namespace {

void check_dims(const Dims& d) {
    if (d.depth <= 0 || d.height <= 0 || d.width <= 0) {
        throw Error(ErrorCode::SpecInvalid, "volume dims must be positive");
    }
}

void check_spacing(const Spacing& s) {
    if (!(s.z > 0.0f) || !(s.y > 0.0f) || !(s.x > 0.0f)) {
        throw Error(ErrorCode::SpecInvalid, "voxel spacing must be positive");
    }
}

struct Header {
    char magic[4];
    uint32_t version;
    PayloadType dtype;
    uint8_t modality;
    Dims dims;
    Spacing spacing;
};

void write_header(std::ostream& os, const char* magic, PayloadType dtype, uint8_t modality, const Dims& d,
                  const Spacing& s) {
    os.write(magic, 4);
    detail::write_le<uint32_t>(os, kFormatVersion);
    detail::write_le<uint8_t>(os, static_cast<uint8_t>(dtype));
    detail::write_le<uint8_t>(os, modality);
    detail::write_le<uint16_t>(os, 0);
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(d.depth));
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(d.height));
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(d.width));
    detail::write_le<float>(os, s.z);
    detail::write_le<float>(os, s.y);
    detail::write_le<float>(os, s.x);
}

Header read_header(std::istream& is, std::string_view expected_magic) {
    Header h{};
    if (!is.read(h.magic, 4)) throw Error(ErrorCode::TruncatedFile, "file ends inside field 'magic'");
    if (std::string_view(h.magic, 4) != expected_magic) {
        throw Error(ErrorCode::BadMagic, "field 'magic' is '" + std::string(h.magic, 4) + "', expected '" +
                                             std::string(expected_magic) + "'");
    }
    h.version = detail::read_le<uint32_t>(is, "version");
    if (h.version != kFormatVersion) {
        throw Error(ErrorCode::UnsupportedVersion, "field 'version' is " + std::to_string(h.version));
    }
    const auto dtype = detail::read_le<uint8_t>(is, "dtype");
    if (dtype > 1) throw Error(ErrorCode::UnsupportedVersion, "field 'dtype' has unknown tag " + std::to_string(dtype));
    h.dtype = static_cast<PayloadType>(dtype);
    h.modality = detail::read_le<uint8_t>(is, "modality");
    if (h.modality > 3) throw Error(ErrorCode::UnsupportedVersion, "field 'modality' has unknown tag");
    detail::read_le<uint16_t>(is, "pad");
    h.dims.depth = detail::read_le<uint32_t>(is, "D");
    h.dims.height = detail::read_le<uint32_t>(is, "H");
    h.dims.width = detail::read_le<uint32_t>(is, "W");
    h.spacing.z = detail::read_le<float>(is, "sz");
    h.spacing.y = detail::read_le<float>(is, "sy");
    h.spacing.x = detail::read_le<float>(is, "sx");
    if (h.dims.depth == 0 || h.dims.height == 0 || h.dims.width == 0) {
        throw Error(ErrorCode::SpecInvalid, "header dims must be positive");
    }
    check_spacing(h.spacing);
    return h;
}

template <class T>
void read_payload(std::istream& is, std::vector<T>& out, int64_t count) {
    out.resize(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        T v{};
        if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
            throw Error(ErrorCode::TruncatedFile, "field 'payload' holds " + std::to_string(i) + " of " +
                                                      std::to_string(count) + " voxels");
        }
        out[static_cast<size_t>(i)] = detail::byteswap_if_big(v);
    }
}

} // namespace

std::string_view to_string(Modality m) {
    switch (m) {
    case Modality::CT: return "CT";
    case Modality::MR: return "MR";
    case Modality::US: return "US";
    case Modality::SYNTH: return "SYNTH";
    }
    return "SYNTH";
}

Modality modality_from_string(std::string_view s) {
    if (s == "CT") return Modality::CT;
    if (s == "MR") return Modality::MR;
    if (s == "US") return Modality::US;
    if (s == "SYNTH") return Modality::SYNTH;
    throw Error(ErrorCode::ConfigInvalid, "unknown modality '" + std::string(s) + "'");
}

Volume::Volume(Dims dims, Spacing spacing, Modality modality)
    : Volume(dims, spacing, modality, std::vector<float>(static_cast<size_t>(std::max<int64_t>(dims.voxels(), 0)))) {}

Volume::Volume(Dims dims, Spacing spacing, Modality modality, std::vector<float> voxels)
    : dims_(dims), spacing_(spacing), modality_(modality), voxels_(std::move(voxels)) {
    check_dims(dims_);
    check_spacing(spacing_);
    if (static_cast<int64_t>(voxels_.size()) != dims_.voxels()) {
        throw Error(ErrorCode::ShapeMismatch, "voxel count does not match D*H*W");
    }
}

Image2D Volume::slice(int64_t z) const {
    if (z < 0 || z >= dims_.depth) throw Error(ErrorCode::IndexOutOfRange, "slice " + std::to_string(z));
    Image2D out(dims_.height, dims_.width);
    std::copy_n(voxels_.begin() + static_cast<std::ptrdiff_t>(z * dims_.slice_size()), dims_.slice_size(),
                out.values.begin());
    return out;
}

MaskVolume::MaskVolume(Dims dims, Spacing spacing)
    : MaskVolume(dims, spacing, std::vector<uint8_t>(static_cast<size_t>(std::max<int64_t>(dims.voxels(), 0)), 0)) {}

MaskVolume::MaskVolume(Dims dims, Spacing spacing, std::vector<uint8_t> labels)
    : dims_(dims), spacing_(spacing), labels_(std::move(labels)) {
    check_dims(dims_);
    check_spacing(spacing_);
    if (static_cast<int64_t>(labels_.size()) != dims_.voxels()) {
        throw Error(ErrorCode::ShapeMismatch, "label count does not match D*H*W");
    }
    rebuild_ids();
}

void MaskVolume::rebuild_ids() {
    std::set<uint8_t> ids(object_ids_.begin(), object_ids_.end());
    for (auto l : labels_)
        if (l != 0) ids.insert(l);
    object_ids_.assign(ids.begin(), ids.end());
}

void MaskVolume::declare_object(uint8_t id) {
    if (id == 0) throw Error(ErrorCode::SpecInvalid, "object id 0 is reserved for background");
    if (std::find(object_ids_.begin(), object_ids_.end(), id) == object_ids_.end()) {
        object_ids_.push_back(id);
        std::sort(object_ids_.begin(), object_ids_.end());
    }
}

void MaskVolume::set(int64_t z, int64_t y, int64_t x, uint8_t label) {
    labels_[index(z, y, x)] = label;
    if (label != 0) declare_object(label);
}

Label2D MaskVolume::slice(int64_t z) const {
    if (z < 0 || z >= dims_.depth) throw Error(ErrorCode::IndexOutOfRange, "slice " + std::to_string(z));
    Label2D out(dims_.height, dims_.width);
    std::copy_n(labels_.begin() + static_cast<std::ptrdiff_t>(z * dims_.slice_size()), dims_.slice_size(),
                out.values.begin());
    return out;
}

Label2D MaskVolume::object_slice(int64_t z, uint8_t object_id) const {
    Label2D out = slice(z);
    for (auto& v : out.values) v = (v == object_id) ? 1 : 0;
    return out;
}

void MaskVolume::set_object_slice(int64_t z, uint8_t object_id, const Label2D& binary) {
    if (z < 0 || z >= dims_.depth) throw Error(ErrorCode::IndexOutOfRange, "slice " + std::to_string(z));
    if (binary.height != dims_.height || binary.width != dims_.width) {
        throw Error(ErrorCode::DimMismatch, "slice mask dims do not match volume");
    }
    declare_object(object_id);
    const int64_t base = z * dims_.slice_size();
    for (int64_t i = 0; i < dims_.slice_size(); ++i) {
        auto& l = labels_[static_cast<size_t>(base + i)];
        if (binary.values[static_cast<size_t>(i)]) l = object_id;
        else if (l == object_id) l = 0;
    }
}

int64_t MaskVolume::object_area(int64_t z, uint8_t object_id) const {
    const int64_t base = z * dims_.slice_size();
    int64_t n = 0;
    for (int64_t i = 0; i < dims_.slice_size(); ++i) n += labels_[static_cast<size_t>(base + i)] == object_id;
    return n;
}

MaskVolume MaskVolume::binary_of(uint8_t object_id) const {
    std::vector<uint8_t> out(labels_.size());
    for (size_t i = 0; i < labels_.size(); ++i) out[i] = labels_[i] == object_id ? 1 : 0;
    return MaskVolume(dims_, spacing_, std::move(out));
}

Volume read_volume(std::istream& is) {
    const Header h = read_header(is, "SVOL");
    std::vector<float> voxels;
    if (h.dtype == PayloadType::F32) {
        read_payload(is, voxels, h.dims.voxels());
    } else {
        std::vector<uint8_t> raw;
        read_payload(is, raw, h.dims.voxels());
        voxels.assign(raw.begin(), raw.end());
    }
    return Volume(h.dims, h.spacing, static_cast<Modality>(h.modality), std::move(voxels));
}

void write_volume(const Volume& v, std::ostream& os) {
    write_header(os, "SVOL", PayloadType::F32, static_cast<uint8_t>(v.modality()), v.dims(), v.spacing());
    for (float x : v.voxels()) detail::write_le<float>(os, x);
}

MaskVolume read_mask(std::istream& is) {
    const Header h = read_header(is, "SMSK");
    if (h.dtype != PayloadType::U8) throw Error(ErrorCode::UnsupportedVersion, "field 'dtype' must be u8 for masks");
    std::vector<uint8_t> labels;
    read_payload(is, labels, h.dims.voxels());
    return MaskVolume(h.dims, h.spacing, std::move(labels));
}

void write_mask(const MaskVolume& m, std::ostream& os, Modality modality) {
    write_header(os, "SMSK", PayloadType::U8, static_cast<uint8_t>(modality), m.dims(), m.spacing());
    os.write(reinterpret_cast<const char*>(m.labels().data()), static_cast<std::streamsize>(m.labels().size()));
}

Volume load_volume(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorCode::IoFailure, "cannot open '" + path.string() + "'");
    return read_volume(is);
}

void save_volume(const Volume& v, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorCode::IoFailure, "cannot open '" + path.string() + "' for writing");
    write_volume(v, os);
    if (!os) throw Error(ErrorCode::IoFailure, "write failed for '" + path.string() + "'");
}

MaskVolume load_mask(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorCode::IoFailure, "cannot open '" + path.string() + "'");
    return read_mask(is);
}

void save_mask(const MaskVolume& m, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorCode::IoFailure, "cannot open '" + path.string() + "' for writing");
    write_mask(m, os);
    if (!os) throw Error(ErrorCode::IoFailure, "write failed for '" + path.string() + "'");
}

Volume decode_volume(std::string_view bytes) {
    std::istringstream is{std::string(bytes), std::ios::binary};
    return read_volume(is);
}

std::string encode_volume(const Volume& v) {
    std::ostringstream os(std::ios::binary);
    write_volume(v, os);
    return os.str();
}

Volume normalize_volume(const Volume& v) {
    std::vector<double> x(v.voxels().begin(), v.voxels().end());
    if (v.modality() == Modality::CT) {
        for (auto& e : x) e = std::clamp<double>(e, kCtClipLow, kCtClipHigh);
    }
    const auto [mn_it, mx_it] = std::minmax_element(x.begin(), x.end());
    const double mn = *mn_it, mx = *mx_it;
    std::vector<float> out(x.size(), 0.0f);
    if (mx > mn) {
        const double s = 255.0 / (mx - mn);
        for (size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(std::clamp((x[i] - mn) * s, 0.0, 255.0));
    }
    return Volume(v.dims(), v.spacing(), v.modality(), std::move(out));
}

Image2D resize_slice(const Image2D& in, int64_t height, int64_t width, ResizeSampling sampling) {
    if (height < 1 || width < 1) throw Error(ErrorCode::SpecInvalid, "resize target must be at least 1x1");
    if (height == in.height && width == in.width) return in;
    auto source = [sampling](int64_t dst, int64_t in_n, int64_t out_n) {
        double s;
        if (sampling == ResizeSampling::AlignCornersTrue) {
            s = out_n > 1 ? static_cast<double>(dst) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1) : 0.0;
        } else {
            s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in_n) / static_cast<double>(out_n) - 0.5;
        }
        return std::clamp(s, 0.0, static_cast<double>(in_n - 1));
    };
    Image2D out(height, width);
    for (int64_t y = 0; y < height; ++y) {
        const double sy = source(y, in.height, height);
        const auto y0 = static_cast<int64_t>(std::floor(sy));
        const int64_t y1 = std::min(y0 + 1, in.height - 1);
        const double fy = sy - static_cast<double>(y0);
        for (int64_t x = 0; x < width; ++x) {
            const double sx = source(x, in.width, width);
            const auto x0 = static_cast<int64_t>(std::floor(sx));
            const int64_t x1 = std::min(x0 + 1, in.width - 1);
            const double fx = sx - static_cast<double>(x0);
            const double top = in.at(y0, x0) * (1.0 - fx) + in.at(y0, x1) * fx;
            const double bot = in.at(y1, x0) * (1.0 - fx) + in.at(y1, x1) * fx;
            out.at(y, x) = static_cast<float>(top * (1.0 - fy) + bot * fy);
        }
    }
    return out;
}

Label2D resize_labels(const Label2D& in, int64_t height, int64_t width) {
    if (height < 1 || width < 1) throw Error(ErrorCode::SpecInvalid, "resize target must be at least 1x1");
    if (height == in.height && width == in.width) return in;
    Label2D out(height, width);
    for (int64_t y = 0; y < height; ++y) {
        const int64_t sy = std::min(in.height - 1, (2 * y + 1) * in.height / (2 * height));
        for (int64_t x = 0; x < width; ++x) {
            const int64_t sx = std::min(in.width - 1, (2 * x + 1) * in.width / (2 * width));
            out.at(y, x) = in.at(sy, sx);
        }
    }
    return out;
}

} // namespace slmprop::io

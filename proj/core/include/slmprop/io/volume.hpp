#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace slmprop::io {

enum class Modality : uint8_t { CT = 0, MR = 1, US = 2, SYNTH = 3 };
enum class PayloadType : uint8_t { F32 = 0, U8 = 1 };

std::string_view to_string(Modality m);
Modality modality_from_string(std::string_view s);

// Volume extent in voxels, index order (slice, row, col).
struct Dims {
    int64_t depth = 0;
    int64_t height = 0;
    int64_t width = 0;

    int64_t voxels() const noexcept { return depth * height * width; }
    int64_t slice_size() const noexcept { return height * width; }
    bool operator==(const Dims&) const = default;
};

// Physical size of one voxel along (slice, row, col).
struct Spacing {
    float z = 1.0f;
    float y = 1.0f;
    float x = 1.0f;
    bool operator==(const Spacing&) const = default;
};

template <class T>
struct Grid2D {
    int64_t height = 0;
    int64_t width = 0;
    std::vector<T> values;

    Grid2D() = default;
    Grid2D(int64_t h, int64_t w, T fill = T{}) : height(h), width(w), values(static_cast<size_t>(h * w), fill) {}

    T& at(int64_t y, int64_t x) { return values[static_cast<size_t>(y * width + x)]; }
    const T& at(int64_t y, int64_t x) const { return values[static_cast<size_t>(y * width + x)]; }
    bool operator==(const Grid2D&) const = default;
};

using Image2D = Grid2D<float>;
using Label2D = Grid2D<uint8_t>;

class Volume {
public:
    Volume() = default;
    Volume(Dims dims, Spacing spacing, Modality modality);
    Volume(Dims dims, Spacing spacing, Modality modality, std::vector<float> voxels);

    const Dims& dims() const noexcept { return dims_; }
    const Spacing& spacing() const noexcept { return spacing_; }
    Modality modality() const noexcept { return modality_; }
    const std::vector<float>& voxels() const noexcept { return voxels_; }
    std::vector<float>& voxels() noexcept { return voxels_; }

    float& at(int64_t z, int64_t y, int64_t x) { return voxels_[index(z, y, x)]; }
    float at(int64_t z, int64_t y, int64_t x) const { return voxels_[index(z, y, x)]; }

    Image2D slice(int64_t z) const;

    bool operator==(const Volume&) const = default;

private:
    size_t index(int64_t z, int64_t y, int64_t x) const {
        return static_cast<size_t>((z * dims_.height + y) * dims_.width + x);
    }

    Dims dims_;
    Spacing spacing_;
    Modality modality_ = Modality::SYNTH;
    std::vector<float> voxels_;
};

// Per-voxel labels; 0 is background. object_ids are the distinct non-zero labels present
// or declared at construction.
class MaskVolume {
public:
    MaskVolume() = default;
    MaskVolume(Dims dims, Spacing spacing);
    MaskVolume(Dims dims, Spacing spacing, std::vector<uint8_t> labels);

    const Dims& dims() const noexcept { return dims_; }
    const Spacing& spacing() const noexcept { return spacing_; }
    const std::vector<uint8_t>& labels() const noexcept { return labels_; }
    const std::vector<uint8_t>& object_ids() const noexcept { return object_ids_; }
    int num_objects() const noexcept { return static_cast<int>(object_ids_.size()); }

    uint8_t at(int64_t z, int64_t y, int64_t x) const { return labels_[index(z, y, x)]; }
    void set(int64_t z, int64_t y, int64_t x, uint8_t label);

    // Registers an object id that may not (yet) occur in the labels.
    void declare_object(uint8_t id);

    Label2D slice(int64_t z) const;
    // Binary slice: 1 where label == object_id.
    Label2D object_slice(int64_t z, uint8_t object_id) const;
    void set_object_slice(int64_t z, uint8_t object_id, const Label2D& binary);
    int64_t object_area(int64_t z, uint8_t object_id) const;
    bool object_present(int64_t z, uint8_t object_id) const { return object_area(z, object_id) > 0; }

    // Binary volume (labels 0/1) of one object.
    MaskVolume binary_of(uint8_t object_id) const;

    bool operator==(const MaskVolume&) const = default;

private:
    size_t index(int64_t z, int64_t y, int64_t x) const {
        return static_cast<size_t>((z * dims_.height + y) * dims_.width + x);
    }
    void rebuild_ids();

    Dims dims_;
    Spacing spacing_;
    std::vector<uint8_t> labels_;
    std::vector<uint8_t> object_ids_;
};

// SVOL / SMSK little-endian layout:
// magic[4] | version u32 | dtype u8 | modality u8 | pad u16 | D,H,W u32 | sz,sy,sx f32 | payload
inline constexpr uint32_t kFormatVersion = 1;
inline constexpr size_t kHeaderBytes = 36;

Volume read_volume(std::istream& is);
void write_volume(const Volume& v, std::ostream& os);
MaskVolume read_mask(std::istream& is);
void write_mask(const MaskVolume& m, std::ostream& os, Modality modality = Modality::SYNTH);

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);
MaskVolume load_mask(const std::filesystem::path& path);
void save_mask(const MaskVolume& m, const std::filesystem::path& path);

Volume decode_volume(std::string_view bytes);
std::string encode_volume(const Volume& v);

inline constexpr float kCtClipLow = -1024.0f;
inline constexpr float kCtClipHigh = 2000.0f;

// CT: clip to [-1024, 2000] first. Then whole-volume min-max to [0, 255]; constant volumes
// become all zeros.
Volume normalize_volume(const Volume& v);

enum class ResizeSampling { AlignCornersFalse, AlignCornersTrue };

Image2D resize_slice(const Image2D& slice, int64_t height, int64_t width,
                     ResizeSampling sampling = ResizeSampling::AlignCornersFalse);
// Nearest-neighbour; never introduces new label values.
Label2D resize_labels(const Label2D& slice, int64_t height, int64_t width);

} // namespace slmprop::io

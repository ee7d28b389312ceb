#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace slmprop::nn {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value) { return Tensor({1}, value); }

    const Shape& shape() const noexcept { return shape_; }
    int64_t dim(int axis) const;
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int64_t numel() const noexcept { return static_cast<int64_t>(data_.size()); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    double* ptr() noexcept { return data_.data(); }
    const double* ptr() const noexcept { return data_.data(); }

    double& operator[](int64_t i) noexcept { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const noexcept { return data_[static_cast<size_t>(i)]; }

    // 4-D convenience accessor (b, c, y, x).
    double& at(int64_t b, int64_t c, int64_t y, int64_t x);
    double at(int64_t b, int64_t c, int64_t y, int64_t x) const;

    double item() const;
    Tensor reshaped(Shape shape) const;
    void fill(double value);

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

} // namespace slmprop::nn

#include "slmprop/nn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "slmprop/error.hpp"

namespace slmprop::nn {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (auto d : shape) {
        if (d <= 0) throw Error(ErrorCode::ShapeMismatch, "non-positive dimension in " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
        throw Error(ErrorCode::ShapeMismatch, "data length " + std::to_string(data_.size()) +
                                                  " does not match shape " + shape_str(shape_));
    }
}

int64_t Tensor::dim(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) throw Error(ErrorCode::ShapeMismatch, "axis out of range");
    return shape_[static_cast<size_t>(axis)];
}

double& Tensor::at(int64_t b, int64_t c, int64_t y, int64_t x) {
    return data_[static_cast<size_t>(((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
}

double Tensor::at(int64_t b, int64_t c, int64_t y, int64_t x) const {
    return data_[static_cast<size_t>(((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
}

double Tensor::item() const {
    if (data_.size() != 1) throw Error(ErrorCode::ShapeMismatch, "item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
        throw Error(ErrorCode::ShapeMismatch, "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw Error(ErrorCode::ShapeMismatch, "max_abs_diff shapes differ");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace slmprop::nn

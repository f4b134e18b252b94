// SPDX-License-Identifier: Apache-2.0
#include "pts/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace pts {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (shape_numel(shape_) != data_.size()) {
        throw std::invalid_argument("tensor: shape " + shape_string(shape_) + " does not hold " +
                                    std::to_string(data_.size()) + " values");
    }
}

void Tensor::reshape(Shape shape) {
    if (shape_numel(shape) != data_.size()) {
        throw std::invalid_argument("tensor: cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
}

Tensor Tensor::reshaped(Shape shape) const {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
    if (t.rank() == 0 || begin > end || end > t.dim(0)) throw std::out_of_range("slice_rows: bad range");
    const std::size_t row = t.numel() / t.dim(0);
    Shape shape = t.shape();
    shape[0] = end - begin;
    std::vector<double> values(t.data() + begin * row, t.data() + end * row);
    return Tensor(std::move(shape), std::move(values));
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
    if (t.rank() == 0) throw std::invalid_argument("gather_rows: scalar tensor");
    const std::size_t row = t.numel() / t.dim(0);
    Shape shape = t.shape();
    shape[0] = rows.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= t.dim(0)) throw std::out_of_range("gather_rows: row index");
        std::memcpy(out.data() + i * row, t.data() + rows[i] * row, row * sizeof(double));
    }
    return out;
}

std::uint64_t fnv1a64(const void* bytes, std::size_t size, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace pts

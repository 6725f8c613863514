#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mhc/errors.hpp"
#include "mhc/rng.hpp"

namespace mhc {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename Scalar>
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense row-major tensor with a dynamic shape. All vector/matrix quantities in
// the project live in one of these; Eigen maps give matrix views into the flat
// storage without copying.
template <typename Scalar>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), Scalar(0)) {}

    Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
            throw std::invalid_argument("tensor: data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, Scalar v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor identity(int n) {
        Tensor t({n, n});
        for (int i = 0; i < n; ++i) t.data_[static_cast<std::size_t>(i) * n + i] = Scalar(1);
        return t;
    }

    static Tensor randn(Shape shape, SplitMix64& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = static_cast<Scalar>(rng.next_normal() * stddev);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }
    std::vector<Scalar>& storage() { return data_; }
    const std::vector<Scalar>& storage() const { return data_; }

    Scalar& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    Scalar operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    Scalar& operator()(int i, int j) { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
    Scalar operator()(int i, int j) const { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }

    Scalar& operator()(int i, int j, int k) {
        return data_[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    Scalar operator()(int i, int j, int k) const {
        return data_[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    // 2-D Eigen view of the full storage.
    Eigen::Map<MatrixRM<Scalar>> mat() {
        check_rank2();
        return {data_.data(), dim(0), dim(1)};
    }
    Eigen::Map<const MatrixRM<Scalar>> mat() const {
        check_rank2();
        return {data_.data(), dim(0), dim(1)};
    }

    // Arbitrary [rows x cols] view (rows*cols must cover the storage).
    Eigen::Map<MatrixRM<Scalar>> view(int rows, int cols) {
        return {data_.data(), rows, cols};
    }
    Eigen::Map<const MatrixRM<Scalar>> view(int rows, int cols) const {
        return {data_.data(), rows, cols};
    }

    Eigen::Map<Eigen::Vector<Scalar, Eigen::Dynamic>> vec() {
        return {data_.data(), static_cast<Eigen::Index>(data_.size())};
    }
    Eigen::Map<const Eigen::Vector<Scalar, Eigen::Dynamic>> vec() const {
        return {data_.data(), static_cast<Eigen::Index>(data_.size())};
    }

    template <typename To>
    Tensor<To> cast() const {
        Tensor<To> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[static_cast<std::int64_t>(i)] = static_cast<To>(data_[i]);
        return out;
    }

    Tensor reshaped(Shape new_shape) const {
        if (shape_numel(new_shape) != size())
            throw std::invalid_argument("reshape: " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                                        " changes element count");
        Tensor t = *this;
        t.shape_ = std::move(new_shape);
        return t;
    }

    bool all_finite() const {
        for (Scalar v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void require_finite(const char* what) const {
        if (!all_finite()) throw numeric_error(std::string("non-finite value in ") + what);
    }

private:
    void check_rank2() const {
        if (rank() != 2)
            throw std::invalid_argument("expected rank-2 tensor, got " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<Scalar> data_;
};

// Global switch for per-operation finiteness scans. On by default; the cost is
// a linear pass over each result.
inline bool& finite_checks() {
    static bool enabled = true;
    return enabled;
}

}  // namespace mhc

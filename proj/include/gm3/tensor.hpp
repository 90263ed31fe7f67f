#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "gm3/common.hpp"

namespace gm3 {

enum class Dtype : uint8_t { f32 = 0, f64 = 1 };

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
    static constexpr Dtype value = Dtype::f32;
};
template <>
struct dtype_of<double> {
    static constexpr Dtype value = Dtype::f64;
};

std::string shape_str(const std::vector<int>& shape);
int64_t shape_numel(const std::vector<int>& shape);

// Dense row-major tensor. Plain value type: copyable, owning, no views.
// Rank 0 is a scalar (one element).
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)), data_(size_t(checked_numel(shape_)), T(0)) {}

    Tensor(std::vector<int> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (int64_t(data_.size()) != checked_numel(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(T v) { return Tensor({}, {v}); }
    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, T v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return int(shape_.size()); }
    int dim(int i) const { return shape_[size_t(i)]; }
    int64_t size() const { return int64_t(data_.size()); }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](int64_t i) { return data_[size_t(i)]; }
    T operator[](int64_t i) const { return data_[size_t(i)]; }

    // 2-D access (row-major).
    T& at(int i, int j) { return data_[size_t(i) * size_t(shape_[1]) + size_t(j)]; }
    T at(int i, int j) const { return data_[size_t(i) * size_t(shape_[1]) + size_t(j)]; }

    // 3-D access.
    T& at(int i, int j, int k) {
        return data_[(size_t(i) * size_t(shape_[1]) + size_t(j)) * size_t(shape_[2]) + size_t(k)];
    }
    T at(int i, int j, int k) const {
        return data_[(size_t(i) * size_t(shape_[1]) + size_t(j)) * size_t(shape_[2]) + size_t(k)];
    }

    void fill(T v) {
        for (auto& x : data_) x = v;
    }

    bool all_finite() const {
        for (const T& x : data_)
            if (!std::isfinite(double(x))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) out[i] = U(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    // Debug dump format: 8-byte magic "GM3TENSR", dtype byte, rank byte,
    // dims as u64 little-endian, then the raw little-endian payload.
    void save(std::ostream& os) const;
    static Tensor load(std::istream& is);
    void save_file(const std::string& path) const;
    static Tensor load_file(const std::string& path);

private:
    static int64_t checked_numel(const std::vector<int>& shape) {
        for (int d : shape) {
            if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
        }
        return shape_numel(shape);
    }

    std::vector<int> shape_;
    std::vector<T> data_;
};

// Fills with samples; mean/std in the tensor's own precision.
template <typename T>
Tensor<T> random_normal(Rng& rng, std::vector<int> shape, double mean = 0.0, double stddev = 1.0) {
    Tensor<T> t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = T(rng.normal(mean, stddev));
    return t;
}

template <typename T>
Tensor<T> random_uniform(Rng& rng, std::vector<int> shape, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = T(rng.uniform(lo, hi));
    return t;
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace gm3

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"

namespace actionpp {

    using Shape = std::vector<std::size_t>;

    inline std::size_t shape_numel(const Shape& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

    inline std::string shape_string(const Shape& shape) {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }

    // Dense row-major float64 tensor. Rank is whatever the shape says; the
    // library mostly uses rank 1 (vectors), 2 (n x d feature tables) and
    // 3 (C x H x W maps).
    class Tensor {
    public:
        Tensor() = default;

        explicit Tensor(Shape shape, double fill = 0.0)
            : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
            check_extents();
        }

        Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
            check_extents();
            if (data_.size() != shape_numel(shape_)) {
                throw ShapeMismatch("data length " + std::to_string(data_.size()) + " does not match shape " +
                                    shape_string(shape_));
            }
        }

        static Tensor vector(std::vector<double> values) {
            const std::size_t n = values.size();
            return Tensor({n}, std::move(values));
        }

        const Shape& shape() const noexcept { return shape_; }
        std::size_t rank() const noexcept { return shape_.size(); }
        std::size_t dim(std::size_t i) const { return shape_.at(i); }
        std::size_t numel() const noexcept { return data_.size(); }
        bool empty() const noexcept { return data_.empty(); }

        std::span<double> flat() noexcept { return data_; }
        std::span<const double> flat() const noexcept { return data_; }
        double* data() noexcept { return data_.data(); }
        const double* data() const noexcept { return data_.data(); }
        std::vector<double>& storage() noexcept { return data_; }
        const std::vector<double>& storage() const noexcept { return data_; }

        double& operator[](std::size_t i) noexcept { return data_[i]; }
        double operator[](std::size_t i) const noexcept { return data_[i]; }

        double& at(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
        double at(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }
        double& at(std::size_t i, std::size_t j, std::size_t k) noexcept {
            return data_[(i * shape_[1] + j) * shape_[2] + k];
        }
        double at(std::size_t i, std::size_t j, std::size_t k) const noexcept {
            return data_[(i * shape_[1] + j) * shape_[2] + k];
        }

        // Row i of a rank-2 tensor (or slab i of any rank >= 2).
        std::span<double> row(std::size_t i) noexcept {
            const std::size_t stride = numel() / shape_[0];
            return {data_.data() + i * stride, stride};
        }
        std::span<const double> row(std::size_t i) const noexcept {
            const std::size_t stride = numel() / shape_[0];
            return {data_.data() + i * stride, stride};
        }

        void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

        bool all_finite() const noexcept {
            return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
        }

        Tensor& operator+=(const Tensor& o) {
            require_same_shape(o);
            for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
            return *this;
        }
        Tensor& operator*=(double s) {
            for (double& v : data_) v *= s;
            return *this;
        }

        void require_same_shape(const Tensor& o) const {
            if (o.shape_ != shape_) {
                throw ShapeMismatch(shape_string(shape_) + " vs " + shape_string(o.shape_));
            }
        }

        friend bool operator==(const Tensor&, const Tensor&) = default;

    private:
        void check_extents() const {
            for (std::size_t e : shape_) {
                if (e == 0) throw ShapeMismatch("zero extent in shape " + shape_string(shape_));
            }
        }

        Shape shape_;
        std::vector<double> data_;
    };

} // namespace actionpp

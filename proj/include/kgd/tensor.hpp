#pragma once

// Dense row-major fp64 tensor. Desk scale: clarity and gradient-check
// precision over throughput.

#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "kgd/errors.hpp"

namespace kgd {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;

    Tensor() = default;

    static Tensor zeros(std::vector<int> shape) {
        Tensor t;
        t.shape = std::move(shape);
        t.data.assign(static_cast<size_t>(numel_of(t.shape)), 0.0);
        return t;
    }

    static Tensor scalar(double v) {
        Tensor t;
        t.shape = {1};
        t.data = {v};
        return t;
    }

    static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
        Tensor t;
        t.shape = {static_cast<int>(rows.size()),
                   rows.empty() ? 0 : static_cast<int>(rows.front().size())};
        t.data.reserve(static_cast<size_t>(numel_of(t.shape)));
        for (const auto& r : rows) {
            if (static_cast<int>(r.size()) != t.shape[1]) {
                throw ValidationError("Tensor::from_rows: ragged rows");
            }
            t.data.insert(t.data.end(), r.begin(), r.end());
        }
        return t;
    }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    bool is_scalar() const { return numel() == 1; }

    // 2D accessors; rank-1 tensors are treated as a single row.
    int rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int cols() const {
        if (shape.size() == 2) return shape[1];
        if (shape.size() == 1) return shape[0];
        return 1;
    }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) os << 'x';
            os << shape[i];
        }
        os << ']';
        return os.str();
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace kgd

// tensor.hpp -- a minimal dense tensor: shape vector plus flat doubles.
#pragma once

#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "kwsbias/common.hpp"

namespace kwsbias {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    static Tensor zeros(std::vector<int> shape) {
        Tensor t;
        std::size_t n = 1;
        for (int d : shape) {
            require(d >= 1, ErrorCode::shape_mismatch, "tensor dimensions must be >= 1");
            n *= static_cast<std::size_t>(d);
        }
        t.shape = std::move(shape);
        t.data.assign(n, 0.0);
        return t;
    }

    std::size_t size() const { return data.size(); }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

inline std::string shape_string(const std::vector<int>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            s += ", ";
        }
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

}  // namespace kwsbias

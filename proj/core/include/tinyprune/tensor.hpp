#pragma once

#include <cassert>
#include <cstddef>
#include <numeric>
#include <vector>

namespace tinyprune {

// Dense row-major float32 tensor; activations are (N,C,H,W) or (N,F).
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0f);
    }

    static long long numel_of(const std::vector<int>& s) {
        long long n = 1;
        for (int d : s) n *= d;
        return n;
    }
    long long numel() const { return static_cast<long long>(data.size()); }
    bool empty() const { return data.empty(); }

    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    float& operator[](std::size_t i) { return data[i]; }
    float operator[](std::size_t i) const { return data[i]; }
};

}  // namespace tinyprune

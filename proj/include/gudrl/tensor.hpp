#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace gudrl {

// Dense row-major array of doubles. Rank-1 tensors behave as a single row;
// everything else is viewed as a matrix of rows() x cols() where cols() is
// the last extent.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until a backward pass reaches it

    Tensor() = default;
    Tensor(std::vector<std::size_t> shape_, std::vector<double> values_);

    static Tensor zeros(std::vector<std::size_t> shape_);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values_);
    static Tensor row(std::vector<double> values_);
    static Tensor scalar(double v);

    std::size_t size() const { return values.size(); }
    std::size_t rows() const;
    std::size_t cols() const;
    bool has_grad() const { return !grad.empty(); }
    void zero_grad() { grad.clear(); }

    double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
};

std::size_t shape_product(const std::vector<std::size_t>& shape);
std::string shape_string(const std::vector<std::size_t>& shape);

}  // namespace gudrl

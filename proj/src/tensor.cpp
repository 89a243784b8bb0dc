#include "gudrl/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace gudrl {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<double> values_)
    : shape(std::move(shape_)), values(std::move(values_)) {
    if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
    for (auto d : shape)
        if (d == 0) throw std::invalid_argument("tensor: zero extent in shape " + shape_string(shape));
    if (values.size() != shape_product(shape))
        throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                    " values do not fill shape " + shape_string(shape));
}

Tensor Tensor::zeros(std::vector<std::size_t> shape_) {
    auto n = shape_product(shape_);
    return Tensor(std::move(shape_), std::vector<double>(n, 0.0));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values_) {
    return Tensor({rows, cols}, std::move(values_));
}

Tensor Tensor::row(std::vector<double> values_) {
    auto n = values_.size();
    return Tensor({1, n}, std::move(values_));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

std::size_t Tensor::cols() const { return shape.back(); }

std::size_t Tensor::rows() const { return shape.empty() ? 0 : values.size() / shape.back(); }

}  // namespace gudrl

#include "plugnet/tensor.hpp"

#include <sstream>

namespace plugnet {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
BasicTensor<T>::BasicTensor() : shape_{1}, values_(1, T(0)) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values,
                            bool requires_grad)
    : shape_(std::move(shape)),
      values_(std::move(values)),
      requires_grad_(requires_grad) {
  if (shape_.empty()) throw Error("tensor shape must have rank >= 1");
  for (std::size_t d : shape_) {
    if (d == 0) throw Error("tensor shape " + shape_str(shape_) +
                            " has a zero dimension");
  }
  const std::size_t n = shape_numel(shape_);
  if (n != values_.size()) {
    throw Error("length mismatch " + std::to_string(n) + " vs " +
                std::to_string(values_.size()));
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value),
                     requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return BasicTensor(Shape{1}, std::vector<T>{value});
}

template <typename T>
T BasicTensor<T>::item() const {
  if (values_.size() != 1) {
    throw Error("item() on non-scalar tensor of shape " + shape_str(shape_));
  }
  return values_[0];
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!grad_) return {};
  return *grad_;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() {
  if (!grad_) grad_.emplace(values_.size(), T(0));
  return *grad_;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != values_.size()) {
    throw Error("cannot reshape " + shape_str(shape_) + " to " +
                shape_str(shape));
  }
  return BasicTensor(std::move(shape), values_, requires_grad_);
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace plugnet

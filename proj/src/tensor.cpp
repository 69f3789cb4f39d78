#include "spotlight/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "spotlight/errors.hpp"

namespace spotlight {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : Tensor(shape, std::vector<double>(shape_numel(shape), fill), requires_grad) {}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.size() > kMaxRank) {
    throw DimensionError("tensor rank " + std::to_string(shape.size()) + " exceeds 4");
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  storage_ = std::make_shared<Storage>();
  storage_->shape = std::move(shape);
  storage_->values = std::move(values);
  storage_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const {
  if (!storage_) throw ContractError("use of undefined tensor");
  return storage_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<double> Tensor::values() {
  if (!storage_) throw ContractError("use of undefined tensor");
  return storage_->values;
}

std::span<const double> Tensor::values() const {
  if (!storage_) throw ContractError("use of undefined tensor");
  return storage_->values;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return storage_->values[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2) throw DimensionError("at(r, c) requires a matrix");
  return storage_->values[r * storage_->shape[1] + c];
}

bool Tensor::requires_grad() const { return storage_ && storage_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!storage_) throw ContractError("use of undefined tensor");
  storage_->requires_grad = flag;
}

bool Tensor::has_grad() const { return storage_ && !storage_->grad.empty(); }

std::span<double> Tensor::grad() const {
  if (!storage_) throw ContractError("use of undefined tensor");
  if (storage_->grad.empty()) storage_->grad.assign(storage_->values.size(), 0.0);
  return storage_->grad;
}

void Tensor::zero_grad() {
  if (!storage_) return;
  storage_->grad.assign(storage_->values.size(), 0.0);
}

void Tensor::clear_grad() {
  if (!storage_) return;
  storage_->grad.clear();
  storage_->grad.shrink_to_fit();
}

Tensor Tensor::clone() const {
  if (!storage_) return Tensor();
  Tensor copy(storage_->shape, storage_->values, storage_->requires_grad);
  copy.storage_->grad = storage_->grad;
  return copy;
}

void GradTape::record(std::function<void()> backward_fn) {
  entries_.push_back(std::move(backward_fn));
}

void GradTape::backward(Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    entries_.clear();
    throw ContractError("backward() requires a scalar loss");
  }
  if (loss.requires_grad()) {
    loss.grad()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }
  entries_.clear();
}

}  // namespace spotlight

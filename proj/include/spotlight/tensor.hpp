#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace spotlight {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Tensor is a handle: copies share the same storage, the way autograd
/// frameworks treat variables. Use clone() for an independent deep copy.
/// A default-constructed Tensor is "null" and holds no storage.
class Tensor {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(storage_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<double> values();
  std::span<const double> values() const;
  double item() const;
  double& operator[](std::size_t i) { return values()[i]; }
  double operator[](std::size_t i) const { return values()[i]; }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  // Allocates a zero gradient buffer on first use. The buffer belongs to
  // the shared storage, so it is writable through any handle.
  std::span<double> grad() const;
  void zero_grad();
  void clear_grad();

  Tensor clone() const;
  // Same storage identity?
  bool same_storage(const Tensor& other) const noexcept { return storage_ == other.storage_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  std::shared_ptr<Storage> storage_;
};

/// Ordered record of differentiable operations executed during a forward pass.
///
/// Each entry is a closure that reads its output's gradient and accumulates
/// into its inputs' gradients. backward() replays entries in exact reverse
/// order, so fan-out points receive the sum of all downstream contributions.
/// A tape belongs to a single thread.
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;
  GradTape(GradTape&&) = default;
  GradTape& operator=(GradTape&&) = default;

  void record(std::function<void()> backward_fn);
  std::size_t size() const noexcept { return entries_.size(); }
  void clear() noexcept { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape. The tape is consumed.
  // Throws ContractError when loss is not a scalar.
  void backward(Tensor& loss);

 private:
  std::vector<std::function<void()>> entries_;
};

}  // namespace spotlight

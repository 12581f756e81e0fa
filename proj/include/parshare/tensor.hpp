#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace parshare {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;

  // Returns the gradient buffer, allocating zeros on first use.
  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

// Dense row-major tensor handle. Copies share storage; use clone() for a deep
// copy. Rank-2 views treat every leading axis as rows and the last axis as
// columns.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return storage_->shape; }
  std::size_t rank() const { return storage_->shape.size(); }
  std::size_t size() const { return storage_->value.size(); }
  std::size_t cols() const { return storage_->shape.back(); }
  std::size_t rows() const { return size() / cols(); }

  std::span<const T> data() const { return storage_->value; }
  std::span<T> mutable_data() { return storage_->value; }
  T operator[](std::size_t i) const { return storage_->value[i]; }
  T at(std::size_t row, std::size_t col) const { return storage_->value[row * cols() + col]; }
  T item() const;

  bool requires_grad() const { return storage_->requires_grad; }
  bool has_grad() const { return storage_->grad.size() == storage_->value.size(); }
  std::span<const T> grad() const { return storage_->grad; }
  std::span<T> mutable_grad() { return storage_->grad_buffer(); }
  void zero_grad();

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }

  const std::shared_ptr<TensorStorage<T>>& storage() const { return storage_; }
  explicit Tensor(std::shared_ptr<TensorStorage<T>> storage) : storage_(std::move(storage)) {}

 private:
  std::shared_ptr<TensorStorage<T>> storage_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace parshare

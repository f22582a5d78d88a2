#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "c2l/error.hpp"

namespace c2l {

using Shape = std::vector<std::size_t>;

// Tensor storage starts on a 64-byte boundary so vectorized kernels take the
// same path for the same shape no matter where the heap put the data; this is
// what makes repeated forward passes bit-identical.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(alignment)));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(alignment)); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> values;
  Buffer<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents.
  std::function<void(Node&)> backward_fn;

  void accumulate(std::span<const T> g);
  Buffer<T>& grad_buffer();
};

}  // namespace detail

// Gradient recording is on by default; NoGradGuard turns it off for the
// current thread (sampling, evaluation).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense row-major array with reverse-mode autodiff. Copies share storage;
// use clone() for a deep copy and detach() to cut the graph.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor();
  BasicTensor(Shape shape, Buffer<T> values, bool requires_grad = false);
  BasicTensor(Shape shape, const std::vector<T>& values, bool requires_grad = false);
  BasicTensor(Shape shape, std::initializer_list<T> values, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const;
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->values.size(); }

  std::span<const T> values() const { return node_->values; }
  // In-place access, valid for leaves only (optimizer updates, data fill).
  std::span<T> mutable_values();
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return !node_->backward_fn; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  // Reverse pass from a scalar; gradients accumulate into every leaf that
  // requires grad.
  void backward() const;

  BasicTensor detach() const;
  BasicTensor clone() const;

  const NodePtr& node() const { return node_; }
  static BasicTensor from_node(NodePtr node);

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

namespace detail {

// Creates an op output. The node records parents and a backward closure only
// when recording is on and some parent requires grad.
template <typename T>
BasicTensor<T> make_result(Shape shape, Buffer<T> values, const char* op,
                           std::vector<std::shared_ptr<Node<T>>> parents,
                           std::function<void(Node<T>&)> backward_fn);

}  // namespace detail

}  // namespace c2l

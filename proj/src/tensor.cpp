#include "c2l/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace c2l {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

template <typename T>
Buffer<T>& Node<T>::grad_buffer() {
  if (grad.empty()) grad.assign(values.size(), T(0));
  return grad;
}

template <typename T>
void Node<T>::accumulate(std::span<const T> g) {
  auto& buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

template <typename T>
BasicTensor<T> make_result(Shape shape, Buffer<T> values, const char* op,
                           std::vector<std::shared_ptr<Node<T>>> parents,
                           std::function<void(Node<T>&)> backward_fn) {
  for (const T& v : values) {
    if (!std::isfinite(v)) fail(ErrorKind::Numeric, std::string("non-finite value produced by ") + op);
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

}  // namespace detail

template <typename T>
BasicTensor<T>::BasicTensor() : node_(std::make_shared<detail::Node<T>>()) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, const std::vector<T>& values, bool requires_grad)
    : BasicTensor(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::initializer_list<T> values, bool requires_grad)
    : BasicTensor(std::move(shape), Buffer<T>(values), requires_grad) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, Buffer<T> values, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
  if (shape_numel(shape) != values.size()) {
    fail(ErrorKind::Dimension, "tensor shape " + shape_str(shape) + " does not match " +
                                   std::to_string(values.size()) + " values");
  }
  for (const T& v : values) {
    if (!std::isfinite(v)) fail(ErrorKind::Numeric, "non-finite value in tensor construction");
  }
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return BasicTensor(std::move(shape), Buffer<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{}, Buffer<T>{value}, requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_node(NodePtr node) {
  BasicTensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t i) const {
  require(i < node_->shape.size(), ErrorKind::Dimension, "dimension index out of range");
  return node_->shape[i];
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_values() {
  require(is_leaf(), ErrorKind::Contract, "in-place modification of a non-leaf tensor");
  return node_->values;
}

template <typename T>
T BasicTensor<T>::item() const {
  require(numel() == 1, ErrorKind::Contract, "item() on tensor of shape " + shape_str(shape()));
  return node_->values[0];
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool flag) {
  require(is_leaf(), ErrorKind::Contract, "requires_grad can only be set on leaves");
  node_->requires_grad = flag;
}

template <typename T>
void BasicTensor<T>::backward() const {
  require(numel() == 1, ErrorKind::Contract,
          "backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Intermediate gradients are not needed after the pass.
  for (detail::Node<T>* n : order) {
    if (n->backward_fn) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = node_->shape;
  node->values = node_->values;
  return from_node(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  BasicTensor t = detach();
  t.node_->requires_grad = node_->requires_grad && is_leaf();
  return t;
}

template struct detail::Node<float>;
template struct detail::Node<double>;
template class BasicTensor<float>;
template class BasicTensor<double>;
template BasicTensor<float> detail::make_result(Shape, Buffer<float>, const char*,
                                                std::vector<std::shared_ptr<detail::Node<float>>>,
                                                std::function<void(detail::Node<float>&)>);
template BasicTensor<double> detail::make_result(Shape, Buffer<double>, const char*,
                                                 std::vector<std::shared_ptr<detail::Node<double>>>,
                                                 std::function<void(detail::Node<double>&)>);

}  // namespace c2l

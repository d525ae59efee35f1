#include "afgeo/tensor.hpp"

#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace afgeo {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
namespace {
thread_local bool g_grad_mode = true;
}
bool grad_mode_enabled() { return g_grad_mode; }
}  // namespace detail

NoGradGuard::NoGradGuard() : previous_(detail::g_grad_mode) { detail::g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { detail::g_grad_mode = previous_; }

namespace {

template <typename T>
std::shared_ptr<detail::Node<T>> new_leaf(Shape shape, Buffer<T> values, bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                " values do not fill shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::make_shared<Buffer<T>>(std::move(values));
  node->requires_grad = requires_grad;
  return node;
}

template <typename T>
const detail::Node<T>& checked(const std::shared_ptr<detail::Node<T>>& node) {
  if (!node) throw std::logic_error("tensor: use of undefined tensor");
  return *node;
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(new_leaf<T>(std::move(shape), Buffer<T>(n, T(0)), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(new_leaf<T>(std::move(shape), Buffer<T>(n, value), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::from_vector(Shape shape, std::vector<T> values, bool requires_grad) {
  return Tensor(new_leaf<T>(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(new_leaf<T>(Shape{}, Buffer<T>{value}, requires_grad));
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return checked(node_).shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw std::out_of_range("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return checked(node_).value->size();
}

template <typename T>
std::span<const T> Tensor<T>::values() const {
  return {checked(node_).value->data(), node_->value->size()};
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  checked(node_);
  if (!node_->is_leaf) throw std::logic_error("tensor: in-place write to a non-leaf tensor");
  return {node_->value->data(), node_->value->size()};
}

template <typename T>
std::vector<T> Tensor<T>::to_vector() const {
  const auto& v = *checked(node_).value;
  return {v.begin(), v.end()};
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::invalid_argument("tensor: item() on shape " + shape_str(shape()));
  return (*node_->value)[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) {
    throw std::invalid_argument("tensor: index rank " + std::to_string(index.size()) + " for shape " + shape_str(s));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw std::out_of_range("tensor: index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return (*node_->value)[flat];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return checked(node_).requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  checked(node_);
  if (!node_->is_leaf) throw std::logic_error("tensor: requires_grad can only be set on leaves");
  node_->requires_grad = flag;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return checked(node_).is_leaf;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return !checked(node_).grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  checked(node_);
  auto& g = node_->ensure_grad();
  return {g.data(), g.size()};
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  checked(node_);
  auto& g = node_->ensure_grad();
  return {g.data(), g.size()};
}

template <typename T>
void Tensor<T>::zero_grad() {
  checked(node_);
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::backward() const {
  checked(node_);
  if (numel() != 1) {
    throw std::invalid_argument("backward: root must have exactly one element, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are per-sweep; only leaves accumulate across calls.
  for (auto* node : order) {
    if (!node->is_leaf) node->grad.assign(node->value->size(), T(0));
  }
  node_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
}

template <typename T>
Tensor<T> Tensor<T>::alias() const {
  checked(node_);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = node_->shape;
  node->value = node_->value;
  node->requires_grad = node_->requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  checked(node_);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return from_vector(shape(), to_vector(), requires_grad() && is_leaf());
}

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> values, std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::make_shared<Buffer<T>>(std::move(values));
  node->is_leaf = false;
  bool track = false;
  if (grad_mode_enabled()) {
    for (const auto& p : parents) track = track || p->requires_grad;
  }
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template Tensor<float> make_result(Shape, Buffer<float>, std::vector<std::shared_ptr<Node<float>>>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(Shape, Buffer<double>, std::vector<std::shared_ptr<Node<double>>>,
                                    std::function<void(Node<double>&)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;

}  // namespace afgeo

#include "rforge/autodiff/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace rforge::ad {

namespace {
thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_id{1};
}  // namespace

std::uint64_t detail::next_node_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw std::invalid_argument("tensor: zero extent in shape " + to_string(shape));
  }
  if (ad::numel(shape) != data.size()) {
    throw std::invalid_argument("tensor: shape " + to_string(shape) + " needs " +
                                std::to_string(ad::numel(shape)) + " values, got " +
                                std::to_string(data.size()));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
  node_->id = detail::next_node_id();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = ad::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = ad::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const auto n = values.size();
  return Tensor({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return Tensor({rows, cols}, std::move(values), requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  }
  return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2) throw std::invalid_argument("at(r, c): tensor is not 2-D");
  return node_->data.at(r * node_->shape[1] + c);
}

Tensor& Tensor::set_requires_grad(bool value) {
  node_->requires_grad = value;
  return *this;
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(node_->shape, node_->data, requires_grad);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Graph Graph::trace(const Tensor& root) {
  Graph g;
  if (!root.defined() || !root.requires_grad()) return g;
  std::unordered_set<const Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  g.nodes_.push_back(root.node());
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    for (const auto& in : n->inputs) {
      if (!in->requires_grad || !seen.insert(in.get()).second) continue;
      g.nodes_.push_back(in);
      stack.push_back(in.get());
    }
  }
  // Ids are handed out at creation, so inputs always carry smaller ids.
  std::sort(g.nodes_.begin(), g.nodes_.end(),
            [](const NodePtr& a, const NodePtr& b) { return a->id < b->id; });
  return g;
}

void backward(const Tensor& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined root");
  if (root.numel() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got shape " +
                                to_string(root.shape()));
  }
  if (!root.requires_grad()) return;
  const Graph g = Graph::trace(root);
  const auto nodes = g.nodes();
  // Interior grads are scratch space for this pass; leaves accumulate.
  for (const auto& n : nodes) {
    if (n->backward) n->grad.clear();
  }
  root.node()->ensure_grad()[0] += 1.0;
  NoGradGuard no_grad;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node& n = **it;
    if (!n.backward || n.grad.empty()) continue;
    n.backward(n);
    n.grad.clear();
    n.grad.shrink_to_fit();
  }
}

}  // namespace rforge::ad

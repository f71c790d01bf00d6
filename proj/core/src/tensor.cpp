#include "vlm/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>

#include "vlm/error.hpp"

namespace vlm {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kDegenerateMask: return "degenerate_mask";
    case ErrorCode::kEmptyLoss: return "empty_loss";
    case ErrorCode::kRank: return "rank";
    case ErrorCode::kInput: return "input";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kCapacity: return "capacity";
    case ErrorCode::kDanglingRef: return "dangling_ref";
    case ErrorCode::kPolicy: return "policy";
    case ErrorCode::kTarget: return "target";
    case ErrorCode::kState: return "state";
    case ErrorCode::kExhaustion: return "exhaustion";
    case ErrorCode::kIntegrity: return "integrity";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  if (shape.empty()) throw Error(ErrorCode::kShape, "tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw Error(ErrorCode::kShape, "zero-sized dimension in " + shape_str(shape));
  }
}

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape);
  if (numel_of(shape) != data.size()) {
    throw Error(ErrorCode::kShape, "data length " + std::to_string(data.size()) +
                                       " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = numel_of(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = numel_of(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_leaf({1}, {value}, requires_grad));
}

Tensor Tensor::randn(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(numel_of(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw Error(ErrorCode::kRank, "axis " + std::to_string(axis) + " out of range for " +
                                      shape_str(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw Error(ErrorCode::kRank, "item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw Error(ErrorCode::kState, "requires_grad can only be toggled on leaves");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
}

bool Tensor::is_leaf() const { return !node_->backward; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  return Tensor(make_leaf(node_->shape, node_->data, false));
}

Tensor Tensor::clone() const {
  return Tensor(make_leaf(node_->shape, node_->data, node_->requires_grad && is_leaf()));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   detail::BackwardFn backward_fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (g_grad_enabled) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& t : inputs) node->inputs.push_back(t.node());
      node->backward = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw Error(ErrorCode::kRank, "backward() needs a scalar loss, got " +
                                      (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw Error(ErrorCode::kState, "backward() on a loss that does not require gradients");
  }

  // Iterative post-order DFS gives a topological order of the recorded graph.
  std::vector<detail::Node*> order;
  std::unordered_map<detail::Node*, bool> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited[loss.node().get()] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && !visited[child]) {
        visited[child] = true;
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<detail::Node*, std::vector<double>> grads;
  grads[loss.node().get()] = std::vector<double>(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    std::vector<double> g = std::move(found->second);
    grads.erase(found);
    if (!node->backward) {
      if (node->grad.empty()) {
        node->grad = std::move(g);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
      }
      continue;
    }
    std::vector<std::vector<double>*> input_grads(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      detail::Node* in = node->inputs[i].get();
      if (in && in->requires_grad) {
        auto& buf = grads[in];
        if (buf.empty()) buf.assign(in->data.size(), 0.0);
        input_grads[i] = &buf;
      }
    }
    node->backward(*node, g, input_grads);
  }
}

}  // namespace vlm

#include "sponge/tape.hpp"

#include <string>
#include <utility>

#include "sponge/error.hpp"

namespace sponge {

const char* to_string(OpKind kind) noexcept {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kBatchNorm: return "batchnorm";
    case OpKind::kRelu: return "relu";
    case OpKind::kMaxPool: return "maxpool2d";
    case OpKind::kAvgPool: return "avgpool2d";
    case OpKind::kGlobalAvgPool: return "global_avg_pool";
    case OpKind::kLinear: return "linear";
    case OpKind::kAdd: return "add";
  }
  return "?";
}

namespace {

BnParams with_affine(const BnParams& stats, const Tensor& gamma, const Tensor& beta) {
  BnParams p = stats;
  p.gamma = gamma.values();
  p.beta = beta.values();
  return p;
}

void accumulate(Tensor& slot, const Tensor& g) {
  if (slot.empty()) {
    slot = g;
    return;
  }
  if (slot.dims() != g.dims()) throw ShapeError("gradient shape mismatch during backward");
  for (std::size_t k = 0; k < g.size(); ++k) slot[k] += g[k];
}

}  // namespace

NodeId Tape::push(Node node) {
  if (node.kind != OpKind::kLeaf) {
    for (NodeId in : node.inputs)
      if (in >= nodes_.size()) throw ShapeError("tape operand refers to an unknown node");
  }
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

Tensor Tape::evaluate(const Node& n, const std::vector<Tensor>& values) const {
  auto in = [&](std::size_t k) -> const Tensor& { return values[n.inputs[k]]; };
  switch (n.kind) {
    case OpKind::kLeaf:
      return n.value;
    case OpKind::kConv2d: {
      std::span<const double> bias;
      if (n.inputs.size() > 2) bias = in(2).data();
      return ops::conv2d(in(0), in(1), bias, n.geom);
    }
    case OpKind::kBatchNorm:
      return ops::batchnorm_infer(in(0), with_affine(n.bn, in(1), in(2)));
    case OpKind::kRelu:
      return ops::relu(in(0));
    case OpKind::kMaxPool:
      return ops::maxpool2d(in(0), n.window, n.geom.stride);
    case OpKind::kAvgPool:
      return ops::avgpool2d(in(0), n.window, n.geom.stride);
    case OpKind::kGlobalAvgPool:
      return ops::global_avg_pool(in(0));
    case OpKind::kLinear: {
      std::span<const double> bias;
      if (n.inputs.size() > 2) bias = in(2).data();
      return ops::linear(in(0), in(1), bias);
    }
    case OpKind::kAdd:
      return ops::add(in(0), in(1));
  }
  throw ShapeError("unknown tape op");
}

NodeId Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::conv2d(NodeId input, NodeId weight, std::optional<NodeId> bias,
                    ops::ConvGeometry geom) {
  Node n;
  n.kind = OpKind::kConv2d;
  n.inputs = {input, weight};
  if (bias) n.inputs.push_back(*bias);
  n.geom = geom;
  std::span<const double> b;
  if (bias) b = value(*bias).data();
  n.value = ops::conv2d(value(input), value(weight), b, geom);
  return push(std::move(n));
}

NodeId Tape::batchnorm(NodeId input, NodeId gamma, NodeId beta, const BnParams& stats) {
  Node n;
  n.kind = OpKind::kBatchNorm;
  n.inputs = {input, gamma, beta};
  n.bn = stats;
  n.value = ops::batchnorm_infer(value(input), with_affine(stats, value(gamma), value(beta)));
  return push(std::move(n));
}

NodeId Tape::relu(NodeId input) {
  Node n;
  n.kind = OpKind::kRelu;
  n.inputs = {input};
  n.value = ops::relu(value(input));
  return push(std::move(n));
}

NodeId Tape::maxpool2d(NodeId input, std::size_t window, std::size_t stride) {
  Node n;
  n.kind = OpKind::kMaxPool;
  n.inputs = {input};
  n.window = window;
  n.geom.stride = stride;
  n.value = ops::maxpool2d(value(input), window, stride);
  return push(std::move(n));
}

NodeId Tape::avgpool2d(NodeId input, std::size_t window, std::size_t stride) {
  Node n;
  n.kind = OpKind::kAvgPool;
  n.inputs = {input};
  n.window = window;
  n.geom.stride = stride;
  n.value = ops::avgpool2d(value(input), window, stride);
  return push(std::move(n));
}

NodeId Tape::global_avg_pool(NodeId input) {
  Node n;
  n.kind = OpKind::kGlobalAvgPool;
  n.inputs = {input};
  n.value = ops::global_avg_pool(value(input));
  return push(std::move(n));
}

NodeId Tape::linear(NodeId input, NodeId weight, std::optional<NodeId> bias) {
  Node n;
  n.kind = OpKind::kLinear;
  n.inputs = {input, weight};
  if (bias) n.inputs.push_back(*bias);
  std::span<const double> b;
  if (bias) b = value(*bias).data();
  n.value = ops::linear(value(input), value(weight), b);
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a, b};
  n.value = ops::add(value(a), value(b));
  return push(std::move(n));
}

std::size_t Tape::primitive_count() const noexcept {
  std::size_t count = 0;
  for (const auto& n : nodes_)
    if (n.kind != OpKind::kLeaf) ++count;
  return count;
}

std::vector<Tensor> Tape::replay() const {
  std::vector<Tensor> values;
  values.reserve(nodes_.size());
  for (const auto& n : nodes_) values.push_back(evaluate(n, values));
  return values;
}

Tape::Gradients Tape::backward(std::span<const Seed> seeds) const {
  std::vector<Tensor> adj(nodes_.size());
  for (const auto& seed : seeds) {
    if (seed.node >= nodes_.size()) throw ShapeError("gradient seed refers to an unknown node");
    if (seed.grad.dims() != nodes_[seed.node].value.dims())
      throw ShapeError("gradient seed " + to_string(seed.grad.dims()) +
                       " does not match node value " +
                       to_string(nodes_[seed.node].value.dims()));
    accumulate(adj[seed.node], seed.grad);
  }

  for (std::size_t k = nodes_.size(); k-- > 0;) {
    const Node& n = nodes_[k];
    if (n.kind == OpKind::kLeaf || adj[k].empty()) continue;
    const Tensor& g = adj[k];
    auto in = [&](std::size_t i) -> const Tensor& { return nodes_[n.inputs[i]].value; };
    switch (n.kind) {
      case OpKind::kConv2d:
        accumulate(adj[n.inputs[0]], ops::conv2d_grad_input(g, in(1), in(0).dims(), n.geom));
        accumulate(adj[n.inputs[1]], ops::conv2d_grad_weight(g, in(0), in(1).dims(), n.geom));
        if (n.inputs.size() > 2) accumulate(adj[n.inputs[2]], ops::conv2d_grad_bias(g));
        break;
      case OpKind::kBatchNorm: {
        auto bg = ops::batchnorm_backward(g, in(0), with_affine(n.bn, in(1), in(2)));
        accumulate(adj[n.inputs[0]], bg.input);
        accumulate(adj[n.inputs[1]], bg.gamma);
        accumulate(adj[n.inputs[2]], bg.beta);
        break;
      }
      case OpKind::kRelu:
        accumulate(adj[n.inputs[0]], ops::relu_backward(g, in(0)));
        break;
      case OpKind::kMaxPool:
        accumulate(adj[n.inputs[0]], ops::maxpool2d_backward(g, in(0), n.window, n.geom.stride));
        break;
      case OpKind::kAvgPool:
        accumulate(adj[n.inputs[0]],
                   ops::avgpool2d_backward(g, in(0).dims(), n.window, n.geom.stride));
        break;
      case OpKind::kGlobalAvgPool:
        accumulate(adj[n.inputs[0]], ops::global_avg_pool_backward(g, in(0).dims()));
        break;
      case OpKind::kLinear: {
        auto lg = ops::linear_backward(g, in(0), in(1));
        accumulate(adj[n.inputs[0]], lg.input);
        accumulate(adj[n.inputs[1]], lg.weight);
        if (n.inputs.size() > 2) accumulate(adj[n.inputs[2]], lg.bias);
        break;
      }
      case OpKind::kAdd:
        accumulate(adj[n.inputs[0]], g);
        accumulate(adj[n.inputs[1]], g);
        break;
      case OpKind::kLeaf:
        break;
    }
  }
  return Gradients(std::move(adj));
}

TapedResult forward_taped(const Composition& fn, Tensor input) {
  TapedResult r;
  r.input = r.tape.leaf(std::move(input));
  r.output_node = fn(r.tape, r.input);
  r.output = r.tape.value(r.output_node);
  return r;
}

Tensor backward(const TapedResult& taped, const Tensor& output_grad) {
  Tape::Seed seed{taped.output_node, output_grad};
  auto grads = taped.tape.backward(std::span<const Tape::Seed>(&seed, 1));
  if (!grads.has(taped.input)) return Tensor(taped.tape.value(taped.input).dims());
  return grads[taped.input];
}

}  // namespace sponge

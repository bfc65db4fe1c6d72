#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "sponge/ops.hpp"
#include "sponge/tensor.hpp"

namespace sponge {

using NodeId = std::size_t;

enum class OpKind {
  kLeaf,
  kConv2d,
  kBatchNorm,
  kRelu,
  kMaxPool,
  kAvgPool,
  kGlobalAvgPool,
  kLinear,
  kAdd,
};

const char* to_string(OpKind kind) noexcept;

/// Eager reverse-mode tape. Each primitive call executes immediately, stores
/// its output, and records its operands so the computation can be replayed or
/// differentiated. Leaves are inputs and parameters.
class Tape {
 public:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<NodeId> inputs;
    ops::ConvGeometry geom;   // conv; pools reuse stride, window in `window`
    std::size_t window = 0;
    BnParams bn;              // running stats and eps; gamma/beta come from inputs[1..2]
    Tensor value;
  };

  NodeId leaf(Tensor value);

  NodeId conv2d(NodeId input, NodeId weight, std::optional<NodeId> bias, ops::ConvGeometry geom);
  /// `stats` supplies mu_hat, sigma_hat and eps; gamma and beta are the rank-1
  /// leaves `gamma` and `beta` so they can receive gradients.
  NodeId batchnorm(NodeId input, NodeId gamma, NodeId beta, const BnParams& stats);
  NodeId relu(NodeId input);
  NodeId maxpool2d(NodeId input, std::size_t window, std::size_t stride);
  NodeId avgpool2d(NodeId input, std::size_t window, std::size_t stride);
  NodeId global_avg_pool(NodeId input);
  NodeId linear(NodeId input, NodeId weight, std::optional<NodeId> bias);
  NodeId add(NodeId a, NodeId b);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  /// Number of recorded non-leaf operations.
  std::size_t primitive_count() const noexcept;

  /// Re-executes every primitive from the stored leaves and returns all node
  /// values in node order.
  std::vector<Tensor> replay() const;

  struct Seed {
    NodeId node;
    Tensor grad;
  };

  /// Accumulated adjoints for every node; entries are empty tensors for nodes
  /// that no seed reaches.
  class Gradients {
   public:
    explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
    bool has(NodeId id) const { return !grads_.at(id).empty(); }
    const Tensor& operator[](NodeId id) const { return grads_.at(id); }

   private:
    std::vector<Tensor> grads_;
  };

  /// Reverse sweep seeded at any set of nodes (seeds on the same node add).
  Gradients backward(std::span<const Seed> seeds) const;

 private:
  NodeId push(Node node);
  Tensor evaluate(const Node& node, const std::vector<Tensor>& values) const;

  std::vector<Node> nodes_;
};

struct TapedResult {
  Tensor output;
  Tape tape;
  NodeId input = 0;
  NodeId output_node = 0;
};

/// A composition of primitives expressed against a tape: receives the input
/// leaf and returns the output node.
using Composition = std::function<NodeId(Tape&, NodeId)>;

TapedResult forward_taped(const Composition& fn, Tensor input);

/// Gradient of <output_grad, f(x)> with respect to the taped input.
Tensor backward(const TapedResult& taped, const Tensor& output_grad);

}  // namespace sponge

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "sponge/tensor.hpp"

namespace sponge {

struct ProbeOptions {
  /// Keep raw pre-/post-BN and post-ReLU tensors in the record.
  bool retain_snapshots = false;
};

struct ReluSiteRecord {
  std::size_t nonzero = 0;
  std::size_t total = 0;
};

/// Channel statistics captured at one batch-norm site. "pre" refers to the
/// batch-norm input, "post" to its output before any skip addition.
struct BnSiteRecord {
  std::vector<double> pre_mean;
  std::vector<double> pre_std;        // population std over H x W
  std::vector<double> pre_positive;   // fraction of inputs > 0
  std::vector<double> post_positive;  // fraction of outputs > 0
  Tensor pre_snapshot;                // empty unless retained
  Tensor post_snapshot;               // empty unless retained
};

/// Multiply-accumulate counts for one conv or linear layer. A MAC is skipped
/// when its activation operand is exactly zero; padding taps are not MACs.
struct MacRecord {
  std::string layer;
  std::uint64_t total = 0;
  std::uint64_t skipped = 0;
};

struct ActivationRecord {
  std::vector<ReluSiteRecord> relu;
  std::vector<BnSiteRecord> bn;
  std::vector<MacRecord> macs;
  std::vector<Tensor> relu_snapshots;  // empty unless retained
};

}  // namespace sponge

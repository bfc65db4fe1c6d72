#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sponge/model.hpp"
#include "sponge/record.hpp"
#include "sponge/tensor.hpp"

namespace sponge {

/// Nonzero post-ReLU values over all values, pooled element-weighted across
/// every ReLU site of one forward.
double post_relu_density(const ActivationRecord& r);

enum class ThresholdDirection { kPosAbove, kPosBelow, kDegenerate };

const char* to_string(ThresholdDirection d) noexcept;

struct ZeroThreshold {
  double theta = 0.0;  // NaN when degenerate
  ThresholdDirection direction = ThresholdDirection::kPosAbove;
};

/// Pre-BN value at which channel `c`'s batch-norm output changes sign.
/// gamma > 0: bn(z) > 0 iff z > theta. gamma < 0: bn(z) > 0 iff z < theta.
/// gamma == 0: the output is the constant beta and the channel is degenerate.
ZeroThreshold zero_threshold(const BnParams& p, std::size_t c);

struct ThresholdRow {
  std::size_t site = 0;
  std::size_t block = 0;
  std::string role;
  std::size_t channel = 0;
  double gamma = 0.0;
  ZeroThreshold threshold;
};

using ThresholdTable = std::vector<ThresholdRow>;

/// One row per (site, channel) for the first `first_n_sites` batch-norm sites,
/// or all of them. Reads parameters only, so an uncalibrated model is allowed.
ThresholdTable threshold_table(const Model& m, std::optional<std::size_t> first_n_sites = {});

struct ChannelStat {
  double mean = 0.0;
  double std = 0.0;  // population
};

/// Per-channel mean and std of the pre-BN snapshot at `site`. The record must
/// have been captured with retained snapshots.
std::vector<ChannelStat> channel_stats(const ActivationRecord& r, std::size_t site);

/// Per-channel positive fraction after batch norm minus before it.
std::vector<double> density_gain(const ActivationRecord& r, std::size_t site);

struct CostSummary {
  std::uint64_t total_macs = 0;
  std::uint64_t skipped_macs = 0;
  double skipped_fraction = 0.0;
  std::vector<MacRecord> layers;
};

/// Zero-skipping cost proxy. The per-layer counts come from the forward; the
/// model is used to check that the record belongs to it.
CostSummary cost_model(const ActivationRecord& r, const Model& m);

// CSV exports. Columns are listed in the README.
void write_thresholds_csv(std::ostream& os, const ThresholdTable& table);
void write_gains_csv(std::ostream& os, const std::vector<std::vector<double>>& gains_per_site);

}  // namespace sponge

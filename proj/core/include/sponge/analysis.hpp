#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "sponge/model.hpp"
#include "sponge/tensor.hpp"

namespace sponge {

struct UniformityConfig {
  std::size_t window = 8;
  std::size_t stride = 4;
};

/// Mean over channels and window positions of the population std inside each
/// window. Windows that would run past the border are dropped.
double uniformity(const Tensor& image, const UniformityConfig& cfg = {});

/// Tie-corrected Kendall tau-b in O(n log n). NaN when either argument is
/// constant, since the coefficient is undefined there.
double kendall_tau(std::span<const double> xs, std::span<const double> ys);

struct TransferMatrix {
  std::vector<std::vector<double>> percent;  // [source][target]
  std::vector<std::vector<double>> mean_density;
  std::vector<double> baselines;
};

/// percent[s][t] = 100 * (mean density of source s's sponges on target t
/// - baseline_t) / baseline_t.
TransferMatrix transfer_matrix(std::span<const Model> targets,
                               const std::vector<std::vector<Tensor>>& sponge_sets,
                               std::span<const double> baselines, std::size_t threads = 1);

/// Mean density of `dataset` on `m`, the natural-image baseline.
double mean_density(const Model& m, std::span<const Tensor> dataset, std::size_t threads = 1);

struct StudyRow {
  double uniformity = 0.0;
  double density = 0.0;
};

struct StudyResult {
  std::vector<StudyRow> rows;
  double tau = 0.0;
};

StudyResult density_uniformity_study(const Model& m, std::span<const Tensor> dataset,
                                     const UniformityConfig& cfg = {}, std::size_t threads = 1);

void write_study_csv(std::ostream& os, const StudyResult& s);

struct SynthConfig {
  std::size_t n = 100;
  Shape shape{3, 32, 32};
  std::vector<double> noise_levels{0.0, 0.01, 0.02, 0.04, 0.08, 0.12, 0.16, 0.24, 0.32, 0.48};
  std::uint64_t seed = 0;
};

/// Number of texture families, and therefore of labels.
inline constexpr std::size_t kTextureFamilies = 10;

struct SynthDataset {
  std::vector<LabeledImage> items;
  std::vector<double> noise;  // noise scale drawn for each item

  std::vector<Tensor> images() const;
};

/// Piecewise-constant color fields (a base color plus 2 to 6 rectangles) with
/// additive Gaussian texture. The label selects the texture's cell size; the
/// noise scale is drawn from `noise_levels`. Item i uses its own stream.
SynthDataset synth_dataset(const SynthConfig& cfg);

}  // namespace sponge

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sponge/error.hpp"
#include "sponge/model.hpp"
#include "sponge/tensor.hpp"

namespace sponge {

// --- zero-knowledge access --------------------------------------------------------

/// Post-ReLU density of one probed forward.
double query_density(const Model& m, const Tensor& image);

/// The only view of a target that the query-based strategies get: image in,
/// density out. Must be safe to call concurrently.
using DensityOracle = std::function<double(const Tensor&)>;

/// Oracle backed by a private copy of `m`.
DensityOracle make_density_oracle(const Model& m);

// --- results ----------------------------------------------------------------------

struct TraceRow {
  std::size_t iteration = 0;
  double objective = 0.0;  // strategy-specific; GA uses its fitness
  double density = 0.0;    // best so far
  double elapsed_s = 0.0;
};

struct SpongeResult {
  Tensor image;
  double density = 0.0;
  double wall_time_s = 0.0;
  std::vector<TraceRow> trace;
  std::string strategy;
  std::uint64_t seed = 0;
};

/// Writes `<stem>.json` (metadata) and `<stem>.sptn` (image) into `dir`, plus
/// `<stem>_trace.csv` when the trace is nonempty.
void write_sponge_result(const std::filesystem::path& dir, const std::string& stem,
                         const SpongeResult& r);
SpongeResult read_sponge_result(const std::filesystem::path& dir, const std::string& stem);

// --- strategies -------------------------------------------------------------------

/// Per-pixel N(mu, sigma^2) clipped to [0, 1]. Image i draws from its own
/// stream derived from `seed`.
std::vector<Tensor> uniform_sampling(double mu, double sigma, const Shape& shape, std::size_t n,
                                     std::uint64_t seed);

struct GridRow {
  double mu = 0.0;
  double mean_density = 0.0;
};

struct GridSearchResult {
  double best_mu = 0.0;
  std::vector<GridRow> table;
};

/// Mean density of `samples_per_mu` uniform-sampled images for every mu in
/// the grid. Every mu uses the same noise seed; the first maximum wins.
GridSearchResult grid_search_mu(const DensityOracle& oracle, const Shape& shape,
                                const std::vector<double>& mu_grid, double sigma,
                                std::size_t samples_per_mu, std::uint64_t seed,
                                std::size_t threads = 1);

/// The n densest images of `dataset`, densest first; ties keep dataset order.
std::vector<SpongeResult> top_natural(const DensityOracle& oracle, std::span<const Tensor> dataset,
                                      std::size_t n, std::size_t threads = 1,
                                      bool record_timing = true);

struct GaConfig {
  std::size_t pool_size = 32;
  std::size_t iterations = 100;
  double mutation_std = 4.0 / 255.0;
  double elite_fraction = 0.25;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool record_timing = true;  // false writes zero wall times

  void validate() const;
};

/// Genetic search over images using only density queries.
SpongeResult sponge_ga(const DensityOracle& oracle, const Shape& shape, const GaConfig& cfg);

struct LbfgsConfig {
  std::size_t steps = 50;
  std::size_t history = 10;
  double initial_step = 0.05;  // largest pixel change of the first step
  std::uint64_t seed = 0;
  bool record_timing = true;

  void validate() const;
};

/// Value and input gradient of minus the summed per-map L2 norms of every
/// post-ReLU activation map, plus the density of the same forward.
struct ActivationObjective {
  double value = 0.0;
  Tensor gradient;
  double density = 0.0;
};

ActivationObjective activation_norm_objective(const Model& m, const Tensor& x);

/// Raised when the objective stops being finite; carries the offending iterate.
class NonFiniteObjective : public NumericError {
 public:
  NonFiniteObjective(const std::string& what, Tensor iterate)
      : NumericError(what), iterate_(std::move(iterate)) {}
  const Tensor& iterate() const noexcept { return iterate_; }

 private:
  Tensor iterate_;
};

/// Projected L-BFGS on the activation-norm objective in pixel space.
SpongeResult sponge_lbfgs(const Model& m, const LbfgsConfig& cfg);

}  // namespace sponge

#include "sponge/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <utility>

#include "sponge/attack.hpp"
#include "sponge/error.hpp"
#include "sponge/parallel.hpp"
#include "sponge/random.hpp"

namespace sponge {

double uniformity(const Tensor& image, const UniformityConfig& cfg) {
  require_rank(image, 3, "uniformity input");
  const std::size_t H = image.height(), W = image.width();
  if (cfg.window == 0 || cfg.stride == 0)
    throw ConfigError("uniformity window and stride must be >= 1");
  if (cfg.window > H || cfg.window > W)
    throw ConfigError("uniformity window " + std::to_string(cfg.window) + " exceeds image " +
                      to_string(image.dims()));
  const double count = static_cast<double>(cfg.window * cfg.window);
  double acc = 0.0;
  std::size_t windows = 0;
  for (std::size_t c = 0; c < image.channels(); ++c)
    for (std::size_t y0 = 0; y0 + cfg.window <= H; y0 += cfg.stride)
      for (std::size_t x0 = 0; x0 + cfg.window <= W; x0 += cfg.stride) {
        // Offsets from the window's first pixel keep flat windows exactly 0.
        const double ref = image.at(c, y0, x0);
        double sum = 0.0;
        for (std::size_t y = y0; y < y0 + cfg.window; ++y)
          for (std::size_t x = x0; x < x0 + cfg.window; ++x) sum += image.at(c, y, x) - ref;
        const double mean = sum / count;
        double sq = 0.0;
        for (std::size_t y = y0; y < y0 + cfg.window; ++y)
          for (std::size_t x = x0; x < x0 + cfg.window; ++x) {
            const double d = image.at(c, y, x) - ref - mean;
            sq += d * d;
          }
        acc += std::sqrt(sq / count);
        ++windows;
      }
  return acc / static_cast<double>(windows);
}

namespace {

// Number of pairs inside runs of equal values in a sorted sequence.
template <class It, class Eq>
std::uint64_t tied_pairs(It first, It last, Eq eq) {
  std::uint64_t pairs = 0;
  while (first != last) {
    It run = first;
    std::uint64_t len = 0;
    while (run != last && eq(*run, *first)) {
      ++run;
      ++len;
    }
    pairs += len * (len - 1) / 2;
    first = run;
  }
  return pairs;
}

// Sorts `v` ascending and returns the number of inversions removed.
std::uint64_t merge_count(std::vector<double>& v, std::vector<double>& buf, std::size_t lo,
                          std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::uint64_t swaps = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += mid - i;
      buf[k++] = v[j++];
    } else {
      buf[k++] = v[i++];
    }
  }
  while (i < mid) buf[k++] = v[i++];
  while (j < hi) buf[k++] = v[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return swaps;
}

}  // namespace

double kendall_tau(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size())
    throw DataError("kendall_tau: lengths differ (" + std::to_string(xs.size()) + " vs " +
                    std::to_string(ys.size()) + ")");
  const std::size_t n = xs.size();
  if (n < 2) throw DataError("kendall_tau needs at least two pairs");
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i]))
      throw DataError("kendall_tau: non-finite input");

  std::vector<std::pair<double, double>> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = {xs[i], ys[i]};
  std::sort(p.begin(), p.end());

  const std::uint64_t n0 = static_cast<std::uint64_t>(n) * (n - 1) / 2;
  const std::uint64_t n1 =
      tied_pairs(p.begin(), p.end(), [](const auto& a, const auto& b) { return a.first == b.first; });
  const std::uint64_t n3 = tied_pairs(p.begin(), p.end(), [](const auto& a, const auto& b) { return a == b; });

  std::vector<double> y(n), buf(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = p[i].second;
  const std::uint64_t swaps = merge_count(y, buf, 0, n);
  const std::uint64_t n2 = tied_pairs(y.begin(), y.end(), [](double a, double b) { return a == b; });

  if (n0 == n1 || n0 == n2) return std::numeric_limits<double>::quiet_NaN();
  // concordant - discordant over pairs untied in both coordinates.
  const double s = static_cast<double>(n0) - static_cast<double>(n1) - static_cast<double>(n2) +
                   static_cast<double>(n3) - 2.0 * static_cast<double>(swaps);
  return s / std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
}

double mean_density(const Model& m, std::span<const Tensor> dataset, std::size_t threads) {
  if (dataset.empty()) throw DataError("dataset is empty");
  const auto d = parallel_map(dataset.size(), threads,
                              [&](std::size_t i) { return query_density(m, dataset[i]); });
  double sum = 0.0;
  for (double v : d) sum += v;
  return sum / static_cast<double>(d.size());
}

TransferMatrix transfer_matrix(std::span<const Model> targets,
                               const std::vector<std::vector<Tensor>>& sponge_sets,
                               std::span<const double> baselines, std::size_t threads) {
  if (baselines.size() != targets.size())
    throw DataError("need one baseline per target model");
  TransferMatrix tm;
  tm.baselines.assign(baselines.begin(), baselines.end());
  for (double b : baselines)
    if (!(b > 0.0)) throw DataError("baselines must be positive");
  for (const auto& set : sponge_sets) {
    if (set.empty()) throw DataError("empty sponge set");
    std::vector<double> pct, mean;
    for (std::size_t t = 0; t < targets.size(); ++t) {
      for (const auto& img : set)
        if (img.dims() != targets[t].arch().input_shape)
          throw ShapeError("sponge image " + to_string(img.dims()) + " does not fit target " +
                           std::to_string(t));
      const double md = mean_density(targets[t], set, threads);
      mean.push_back(md);
      pct.push_back(100.0 * (md - baselines[t]) / baselines[t]);
    }
    tm.percent.push_back(std::move(pct));
    tm.mean_density.push_back(std::move(mean));
  }
  return tm;
}

StudyResult density_uniformity_study(const Model& m, std::span<const Tensor> dataset,
                                     const UniformityConfig& cfg, std::size_t threads) {
  if (dataset.empty()) throw DataError("study dataset is empty");
  if (!m.calibrated()) throw StateError("model is not calibrated");
  StudyResult s;
  s.rows = parallel_map(dataset.size(), threads, [&](std::size_t i) {
    return StudyRow{uniformity(dataset[i], cfg), query_density(m, dataset[i])};
  });
  std::vector<double> u, d;
  for (const auto& r : s.rows) {
    u.push_back(r.uniformity);
    d.push_back(r.density);
  }
  s.tau = kendall_tau(u, d);
  return s;
}

void write_study_csv(std::ostream& os, const StudyResult& s) {
  os.precision(17);
  os << "index,uniformity,density\n";
  for (std::size_t i = 0; i < s.rows.size(); ++i)
    os << i << ',' << s.rows[i].uniformity << ',' << s.rows[i].density << '\n';
}

std::vector<Tensor> SynthDataset::images() const {
  std::vector<Tensor> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.image);
  return out;
}

namespace {

// Texture cell size (rows, cols) per family; noise is constant within a cell.
constexpr std::size_t kCells[kTextureFamilies][2] = {
    {1, 1}, {1, 2}, {2, 1}, {2, 2}, {1, 4}, {4, 1}, {2, 4}, {4, 2}, {4, 4}, {8, 8},
};

}  // namespace

SynthDataset synth_dataset(const SynthConfig& cfg) {
  if (cfg.n == 0) throw ConfigError("synthetic dataset size must be >= 1");
  if (cfg.shape.size() != 3 || shape_size(cfg.shape) == 0)
    throw ConfigError("synthetic image shape must be C x H x W");
  if (cfg.noise_levels.empty()) throw ConfigError("noise_levels is empty");
  for (double s : cfg.noise_levels)
    if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("noise levels must be >= 0");
  const std::size_t C = cfg.shape[0], H = cfg.shape[1], W = cfg.shape[2];
  const std::size_t rect_lo = std::max<std::size_t>(1, std::min(H, W) / 8);
  const std::size_t rect_hi = std::max<std::size_t>(rect_lo + 1, std::min(H, W) * 3 / 4);

  SynthDataset ds;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    Rng rng(derive_seed(cfg.seed, i));
    Tensor img(cfg.shape);
    for (std::size_t c = 0; c < C; ++c) {
      const double v = rng.uniform();
      for (double& p : img.channel(c)) p = v;
    }
    const std::uint64_t rects = 2 + rng.below(5);
    for (std::uint64_t r = 0; r < rects; ++r) {
      const std::size_t y0 = rng.below(H), x0 = rng.below(W);
      const std::size_t h = rect_lo + rng.below(rect_hi - rect_lo);
      const std::size_t w = rect_lo + rng.below(rect_hi - rect_lo);
      std::vector<double> color(C);
      for (double& v : color) v = rng.uniform();
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = y0; y < std::min(H, y0 + h); ++y)
          for (std::size_t x = x0; x < std::min(W, x0 + w); ++x) img.at(c, y, x) = color[c];
    }
    const std::size_t family = rng.below(kTextureFamilies);
    const double scale = cfg.noise_levels[rng.below(cfg.noise_levels.size())];
    const std::size_t ch = kCells[family][0], cw = kCells[family][1];
    const std::size_t gh = (H + ch - 1) / ch, gw = (W + cw - 1) / cw;
    std::vector<double> cells(C * gh * gw);
    for (double& v : cells) v = rng.normal();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          double& p = img.at(c, y, x);
          p = std::clamp(p + scale * cells[(c * gh + y / ch) * gw + x / cw], 0.0, 1.0);
        }
    ds.items.push_back({std::move(img), family});
    ds.noise.push_back(scale);
  }
  return ds;
}

}  // namespace sponge

#include "sponge/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sponge/parallel.hpp"
#include "sponge/probe.hpp"
#include "sponge/random.hpp"
#include "sponge/tensor_io.hpp"

namespace sponge {

namespace {

class Stopwatch {
 public:
  explicit Stopwatch(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    if (!enabled_) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};

Tensor random_image(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform();
  return t;
}

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

// --- oracle -----------------------------------------------------------------------

double query_density(const Model& m, const Tensor& image) {
  ProbeOptions opts;
  const auto r = forward(m, image, &opts);
  return post_relu_density(*r.record);
}

DensityOracle make_density_oracle(const Model& m) {
  auto owned = std::make_shared<const Model>(m);
  return [owned](const Tensor& x) { return query_density(*owned, x); };
}

// --- result files -----------------------------------------------------------------

void write_sponge_result(const std::filesystem::path& dir, const std::string& stem,
                         const SpongeResult& r) {
  std::filesystem::create_directories(dir);
  write_sptn(dir / (stem + ".sptn"), r.image);
  nlohmann::ordered_json j;
  j["strategy"] = r.strategy;
  j["seed"] = r.seed;
  j["density"] = r.density;
  j["wall_time_s"] = r.wall_time_s;
  j["image"] = stem + ".sptn";
  j["shape"] = r.image.dims();
  j["trace_rows"] = r.trace.size();
  std::ofstream(dir / (stem + ".json")) << j.dump(2) << '\n';
  if (!r.trace.empty()) {
    std::ofstream csv(dir / (stem + "_trace.csv"));
    csv.precision(17);
    csv << "iteration,objective,density,elapsed_s\n";
    for (const auto& row : r.trace)
      csv << row.iteration << ',' << row.objective << ',' << row.density << ',' << row.elapsed_s
          << '\n';
  }
}

SpongeResult read_sponge_result(const std::filesystem::path& dir, const std::string& stem) {
  const auto json_path = dir / (stem + ".json");
  std::ifstream in(json_path);
  if (!in) throw DataError("cannot open " + json_path.string());
  SpongeResult r;
  try {
    const auto j = nlohmann::json::parse(in);
    r.strategy = j.at("strategy").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.density = j.at("density").get<double>();
    r.wall_time_s = j.at("wall_time_s").get<double>();
    r.image = read_sptn(dir / j.at("image").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(json_path.string() + ": " + e.what());
  }
  return r;
}

// --- uniform sampling and grid search ---------------------------------------------

std::vector<Tensor> uniform_sampling(double mu, double sigma, const Shape& shape, std::size_t n,
                                     std::uint64_t seed) {
  if (!(sigma > 0.0) || !std::isfinite(sigma))
    throw ConfigError("sigma must be > 0 (a zero sigma yields a single image)");
  if (!std::isfinite(mu)) throw ConfigError("mu must be finite");
  if (n == 0) throw ConfigError("n must be >= 1");
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    Tensor t(shape);
    for (double& v : t.data()) v = clip01(rng.normal(mu, sigma));
    out.push_back(std::move(t));
  }
  return out;
}

GridSearchResult grid_search_mu(const DensityOracle& oracle, const Shape& shape,
                                const std::vector<double>& mu_grid, double sigma,
                                std::size_t samples_per_mu, std::uint64_t seed,
                                std::size_t threads) {
  if (mu_grid.empty()) throw ConfigError("mu grid is empty");
  if (samples_per_mu == 0) throw ConfigError("samples_per_mu must be >= 1");
  GridSearchResult result;
  for (double mu : mu_grid) {
    const auto images = uniform_sampling(mu, sigma, shape, samples_per_mu, seed);
    const auto d = parallel_map(images.size(), threads,
                                [&](std::size_t i) { return oracle(images[i]); });
    double sum = 0.0;
    for (double v : d) sum += v;
    result.table.push_back({mu, sum / static_cast<double>(d.size())});
  }
  auto best = std::max_element(result.table.begin(), result.table.end(),
                               [](const GridRow& a, const GridRow& b) {
                                 return a.mean_density < b.mean_density;
                               });
  result.best_mu = best->mu;
  return result;
}

// --- top natural ------------------------------------------------------------------

std::vector<SpongeResult> top_natural(const DensityOracle& oracle, std::span<const Tensor> dataset,
                                      std::size_t n, std::size_t threads, bool record_timing) {
  if (n == 0) throw ConfigError("n must be >= 1");
  if (n > dataset.size())
    throw DataError("asked for " + std::to_string(n) + " images from a dataset of " +
                    std::to_string(dataset.size()));
  const Stopwatch clock(record_timing);
  const auto d = parallel_map(dataset.size(), threads,
                              [&](std::size_t i) { return oracle(dataset[i]); });
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return d[a] > d[b]; });
  const double per_image = clock.seconds() / static_cast<double>(dataset.size());
  std::vector<SpongeResult> out;
  for (std::size_t k = 0; k < n; ++k) {
    SpongeResult r;
    r.image = dataset[order[k]];
    r.density = d[order[k]];
    r.wall_time_s = per_image;
    r.strategy = "top-natural";
    r.seed = order[k];  // dataset index of the chosen image
    out.push_back(std::move(r));
  }
  return out;
}

// --- genetic search ---------------------------------------------------------------

void GaConfig::validate() const {
  if (pool_size < 2) throw ConfigError("ga.pool_size must be >= 2");
  if (!(elite_fraction > 0.0 && elite_fraction < 1.0))
    throw ConfigError("ga.elite_fraction must be in (0, 1)");
  if (!(mutation_std > 0.0) || !std::isfinite(mutation_std))
    throw ConfigError("ga.mutation_std must be > 0");
}

SpongeResult sponge_ga(const DensityOracle& oracle, const Shape& shape, const GaConfig& cfg) {
  cfg.validate();
  const Stopwatch clock(cfg.record_timing);
  Rng rng(cfg.seed);
  const std::size_t P = cfg.pool_size;
  const std::size_t elite =
      std::clamp<std::size_t>(static_cast<std::size_t>(cfg.elite_fraction * static_cast<double>(P)),
                              1, P - 1);

  std::vector<Tensor> pool;
  for (std::size_t i = 0; i < P; ++i) pool.push_back(random_image(shape, rng));
  std::vector<double> fitness =
      parallel_map(P, cfg.threads, [&](std::size_t i) { return oracle(pool[i]); });

  SpongeResult best;
  best.strategy = "ga";
  best.seed = cfg.seed;
  best.density = -1.0;
  auto take_best = [&] {
    for (std::size_t i = 0; i < P; ++i)
      if (fitness[i] > best.density) {
        best.density = fitness[i];
        best.image = pool[i];
      }
  };
  take_best();
  best.trace.push_back({0, best.density, best.density, clock.seconds()});

  std::vector<std::size_t> order(P);
  for (std::size_t gen = 1; gen <= cfg.iterations; ++gen) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return fitness[a] > fitness[b]; });
    std::vector<Tensor> next;
    std::vector<double> next_fitness;
    for (std::size_t k = 0; k < elite; ++k) {
      next.push_back(std::move(pool[order[k]]));
      next_fitness.push_back(fitness[order[k]]);
    }
    for (std::size_t k = elite; k < P; ++k) {
      const Tensor& a = next[rng.below(elite)];
      const Tensor& b = next[rng.below(elite)];
      Tensor child(shape);
      auto out = child.data();
      const auto pa = a.data();
      const auto pb = b.data();
      for (std::size_t t = 0; t < out.size(); ++t) {
        const double base = rng.uniform() < 0.5 ? pa[t] : pb[t];
        out[t] = clip01(base + rng.normal(0.0, cfg.mutation_std));
      }
      next.push_back(std::move(child));
    }
    const auto child_fitness = parallel_map(P - elite, cfg.threads,
                                            [&](std::size_t i) { return oracle(next[elite + i]); });
    next_fitness.insert(next_fitness.end(), child_fitness.begin(), child_fitness.end());
    pool = std::move(next);
    fitness = std::move(next_fitness);
    take_best();
    best.trace.push_back({gen, best.density, best.density, clock.seconds()});
  }
  best.wall_time_s = clock.seconds();
  return best;
}

// --- activation-norm objective ----------------------------------------------------

ActivationObjective activation_norm_objective(const Model& m, const Tensor& x) {
  ModelTape mt = forward_taped(m, x);
  ActivationObjective out;
  std::vector<Tape::Seed> seeds;
  std::size_t nonzero = 0, total = 0;
  for (NodeId id : mt.relu_outputs) {
    const Tensor& a = mt.tape.value(id);
    double sq = 0.0;
    for (double v : a.data()) {
      sq += v * v;
      nonzero += v != 0.0;
    }
    total += a.size();
    const double norm = std::sqrt(sq);
    out.value -= norm;
    if (norm > 0.0) {
      Tensor g(a.dims());
      auto gd = g.data();
      const auto ad = a.data();
      for (std::size_t k = 0; k < gd.size(); ++k) gd[k] = -ad[k] / norm;
      seeds.push_back({id, std::move(g)});
    }
  }
  out.density = total == 0 ? 0.0 : static_cast<double>(nonzero) / static_cast<double>(total);
  if (seeds.empty()) {
    out.gradient = Tensor(x.dims());
  } else {
    const auto grads = mt.tape.backward(seeds);
    out.gradient = grads.has(mt.input) ? grads[mt.input] : Tensor(x.dims());
  }
  return out;
}

// --- projected L-BFGS -------------------------------------------------------------

void LbfgsConfig::validate() const {
  if (history == 0) throw ConfigError("lbfgs.history must be >= 1");
  if (!(initial_step > 0.0) || !std::isfinite(initial_step))
    throw ConfigError("lbfgs.initial_step must be > 0");
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct Pair {
  std::vector<double> s, y;
  double rho;
};

// Two-loop recursion: returns -H g for the implicit inverse Hessian.
std::vector<double> lbfgs_direction(std::span<const double> g, const std::vector<Pair>& hist) {
  std::vector<double> q(g.begin(), g.end());
  std::vector<double> alpha(hist.size());
  for (std::size_t k = hist.size(); k-- > 0;) {
    alpha[k] = hist[k].rho * dot(hist[k].s, q);
    for (std::size_t i = 0; i < q.size(); ++i) q[i] -= alpha[k] * hist[k].y[i];
  }
  const Pair& last = hist.back();
  const double scale = dot(last.s, last.y) / dot(last.y, last.y);
  for (double& v : q) v *= scale;
  for (std::size_t k = 0; k < hist.size(); ++k) {
    const double beta = hist[k].rho * dot(hist[k].y, q);
    for (std::size_t i = 0; i < q.size(); ++i) q[i] += (alpha[k] - beta) * hist[k].s[i];
  }
  for (double& v : q) v = -v;
  return q;
}

}  // namespace

SpongeResult sponge_lbfgs(const Model& m, const LbfgsConfig& cfg) {
  cfg.validate();
  if (!m.calibrated()) throw StateError("model is not calibrated");
  const Stopwatch clock(cfg.record_timing);
  Rng rng(cfg.seed);
  Tensor x = random_image(m.arch().input_shape, rng);

  auto evaluate = [&](const Tensor& at, std::size_t iter) {
    ActivationObjective e = activation_norm_objective(m, at);
    if (!std::isfinite(e.value))
      throw NonFiniteObjective("objective is not finite at iteration " + std::to_string(iter), at);
    return e;
  };

  ActivationObjective cur = evaluate(x, 0);
  SpongeResult best;
  best.strategy = "lbfgs";
  best.seed = cfg.seed;
  best.image = x;
  best.density = cur.density;
  best.trace.push_back({0, cur.value, best.density, clock.seconds()});

  constexpr double kArmijo = 1e-4;
  constexpr int kMaxHalvings = 30;
  std::vector<Pair> hist;

  for (std::size_t it = 1; it <= cfg.steps; ++it) {
    const auto g = cur.gradient.data();
    double gmax = 0.0;
    for (double v : g) gmax = std::max(gmax, std::abs(v));
    // Every ReLU is dead: nothing moves the objective from here.
    if (gmax == 0.0) break;

    std::vector<double> d;
    if (!hist.empty()) d = lbfgs_direction(g, hist);
    if (hist.empty() || dot(d, g) >= 0.0) {
      hist.clear();
      d.assign(g.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = -g[i] * cfg.initial_step / gmax;
    }

    bool accepted = false;
    bool projected = false;
    Tensor trial(x.dims());
    ActivationObjective next;
    double t = 1.0;
    for (int h = 0; h <= kMaxHalvings && !accepted; ++h, t *= 0.5) {
      projected = false;
      const auto xd = x.data();
      auto td = trial.data();
      for (std::size_t i = 0; i < td.size(); ++i) {
        const double raw = xd[i] + t * d[i];
        td[i] = clip01(raw);
        projected |= td[i] != raw;
      }
      double decrease = 0.0;
      for (std::size_t i = 0; i < td.size(); ++i) decrease += g[i] * (td[i] - xd[i]);
      if (decrease >= 0.0) continue;  // projection removed the descent
      next = evaluate(trial, it);
      accepted = next.value <= cur.value + kArmijo * decrease;
    }
    if (!accepted) {
      if (hist.empty()) break;  // steepest descent failed as well
      hist.clear();
      best.trace.push_back({it, cur.value, best.density, clock.seconds()});
      continue;
    }

    if (projected) {
      hist.clear();
    } else {
      Pair p;
      p.s.resize(g.size());
      p.y.resize(g.size());
      const auto xd = x.data();
      const auto td = trial.data();
      const auto gn = next.gradient.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        p.s[i] = td[i] - xd[i];
        p.y[i] = gn[i] - g[i];
      }
      const double sy = dot(p.s, p.y);
      if (sy > 1e-12) {
        p.rho = 1.0 / sy;
        hist.push_back(std::move(p));
        if (hist.size() > cfg.history) hist.erase(hist.begin());
      }
    }
    x = trial;
    cur = std::move(next);
    if (cur.density > best.density) {
      best.density = cur.density;
      best.image = x;
    }
    best.trace.push_back({it, cur.value, best.density, clock.seconds()});
  }
  best.wall_time_s = clock.seconds();
  return best;
}

}  // namespace sponge

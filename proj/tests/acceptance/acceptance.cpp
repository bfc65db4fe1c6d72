// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "sponge/analysis.hpp"
#include "sponge/attack.hpp"
#include "sponge/model.hpp"
#include "sponge/ops.hpp"
#include "sponge/probe.hpp"
#include "sponge/random.hpp"
#include "sponge/tensor_io.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace sponge;

namespace {

// Pinned tolerances and budgets.
constexpr std::size_t kThresholdDraws = 10000;
constexpr double kThresholdBudgetS = 1.0;
constexpr double kGradRelTight = 1e-6;
constexpr double kGradTightShare = 0.95;
constexpr double kGradRelLoose = 1e-4;
constexpr double kGradKinkMargin = 1e-3;
constexpr double kGradBudgetS = 30.0;
constexpr std::size_t kOrderingSamples = 100;
constexpr double kSigma = 2.0 / 255.0;
constexpr double kOrderingMargin = 0.02;
constexpr double kOrderingBudgetS = 120.0;
constexpr double kSpeedRatio = 0.01;
constexpr std::size_t kStudyImages = 300;
constexpr double kTauCeiling = -0.2;
constexpr std::size_t kMechanismSamples = 100;
constexpr std::size_t kLbfgsSeeds = 10;
constexpr std::size_t kKendallInstances = 50;
constexpr std::size_t kKendallMaxN = 300;
constexpr double kKendallTol = 1e-12;
constexpr std::size_t kTransferNatural = 300;
constexpr double kFinetuneBudgetS = 600.0;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const Model& desk(std::uint64_t seed = 1) { return testing::calibrated_desknet(seed); }

std::vector<double> mu_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 10; ++i) g.push_back(i / 10.0);
  return g;
}

std::vector<Tensor> random_images(std::size_t n, std::uint64_t seed) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(testing::random_image(derive_seed(seed, i)));
  return out;
}

// Uniform-sampling sponges on `m` with a grid-searched mean.
std::vector<Tensor> uniform_sponges(const Model& m, std::size_t n, std::uint64_t seed, double* mu_out = nullptr) {
  const auto gs = grid_search_mu(make_density_oracle(m), m.arch().input_shape, mu_grid(), kSigma, 10,
                                 derive_seed(seed, 1));
  if (mu_out) *mu_out = gs.best_mu;
  return uniform_sampling(gs.best_mu, kSigma, m.arch().input_shape, n, derive_seed(seed, 2));
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// --- 1 ---------------------------------------------------------------------------------

Outcome threshold_law() {
  const auto t0 = Clock::now();
  Rng rng(20240901);
  std::size_t failures = 0, checked = 0;
  while (checked < kThresholdDraws) {
    BnParams p = BnParams::identity(1);
    p.mu_hat[0] = rng.normal(0.0, 2.0);
    p.sigma_hat[0] = std::exp(rng.uniform(-6.0, 3.0));
    p.gamma[0] = rng.normal(0.0, 2.0);
    p.beta[0] = rng.normal(0.0, 2.0);
    const ZeroThreshold t = zero_threshold(p, 0);
    const double z = rng.normal(t.theta, 3.0);
    if (!(std::abs(z - t.theta) > 1e-9)) continue;
    const bool positive = ops::batchnorm_infer(Tensor::filled({1, 1, 1}, z), p)[0] > 0.0;
    const bool predicted = t.direction == ThresholdDirection::kPosAbove ? z > t.theta : z < t.theta;
    failures += positive != predicted;
    ++checked;
  }
  const double dt = seconds_since(t0);
  return {failures == 0 && dt < kThresholdBudgetS,
          fmt("%zu draws, %zu sign failures, %.3f s", checked, failures, dt)};
}

// --- 2 ---------------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  const Model m = testing::two_block_model(2);
  Tensor x = testing::random_image(9, m.arch().input_shape);
  for (double& v : x.data()) v = 0.05 + 0.9 * v;
  const auto chk = testing::check_objective_gradient(m, x);
  std::size_t tight = 0, smooth = 0, smooth_bad = 0;
  double worst_smooth = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double rel = testing::rel_error(chk.analytic[i], chk.numeric[i]);
    tight += rel < kGradRelTight;
    if (chk.kink_distance[i] > kGradKinkMargin) {
      ++smooth;
      smooth_bad += !(rel < kGradRelLoose);
      worst_smooth = std::max(worst_smooth, rel);
    }
  }
  const double share = static_cast<double>(tight) / static_cast<double>(x.size());
  const double dt = seconds_since(t0);
  return {share >= kGradTightShare && smooth_bad == 0 && dt < kGradBudgetS,
          fmt("%.1f%% of %zu coords < 1e-6; worst of %zu kink-free coords %.2e; %.1f s", 100 * share,
              x.size(), smooth, worst_smooth, dt)};
}

// --- 3 ---------------------------------------------------------------------------------

Outcome density_ordering() {
  const auto t0 = Clock::now();
  const Model& m = desk();
  double mu = 0.0;
  const auto uni = uniform_sponges(m, kOrderingSamples, 31, &mu);
  const double d_uni = mean_density(m, uni);
  const double d_rand = mean_density(m, random_images(kOrderingSamples, 32));
  const double dt = seconds_since(t0);
  return {d_uni - d_rand >= kOrderingMargin && dt < kOrderingBudgetS,
          fmt("Uni %.4f (mu %.1f) vs Rand %.4f, margin %.4f; %.1f s", d_uni, mu, d_rand, d_uni - d_rand, dt)};
}

// --- 4 ---------------------------------------------------------------------------------

Outcome attack_speed(SpongeResult& ga_out) {
  const Model& m = desk();
  const auto oracle = make_density_oracle(m);
  // Uniform sampling per-sample cost includes its share of the grid search.
  const auto t0 = Clock::now();
  const auto uni = uniform_sponges(m, kOrderingSamples, 41);
  std::vector<double> d;
  for (const auto& x : uni) d.push_back(oracle(x));
  const double uni_per = seconds_since(t0) / static_cast<double>(uni.size());
  GaConfig cfg;
  cfg.seed = 42;
  ga_out = sponge_ga(oracle, m.arch().input_shape, cfg);
  const double ga_per = ga_out.wall_time_s;
  return {uni_per < kSpeedRatio * ga_per,
          fmt("uniform %.2f ms/sample, GA %.2f s/sample, ratio %.5f", 1e3 * uni_per, ga_per, uni_per / ga_per)};
}

// --- 5 ---------------------------------------------------------------------------------

Outcome uniformity_density_link() {
  SynthConfig sc;
  sc.n = kStudyImages;
  sc.seed = 1;
  const auto s = density_uniformity_study(desk(), synth_dataset(sc).images());
  return {s.tau <= kTauCeiling, fmt("tau %.4f over %zu images", s.tau, s.rows.size())};
}

// --- 6 ---------------------------------------------------------------------------------

Outcome mechanism() {
  const Model& m = desk();
  auto summarize = [&](const std::vector<Tensor>& images, double& median_std, double& mean_gain) {
    std::vector<double> stds, gains;
    for (const auto& x : images) {
      const auto r = *forward_probed(m, x, {true}).record;
      for (const auto& s : channel_stats(r, 0)) stds.push_back(s.std);
      for (double g : density_gain(r, 0)) gains.push_back(g);
    }
    median_std = median_of(stds);
    mean_gain = mean_of(gains);
  };
  double s_std, s_gain, r_std, r_gain;
  summarize(uniform_sponges(m, kMechanismSamples, 61), s_std, s_gain);
  summarize(random_images(kMechanismSamples, 62), r_std, r_gain);
  return {s_std < r_std && s_gain > r_gain,
          fmt("median pre-BN std %.4f vs %.4f; mean gain %.4f vs %.4f", s_std, r_std, s_gain, r_gain)};
}

// --- 7 ---------------------------------------------------------------------------------

Outcome optimizer_progress(const SpongeResult& ga) {
  const Model& m = desk();
  bool monotone = !ga.trace.empty();
  for (std::size_t i = 1; i < ga.trace.size(); ++i) monotone &= ga.trace[i].density >= ga.trace[i - 1].density;
  std::size_t improved = 0;
  std::string runs;
  for (std::size_t s = 0; s < kLbfgsSeeds; ++s) {
    LbfgsConfig cfg;
    cfg.seed = 700 + s;
    const SpongeResult r = sponge_lbfgs(m, cfg);
    const double init = r.trace.front().density;
    improved += r.density > init;
    runs += fmt(" %+.4f", r.density - init);
  }
  return {monotone && improved == kLbfgsSeeds,
          fmt("GA trace %s over %zu generations; L-BFGS improved %zu/%zu (deltas%s)",
              monotone ? "non-decreasing" : "DECREASES", ga.trace.size(), improved, kLbfgsSeeds, runs.c_str())};
}

// --- 8 ---------------------------------------------------------------------------------

double tau_b_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  double nc = 0, nd = 0, tx = 0, ty = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double a = x[i] - x[j], b = y[i] - y[j];
      if (a == 0 && b == 0) continue;
      if (a == 0) ++tx;
      else if (b == 0) ++ty;
      else if ((a > 0) == (b > 0)) ++nc;
      else ++nd;
    }
  return (nc - nd) / std::sqrt((nc + nd + tx) * (nc + nd + ty));
}

Outcome kendall_oracle() {
  Rng rng(8080);
  double worst = 0.0;
  for (std::size_t k = 0; k < kKendallInstances; ++k) {
    const std::size_t n = 2 + rng.below(kKendallMaxN - 1);
    const double levels = 2 + rng.below(40);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.uniform() < 0.3 ? std::floor(rng.uniform() * levels) : rng.normal(0.0, 1.0);
      y[i] = rng.uniform() < 0.3 ? std::floor(rng.uniform() * levels) : 0.5 * x[i] + rng.normal(0.0, 1.0);
    }
    const double want = tau_b_oracle(x, y);
    const double got = kendall_tau(x, y);
    worst = std::max(worst, std::isnan(want) && std::isnan(got) ? 0.0 : std::abs(want - got));
    if (std::isnan(worst)) break;
  }
  return {worst <= kKendallTol, fmt("%zu instances, max |diff| %.3e", kKendallInstances, worst)};
}

// --- 9 ---------------------------------------------------------------------------------

Outcome transfer_direction() {
  const Model& a = desk(1);
  const Model& b = desk(2);
  SynthConfig sc;
  sc.n = kTransferNatural;
  sc.seed = 1;
  const auto natural = synth_dataset(sc).images();
  std::vector<double> da, db;
  for (const auto& x : natural) {
    da.push_back(query_density(a, x));
    db.push_back(query_density(b, x));
  }
  const std::vector<Model> targets{a, b};
  const std::vector<double> baselines{mean_of(da), mean_of(db)};
  const auto tm = transfer_matrix(targets, {uniform_sponges(a, kOrderingSamples, 91)}, baselines);
  const double pct = tm.percent[0][1];
  const double tau = kendall_tau(da, db);
  return {pct > 0.0 && tau > 0.0,
          fmt("A->B %+.2f%% (A->A %+.2f%%); natural tau(A, B) %.4f", pct, tm.percent[0][0], tau)};
}

// --- 10 --------------------------------------------------------------------------------

struct Workspace {
  fs::path root = fs::temp_directory_path() / ("sponge_acceptance_" + std::to_string(::getpid()));
  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
  fs::path operator/(const std::string& s) const { return root / s; }
};

int cli_run(const std::vector<std::string>& args, std::string* err_out = nullptr) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (err_out) *err_out = err.str();
  if (code != 0) std::cerr << "  sponge " << args.front() << " failed: " << err.str();
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome finetune_direction(const Workspace& ws) {
  const auto t0 = Clock::now();
  if (cli_run({"build-calibrate", "--out", (ws / "ft_model").string()}) != 0) return {false, "build failed"};
  if (cli_run({"finetune", "--model", (ws / "ft_model" / "model.spmd").string(), "--out",
               (ws / "ft").string()}) != 0)
    return {false, "finetune failed"};
  const auto rep = nlohmann::json::parse(slurp(ws / "ft" / "report.json"));
  const double du = rep.at("uniform").at("delta").get<double>();
  const double dr = rep.at("random").at("delta").get<double>();
  const double dt = seconds_since(t0);
  return {du > 0.0 && dr < du && dt < kFinetuneBudgetS,
          fmt("held-out sparsity %.4f; uniform delta %+.4f, random delta %+.4f; %.1f s",
              rep.at("sparsity_before").get<double>(), du, dr, dt)};
}

// --- 11 --------------------------------------------------------------------------------

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).generic_string()] = slurp(e.path());
  return files;
}

Outcome determinism(const Workspace& ws) {
  std::vector<std::string> problems;

  // Save/load.
  const Model& m = desk();
  const fs::path saved = ws / "roundtrip.spmd";
  save_model(m, saved);
  const Model back = load_model(saved);
  const Tensor probe = testing::random_image(1101);
  if (!(back == m) || back.hash() != m.hash() ||
      !bit_equal(forward(back, probe).logits, forward(m, probe).logits))
    problems.push_back("save/load");

  // Every seeded command, twice on one thread and once on three.
  const std::string model = (ws / "ft_model" / "model.spmd").string();
  if (!fs::exists(model)) cli_run({"build-calibrate", "--out", (ws / "ft_model").string()});
  const std::string small = R"({"n":40,"seed":3})";
  const std::map<std::string, std::vector<std::string>> commands = {
      {"build-calibrate", {"build-calibrate", "--seed", "5", "--dataset", small}},
      {"attack-uniform", {"attack", "--model", model, "--n", "100", "--seed", "7", "--record_timing", "false"}},
      {"attack-top-natural",
       {"attack", "--model", model, "--strategy", "top-natural", "--n", "5", "--dataset", small,
        "--record_timing", "false"}},
      {"attack-ga",
       {"attack", "--model", model, "--strategy", "ga", "--n", "2", "--ga.iterations", "5",
        "--ga.pool_size", "8", "--record_timing", "false"}},
      {"attack-lbfgs",
       {"attack", "--model", model, "--strategy", "lbfgs", "--n", "3", "--lbfgs.steps", "3",
        "--record_timing", "false"}},
      {"analyze-thresholds", {"analyze", "--model", model, "--what", "thresholds"}},
      {"analyze-gains", {"analyze", "--model", model, "--what", "gains", "--inputs", small}},
      {"analyze-channel-stats", {"analyze", "--model", model, "--what", "channel-stats", "--inputs", small}},
      {"analyze-density", {"analyze", "--model", model, "--what", "density", "--inputs", small}},
      {"study", {"study", "--model", model, "--dataset", small}},
      {"finetune",
       {"finetune", "--model", model, "--dataset", R"({"n":120,"seed":4})", "--steps", "10"}},
  };
  std::vector<std::string> sponge_dirs;
  for (const auto& [name, args] : commands) {
    std::vector<std::map<std::string, std::string>> outs;
    for (const char* threads : {"1", "1", "3"}) {
      const fs::path out = ws / ("det_" + name + "_" + std::to_string(outs.size()));
      auto a = args;
      a.insert(a.end(), {"--out", out.string()});
      if (name != "build-calibrate" && name != "analyze-thresholds") a.insert(a.end(), {"--threads", threads});
      if (cli_run(a) != 0) {
        problems.push_back(name + " exit");
        break;
      }
      outs.push_back(tree(out));
      if (name == "attack-uniform") sponge_dirs.push_back(out.string());
    }
    if (outs.size() == 3 && (outs[0] != outs[1] || outs[0] != outs[2])) problems.push_back(name);
  }
  {
    std::vector<std::map<std::string, std::string>> outs;
    for (const char* threads : {"1", "1", "3"}) {
      const fs::path out = ws / ("det_transfer_" + std::to_string(outs.size()));
      const std::string models = "[\"" + model + "\",\"" + model + "\"]";
      const std::string sponges = "[\"" + sponge_dirs.at(0) + "\"]";
      if (cli_run({"transfer", "--models", models, "--sponges", sponges, "--dataset", small, "--threads",
                   threads, "--out", out.string()}) != 0) {
        problems.push_back("transfer exit");
        break;
      }
      outs.push_back(tree(out));
    }
    if (outs.size() == 3 && (outs[0] != outs[1] || outs[0] != outs[2])) problems.push_back("transfer");
  }

  // Cost model extremes on a single-block model.
  const Model dead = build(testing::tiny_arch(7)).with_bn_params({[] {
    BnParams p = BnParams::identity(3);
    p.beta = {-1.0, -1.0, -1.0};
    return p;
  }()});
  const Model live = build(testing::tiny_arch(7)).with_bn_params({[] {
    BnParams p = BnParams::identity(3);
    p.beta = {1e3, 1e3, 1e3};
    return p;
  }()});
  Tensor x = testing::random_image(1102, {2, 6, 6});
  for (double& v : x.data()) v = 0.05 + 0.9 * v;
  const double skip_dead = cost_model(*forward_probed(dead, Tensor({2, 6, 6})).record, dead).skipped_fraction;
  const double skip_live = cost_model(*forward_probed(live, x).record, live).skipped_fraction;
  if (skip_dead != 1.0 || skip_live != 0.0) problems.push_back("cost_model");

  std::string detail = fmt("%zu commands x 3 runs, cost_model %g/%g", commands.size() + 1, skip_dead, skip_live);
  for (const auto& p : problems) detail += "; mismatch: " + p;
  return {problems.empty(), detail};
}

}  // namespace

int main() {
  const Workspace ws;
  SpongeResult ga;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"threshold law", threshold_law},
      {"gradient fidelity", gradient_fidelity},
      {"density ordering Uni > Rand", density_ordering},
      {"attack speed ordering", [&] { return attack_speed(ga); }},
      {"uniformity-density link", uniformity_density_link},
      {"mechanism at first BN site", mechanism},
      {"optimizer progress", [&] { return optimizer_progress(ga); }},
      {"Kendall tau oracle", kendall_oracle},
      {"transfer direction", transfer_direction},
      {"fine-tune direction", [&] { return finetune_direction(ws); }},
      {"determinism and round-trips", [&] { return determinism(ws); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  std::cout << criteria.size() - failed << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}

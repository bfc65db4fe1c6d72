#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sponge/analysis.hpp"
#include "sponge/attack.hpp"
#include "sponge/error.hpp"
#include "sponge/model.hpp"
#include "sponge/parallel.hpp"
#include "sponge/probe.hpp"
#include "sponge/random.hpp"
#include "sponge/tensor_io.hpp"

namespace sponge::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

constexpr const char* kToolVersion = "0.1.0";

enum class Kind { kString, kNumber, kInt, kBool, kList, kDataset };

struct Key {
  std::string name;
  Kind kind;
  json def;  // null: required unless `optional`
  std::string help;
  bool optional = false;
};

std::string hex(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

[[noreturn]] void rethrow_with_prefix(const Error& e, const std::string& prefix) {
  const std::string msg = prefix + ": " + e.what();
  switch (e.kind()) {
    case ErrorKind::kShape: throw ShapeError(msg);
    case ErrorKind::kConfig: throw ConfigError(msg);
    case ErrorKind::kSpec: throw SpecError(msg);
    case ErrorKind::kData: throw DataError(msg);
    case ErrorKind::kFormat: throw FormatError(msg, static_cast<const FormatError&>(e).offset());
    case ErrorKind::kState: throw StateError(msg);
    case ErrorKind::kNumeric: throw NumericError(msg);
  }
  throw DataError(msg);
}

template <class Fn>
auto with_file(const fs::path& path, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    rethrow_with_prefix(e, path.string());
  }
}

// --- resolved configuration ----------------------------------------------------------

class Context {
 public:
  Context(json cfg, std::ostream& log) : cfg_(std::move(cfg)), log_(log) {}

  // Everything except where to write and how many workers to use. Those two
  // cannot change any output byte, so recorded configs leave them out and a
  // manifest re-run picks its own.
  json experiment_config() const {
    json c = cfg_;
    c.erase("out");
    c.erase("threads");
    return c;
  }
  std::ostream& log() { return log_; }
  const json& raw(const std::string& key) const { return cfg_.at(key); }
  bool has(const std::string& key) const { return !cfg_.at(key).is_null(); }

  std::string str(const std::string& key) const { return cfg_.at(key).get<std::string>(); }
  double num(const std::string& key) const { return cfg_.at(key).get<double>(); }
  std::uint64_t u64(const std::string& key) const { return cfg_.at(key).get<std::uint64_t>(); }
  std::size_t count(const std::string& key) const { return cfg_.at(key).get<std::size_t>(); }
  bool flag(const std::string& key) const { return cfg_.at(key).get<bool>(); }

  fs::path out_dir() const { return fs::path(str("out")); }

  fs::path output(const fs::path& rel) {
    const fs::path p = out_dir() / rel;
    fs::create_directories(p.parent_path());
    return p;
  }

  Model load_model(const fs::path& path) {
    Model m = with_file(path, [&] { return sponge::load_model(path); });
    models_[path.string()] = hex(m.hash());
    return m;
  }

  void note_model(const std::string& name, const Model& m) { models_[name] = hex(m.hash()); }
  void set_result(const std::string& key, json value) { results_[key] = std::move(value); }

  void write_manifest(const std::string& command) {
    std::vector<std::string> outputs;
    for (const auto& entry : fs::recursive_directory_iterator(out_dir()))
      if (entry.is_regular_file()) {
        const auto rel = fs::relative(entry.path(), out_dir()).generic_string();
        if (rel != "manifest.json") outputs.push_back(rel);
      }
    std::sort(outputs.begin(), outputs.end());
    json m;
    m["tool"] = "sponge";
    m["version"] = kToolVersion;
    m["command"] = command;
    m["config"] = experiment_config();
    m["models"] = models_;
    m["results"] = results_;
    m["outputs"] = outputs;
    std::ofstream(out_dir() / "manifest.json") << m.dump(2) << '\n';
  }

 private:
  json cfg_;
  std::ostream& log_;
  json models_ = json::object();
  json results_ = json::object();
};

void check_kind(const Key& k, const json& v) {
  if (v.is_null()) {
    if (!k.optional) throw ConfigError("missing required key '" + k.name + "'");
    return;
  }
  bool ok = false;
  switch (k.kind) {
    case Kind::kString: ok = v.is_string(); break;
    case Kind::kNumber: ok = v.is_number() && std::isfinite(v.get<double>()); break;
    case Kind::kInt: ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0); break;
    case Kind::kBool: ok = v.is_boolean(); break;
    case Kind::kList: ok = v.is_array(); break;
    case Kind::kDataset: ok = v.is_string() || v.is_object(); break;
  }
  if (!ok) {
    static const std::map<Kind, const char*> names = {
        {Kind::kString, "a string"}, {Kind::kNumber, "a finite number"},
        {Kind::kInt, "a nonnegative integer"}, {Kind::kBool, "true or false"},
        {Kind::kList, "a JSON list"}, {Kind::kDataset, "a path or a synthetic-dataset object"}};
    throw ConfigError("key '" + k.name + "' must be " + names.at(k.kind) + ", got " + v.dump());
  }
}

json parse_flag_value(const Key& k, const std::string& text) {
  if (k.kind == Kind::kString) return text;
  json v = json::parse(text, nullptr, false);
  if (v.is_discarded()) return text;  // bare words such as paths
  return v;
}

json load_config_file(const fs::path& path, const std::string& command) {
  const auto bytes = with_file(path, [&] { return read_file_bytes(path); });
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": malformed JSON: " + e.what(), e.byte > 0 ? e.byte - 1 : 0);
  }
  if (!j.is_object()) throw ConfigError(path.string() + ": config must be a JSON object");
  // A run manifest doubles as a config file.
  if (j.contains("command") && j.contains("config")) {
    if (j.at("command") != command)
      throw ConfigError(path.string() + ": manifest is for command '" +
                        j.at("command").get<std::string>() + "'");
    return j.at("config");
  }
  return j;
}

// --- datasets -------------------------------------------------------------------------

SynthConfig synth_config(const json& spec) {
  SynthConfig sc;
  for (const auto& [key, value] : spec.items()) {
    if (key == "n") {
      sc.n = value.get<std::size_t>();
    } else if (key == "seed") {
      sc.seed = value.get<std::uint64_t>();
    } else if (key == "noise_levels") {
      sc.noise_levels = value.get<std::vector<double>>();
    } else {
      throw ConfigError("unknown synthetic dataset key '" + key +
                        "' (valid: n, seed, noise_levels)");
    }
  }
  return sc;
}

std::vector<Tensor> load_images(const fs::path& path) {
  if (!fs::exists(path)) throw DataError(path.string() + ": no such file or directory");
  if (fs::is_directory(path)) {
    if (fs::is_directory(path / "images")) return load_images(path / "images");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      const auto ext = entry.path().extension();
      if (entry.is_regular_file() && (ext == ".ppm" || ext == ".sptn")) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError(path.string() + ": no .ppm or .sptn images");
    std::vector<Tensor> out;
    for (const auto& f : files) out.push_back(with_file(f, [&] { return read_image(f); }));
    return out;
  }
  Tensor t = with_file(path, [&] { return read_image(path); });
  if (t.rank() != 4) return {t};
  std::vector<Tensor> out;
  const Shape one{t.dim(1), t.dim(2), t.dim(3)};
  const std::size_t per = shape_size(one);
  for (std::size_t i = 0; i < t.dim(0); ++i)
    out.emplace_back(one, std::vector<double>(t.values().begin() + static_cast<std::ptrdiff_t>(i * per),
                                              t.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
  return out;
}

std::vector<Tensor> dataset_images(const json& spec) {
  if (spec.is_string()) return load_images(spec.get<std::string>());
  return synth_dataset(synth_config(spec)).images();
}

SynthDataset labeled_dataset(const json& spec) {
  if (!spec.is_object())
    throw ConfigError("this command needs labels, so 'dataset' must be a synthetic-dataset object");
  return synth_dataset(synth_config(spec));
}

std::ofstream open_csv(Context& ctx, const std::string& name) {
  std::ofstream f(ctx.output(name));
  f.precision(17);
  return f;
}

void write_header_comment(std::ostream& os, const Context& ctx) {
  os << "# config " << ctx.experiment_config().dump() << '\n';
}

// --- commands -----------------------------------------------------------------------

void cmd_build_calibrate(Context& ctx) {
  ArchSpec arch;
  const std::string arch_name = ctx.str("arch");
  if (arch_name == "desknet") {
    arch = ArchSpec::desknet(0);
  } else {
    const fs::path p(arch_name);
    const auto bytes = with_file(p, [&] { return read_file_bytes(p); });
    arch = with_file(p, [&] { return ArchSpec::from_json(std::string(bytes.begin(), bytes.end())); });
  }
  arch.seed = ctx.u64("seed");
  const std::string init = ctx.str("init");
  if (init == "trained_like") {
    arch.init = InitPrior::trained_like();
  } else if (init == "default") {
    arch.init = InitPrior{};
  } else {
    throw ConfigError("init must be 'default' or 'trained_like', got '" + init + "'");
  }
  Model m = build(arch);
  if (ctx.flag("calibrate")) {
    const auto data = dataset_images(ctx.raw("dataset"));
    CalibrationConfig cc{ctx.num("momentum"), ctx.count("passes")};
    m = calibrate(std::move(m), data, cc);
  }
  save_model(m, ctx.output("model.spmd"));
  ctx.note_model("model.spmd", m);
  ctx.log() << "wrote " << (ctx.out_dir() / "model.spmd").string() << " (hash " << hex(m.hash())
            << ")\n";
}

void cmd_attack(Context& ctx) {
  const Model m = ctx.load_model(ctx.str("model"));
  const std::string strategy = ctx.str("strategy");
  const std::size_t n = ctx.count("n");
  const std::uint64_t seed = ctx.u64("seed");
  const std::size_t threads = ctx.count("threads");
  const bool timing = ctx.flag("record_timing");
  const Shape shape = m.arch().input_shape;
  const DensityOracle oracle = make_density_oracle(m);
  if (n == 0) throw ConfigError("n must be >= 1");

  std::vector<SpongeResult> results;
  if (strategy == "uniform") {
    const double sigma = ctx.num("sigma");
    double mu = 0.0;
    if (ctx.has("mu")) {
      mu = ctx.num("mu");
    } else {
      const auto grid = ctx.raw("mu_grid").get<std::vector<double>>();
      const auto gs = grid_search_mu(oracle, shape, grid, sigma, ctx.count("grid_samples"),
                                     derive_seed(seed, 0x6772696475ULL), threads);
      mu = gs.best_mu;
      auto csv = open_csv(ctx, "grid.csv");
      csv << "mu,mean_density\n";
      for (const auto& row : gs.table) csv << row.mu << ',' << row.mean_density << '\n';
    }
    ctx.set_result("mu", mu);
    const auto start = std::chrono::steady_clock::now();
    auto images = uniform_sampling(mu, sigma, shape, n, seed);
    const double per = timing ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() /
                                    static_cast<double>(n)
                              : 0.0;
    const auto d = parallel_map(n, threads, [&](std::size_t i) { return oracle(images[i]); });
    for (std::size_t i = 0; i < n; ++i)
      results.push_back({std::move(images[i]), d[i], per, {}, "uniform", seed});
  } else if (strategy == "top-natural") {
    const auto data = dataset_images(ctx.raw("dataset"));
    results = top_natural(oracle, data, n, threads, timing);
  } else if (strategy == "ga") {
    GaConfig cfg;
    cfg.pool_size = ctx.count("ga.pool_size");
    cfg.iterations = ctx.count("ga.iterations");
    cfg.mutation_std = ctx.num("ga.mutation_std");
    cfg.elite_fraction = ctx.num("ga.elite_fraction");
    cfg.threads = threads;
    cfg.record_timing = timing;
    cfg.validate();
    for (std::size_t i = 0; i < n; ++i) {
      cfg.seed = derive_seed(seed, i);
      results.push_back(sponge_ga(oracle, shape, cfg));
      ctx.log() << "ga " << i + 1 << "/" << n << " density " << results.back().density << '\n';
    }
  } else if (strategy == "lbfgs") {
    LbfgsConfig cfg;
    cfg.steps = ctx.count("lbfgs.steps");
    cfg.history = ctx.count("lbfgs.history");
    cfg.initial_step = ctx.num("lbfgs.initial_step");
    cfg.record_timing = timing;
    cfg.validate();
    results = parallel_map(n, threads, [&](std::size_t i) {
      LbfgsConfig c = cfg;
      c.seed = derive_seed(seed, i);
      try {
        return sponge_lbfgs(m, c);
      } catch (const NonFiniteObjective& e) {
        fs::create_directories(ctx.out_dir() / "images");
        write_sptn(ctx.out_dir() / "images" / ("nonfinite_" + std::to_string(i) + ".sptn"),
                   e.iterate());
        throw;
      }
    });
  } else {
    throw ConfigError("strategy must be one of uniform, top-natural, ga, lbfgs; got '" + strategy +
                      "'");
  }

  auto summary = open_csv(ctx, "summary.csv");
  summary << "index,strategy,seed,density,wall_time_s\n";
  double total_time = 0.0, total_density = 0.0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "sponge_%04zu", i);
    fs::create_directories(ctx.out_dir() / "images");
    write_sponge_result(ctx.out_dir() / "images", stem, results[i]);
    summary << i << ',' << results[i].strategy << ',' << results[i].seed << ',' << results[i].density
            << ',' << results[i].wall_time_s << '\n';
    total_time += results[i].wall_time_s;
    total_density += results[i].density;
  }
  const double count = static_cast<double>(results.size());
  ctx.set_result("mean_density", total_density / count);
  ctx.set_result("mean_wall_time_s", total_time / count);
  ctx.log() << strategy << ": " << results.size() << " sponges, mean density "
            << total_density / count << '\n';
}

std::vector<std::size_t> selected_sites(const Context& ctx, std::size_t available) {
  const std::size_t k = ctx.count("sites");
  const std::size_t n = k == 0 ? available : std::min(k, available);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i;
  return out;
}

void cmd_analyze(Context& ctx) {
  const Model m = ctx.load_model(ctx.str("model"));
  const std::string what = ctx.str("what");
  const std::size_t threads = ctx.count("threads");

  if (what == "thresholds") {
    const std::size_t k = ctx.count("sites");
    const auto table = threshold_table(m, k == 0 ? std::nullopt : std::optional<std::size_t>(k));
    auto csv = open_csv(ctx, "thresholds.csv");
    write_thresholds_csv(csv, table);
    ctx.set_result("rows", table.size());
    ctx.log() << "thresholds: " << table.size() << " rows\n";
    return;
  }
  if (what != "gains" && what != "channel-stats" && what != "density")
    throw ConfigError("what must be one of thresholds, gains, channel-stats, density; got '" + what +
                      "'");

  const auto images = dataset_images(ctx.raw("inputs"));
  const bool snapshots = what == "channel-stats";
  const auto records = parallel_map(images.size(), threads, [&](std::size_t i) {
    ProbeOptions opts{snapshots};
    return *forward(m, images[i], &opts).record;
  });
  const auto sites = selected_sites(ctx, m.bn_sites().size());

  if (what == "density") {
    auto csv = open_csv(ctx, "densities.csv");
    csv << "image,density,total_macs,skipped_macs,skipped_fraction\n";
    double sum = 0.0;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const double d = post_relu_density(records[i]);
      const auto cost = cost_model(records[i], m);
      csv << i << ',' << d << ',' << cost.total_macs << ',' << cost.skipped_macs << ','
          << cost.skipped_fraction << '\n';
      sum += d;
    }
    ctx.set_result("mean_density", sum / static_cast<double>(records.size()));
  } else if (what == "gains") {
    auto csv = open_csv(ctx, "gains.csv");
    csv << "image,site,channel,pre_positive,post_positive,gain\n";
    for (std::size_t i = 0; i < records.size(); ++i)
      for (std::size_t s : sites) {
        const auto g = density_gain(records[i], s);
        for (std::size_t c = 0; c < g.size(); ++c)
          csv << i << ',' << s << ',' << c << ',' << records[i].bn[s].pre_positive[c] << ','
              << records[i].bn[s].post_positive[c] << ',' << g[c] << '\n';
      }
  } else {
    auto csv = open_csv(ctx, "channel_stats.csv");
    csv << "image,site,channel,mean,std\n";
    for (std::size_t i = 0; i < records.size(); ++i)
      for (std::size_t s : sites) {
        const auto st = channel_stats(records[i], s);
        for (std::size_t c = 0; c < st.size(); ++c)
          csv << i << ',' << s << ',' << c << ',' << st[c].mean << ',' << st[c].std << '\n';
      }
  }
  ctx.log() << what << ": " << images.size() << " images\n";
}

void cmd_transfer(Context& ctx) {
  const auto model_paths = ctx.raw("models").get<std::vector<std::string>>();
  const auto sponge_paths = ctx.raw("sponges").get<std::vector<std::string>>();
  if (model_paths.empty()) throw ConfigError("models must list at least one model file");
  if (sponge_paths.size() > model_paths.size())
    throw ConfigError("sponges must not outnumber models (sponge set i is crafted on model i)");
  std::vector<Model> models;
  for (const auto& p : model_paths) models.push_back(ctx.load_model(p));
  std::vector<std::vector<Tensor>> sets;
  for (const auto& p : sponge_paths) sets.push_back(load_images(p));
  const auto natural = dataset_images(ctx.raw("dataset"));
  const std::size_t threads = ctx.count("threads");

  std::vector<std::vector<double>> d(models.size());
  std::vector<double> baselines;
  for (std::size_t t = 0; t < models.size(); ++t) {
    d[t] = parallel_map(natural.size(), threads,
                        [&](std::size_t i) { return query_density(models[t], natural[i]); });
    double sum = 0.0;
    for (double v : d[t]) sum += v;
    baselines.push_back(sum / static_cast<double>(natural.size()));
  }
  const auto tm = transfer_matrix(models, sets, baselines, threads);

  auto csv = open_csv(ctx, "transfer.csv");
  csv << "source,target,mean_density,baseline,percent_increase\n";
  json entries = json::array();
  for (std::size_t s = 0; s < tm.percent.size(); ++s)
    for (std::size_t t = 0; t < models.size(); ++t) {
      csv << s << ',' << t << ',' << tm.mean_density[s][t] << ',' << baselines[t] << ','
          << tm.percent[s][t] << '\n';
      entries.push_back({{"source", s}, {"target", t}, {"percent_increase", tm.percent[s][t]}});
    }
  ctx.set_result("transfer", entries);

  auto taus = open_csv(ctx, "natural_tau.csv");
  taus << "model_a,model_b,tau\n";
  for (std::size_t a = 0; a < models.size(); ++a)
    for (std::size_t b = a + 1; b < models.size(); ++b) {
      const double tau = kendall_tau(d[a], d[b]);
      taus << a << ',' << b << ',' << tau << '\n';
      ctx.set_result("tau_" + std::to_string(a) + "_" + std::to_string(b), tau);
    }
  auto per = open_csv(ctx, "natural_densities.csv");
  per << "image";
  for (std::size_t t = 0; t < models.size(); ++t) per << ",model_" << t;
  per << '\n';
  for (std::size_t i = 0; i < natural.size(); ++i) {
    per << i;
    for (std::size_t t = 0; t < models.size(); ++t) per << ',' << d[t][i];
    per << '\n';
  }
}

UniformityConfig uniformity_config(const Context& ctx) {
  return {ctx.count("window"), ctx.count("stride")};
}

void cmd_study(Context& ctx) {
  const Model m = ctx.load_model(ctx.str("model"));
  const auto images = dataset_images(ctx.raw("dataset"));
  const auto s = density_uniformity_study(m, images, uniformity_config(ctx), ctx.count("threads"));
  auto csv = open_csv(ctx, "study.csv");
  write_header_comment(csv, ctx);
  csv << "# model_hash " << hex(m.hash()) << '\n';
  csv << "# kendall_tau " << s.tau << '\n';
  write_study_csv(csv, s);
  ctx.set_result("kendall_tau", s.tau);
  ctx.log() << "study: " << s.rows.size() << " images, tau " << s.tau << '\n';
}

// Parses "uniformity<0.1".
double parse_filter(const std::string& text) {
  const std::string prefix = "uniformity<";
  if (text.rfind(prefix, 0) != 0)
    throw ConfigError("filter must look like 'uniformity<0.1', got '" + text + "'");
  try {
    std::size_t used = 0;
    const double v = std::stod(text.substr(prefix.size()), &used);
    if (used != text.size() - prefix.size() || !std::isfinite(v)) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("filter threshold in '" + text + "' is not a number");
  }
}

void cmd_finetune(Context& ctx) {
  const Model m = ctx.load_model(ctx.str("model"));
  const auto data = labeled_dataset(ctx.raw("dataset"));
  const double limit = parse_filter(ctx.str("filter"));
  const double val_fraction = ctx.num("val_fraction");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in (0, 1)");
  const auto ucfg = uniformity_config(ctx);

  std::vector<std::size_t> uniform_idx;
  for (std::size_t i = 0; i < data.items.size(); ++i)
    if (uniformity(data.items[i].image, ucfg) < limit) uniform_idx.push_back(i);
  const std::size_t held =
      static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(uniform_idx.size())));
  if (uniform_idx.size() < 2 || held == 0 || held >= uniform_idx.size())
    throw DataError("filter '" + ctx.str("filter") + "' keeps " + std::to_string(uniform_idx.size()) +
                    " images, too few to split");
  const std::vector<std::size_t> train_idx(uniform_idx.begin(), uniform_idx.end() - static_cast<std::ptrdiff_t>(held));
  const std::vector<std::size_t> val_idx(uniform_idx.end() - static_cast<std::ptrdiff_t>(held), uniform_idx.end());

  auto gather = [&](const std::vector<std::size_t>& idx) {
    std::vector<LabeledImage> out;
    for (std::size_t i : idx) out.push_back(data.items[i]);
    return out;
  };
  const auto train = gather(train_idx);
  const auto val = gather(val_idx);
  const std::size_t threads = ctx.count("threads");
  auto sparsity = [&](const Model& model) {
    const auto d = parallel_map(val.size(), threads,
                                [&](std::size_t i) { return query_density(model, val[i].image); });
    double sum = 0.0;
    for (double v : d) sum += 1.0 - v;
    return sum / static_cast<double>(d.size());
  };

  FineTuneConfig fc;
  fc.lr = ctx.num("lr");
  fc.steps = ctx.count("steps");
  fc.freeze_bn_stats = ctx.flag("freeze_bn_stats");
  fc.bn_momentum = ctx.num("bn_momentum");

  const double before = sparsity(m);
  json report;
  report["filter"] = ctx.str("filter");
  report["held_out"] = val.size();
  report["sparsity_before"] = before;
  auto csv = open_csv(ctx, "report.csv");
  csv << "split,n_train,sparsity_before,sparsity_after,delta\n";

  const auto tuned = fine_tune(m, train, fc);
  save_model(tuned.model, ctx.output("model.spmd"));
  ctx.note_model("model.spmd", tuned.model);
  const double after = sparsity(tuned.model);
  report["uniform"] = {{"n_train", train.size()}, {"sparsity_after", after}, {"delta", after - before}};
  csv << "uniform," << train.size() << ',' << before << ',' << after << ',' << after - before << '\n';
  ctx.log() << "uniform split: sparsity " << before << " -> " << after << '\n';

  if (ctx.flag("compare_random")) {
    // Same budget, drawn from everything outside the held-out images.
    std::vector<std::size_t> rest;
    std::size_t v = 0;
    for (std::size_t i = 0; i < data.items.size(); ++i) {
      if (v < val_idx.size() && val_idx[v] == i) {
        ++v;
        continue;
      }
      rest.push_back(i);
    }
    Rng rng(ctx.u64("seed"));
    for (std::size_t i = rest.size(); i > 1; --i) std::swap(rest[i - 1], rest[rng.below(i)]);
    rest.resize(train.size());
    const auto random_tuned = fine_tune(m, gather(rest), fc);
    save_model(random_tuned.model, ctx.output("model_random.spmd"));
    ctx.note_model("model_random.spmd", random_tuned.model);
    const double r_after = sparsity(random_tuned.model);
    report["random"] = {{"n_train", rest.size()}, {"sparsity_after", r_after}, {"delta", r_after - before}};
    csv << "random," << rest.size() << ',' << before << ',' << r_after << ',' << r_after - before << '\n';
    ctx.log() << "random split: sparsity " << before << " -> " << r_after << '\n';
  }
  std::ofstream(ctx.output("report.json")) << report.dump(2) << '\n';
  ctx.set_result("report", report);
}

// --- command table -------------------------------------------------------------------

struct Command {
  std::string name;
  std::string help;
  std::vector<Key> keys;
  std::function<void(Context&)> run;
};

json synth(std::size_t n, std::uint64_t seed) { return {{"n", n}, {"seed", seed}}; }

std::vector<Command> commands() {
  const Key out{"out", Kind::kString, "out", "output directory"};
  const Key threads{"threads", Kind::kInt, 1, "worker threads (0 = all cores)"};
  const Key model{"model", Kind::kString, nullptr, "model file (.spmd)"};
  std::vector<double> grid;
  for (int i = 0; i <= 10; ++i) grid.push_back(i / 10.0);
  return {
      {"build-calibrate",
       "build a model and calibrate its batch-norm statistics",
       {{"arch", Kind::kString, "desknet", "'desknet' or an architecture JSON file"},
        {"seed", Kind::kInt, 1, "weight seed"},
        {"init", Kind::kString, "trained_like", "parameter prior: default | trained_like"},
        {"calibrate", Kind::kBool, true, "run calibration after building"},
        {"dataset", Kind::kDataset, synth(200, 1000), "calibration images"},
        {"momentum", Kind::kNumber, 0.1, "EMA momentum in (0, 1]"},
        {"passes", Kind::kInt, 1, "passes over the calibration set"},
        out},
       cmd_build_calibrate},
      {"attack",
       "generate sponge examples",
       {model,
        {"strategy", Kind::kString, "uniform", "uniform | top-natural | ga | lbfgs"},
        {"n", Kind::kInt, 100, "number of sponge examples"},
        {"seed", Kind::kInt, 7, "run seed"},
        threads,
        {"sigma", Kind::kNumber, 2.0 / 255.0, "uniform: pixel std"},
        {"mu", Kind::kNumber, nullptr, "uniform: pixel mean (grid-searched when absent)", true},
        {"mu_grid", Kind::kList, grid, "uniform: candidate means"},
        {"grid_samples", Kind::kInt, 10, "uniform: images per grid point"},
        {"dataset", Kind::kDataset, synth(300, 1), "top-natural: candidate images"},
        {"ga.pool_size", Kind::kInt, 32, "ga: pool size (>= 2)"},
        {"ga.iterations", Kind::kInt, 100, "ga: generations"},
        {"ga.mutation_std", Kind::kNumber, 4.0 / 255.0, "ga: mutation std (> 0)"},
        {"ga.elite_fraction", Kind::kNumber, 0.25, "ga: elite fraction in (0, 1)"},
        {"lbfgs.steps", Kind::kInt, 50, "lbfgs: iterations"},
        {"lbfgs.history", Kind::kInt, 10, "lbfgs: history size (>= 1)"},
        {"lbfgs.initial_step", Kind::kNumber, 0.05, "lbfgs: first step's largest pixel change"},
        {"record_timing", Kind::kBool, true, "record wall times (false writes zeros)"},
        out},
       cmd_attack},
      {"analyze",
       "probe a model: thresholds, gains, channel-stats or density",
       {model,
        {"what", Kind::kString, "thresholds", "thresholds | gains | channel-stats | density"},
        {"inputs", Kind::kDataset, synth(100, 1), "images to probe"},
        {"sites", Kind::kInt, 0, "first N batch-norm sites (0 = all)"},
        threads,
        out},
       cmd_analyze},
      {"transfer",
       "percent density increase of sponge sets across models",
       {{"models", Kind::kList, nullptr, "model files"},
        {"sponges", Kind::kList, nullptr, "attack output directories, set i crafted on model i"},
        {"dataset", Kind::kDataset, synth(300, 1), "natural images for the baselines"},
        threads,
        out},
       cmd_transfer},
      {"study",
       "density versus uniformity over a dataset",
       {model,
        {"dataset", Kind::kDataset, synth(300, 1), "images"},
        {"window", Kind::kInt, 8, "uniformity window side"},
        {"stride", Kind::kInt, 4, "uniformity window stride"},
        threads,
        out},
       cmd_study},
      {"finetune",
       "fine-tune on a uniformity-filtered split and report held-out sparsity",
       {model,
        {"dataset", Kind::kDataset, synth(1200, 2), "labeled synthetic dataset"},
        {"filter", Kind::kString, "uniformity<0.1", "training filter"},
        {"window", Kind::kInt, 8, "uniformity window side"},
        {"stride", Kind::kInt, 4, "uniformity window stride"},
        {"val_fraction", Kind::kNumber, 0.25, "held-out share of the filtered split"},
        {"lr", Kind::kNumber, 1e-3, "SGD learning rate (>= 0)"},
        {"steps", Kind::kInt, 200, "SGD steps (>= 1)"},
        {"freeze_bn_stats", Kind::kBool, false, "keep running statistics fixed"},
        {"bn_momentum", Kind::kNumber, 0.1, "running-statistics momentum while tuning"},
        {"compare_random", Kind::kBool, true, "also tune on a random split of the same size"},
        {"seed", Kind::kInt, 0, "seed for the random split"},
        threads,
        out},
       cmd_finetune},
  };
}

int report_error(std::ostream& err, const Error& e) {
  err << "error: " << e.what();
  if (e.kind() == ErrorKind::kFormat) {
    const auto off = static_cast<const FormatError&>(e).offset();
    if (off != FormatError::npos) err << " (byte offset " << off << ")";
  }
  err << '\n';
  switch (e.kind()) {
    case ErrorKind::kConfig:
    case ErrorKind::kSpec: return kUsage;
    case ErrorKind::kNumeric: return kNumeric;
    default: return kData;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"sponge: sponge-example attacks and activation-sparsity analysis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  const auto table = commands();
  struct Bound {
    std::string config_path;
    std::map<std::string, std::string> flags;
  };
  std::vector<Bound> bound(table.size());
  std::vector<CLI::App*> subs;
  for (std::size_t c = 0; c < table.size(); ++c) {
    CLI::App* sub = app.add_subcommand(table[c].name, table[c].help);
    sub->add_option("--config", bound[c].config_path, "JSON config file or a previous manifest");
    for (const auto& k : table[c].keys) {
      std::string help = k.help;
      if (!k.def.is_null()) help += " [default " + k.def.dump() + "]";
      sub->add_option_function<std::string>(
          "--" + k.name, [&b = bound[c], name = k.name](const std::string& v) { b.flags[name] = v; },
          help);
    }
    subs.push_back(sub);
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    const int code = app.exit(e, o, er);
    out << o.str();
    err << er.str();
    return code == 0 ? kOk : kUsage;
  }

  std::size_t which = 0;
  while (!subs[which]->parsed()) ++which;
  const Command& cmd = table[which];

  try {
    json file_cfg = json::object();
    if (!bound[which].config_path.empty())
      file_cfg = load_config_file(bound[which].config_path, cmd.name);
    for (const auto& [key, value] : file_cfg.items()) {
      const bool known = std::any_of(cmd.keys.begin(), cmd.keys.end(),
                                     [&](const Key& k) { return k.name == key; });
      if (!known) throw ConfigError("unknown key '" + key + "' for command " + cmd.name);
    }
    json cfg;
    for (const auto& k : cmd.keys) {
      json v = k.def;
      if (file_cfg.contains(k.name)) v = file_cfg.at(k.name);
      if (auto it = bound[which].flags.find(k.name); it != bound[which].flags.end())
        v = parse_flag_value(k, it->second);
      check_kind(k, v);
      cfg[k.name] = v;
    }
    Context ctx(cfg, out);
    fs::create_directories(ctx.out_dir());
    cmd.run(ctx);
    ctx.write_manifest(cmd.name);
    return kOk;
  } catch (const Error& e) {
    return report_error(err, e);
  } catch (const json::exception& e) {
    err << "error: bad configuration value: " << e.what() << '\n';
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  }
}

}  // namespace sponge::cli

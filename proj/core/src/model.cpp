#include "sponge/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

#include <nlohmann/json.hpp>

#include "sponge/error.hpp"
#include "sponge/ops.hpp"
#include "sponge/random.hpp"
#include "sponge/tensor_io.hpp"

namespace sponge {

namespace {

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

using nlohmann::json;

const char* pool_name(PoolKind k) {
  switch (k) {
    case PoolKind::kMax: return "max";
    case PoolKind::kAvg: return "avg";
    case PoolKind::kGlobalAvg: return "global_avg";
  }
  return "?";
}

PoolKind pool_from_name(const std::string& s) {
  if (s == "max") return PoolKind::kMax;
  if (s == "avg") return PoolKind::kAvg;
  if (s == "global_avg") return PoolKind::kGlobalAvg;
  throw SpecError("unknown pool kind '" + s + "'");
}

bool has_skip_conv(const ResidualBlock& r, std::size_t in_channels) {
  return r.stride != 1 || r.out_channels != in_channels;
}

}  // namespace

// --- ArchSpec -------------------------------------------------------------------

ArchSpec ArchSpec::desknet(std::uint64_t seed, InitPrior init) {
  ArchSpec a;
  a.input_shape = {3, 32, 32};
  a.seed = seed;
  a.init = init;
  a.blocks = {
      CnrBlock{16, 3, 1, 1},
      ResidualBlock{16, 1},
      PoolBlock{PoolKind::kMax, 2, 2},
      CnrBlock{32, 3, 1, 1},
      ResidualBlock{32, 1},
      PoolBlock{PoolKind::kGlobalAvg, 0, 0},
      ClassifierBlock{10},
  };
  return a;
}

std::vector<Shape> ArchSpec::block_shapes() const {
  if (input_shape.size() != 3 || shape_size(input_shape) == 0)
    throw SpecError("input shape must be C x H x W with positive extents");
  std::vector<Shape> shapes;
  Shape cur = input_shape;
  bool done = false;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string where = "block " + std::to_string(b) + ": ";
    if (done) throw SpecError(where + "nothing may follow the classifier");
    auto need_map = [&] {
      if (cur.size() != 3) throw SpecError(where + "expects a C x H x W feature map");
    };
    try {
      std::visit(Overloaded{
                     [&](const CnrBlock& c) {
                       need_map();
                       if (c.out_channels == 0 || c.kernel == 0 || c.stride == 0)
                         throw SpecError(where + "CNR needs positive channels, kernel, stride");
                       cur = {c.out_channels, ops::output_extent(cur[1], c.kernel, c.stride, c.padding),
                              ops::output_extent(cur[2], c.kernel, c.stride, c.padding)};
                     },
                     [&](const ResidualBlock& r) {
                       need_map();
                       if (r.out_channels == 0 || r.stride == 0)
                         throw SpecError(where + "residual block needs positive channels and stride");
                       cur = {r.out_channels, ops::output_extent(cur[1], 3, r.stride, 1),
                              ops::output_extent(cur[2], 3, r.stride, 1)};
                     },
                     [&](const PoolBlock& p) {
                       need_map();
                       if (p.kind == PoolKind::kGlobalAvg) {
                         cur = {cur[0]};
                       } else {
                         if (p.window == 0 || p.stride == 0)
                           throw SpecError(where + "pool needs positive window and stride");
                         cur = {cur[0], ops::output_extent(cur[1], p.window, p.stride, 0),
                                ops::output_extent(cur[2], p.window, p.stride, 0)};
                       }
                     },
                     [&](const ClassifierBlock& c) {
                       if (c.num_classes == 0) throw SpecError(where + "classifier needs classes");
                       cur = {c.num_classes};
                       done = true;
                     },
                 },
                 blocks[b]);
    } catch (const ShapeError& e) {
      throw SpecError(where + e.what());
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void ArchSpec::validate() const {
  (void)block_shapes();
  const bool has_cnr = std::any_of(blocks.begin(), blocks.end(), [](const Block& b) {
    return std::holds_alternative<CnrBlock>(b) || std::holds_alternative<ResidualBlock>(b);
  });
  if (!has_cnr) throw SpecError("architecture needs at least one CNR sequence");
  if (!(init.beta_std >= 0.0) || !std::isfinite(init.beta_mean))
    throw SpecError("init prior needs finite beta_mean and beta_std >= 0");
}

std::string ArchSpec::to_json() const {
  json j;
  j["input"] = input_shape;
  j["seed"] = seed;
  j["init"] = {{"beta_mean", init.beta_mean},
               {"beta_std", init.beta_std},
               {"zero_mean_kernels", init.zero_mean_kernels}};
  json blocks_json = json::array();
  for (const auto& b : blocks) {
    std::visit(Overloaded{
                   [&](const CnrBlock& c) {
                     blocks_json.push_back({{"type", "cnr"},
                                            {"out_channels", c.out_channels},
                                            {"kernel", c.kernel},
                                            {"stride", c.stride},
                                            {"padding", c.padding}});
                   },
                   [&](const ResidualBlock& r) {
                     blocks_json.push_back(
                         {{"type", "residual"}, {"out_channels", r.out_channels}, {"stride", r.stride}});
                   },
                   [&](const PoolBlock& p) {
                     blocks_json.push_back({{"type", "pool"},
                                            {"kind", pool_name(p.kind)},
                                            {"window", p.window},
                                            {"stride", p.stride}});
                   },
                   [&](const ClassifierBlock& c) {
                     blocks_json.push_back({{"type", "classifier"}, {"num_classes", c.num_classes}});
                   },
               },
               b);
  }
  j["blocks"] = blocks_json;
  return j.dump();
}

ArchSpec ArchSpec::from_json(std::string_view text) {
  ArchSpec a;
  try {
    const json j = json::parse(text);
    a.input_shape = j.at("input").get<Shape>();
    a.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("init")) {
      const auto& ij = j.at("init");
      a.init.beta_mean = ij.value("beta_mean", 0.0);
      a.init.beta_std = ij.value("beta_std", 0.0);
      a.init.zero_mean_kernels = ij.value("zero_mean_kernels", false);
    }
    for (const auto& bj : j.at("blocks")) {
      const auto type = bj.at("type").get<std::string>();
      if (type == "cnr") {
        a.blocks.push_back(CnrBlock{bj.at("out_channels").get<std::size_t>(),
                                    bj.value("kernel", std::size_t{3}),
                                    bj.value("stride", std::size_t{1}),
                                    bj.value("padding", std::size_t{1})});
      } else if (type == "residual") {
        a.blocks.push_back(ResidualBlock{bj.at("out_channels").get<std::size_t>(),
                                         bj.value("stride", std::size_t{1})});
      } else if (type == "pool") {
        const PoolKind kind = pool_from_name(bj.at("kind").get<std::string>());
        // Global pooling has no window; its fields default to 0 so a spec
        // written without them compares equal to ArchSpec::desknet's.
        const std::size_t dflt = kind == PoolKind::kGlobalAvg ? 0 : 2;
        a.blocks.push_back(PoolBlock{kind, bj.value("window", dflt), bj.value("stride", dflt)});
      } else if (type == "classifier") {
        a.blocks.push_back(ClassifierBlock{bj.at("num_classes").get<std::size_t>()});
      } else {
        throw SpecError("unknown block type '" + type + "'");
      }
    }
  } catch (const json::exception& e) {
    throw SpecError(std::string("malformed architecture JSON: ") + e.what());
  }
  return a;
}

// --- Model ------------------------------------------------------------------------

Model::Model(ArchSpec arch, std::vector<BlockWeights> blocks, bool calibrated)
    : arch_(std::move(arch)), blocks_(std::move(blocks)), calibrated_(calibrated) {
  if (arch_.blocks.size() != blocks_.size())
    throw SpecError("weights do not match the architecture's block count");
}

std::size_t Model::num_classes() const {
  for (const auto& b : arch_.blocks)
    if (const auto* c = std::get_if<ClassifierBlock>(&b)) return c->num_classes;
  return 0;
}

std::vector<BnSiteInfo> Model::bn_sites() const {
  std::vector<BnSiteInfo> sites;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    if (const auto* c = std::get_if<CnrWeights>(&blocks_[b])) {
      sites.push_back({b, "cnr", c->conv.bn.channels()});
    } else if (const auto* r = std::get_if<ResidualWeights>(&blocks_[b])) {
      sites.push_back({b, "res.a", r->first.bn.channels()});
      sites.push_back({b, "res.b", r->second.bn.channels()});
      if (r->shortcut) sites.push_back({b, "res.skip", r->shortcut->bn.channels()});
    }
  }
  return sites;
}

std::size_t Model::relu_site_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) {
    if (std::holds_alternative<CnrWeights>(b)) n += 1;
    if (std::holds_alternative<ResidualWeights>(b)) n += 2;
  }
  return n;
}

std::vector<const BnParams*> Model::bn_params() const {
  std::vector<const BnParams*> out;
  for (const auto& b : blocks_) {
    if (const auto* c = std::get_if<CnrWeights>(&b)) {
      out.push_back(&c->conv.bn);
    } else if (const auto* r = std::get_if<ResidualWeights>(&b)) {
      out.push_back(&r->first.bn);
      out.push_back(&r->second.bn);
      if (r->shortcut) out.push_back(&r->shortcut->bn);
    }
  }
  return out;
}

std::vector<BnParams*> Model::mutable_bn_params() {
  std::vector<BnParams*> out;
  for (auto& b : blocks_) {
    if (auto* c = std::get_if<CnrWeights>(&b)) {
      out.push_back(&c->conv.bn);
    } else if (auto* r = std::get_if<ResidualWeights>(&b)) {
      out.push_back(&r->first.bn);
      out.push_back(&r->second.bn);
      if (r->shortcut) out.push_back(&r->shortcut->bn);
    }
  }
  return out;
}

std::vector<std::span<double>> Model::trainable() {
  std::vector<std::span<double>> out;
  auto add_conv = [&](ConvBn& cb) {
    out.push_back(cb.weight.data());
    out.push_back(cb.bn.gamma);
    out.push_back(cb.bn.beta);
  };
  for (auto& b : blocks_) {
    std::visit(Overloaded{
                   [&](CnrWeights& c) { add_conv(c.conv); },
                   [&](ResidualWeights& r) {
                     add_conv(r.first);
                     add_conv(r.second);
                     if (r.shortcut) add_conv(*r.shortcut);
                   },
                   [&](PoolWeights&) {},
                   [&](ClassifierWeights& c) {
                     out.push_back(c.weight.data());
                     out.push_back(c.bias.data());
                   },
               },
               b);
  }
  return out;
}

Model Model::with_bn_params(const std::vector<BnParams>& params) const {
  Model m = *this;
  auto sites = m.mutable_bn_params();
  if (params.size() != sites.size())
    throw ShapeError("expected " + std::to_string(sites.size()) + " batch-norm sites, got " +
                     std::to_string(params.size()));
  for (std::size_t k = 0; k < sites.size(); ++k) {
    params[k].validate();
    if (params[k].channels() != sites[k]->channels())
      throw ShapeError("batch-norm site " + std::to_string(k) + " channel mismatch");
    *sites[k] = params[k];
  }
  m.calibrated_ = true;
  return m;
}

std::uint64_t Model::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t byte : encode_model(*this)) {
    h ^= byte;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// --- build --------------------------------------------------------------------------

namespace {

ConvBn make_conv_bn(Rng& rng, const InitPrior& init, std::size_t out, std::size_t in,
                    std::size_t k, ops::ConvGeometry geom) {
  ConvBn cb;
  cb.geom = geom;
  cb.weight = Tensor({out, in, k, k});
  const double fan_in = static_cast<double>(in * k * k);
  const double std = std::sqrt(2.0 / fan_in);
  auto w = cb.weight.data();
  for (double& v : w) v = rng.normal(0.0, std);
  if (init.zero_mean_kernels && in * k * k > 1) {
    const std::size_t per = in * k * k;
    for (std::size_t o = 0; o < out; ++o) {
      double mean = 0.0;
      for (std::size_t t = 0; t < per; ++t) mean += w[o * per + t];
      mean /= static_cast<double>(per);
      for (std::size_t t = 0; t < per; ++t) w[o * per + t] -= mean;
    }
  }
  cb.bn = BnParams::identity(out);
  if (init.beta_std > 0.0 || init.beta_mean != 0.0)
    for (double& b : cb.bn.beta) b = rng.normal(init.beta_mean, init.beta_std);
  return cb;
}

}  // namespace

Model build(const ArchSpec& arch) {
  arch.validate();
  Rng rng(arch.seed);
  std::vector<BlockWeights> weights;
  Shape cur = arch.input_shape;
  const auto shapes = arch.block_shapes();
  for (std::size_t b = 0; b < arch.blocks.size(); ++b) {
    std::visit(Overloaded{
                   [&](const CnrBlock& c) {
                     weights.push_back(CnrWeights{make_conv_bn(rng, arch.init, c.out_channels, cur[0],
                                                               c.kernel, {c.stride, c.padding})});
                   },
                   [&](const ResidualBlock& r) {
                     ResidualWeights rw;
                     rw.first = make_conv_bn(rng, arch.init, r.out_channels, cur[0], 3, {r.stride, 1});
                     rw.second = make_conv_bn(rng, arch.init, r.out_channels, r.out_channels, 3, {1, 1});
                     if (has_skip_conv(r, cur[0]))
                       rw.shortcut = make_conv_bn(rng, arch.init, r.out_channels, cur[0], 1, {r.stride, 0});
                     weights.push_back(std::move(rw));
                   },
                   [&](const PoolBlock&) { weights.push_back(PoolWeights{}); },
                   [&](const ClassifierBlock& c) {
                     const std::size_t in = shape_size(cur);
                     ClassifierWeights cw{Tensor({c.num_classes, in}), Tensor({c.num_classes})};
                     const double std = std::sqrt(1.0 / static_cast<double>(in));
                     for (double& v : cw.weight.data()) v = rng.normal(0.0, std);
                     weights.push_back(std::move(cw));
                   },
               },
               arch.blocks[b]);
    cur = shapes[b];
  }
  return Model(arch, std::move(weights), false);
}

// --- forward machinery ----------------------------------------------------------------

namespace {

// Walks the block graph once; `Ctx` decides what a value is (tensor or tape
// node) and what happens at each primitive.
template <class Ctx>
typename Ctx::Value run_blocks(const Model& m, Ctx& ctx, typename Ctx::Value x) {
  const auto& arch = m.arch();
  for (std::size_t b = 0; b < m.blocks().size(); ++b) {
    std::visit(Overloaded{
                   [&](const CnrWeights& w) { x = ctx.relu(ctx.bn(ctx.conv(x, w.conv), w.conv)); },
                   [&](const ResidualWeights& w) {
                     auto a = ctx.relu(ctx.bn(ctx.conv(x, w.first), w.first));
                     auto main = ctx.bn(ctx.conv(a, w.second), w.second);
                     auto skip = w.shortcut ? ctx.bn(ctx.conv(x, *w.shortcut), *w.shortcut) : x;
                     x = ctx.relu(ctx.add(main, skip));
                   },
                   [&](const PoolWeights&) { x = ctx.pool(x, std::get<PoolBlock>(arch.blocks[b])); },
                   [&](const ClassifierWeights& w) { x = ctx.linear(x, w); },
               },
               m.blocks()[b]);
  }
  return x;
}

Tensor apply_pool(const Tensor& x, const PoolBlock& p) {
  switch (p.kind) {
    case PoolKind::kMax: return ops::maxpool2d(x, p.window, p.stride);
    case PoolKind::kAvg: return ops::avgpool2d(x, p.window, p.stride);
    case PoolKind::kGlobalAvg: return ops::global_avg_pool(x);
  }
  throw SpecError("unknown pool kind");
}

// Number of (output position, kernel tap) pairs that read input coordinate i.
std::vector<std::uint64_t> tap_coverage(std::size_t in, std::size_t k, ops::ConvGeometry g) {
  const std::size_t out = ops::output_extent(in, k, g.stride, g.padding);
  std::vector<std::uint64_t> cov(in, 0);
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t t = 0; t < k; ++t) {
      const long long pos = static_cast<long long>(o * g.stride + t) - static_cast<long long>(g.padding);
      if (pos >= 0 && pos < static_cast<long long>(in)) ++cov[static_cast<std::size_t>(pos)];
    }
  return cov;
}

MacRecord conv_macs(const Tensor& x, const ConvBn& cb, std::string name) {
  const std::size_t O = cb.weight.dim(0), K = cb.weight.dim(2);
  const auto cy = tap_coverage(x.height(), K, cb.geom);
  const auto cx = tap_coverage(x.width(), cb.weight.dim(3), cb.geom);
  std::uint64_t all = 0, zero = 0;
  for (std::size_t c = 0; c < x.channels(); ++c)
    for (std::size_t y = 0; y < x.height(); ++y)
      for (std::size_t xx = 0; xx < x.width(); ++xx) {
        const std::uint64_t n = cy[y] * cx[xx];
        all += n;
        if (x.at(c, y, xx) == 0.0) zero += n;
      }
  return {std::move(name), all * O, zero * O};
}

void channel_moments(std::span<const double> v, double& mean, double& var) {
  double s = 0.0;
  for (double a : v) s += a;
  mean = s / static_cast<double>(v.size());
  double q = 0.0;
  for (double a : v) q += (a - mean) * (a - mean);
  var = q / static_cast<double>(v.size());
}

double positive_fraction(std::span<const double> v) {
  std::size_t n = 0;
  for (double a : v) n += a > 0.0;
  return static_cast<double>(n) / static_cast<double>(v.size());
}

struct PlainCtx {
  using Value = Tensor;
  const ProbeOptions* probe = nullptr;
  ActivationRecord* record = nullptr;

  Tensor conv(const Tensor& x, const ConvBn& cb) {
    if (record) record->macs.push_back(conv_macs(x, cb, "conv" + std::to_string(record->macs.size())));
    return ops::conv2d(x, cb.weight, {}, cb.geom);
  }

  Tensor bn(const Tensor& z, const ConvBn& cb) {
    Tensor y = ops::batchnorm_infer(z, cb.bn);
    if (record) {
      BnSiteRecord site;
      const std::size_t C = z.channels();
      site.pre_mean.resize(C);
      site.pre_std.resize(C);
      site.pre_positive.resize(C);
      site.post_positive.resize(C);
      for (std::size_t c = 0; c < C; ++c) {
        double mean = 0.0, var = 0.0;
        channel_moments(z.channel(c), mean, var);
        site.pre_mean[c] = mean;
        site.pre_std[c] = std::sqrt(var);
        site.pre_positive[c] = positive_fraction(z.channel(c));
        site.post_positive[c] = positive_fraction(y.channel(c));
      }
      if (probe->retain_snapshots) {
        site.pre_snapshot = z;
        site.post_snapshot = y;
      }
      record->bn.push_back(std::move(site));
    }
    return y;
  }

  Tensor relu(const Tensor& y) {
    Tensor a = ops::relu(y);
    if (record) {
      ReluSiteRecord r;
      r.total = a.size();
      for (double v : a.data()) r.nonzero += v != 0.0;
      record->relu.push_back(r);
      if (probe->retain_snapshots) record->relu_snapshots.push_back(a);
    }
    return a;
  }

  Tensor add(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
  Tensor pool(const Tensor& x, const PoolBlock& p) { return apply_pool(x, p); }

  Tensor linear(const Tensor& x, const ClassifierWeights& w) {
    if (record) {
      std::uint64_t zeros = 0;
      for (double v : x.data()) zeros += v == 0.0;
      const std::uint64_t out = w.weight.dim(0);
      record->macs.push_back({"linear" + std::to_string(record->macs.size()), out * x.size(), out * zeros});
    }
    return ops::linear(x, w.weight, w.bias.data());
  }
};

// Forward that folds each image's batch-norm input statistics into the
// running estimates before normalizing with them.
struct CalibrateCtx {
  using Value = Tensor;
  std::vector<BnParams*> sites;
  double momentum = 0.1;
  std::size_t next = 0;

  Tensor conv(const Tensor& x, const ConvBn& cb) { return ops::conv2d(x, cb.weight, {}, cb.geom); }

  Tensor bn(const Tensor& z, const ConvBn&) {
    BnParams& p = *sites.at(next++);
    for (std::size_t c = 0; c < z.channels(); ++c) {
      auto v = z.channel(c);
      double mean = 0.0, var = 0.0;
      channel_moments(v, mean, var);
      p.mu_hat[c] = (1.0 - momentum) * p.mu_hat[c] + momentum * mean;
      double sq = 0.0;
      for (double a : v) sq += (a - p.mu_hat[c]) * (a - p.mu_hat[c]);
      sq /= static_cast<double>(v.size());
      p.sigma_hat[c] = (1.0 - momentum) * p.sigma_hat[c] + momentum * sq;
    }
    return ops::batchnorm_infer(z, p);
  }

  Tensor relu(const Tensor& y) { return ops::relu(y); }
  Tensor add(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
  Tensor pool(const Tensor& x, const PoolBlock& p) { return apply_pool(x, p); }
  Tensor linear(const Tensor& x, const ClassifierWeights& w) {
    return ops::linear(x, w.weight, w.bias.data());
  }
};

struct TapeCtx {
  using Value = NodeId;
  ModelTape* out = nullptr;

  NodeId param(std::span<const double> v, const Shape& dims) {
    NodeId id = out->tape.leaf(Tensor(dims, std::vector<double>(v.begin(), v.end())));
    out->params.push_back(id);
    return id;
  }

  NodeId conv(NodeId x, const ConvBn& cb) {
    NodeId w = param(cb.weight.data(), cb.weight.dims());
    return out->tape.conv2d(x, w, std::nullopt, cb.geom);
  }

  NodeId bn(NodeId z, const ConvBn& cb) {
    NodeId g = param(cb.bn.gamma, {cb.bn.channels()});
    NodeId b = param(cb.bn.beta, {cb.bn.channels()});
    out->bn_inputs.push_back(z);
    return out->tape.batchnorm(z, g, b, cb.bn);
  }

  NodeId relu(NodeId y) {
    NodeId a = out->tape.relu(y);
    out->relu_outputs.push_back(a);
    return a;
  }

  NodeId add(NodeId a, NodeId b) { return out->tape.add(a, b); }

  NodeId pool(NodeId x, const PoolBlock& p) {
    switch (p.kind) {
      case PoolKind::kMax: return out->tape.maxpool2d(x, p.window, p.stride);
      case PoolKind::kAvg: return out->tape.avgpool2d(x, p.window, p.stride);
      case PoolKind::kGlobalAvg: return out->tape.global_avg_pool(x);
    }
    throw SpecError("unknown pool kind");
  }

  NodeId linear(NodeId x, const ClassifierWeights& w) {
    NodeId wn = param(w.weight.data(), w.weight.dims());
    NodeId bn = param(w.bias.data(), w.bias.dims());
    return out->tape.linear(x, wn, bn);
  }
};

void check_input(const Model& m, const Tensor& x) {
  if (x.dims() != m.arch().input_shape)
    throw ShapeError("input " + to_string(x.dims()) + " does not match model input " +
                     to_string(m.arch().input_shape));
}

Tensor flatten(Tensor t) {
  if (t.rank() == 1) return t;
  return t.reshaped({t.size()});
}

}  // namespace

Model calibrate(Model m, std::span<const Tensor> data, const CalibrationConfig& cfg) {
  if (data.empty()) throw DataError("calibration dataset is empty");
  if (!(cfg.momentum > 0.0 && cfg.momentum <= 1.0))
    throw ConfigError("calibration momentum must be in (0, 1]");
  if (cfg.passes == 0) throw ConfigError("calibration needs at least one pass");
  std::vector<BlockWeights> blocks = m.blocks();
  Model work(m.arch(), std::move(blocks), false);
  for (std::size_t pass = 0; pass < cfg.passes; ++pass) {
    for (const Tensor& x : data) {
      check_input(work, x);
      CalibrateCtx ctx{work.mutable_bn_params(), cfg.momentum, 0};
      run_blocks(work, ctx, x);
    }
  }
  return Model(work.arch(), work.blocks(), true);
}

ForwardResult forward(const Model& m, const Tensor& x, const ProbeOptions* probe) {
  if (!m.calibrated()) throw StateError("model is not calibrated");
  check_input(m, x);
  ForwardResult r;
  PlainCtx ctx;
  if (probe) {
    r.record.emplace();
    ctx.probe = probe;
    ctx.record = &*r.record;
  }
  r.logits = flatten(run_blocks(m, ctx, x));
  return r;
}

ModelTape forward_taped(const Model& m, const Tensor& x) {
  if (!m.calibrated()) throw StateError("model is not calibrated");
  check_input(m, x);
  ModelTape mt;
  mt.input = mt.tape.leaf(x);
  TapeCtx ctx{&mt};
  mt.logits = run_blocks(m, ctx, mt.input);
  return mt;
}

// --- persistence ------------------------------------------------------------------------

namespace {

constexpr char kModelMagic[4] = {'S', 'P', 'M', 'D'};

void put_tensor(std::vector<std::uint8_t>& out, const Tensor& t) {
  const auto bytes = encode_sptn(t);
  out.insert(out.end(), bytes.begin(), bytes.end());
}

void put_vector(std::vector<std::uint8_t>& out, const std::vector<double>& v) {
  put_tensor(out, Tensor({v.size()}, v));
}

void put_conv_bn(std::vector<std::uint8_t>& out, const ConvBn& cb) {
  put_tensor(out, cb.weight);
  put_vector(out, cb.bn.mu_hat);
  put_vector(out, cb.bn.sigma_hat);
  put_vector(out, cb.bn.gamma);
  put_vector(out, cb.bn.beta);
  put_vector(out, {cb.bn.eps});
}

Tensor take_tensor(const std::vector<std::uint8_t>& in, std::size_t& offset, const Shape& expect) {
  const std::size_t at = offset;
  Tensor t = decode_sptn(in, offset);
  if (t.dims() != expect)
    throw FormatError("tensor " + to_string(t.dims()) + " where " + to_string(expect) + " expected", at);
  return t;
}

std::vector<double> take_vector(const std::vector<std::uint8_t>& in, std::size_t& offset, std::size_t n) {
  return take_tensor(in, offset, {n}).values();
}

void take_conv_bn(const std::vector<std::uint8_t>& in, std::size_t& offset, ConvBn& cb) {
  const std::size_t C = cb.weight.dim(0);
  const std::size_t at = offset;
  cb.weight = take_tensor(in, offset, cb.weight.dims());
  cb.bn.mu_hat = take_vector(in, offset, C);
  cb.bn.sigma_hat = take_vector(in, offset, C);
  cb.bn.gamma = take_vector(in, offset, C);
  cb.bn.beta = take_vector(in, offset, C);
  cb.bn.eps = take_vector(in, offset, 1)[0];
  try {
    cb.bn.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("invalid batch-norm parameters: ") + e.what(), at);
  }
}

}  // namespace

std::vector<std::uint8_t> encode_model(const Model& m) {
  std::vector<std::uint8_t> out(std::begin(kModelMagic), std::end(kModelMagic));
  put_u8(out, kModelFileVersion);
  put_u8(out, m.calibrated() ? 1 : 0);
  const std::string arch = m.arch().to_json();
  put_u32(out, static_cast<std::uint32_t>(arch.size()));
  out.insert(out.end(), arch.begin(), arch.end());
  for (const auto& b : m.blocks()) {
    std::visit(Overloaded{
                   [&](const CnrWeights& c) { put_conv_bn(out, c.conv); },
                   [&](const ResidualWeights& r) {
                     put_conv_bn(out, r.first);
                     put_conv_bn(out, r.second);
                     if (r.shortcut) put_conv_bn(out, *r.shortcut);
                   },
                   [&](const PoolWeights&) {},
                   [&](const ClassifierWeights& c) {
                     put_tensor(out, c.weight);
                     put_tensor(out, c.bias);
                   },
               },
               b);
  }
  return out;
}

Model decode_model(const std::vector<std::uint8_t>& bytes) {
  std::size_t offset = 0;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kModelMagic, 4) != 0)
    throw FormatError("bad model magic (expected SPMD)", 0);
  offset = 4;
  const std::size_t version_at = offset;
  if (get_u8(bytes, offset) != kModelFileVersion)
    throw FormatError("unsupported model file version", version_at);
  const std::size_t flag_at = offset;
  const std::uint8_t flag = get_u8(bytes, offset);
  if (flag > 1) throw FormatError("bad calibrated flag", flag_at);
  const std::size_t len_at = offset;
  const std::uint32_t len = get_u32(bytes, offset);
  if (offset + len > bytes.size()) throw FormatError("architecture record truncated", len_at);
  ArchSpec arch;
  // Build a template with the right parameter shapes, then overwrite values.
  Model shape_only = [&] {
    try {
      arch = ArchSpec::from_json(
          std::string_view(reinterpret_cast<const char*>(bytes.data() + offset), len));
      return build(arch);
    } catch (const Error& e) {
      throw FormatError(std::string("invalid architecture record: ") + e.what(), offset);
    }
  }();
  offset += len;
  std::vector<BlockWeights> blocks = shape_only.blocks();
  for (auto& b : blocks) {
    std::visit(Overloaded{
                   [&](CnrWeights& c) { take_conv_bn(bytes, offset, c.conv); },
                   [&](ResidualWeights& r) {
                     take_conv_bn(bytes, offset, r.first);
                     take_conv_bn(bytes, offset, r.second);
                     if (r.shortcut) take_conv_bn(bytes, offset, *r.shortcut);
                   },
                   [&](PoolWeights&) {},
                   [&](ClassifierWeights& c) {
                     c.weight = take_tensor(bytes, offset, c.weight.dims());
                     c.bias = take_tensor(bytes, offset, c.bias.dims());
                   },
               },
               b);
  }
  if (offset != bytes.size()) throw FormatError("trailing bytes after model", offset);
  return Model(std::move(arch), std::move(blocks), flag == 1);
}

void save_model(const Model& m, const std::filesystem::path& path) {
  write_file_bytes(path, encode_model(m));
}

Model load_model(const std::filesystem::path& path) { return decode_model(read_file_bytes(path)); }

// --- fine-tuning -----------------------------------------------------------------------

double cross_entropy(const Tensor& logits, std::size_t label) {
  if (label >= logits.size()) throw DataError("label out of range");
  double mx = logits[0];
  for (double v : logits.data()) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits.data()) z += std::exp(v - mx);
  return std::log(z) + mx - logits[label];
}

FineTuneResult fine_tune(const Model& m, std::span<const LabeledImage> data,
                         const FineTuneConfig& cfg) {
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr))
    throw ConfigError("fine-tune learning rate must be finite and >= 0");
  if (cfg.steps == 0) throw ConfigError("fine-tune needs at least one step");
  if (!(cfg.bn_momentum > 0.0 && cfg.bn_momentum <= 1.0))
    throw ConfigError("fine-tune bn_momentum must be in (0, 1]");
  if (!m.calibrated()) throw StateError("fine-tune needs a calibrated model");
  if (data.empty()) throw DataError("fine-tune dataset is empty");
  const std::size_t classes = m.num_classes();
  if (classes == 0) throw SpecError("fine-tune needs a classifier block");
  for (const auto& item : data)
    if (item.label >= classes)
      throw DataError("label " + std::to_string(item.label) + " out of range for " +
                      std::to_string(classes) + " classes");

  FineTuneResult result{m, {}};
  Model& work = result.model;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const LabeledImage& item = data[step % data.size()];
    if (!cfg.freeze_bn_stats) {
      check_input(work, item.image);
      CalibrateCtx cal{work.mutable_bn_params(), cfg.bn_momentum, 0};
      run_blocks(work, cal, item.image);
    }
    ModelTape mt = forward_taped(work, item.image);
    const Tensor& logits = mt.tape.value(mt.logits);
    result.losses.push_back(cross_entropy(logits, item.label));

    // d(CE)/d(logits) = softmax - onehot
    Tensor g(logits.dims());
    double mx = logits[0];
    for (double v : logits.data()) mx = std::max(mx, v);
    double z = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) z += std::exp(logits[k] - mx);
    for (std::size_t k = 0; k < logits.size(); ++k)
      g[k] = std::exp(logits[k] - mx) / z - (k == item.label ? 1.0 : 0.0);

    if (cfg.lr == 0.0) continue;
    Tape::Seed seed{mt.logits, std::move(g)};
    const auto grads = mt.tape.backward(std::span<const Tape::Seed>(&seed, 1));
    auto params = work.trainable();
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (!grads.has(mt.params[k])) continue;
      const Tensor& gk = grads[mt.params[k]];
      for (std::size_t t = 0; t < params[k].size(); ++t) params[k][t] -= cfg.lr * gk[t];
    }
  }
  return result;
}

}  // namespace sponge

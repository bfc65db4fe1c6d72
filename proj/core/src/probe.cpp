#include "sponge/probe.hpp"

#include <cmath>
#include <limits>
#include <ostream>

#include "sponge/error.hpp"

namespace sponge {

double post_relu_density(const ActivationRecord& r) {
  std::size_t nonzero = 0, total = 0;
  for (const auto& site : r.relu) {
    nonzero += site.nonzero;
    total += site.total;
  }
  if (total == 0) throw DataError("activation record has no ReLU values");
  return static_cast<double>(nonzero) / static_cast<double>(total);
}

const char* to_string(ThresholdDirection d) noexcept {
  switch (d) {
    case ThresholdDirection::kPosAbove: return "pos_above";
    case ThresholdDirection::kPosBelow: return "pos_below";
    case ThresholdDirection::kDegenerate: return "degenerate";
  }
  return "?";
}

ZeroThreshold zero_threshold(const BnParams& p, std::size_t c) {
  if (c >= p.channels()) throw ShapeError("channel " + std::to_string(c) + " out of range");
  const double g = p.gamma[c];
  if (g == 0.0) return {std::numeric_limits<double>::quiet_NaN(), ThresholdDirection::kDegenerate};
  const double theta = p.mu_hat[c] - p.beta[c] * std::sqrt(p.sigma_hat[c] + p.eps) / g;
  return {theta, g > 0.0 ? ThresholdDirection::kPosAbove : ThresholdDirection::kPosBelow};
}

ThresholdTable threshold_table(const Model& m, std::optional<std::size_t> first_n_sites) {
  const auto params = m.bn_params();
  const auto sites = m.bn_sites();
  const std::size_t n = first_n_sites ? std::min(*first_n_sites, params.size()) : params.size();
  ThresholdTable table;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < params[s]->channels(); ++c) {
      table.push_back({s, sites[s].block, sites[s].role, c, params[s]->gamma[c],
                       zero_threshold(*params[s], c)});
    }
  }
  return table;
}

namespace {

const BnSiteRecord& bn_site(const ActivationRecord& r, std::size_t site) {
  if (site >= r.bn.size())
    throw DataError("record has no batch-norm site " + std::to_string(site));
  return r.bn[site];
}

}  // namespace

std::vector<ChannelStat> channel_stats(const ActivationRecord& r, std::size_t site) {
  const auto& s = bn_site(r, site);
  if (s.pre_snapshot.empty())
    throw DataError("batch-norm site " + std::to_string(site) + " has no retained snapshot");
  std::vector<ChannelStat> out(s.pre_snapshot.channels());
  for (std::size_t c = 0; c < out.size(); ++c) {
    const auto v = s.pre_snapshot.channel(c);
    double sum = 0.0;
    for (double a : v) sum += a;
    const double mean = sum / static_cast<double>(v.size());
    double sq = 0.0;
    for (double a : v) sq += (a - mean) * (a - mean);
    out[c] = {mean, std::sqrt(sq / static_cast<double>(v.size()))};
  }
  return out;
}

std::vector<double> density_gain(const ActivationRecord& r, std::size_t site) {
  const auto& s = bn_site(r, site);
  if (s.pre_positive.empty() || s.pre_positive.size() != s.post_positive.size())
    throw DataError("batch-norm site " + std::to_string(site) + " lacks positive fractions");
  std::vector<double> gain(s.pre_positive.size());
  for (std::size_t c = 0; c < gain.size(); ++c) gain[c] = s.post_positive[c] - s.pre_positive[c];
  return gain;
}

CostSummary cost_model(const ActivationRecord& r, const Model& m) {
  std::size_t layers = 0;
  for (const auto& b : m.blocks()) {
    if (std::holds_alternative<CnrWeights>(b)) layers += 1;
    if (const auto* res = std::get_if<ResidualWeights>(&b)) layers += res->shortcut ? 3 : 2;
    if (std::holds_alternative<ClassifierWeights>(b)) layers += 1;
  }
  if (r.macs.size() != layers)
    throw DataError("record has " + std::to_string(r.macs.size()) + " MAC layers, model has " +
                    std::to_string(layers));
  CostSummary out;
  out.layers = r.macs;
  for (const auto& l : r.macs) {
    out.total_macs += l.total;
    out.skipped_macs += l.skipped;
  }
  out.skipped_fraction = out.total_macs == 0 ? 0.0
                                             : static_cast<double>(out.skipped_macs) /
                                                   static_cast<double>(out.total_macs);
  return out;
}

void write_thresholds_csv(std::ostream& os, const ThresholdTable& table) {
  os << "site,block,role,channel,gamma,theta,direction\n";
  os.precision(17);
  for (const auto& row : table) {
    os << row.site << ',' << row.block << ',' << row.role << ',' << row.channel << ',' << row.gamma
       << ',';
    if (std::isnan(row.threshold.theta))
      os << "nan";
    else
      os << row.threshold.theta;
    os << ',' << to_string(row.threshold.direction) << '\n';
  }
}

void write_gains_csv(std::ostream& os, const std::vector<std::vector<double>>& gains_per_site) {
  os << "site,channel,gain\n";
  os.precision(17);
  for (std::size_t s = 0; s < gains_per_site.size(); ++s)
    for (std::size_t c = 0; c < gains_per_site[s].size(); ++c)
      os << s << ',' << c << ',' << gains_per_site[s][c] << '\n';
}

}  // namespace sponge

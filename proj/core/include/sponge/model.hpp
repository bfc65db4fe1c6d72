#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "sponge/record.hpp"
#include "sponge/tape.hpp"
#include "sponge/tensor.hpp"

namespace sponge {

// --- architecture -------------------------------------------------------------

/// conv (no bias) -> batch norm -> ReLU.
struct CnrBlock {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  friend bool operator==(const CnrBlock&, const CnrBlock&) = default;
};

/// relu(bn(conv(relu(bn(conv(x))))) + skip(x)). The skip is the identity when
/// shapes agree, otherwise a strided 1x1 conv followed by batch norm.
struct ResidualBlock {
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  friend bool operator==(const ResidualBlock&, const ResidualBlock&) = default;
};

enum class PoolKind { kMax, kAvg, kGlobalAvg };

struct PoolBlock {
  PoolKind kind = PoolKind::kMax;
  std::size_t window = 2;  // ignored for kGlobalAvg
  std::size_t stride = 2;
  friend bool operator==(const PoolBlock&, const PoolBlock&) = default;
};

/// Flattens its input and applies a dense layer with bias.
struct ClassifierBlock {
  std::size_t num_classes = 0;
  friend bool operator==(const ClassifierBlock&, const ClassifierBlock&) = default;
};

using Block = std::variant<CnrBlock, ResidualBlock, PoolBlock, ClassifierBlock>;

/// Distribution of freshly built parameters. The defaults give gamma = 1,
/// beta = 0 and plain He-normal kernels. `trained_like()` imitates two traits
/// of trained vision models: kernels with zero response to flat patches and
/// batch-norm shifts that mostly place the zero threshold below the running
/// mean.
struct InitPrior {
  double beta_mean = 0.0;
  double beta_std = 0.0;
  bool zero_mean_kernels = false;

  static InitPrior trained_like() { return {0.3, 0.3, true}; }
  bool is_default() const { return beta_mean == 0.0 && beta_std == 0.0 && !zero_mean_kernels; }
  friend bool operator==(const InitPrior&, const InitPrior&) = default;
};

struct ArchSpec {
  Shape input_shape;  // C, H, W
  std::vector<Block> blocks;
  std::uint64_t seed = 0;
  InitPrior init;

  /// 3x32x32 -> CNR(16) -> Res(16) -> maxpool 2 -> CNR(32) -> Res(32) ->
  /// global average -> Classifier(10).
  static ArchSpec desknet(std::uint64_t seed, InitPrior init = {});

  /// Throws SpecError unless shapes chain end to end and at least one block
  /// contains a conv/BN/ReLU sequence.
  void validate() const;

  /// Output shape after each block.
  std::vector<Shape> block_shapes() const;

  std::string to_json() const;
  static ArchSpec from_json(std::string_view text);

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

// --- parameters -----------------------------------------------------------------

struct ConvBn {
  Tensor weight;  // O x C x K x K
  BnParams bn;
  ops::ConvGeometry geom;
  friend bool operator==(const ConvBn&, const ConvBn&) = default;
};

struct CnrWeights {
  ConvBn conv;
  friend bool operator==(const CnrWeights&, const CnrWeights&) = default;
};

struct ResidualWeights {
  ConvBn first;
  ConvBn second;
  std::optional<ConvBn> shortcut;
  friend bool operator==(const ResidualWeights&, const ResidualWeights&) = default;
};

struct PoolWeights {
  friend bool operator==(const PoolWeights&, const PoolWeights&) = default;
};

struct ClassifierWeights {
  Tensor weight;  // classes x features
  Tensor bias;
  friend bool operator==(const ClassifierWeights&, const ClassifierWeights&) = default;
};

using BlockWeights = std::variant<CnrWeights, ResidualWeights, PoolWeights, ClassifierWeights>;

struct BnSiteInfo {
  std::size_t block = 0;
  std::string role;  // "cnr", "res.a", "res.b", "res.skip"
  std::size_t channels = 0;
};

class Model {
 public:
  Model(ArchSpec arch, std::vector<BlockWeights> blocks, bool calibrated);

  const ArchSpec& arch() const noexcept { return arch_; }
  const std::vector<BlockWeights>& blocks() const noexcept { return blocks_; }
  bool calibrated() const noexcept { return calibrated_; }

  std::size_t num_classes() const;  // 0 without a classifier

  std::vector<BnSiteInfo> bn_sites() const;
  std::size_t relu_site_count() const;

  /// Batch-norm parameters in site order.
  std::vector<const BnParams*> bn_params() const;
  std::vector<BnParams*> mutable_bn_params();

  /// Trainable values (conv kernels, gamma, beta, classifier weight and bias)
  /// in the order the taped forward registers them as leaves.
  std::vector<std::span<double>> trainable();

  /// Replaces all running statistics and marks the model calibrated; used to
  /// install externally provided statistics.
  Model with_bn_params(const std::vector<BnParams>& params) const;

  /// Stable 64-bit FNV-1a hash of the serialized model.
  std::uint64_t hash() const;

  friend bool operator==(const Model&, const Model&) = default;

 private:
  ArchSpec arch_;
  std::vector<BlockWeights> blocks_;
  bool calibrated_ = false;
};

/// Deterministic parameters from arch.seed: He-normal kernels, classifier
/// N(0, 1/in), gamma = 1, beta from the init prior, mu_hat = 0, sigma_hat = 1,
/// eps = 1e-5. The result is uncalibrated.
Model build(const ArchSpec& arch);

struct CalibrationConfig {
  double momentum = 0.1;
  std::size_t passes = 1;
};

/// Exponential moving average of per-image channel statistics at every
/// batch-norm site, one image at a time in data order. Each image's mean
/// updates mu_hat; the mean squared deviation from the updated mu_hat
/// updates sigma_hat. Weights are untouched.
Model calibrate(Model m, std::span<const Tensor> data, const CalibrationConfig& cfg = {});

struct ForwardResult {
  Tensor logits;
  std::optional<ActivationRecord> record;
};

/// Inference forward. Pass `probe` to collect an activation record.
ForwardResult forward(const Model& m, const Tensor& x, const ProbeOptions* probe = nullptr);

inline ForwardResult forward_probed(const Model& m, const Tensor& x, ProbeOptions probe = {}) {
  return forward(m, x, &probe);
}

/// Forward pass recorded on a tape with every trainable value as a leaf.
struct ModelTape {
  Tape tape;
  NodeId input = 0;
  NodeId logits = 0;
  std::vector<NodeId> relu_outputs;
  std::vector<NodeId> bn_inputs;
  std::vector<NodeId> params;  // aligned with Model::trainable()
};

ModelTape forward_taped(const Model& m, const Tensor& x);

// --- persistence ----------------------------------------------------------------

inline constexpr std::uint8_t kModelFileVersion = 1;

std::vector<std::uint8_t> encode_model(const Model& m);
Model decode_model(const std::vector<std::uint8_t>& bytes);
void save_model(const Model& m, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

// --- fine-tuning ----------------------------------------------------------------

struct LabeledImage {
  Tensor image;
  std::size_t label = 0;
};

struct FineTuneConfig {
  double lr = 1e-3;
  std::size_t steps = 100;
  bool freeze_bn_stats = false;
  double bn_momentum = 0.1;  // EMA momentum for running stats when not frozen
};

struct FineTuneResult {
  Model model;
  std::vector<double> losses;  // cross-entropy before each update
};

/// Plain SGD on softmax cross-entropy, one image per step, cycling through
/// `data` in order. Unless frozen, each step first folds the image into the
/// running statistics.
FineTuneResult fine_tune(const Model& m, std::span<const LabeledImage> data,
                         const FineTuneConfig& cfg);

double cross_entropy(const Tensor& logits, std::size_t label);

}  // namespace sponge

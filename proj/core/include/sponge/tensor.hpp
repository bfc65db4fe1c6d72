#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace sponge {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& dims);
std::size_t shape_size(const Shape& dims);

/// Dense rank 1..4 array of doubles, row-major. Feature maps are stored as
/// channels x height x width without a batch dimension.
class Tensor {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Tensor() = default;

  /// Zero-filled tensor of the given extents.
  explicit Tensor(Shape dims);

  /// Takes ownership of `data`; throws ShapeError when the element count does
  /// not match or DataError when a value is not finite.
  Tensor(Shape dims, std::vector<double> data);

  static Tensor filled(Shape dims, double value);
  static Tensor from_values(Shape dims, std::initializer_list<double> values);

  const Shape& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // CHW accessors; only meaningful for rank-3 tensors.
  std::size_t channels() const { return dims_.at(0); }
  std::size_t height() const { return dims_.at(1); }
  std::size_t width() const { return dims_.at(2); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * dims_[1] + y) * dims_[2] + x];
  }
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * dims_[1] + y) * dims_[2] + x];
  }

  /// Contiguous H*W plane of channel `c` of a rank-3 tensor.
  std::span<const double> channel(std::size_t c) const;
  std::span<double> channel(std::size_t c);

  bool all_finite() const noexcept;

  /// Same extents, different dims vector (e.g. flatten to rank 1).
  Tensor reshaped(Shape dims) const;

  // Value equality; tensors are never NaN so this is bit equality up to the
  // sign of zero. Use bit_equal() when -0.0 vs 0.0 matters.
  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape dims_;
  std::vector<double> data_;
};

/// Byte-for-byte equality of extents and payload.
bool bit_equal(const Tensor& a, const Tensor& b) noexcept;

void require_rank(const Tensor& t, std::size_t rank, const char* what);

/// Per-channel inference-time batch normalization parameters.
struct BnParams {
  std::vector<double> mu_hat;     // running mean
  std::vector<double> sigma_hat;  // running variance
  std::vector<double> gamma;
  std::vector<double> beta;
  double eps = 1e-5;

  static BnParams identity(std::size_t channels, double eps = 1e-5);

  std::size_t channels() const noexcept { return gamma.size(); }

  /// Throws ShapeError / ConfigError when the invariants do not hold.
  void validate() const;

  friend bool operator==(const BnParams&, const BnParams&) = default;
};

}  // namespace sponge

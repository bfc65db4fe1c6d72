#include "sponge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <utility>

#include "sponge/error.hpp"

namespace sponge {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kSpec: return "spec error";
    case ErrorKind::kData: return "data error";
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kState: return "state error";
    case ErrorKind::kNumeric: return "numeric error";
  }
  return "error";
}

std::string to_string(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << 'x';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return dims.empty() ? 0 : n;
}

namespace {

void check_dims(const Shape& dims) {
  if (dims.empty() || dims.size() > Tensor::kMaxRank)
    throw ShapeError("tensor rank must be 1.." + std::to_string(Tensor::kMaxRank) +
                     ", got " + std::to_string(dims.size()));
  for (auto d : dims)
    if (d == 0) throw ShapeError("tensor extents must be positive: " + to_string(dims));
}

}  // namespace

Tensor::Tensor(Shape dims) : dims_(std::move(dims)) {
  check_dims(dims_);
  data_.assign(shape_size(dims_), 0.0);
}

Tensor::Tensor(Shape dims, std::vector<double> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  check_dims(dims_);
  if (shape_size(dims_) != data_.size())
    throw ShapeError("tensor " + to_string(dims_) + " needs " +
                     std::to_string(shape_size(dims_)) + " values, got " +
                     std::to_string(data_.size()));
  if (!all_finite()) throw DataError("tensor contains non-finite values");
}

Tensor Tensor::filled(Shape dims, double value) {
  Tensor t(std::move(dims));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::from_values(Shape dims, std::initializer_list<double> values) {
  return Tensor(std::move(dims), std::vector<double>(values));
}

std::span<const double> Tensor::channel(std::size_t c) const {
  const std::size_t plane = dims_.at(1) * dims_.at(2);
  return std::span<const double>(data_).subspan(c * plane, plane);
}

std::span<double> Tensor::channel(std::size_t c) {
  const std::size_t plane = dims_.at(1) * dims_.at(2);
  return std::span<double>(data_).subspan(c * plane, plane);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape dims) const {
  if (shape_size(dims) != size())
    throw ShapeError("cannot reshape " + to_string(dims_) + " to " + to_string(dims));
  Tensor out;
  check_dims(dims);
  out.dims_ = std::move(dims);
  out.data_ = data_;
  return out;
}

bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
  return a.dims() == b.dims() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) +
                     ", got " + to_string(t.dims()));
}

BnParams BnParams::identity(std::size_t channels, double eps) {
  BnParams p;
  p.mu_hat.assign(channels, 0.0);
  p.sigma_hat.assign(channels, 1.0);
  p.gamma.assign(channels, 1.0);
  p.beta.assign(channels, 0.0);
  p.eps = eps;
  return p;
}

void BnParams::validate() const {
  const auto c = gamma.size();
  if (mu_hat.size() != c || sigma_hat.size() != c || beta.size() != c)
    throw ShapeError("batch-norm parameter arrays differ in length");
  if (!(eps > 0.0)) throw ConfigError("batch-norm eps must be positive");
  for (double s : sigma_hat)
    if (!(s >= 0.0)) throw ConfigError("batch-norm running variance must be >= 0");
}

}  // namespace sponge

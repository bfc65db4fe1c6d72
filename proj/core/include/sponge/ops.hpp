#pragma once

#include <cstddef>
#include <span>

#include "sponge/tensor.hpp"

// Forward primitives and their vector-Jacobian products. Every function is a
// pure function of its arguments and runs single-threaded.
namespace sponge::ops {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

/// Output extent of a strided window over `in` samples with symmetric zero
/// padding. Throws ShapeError when the result would be < 1.
std::size_t output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t padding);

/// Cross-correlation of a CxHxW input with an OxCxKhxKw kernel, zero padding.
/// `bias` is either empty (absent) or holds one value per output channel.
Tensor conv2d(const Tensor& input, const Tensor& weight, std::span<const double> bias,
              ConvGeometry geom);

/// Computes (z - mu_hat) / sqrt(sigma_hat + eps) * gamma + beta per channel.
Tensor batchnorm_infer(const Tensor& z, const BnParams& p);

Tensor relu(const Tensor& x);

Tensor maxpool2d(const Tensor& input, std::size_t window, std::size_t stride);
Tensor avgpool2d(const Tensor& input, std::size_t window, std::size_t stride);

/// Per-channel spatial mean; returns a rank-1 tensor of length C.
Tensor global_avg_pool(const Tensor& input);

/// y = W x + b for a flattened x; W is out x in, `bias` empty or length out.
Tensor linear(const Tensor& x, const Tensor& weight, std::span<const double> bias);

Tensor add(const Tensor& a, const Tensor& b);

// --- reverse mode -----------------------------------------------------------

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight,
                         const Shape& input_dims, ConvGeometry geom);
Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& input,
                          const Shape& weight_dims, ConvGeometry geom);
/// Sum of grad_out over the spatial extent of each output channel.
Tensor conv2d_grad_bias(const Tensor& grad_out);

struct BnGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};
BnGrads batchnorm_backward(const Tensor& grad_out, const Tensor& z, const BnParams& p);

/// Subgradient at 0 is 0.
Tensor relu_backward(const Tensor& grad_out, const Tensor& x);

/// Routes each window's gradient to the first maximal element in scan order.
Tensor maxpool2d_backward(const Tensor& grad_out, const Tensor& input, std::size_t window,
                          std::size_t stride);
Tensor avgpool2d_backward(const Tensor& grad_out, const Shape& input_dims,
                          std::size_t window, std::size_t stride);
Tensor global_avg_pool_backward(const Tensor& grad_out, const Shape& input_dims);

struct LinearGrads {
  Tensor input;   // same dims as the forward x
  Tensor weight;
  Tensor bias;
};
LinearGrads linear_backward(const Tensor& grad_out, const Tensor& x, const Tensor& weight);

}  // namespace sponge::ops

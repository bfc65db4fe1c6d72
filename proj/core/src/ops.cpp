#include "sponge/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sponge/error.hpp"

namespace sponge::ops {

namespace {

// Range [lo, hi) of output coordinates whose tap at kernel offset `k` reads an
// in-bounds input sample.
struct TapRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

TapRange tap_range(std::size_t out_extent, std::size_t in_extent, std::size_t k,
                   std::size_t stride, std::size_t padding) {
  // in = out * stride + k - padding must lie in [0, in_extent).
  const long long s = static_cast<long long>(stride);
  const long long shift = static_cast<long long>(k) - static_cast<long long>(padding);
  long long lo = shift >= 0 ? 0 : (-shift + s - 1) / s;
  long long hi_incl = (static_cast<long long>(in_extent) - 1 - shift);
  long long hi = hi_incl < 0 ? 0 : hi_incl / s + 1;
  hi = std::min<long long>(hi, static_cast<long long>(out_extent));
  if (lo > hi) lo = hi;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

void require_same_dims(const Tensor& a, const Tensor& b, const char* what) {
  if (a.dims() != b.dims())
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.dims()) + " vs " +
                     to_string(b.dims()));
}

void check_conv_args(const Tensor& input, const Tensor& weight, ConvGeometry geom) {
  require_rank(input, 3, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (geom.stride == 0) throw ShapeError("conv2d stride must be positive");
  if (input.channels() != weight.dim(1))
    throw ShapeError("conv2d: input has " + std::to_string(input.channels()) +
                     " channels, weight expects " + std::to_string(weight.dim(1)));
}

}  // namespace

std::size_t output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
  if (stride == 0) throw ShapeError("stride must be positive");
  const long long span = static_cast<long long>(in + 2 * padding) - static_cast<long long>(kernel);
  if (span < 0)
    throw ShapeError("window " + std::to_string(kernel) + " does not fit extent " +
                     std::to_string(in) + " with padding " + std::to_string(padding));
  return static_cast<std::size_t>(span) / stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, std::span<const double> bias,
              ConvGeometry geom) {
  check_conv_args(input, weight, geom);
  const std::size_t C = input.channels(), H = input.height(), W = input.width();
  const std::size_t O = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
  if (!bias.empty() && bias.size() != O)
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) + " != " +
                     std::to_string(O) + " output channels");
  const std::size_t OH = output_extent(H, KH, geom.stride, geom.padding);
  const std::size_t OW = output_extent(W, KW, geom.stride, geom.padding);
  const std::size_t s = geom.stride, p = geom.padding;

  Tensor out({O, OH, OW});
  const double* in = input.data().data();
  const double* w = weight.data().data();
  double* dst = out.data().data();
  for (std::size_t o = 0; o < O; ++o) {
    double* plane = dst + o * OH * OW;
    if (!bias.empty()) std::fill(plane, plane + OH * OW, bias[o]);
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = in + c * H * W;
      for (std::size_t i = 0; i < KH; ++i) {
        const TapRange ry = tap_range(OH, H, i, s, p);
        for (std::size_t j = 0; j < KW; ++j) {
          const double wv = w[((o * C + c) * KH + i) * KW + j];
          const TapRange rx = tap_range(OW, W, j, s, p);
          for (std::size_t y = ry.lo; y < ry.hi; ++y) {
            const double* row = src + (y * s + i - p) * W + j - p;
            double* orow = plane + y * OW;
            if (s == 1) {
              for (std::size_t x = rx.lo; x < rx.hi; ++x) orow[x] += wv * row[x];
            } else {
              for (std::size_t x = rx.lo; x < rx.hi; ++x) orow[x] += wv * row[x * s];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight, const Shape& input_dims,
                         ConvGeometry geom) {
  require_rank(grad_out, 3, "conv2d grad");
  if (input_dims.size() != 3) throw ShapeError("conv2d grad: input must be rank 3");
  const std::size_t C = input_dims[0], H = input_dims[1], W = input_dims[2];
  const std::size_t O = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
  const std::size_t OH = grad_out.height(), OW = grad_out.width();
  if (grad_out.channels() != O || weight.dim(1) != C ||
      OH != output_extent(H, KH, geom.stride, geom.padding) ||
      OW != output_extent(W, KW, geom.stride, geom.padding))
    throw ShapeError("conv2d grad: gradient " + to_string(grad_out.dims()) +
                     " inconsistent with input " + to_string(input_dims));
  const std::size_t s = geom.stride, p = geom.padding;

  Tensor gin(input_dims);
  const double* g = grad_out.data().data();
  const double* w = weight.data().data();
  double* dst = gin.data().data();
  for (std::size_t o = 0; o < O; ++o) {
    const double* gplane = g + o * OH * OW;
    for (std::size_t c = 0; c < C; ++c) {
      double* plane = dst + c * H * W;
      for (std::size_t i = 0; i < KH; ++i) {
        const TapRange ry = tap_range(OH, H, i, s, p);
        for (std::size_t j = 0; j < KW; ++j) {
          const double wv = w[((o * C + c) * KH + i) * KW + j];
          const TapRange rx = tap_range(OW, W, j, s, p);
          for (std::size_t y = ry.lo; y < ry.hi; ++y) {
            double* row = plane + (y * s + i - p) * W + j - p;
            const double* grow = gplane + y * OW;
            for (std::size_t x = rx.lo; x < rx.hi; ++x) row[x * s] += wv * grow[x];
          }
        }
      }
    }
  }
  return gin;
}

Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& input, const Shape& weight_dims,
                          ConvGeometry geom) {
  require_rank(grad_out, 3, "conv2d grad");
  require_rank(input, 3, "conv2d input");
  if (weight_dims.size() != 4) throw ShapeError("conv2d grad: weight must be rank 4");
  const std::size_t C = input.channels(), H = input.height(), W = input.width();
  const std::size_t O = weight_dims[0], KH = weight_dims[2], KW = weight_dims[3];
  const std::size_t OH = grad_out.height(), OW = grad_out.width();
  if (grad_out.channels() != O || weight_dims[1] != C)
    throw ShapeError("conv2d grad: weight " + to_string(weight_dims) + " inconsistent");
  const std::size_t s = geom.stride, p = geom.padding;

  Tensor gw(weight_dims);
  const double* g = grad_out.data().data();
  const double* in = input.data().data();
  double* dst = gw.data().data();
  for (std::size_t o = 0; o < O; ++o) {
    const double* gplane = g + o * OH * OW;
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = in + c * H * W;
      for (std::size_t i = 0; i < KH; ++i) {
        const TapRange ry = tap_range(OH, H, i, s, p);
        for (std::size_t j = 0; j < KW; ++j) {
          const TapRange rx = tap_range(OW, W, j, s, p);
          double acc = 0.0;
          for (std::size_t y = ry.lo; y < ry.hi; ++y) {
            const double* row = src + (y * s + i - p) * W + j - p;
            const double* grow = gplane + y * OW;
            for (std::size_t x = rx.lo; x < rx.hi; ++x) acc += grow[x] * row[x * s];
          }
          dst[((o * C + c) * KH + i) * KW + j] = acc;
        }
      }
    }
  }
  return gw;
}

Tensor conv2d_grad_bias(const Tensor& grad_out) {
  require_rank(grad_out, 3, "conv2d grad");
  Tensor gb({grad_out.channels()});
  for (std::size_t o = 0; o < grad_out.channels(); ++o) {
    double acc = 0.0;
    for (double v : grad_out.channel(o)) acc += v;
    gb[o] = acc;
  }
  return gb;
}

Tensor batchnorm_infer(const Tensor& z, const BnParams& p) {
  require_rank(z, 3, "batchnorm_infer");
  if (z.channels() != p.channels())
    throw ShapeError("batchnorm_infer: input has " + std::to_string(z.channels()) +
                     " channels, parameters have " + std::to_string(p.channels()));
  Tensor out(z.dims());
  for (std::size_t c = 0; c < z.channels(); ++c) {
    const double sd = std::sqrt(p.sigma_hat[c] + p.eps);
    auto src = z.channel(c);
    auto dst = out.channel(c);
    for (std::size_t k = 0; k < src.size(); ++k)
      dst[k] = (src[k] - p.mu_hat[c]) / sd * p.gamma[c] + p.beta[c];
  }
  return out;
}

BnGrads batchnorm_backward(const Tensor& grad_out, const Tensor& z, const BnParams& p) {
  require_same_dims(grad_out, z, "batchnorm backward");
  if (z.channels() != p.channels()) throw ShapeError("batchnorm backward: channel mismatch");
  BnGrads g{Tensor(z.dims()), Tensor({p.channels()}), Tensor({p.channels()})};
  for (std::size_t c = 0; c < z.channels(); ++c) {
    const double sd = std::sqrt(p.sigma_hat[c] + p.eps);
    const double scale = p.gamma[c] / sd;
    auto go = grad_out.channel(c);
    auto zc = z.channel(c);
    auto gi = g.input.channel(c);
    double dgamma = 0.0, dbeta = 0.0;
    for (std::size_t k = 0; k < go.size(); ++k) {
      gi[k] = go[k] * scale;
      dgamma += go[k] * ((zc[k] - p.mu_hat[c]) / sd);
      dbeta += go[k];
    }
    g.gamma[c] = dgamma;
    g.beta[c] = dbeta;
  }
  return g;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.dims());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t k = 0; k < src.size(); ++k) dst[k] = src[k] > 0.0 ? src[k] : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& x) {
  require_same_dims(grad_out, x, "relu backward");
  Tensor g(x.dims());
  for (std::size_t k = 0; k < x.size(); ++k) g[k] = x[k] > 0.0 ? grad_out[k] : 0.0;
  return g;
}

Tensor maxpool2d(const Tensor& input, std::size_t window, std::size_t stride) {
  require_rank(input, 3, "maxpool2d");
  if (window == 0) throw ShapeError("maxpool2d window must be positive");
  const std::size_t C = input.channels(), H = input.height(), W = input.width();
  const std::size_t OH = output_extent(H, window, stride, 0);
  const std::size_t OW = output_extent(W, window, stride, 0);
  Tensor out({C, OH, OW});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t x = 0; x < OW; ++x) {
        double best = input.at(c, y * stride, x * stride);
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j)
            best = std::max(best, input.at(c, y * stride + i, x * stride + j));
        out.at(c, y, x) = best;
      }
  return out;
}

Tensor maxpool2d_backward(const Tensor& grad_out, const Tensor& input, std::size_t window,
                          std::size_t stride) {
  require_rank(input, 3, "maxpool2d backward");
  const std::size_t C = input.channels(), H = input.height(), W = input.width();
  const std::size_t OH = output_extent(H, window, stride, 0);
  const std::size_t OW = output_extent(W, window, stride, 0);
  if (grad_out.dims() != Shape{C, OH, OW}) throw ShapeError("maxpool2d backward: shape mismatch");
  Tensor g(input.dims());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t x = 0; x < OW; ++x) {
        std::size_t by = y * stride, bx = x * stride;
        double best = input.at(c, by, bx);
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) {
            const double v = input.at(c, y * stride + i, x * stride + j);
            if (v > best) {
              best = v;
              by = y * stride + i;
              bx = x * stride + j;
            }
          }
        g.at(c, by, bx) += grad_out.at(c, y, x);
      }
  return g;
}

Tensor avgpool2d(const Tensor& input, std::size_t window, std::size_t stride) {
  require_rank(input, 3, "avgpool2d");
  if (window == 0) throw ShapeError("avgpool2d window must be positive");
  const std::size_t C = input.channels(), H = input.height(), W = input.width();
  const std::size_t OH = output_extent(H, window, stride, 0);
  const std::size_t OW = output_extent(W, window, stride, 0);
  const double inv = 1.0 / static_cast<double>(window * window);
  Tensor out({C, OH, OW});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t x = 0; x < OW; ++x) {
        double acc = 0.0;
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j)
            acc += input.at(c, y * stride + i, x * stride + j);
        out.at(c, y, x) = acc * inv;
      }
  return out;
}

Tensor avgpool2d_backward(const Tensor& grad_out, const Shape& input_dims, std::size_t window,
                          std::size_t stride) {
  if (input_dims.size() != 3) throw ShapeError("avgpool2d backward: input must be rank 3");
  const std::size_t C = input_dims[0], H = input_dims[1], W = input_dims[2];
  const std::size_t OH = output_extent(H, window, stride, 0);
  const std::size_t OW = output_extent(W, window, stride, 0);
  if (grad_out.dims() != Shape{C, OH, OW}) throw ShapeError("avgpool2d backward: shape mismatch");
  const double inv = 1.0 / static_cast<double>(window * window);
  Tensor g(input_dims);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t x = 0; x < OW; ++x) {
        const double share = grad_out.at(c, y, x) * inv;
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) g.at(c, y * stride + i, x * stride + j) += share;
      }
  return g;
}

Tensor global_avg_pool(const Tensor& input) {
  require_rank(input, 3, "global_avg_pool");
  Tensor out({input.channels()});
  const double inv = 1.0 / static_cast<double>(input.height() * input.width());
  for (std::size_t c = 0; c < input.channels(); ++c) {
    double acc = 0.0;
    for (double v : input.channel(c)) acc += v;
    out[c] = acc * inv;
  }
  return out;
}

Tensor global_avg_pool_backward(const Tensor& grad_out, const Shape& input_dims) {
  if (input_dims.size() != 3 || grad_out.dims() != Shape{input_dims[0]})
    throw ShapeError("global_avg_pool backward: shape mismatch");
  Tensor g(input_dims);
  const double inv = 1.0 / static_cast<double>(input_dims[1] * input_dims[2]);
  for (std::size_t c = 0; c < input_dims[0]; ++c)
    for (double& v : g.channel(c)) v = grad_out[c] * inv;
  return g;
}

Tensor linear(const Tensor& x, const Tensor& weight, std::span<const double> bias) {
  require_rank(weight, 2, "linear weight");
  const std::size_t out_n = weight.dim(0), in_n = weight.dim(1);
  if (x.size() != in_n)
    throw ShapeError("linear: input has " + std::to_string(x.size()) + " values, weight expects " +
                     std::to_string(in_n));
  if (!bias.empty() && bias.size() != out_n) throw ShapeError("linear: bias length mismatch");
  Tensor y({out_n});
  for (std::size_t r = 0; r < out_n; ++r) {
    double acc = bias.empty() ? 0.0 : bias[r];
    for (std::size_t k = 0; k < in_n; ++k) acc += weight[r * in_n + k] * x[k];
    y[r] = acc;
  }
  return y;
}

LinearGrads linear_backward(const Tensor& grad_out, const Tensor& x, const Tensor& weight) {
  require_rank(weight, 2, "linear weight");
  const std::size_t out_n = weight.dim(0), in_n = weight.dim(1);
  if (grad_out.size() != out_n || x.size() != in_n)
    throw ShapeError("linear backward: shape mismatch");
  LinearGrads g{Tensor(x.dims()), Tensor(weight.dims()), Tensor({out_n})};
  for (std::size_t r = 0; r < out_n; ++r) {
    const double go = grad_out[r];
    g.bias[r] = go;
    for (std::size_t k = 0; k < in_n; ++k) {
      g.input[k] += weight[r * in_n + k] * go;
      g.weight[r * in_n + k] = go * x[k];
    }
  }
  return g;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_dims(a, b, "add");
  Tensor out(a.dims());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] + b[k];
  return out;
}

}  // namespace sponge::ops

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "nsat/errors.hpp"
#include "nsat/nn.hpp"
#include "nsat/tensor.hpp"

namespace nsat {

// Volumetric tensors are rank-5: [batch, channels, depth, height, width].

// Cross-correlation with cubic kernels, no bias (a batch-norm always
// follows). weights: [out_c, in_c, k, k, k].
inline Tensor conv3d(const Tensor& x, const Tensor& w, std::size_t stride = 1,
                     std::size_t padding = 0) {
  if (x.rank() != 5 || w.rank() != 5)
    throw DimensionError("conv3d: expected rank-5 input and weights, got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const std::size_t n = xs[0], ci = xs[1], d = xs[2], h = xs[3], wd = xs[4];
  const std::size_t co = ws[0], k = ws[2];
  if (ws[1] != ci || ws[3] != k || ws[4] != k)
    throw DimensionError("conv3d: weight shape " + shape_str(ws) +
                         " incompatible with input " + shape_str(xs));
  if (k > d + 2 * padding || k > h + 2 * padding || k > wd + 2 * padding)
    throw DimensionError("conv3d: kernel larger than padded input");
  if (stride == 0) throw ConfigError("conv3d: stride must be >= 1");

  const std::size_t od = (d + 2 * padding - k) / stride + 1;
  const std::size_t oh = (h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (wd + 2 * padding - k) / stride + 1;

  const double* xv = x.value().data();
  const double* wv = w.value().data();
  std::vector<double> y(n * co * od * oh * ow, 0.0);

  auto xat = [&](std::size_t b, std::size_t c, std::size_t z, std::size_t yy,
                 std::size_t xx) {
    return xv[(((b * ci + c) * d + z) * h + yy) * wd + xx];
  };

  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < co; ++oc)
      for (std::size_t oz = 0; oz < od; ++oz)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            double acc = 0.0;
            for (std::size_t c = 0; c < ci; ++c)
              for (std::size_t kz = 0; kz < k; ++kz) {
                const std::size_t iz = oz * stride + kz;
                if (iz < padding || iz >= d + padding) continue;
                for (std::size_t ky = 0; ky < k; ++ky) {
                  const std::size_t iy = oy * stride + ky;
                  if (iy < padding || iy >= h + padding) continue;
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::size_t ix = ox * stride + kx;
                    if (ix < padding || ix >= wd + padding) continue;
                    acc += xat(b, c, iz - padding, iy - padding, ix - padding) *
                           wv[(((oc * ci + c) * k + kz) * k + ky) * k + kx];
                  }
                }
              }
            y[(((b * co + oc) * od + oz) * oh + oy) * ow + ox] = acc;
          }

  auto px = x.node(), pw = w.node();
  return detail::make_op(
      {n, co, od, oh, ow}, std::move(y), {px, pw},
      [px, pw, n, ci, co, d, h, wd, k, od, oh, ow, stride,
       padding](detail::Node& node) {
        const double* dy = node.grad.data();
        const double* xv = px->value.data();
        const double* wv = pw->value.data();
        double* gx = px->requires_grad ? px->grad_buf().data() : nullptr;
        double* gw = pw->requires_grad ? pw->grad_buf().data() : nullptr;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t oc = 0; oc < co; ++oc)
            for (std::size_t oz = 0; oz < od; ++oz)
              for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                  const double g =
                      dy[(((b * co + oc) * od + oz) * oh + oy) * ow + ox];
                  if (g == 0.0) continue;
                  for (std::size_t c = 0; c < ci; ++c)
                    for (std::size_t kz = 0; kz < k; ++kz) {
                      const std::size_t iz = oz * stride + kz;
                      if (iz < padding || iz >= d + padding) continue;
                      for (std::size_t ky = 0; ky < k; ++ky) {
                        const std::size_t iy = oy * stride + ky;
                        if (iy < padding || iy >= h + padding) continue;
                        for (std::size_t kx = 0; kx < k; ++kx) {
                          const std::size_t ix = ox * stride + kx;
                          if (ix < padding || ix >= wd + padding) continue;
                          const std::size_t xi =
                              (((b * ci + c) * d + (iz - padding)) * h +
                               (iy - padding)) *
                                  wd +
                              (ix - padding);
                          const std::size_t wi =
                              (((oc * ci + c) * k + kz) * k + ky) * k + kx;
                          if (gx) gx[xi] += g * wv[wi];
                          if (gw) gw[wi] += g * xv[xi];
                        }
                      }
                    }
                }
      });
}

// k^3 average pooling with the same stride (2^3 stride 2 in the backbone).
inline Tensor avg_pool3d(const Tensor& x, std::size_t k = 2,
                         std::size_t stride = 2) {
  if (x.rank() != 5)
    throw DimensionError("avg_pool3d: rank-5 input required");
  const auto& xs = x.shape();
  const std::size_t n = xs[0], c = xs[1], d = xs[2], h = xs[3], wd = xs[4];
  if (d < k || h < k || wd < k)
    throw DimensionError("avg_pool3d: window larger than input");
  const std::size_t od = (d - k) / stride + 1;
  const std::size_t oh = (h - k) / stride + 1;
  const std::size_t ow = (wd - k) / stride + 1;
  const double inv = 1.0 / static_cast<double>(k * k * k);

  const double* xv = x.value().data();
  std::vector<double> y(n * c * od * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oz = 0; oz < od; ++oz)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            double acc = 0.0;
            for (std::size_t kz = 0; kz < k; ++kz)
              for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx)
                  acc += xv[(((b * c + ch) * d + oz * stride + kz) * h +
                             oy * stride + ky) *
                                wd +
                            ox * stride + kx];
            y[(((b * c + ch) * od + oz) * oh + oy) * ow + ox] = acc * inv;
          }

  auto px = x.node();
  return detail::make_op(
      {n, c, od, oh, ow}, std::move(y), {px},
      [px, n, c, d, h, wd, k, od, oh, ow, stride, inv](detail::Node& node) {
        auto& gx = px->grad_buf();
        const double* dy = node.grad.data();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t oz = 0; oz < od; ++oz)
              for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                  const double g =
                      dy[(((b * c + ch) * od + oz) * oh + oy) * ow + ox] * inv;
                  for (std::size_t kz = 0; kz < k; ++kz)
                    for (std::size_t ky = 0; ky < k; ++ky)
                      for (std::size_t kx = 0; kx < k; ++kx)
                        gx[(((b * c + ch) * d + oz * stride + kz) * h +
                            oy * stride + ky) *
                               wd +
                           ox * stride + kx] += g;
                }
      });
}

// [n, c, d, h, w] -> [n, c]: spatial mean per channel.
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 5)
    throw DimensionError("global_avg_pool: rank-5 input required");
  const auto& xs = x.shape();
  const std::size_t n = xs[0], c = xs[1], spatial = xs[2] * xs[3] * xs[4];
  const double inv = 1.0 / static_cast<double>(spatial);
  const double* xv = x.value().data();
  std::vector<double> y(n * c, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      const double* base = xv + (b * c + ch) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) acc += base[i];
      y[b * c + ch] = acc * inv;
    }
  auto px = x.node();
  return detail::make_op({n, c}, std::move(y), {px},
                         [px, n, c, spatial, inv](detail::Node& node) {
                           auto& gx = px->grad_buf();
                           for (std::size_t b = 0; b < n; ++b)
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               const double g = node.grad[b * c + ch] * inv;
                               double* base = gx.data() + (b * c + ch) * spatial;
                               for (std::size_t i = 0; i < spatial; ++i)
                                 base[i] += g;
                             }
                         });
}

// Batch norm over (batch x spatial) per channel for rank-5 tensors; same
// semantics as the set-axis batch_norm in nn.hpp.
inline Tensor spatial_batch_norm(const Tensor& x, const Tensor& gamma,
                                 const Tensor& beta, Mode mode,
                                 BatchNormState& state, double eps = 1e-5,
                                 double momentum = 0.1,
                                 bool update_running = true) {
  if (x.rank() != 5)
    throw DimensionError("spatial_batch_norm: rank-5 input required");
  const auto& xs = x.shape();
  const std::size_t n = xs[0], c = xs[1], spatial = xs[2] * xs[3] * xs[4];
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("spatial_batch_norm: gamma/beta length mismatch");
  if (state.running_mean.size() != c)
    throw StateError("spatial_batch_norm: state channel mismatch");
  const std::size_t count = n * spatial;
  if (count == 0) throw EmptySetError("spatial_batch_norm: empty input");

  const double* xv = x.value().data();
  std::vector<double> mean(c, 0.0), istd(c, 0.0);
  if (mode == Mode::Train) {
    std::vector<double> var(c, 0.0);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* base = xv + (b * c + ch) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) mean[ch] += base[i];
      }
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(count);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* base = xv + (b * c + ch) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
          double dlt = base[i] - mean[ch];
          var[ch] += dlt * dlt;
        }
      }
    for (std::size_t ch = 0; ch < c; ++ch) {
      var[ch] /= static_cast<double>(count);
      istd[ch] = 1.0 / std::sqrt(var[ch] + eps);
    }
    if (update_running) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        state.running_mean[ch] =
            (1.0 - momentum) * state.running_mean[ch] + momentum * mean[ch];
        state.running_var[ch] =
            (1.0 - momentum) * state.running_var[ch] + momentum * var[ch];
      }
      state.populated = true;
    }
  } else {
    if (!state.populated)
      throw StateError("spatial_batch_norm: eval mode before running stats exist");
    mean = state.running_mean;
    for (std::size_t ch = 0; ch < c; ++ch)
      istd[ch] = 1.0 / std::sqrt(state.running_var[ch] + eps);
  }

  const double* gv = gamma.value().data();
  const double* bv = beta.value().data();
  std::vector<double> xhat(x.numel()), y(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* base = xv + (b * c + ch) * spatial;
      double* hb = xhat.data() + (b * c + ch) * spatial;
      double* yb = y.data() + (b * c + ch) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        hb[i] = (base[i] - mean[ch]) * istd[ch];
        yb[i] = gv[ch] * hb[i] + bv[ch];
      }
    }

  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  const bool train = (mode == Mode::Train);
  return detail::make_op(
      x.shape(), std::move(y), {px, pg, pb},
      [px, pg, pb, n, c, spatial, count, train, istd = std::move(istd),
       xhat = std::move(xhat)](detail::Node& node) {
        const double* dy = node.grad.data();
        const double* gv = pg->value.data();
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double* dyb = dy + (b * c + ch) * spatial;
            const double* hb = xhat.data() + (b * c + ch) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
              sum_dy[ch] += dyb[i];
              sum_dy_xhat[ch] += dyb[i] * hb[i];
            }
          }
        if (pg->requires_grad) {
          auto& g = pg->grad_buf();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_dy_xhat[ch];
        }
        if (pb->requires_grad) {
          auto& g = pb->grad_buf();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_dy[ch];
        }
        if (px->requires_grad) {
          auto& g = px->grad_buf();
          const double inv_n = 1.0 / static_cast<double>(count);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const double* dyb = dy + (b * c + ch) * spatial;
              const double* hb = xhat.data() + (b * c + ch) * spatial;
              double* gb = g.data() + (b * c + ch) * spatial;
              for (std::size_t i = 0; i < spatial; ++i) {
                double dlt = dyb[i];
                if (train)
                  dlt -= inv_n * (sum_dy[ch] + hb[i] * sum_dy_xhat[ch]);
                gb[i] += gv[ch] * istd[ch] * dlt;
              }
            }
        }
      });
}

// Concatenates along the channel axis.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 5 || b.rank() != 5)
    throw DimensionError("concat_channels: rank-5 inputs required");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3] || as[4] != bs[4])
    throw DimensionError("concat_channels: shapes " + shape_str(as) + " and " +
                         shape_str(bs) + " differ outside channels");
  const std::size_t n = as[0], ca = as[1], cb = bs[1],
                    spatial = as[2] * as[3] * as[4];
  std::vector<double> y(n * (ca + cb) * spatial);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(a.value().begin() + i * ca * spatial,
              a.value().begin() + (i + 1) * ca * spatial,
              y.begin() + i * (ca + cb) * spatial);
    std::copy(b.value().begin() + i * cb * spatial,
              b.value().begin() + (i + 1) * cb * spatial,
              y.begin() + (i * (ca + cb) + ca) * spatial);
  }
  auto pa = a.node(), pb = b.node();
  return detail::make_op(
      {n, ca + cb, as[2], as[3], as[4]}, std::move(y), {pa, pb},
      [pa, pb, n, ca, cb, spatial](detail::Node& node) {
        const double* dy = node.grad.data();
        for (std::size_t i = 0; i < n; ++i) {
          if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            for (std::size_t j = 0; j < ca * spatial; ++j)
              g[i * ca * spatial + j] += dy[i * (ca + cb) * spatial + j];
          }
          if (pb->requires_grad) {
            auto& g = pb->grad_buf();
            for (std::size_t j = 0; j < cb * spatial; ++j)
              g[i * cb * spatial + j] +=
                  dy[(i * (ca + cb) + ca) * spatial + j];
          }
        }
      });
}

}  // namespace nsat

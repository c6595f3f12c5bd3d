#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "nsat/errors.hpp"
#include "nsat/tensor.hpp"

namespace nsat {

enum class Mode { Train, Eval };

// Running statistics for one batch-norm site. Buffers start at the identity
// transform (mean 0, var 1) and are only trusted once populated.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  bool populated = false;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}

  static BatchNormState identity(std::size_t channels) {
    BatchNormState s(channels);
    s.populated = true;
    return s;
  }
};

// Normalizes each channel (column) of x over the set axis. Train mode uses
// batch statistics of the valid rows (population variance, eps-regularized)
// and updates running stats with momentum 0.1; eval mode applies the stored
// running transform. Rows outside `valid` are padding: their output is zero
// and they contribute neither statistics nor gradients.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, Mode mode, BatchNormState& state,
                         const RowSpans* valid = nullptr, double eps = 1e-5,
                         double momentum = 0.1, bool update_running = true) {
  if (x.rank() != 2)
    throw DimensionError("batch_norm: rank-2 input required, got " +
                         shape_str(x.shape()));
  const std::size_t m = x.rows(), c = x.cols();
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("batch_norm: gamma/beta length mismatch");
  if (state.running_mean.size() != c)
    throw StateError("batch_norm: state sized for " +
                     std::to_string(state.running_mean.size()) +
                     " channels, input has " + std::to_string(c));

  RowSpans all = RowSpans::whole(m);
  const RowSpans& rs = valid ? *valid : all;
  const std::size_t n = rs.valid_rows();
  if (n < 1) throw EmptySetError("batch_norm: no valid rows");

  const double* xv = x.value().data();
  const double* gv = gamma.value().data();
  const double* bv = beta.value().data();

  std::vector<double> mean(c, 0.0), istd(c, 0.0);
  if (mode == Mode::Train) {
    for (auto& [off, cnt] : rs.spans)
      for (std::size_t i = off; i < off + cnt; ++i)
        for (std::size_t j = 0; j < c; ++j) mean[j] += xv[i * c + j];
    for (std::size_t j = 0; j < c; ++j) mean[j] /= static_cast<double>(n);
    std::vector<double> var(c, 0.0);
    for (auto& [off, cnt] : rs.spans)
      for (std::size_t i = off; i < off + cnt; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          double d = xv[i * c + j] - mean[j];
          var[j] += d * d;
        }
    for (std::size_t j = 0; j < c; ++j) {
      var[j] /= static_cast<double>(n);
      istd[j] = 1.0 / std::sqrt(var[j] + eps);
    }
    if (update_running) {
      for (std::size_t j = 0; j < c; ++j) {
        state.running_mean[j] =
            (1.0 - momentum) * state.running_mean[j] + momentum * mean[j];
        state.running_var[j] =
            (1.0 - momentum) * state.running_var[j] + momentum * var[j];
      }
      state.populated = true;
    }
  } else {
    if (!state.populated)
      throw StateError("batch_norm: eval mode before running stats exist");
    mean = state.running_mean;
    for (std::size_t j = 0; j < c; ++j)
      istd[j] = 1.0 / std::sqrt(state.running_var[j] + eps);
  }

  std::vector<double> xhat(m * c, 0.0), y(m * c, 0.0);
  for (auto& [off, cnt] : rs.spans)
    for (std::size_t i = off; i < off + cnt; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        double h = (xv[i * c + j] - mean[j]) * istd[j];
        xhat[i * c + j] = h;
        y[i * c + j] = gv[j] * h + bv[j];
      }

  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  auto spans = rs.spans;
  const bool train = (mode == Mode::Train);
  return detail::make_op(
      x.shape(), std::move(y), {px, pg, pb},
      [px, pg, pb, spans, c, n, train, istd = std::move(istd),
       xhat = std::move(xhat)](detail::Node& node) {
        const double* dy = node.grad.data();
        const double* gv = pg->value.data();
        // per-channel reductions over valid rows only
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (auto& [off, cnt] : spans)
          for (std::size_t i = off; i < off + cnt; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              sum_dy[j] += dy[i * c + j];
              sum_dy_xhat[j] += dy[i * c + j] * xhat[i * c + j];
            }
        if (pg->requires_grad) {
          auto& g = pg->grad_buf();
          for (std::size_t j = 0; j < c; ++j) g[j] += sum_dy_xhat[j];
        }
        if (pb->requires_grad) {
          auto& g = pb->grad_buf();
          for (std::size_t j = 0; j < c; ++j) g[j] += sum_dy[j];
        }
        if (px->requires_grad) {
          auto& g = px->grad_buf();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (auto& [off, cnt] : spans)
            for (std::size_t i = off; i < off + cnt; ++i)
              for (std::size_t j = 0; j < c; ++j) {
                double d = dy[i * c + j];
                if (train)
                  d -= inv_n * (sum_dy[j] + xhat[i * c + j] * sum_dy_xhat[j]);
                g[i * c + j] += gv[j] * istd[j] * d;
              }
        }
      });
}

// Mean over supervised entries of the binary cross entropy, evaluated in
// logit form. Masked entries get exactly zero gradient; an all-masked input
// is defined as loss 0.
inline Tensor masked_bce(const Tensor& logits, const std::vector<int>& labels,
                         const std::vector<std::uint8_t>& mask) {
  const std::size_t n = logits.numel();
  if (labels.size() != n || mask.size() != n)
    throw DimensionError("masked_bce: logits/labels/mask lengths differ");
  std::size_t supervised = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    ++supervised;
    double z = logits.value()[i];
    double y = labels[i] ? 1.0 : 0.0;
    // max(z,0) - z*y + log(1 + exp(-|z|))
    loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  if (supervised == 0) return Tensor::scalar(0.0);
  loss /= static_cast<double>(supervised);

  auto pl = logits.node();
  std::vector<double> zval = logits.value();
  return detail::make_op(
      {1}, {loss}, {pl},
      [pl, labels, mask, supervised, zval = std::move(zval)](detail::Node& node) {
        auto& g = pl->grad_buf();
        const double w = node.grad[0] / static_cast<double>(supervised);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!mask[i]) continue;
          double z = zval[i];
          double p = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                              : std::exp(z) / (1.0 + std::exp(z));
          g[i] += w * (p - (labels[i] ? 1.0 : 0.0));
        }
      });
}

}  // namespace nsat

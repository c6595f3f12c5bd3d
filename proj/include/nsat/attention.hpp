#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "nsat/errors.hpp"
#include "nsat/nn.hpp"
#include "nsat/rng.hpp"
#include "nsat/tensor.hpp"

namespace nsat {

namespace testhook {
// Negative control for the verify command: replaces the channel shuffle
// with a row-dependent permutation, which destroys permutation
// equivariance. Never set outside verification.
inline bool corrupt_channel_shuffle = false;
}  // namespace testhook

// Shared-KQV scaled dot-product attention, softmax(X·X^T/sqrt(c))·sigma(X),
// applied independently inside each row span (one span per bag). Rows outside
// every span are padding: output zero, no gradient.
inline Tensor span_scaled_dot_attn(const Tensor& x, const RowSpans& rs,
                                   Activation sigma, double leaky_alpha = 0.1) {
  if (x.rank() != 2)
    throw DimensionError("scaled_dot_attn: rank-2 input required, got " +
                         shape_str(x.shape()));
  const std::size_t m = x.rows(), c = x.cols();
  if (c < 1) throw DimensionError("scaled_dot_attn: zero-width input");
  for (auto& [off, cnt] : rs.spans)
    if (cnt == 0) throw EmptySetError("scaled_dot_attn: empty set in batch");

  for (double v : x.value())
    if (std::isnan(v)) throw NumericError("scaled_dot_attn: NaN in input");

  const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));
  const double* xv = x.value().data();

  auto act = [sigma, leaky_alpha](double v) {
    switch (sigma) {
      case Activation::Elu: return v >= 0.0 ? v : std::expm1(v);
      case Activation::LeakyRelu: return v >= 0.0 ? v : leaky_alpha * v;
      case Activation::Sigmoid:
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                        : std::exp(v) / (1.0 + std::exp(v));
    }
    return v;
  };
  auto dact = [sigma, leaky_alpha](double v) {
    switch (sigma) {
      case Activation::Elu: return v >= 0.0 ? 1.0 : std::exp(v);
      case Activation::LeakyRelu: return v >= 0.0 ? 1.0 : leaky_alpha;
      case Activation::Sigmoid: {
        double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                            : std::exp(v) / (1.0 + std::exp(v));
        return s * (1.0 - s);
      }
    }
    return 1.0;
  };

  std::vector<double> y(m * c, 0.0);
  // saved for backward: per-span softmax matrices plus sigma(x), sigma'(x)
  std::vector<double> soft;
  std::vector<std::size_t> soft_off(rs.spans.size());
  std::vector<double> val(m * c, 0.0), dval(m * c, 0.0);

  for (std::size_t k = 0; k < rs.spans.size(); ++k) {
    auto [off, n] = rs.spans[k];
    soft_off[k] = soft.size();
    soft.resize(soft.size() + n * n);
    double* s = soft.data() + soft_off[k];
    const double* xs = xv + off * c;
    // gram, scale, softmax — same kernels as the composed public ops
    std::vector<double> gram(n * n);
    detail::kernel_matmul_nt(xs, xs, gram.data(), n, c, n, false);
    for (double& gv : gram) gv *= inv_sqrt_c;
    detail::kernel_softmax_rows(gram.data(), s, n, n);
    for (std::size_t i = off; i < off + n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        val[i * c + j] = act(xv[i * c + j]);
        dval[i * c + j] = dact(xv[i * c + j]);
      }
    detail::kernel_matmul(s, val.data() + off * c, y.data() + off * c, n, n, c,
                          false);
  }

  auto px = x.node();
  auto spans = rs.spans;
  return detail::make_op(
      x.shape(), std::move(y), {px},
      [px, spans, c, inv_sqrt_c, soft = std::move(soft),
       soft_off = std::move(soft_off), val = std::move(val),
       dval = std::move(dval)](detail::Node& node) {
        auto& gx = px->grad_buf();
        const double* dy = node.grad.data();
        const double* xv = px->value.data();
        for (std::size_t k = 0; k < spans.size(); ++k) {
          auto [off, n] = spans[k];
          const double* s = soft.data() + soft_off[k];
          const double* dys = dy + off * c;
          const double* vs = val.data() + off * c;
          const double* xs = xv + off * c;
          // dV = S^T · dY
          std::vector<double> dv(n * c, 0.0);
          detail::kernel_matmul_tn_acc(s, dys, dv.data(), n, n, c);
          // dS = dY · V^T
          std::vector<double> ds(n * n);
          detail::kernel_matmul_nt(dys, vs, ds.data(), n, c, n, false);
          // softmax backward, then the 1/sqrt(c) scale
          std::vector<double> dg(n * n);
          for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j)
              dot += ds[i * n + j] * s[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
              dg[i * n + j] =
                  s[i * n + j] * (ds[i * n + j] - dot) * inv_sqrt_c;
          }
          // G = X·X^T  =>  dX += dG·X + dG^T·X ; plus dX += sigma'(X) ⊙ dV
          double* gxs = gx.data() + off * c;
          detail::kernel_matmul(dg.data(), xs, gxs, n, n, c, true);
          detail::kernel_matmul_tn_acc(dg.data(), xs, gxs, n, n, c);
          const double* dvs = dval.data() + off * c;
          for (std::size_t i = 0; i < n * c; ++i) gxs[i] += dvs[i] * dv[i];
        }
      });
}

// Whole-set form: one bag, every row participates.
inline Tensor scaled_dot_attn(const Tensor& x, Activation sigma = Activation::Elu,
                              double leaky_alpha = 0.1) {
  if (x.rank() != 2)
    throw DimensionError("scaled_dot_attn: rank-2 input required, got " +
                         shape_str(x.shape()));
  if (x.rows() == 0)
    throw EmptySetError("scaled_dot_attn: a bag must contain at least one instance");
  return span_scaled_dot_attn(x, RowSpans::whole(x.rows()), sigma, leaky_alpha);
}

// Column permutation realising the channel shuffle: each row viewed as a
// g x (c/g) grid is transposed and re-flattened.
inline std::vector<std::size_t> shuffle_permutation(std::size_t c, std::size_t g) {
  if (g == 0 || c % g != 0)
    throw ConfigError("channel_shuffle: channels " + std::to_string(c) +
                      " not divisible into " + std::to_string(g) + " groups");
  const std::size_t cg = c / g;
  std::vector<std::size_t> perm(c);
  for (std::size_t p = 0; p < c; ++p) perm[p] = (p % g) * cg + p / g;
  return perm;
}

inline Tensor channel_shuffle(const Tensor& x, std::size_t g) {
  auto perm = shuffle_permutation(x.cols(), g);
  if (!testhook::corrupt_channel_shuffle) return permute_cols(x, perm);

  // corrupted path: rotate each row's permutation by the row index
  const std::size_t m = x.rows(), c = x.cols();
  std::vector<double> v(m * c);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < c; ++j)
      v[i * c + j] = x.value()[i * c + perm[(j + i) % c]];
  auto px = x.node();
  return detail::make_op({m, c}, std::move(v), {px},
                         [px, perm, m, c](detail::Node& node) {
                           auto& gx = px->grad_buf();
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < c; ++j)
                               gx[i * c + perm[(j + i) % c]] +=
                                   node.grad[i * c + j];
                         });
}

// Parameters of one Group Shuffle Attention layer.
struct GSAParams {
  std::size_t c = 0;
  std::size_t g = 1;
  std::vector<Tensor> W;  // g square matrices of side c/g
  Tensor bn_gamma, bn_beta;
  BatchNormState bn_state;

  std::size_t group_width() const { return c / g; }

  std::size_t projection_param_count() const {
    std::size_t n = 0;
    for (const auto& w : W) n += w.numel();
    return n;
  }

  static GSAParams init(std::size_t c, std::size_t g, std::mt19937_64& rng) {
    if (g == 0 || c % g != 0)
      throw ConfigError("GSA: c=" + std::to_string(c) + " not divisible by g=" +
                        std::to_string(g));
    GSAParams p;
    p.c = c;
    p.g = g;
    const std::size_t cg = c / g;
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(cg));
    for (std::size_t i = 0; i < g; ++i) {
      std::vector<double> w(cg * cg);
      for (double& v : w) v = std_dev * normal(rng);
      p.W.push_back(Tensor::from({cg, cg}, std::move(w), true));
    }
    p.bn_gamma = Tensor::full({c}, 1.0, true);
    p.bn_beta = Tensor::zeros({c}, true);
    p.bn_state = BatchNormState(c);
    return p;
  }
};

// Per-group linear transform: group i of the channels is multiplied by W_i.
// Equivalent to one multiplication by the block-diagonal matrix diag(W_1..W_g).
inline Tensor group_linear(const Tensor& x, const GSAParams& params) {
  if (x.rank() != 2 || x.cols() != params.c)
    throw ConfigError("group_linear: input width " +
                      std::to_string(x.rank() == 2 ? x.cols() : 0) +
                      " does not match configured c=" + std::to_string(params.c));
  const std::size_t cg = params.group_width();
  std::vector<Tensor> parts;
  parts.reserve(params.g);
  for (std::size_t i = 0; i < params.g; ++i)
    parts.push_back(matmul(slice_cols(x, i * cg, (i + 1) * cg), params.W[i]));
  return concat_cols(std::span<const Tensor>(parts));
}

// One GSA layer: per-group linear transform and in-group attention, channel
// shuffle, residual connection, batch norm over the set axis.
inline Tensor gsa_forward(const Tensor& x, GSAParams& params, Mode mode,
                          const RowSpans* spans = nullptr,
                          Activation sigma = Activation::Elu,
                          bool update_running = true) {
  if (x.rank() != 2 || x.cols() != params.c)
    throw ConfigError("gsa_forward: input width mismatch, expected c=" +
                      std::to_string(params.c));
  if (x.rows() == 0) throw EmptySetError("gsa_forward: empty set");
  RowSpans all = RowSpans::whole(x.rows());
  const RowSpans& rs = spans ? *spans : all;

  const std::size_t cg = params.group_width();
  std::vector<Tensor> parts;
  parts.reserve(params.g);
  for (std::size_t i = 0; i < params.g; ++i) {
    Tensor xi = matmul(slice_cols(x, i * cg, (i + 1) * cg), params.W[i]);
    parts.push_back(span_scaled_dot_attn(xi, rs, sigma));
  }
  Tensor cat = concat_cols(std::span<const Tensor>(parts));
  Tensor shuffled = channel_shuffle(cat, params.g);
  Tensor res = add(shuffled, x);
  return batch_norm(res, params.bn_gamma, params.bn_beta, mode, params.bn_state,
                    spans, 1e-5, 0.1, update_running);
}

// Set Attention Transformer configuration: an L-layer stack of GSA operators
// over H channels split into g groups.
struct SATConfig {
  std::size_t L = 3;
  std::size_t H = 256;
  std::size_t g = 8;
  Activation sigma = Activation::Elu;

  void validate() const {
    if (g == 0 || H % g != 0)
      throw ConfigError("SAT: H=" + std::to_string(H) + " not divisible by g=" +
                        std::to_string(g));
  }
};

inline std::vector<GSAParams> sat_init(const SATConfig& cfg,
                                       std::mt19937_64& rng) {
  cfg.validate();
  std::vector<GSAParams> layers;
  layers.reserve(cfg.L);
  for (std::size_t i = 0; i < cfg.L; ++i)
    layers.push_back(GSAParams::init(cfg.H, cfg.g, rng));
  return layers;
}

inline Tensor sat_forward(const Tensor& x, const SATConfig& cfg,
                          std::vector<GSAParams>& layers, Mode mode,
                          const RowSpans* spans = nullptr,
                          bool update_running = true) {
  if (x.rank() != 2 || x.cols() != cfg.H)
    throw ConfigError("sat_forward: input width " +
                      std::to_string(x.rank() == 2 ? x.cols() : 0) +
                      " does not match H=" + std::to_string(cfg.H));
  if (layers.size() != cfg.L)
    throw ConfigError("sat_forward: expected " + std::to_string(cfg.L) +
                      " layers, got " + std::to_string(layers.size()));
  Tensor h = x;
  for (auto& layer : layers)
    h = gsa_forward(h, layer, mode, spans, cfg.sigma, update_running);
  return h;
}

// Reference multi-head attention projections (Q, K, V, output), instantiated
// only to count parameters against GSA.
struct MHAReference {
  Tensor wq, wk, wv, wo;

  static MHAReference init(std::size_t c) {
    MHAReference m;
    m.wq = Tensor::zeros({c, c});
    m.wk = Tensor::zeros({c, c});
    m.wv = Tensor::zeros({c, c});
    m.wo = Tensor::zeros({c, c});
    return m;
  }

  std::size_t projection_param_count() const {
    return wq.numel() + wk.numel() + wv.numel() + wo.numel();
  }
};

// Ratio of MHA to GSA projection parameters, counted from live buffers.
inline double param_count_ratio(std::size_t c, std::size_t g) {
  std::mt19937_64 rng(0);
  MHAReference mha = MHAReference::init(c);
  GSAParams gsa = GSAParams::init(c, g, rng);
  return static_cast<double>(mha.projection_param_count()) /
         static_cast<double>(gsa.projection_param_count());
}

}  // namespace nsat

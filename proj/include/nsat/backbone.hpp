#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "nsat/conv3d.hpp"
#include "nsat/errors.hpp"
#include "nsat/rng.hpp"
#include "nsat/tensor.hpp"

namespace nsat {

// 3D DenseNet-BC style encoder configuration. Stage channel arithmetic:
// after a block of r layers, c grows by r*k; each transition divides by
// theta (floor) and halves the spatial edge.
struct BackboneConfig {
  std::size_t growth = 2;                  // k
  std::vector<std::size_t> repeats = {1, 1};
  std::size_t theta = 2;                   // compression divisor
  std::size_t bottleneck = 4;              // B: 1x1x1 conv widens to B*k
  double alpha = 0.1;                      // leaky ReLU slope
  std::size_t stem_width = 4;              // stem conv output channels (2k)
  std::size_t edge = 8;                    // input voxels per side

  void validate() const {
    if (theta < 1) throw ConfigError("backbone: theta must be >= 1");
    if (repeats.empty()) throw ConfigError("backbone: no dense blocks");
    if (growth == 0 || bottleneck == 0 || stem_width == 0)
      throw ConfigError("backbone: zero-sized layer configuration");
    const std::size_t transitions = repeats.size() - 1;
    std::size_t div = std::size_t{1} << transitions;
    if (edge % div != 0)
      throw ConfigError("backbone: edge " + std::to_string(edge) +
                        " not divisible by 2^" + std::to_string(transitions));
    if (edge / div == 0) throw ConfigError("backbone: edge too small");
  }

  std::size_t feature_width() const {
    validate();
    std::size_t c = stem_width;
    for (std::size_t s = 0; s < repeats.size(); ++s) {
      c += repeats[s] * growth;
      if (s + 1 < repeats.size()) c /= theta;
    }
    return c;
  }

  // FPR experiment: k=16, blocks [4,4,4,4], 48^3 input.
  static BackboneConfig fpr() {
    BackboneConfig c;
    c.growth = 16;
    c.repeats = {4, 4, 4, 4};
    c.stem_width = 32;
    c.edge = 48;
    return c;
  }

  // Malignancy experiment: k=32, blocks [3,8,4], 32^3 input.
  static BackboneConfig malignancy() {
    BackboneConfig c;
    c.growth = 32;
    c.repeats = {3, 8, 4};
    c.stem_width = 64;
    c.edge = 32;
    return c;
  }

  // Desk-scale configuration used throughout the tests.
  static BackboneConfig tiny() { return BackboneConfig{}; }
};

struct ConvBnParams {
  Tensor gamma, beta;
  BatchNormState state;
  Tensor w;
};

struct DenseLayerParams {
  ConvBnParams a;  // BN -> act -> 1^3 conv to B*k
  ConvBnParams b;  // BN -> act -> 3^3 conv to k
};

struct TransitionParams {
  ConvBnParams t;  // BN -> act -> 1^3 conv to floor(c/theta), then avg pool
};

struct BackboneParams {
  BackboneConfig cfg;
  Tensor stem_w;
  std::vector<std::vector<DenseLayerParams>> blocks;
  std::vector<TransitionParams> transitions;
  Tensor final_gamma, final_beta;
  BatchNormState final_state;

  static BackboneParams init(const BackboneConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    auto conv_w = [&rng](std::size_t co, std::size_t ci, std::size_t k) {
      const double fan_in = static_cast<double>(ci * k * k * k);
      const double std_dev = std::sqrt(2.0 / fan_in);
      std::vector<double> w(co * ci * k * k * k);
      for (double& v : w) v = std_dev * normal(rng);
      return Tensor::from({co, ci, k, k, k}, std::move(w), true);
    };
    auto bn_unit = [&](std::size_t co, std::size_t ci, std::size_t k) {
      ConvBnParams p;
      p.gamma = Tensor::full({ci}, 1.0, true);
      p.beta = Tensor::zeros({ci}, true);
      p.state = BatchNormState(ci);
      p.w = conv_w(co, ci, k);
      return p;
    };

    BackboneParams bp;
    bp.cfg = cfg;
    bp.stem_w = conv_w(cfg.stem_width, 1, 3);
    std::size_t c = cfg.stem_width;
    for (std::size_t s = 0; s < cfg.repeats.size(); ++s) {
      std::vector<DenseLayerParams> block;
      for (std::size_t l = 0; l < cfg.repeats[s]; ++l) {
        DenseLayerParams dl;
        dl.a = bn_unit(cfg.bottleneck * cfg.growth, c, 1);
        dl.b = bn_unit(cfg.growth, cfg.bottleneck * cfg.growth, 3);
        block.push_back(std::move(dl));
        c += cfg.growth;
      }
      bp.blocks.push_back(std::move(block));
      if (s + 1 < cfg.repeats.size()) {
        TransitionParams tp;
        tp.t = bn_unit(c / cfg.theta, c, 1);
        bp.transitions.push_back(std::move(tp));
        c /= cfg.theta;
      }
    }
    bp.final_gamma = Tensor::full({c}, 1.0, true);
    bp.final_beta = Tensor::zeros({c}, true);
    bp.final_state = BatchNormState(c);
    return bp;
  }
};

// DenseNet-BC composite function with concatenation: channels grow by k,
// spatial extent is preserved.
inline Tensor dense_layer(const Tensor& x, DenseLayerParams& p,
                          const BackboneConfig& cfg, Mode mode,
                          bool update_running = true) {
  Tensor h = spatial_batch_norm(x, p.a.gamma, p.a.beta, mode, p.a.state, 1e-5,
                                0.1, update_running);
  h = leaky_relu(h, cfg.alpha);
  h = conv3d(h, p.a.w, 1, 0);
  h = spatial_batch_norm(h, p.b.gamma, p.b.beta, mode, p.b.state, 1e-5, 0.1,
                         update_running);
  h = leaky_relu(h, cfg.alpha);
  h = conv3d(h, p.b.w, 1, 1);
  return concat_channels(x, h);
}

// Compression to floor(c/theta) channels and 2x spatial down-sampling.
inline Tensor transition(const Tensor& x, TransitionParams& p,
                         const BackboneConfig& cfg, Mode mode,
                         bool update_running = true) {
  if (x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0 || x.shape()[4] % 2 != 0)
    throw ConfigError("transition: spatial extent must be even, got " +
                      shape_str(x.shape()));
  Tensor h = spatial_batch_norm(x, p.t.gamma, p.t.beta, mode, p.t.state, 1e-5,
                                0.1, update_running);
  h = leaky_relu(h, cfg.alpha);
  h = conv3d(h, p.t.w, 1, 0);
  return avg_pool3d(h, 2, 2);
}

// Full encoder over a batch of patches [n, 1, e, e, e] -> features [n, F].
inline Tensor backbone_forward_batch(const Tensor& x, BackboneParams& bp,
                                     Mode mode, bool update_running = true) {
  if (x.rank() != 5 || x.shape()[1] != 1)
    throw ConfigError("backbone: expected [n,1,e,e,e] input, got " +
                      shape_str(x.shape()));
  const std::size_t e = bp.cfg.edge;
  if (x.shape()[2] != e || x.shape()[3] != e || x.shape()[4] != e)
    throw ConfigError("backbone: patch edge " + std::to_string(x.shape()[2]) +
                      " does not match configured " + std::to_string(e));
  Tensor h = conv3d(x, bp.stem_w, 1, 1);
  for (std::size_t s = 0; s < bp.blocks.size(); ++s) {
    for (auto& layer : bp.blocks[s])
      h = dense_layer(h, layer, bp.cfg, mode, update_running);
    if (s < bp.transitions.size())
      h = transition(h, bp.transitions[s], bp.cfg, mode, update_running);
  }
  h = spatial_batch_norm(h, bp.final_gamma, bp.final_beta, mode, bp.final_state,
                         1e-5, 0.1, update_running);
  h = leaky_relu(h, bp.cfg.alpha);
  return global_avg_pool(h);
}

}  // namespace nsat

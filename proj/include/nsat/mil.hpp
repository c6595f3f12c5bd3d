#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nsat/attention.hpp"
#include "nsat/backbone.hpp"
#include "nsat/errors.hpp"
#include "nsat/nn.hpp"
#include "nsat/optim.hpp"
#include "nsat/rng.hpp"
#include "nsat/tensor.hpp"
#include "nsat/volume.hpp"

namespace nsat {

enum class PayloadKind { Feature, Voxel };

struct Instance {
  PayloadKind kind = PayloadKind::Feature;
  std::vector<double> feature;
  Volume patch;

  static Instance from_feature(std::vector<double> f) {
    Instance i;
    i.kind = PayloadKind::Feature;
    i.feature = std::move(f);
    return i;
  }
  static Instance from_patch(Volume v) {
    Instance i;
    i.kind = PayloadKind::Voxel;
    i.patch = std::move(v);
    return i;
  }
};

// One patient's set of instances. mask=1 marks supervised instances; a
// masked-out instance's label is never read.
struct InstanceBag {
  std::string id;
  std::vector<Instance> instances;
  std::vector<int> labels;
  std::vector<std::uint8_t> mask;

  std::size_t size() const { return instances.size(); }

  PayloadKind payload_kind() const {
    if (instances.empty()) throw EmptySetError("bag " + id + " is empty");
    PayloadKind k = instances.front().kind;
    for (const auto& inst : instances)
      if (inst.kind != k)
        throw ContractError("bag " + id + " mixes payload kinds");
    return k;
  }

  void validate() const {
    if (instances.empty()) throw EmptySetError("bag " + id + " is empty");
    if (labels.size() != size() || mask.size() != size())
      throw ContractError("bag " + id +
                          ": labels/mask/instances lengths differ");
    payload_kind();
  }
};

struct BagPrediction {
  std::string id;
  std::vector<double> logits;
  std::vector<double> probabilities;
};

// ---------------------------------------------------------------------------
// set batching
// ---------------------------------------------------------------------------

// Bags padded to the largest set size in the batch. Attention softmax and
// batch-norm statistics exclude padded rows entirely; padded positions
// receive no gradient.
struct SetBatch {
  Tensor x;                          // (bags * max_n) x width
  RowSpans spans;                    // valid rows, one span per bag
  std::vector<std::uint8_t> valid;   // row validity mask
};

inline SetBatch batch_sets(std::span<const Tensor> bag_features) {
  if (bag_features.empty()) throw ContractError("batch_sets: no bags");
  std::size_t max_n = 0;
  const std::size_t width = bag_features.front().cols();
  for (const auto& f : bag_features) {
    if (f.rank() != 2 || f.cols() != width)
      throw DimensionError("batch_sets: inconsistent feature widths");
    if (f.rows() == 0) throw EmptySetError("batch_sets: empty bag");
    max_n = std::max(max_n, f.rows());
  }
  RowSpans rs;
  rs.total_rows = bag_features.size() * max_n;
  for (std::size_t b = 0; b < bag_features.size(); ++b)
    rs.spans.emplace_back(b * max_n, bag_features[b].rows());
  SetBatch out;
  out.x = scatter_rows(bag_features, rs, width);
  out.spans = rs;
  out.valid = rs.validity_mask();
  return out;
}

// ---------------------------------------------------------------------------
// NoduleSAT: shared backbone -> SAT -> shared linear head
// ---------------------------------------------------------------------------

struct NoduleSAT {
  SATConfig sat_cfg;
  std::vector<GSAParams> sat_layers;
  std::optional<BackboneParams> backbone;
  Tensor head_w;  // H x 1
  Tensor head_b;  // 1
  std::size_t max_bag_size = 128;

  static NoduleSAT init(const SATConfig& sat_cfg,
                        const std::optional<BackboneConfig>& bb_cfg,
                        std::uint64_t seed) {
    sat_cfg.validate();
    NoduleSAT m;
    m.sat_cfg = sat_cfg;
    auto rng = substream(seed, "init");
    if (bb_cfg) {
      if (bb_cfg->feature_width() != sat_cfg.H)
        throw ConfigError("backbone feature width " +
                          std::to_string(bb_cfg->feature_width()) +
                          " does not match SAT H=" + std::to_string(sat_cfg.H));
      m.backbone = BackboneParams::init(*bb_cfg, rng);
    }
    m.sat_layers = sat_init(sat_cfg, rng);
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(sat_cfg.H));
    std::vector<double> w(sat_cfg.H);
    for (double& v : w) v = std_dev * normal(rng);
    m.head_w = Tensor::from({sat_cfg.H, 1}, std::move(w), true);
    m.head_b = Tensor::zeros({1}, true);
    return m;
  }

  // Deterministic traversal of every trainable tensor with its checkpoint name.
  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
    if (backbone) {
      auto& bb = *backbone;
      fn("backbone.stem.W", bb.stem_w);
      for (std::size_t s = 0; s < bb.blocks.size(); ++s)
        for (std::size_t l = 0; l < bb.blocks[s].size(); ++l) {
          auto prefix = "backbone.block" + std::to_string(s) + ".layer" +
                        std::to_string(l) + ".";
          auto& dl = bb.blocks[s][l];
          fn(prefix + "bn1.gamma", dl.a.gamma);
          fn(prefix + "bn1.beta", dl.a.beta);
          fn(prefix + "conv1.W", dl.a.w);
          fn(prefix + "bn2.gamma", dl.b.gamma);
          fn(prefix + "bn2.beta", dl.b.beta);
          fn(prefix + "conv2.W", dl.b.w);
        }
      for (std::size_t t = 0; t < bb.transitions.size(); ++t) {
        auto prefix = "backbone.trans" + std::to_string(t) + ".";
        fn(prefix + "bn.gamma", bb.transitions[t].t.gamma);
        fn(prefix + "bn.beta", bb.transitions[t].t.beta);
        fn(prefix + "conv.W", bb.transitions[t].t.w);
      }
      fn("backbone.final_bn.gamma", bb.final_gamma);
      fn("backbone.final_bn.beta", bb.final_beta);
    }
    for (std::size_t i = 0; i < sat_layers.size(); ++i) {
      auto prefix = "sat.layer" + std::to_string(i) + ".";
      for (std::size_t j = 0; j < sat_layers[i].W.size(); ++j)
        fn(prefix + "group" + std::to_string(j) + ".W", sat_layers[i].W[j]);
      fn(prefix + "bn.gamma", sat_layers[i].bn_gamma);
      fn(prefix + "bn.beta", sat_layers[i].bn_beta);
    }
    fn("head.W", head_w);
    fn("head.b", head_b);
  }

  void visit_bn_states(
      const std::function<void(const std::string&, BatchNormState&)>& fn) {
    if (backbone) {
      auto& bb = *backbone;
      for (std::size_t s = 0; s < bb.blocks.size(); ++s)
        for (std::size_t l = 0; l < bb.blocks[s].size(); ++l) {
          auto prefix = "backbone.block" + std::to_string(s) + ".layer" +
                        std::to_string(l) + ".";
          fn(prefix + "bn1", bb.blocks[s][l].a.state);
          fn(prefix + "bn2", bb.blocks[s][l].b.state);
        }
      for (std::size_t t = 0; t < bb.transitions.size(); ++t)
        fn("backbone.trans" + std::to_string(t) + ".bn",
           bb.transitions[t].t.state);
      fn("backbone.final_bn", bb.final_state);
    }
    for (std::size_t i = 0; i < sat_layers.size(); ++i)
      fn("sat.layer" + std::to_string(i) + ".bn", sat_layers[i].bn_state);
  }
};

enum class TrainMode { EndToEnd, FrozenBackbone, FrozenBN };

namespace detail {

// Per-bag feature tensors: passthrough for precomputed features, shared
// backbone over all instances for voxel payloads.
inline std::vector<Tensor> bag_features(std::span<const InstanceBag> bags,
                                        NoduleSAT& model, Mode bn_mode,
                                        TrainMode tmode, bool update_running) {
  PayloadKind kind = bags.front().payload_kind();
  for (const auto& b : bags) {
    b.validate();
    if (b.payload_kind() != kind)
      throw ContractError("batch mixes payload kinds across bags");
    if (b.size() > model.max_bag_size)
      throw ConfigError("bag " + b.id + " exceeds max size " +
                        std::to_string(model.max_bag_size));
  }

  std::vector<Tensor> feats;
  if (kind == PayloadKind::Feature) {
    for (const auto& b : bags) {
      std::vector<double> data;
      data.reserve(b.size() * model.sat_cfg.H);
      for (const auto& inst : b.instances) {
        if (inst.feature.size() != model.sat_cfg.H)
          throw ConfigError("bag " + b.id + ": feature width " +
                            std::to_string(inst.feature.size()) +
                            " does not match H=" +
                            std::to_string(model.sat_cfg.H));
        data.insert(data.end(), inst.feature.begin(), inst.feature.end());
      }
      feats.push_back(Tensor::from({b.size(), model.sat_cfg.H}, std::move(data)));
    }
    return feats;
  }

  if (!model.backbone)
    throw ContractError("voxel payloads require a backbone");
  auto& bb = *model.backbone;
  const std::size_t e = bb.cfg.edge;
  std::size_t total = 0;
  for (const auto& b : bags) total += b.size();
  std::vector<double> vox;
  vox.reserve(total * e * e * e);
  for (const auto& b : bags)
    for (const auto& inst : b.instances) {
      if (inst.patch.dims != std::array<std::size_t, 3>{e, e, e})
        throw ConfigError("bag " + b.id + ": patch dims do not match backbone edge " +
                          std::to_string(e));
      vox.insert(vox.end(), inst.patch.voxels.begin(), inst.patch.voxels.end());
    }
  Tensor batch = Tensor::from({total, 1, e, e, e}, std::move(vox));
  Mode bb_mode = (tmode == TrainMode::EndToEnd) ? bn_mode : Mode::Eval;
  bool bb_update = (tmode == TrainMode::EndToEnd) && update_running;
  Tensor f = backbone_forward_batch(batch, bb, bb_mode, bb_update);
  if (tmode == TrainMode::FrozenBackbone) f = f.detached();
  std::size_t row = 0;
  for (const auto& b : bags) {
    feats.push_back(slice_rows(f, row, b.size()));
    row += b.size();
  }
  return feats;
}

struct BatchedLogits {
  Tensor logits;    // (bags * max_n) x 1, padded rows meaningless
  RowSpans spans;
};

inline BatchedLogits forward_logits(std::span<const InstanceBag> bags,
                                    NoduleSAT& model, Mode bn_mode,
                                    TrainMode tmode, bool update_running) {
  auto feats = bag_features(bags, model, bn_mode, tmode, update_running);
  SetBatch sb = batch_sets(feats);
  Mode sat_mode = (tmode == TrainMode::FrozenBN) ? Mode::Eval : bn_mode;
  bool sat_update = (tmode != TrainMode::FrozenBN) && update_running;
  Tensor h = sat_forward(sb.x, model.sat_cfg, model.sat_layers, sat_mode,
                         &sb.spans, sat_update);
  Tensor logits = add_row_bias(matmul(h, model.head_w), model.head_b);
  return {logits, sb.spans};
}

}  // namespace detail

// Forward pass over one bag: per-instance features, SAT refinement, shared
// linear head. Masked instances participate fully; only the loss ignores them.
inline BagPrediction nodulesat_forward(NoduleSAT& model, const InstanceBag& bag,
                                       Mode mode = Mode::Eval) {
  bag.validate();
  std::span<const InstanceBag> one(&bag, 1);
  auto fwd = detail::forward_logits(one, model, mode, TrainMode::EndToEnd,
                                    /*update_running=*/mode == Mode::Train);
  BagPrediction pred;
  pred.id = bag.id;
  for (std::size_t i = 0; i < bag.size(); ++i) {
    double z = fwd.logits.at(i, 0);
    pred.logits.push_back(z);
    pred.probabilities.push_back(z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                          : std::exp(z) / (1.0 + std::exp(z)));
  }
  return pred;
}

inline Adam make_optimizer(NoduleSAT& model) {
  Adam opt;
  model.visit_params([&](const std::string& name, Tensor& t) {
    opt.add(name, t);
  });
  return opt;
}

// One training step over a batch of bags: forward, masked BCE averaged over
// the batch's supervised instances, one Adam update. An all-masked batch is
// a no-op with loss 0.
inline double train_bag_batch(std::span<const InstanceBag> bags,
                              NoduleSAT& model, Adam& opt, TrainMode tmode,
                              double lr) {
  if (bags.empty()) throw ContractError("train_bag_batch: no bags");
  auto fwd = detail::forward_logits(bags, model, Mode::Train, tmode,
                                    /*update_running=*/true);
  const std::size_t rows = fwd.logits.rows();
  std::vector<int> labels(rows, 0);
  std::vector<std::uint8_t> mask(rows, 0);
  for (std::size_t b = 0; b < bags.size(); ++b) {
    auto [off, cnt] = fwd.spans.spans[b];
    for (std::size_t i = 0; i < cnt; ++i) {
      labels[off + i] = bags[b].mask[i] ? bags[b].labels[i] : 0;
      mask[off + i] = bags[b].mask[i];
    }
  }
  bool any = false;
  for (auto m : mask) any = any || (m != 0);
  if (!any) return 0.0;

  Tensor loss = masked_bce(fwd.logits, labels, mask);
  opt.zero_grad();
  loss.backward();
  const bool freeze_bn = (tmode == TrainMode::FrozenBN);
  for (auto& e : opt.entries()) {
    if (!e.param.has_grad()) continue;
    if (freeze_bn && e.name.find("bn") != std::string::npos) continue;
    adam_step(e.param, e.param.grad(), e.state, lr, e.name);
  }
  return loss.item();
}

// Forward-difference probe of the context mechanism: perturb one instance's
// payload and report the largest logit change among the *other* instances.
inline double context_sensitivity_probe(NoduleSAT& model, const InstanceBag& bag,
                                        std::size_t instance_idx,
                                        double delta = 1e-3) {
  if (instance_idx >= bag.size())
    throw ContractError("context probe: instance index out of range");
  BagPrediction base = nodulesat_forward(model, bag, Mode::Eval);
  InstanceBag perturbed = bag;
  auto& inst = perturbed.instances[instance_idx];
  if (inst.kind == PayloadKind::Feature) {
    for (double& v : inst.feature) v += delta;
  } else {
    for (double& v : inst.patch.voxels) v += delta;
  }
  BagPrediction moved = nodulesat_forward(model, perturbed, Mode::Eval);
  double worst = 0.0;
  for (std::size_t i = 0; i < bag.size(); ++i) {
    if (i == instance_idx) continue;
    worst = std::max(worst, std::abs(moved.logits[i] - base.logits[i]));
  }
  return worst;
}

}  // namespace nsat

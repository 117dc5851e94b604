#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gaam/attention.hpp"
#include "gaam/autograd.hpp"
#include "gaam/data.hpp"
#include "gaam/optim.hpp"

namespace gaam {

// ============================================================================
// Convolutional distillation and classifier head
// ============================================================================

template <typename T>
struct ConvLayer {
  Var<T> weight;  // (C_out, C_in, 3, 3)
  Var<T> bias;    // (C_out)
};

inline constexpr std::size_t kConvKernel = 3;
inline constexpr std::size_t kConvPadding = 1;

// 3x3 / stride 1 / padding 1 convolutions, each followed by ReLU. The
// context map (H, W) is treated as a single input channel; H and W are preserved.
template <typename T>
Var<T> conv_stack(const Var<T>& context, std::span<const ConvLayer<T>> layers) {
  const Shape& s = context.shape();
  if (s.size() != 2 || s[0] == 0 || s[1] == 0) throw DimensionError("conv_stack: expected a non-empty (H, W) map");
  Var<T> h = reshape(context, {1, s[0], s[1]});
  for (const auto& layer : layers) h = relu(conv2d(h, layer.weight, layer.bias, kConvPadding));
  return h;
}

// Global average pool over (H, W), then features . W + b.
template <typename T>
Var<T> classify(const Var<T>& features, const Var<T>& weight, const Var<T>& bias) {
  const Shape& s = features.shape();
  if (s.size() != 3) throw DimensionError("classify: expected (C, H, W) features");
  const std::size_t c = s[0];
  if (weight.value().rank() != 2 || weight.shape()[0] != c) {
    throw DimensionError("classify: weight must be (" + std::to_string(c) + ", classes)");
  }
  Var<T> pooled = reshape(reduce_mean(reshape(features, {c, s[1] * s[2]}), 1), {1, c});
  return matmul(pooled, weight) + bias;
}

// ============================================================================
// Losses (batch-averaged, fused with analytic gradients)
// ============================================================================

namespace detail {

template <typename T>
void check_logits(const Var<T>& logits, std::span<const std::uint32_t> labels, const char* op) {
  if (logits.value().rank() != 2 || logits.shape()[0] != labels.size() || labels.empty()) {
    throw DimensionError(std::string(op) + ": logits must be (batch, classes) with one label per row");
  }
  for (std::uint32_t y : labels) {
    if (y >= logits.shape()[1]) throw ContractError(std::string(op) + ": label " + std::to_string(y) + " out of range");
  }
}

// Row-wise log-softmax.
template <typename T>
Array<T> log_softmax_rows(const Array<T>& z) {
  const std::size_t b = z.shape()[0], k = z.shape()[1];
  Array<T> out(z.shape());
  for (std::size_t i = 0; i < b; ++i) {
    T m = z.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, z.at(i, j));
    T s = T(0);
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z.at(i, j) - m);
    const T lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) = z.at(i, j) - lse;
  }
  return out;
}

}  // namespace detail

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::uint32_t> labels) {
  detail::check_logits(logits, labels, "cross_entropy");
  const Array<T> lp = detail::log_softmax_rows(logits.value());
  const std::size_t b = labels.size();
  T loss = T(0);
  for (std::size_t i = 0; i < b; ++i) loss -= lp.at(i, labels[i]);
  loss /= static_cast<T>(b);
  std::vector<std::uint32_t> ys(labels.begin(), labels.end());
  return make_op<T>("cross_entropy", Array<T>::scalar(loss), {logits},
                    [lp, ys](const Array<T>& g, std::vector<NodePtr<T>>& ps) {
                      Array<T>& gz = ps[0]->ensure_grad();
                      const std::size_t b = ys.size(), k = lp.shape()[1];
                      const T scale = g[0] / static_cast<T>(b);
                      for (std::size_t i = 0; i < b; ++i) {
                        for (std::size_t j = 0; j < k; ++j) {
                          gz.at(i, j) += scale * (std::exp(lp.at(i, j)) - (j == ys[i] ? T(1) : T(0)));
                        }
                      }
                    });
}

// -(1 - p_t)^gamma * log(p_t), batch-averaged.
template <typename T>
Var<T> focal_loss(const Var<T>& logits, std::span<const std::uint32_t> labels, T gamma = T(2.5)) {
  detail::check_logits(logits, labels, "focal_loss");
  if (!(gamma >= T(0))) throw ContractError("focal_loss: gamma must be non-negative");
  const Array<T> lp = detail::log_softmax_rows(logits.value());
  const std::size_t b = labels.size();
  T loss = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    const T logp = lp.at(i, labels[i]);
    const T q = -std::expm1(logp);  // 1 - p_t without cancellation
    loss -= std::pow(q, gamma) * logp;
  }
  loss /= static_cast<T>(b);
  std::vector<std::uint32_t> ys(labels.begin(), labels.end());
  return make_op<T>("focal_loss", Array<T>::scalar(loss), {logits},
                    [lp, ys, gamma](const Array<T>& g, std::vector<NodePtr<T>>& ps) {
                      Array<T>& gz = ps[0]->ensure_grad();
                      const std::size_t b = ys.size(), k = lp.shape()[1];
                      const T scale = g[0] / static_cast<T>(b);
                      for (std::size_t i = 0; i < b; ++i) {
                        const T logp = lp.at(i, ys[i]);
                        const T p = std::exp(logp);
                        const T q = -std::expm1(logp);
                        // dL/dz_j = [gamma q^(gamma-1) p log p - q^gamma] (1{j=t} - p_j)
                        T first = T(0);
                        if (gamma != T(0) && q > T(0)) first = gamma * std::pow(q, gamma - T(1)) * p * logp;
                        const T coef = first - std::pow(q, gamma);
                        for (std::size_t j = 0; j < k; ++j) {
                          const T pj = std::exp(lp.at(i, j));
                          gz.at(i, j) += scale * coef * ((j == ys[i] ? T(1) : T(0)) - pj);
                        }
                      }
                    });
}

// ============================================================================
// Decoder configuration and model
// ============================================================================

enum class LossKind { kFocal, kCrossEntropy };

inline const char* to_string(LossKind k) { return k == LossKind::kFocal ? "focal" : "cross_entropy"; }

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "focal") return LossKind::kFocal;
  if (s == "cross_entropy") return LossKind::kCrossEntropy;
  throw ConfigError("unknown loss '" + s + "' (expected focal or cross_entropy)");
}

struct DecoderConfig {
  AttentionKind attention = AttentionKind::kGaamV1;
  std::size_t layers = 8;  // N
  std::size_t dim = 64;    // d
  std::size_t num_classes = 4;
  std::size_t gaam_heads = 8;
  CombineMode combine = CombineMode::kStackRows;
  std::size_t norm_axis = 1;
  std::size_t num_gaussians = 3;
  std::size_t block_layers = 2;
  std::size_t mha_heads = 8;
  std::size_t query_heads = 8;
  std::size_t kv_heads = 2;
  std::vector<std::size_t> conv_channels{8, 16};

  MechanismDescriptor descriptor() const {
    MechanismDescriptor m;
    m.kind = attention;
    m.model_dim = dim;
    m.gaam_heads = gaam_heads;
    // Blocks are always shape-preserving.
    m.combine = attention == AttentionKind::kGaussianBlock ? CombineMode::kSplitSubspaces : combine;
    m.num_gaussians = num_gaussians;
    m.block_layers = block_layers;
    m.mha_heads = mha_heads;
    m.query_heads = query_heads;
    m.kv_heads = kv_heads;
    return m;
  }

  MultiGaamConfig gaam_config() const {
    MultiGaamConfig c;
    c.num_heads = attention == AttentionKind::kGaamV2 ? 1 : gaam_heads;
    c.norm_axis = norm_axis;
    c.combine = combine;
    c.kind = attention == AttentionKind::kMixture || attention == AttentionKind::kGaussianBlock ? HeadKind::kMixture
                                                                                               : HeadKind::kPlain;
    c.num_gaussians = num_gaussians;
    if (attention == AttentionKind::kGaussianBlock) c.combine = CombineMode::kSplitSubspaces;
    return c;
  }

  void validate() const {
    if (layers == 0 || dim == 0) throw ConfigError("DecoderConfig: N and d must be >= 1");
    if (num_classes < 2) throw ConfigError("DecoderConfig: need at least 2 classes");
    if (norm_axis > 1) throw ConfigError("DecoderConfig: norm_axis must be 0 or 1");
    if (conv_channels.empty()) throw ConfigError("DecoderConfig: conv channel plan is empty");
    for (std::size_t c : conv_channels) {
      if (c == 0) throw ConfigError("DecoderConfig: conv channels must be >= 1");
    }
    switch (attention) {
      case AttentionKind::kMha:
        if (mha_heads == 0 || dim % mha_heads != 0) throw ConfigError("DecoderConfig: d must be divisible by mha_heads");
        break;
      case AttentionKind::kGqa:
      case AttentionKind::kGqgaam:
        if (query_heads == 0 || dim % query_heads != 0) {
          throw ConfigError("DecoderConfig: d must be divisible by query_heads");
        }
        descriptor().gqa().validate();
        if (attention == AttentionKind::kGqgaam) {
          gaam_config().validate(dim);
          if (combine == CombineMode::kConcatFeatures && gaam_heads != 1) {
            throw ConfigError("DecoderConfig: gqgaam needs a GAAM stage that keeps d features (not concat_features)");
          }
        }
        break;
      case AttentionKind::kGct: break;
      default: gaam_config().validate(dim);
    }
  }
};

// Pooled encoder embedding (N, d) -> attention -> conv stack -> logits.
template <typename T>
class GatDecoder {
 public:
  struct Output {
    Var<T> logits;  // (1, classes)
    std::optional<AttentionMap> map;
  };

  GatDecoder(DecoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const Rng root(seed);
    Rng attn_rng = root.fork(101);
    Rng head_rng = root.fork(102);
    build_attention(attn_rng);
    std::size_t cin = 1;
    for (std::size_t i = 0; i < cfg_.conv_channels.size(); ++i) {
      const std::size_t cout = cfg_.conv_channels[i];
      const std::string p = "conv" + std::to_string(i);
      const Array<T> w = xavier_init<T>({cout, cin * kConvKernel * kConvKernel}, head_rng);
      conv_.push_back({store_.add(p + ".weight", w.reshaped({cout, cin, kConvKernel, kConvKernel})),
                       store_.add(p + ".bias", Array<T>({cout}, T(0)))});
      cin = cout;
    }
    cls_w_ = store_.add("classifier.weight", xavier_init<T>({cin, cfg_.num_classes}, head_rng));
    cls_b_ = store_.add("classifier.bias", Array<T>({cfg_.num_classes}, T(0)));
  }

  const DecoderConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  std::size_t attention_param_count() const {
    std::size_t n = 0;
    for (const auto& name : store_.names()) {
      if (name.rfind("attn.", 0) == 0) n += store_.at(name).size();
    }
    return n;
  }

  // Parameters of the Gaussian stage only (zero for mha/gqa).
  std::size_t gaam_param_count() const {
    std::size_t n = 0;
    for (const auto& name : store_.names()) {
      if (name.rfind("attn.gaam", 0) == 0 || name.rfind("attn.block", 0) == 0 || name.rfind("attn.gct", 0) == 0) {
        n += store_.at(name).size();
      }
    }
    return n;
  }

  // Attention stage alone: (N, d) -> context map (H, W).
  Var<T> attend(const Var<T>& x, std::optional<AttentionMap>* map = nullptr) const {
    switch (cfg_.attention) {
      case AttentionKind::kMha: return mha_forward(x, mha_).output;
      case AttentionKind::kGqa: return gqa_forward(x, gqa_).output;
      case AttentionKind::kGqgaam: {
        GqgaamOutput<T> r = gqgaam_forward(x, gaam_, gqa_);
        if (map) *map = std::move(r.map);
        return r.output;
      }
      case AttentionKind::kGaussianBlock: {
        std::vector<AttentionMap> maps;
        Var<T> out = gaussian_block_forward(x, block_, &maps);
        if (map && !maps.empty()) {
          AttentionMap avg = maps[0];
          for (std::size_t i = 1; i < maps.size(); ++i) {
            for (std::size_t k = 0; k < avg.weights.size(); ++k) avg.weights[k] += maps[i].weights[k];
          }
          for (auto& v : avg.weights.storage()) v /= static_cast<double>(maps.size());
          avg.mechanism = "gaussian_block";
          *map = std::move(avg);
        }
        return out;
      }
      case AttentionKind::kGct: {
        const Moments<T> mo = sample_moments(x, cfg_.norm_axis, T(1e-8));
        const Var<T> xn = normalize_features(x, mo.mean, mo.var, T(1e-5));
        Var<T> w = gct_weights(xn, T(0), gct_sigma2_);
        if (map) *map = make_map(w, "gct", x.shape()[0], 1);
        return x * w;
      }
      default: {
        GaamResult<T> r = multi_head_forward(x, gaam_);
        if (map) *map = std::move(r.map);
        return r.output;
      }
    }
  }

  Output forward(const Array<T>& pooled) const {
    if (pooled.shape() != Shape{cfg_.layers, cfg_.dim}) {
      throw DimensionError("GatDecoder: expected pooled input " + shape_str({cfg_.layers, cfg_.dim}) + ", got " +
                           shape_str(pooled.shape()));
    }
    Output out;
    const Var<T> context = attend(Var<T>(pooled), &out.map);
    const Var<T> feats = conv_stack<T>(context, conv_);
    out.logits = classify(feats, cls_w_, cls_b_);
    return out;
  }

  Output forward(const EmbeddingStack& s) const { return forward(mean_pool_time<T>(s)); }

 private:
  void build_attention(Rng& rng) {
    const std::size_t d = cfg_.dim;
    switch (cfg_.attention) {
      case AttentionKind::kMha: mha_ = MhaWeights<T>::create(store_, "attn.mha", d, cfg_.mha_heads, rng); break;
      case AttentionKind::kGqa: gqa_ = GqaWeights<T>::create(store_, "attn.gqa", cfg_.descriptor().gqa(), rng); break;
      case AttentionKind::kGqgaam:
        gaam_ = MultiHeadGaam<T>::create(store_, "attn.gaam", cfg_.gaam_config(), d);
        gqa_ = GqaWeights<T>::create(store_, "attn.gqa", cfg_.descriptor().gqa(), rng);
        break;
      case AttentionKind::kGaussianBlock:
        for (std::size_t i = 0; i < cfg_.block_layers; ++i) {
          block_.push_back(MultiHeadGaam<T>::create(store_, "attn.block" + std::to_string(i), cfg_.gaam_config(), d));
        }
        break;
      case AttentionKind::kGct: gct_sigma2_ = store_.add("attn.gct.sigma2", Array<T>::scalar(T(1))); break;
      default: gaam_ = MultiHeadGaam<T>::create(store_, "attn.gaam", cfg_.gaam_config(), d);
    }
  }

  DecoderConfig cfg_;
  ParamStore<T> store_;
  MultiHeadGaam<T> gaam_;
  std::vector<MultiHeadGaam<T>> block_;
  MhaWeights<T> mha_;
  GqaWeights<T> gqa_;
  Var<T> gct_sigma2_;
  std::vector<ConvLayer<T>> conv_;
  Var<T> cls_w_, cls_b_;
};

// ============================================================================
// Training and evaluation
// ============================================================================

struct TrainConfig {
  std::size_t epochs = 35;
  double lr = 1e-4;
  double weight_decay = 0.1;
  std::size_t batch_size = 8;
  LossKind loss = LossKind::kFocal;
  double gamma = 2.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("TrainConfig: lr must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("TrainConfig: weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (loss == LossKind::kFocal && !(gamma > 0.0)) throw ConfigError("TrainConfig: gamma must be > 0");
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

// Training hit a non-finite value. The model has been rolled back to the
// parameters from before the failing step.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(std::size_t epoch, const std::string& why)
      : NumericError("training diverged in epoch " + std::to_string(epoch) + ": " + why), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

// Pooled inputs and labels, computed once per dataset.
template <typename T>
struct PooledSet {
  std::vector<Array<T>> inputs;
  std::vector<std::uint32_t> labels;

  static PooledSet from(const std::vector<EmbeddingStack>& samples) {
    PooledSet p;
    for (const auto& s : samples) {
      p.inputs.push_back(mean_pool_time<T>(s));
      p.labels.push_back(s.label);
    }
    return p;
  }
  std::size_t size() const { return inputs.size(); }
};

template <typename T>
Var<T> batch_loss(const GatDecoder<T>& model, const PooledSet<T>& data, std::span<const std::size_t> batch,
                  const TrainConfig& tcfg) {
  std::vector<Var<T>> rows;
  std::vector<std::uint32_t> labels;
  for (std::size_t i : batch) {
    rows.push_back(model.forward(data.inputs[i]).logits);
    labels.push_back(data.labels[i]);
  }
  const Var<T> logits = rows.size() == 1 ? rows[0] : concat(rows, 0);
  return tcfg.loss == LossKind::kFocal ? focal_loss<T>(logits, labels, static_cast<T>(tcfg.gamma))
                                       : cross_entropy<T>(logits, labels);
}

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::uint32_t> predictions;
  std::vector<AttentionMap> maps;
};

inline std::uint32_t argmax_row(std::span<const double> logits) {
  return static_cast<std::uint32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

template <typename T>
EvalResult evaluate(const GatDecoder<T>& model, const PooledSet<T>& data, bool keep_maps = true) {
  EvalResult r;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto out = model.forward(data.inputs[i]);
    const auto z = out.logits.value().template cast<double>();
    const std::uint32_t pred = argmax_row(z.data());
    r.predictions.push_back(pred);
    correct += pred == data.labels[i];
    if (keep_maps && out.map) r.maps.push_back(std::move(*out.map));
  }
  r.accuracy = data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
  return r;
}

template <typename T>
EvalResult evaluate(const GatDecoder<T>& model, const std::vector<EmbeddingStack>& samples, bool keep_maps = true) {
  return evaluate(model, PooledSet<T>::from(samples), keep_maps);
}

// Mini-batch Adam with decoupled weight decay. The per-epoch order is a
// seeded shuffle, so equal seeds give identical histories.
template <typename T>
std::vector<EpochMetrics> fit(GatDecoder<T>& model, const PooledSet<T>& train_set, const PooledSet<T>& val_set,
                              const TrainConfig& tcfg) {
  tcfg.validate();
  if (train_set.size() == 0) throw ContractError("train: empty training set");
  const Rng root(tcfg.seed);
  ParamStore<T>& store = model.params();
  std::vector<EpochMetrics> history;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle = root.fork(1000 + epoch);
    for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[shuffle.below(i + 1)]);

    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += tcfg.batch_size) {
      const std::span<const std::size_t> batch(order.data() + b, std::min(tcfg.batch_size, order.size() - b));
      std::vector<Array<T>> snapshot;
      for (const auto& name : store.names()) snapshot.push_back(store.at(name).value());
      try {
        store.zero_grad();
        const Var<T> loss = batch_loss(model, train_set, batch, tcfg);
        backward(loss);
        store.adam_step(tcfg.lr, tcfg.weight_decay);
        loss_sum += static_cast<double>(loss.item()) * static_cast<double>(batch.size());
      } catch (const NumericError& e) {
        std::size_t k = 0;
        for (const auto& name : store.names()) store.at(name).mutable_value() = snapshot[k++];
        throw TrainingDiverged(epoch, e.what());
      }
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(train_set.size());
    m.val_accuracy = val_set.size() ? evaluate(model, val_set, false).accuracy : 0.0;
    history.push_back(m);
  }
  return history;
}

template <typename T>
struct TrainedModel {
  GatDecoder<T> model;
  std::vector<EpochMetrics> history;
};

template <typename T>
TrainedModel<T> train(const std::vector<EmbeddingStack>& train_samples, const std::vector<EmbeddingStack>& val_samples,
                      const DecoderConfig& dcfg, const TrainConfig& tcfg) {
  if (train_samples.empty()) throw ContractError("train: empty dataset");
  for (const auto& s : train_samples) {
    if (s.layers != dcfg.layers || s.dim != dcfg.dim) {
      throw DimensionError("train: sample shape (N=" + std::to_string(s.layers) + ", d=" + std::to_string(s.dim) +
                           ") does not match decoder (N=" + std::to_string(dcfg.layers) +
                           ", d=" + std::to_string(dcfg.dim) + ")");
    }
    if (s.label >= dcfg.num_classes) throw ContractError("train: label out of range");
  }
  TrainedModel<T> out{GatDecoder<T>(dcfg, tcfg.seed), {}};
  out.history = fit(out.model, PooledSet<T>::from(train_samples), PooledSet<T>::from(val_samples), tcfg);
  return out;
}

}  // namespace gaam

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "gaam/autograd.hpp"
#include "gaam/optim.hpp"

namespace gaam {

// ============================================================================
// Gaussian adaptive attention (single head)
// ============================================================================

// Smallest |xi| accepted by the Gaussian weight; below it the head is rejected.
inline constexpr double kXiRejectBelow = 1e-6;
// Sign-preserving offset added to xi in the Gaussian denominator.
inline constexpr double kXiGuard = 1e-8;

// Learnable mean offset and scaled variance over d features. Initialized to
// delta = 0, xi = 2. The two epsilons guard |var| and the normalization sqrt.
template <typename T>
struct GaamHead {
  Var<T> delta;
  Var<T> xi;
  T eps_var = T(1e-8);
  T eps_norm = T(1e-5);

  static GaamHead create(std::size_t dim, T xi_init = T(2)) {
    return {Var<T>::parameter(Array<T>({dim}, T(0))), Var<T>::parameter(Array<T>({dim}, xi_init))};
  }

  static GaamHead create(ParamStore<T>& store, const std::string& prefix, std::size_t dim, T xi_init = T(2)) {
    return {store.add(prefix + ".delta", Array<T>({dim}, T(0))), store.add(prefix + ".xi", Array<T>({dim}, xi_init))};
  }

  std::size_t dim() const { return delta.size(); }

  void validate() const {
    if (delta.shape() != xi.shape() || delta.value().rank() != 1) {
      throw DimensionError("GaamHead: delta " + shape_str(delta.shape()) + " and xi " + shape_str(xi.shape()) +
                           " must be equal-length vectors");
    }
    if (!(eps_var > T(0)) || !(eps_norm > T(0))) throw ConfigError("GaamHead: eps guards must be positive");
  }
};

// Per-head Gaussian weights in (0, 1] for positive xi, with enough shape
// information to attribute each row back to an encoder layer.
struct AttentionMap {
  Array<double> weights;
  std::string mechanism;
  // Row r of `weights` belongs to encoder layer r % num_layers.
  std::size_t num_layers = 0;
  std::size_t num_heads = 1;
};

template <typename T>
AttentionMap make_map(const Var<T>& weights, std::string mechanism, std::size_t num_layers, std::size_t num_heads) {
  const Array<T>& w = weights.value();
  Array<double> wd = w.rank() == 1 ? w.template cast<double>().reshaped({1, w.size()}) : w.template cast<double>();
  return {std::move(wd), std::move(mechanism), num_layers, num_heads};
}

template <typename T>
struct Moments {
  Var<T> mean;
  Var<T> var;
};

template <typename T>
struct GaamResult {
  Var<T> output;
  Var<T> weights;
  AttentionMap map;
};

namespace detail {

inline void check_matrix_axis(const Shape& s, std::size_t axis, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a 2-D (rows, features) input, got " + shape_str(s));
  if (axis > 1) throw DimensionError(std::string(op) + ": axis must be 0 or 1");
  if (s[axis] == 0) throw DimensionError(std::string(op) + ": empty normalization axis");
}

// Lifts a feature vector to a single row so the matrix code path applies.
template <typename T>
std::pair<Var<T>, std::size_t> as_matrix(const Var<T>& x, std::size_t axis) {
  if (x.value().rank() == 1) {
    if (axis != 0) throw DimensionError("axis out of range for a 1-D input");
    return {reshape(x, {1, x.size()}), 1};
  }
  return {x, axis};
}

}  // namespace detail

// Mean and biased variance along `axis` (kept as length-1), with
// var := |E[x^2] - E[x]^2| + eps_var.
template <typename T>
Moments<T> sample_moments(const Var<T>& x, std::size_t axis, T eps_var = T(1e-8)) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  if (sp.extent == 0) throw DimensionError("sample_moments: empty axis");
  Var<T> m = reduce_mean(x, axis, true);
  Var<T> sq = reduce_mean(square(x), axis, true);
  Var<T> var = add_scalar(abs(sq - square(m)), eps_var);
  return {m, var};
}

// psi = mean + delta, delta broadcast as a row vector.
template <typename T>
Var<T> adjusted_mean(const Var<T>& mean, const Var<T>& delta) {
  return mean + delta;
}

// (x - psi) / sqrt(var + eps_norm)
template <typename T>
Var<T> normalize_features(const Var<T>& x, const Var<T>& psi, const Var<T>& var, T eps_norm = T(1e-5)) {
  return (x - psi) / sqrt(add_scalar(var, eps_norm));
}

// exp(-x_norm^2 / (2 xi)); the denominator uses xi + sign(xi) * 1e-8.
template <typename T>
Var<T> gaam_weights(const Var<T>& x_norm, const Var<T>& xi) {
  Array<T> guard(xi.shape());
  for (std::size_t i = 0; i < xi.size(); ++i) {
    const T v = xi.value()[i];
    if (!(std::abs(v) >= T(kXiRejectBelow))) {
      throw NumericError("gaam_weights: |xi[" + std::to_string(i) + "]| = " + std::to_string(std::abs(v)) +
                         " is below the " + std::to_string(kXiRejectBelow) + " guard");
    }
    guard[i] = v > T(0) ? T(kXiGuard) : T(-kXiGuard);
  }
  Var<T> denom = scale(xi + Var<T>(std::move(guard)), T(2));
  return exp(neg(square(x_norm) / denom));
}

// One plain head: moments -> offset mean -> normalize -> Gaussian -> Hadamard.
template <typename T>
GaamResult<T> gaam_forward(const Var<T>& x, const GaamHead<T>& head, std::size_t axis = 1) {
  head.validate();
  const bool vector_input = x.value().rank() == 1;
  auto [xm, ax] = detail::as_matrix(x, vector_input ? 0 : axis);
  detail::check_matrix_axis(xm.shape(), ax, "gaam_forward");
  if (head.dim() != xm.shape()[1]) {
    throw DimensionError("gaam_forward: head has " + std::to_string(head.dim()) + " features, input has " +
                         std::to_string(xm.shape()[1]));
  }
  const Moments<T> mo = sample_moments(xm, ax, head.eps_var);
  const Var<T> psi = adjusted_mean(mo.mean, head.delta);
  const Var<T> xn = normalize_features(xm, psi, mo.var, head.eps_norm);
  Var<T> w = gaam_weights(xn, head.xi);
  Var<T> out = xm * w;
  AttentionMap map = make_map(w, "gaam", xm.shape()[0], 1);
  if (vector_input) {
    out = reshape(out, {x.size()});
    w = reshape(w, {x.size()});
  }
  return {out, w, std::move(map)};
}

// ============================================================================
// Gaussian-mixture head
// ============================================================================

// G mean offsets and G scales per feature. The density is the product of G
// Gaussian pdfs of the normalized input, normalized to sum 1 along the axis.
template <typename T>
struct MixtureGaamHead {
  Var<T> mean_offsets;  // (G, d)
  Var<T> scales;        // (G, d), used squared
  T eps = T(1e-8);

  static constexpr double kDefaultScale = std::numbers::sqrt2;

  static MixtureGaamHead create(std::size_t num_gaussians, std::size_t dim, T scale_init = T(kDefaultScale)) {
    return {Var<T>::parameter(Array<T>({num_gaussians, dim}, T(0))),
            Var<T>::parameter(Array<T>({num_gaussians, dim}, scale_init))};
  }

  static MixtureGaamHead create(ParamStore<T>& store, const std::string& prefix, std::size_t num_gaussians,
                                std::size_t dim, T scale_init = T(kDefaultScale)) {
    return {store.add(prefix + ".mean_offsets", Array<T>({num_gaussians, dim}, T(0))),
            store.add(prefix + ".scales", Array<T>({num_gaussians, dim}, scale_init))};
  }

  std::size_t num_gaussians() const { return mean_offsets.shape()[0]; }
  std::size_t dim() const { return mean_offsets.shape()[1]; }

  void validate() const {
    if (mean_offsets.value().rank() != 2 || mean_offsets.shape() != scales.shape()) {
      throw DimensionError("MixtureGaamHead: mean_offsets " + shape_str(mean_offsets.shape()) + " and scales " +
                           shape_str(scales.shape()) + " must share a (G, d) shape");
    }
    if (num_gaussians() < 1) throw ConfigError("MixtureGaamHead: need at least one Gaussian");
    if (!(eps > T(0))) throw ConfigError("MixtureGaamHead: eps must be positive");
  }
};

// Sum over components of log N(y_norm; 0, c^2) with shared moments.
template <typename T>
Var<T> mixture_log_density(const Var<T>& x, const MixtureGaamHead<T>& head, std::size_t axis) {
  head.validate();
  detail::check_matrix_axis(x.shape(), axis, "mixture_gaam_forward");
  if (head.dim() != x.shape()[1]) {
    throw DimensionError("mixture_gaam_forward: head has " + std::to_string(head.dim()) + " features, input has " +
                         std::to_string(x.shape()[1]));
  }
  for (std::size_t i = 0; i < head.scales.size(); ++i) {
    if (!(std::abs(head.scales.value()[i]) >= T(kXiRejectBelow))) {
      throw NumericError("mixture_gaam_forward: scale " + std::to_string(i) + " is zero");
    }
  }
  const Var<T> m = reduce_mean(x, axis, true);
  const Var<T> centered = x - m;
  const Var<T> sd = sqrt(add_scalar(reduce_mean(square(centered), axis, true), head.eps));
  const T half_log_2pi = T(0.5 * std::log(2.0 * std::numbers::pi));
  Var<T> total;
  for (std::size_t g = 0; g < head.num_gaussians(); ++g) {
    const Var<T> offset = slice(head.mean_offsets, 0, g, g + 1);
    const Var<T> c2 = square(slice(head.scales, 0, g, g + 1));
    const Var<T> y = (centered - offset) / sd;
    Var<T> term = neg(square(y) / scale(c2, T(2))) - add_scalar(scale(log(c2), T(0.5)), half_log_2pi);
    total = total.defined() ? total + term : term;
  }
  return total;
}

// Pre-normalization product of component pdfs.
template <typename T>
Var<T> mixture_density(const Var<T>& x, const MixtureGaamHead<T>& head, std::size_t axis = 1) {
  return exp(mixture_log_density(x, head, axis));
}

template <typename T>
GaamResult<T> mixture_gaam_forward(const Var<T>& x, const MixtureGaamHead<T>& head, std::size_t axis = 1) {
  const bool vector_input = x.value().rank() == 1;
  auto [xm, ax] = detail::as_matrix(x, vector_input ? 0 : axis);
  // softmax of the log-density is the density divided by its sum along the axis.
  Var<T> w = softmax(mixture_log_density(xm, head, ax), ax);
  Var<T> out = xm * w;
  AttentionMap map = make_map(w, "mixture_gaam", xm.shape()[0], 1);
  if (vector_input) {
    out = reshape(out, {x.size()});
    w = reshape(w, {x.size()});
  }
  return {out, w, std::move(map)};
}

// ============================================================================
// Multi-head composition and Gaussian block
// ============================================================================

enum class CombineMode { kStackRows, kConcatFeatures, kSplitSubspaces };
enum class HeadKind { kPlain, kMixture };

inline const char* to_string(CombineMode m) {
  switch (m) {
    case CombineMode::kStackRows: return "stack_rows";
    case CombineMode::kConcatFeatures: return "concat_features";
    default: return "split_subspaces";
  }
}

inline CombineMode parse_combine_mode(const std::string& s) {
  if (s == "stack_rows") return CombineMode::kStackRows;
  if (s == "concat_features") return CombineMode::kConcatFeatures;
  if (s == "split_subspaces") return CombineMode::kSplitSubspaces;
  throw ConfigError("unknown combine_mode '" + s + "' (expected stack_rows, concat_features or split_subspaces)");
}

struct MultiGaamConfig {
  std::size_t num_heads = 1;
  std::size_t norm_axis = 1;
  CombineMode combine = CombineMode::kStackRows;
  HeadKind kind = HeadKind::kPlain;
  std::size_t num_gaussians = 1;  // mixture heads only

  // Feature width each head sees for model width d.
  std::size_t head_dim(std::size_t d) const {
    validate(d);
    return combine == CombineMode::kSplitSubspaces ? d / num_heads : d;
  }

  void validate(std::size_t d) const {
    if (num_heads < 1) throw ConfigError("MultiGaamConfig: num_heads must be >= 1");
    if (norm_axis > 1) throw ConfigError("MultiGaamConfig: norm_axis must be 0 or 1");
    if (kind == HeadKind::kMixture && num_gaussians < 1) throw ConfigError("MultiGaamConfig: num_gaussians must be >= 1");
    if (combine == CombineMode::kSplitSubspaces && d % num_heads != 0) {
      throw ConfigError("MultiGaamConfig: split_subspaces needs d (" + std::to_string(d) +
                        ") divisible by num_heads (" + std::to_string(num_heads) + ")");
    }
  }

  bool shape_preserving() const { return combine == CombineMode::kSplitSubspaces || num_heads == 1; }
};

// A bank of heads of one kind, laid out per MultiGaamConfig.
template <typename T>
struct MultiHeadGaam {
  MultiGaamConfig cfg;
  std::vector<GaamHead<T>> plain;
  std::vector<MixtureGaamHead<T>> mixture;

  static MultiHeadGaam create(const MultiGaamConfig& cfg, std::size_t d) {
    MultiHeadGaam m{cfg, {}, {}};
    const std::size_t hd = cfg.head_dim(d);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      if (cfg.kind == HeadKind::kPlain) {
        m.plain.push_back(GaamHead<T>::create(hd));
      } else {
        m.mixture.push_back(MixtureGaamHead<T>::create(cfg.num_gaussians, hd));
      }
    }
    return m;
  }

  static MultiHeadGaam create(ParamStore<T>& store, const std::string& prefix, const MultiGaamConfig& cfg,
                              std::size_t d) {
    MultiHeadGaam m{cfg, {}, {}};
    const std::size_t hd = cfg.head_dim(d);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      const std::string name = prefix + ".head" + std::to_string(h);
      if (cfg.kind == HeadKind::kPlain) {
        m.plain.push_back(GaamHead<T>::create(store, name, hd));
      } else {
        m.mixture.push_back(MixtureGaamHead<T>::create(store, name, cfg.num_gaussians, hd));
      }
    }
    return m;
  }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& h : plain) n += h.delta.size() + h.xi.size();
    for (const auto& h : mixture) n += h.mean_offsets.size() + h.scales.size();
    return n;
  }
};

namespace detail {

template <typename T>
GaamResult<T> apply_head(const Var<T>& x, const GaamHead<T>& h, std::size_t axis) {
  return gaam_forward(x, h, axis);
}
template <typename T>
GaamResult<T> apply_head(const Var<T>& x, const MixtureGaamHead<T>& h, std::size_t axis) {
  return mixture_gaam_forward(x, h, axis);
}

template <typename T, typename Head>
GaamResult<T> multi_head_apply(const Var<T>& x, std::span<const Head> heads, const MultiGaamConfig& cfg,
                               const char* name) {
  if (x.value().rank() != 2) throw DimensionError(std::string(name) + ": expected (rows, features) input");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  cfg.validate(d);
  if (heads.size() != cfg.num_heads) {
    throw ConfigError(std::string(name) + ": config expects " + std::to_string(cfg.num_heads) + " heads, got " +
                      std::to_string(heads.size()));
  }
  const std::size_t hd = cfg.head_dim(d);
  std::vector<Var<T>> outs, weights;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const Var<T> xin = cfg.combine == CombineMode::kSplitSubspaces ? slice(x, 1, h * hd, (h + 1) * hd) : x;
    GaamResult<T> r = apply_head(xin, heads[h], cfg.norm_axis);
    outs.push_back(r.output);
    weights.push_back(r.weights);
  }
  const std::size_t cat_axis = cfg.combine == CombineMode::kStackRows ? 0 : 1;
  Var<T> out = outs.size() == 1 ? outs[0] : concat(outs, cat_axis);
  Var<T> w = weights.size() == 1 ? weights[0] : concat(weights, cat_axis);
  const std::size_t row_heads = cfg.combine == CombineMode::kStackRows ? cfg.num_heads : 1;
  AttentionMap map = make_map(w, name, rows, row_heads);
  return {out, w, std::move(map)};
}

}  // namespace detail

template <typename T>
GaamResult<T> multi_head_gaam(const Var<T>& x, std::span<const GaamHead<T>> heads, const MultiGaamConfig& cfg) {
  if (cfg.kind != HeadKind::kPlain) throw ConfigError("multi_head_gaam: config is for mixture heads");
  return detail::multi_head_apply<T, GaamHead<T>>(x, heads, cfg, "multi_head_gaam");
}

template <typename T>
GaamResult<T> multi_head_mixture_gaam(const Var<T>& x, std::span<const MixtureGaamHead<T>> heads,
                                      const MultiGaamConfig& cfg) {
  if (cfg.kind != HeadKind::kMixture) throw ConfigError("multi_head_mixture_gaam: config is for plain heads");
  return detail::multi_head_apply<T, MixtureGaamHead<T>>(x, heads, cfg, "multi_head_mixture_gaam");
}

template <typename T>
GaamResult<T> multi_head_forward(const Var<T>& x, const MultiHeadGaam<T>& m) {
  if (m.cfg.kind == HeadKind::kPlain) return multi_head_gaam<T>(x, m.plain, m.cfg);
  return multi_head_mixture_gaam<T>(x, m.mixture, m.cfg);
}

// x <- layer(x) + x for each layer in turn. Layers must be shape-preserving.
template <typename T>
Var<T> gaussian_block_forward(const Var<T>& x, const std::vector<MultiHeadGaam<T>>& layers,
                              std::vector<AttentionMap>* maps = nullptr) {
  Var<T> h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].cfg.combine != CombineMode::kSplitSubspaces) {
      throw ConfigError("gaussian_block_forward: layer " + std::to_string(i) +
                        " must use split_subspaces so the residual shapes agree");
    }
    GaamResult<T> r = multi_head_forward(h, layers[i]);
    if (maps) maps->push_back(std::move(r.map));
    h = r.output + h;
  }
  return h;
}

// ============================================================================
// Dot-product baselines: MHA, MQA, GQA, and the GQGAAM composition
// ============================================================================

template <typename T>
struct AttentionOutput {
  Var<T> output;
  Array<T> attn;  // (heads, tokens, tokens) softmax probabilities
};

namespace detail {

template <typename T>
Var<T> scaled_dot_product(const Var<T>& q, const Var<T>& k, const Var<T>& v, Array<T>& attn, std::size_t head) {
  const T inv = T(1) / std::sqrt(static_cast<T>(q.shape()[1]));
  const Var<T> p = softmax(scale(matmul(q, transpose(k)), inv), 1);
  const std::size_t t = p.shape()[0];
  std::copy_n(p.value().data().begin(), t * t, attn.data().begin() + head * t * t);
  return matmul(p, v);
}

template <typename T>
void check_tokens(const Var<T>& x, std::size_t d, const char* op) {
  if (x.value().rank() != 2 || x.shape()[1] != d || x.shape()[0] == 0) {
    throw DimensionError(std::string(op) + ": expected (tokens, " + std::to_string(d) + ") input, got " +
                         shape_str(x.shape()));
  }
}

template <typename T>
void check_weight(const Var<T>& w, std::size_t rows, std::size_t cols, const char* what) {
  if (w.shape() != Shape{rows, cols}) {
    throw DimensionError(std::string(what) + " must be " + shape_str({rows, cols}) + ", got " + shape_str(w.shape()));
  }
}

}  // namespace detail

// Standard multi-head attention with d x d projections split into H heads.
template <typename T>
struct MhaWeights {
  Var<T> w_q, w_k, w_v, w_o;
  std::size_t num_heads = 1;

  std::size_t model_dim() const { return w_q.shape()[0]; }

  static MhaWeights create(std::size_t d, std::size_t heads, Rng& rng) {
    return {Var<T>::parameter(fan_in_uniform_init<T>({d, d}, rng)), Var<T>::parameter(fan_in_uniform_init<T>({d, d}, rng)),
            Var<T>::parameter(fan_in_uniform_init<T>({d, d}, rng)), Var<T>::parameter(fan_in_uniform_init<T>({d, d}, rng)),
            heads};
  }

  static MhaWeights create(ParamStore<T>& store, const std::string& prefix, std::size_t d, std::size_t heads, Rng& rng) {
    MhaWeights w;
    w.w_q = store.add(prefix + ".w_q", fan_in_uniform_init<T>({d, d}, rng));
    w.w_k = store.add(prefix + ".w_k", fan_in_uniform_init<T>({d, d}, rng));
    w.w_v = store.add(prefix + ".w_v", fan_in_uniform_init<T>({d, d}, rng));
    w.w_o = store.add(prefix + ".w_o", fan_in_uniform_init<T>({d, d}, rng));
    w.num_heads = heads;
    return w;
  }
};

template <typename T>
AttentionOutput<T> mha_forward(const Var<T>& x, const MhaWeights<T>& w) {
  const std::size_t d = w.model_dim();
  if (w.num_heads == 0 || d % w.num_heads != 0) {
    throw ConfigError("mha_forward: d (" + std::to_string(d) + ") must be divisible by the head count");
  }
  detail::check_tokens(x, d, "mha_forward");
  for (const Var<T>* p : {&w.w_q, &w.w_k, &w.w_v, &w.w_o}) detail::check_weight(*p, d, d, "MHA projection");
  const std::size_t hd = d / w.num_heads, t = x.shape()[0];
  const Var<T> q = matmul(x, w.w_q), k = matmul(x, w.w_k), v = matmul(x, w.w_v);
  Array<T> attn({w.num_heads, t, t});
  std::vector<Var<T>> heads;
  for (std::size_t h = 0; h < w.num_heads; ++h) {
    const std::size_t b = h * hd, e = b + hd;
    heads.push_back(detail::scaled_dot_product(slice(q, 1, b, e), slice(k, 1, b, e), slice(v, 1, b, e), attn, h));
  }
  Var<T> cat = heads.size() == 1 ? heads[0] : concat(heads, 1);
  return {matmul(cat, w.w_o), std::move(attn)};
}

// Multi-query attention: H query heads over a single shared key/value head.
template <typename T>
struct MqaWeights {
  Var<T> w_q;  // (d, H * hd)
  Var<T> w_k;  // (d, hd)
  Var<T> w_v;  // (d, hd)
  Var<T> w_o;  // (H * hd, d)
  std::size_t num_heads = 1;
};

template <typename T>
AttentionOutput<T> mqa_forward(const Var<T>& x, const MqaWeights<T>& w) {
  const std::size_t d = w.w_q.shape()[0];
  const std::size_t hd = w.w_k.shape()[1];
  detail::check_tokens(x, d, "mqa_forward");
  detail::check_weight(w.w_q, d, w.num_heads * hd, "MQA W_Q");
  detail::check_weight(w.w_v, d, hd, "MQA W_V");
  detail::check_weight(w.w_o, w.num_heads * hd, d, "MQA W_O");
  const std::size_t t = x.shape()[0];
  const Var<T> q = matmul(x, w.w_q), k = matmul(x, w.w_k), v = matmul(x, w.w_v);
  Array<T> attn({w.num_heads, t, t});
  std::vector<Var<T>> heads;
  for (std::size_t h = 0; h < w.num_heads; ++h) {
    heads.push_back(detail::scaled_dot_product(slice(q, 1, h * hd, (h + 1) * hd), k, v, attn, h));
  }
  Var<T> cat = heads.size() == 1 ? heads[0] : concat(heads, 1);
  return {matmul(cat, w.w_o), std::move(attn)};
}

struct GqaConfig {
  std::size_t num_query_heads = 8;
  std::size_t num_kv_heads = 2;
  std::size_t head_dim = 0;
  std::size_t model_dim = 0;

  void validate() const {
    if (num_query_heads == 0 || num_kv_heads == 0 || head_dim == 0 || model_dim == 0) {
      throw ConfigError("GqaConfig: head counts and dimensions must be positive");
    }
    if (num_query_heads % num_kv_heads != 0) {
      throw ConfigError("GqaConfig: query heads (" + std::to_string(num_query_heads) +
                        ") must be divisible by key/value heads (" + std::to_string(num_kv_heads) + ")");
    }
  }

  std::size_t num_params() const {
    return model_dim * num_query_heads * head_dim + 2 * model_dim * num_kv_heads * head_dim +
           num_query_heads * head_dim * model_dim;
  }
};

template <typename T>
struct GqaWeights {
  GqaConfig cfg;
  Var<T> w_q;  // (d, q * hd)
  Var<T> w_k;  // (d, kv * hd)
  Var<T> w_v;  // (d, kv * hd)
  Var<T> w_o;  // (q * hd, d)

  static GqaWeights create(const GqaConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = cfg.model_dim, qd = cfg.num_query_heads * cfg.head_dim, kd = cfg.num_kv_heads * cfg.head_dim;
    return {cfg, Var<T>::parameter(fan_in_uniform_init<T>({d, qd}, rng)),
            Var<T>::parameter(fan_in_uniform_init<T>({d, kd}, rng)),
            Var<T>::parameter(fan_in_uniform_init<T>({d, kd}, rng)),
            Var<T>::parameter(fan_in_uniform_init<T>({qd, d}, rng))};
  }

  static GqaWeights create(ParamStore<T>& store, const std::string& prefix, const GqaConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = cfg.model_dim, qd = cfg.num_query_heads * cfg.head_dim, kd = cfg.num_kv_heads * cfg.head_dim;
    GqaWeights w;
    w.cfg = cfg;
    w.w_q = store.add(prefix + ".w_q", fan_in_uniform_init<T>({d, qd}, rng));
    w.w_k = store.add(prefix + ".w_k", fan_in_uniform_init<T>({d, kd}, rng));
    w.w_v = store.add(prefix + ".w_v", fan_in_uniform_init<T>({d, kd}, rng));
    w.w_o = store.add(prefix + ".w_o", fan_in_uniform_init<T>({qd, d}, rng));
    return w;
  }
};

// Query head h attends with key/value head h / (q / kv).
template <typename T>
AttentionOutput<T> gqa_forward(const Var<T>& x, const GqaWeights<T>& w) {
  const GqaConfig& c = w.cfg;
  c.validate();
  const std::size_t d = c.model_dim, hd = c.head_dim;
  detail::check_tokens(x, d, "gqa_forward");
  detail::check_weight(w.w_q, d, c.num_query_heads * hd, "GQA W_Q");
  detail::check_weight(w.w_k, d, c.num_kv_heads * hd, "GQA W_K");
  detail::check_weight(w.w_v, d, c.num_kv_heads * hd, "GQA W_V");
  detail::check_weight(w.w_o, c.num_query_heads * hd, d, "GQA W_O");
  const std::size_t t = x.shape()[0];
  const std::size_t group = c.num_query_heads / c.num_kv_heads;
  const Var<T> q = matmul(x, w.w_q), k = matmul(x, w.w_k), v = matmul(x, w.w_v);
  std::vector<Var<T>> kh, vh;
  for (std::size_t g = 0; g < c.num_kv_heads; ++g) {
    kh.push_back(slice(k, 1, g * hd, (g + 1) * hd));
    vh.push_back(slice(v, 1, g * hd, (g + 1) * hd));
  }
  Array<T> attn({c.num_query_heads, t, t});
  std::vector<Var<T>> heads;
  for (std::size_t h = 0; h < c.num_query_heads; ++h) {
    const std::size_t g = h / group;
    heads.push_back(detail::scaled_dot_product(slice(q, 1, h * hd, (h + 1) * hd), kh[g], vh[g], attn, h));
  }
  Var<T> cat = heads.size() == 1 ? heads[0] : concat(heads, 1);
  return {matmul(cat, w.w_o), std::move(attn)};
}

template <typename T>
struct GqgaamOutput {
  Var<T> output;
  Array<T> attn;
  AttentionMap map;
};

// Gaussian feature gating first, then grouped-query attention over the gated features.
template <typename T>
GqgaamOutput<T> gqgaam_forward(const Var<T>& x, const MultiHeadGaam<T>& gaam, const GqaWeights<T>& gqa) {
  GaamResult<T> g = multi_head_forward(x, gaam);
  if (g.output.shape()[1] != gqa.cfg.model_dim) {
    throw ConfigError("gqgaam_forward: GAAM stage emits " + std::to_string(g.output.shape()[1]) +
                      " features but GQA expects model_dim " + std::to_string(gqa.cfg.model_dim));
  }
  AttentionOutput<T> a = gqa_forward(g.output, gqa);
  g.map.mechanism = "gqgaam";
  return {a.output, std::move(a.attn), std::move(g.map)};
}

// ============================================================================
// Gaussian context baseline
// ============================================================================

// exp(-(x - mu)^2 / (2 sigma2)). sigma2 is a scalar; make it a parameter to learn it.
template <typename T>
Var<T> gct_weights(const Var<T>& x, T mu, const Var<T>& sigma2) {
  if (sigma2.size() != 1) throw DimensionError("gct_weights: sigma2 must be a scalar");
  if (!(sigma2.value()[0] > T(0))) throw NumericError("gct_weights: sigma2 must be positive");
  const Var<T> s = reshape(sigma2, {});
  return exp(neg(square(add_scalar(x, -mu)) / scale(s, T(2))));
}

template <typename T>
Var<T> gct_weights(const Var<T>& x, T mu, T sigma2, bool learn_sigma = false) {
  return gct_weights(x, mu, Var<T>(Array<T>::scalar(sigma2), learn_sigma));
}

// ============================================================================
// Parameter accounting
// ============================================================================

enum class AttentionKind { kMha, kGaamV1, kGaamV2, kGqa, kGqgaam, kMixture, kGaussianBlock, kGct };

inline const char* to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::kMha: return "mha";
    case AttentionKind::kGaamV1: return "gaam_v1";
    case AttentionKind::kGaamV2: return "gaam_v2";
    case AttentionKind::kGqa: return "gqa";
    case AttentionKind::kGqgaam: return "gqgaam";
    case AttentionKind::kMixture: return "mixture";
    case AttentionKind::kGaussianBlock: return "gaussian_block";
    default: return "gct";
  }
}

inline AttentionKind parse_attention_kind(const std::string& s) {
  for (AttentionKind k : {AttentionKind::kMha, AttentionKind::kGaamV1, AttentionKind::kGaamV2, AttentionKind::kGqa,
                          AttentionKind::kGqgaam, AttentionKind::kMixture, AttentionKind::kGaussianBlock,
                          AttentionKind::kGct}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown attention kind '" + s + "'");
}

// Everything needed to size one attention mechanism.
struct MechanismDescriptor {
  AttentionKind kind = AttentionKind::kGaamV1;
  std::size_t model_dim = 0;
  std::size_t gaam_heads = 8;  // g; gaam_v2 always uses 1
  CombineMode combine = CombineMode::kStackRows;
  std::size_t num_gaussians = 1;
  std::size_t block_layers = 2;
  std::size_t mha_heads = 8;
  std::size_t query_heads = 8;
  std::size_t kv_heads = 2;
  std::size_t head_dim = 0;  // 0 -> model_dim / query_heads
  bool gct_learn_sigma = true;

  std::size_t effective_gaam_heads() const { return kind == AttentionKind::kGaamV2 ? 1 : gaam_heads; }

  GqaConfig gqa() const {
    return {query_heads, kv_heads, head_dim ? head_dim : model_dim / query_heads, model_dim};
  }
};

// Learnable scalars of the attention module alone.
inline std::size_t param_count(const MechanismDescriptor& m) {
  const std::size_t d = m.model_dim;
  const std::size_t g = m.effective_gaam_heads();
  // Full-width heads own 2d scalars each; split heads share d between them.
  const std::size_t plain = m.combine == CombineMode::kSplitSubspaces ? 2 * d : 2 * g * d;
  switch (m.kind) {
    case AttentionKind::kMha: return 4 * d * d;
    case AttentionKind::kGaamV1:
    case AttentionKind::kGaamV2: return plain;
    case AttentionKind::kMixture: return m.num_gaussians * plain;
    case AttentionKind::kGaussianBlock: return m.block_layers * m.num_gaussians * 2 * d;
    case AttentionKind::kGqa: return m.gqa().num_params();
    case AttentionKind::kGqgaam: return m.gqa().num_params() + plain;
    case AttentionKind::kGct: return m.gct_learn_sigma ? 1 : 0;
  }
  return 0;
}

}  // namespace gaam

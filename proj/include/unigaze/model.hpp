#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "unigaze/autodiff.hpp"
#include "unigaze/common.hpp"
#include "unigaze/geometry.hpp"
#include "unigaze/image.hpp"

namespace unigaze {

using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;

struct PatchGrid {
  int image_size = 32;
  int patch_size = 4;
  int channels = 3;

  int per_side() const { return image_size / patch_size; }
  std::size_t n_patches() const { return static_cast<std::size_t>(per_side()) * per_side(); }
  std::size_t patch_dim() const {
    return static_cast<std::size_t>(patch_size) * patch_size * channels;
  }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || channels <= 0 || image_size % patch_size != 0) {
      throw ConfigError("PatchGrid: patch size " + std::to_string(patch_size) +
                        " must divide image size " + std::to_string(image_size));
    }
  }
};

struct MaskPlan {
  std::vector<std::size_t> masked_ids;
  std::vector<std::size_t> visible_ids;
  double ratio = 0.0;
};

/// Architecture hyperparameters. Defaults are the desk-scale configuration.
struct ModelConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 3;
  int depth = 4;
  int heads = 4;
  int embed_dim = 64;
  int mlp_ratio = 4;
  int decoder_depth = 2;
  int decoder_dim = 32;
  int decoder_heads = 4;
  double mask_ratio = 0.75;
  bool pixel_norm = true;
  std::string pooling = "mean";
  double ln_eps = 1e-6;

  PatchGrid grid() const { return {image_size, patch_size, channels}; }

  void validate() const {
    grid().validate();
    if (depth < 0 || decoder_depth < 0 || heads <= 0 || decoder_heads <= 0 || mlp_ratio <= 0) {
      throw ConfigError("ModelConfig: depths must be >= 0 and head counts > 0");
    }
    if (embed_dim <= 0 || embed_dim % heads != 0) {
      throw ConfigError("ModelConfig: embed_dim " + std::to_string(embed_dim) +
                        " not divisible by heads " + std::to_string(heads));
    }
    if (decoder_dim <= 0 || decoder_dim % decoder_heads != 0) {
      throw ConfigError("ModelConfig: decoder_dim not divisible by decoder_heads");
    }
    if (embed_dim % 4 != 0 || decoder_dim % 4 != 0) {
      throw ConfigError("ModelConfig: 2D sin-cos positions need dims divisible by 4");
    }
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) {
      throw ConfigError("ModelConfig: mask_ratio must lie in (0, 1)");
    }
    if (pooling != "mean") throw ConfigError("ModelConfig: only mean pooling is supported");
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Patches and masking

/// Splits an image into raster-ordered patches; each row is one patch with
/// (row, col, channel) ordering inside.
template <typename T = double>
Tensor<T> patchify(const Image& img, const PatchGrid& grid) {
  grid.validate();
  if (img.height != grid.image_size || img.width != grid.image_size ||
      img.channels != grid.channels) {
    throw DataError("patchify: image " + std::to_string(img.height) + "x" +
                    std::to_string(img.width) + "x" + std::to_string(img.channels) +
                    " does not match grid " + std::to_string(grid.image_size) + "x" +
                    std::to_string(grid.image_size) + "x" + std::to_string(grid.channels));
  }
  const int g = grid.per_side(), p = grid.patch_size, c = grid.channels;
  Tensor<T> out(Shape{grid.n_patches(), grid.patch_dim()});
  std::size_t k = 0;
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      for (int y = 0; y < p; ++y) {
        for (int x = 0; x < p; ++x) {
          for (int ch = 0; ch < c; ++ch) out.data[k++] = static_cast<T>(img.at(gy * p + y, gx * p + x, ch));
        }
      }
    }
  }
  return out;
}

template <typename T>
Image unpatchify(const Tensor<T>& patches, const PatchGrid& grid) {
  grid.validate();
  if (patches.rank() != 2 || patches.dim(0) != grid.n_patches() ||
      patches.dim(1) != grid.patch_dim()) {
    throw DataError("unpatchify: expected [" + std::to_string(grid.n_patches()) + "," +
                    std::to_string(grid.patch_dim()) + "], got " + ad::shape_str(patches.shape));
  }
  const int g = grid.per_side(), p = grid.patch_size, c = grid.channels;
  Image img(grid.image_size, grid.image_size, c);
  std::size_t k = 0;
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      for (int y = 0; y < p; ++y) {
        for (int x = 0; x < p; ++x) {
          for (int ch = 0; ch < c; ++ch) img.at(gy * p + y, gx * p + x, ch) = static_cast<double>(patches.data[k++]);
        }
      }
    }
  }
  return img;
}

inline std::size_t masked_count(std::size_t n_patches, double ratio) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n_patches) * ratio));
}

/// Uniformly random subset of round(N * ratio) masked patches.
inline MaskPlan sample_mask(std::size_t n_patches, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("sample_mask: ratio must lie in (0, 1)");
  std::vector<std::size_t> order(n_patches);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  shuffle(order, rng);
  const std::size_t m = masked_count(n_patches, ratio);
  MaskPlan plan;
  plan.ratio = ratio;
  plan.masked_ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m));
  plan.visible_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(m), order.end());
  std::sort(plan.masked_ids.begin(), plan.masked_ids.end());
  std::sort(plan.visible_ids.begin(), plan.visible_ids.end());
  return plan;
}

/// Standardizes every row: (x - mean) / sqrt(popvar + eps).
template <typename T>
Tensor<T> per_patch_normalize(const Tensor<T>& patches, T eps = T(1e-6)) {
  Tensor<T> out = patches;
  const std::size_t w = out.row_size();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    T* row = out.data.data() + r * w;
    T mean = 0;
    for (std::size_t j = 0; j < w; ++j) mean += row[j];
    mean /= static_cast<T>(w);
    T var = 0;
    for (std::size_t j = 0; j < w; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(w);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < w; ++j) row[j] = (row[j] - mean) * inv;
  }
  return out;
}

/// Fixed 2D sin-cos table [grid^2, dim]: the first half encodes the column,
/// the second half the row.
template <typename T>
Tensor<T> sincos_position_table(int grid, int dim) {
  Tensor<T> table(Shape{static_cast<std::size_t>(grid) * grid, static_cast<std::size_t>(dim)});
  const int quarter = dim / 4;
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      T* row = table.data.data() + static_cast<std::size_t>(gy * grid + gx) * dim;
      for (int half = 0; half < 2; ++half) {
        const double pos = half == 0 ? gx : gy;
        for (int i = 0; i < quarter; ++i) {
          const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
          row[half * 2 * quarter + i] = static_cast<T>(std::sin(pos * omega));
          row[half * 2 * quarter + quarter + i] = static_cast<T>(std::cos(pos * omega));
        }
      }
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Parameters

/// Named weight tensors in a stable order.
template <typename T>
class ModelParams {
 public:
  void add(std::string name, Tensor<T> t) {
    if (index_.count(name)) throw ConfigError("ModelParams: duplicate tensor " + name);
    index_[name] = names_.size();
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("ModelParams: no tensor named " + name);
    return it->second;
  }
  Tensor<T>& operator[](const std::string& name) { return tensors_[index(name)]; }
  const Tensor<T>& operator[](const std::string& name) const { return tensors_[index(name)]; }

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
    return out;
  }

  bool operator==(const ModelParams& o) const {
    return names_ == o.names_ && tensors_ == o.tensors_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

template <typename T>
Tensor<T> xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor<T> w(Shape{fan_in, fan_out});
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w.data) v = static_cast<T>(uniform(rng, -limit, limit));
  return w;
}

template <typename T>
void add_linear(ModelParams<T>& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  p.add(name + ".weight", xavier<T>(in, out, rng));
  p.add(name + ".bias", Tensor<T>(Shape{out}, T(0)));
}

template <typename T>
void add_norm(ModelParams<T>& p, const std::string& name, std::size_t dim) {
  p.add(name + ".weight", Tensor<T>(Shape{dim}, T(1)));
  p.add(name + ".bias", Tensor<T>(Shape{dim}, T(0)));
}

template <typename T>
void add_block(ModelParams<T>& p, const std::string& prefix, std::size_t dim, std::size_t mlp, Rng& rng) {
  add_norm(p, prefix + ".norm1", dim);
  add_linear(p, prefix + ".attn.q", dim, dim, rng);
  add_linear(p, prefix + ".attn.k", dim, dim, rng);
  add_linear(p, prefix + ".attn.v", dim, dim, rng);
  add_linear(p, prefix + ".attn.proj", dim, dim, rng);
  add_norm(p, prefix + ".norm2", dim);
  add_linear(p, prefix + ".mlp.fc1", dim, mlp, rng);
  add_linear(p, prefix + ".mlp.fc2", mlp, dim, rng);
}

}  // namespace detail

/// Randomly initialized encoder, MAE decoder and gaze head.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams<T> p;
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  const auto dd = static_cast<std::size_t>(cfg.decoder_dim);
  const std::size_t pd = cfg.grid().patch_dim();
  detail::add_linear(p, "patch_embed", pd, d, rng);
  for (int i = 0; i < cfg.depth; ++i) {
    detail::add_block(p, "blocks." + std::to_string(i), d, d * cfg.mlp_ratio, rng);
  }
  detail::add_norm(p, "norm", d);
  detail::add_linear(p, "decoder_embed", d, dd, rng);
  Tensor<T> mask_token(Shape{1, dd});
  for (auto& v : mask_token.data) v = static_cast<T>(0.02 * normal01(rng));
  p.add("mask_token", std::move(mask_token));
  for (int i = 0; i < cfg.decoder_depth; ++i) {
    detail::add_block(p, "decoder_blocks." + std::to_string(i), dd, dd * cfg.mlp_ratio, rng);
  }
  detail::add_norm(p, "decoder_norm", dd);
  detail::add_linear(p, "decoder_pred", dd, pd, rng);
  Tensor<T> head(Shape{d, 2});
  for (auto& v : head.data) v = static_cast<T>(0.01 * normal01(rng));
  p.add("head.weight", std::move(head));
  p.add("head.bias", Tensor<T>(Shape{2}, T(0)));
  return p;
}

inline bool is_decoder_param(const std::string& name) {
  return name.starts_with("decoder_") || name == "mask_token";
}
inline bool is_head_param(const std::string& name) { return name.starts_with("head."); }

/// Parameters registered on a graph for one forward/backward pass.
template <typename T>
class BoundParams {
 public:
  BoundParams(Graph<T>& g, const ModelParams<T>& p, bool requires_grad = true) : graph_(&g), params_(&p) {
    vars_.reserve(p.size());
    for (const auto& t : p.tensors()) vars_.push_back(g.leaf(t, requires_grad));
  }

  /// Uses leaves already registered on g, one per tensor in parameter order.
  BoundParams(Graph<T>& g, const ModelParams<T>& p, std::vector<Var<T>> vars)
      : graph_(&g), params_(&p), vars_(std::move(vars)) {
    if (vars_.size() != p.size()) throw ConfigError("BoundParams: variable count mismatch");
  }

  Var<T> operator()(const std::string& name) const { return vars_[params_->index(name)]; }
  Graph<T>& graph() const { return *graph_; }
  const std::vector<Var<T>>& vars() const { return vars_; }

  /// Gradients in parameter order after graph().backward().
  std::vector<Tensor<T>> grads() const {
    std::vector<Tensor<T>> out;
    out.reserve(vars_.size());
    for (const auto& v : vars_) out.push_back(graph_->grad(v));
    return out;
  }

 private:
  Graph<T>* graph_;
  const ModelParams<T>* params_;
  std::vector<Var<T>> vars_;
};

// ---------------------------------------------------------------------------
// Forward passes

struct ForwardOptions {
  bool positional = true;
  bool collect_attention = false;
};

template <typename T>
struct ForwardTrace {
  std::vector<Var<T>> attention;  // [B*H, T, T] per block, when collected
};

namespace detail {

template <typename T>
Var<T> linear(const BoundParams<T>& bp, const std::string& name, Var<T> x) {
  return matmul(x, bp(name + ".weight")) + bp(name + ".bias");
}

template <typename T>
Var<T> affine_norm(const BoundParams<T>& bp, const std::string& name, Var<T> x, T eps) {
  return layer_norm(x, -1, eps) * bp(name + ".weight") + bp(name + ".bias");
}

// [B*T, D] -> [B*H, T, D/H]
template <typename T>
Var<T> split_heads(Var<T> x, std::size_t batch, std::size_t tokens, std::size_t heads) {
  const std::size_t dh = x.shape()[1] / heads;
  Graph<T>& g = *x.graph;
  Var<T> r = g.reshape(x, {batch, tokens, heads, dh});
  r = g.transpose(r, {0, 2, 1, 3});
  return g.reshape(r, {batch * heads, tokens, dh});
}

template <typename T>
Var<T> merge_heads(Var<T> x, std::size_t batch, std::size_t tokens, std::size_t heads) {
  const std::size_t dh = x.shape()[2];
  Graph<T>& g = *x.graph;
  Var<T> r = g.reshape(x, {batch, heads, tokens, dh});
  r = g.transpose(r, {0, 2, 1, 3});
  return g.reshape(r, {batch * tokens, heads * dh});
}

/// Pre-norm transformer block over x = [B*T, D].
template <typename T>
Var<T> transformer_block(const BoundParams<T>& bp, const std::string& prefix, Var<T> x,
                         std::size_t batch, std::size_t tokens, int heads, T eps,
                         ForwardTrace<T>* trace) {
  Graph<T>& g = bp.graph();
  const auto h = static_cast<std::size_t>(heads);
  const std::size_t dh = x.shape()[1] / h;
  Var<T> n1 = affine_norm(bp, prefix + ".norm1", x, eps);
  Var<T> q = split_heads(linear(bp, prefix + ".attn.q", n1), batch, tokens, h);
  Var<T> k = split_heads(linear(bp, prefix + ".attn.k", n1), batch, tokens, h);
  Var<T> v = split_heads(linear(bp, prefix + ".attn.v", n1), batch, tokens, h);
  Var<T> scores = g.scalar_mul(matmul_bt(q, k), T(1) / std::sqrt(static_cast<T>(dh)));
  Var<T> attn = softmax(scores, -1);
  if (trace) trace->attention.push_back(attn);
  Var<T> ctx = merge_heads(matmul(attn, v), batch, tokens, h);
  x = x + linear(bp, prefix + ".attn.proj", ctx);
  Var<T> n2 = affine_norm(bp, prefix + ".norm2", x, eps);
  Var<T> hidden = gelu(linear(bp, prefix + ".mlp.fc1", n2));
  return x + linear(bp, prefix + ".mlp.fc2", hidden);
}

template <typename T>
Tensor<T> gather_positions(const Tensor<T>& table, std::span<const std::size_t> positions) {
  const std::size_t w = table.row_size();
  Tensor<T> out(Shape{positions.size(), w});
  for (std::size_t r = 0; r < positions.size(); ++r) {
    if (positions[r] >= table.rows()) throw ad::ShapeError("position index out of range");
    std::copy_n(table.data.data() + positions[r] * w, w, out.data.data() + r * w);
  }
  return out;
}

}  // namespace detail

/// Encoder over a batch of token sets.
///
/// `patches` is [B*T, patch_dim] and `positions` holds the grid index of
/// every row (B*T entries). Returns [B*T, embed_dim] before the final norm.
template <typename T>
Var<T> encoder_forward(const BoundParams<T>& bp, const ModelConfig& cfg, Var<T> patches,
                       std::span<const std::size_t> positions, std::size_t batch,
                       const ForwardOptions& opts = {}, ForwardTrace<T>* trace = nullptr) {
  const Shape& s = patches.shape();
  if (s.size() != 2 || s[1] != cfg.grid().patch_dim() || s[0] != positions.size() ||
      batch == 0 || s[0] % batch != 0) {
    throw ad::ShapeError("encoder_forward: patches " + ad::shape_str(s) + " with " +
                         std::to_string(positions.size()) + " positions and batch " +
                         std::to_string(batch));
  }
  Graph<T>& g = bp.graph();
  const std::size_t tokens = s[0] / batch;
  Var<T> x = detail::linear(bp, "patch_embed", patches);
  if (opts.positional) {
    const auto table = sincos_position_table<T>(cfg.grid().per_side(), cfg.embed_dim);
    x = x + g.constant(detail::gather_positions(table, positions));
  }
  for (int i = 0; i < cfg.depth; ++i) {
    x = detail::transformer_block(bp, "blocks." + std::to_string(i), x, batch, tokens, cfg.heads,
                                  static_cast<T>(cfg.ln_eps), opts.collect_attention ? trace : nullptr);
  }
  return x;
}

/// MAE decoder: final encoder norm, projection, mask tokens scattered into
/// the masked slots, positions, shallow transformer, per-patch prediction.
/// Returns [B*N, patch_dim] in raster order.
template <typename T>
Var<T> decoder_forward(const BoundParams<T>& bp, const ModelConfig& cfg, Var<T> encoded,
                       std::span<const MaskPlan> plans) {
  const std::size_t batch = plans.size();
  const std::size_t n = cfg.grid().n_patches();
  if (batch == 0) throw ad::ShapeError("decoder_forward: empty batch");
  const std::size_t visible = plans[0].visible_ids.size();
  for (const auto& p : plans) {
    if (p.visible_ids.size() != visible || p.visible_ids.size() + p.masked_ids.size() != n) {
      throw ad::ShapeError("decoder_forward: inconsistent mask plans");
    }
  }
  const Shape& s = encoded.shape();
  if (s.size() != 2 || s[0] != batch * visible || s[1] != static_cast<std::size_t>(cfg.embed_dim)) {
    throw ad::ShapeError("decoder_forward: encoder output " + ad::shape_str(s) + " vs " +
                         std::to_string(batch) + " plans with " + std::to_string(visible) +
                         " visible tokens");
  }
  Graph<T>& g = bp.graph();
  const T eps = static_cast<T>(cfg.ln_eps);
  Var<T> x = detail::affine_norm(bp, "norm", encoded, eps);
  x = detail::linear(bp, "decoder_embed", x);
  Var<T> pool = g.concat({x, bp("mask_token")});
  const std::size_t mask_row = batch * visible;

  std::vector<std::size_t> order(batch * n, mask_row);
  std::vector<std::size_t> positions(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < visible; ++j) order[b * n + plans[b].visible_ids[j]] = b * visible + j;
    for (std::size_t i = 0; i < n; ++i) positions[b * n + i] = i;
  }
  Var<T> full = g.gather_rows(pool, std::move(order));
  const auto table = sincos_position_table<T>(cfg.grid().per_side(), cfg.decoder_dim);
  full = full + g.constant(detail::gather_positions(table, positions));
  for (int i = 0; i < cfg.decoder_depth; ++i) {
    full = detail::transformer_block(bp, "decoder_blocks." + std::to_string(i), full, batch, n,
                                     cfg.decoder_heads, eps, static_cast<ForwardTrace<T>*>(nullptr));
  }
  full = detail::affine_norm(bp, "decoder_norm", full, eps);
  return detail::linear(bp, "decoder_pred", full);
}

/// Mean over masked rows of the per-row mean squared error. Targets are
/// standardized per patch when pixel_norm is set. Only masked rows of `pred`
/// enter the graph.
template <typename T>
Var<T> mae_loss(Var<T> pred, const Tensor<T>& target, std::span<const MaskPlan> plans, bool pixel_norm) {
  const Shape& s = pred.shape();
  if (s != target.shape || plans.empty() || s[0] % plans.size() != 0) {
    throw ad::ShapeError("mae_loss: prediction " + ad::shape_str(s) + " vs target " +
                         ad::shape_str(target.shape));
  }
  const std::size_t n = s[0] / plans.size();
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < plans.size(); ++b) {
    for (auto i : plans[b].masked_ids) rows.push_back(b * n + i);
  }
  if (rows.empty()) throw DataError("mae_loss: no masked patches");
  const Tensor<T> tgt = pixel_norm ? per_patch_normalize(target) : target;
  const std::size_t w = tgt.row_size();
  Tensor<T> picked(Shape{rows.size(), w});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(tgt.data.data() + rows[r] * w, w, picked.data.data() + r * w);
  }
  Graph<T>& g = *pred.graph;
  Var<T> diff = g.gather_rows(pred, std::move(rows)) - g.constant(std::move(picked));
  return mean(square(diff));
}

/// Full-token encoder, final norm, mean pooling to z, linear head.
/// `patches` is [B*N, patch_dim] (unmasked, raster order); returns [B, 2]
/// as (pitch, yaw) rows.
template <typename T>
Var<T> gaze_forward(const BoundParams<T>& bp, const ModelConfig& cfg, Var<T> patches, std::size_t batch) {
  const std::size_t n = cfg.grid().n_patches();
  std::vector<std::size_t> positions(batch * n);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % n;
  Var<T> x = encoder_forward(bp, cfg, patches, positions, batch);
  Graph<T>& g = bp.graph();
  x = detail::affine_norm(bp, "norm", x, static_cast<T>(cfg.ln_eps));
  x = g.reshape(x, {batch, n, static_cast<std::size_t>(cfg.embed_dim)});
  Var<T> z = g.mean(x, 1);
  return detail::linear(bp, "head", z);
}

/// Batch mean of |d pitch| + |d yaw|.
template <typename T>
Var<T> gaze_loss(Var<T> pred, const Tensor<T>& labels) {
  if (pred.shape() != labels.shape || pred.shape().size() != 2 || pred.shape()[1] != 2) {
    throw ad::ShapeError("gaze_loss: prediction " + ad::shape_str(pred.shape()) + " vs labels " +
                         ad::shape_str(labels.shape));
  }
  Graph<T>& g = *pred.graph;
  Var<T> l1 = g.sum(abs(pred - g.constant(labels)));
  return g.scalar_mul(l1, T(1) / static_cast<T>(labels.dim(0)));
}

// ---------------------------------------------------------------------------
// Input preparation

/// Model inputs are patches shifted and scaled from [0, 1] to roughly unit
/// range.
inline constexpr double kInputMean = 0.5;
inline constexpr double kInputStd = 0.25;

/// Stacks images into [B*N, patch_dim]. With `standardize` the model input
/// scaling is applied; otherwise raw pixel values are kept.
template <typename T>
Tensor<T> stack_patches(std::span<const Image* const> images, const PatchGrid& grid, bool standardize) {
  const std::size_t n = grid.n_patches(), pd = grid.patch_dim();
  Tensor<T> out(Shape{images.size() * n, pd});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Tensor<T> p = patchify<T>(*images[b], grid);
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(b * n * pd));
  }
  if (standardize) {
    for (auto& v : out.data) v = static_cast<T>((v - kInputMean) / kInputStd);
  }
  return out;
}

/// Predicts (pitch, yaw) for each image with no gradient tracking.
template <typename T>
std::vector<PitchYaw> predict_gaze(const ModelParams<T>& params, const ModelConfig& cfg,
                                   std::span<const Image* const> images, std::size_t chunk = 64) {
  std::vector<PitchYaw> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t count = std::min(chunk, images.size() - start);
    Graph<T> g;
    BoundParams<T> bp(g, params, false);
    auto batch = images.subspan(start, count);
    Var<T> x = g.constant(stack_patches<T>(batch, cfg.grid(), true));
    const Tensor<T>& pred = gaze_forward(bp, cfg, x, count).value();
    for (std::size_t i = 0; i < count; ++i) {
      out.push_back({static_cast<double>(pred.data[2 * i]), static_cast<double>(pred.data[2 * i + 1])});
    }
  }
  return out;
}

}  // namespace unigaze

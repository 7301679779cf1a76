#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unigaze/datasets.hpp"
#include "unigaze/model.hpp"

namespace unigaze {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, image_size, patch_size, channels, depth, heads,
                                                embed_dim, mlp_ratio, decoder_depth, decoder_dim,
                                                decoder_heads, mask_ratio, pixel_norm, pooling, ln_eps)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(JitterSpec, probability, hue, saturation, contrast, brightness,
                                                grayscale_probability)

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool decoupled = true;  // AdamW-style; false adds wd * p to the gradient

  bool operator==(const AdamConfig&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AdamConfig, beta1, beta2, eps, weight_decay, decoupled)

template <typename T>
struct OptimState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::vector<bool> decay;   // weight decay applies to this tensor
  std::vector<bool> frozen;  // tensor is never updated
};

/// Zero moments shaped like params. Weight decay is applied to matrices
/// only; biases and norm gains are exempt.
template <typename T>
OptimState<T> make_optim_state(const std::vector<Tensor<T>>& params, const AdamConfig& cfg) {
  OptimState<T> st;
  st.config = cfg;
  for (const auto& p : params) {
    st.m.emplace_back(p.shape, T(0));
    st.v.emplace_back(p.shape, T(0));
    st.decay.push_back(p.rank() >= 2);
    st.frozen.push_back(false);
  }
  return st;
}

/// One bias-corrected Adam update. With decoupled decay the parameter is
/// first shrunk by lr * wd, then moved by the moment ratio.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads, OptimState<T>& st,
               double lr) {
  if (params.size() != grads.size() || params.size() != st.m.size()) {
    throw ad::ShapeError("adam_step: " + std::to_string(params.size()) + " params, " +
                         std::to_string(grads.size()) + " grads, " + std::to_string(st.m.size()) +
                         " moment slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape != grads[i].shape || params[i].shape != st.m[i].shape) {
      throw ad::ShapeError("adam_step: tensor " + std::to_string(i) + " has shape " +
                           ad::shape_str(params[i].shape) + " but gradient " +
                           ad::shape_str(grads[i].shape));
    }
  }
  ++st.step;
  const AdamConfig& c = st.config;
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(c.beta1, static_cast<double>(st.step)));
  const T bc2 = static_cast<T>(1.0 - std::pow(c.beta2, static_cast<double>(st.step)));
  const T tlr = static_cast<T>(lr), wd = static_cast<T>(c.weight_decay), eps = static_cast<T>(c.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (st.frozen[i]) continue;
    const T dwd = st.decay[i] ? wd : T(0);
    auto& p = params[i].data;
    const auto& g = grads[i].data;
    auto& m = st.m[i].data;
    auto& v = st.v[i].data;
    for (std::size_t j = 0; j < p.size(); ++j) {
      T gj = g[j];
      if (c.decoupled) {
        p[j] -= tlr * dwd * p[j];
      } else {
        gj += dwd * p[j];
      }
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      p[j] -= tlr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
    }
  }
}

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  double total = 0;
  for (const auto& g : grads) {
    for (T v : g.data) total += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(total);
  if (norm > max_norm && norm > 0) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& g : grads) {
      for (auto& v : g.data) v *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Learning-rate schedules

struct ScheduleSpec {
  std::string kind = "one_cycle";  // one_cycle, step_decay, constant
  std::int64_t total_steps = 1;
  double max_lr = 1e-4;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div = 1e4;
  std::int64_t steps_per_epoch = 1;
  std::int64_t step_epochs = 5;
  double gamma = 0.1;

  void validate() const {
    if (kind != "one_cycle" && kind != "step_decay" && kind != "constant") {
      throw ConfigError("ScheduleSpec: unknown kind '" + kind + "'");
    }
    if (total_steps < 1 || !(max_lr > 0) || !(div_factor > 0) || !(final_div > 0)) {
      throw ConfigError("ScheduleSpec: total_steps, max_lr and divisors must be positive");
    }
    if (!(pct_start > 0 && pct_start < 1)) throw ConfigError("ScheduleSpec: pct_start must lie in (0, 1)");
    if (steps_per_epoch < 1 || step_epochs < 1 || !(gamma > 0)) {
      throw ConfigError("ScheduleSpec: steps_per_epoch, step_epochs and gamma must be positive");
    }
  }
  bool operator==(const ScheduleSpec&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ScheduleSpec, kind, total_steps, max_lr, pct_start, div_factor,
                                                final_div, steps_per_epoch, step_epochs, gamma)

/// Learning rate at a step; steps past total_steps return the final value.
/// std::lerp is exact at both ends, so one-cycle hits max_lr / div_factor,
/// max_lr and max_lr / final_div exactly.
inline double lr_at(const ScheduleSpec& s, std::int64_t step) {
  s.validate();
  if (step < 0) throw ConfigError("lr_at: negative step");
  step = std::min(step, s.total_steps);
  if (s.kind == "constant") return s.max_lr;
  if (s.kind == "step_decay") {
    const std::int64_t epoch = step / s.steps_per_epoch;
    return s.max_lr * std::pow(s.gamma, static_cast<double>(epoch / s.step_epochs));
  }
  const double initial = s.max_lr / s.div_factor;
  const double final_lr = s.max_lr / s.final_div;
  const double warm = s.pct_start * static_cast<double>(s.total_steps);
  const double t = static_cast<double>(step);
  if (t <= warm) return std::lerp(initial, s.max_lr, t / warm);
  const double frac = (t - warm) / (static_cast<double>(s.total_steps) - warm);
  return std::lerp(final_lr, s.max_lr, 0.5 * (1.0 + std::cos(kPi * frac)));
}

// ---------------------------------------------------------------------------
// Run configuration

struct TrainRunConfig {
  std::string mode = "pretrain";  // pretrain or finetune
  std::uint64_t seed = 0;
  std::int64_t steps = 2000;      // pretraining length
  std::int64_t epochs = 8;        // fine-tuning length
  std::int64_t batch_size = 64;
  double lr = 1.5e-4;
  AdamConfig adam{0.9, 0.95, 1e-8, 0.05, true};
  ScheduleSpec schedule;          // total_steps and max_lr are filled from the run
  bool augment = false;           // color jitter and horizontal flip
  JitterSpec jitter;
  bool clip_grad = false;
  double clip_norm = 1.0;
  std::int64_t checkpoint_every = 0;
  ModelConfig model;

  void validate() const {
    if (mode != "pretrain" && mode != "finetune") throw ConfigError("TrainRunConfig: unknown mode '" + mode + "'");
    if (batch_size < 1) throw ConfigError("TrainRunConfig: batch_size must be >= 1");
    if (steps < 1 || epochs < 1) throw ConfigError("TrainRunConfig: steps and epochs must be >= 1");
    if (!(lr >= 0)) throw ConfigError("TrainRunConfig: lr must be >= 0");
    model.validate();
    jitter.validate();
  }
  bool operator==(const TrainRunConfig&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainRunConfig, mode, seed, steps, epochs, batch_size, lr, adam,
                                                schedule, augment, jitter, clip_grad, clip_norm, checkpoint_every,
                                                model)

/// MAE pre-training defaults at desk scale (base lr 1.5e-4, wd 0.05).
/// Augmentation is off; set `augment` for flips and color jitter.
inline TrainRunConfig pretrain_defaults() { return TrainRunConfig{}; }

/// Gaze fine-tuning defaults: lr 1e-4, wd 1e-6, one-cycle, no augmentation.
inline TrainRunConfig finetune_defaults() {
  TrainRunConfig c;
  c.mode = "finetune";
  c.batch_size = 32;
  c.lr = 1e-4;
  c.adam = AdamConfig{0.9, 0.999, 1e-8, 1e-6, true};
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  ModelConfig model;
  std::string dtype = "float64";
  ModelParams<double> params;
  std::int64_t step = 0;
  AdamConfig adam;
  std::vector<Tensor<double>> adam_m;  // empty without optimizer state
  std::vector<Tensor<double>> adam_v;
  nlohmann::json meta = nlohmann::json::object();

  bool operator==(const Checkpoint&) const = default;
};

inline constexpr const char* kCheckpointMagic = "UNIGAZE-CHECKPOINT";
inline constexpr int kCheckpointVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

template <typename T>
Checkpoint make_checkpoint(const ModelConfig& cfg, const ModelParams<T>& params, const OptimState<T>* optim,
                           nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint c;
  c.model = cfg;
  c.dtype = dtype_name<T>();
  c.params = params.template cast<double>();
  if (optim) {
    c.step = optim->step;
    c.adam = optim->config;
    for (const auto& t : optim->m) c.adam_m.push_back(t.template cast<double>());
    for (const auto& t : optim->v) c.adam_v.push_back(t.template cast<double>());
  }
  c.meta = std::move(meta);
  return c;
}

namespace detail {

inline void append_payload(std::string& out, const Tensor<double>& t, bool single) {
  for (double v : t.data) {
    if (single) {
      const float f = static_cast<float>(v);
      out.append(reinterpret_cast<const char*>(&f), sizeof f);
    } else {
      out.append(reinterpret_cast<const char*>(&v), sizeof v);
    }
  }
}

}  // namespace detail

/// Magic line, header length line, JSON header, little-endian payload.
inline std::string serialize_checkpoint(const Checkpoint& c) {
  if (c.dtype != "float32" && c.dtype != "float64") throw DataError("checkpoint: unknown dtype " + c.dtype);
  const bool single = c.dtype == "float32";
  const std::size_t width = single ? 4 : 8;
  nlohmann::json dir = nlohmann::json::array();
  std::string payload;
  auto add = [&](const std::string& name, const Tensor<double>& t) {
    dir.push_back({{"name", name}, {"shape", t.shape}, {"offset", payload.size()}, {"count", t.size()}});
    detail::append_payload(payload, t, single);
  };
  for (std::size_t i = 0; i < c.params.size(); ++i) add(c.params.names()[i], c.params.tensors()[i]);
  if (!c.adam_m.empty() && (c.adam_m.size() != c.params.size() || c.adam_v.size() != c.params.size())) {
    throw DataError("checkpoint: optimizer state does not cover every tensor");
  }
  for (std::size_t i = 0; i < c.adam_m.size(); ++i) add("adam.m/" + c.params.names()[i], c.adam_m[i]);
  for (std::size_t i = 0; i < c.adam_v.size(); ++i) add("adam.v/" + c.params.names()[i], c.adam_v[i]);
  nlohmann::json h;
  h["version"] = kCheckpointVersion;
  h["dtype"] = c.dtype;
  h["element_bytes"] = width;
  h["model"] = c.model;
  h["step"] = c.step;
  h["adam"] = c.adam;
  h["has_optimizer"] = !c.adam_m.empty();
  h["meta"] = c.meta;
  h["tensors"] = dir;
  h["payload_bytes"] = payload.size();
  const std::string header = h.dump();
  return std::string(kCheckpointMagic) + "\n" + std::to_string(header.size()) + "\n" + header + payload;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& where = "checkpoint") {
  auto fail = [&](const std::string& msg) -> void { throw DataError(where + ": " + msg); };
  const std::string magic = std::string(kCheckpointMagic) + "\n";
  if (bytes.compare(0, magic.size(), magic) != 0) fail("not a checkpoint (bad magic)");
  const std::size_t nl = bytes.find('\n', magic.size());
  if (nl == std::string::npos || nl - magic.size() > 20) fail("truncated header");
  std::size_t header_len = 0;
  try {
    header_len = std::stoull(bytes.substr(magic.size(), nl - magic.size()));
  } catch (const std::exception&) {
    fail("corrupted header length");
  }
  const std::size_t body = nl + 1;
  if (bytes.size() < body + header_len) fail("truncated header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(body, header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("corrupted header: ") + e.what());
  }
  Checkpoint c;
  try {
    const int version = h.at("version").get<int>();
    if (version != kCheckpointVersion) {
      fail("format version mismatch: file has " + std::to_string(version) + ", reader expects " +
           std::to_string(kCheckpointVersion));
    }
    c.dtype = h.at("dtype").get<std::string>();
    if (c.dtype != "float32" && c.dtype != "float64") fail("unknown dtype " + c.dtype);
    c.model = h.at("model").get<ModelConfig>();
    c.step = h.at("step").get<std::int64_t>();
    c.adam = h.at("adam").get<AdamConfig>();
    c.meta = h.at("meta");
    const bool has_opt = h.at("has_optimizer").get<bool>();
    const std::size_t width = c.dtype == "float32" ? 4 : 8;
    const std::size_t payload_bytes = h.at("payload_bytes").get<std::size_t>();
    const std::size_t start = body + header_len;
    if (bytes.size() != start + payload_bytes) {
      fail("payload has " + std::to_string(bytes.size() - start) + " bytes, header declares " +
           std::to_string(payload_bytes) + " (truncated or trailing data)");
    }
    std::vector<std::pair<std::string, Tensor<double>>> tensors;
    for (const auto& e : h.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (ad::numel(shape) != count || offset + count * width > payload_bytes) {
        fail("tensor " + name + " exceeds the payload");
      }
      Tensor<double> t(shape);
      const char* src = bytes.data() + start + offset;
      for (std::size_t i = 0; i < count; ++i) {
        if (width == 4) {
          float f;
          std::memcpy(&f, src + 4 * i, 4);
          t.data[i] = f;
        } else {
          std::memcpy(&t.data[i], src + 8 * i, 8);
        }
      }
      tensors.emplace_back(name, std::move(t));
    }
    const std::size_t n = has_opt ? tensors.size() / 3 : tensors.size();
    if (has_opt && tensors.size() != 3 * n) fail("optimizer state does not cover every tensor");
    for (std::size_t i = 0; i < n; ++i) c.params.add(tensors[i].first, std::move(tensors[i].second));
    for (std::size_t i = 0; has_opt && i < n; ++i) {
      c.adam_m.push_back(std::move(tensors[n + i].second));
      c.adam_v.push_back(std::move(tensors[2 * n + i].second));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("corrupted header: ") + e.what());
  } catch (const ad::ShapeError& e) {
    fail(std::string("corrupted tensor directory: ") + e.what());
  } catch (const ConfigError& e) {
    fail(std::string("corrupted tensor directory: ") + e.what());
  }
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("save_checkpoint: write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str(), path.string());
}

/// Copies checkpoint tensors into a freshly initialized model of `cfg`.
/// With `only`, tensors failing the predicate keep their fresh values.
template <typename T>
ModelParams<T> params_from_checkpoint(const Checkpoint& c, const ModelConfig& cfg, std::uint64_t seed,
                                      const std::function<bool(const std::string&)>& only = nullptr) {
  ModelParams<T> p = init_params<T>(cfg, seed);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const std::string& name = p.names()[i];
    if (only && !only(name)) continue;
    if (!c.params.contains(name)) throw DataError("checkpoint has no tensor " + name);
    const auto& src = c.params[name];
    if (src.shape != p.tensors()[i].shape) {
      throw DataError("checkpoint shape mismatch for " + name + ": checkpoint " + ad::shape_str(src.shape) +
                      " vs model " + ad::shape_str(p.tensors()[i].shape));
    }
    p.tensors()[i] = src.template cast<T>();
  }
  return p;
}

// ---------------------------------------------------------------------------
// Training loops

struct TraceRow {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;

  bool operator==(const TraceRow&) const = default;
};

inline std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::string out = "step,lr,loss\n";
  char buf[96];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g\n", static_cast<long long>(r.step), r.lr, r.loss);
    out += buf;
  }
  return out;
}

struct TrainOutput {
  Checkpoint checkpoint;
  std::vector<TraceRow> trace;
  std::vector<double> val_errors;  // fine-tuning: index 0 is before training
};

struct TrainHooks {
  std::function<void(const Checkpoint&)> on_checkpoint;
  std::function<void(const TraceRow&)> on_step;
};

/// Mean angular error in degrees of gaze predictions against labels.
template <typename T>
double mean_angular_error(const ModelParams<T>& params, const ModelConfig& cfg, const DatasetManifest& m,
                          const std::vector<Image>& images) {
  std::vector<const Image*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  const auto pred = predict_gaze(params, cfg, ptrs);
  double total = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!m.records[i].gaze) throw DataError("sample " + record_key(m.records[i]) + " has no gaze label");
    total += angular_error_deg(pred[i], *m.records[i].gaze);
  }
  return total / static_cast<double>(m.size());
}

namespace detail {

inline void check_aligned(const DatasetManifest& m, const std::vector<Image>& images, const char* who) {
  if (m.size() != images.size()) {
    throw DataError(std::string(who) + ": manifest has " + std::to_string(m.size()) + " records but " +
                    std::to_string(images.size()) + " images");
  }
}

inline Image augment_image(const Image& img, const TrainRunConfig& cfg, const SampleRecord& r, std::uint64_t salt) {
  if (!cfg.augment) return img;
  const std::uint64_t s = derive_seed(cfg.seed, fnv1a(record_key(r)), salt);
  Image out = color_jitter(img, cfg.jitter, s);
  Rng rng(derive_seed(s, 0xf11b));
  if (uniform01(rng) < 0.5) out = hflip(out);
  return out;
}

template <typename T>
void check_finite(T loss, std::int64_t step) {
  if (!std::isfinite(static_cast<double>(loss))) {
    throw NumericError("training diverged: non-finite loss at step " + std::to_string(step));
  }
}

inline ScheduleSpec resolve_schedule(const TrainRunConfig& cfg, std::int64_t total, std::int64_t per_epoch) {
  ScheduleSpec s = cfg.schedule;
  s.total_steps = total;
  s.max_lr = cfg.lr > 0 ? cfg.lr : 1.0;  // lr = 0 is handled by the caller
  s.steps_per_epoch = per_epoch;
  s.validate();
  return s;
}

}  // namespace detail

/// MAE pre-training on unlabeled images.
template <typename T>
TrainOutput pretrain_loop(const TrainRunConfig& cfg, const DatasetManifest& m, const std::vector<Image>& images,
                          const TrainHooks& hooks = {}) {
  cfg.validate();
  detail::check_aligned(m, images, "pretrain_loop");
  if (m.size() == 0) throw DataError("pretrain_loop: empty dataset");
  const ModelConfig& mc = cfg.model;
  const PatchGrid grid = mc.grid();
  const std::size_t n_patches = grid.n_patches();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const auto per_epoch = static_cast<std::int64_t>((m.size() + bs - 1) / bs);
  const ScheduleSpec sched = detail::resolve_schedule(cfg, cfg.steps, per_epoch);

  ModelParams<T> params = init_params<T>(mc, cfg.seed);
  OptimState<T> opt = make_optim_state(params.tensors(), cfg.adam);
  for (std::size_t i = 0; i < params.size(); ++i) opt.frozen[i] = is_head_param(params.names()[i]);

  TrainOutput out;
  std::int64_t step = 0;
  for (std::uint64_t epoch = 0; step < cfg.steps; ++epoch) {
    for (const auto& batch : batch_iterator(m.size(), bs, cfg.seed, epoch)) {
      if (step >= cfg.steps) break;
      const std::size_t b = batch.size();
      std::vector<Image> aug;
      aug.reserve(b);
      for (auto i : batch) aug.push_back(detail::augment_image(images[i], cfg, m.records[i], static_cast<std::uint64_t>(step)));
      std::vector<const Image*> ptrs;
      for (const auto& im : aug) ptrs.push_back(&im);
      const Tensor<T> inputs = stack_patches<T>(ptrs, grid, true);
      const Tensor<T> targets = stack_patches<T>(ptrs, grid, false);

      std::vector<MaskPlan> plans;
      std::vector<std::size_t> rows, positions;
      for (std::size_t k = 0; k < b; ++k) {
        plans.push_back(sample_mask(n_patches, mc.mask_ratio, derive_seed(cfg.seed, static_cast<std::uint64_t>(step), k)));
        for (auto id : plans.back().visible_ids) {
          rows.push_back(k * n_patches + id);
          positions.push_back(id);
        }
      }
      Graph<T> g;
      BoundParams<T> bp(g, params);
      Var<T> visible = g.gather_rows(g.constant(inputs), rows);
      Var<T> enc = encoder_forward(bp, mc, visible, positions, b);
      Var<T> pred = decoder_forward(bp, mc, enc, plans);
      Var<T> loss = mae_loss(pred, targets, plans, mc.pixel_norm);
      const T loss_value = loss.value()[0];
      detail::check_finite(loss_value, step);
      g.backward(loss);
      auto grads = bp.grads();
      if (cfg.clip_grad) clip_grad_norm(grads, cfg.clip_norm);
      const double lr = cfg.lr > 0 ? lr_at(sched, step) : 0.0;
      adam_step(params.tensors(), grads, opt, lr);
      const TraceRow row{step, lr, static_cast<double>(loss_value)};
      out.trace.push_back(row);
      if (hooks.on_step) hooks.on_step(row);
      ++step;
      if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps && hooks.on_checkpoint) {
        hooks.on_checkpoint(make_checkpoint(mc, params, &opt, nlohmann::json{{"run", cfg}}));
      }
    }
  }
  out.checkpoint = make_checkpoint(mc, params, &opt, nlohmann::json{{"run", cfg}});
  if (hooks.on_checkpoint) hooks.on_checkpoint(out.checkpoint);
  return out;
}

/// Gaze regression with an L1 loss. `init` supplies pre-trained weights;
/// the head always starts fresh from the run seed and the decoder is frozen.
template <typename T>
TrainOutput finetune_loop(const TrainRunConfig& cfg, const DatasetManifest& m, const std::vector<Image>& images,
                          const Checkpoint* init, const DatasetManifest* val_m = nullptr,
                          const std::vector<Image>* val_images = nullptr, const TrainHooks& hooks = {}) {
  cfg.validate();
  detail::check_aligned(m, images, "finetune_loop");
  if (m.size() == 0) throw DataError("finetune_loop: empty dataset");
  for (const auto& r : m.records) {
    if (!r.gaze) throw DataError("finetune_loop: sample " + record_key(r) + " has no gaze label");
  }
  if (val_m) {
    if (!val_images) throw DataError("finetune_loop: validation manifest without images");
    detail::check_aligned(*val_m, *val_images, "finetune_loop validation");
  }
  const ModelConfig& mc = cfg.model;
  const PatchGrid grid = mc.grid();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const auto per_epoch = static_cast<std::int64_t>((m.size() + bs - 1) / bs);
  const ScheduleSpec sched = detail::resolve_schedule(cfg, cfg.epochs * per_epoch, per_epoch);

  const std::uint64_t init_seed = derive_seed(cfg.seed, 0x4ead);
  ModelParams<T> params =
      init ? params_from_checkpoint<T>(*init, mc, init_seed,
                                       [](const std::string& n) { return !is_head_param(n); })
           : init_params<T>(mc, init_seed);
  OptimState<T> opt = make_optim_state(params.tensors(), cfg.adam);
  for (std::size_t i = 0; i < params.size(); ++i) opt.frozen[i] = is_decoder_param(params.names()[i]);

  TrainOutput out;
  auto validate = [&] {
    if (val_m && val_m->size() > 0) out.val_errors.push_back(mean_angular_error(params, mc, *val_m, *val_images));
  };
  validate();
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : batch_iterator(m.size(), bs, cfg.seed, static_cast<std::uint64_t>(epoch))) {
      const std::size_t b = batch.size();
      std::vector<Image> aug;
      aug.reserve(b);
      Tensor<T> labels(Shape{b, 2});
      for (std::size_t k = 0; k < b; ++k) {
        const auto& r = m.records[batch[k]];
        aug.push_back(detail::augment_image(images[batch[k]], cfg, r, static_cast<std::uint64_t>(step)));
        labels.data[2 * k] = static_cast<T>(r.gaze->pitch);
        labels.data[2 * k + 1] = static_cast<T>(r.gaze->yaw);
      }
      if (cfg.augment) {
        // A horizontal flip mirrors yaw; recover which samples were flipped.
        for (std::size_t k = 0; k < b; ++k) {
          const std::uint64_t s = derive_seed(cfg.seed, fnv1a(record_key(m.records[batch[k]])), static_cast<std::uint64_t>(step));
          Rng rng(derive_seed(s, 0xf11b));
          if (uniform01(rng) < 0.5) labels.data[2 * k + 1] = -labels.data[2 * k + 1];
        }
      }
      std::vector<const Image*> ptrs;
      for (const auto& im : aug) ptrs.push_back(&im);
      Graph<T> g;
      BoundParams<T> bp(g, params);
      Var<T> pred = gaze_forward(bp, mc, g.constant(stack_patches<T>(ptrs, grid, true)), b);
      Var<T> loss = gaze_loss(pred, labels);
      const T loss_value = loss.value()[0];
      detail::check_finite(loss_value, step);
      g.backward(loss);
      auto grads = bp.grads();
      if (cfg.clip_grad) clip_grad_norm(grads, cfg.clip_norm);
      const double lr = cfg.lr > 0 ? lr_at(sched, step) : 0.0;
      adam_step(params.tensors(), grads, opt, lr);
      const TraceRow row{step, lr, static_cast<double>(loss_value)};
      out.trace.push_back(row);
      if (hooks.on_step) hooks.on_step(row);
      ++step;
    }
    validate();
  }
  out.checkpoint = make_checkpoint(mc, params, &opt, nlohmann::json{{"run", cfg}});
  if (hooks.on_checkpoint) hooks.on_checkpoint(out.checkpoint);
  return out;
}

}  // namespace unigaze

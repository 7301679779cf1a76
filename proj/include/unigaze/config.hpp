#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "common.hpp"
#include "datasets.hpp"
#include "protocols.hpp"
#include "training.hpp"

namespace unigaze {

// ---------------------------------------------------------------------------
// Settings for the pipeline stages that have no module-level config type

struct SynthSettings {
  std::vector<std::string> domains = {"studio", "laptop", "outdoor", "dim", "wild"};
  std::int64_t images = 1250;  // per domain
  int image_size = 32;
  int subjects = 25;
  int test_subjects = 5;
  int supersample = 3;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthSettings, domains, images, image_size, subjects, test_subjects,
                                                supersample)

struct NormalizeSettings {
  int image_size = 32;  // normalized crop side; focal length scales with it
  double standard_distance = kDefaultStandardDistance;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NormalizeSettings, image_size, standard_distance)

/// Ops are "name:arg" strings applied in order: every_k:K, identity_cap:N,
/// camera_subset:N, pose_filter:DEG, split:NAME.
struct CurateSettings {
  std::vector<std::string> ops;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CurateSettings, ops)

struct DrawSettings {
  std::string anchor = "face_center";  // face_center, eyes or image_center
  double length_px = 12.0;
  std::string source = "label";        // label or prediction
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DrawSettings, anchor, length_px, source)

inline constexpr const char* kConfigSchema = "unigaze-config";
inline constexpr int kConfigVersion = 1;

/// Fully resolved configuration. `seed` and `model` are shared by the
/// pretrain and finetune sections.
struct AppConfig {
  std::uint64_t seed = 0;
  std::string precision = "reference";  // reference (float64) or fast (float32)
  unsigned jobs = 1;
  ModelConfig model;
  TrainRunConfig pretrain = pretrain_defaults();
  TrainRunConfig finetune = finetune_defaults();
  SynthSettings synth;
  NormalizeSettings normalize;
  CurateSettings curate;
  ProtocolSpec protocol{.kind = "leave_one_out"};
  DrawSettings draw;

  TrainRunConfig pretrain_run() const {
    TrainRunConfig c = pretrain;
    c.mode = "pretrain";
    c.seed = seed;
    c.model = model;
    return c;
  }
  TrainRunConfig finetune_run() const {
    TrainRunConfig c = finetune;
    c.mode = "finetune";
    c.seed = seed;
    c.model = model;
    return c;
  }
  bool reference() const { return precision == "reference"; }

  void validate() const {
    if (precision != "reference" && precision != "fast") {
      throw ConfigError("precision must be 'reference' or 'fast', got '" + precision + "'");
    }
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    pretrain_run().validate();
    finetune_run().validate();
    if (synth.images < 1 || synth.subjects < 1 || synth.test_subjects < 0 ||
        synth.test_subjects >= synth.subjects || synth.image_size < 4 || synth.supersample < 1) {
      throw ConfigError("synth: invalid sizes");
    }
    if (normalize.image_size < 2 || !(normalize.standard_distance > 0)) {
      throw ConfigError("normalize: image_size must be >= 2 and standard_distance > 0");
    }
    if (draw.anchor != "face_center" && draw.anchor != "eyes" && draw.anchor != "image_center") {
      throw ConfigError("draw.anchor must be face_center, eyes or image_center");
    }
    if (draw.source != "label" && draw.source != "prediction") {
      throw ConfigError("draw.source must be label or prediction");
    }
  }
};

namespace detail {

inline nlohmann::json train_section(const TrainRunConfig& c) {
  nlohmann::json j = c;
  j.erase("mode");
  j.erase("seed");
  j.erase("model");
  return j;
}

}  // namespace detail

inline nlohmann::json config_to_json(const AppConfig& c) {
  nlohmann::json j;
  j["schema"] = kConfigSchema;
  j["version"] = kConfigVersion;
  j["seed"] = c.seed;
  j["precision"] = c.precision;
  j["jobs"] = c.jobs;
  j["model"] = c.model;
  j["pretrain"] = detail::train_section(c.pretrain);
  j["finetune"] = detail::train_section(c.finetune);
  j["synth"] = c.synth;
  j["normalize"] = c.normalize;
  j["curate"] = c.curate;
  j["protocol"] = c.protocol;
  j["draw"] = c.draw;
  return j;
}

inline AppConfig config_from_json(const nlohmann::json& j) {
  AppConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.precision = j.at("precision").get<std::string>();
    c.jobs = j.at("jobs").get<unsigned>();
    c.model = j.at("model").get<ModelConfig>();
    c.pretrain = j.at("pretrain").get<TrainRunConfig>();
    c.finetune = j.at("finetune").get<TrainRunConfig>();
    c.synth = j.at("synth").get<SynthSettings>();
    c.normalize = j.at("normalize").get<NormalizeSettings>();
    c.curate = j.at("curate").get<CurateSettings>();
    c.protocol = j.at("protocol").get<ProtocolSpec>();
    c.draw = j.at("draw").get<DrawSettings>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.pretrain.mode = "pretrain";
  c.finetune.mode = "finetune";
  return c;
}

// ---------------------------------------------------------------------------
// Key lookup and overrides

namespace detail {

inline void flatten_keys(const nlohmann::json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      flatten_keys(*it, key, out);
    } else {
      out.push_back(key);
    }
  }
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

/// Type compatibility of a replacement value with the default it replaces.
/// Integers may stand in for floats, not the other way round.
inline bool same_kind(const nlohmann::json& def, const nlohmann::json& v) {
  if (def.is_number_float()) return v.is_number();
  if (def.is_number_unsigned()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  if (def.is_number_integer()) return v.is_number_integer();
  return def.type() == v.type();
}

}  // namespace detail

/// All leaf keys of the default configuration in dotted form.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  detail::flatten_keys(config_to_json(AppConfig{}), "", keys);
  return keys;
}

/// Up to `n` valid keys closest to `key` by edit distance.
inline std::vector<std::string> nearest_keys(const std::string& key, std::size_t n = 3) {
  std::vector<std::pair<std::size_t, std::string>> scored;
  for (const auto& k : config_keys()) {
    // Compare against the last component too, so "lr" finds "pretrain.lr".
    const auto dot = k.rfind('.');
    const std::string leaf = dot == std::string::npos ? k : k.substr(dot + 1);
    scored.emplace_back(std::min(detail::edit_distance(key, k), detail::edit_distance(key, leaf) + 1), k);
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(n, scored.size()); ++i) out.push_back(scored[i].second);
  return out;
}

inline ConfigError unknown_key_error(const std::string& key) {
  std::string msg = "unknown config key '" + key + "'; nearest valid keys:";
  for (const auto& k : nearest_keys(key)) msg += " " + k;
  return ConfigError(msg);
}

/// Sets a dotted key in `j`, which must already contain it.
inline void set_config_key(nlohmann::json& j, const std::string& key, const nlohmann::json& value) {
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw unknown_key_error(key);
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("config key '" + key + "' is a section, not a value");
  if (!detail::same_kind(*node, value)) {
    throw ConfigError("config key '" + key + "' expects " + std::string(node->type_name()) + ", got " +
                      value.dump());
  }
  *node = value;
}

/// Parses "dotted.key=value". The value is read as JSON when it parses,
/// otherwise as a bare string.
inline std::pair<std::string, nlohmann::json> parse_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + text + "' is not of the form key=value");
  }
  const std::string key = text.substr(0, eq), raw = text.substr(eq + 1);
  nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
  if (v.is_discarded()) v = raw;
  return {key, v};
}

namespace detail {

inline void merge_file(nlohmann::json& base, const nlohmann::json& file, const std::string& prefix) {
  for (auto it = file.begin(); it != file.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (prefix.empty() && (it.key() == "schema" || it.key() == "version")) continue;
    if (it->is_object()) {
      if (!base.contains(it.key()) || !base[it.key()].is_object()) throw unknown_key_error(key);
      merge_file(base[it.key()], *it, key);
    } else {
      if (!base.contains(it.key()) || base[it.key()].is_object()) throw unknown_key_error(key);
      if (!same_kind(base[it.key()], *it)) {
        throw ConfigError("config key '" + key + "' expects " + std::string(base[it.key()].type_name()) +
                          ", got " + it->dump());
      }
      base[it.key()] = *it;
    }
  }
}

}  // namespace detail

/// Defaults, then the JSON file (if any), then overrides in order.
inline AppConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  nlohmann::json j = config_to_json(AppConfig{});
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    const nlohmann::json file = nlohmann::json::parse(ss.str(), nullptr, false);
    if (file.is_discarded() || !file.is_object()) throw ConfigError(path.string() + ": not a JSON object");
    if (file.contains("schema") && file["schema"] != kConfigSchema) {
      throw ConfigError(path.string() + ": schema is not " + kConfigSchema);
    }
    if (file.contains("version") && file["version"] != kConfigVersion) {
      throw ConfigError(path.string() + ": unsupported config version " + file["version"].dump());
    }
    detail::merge_file(j, file, "");
  }
  for (const auto& o : overrides) {
    auto [key, value] = parse_override(o);
    set_config_key(j, key, value);
  }
  AppConfig c = config_from_json(j);
  c.validate();
  return c;
}

/// Writes the resolved config as `resolved_config.json` under dir.
inline std::filesystem::path echo_config(const AppConfig& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto path = dir / "resolved_config.json";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << config_to_json(c).dump(2) << "\n";
  return path;
}

// ---------------------------------------------------------------------------
// Curation op chains

inline DatasetManifest apply_curate_op(const DatasetManifest& m, const std::string& op, std::uint64_t seed) {
  const auto colon = op.find(':');
  if (colon == std::string::npos) throw ConfigError("curate op '" + op + "' is not of the form name:arg");
  const std::string name = op.substr(0, colon), arg = op.substr(colon + 1);
  auto number = [&]() {
    try {
      std::size_t used = 0;
      const double v = std::stod(arg, &used);
      if (used != arg.size()) throw std::invalid_argument(arg);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("curate op '" + op + "': argument is not a number");
    }
  };
  auto count = [&]() {
    const double v = number();
    if (v < 1 || v != std::floor(v)) throw ConfigError("curate op '" + op + "': argument must be a positive integer");
    return static_cast<std::int64_t>(v);
  };
  if (name == "every_k") return every_k_sampler(m, count());
  if (name == "identity_cap") return per_identity_cap(m, static_cast<std::size_t>(count()), seed);
  if (name == "camera_subset") return camera_subset_select(m, static_cast<std::size_t>(count()), seed);
  if (name == "pose_filter") return pose_filter(m, number());
  if (name == "split") return filter_split(m, arg);
  throw ConfigError("unknown curate op '" + name + "' (every_k, identity_cap, camera_subset, pose_filter, split)");
}

inline DatasetManifest apply_curate_chain(DatasetManifest m, const std::vector<std::string>& ops, std::uint64_t seed) {
  for (const auto& op : ops) m = apply_curate_op(m, op, seed);
  return m;
}

}  // namespace unigaze

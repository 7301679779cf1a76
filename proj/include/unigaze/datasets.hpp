#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "unigaze/common.hpp"
#include "unigaze/geometry.hpp"
#include "unigaze/image.hpp"

namespace unigaze {

// ---------------------------------------------------------------------------
// Records and manifests

/// One labeled face sample. Paths are relative to the manifest's directory.
struct SampleRecord {
  std::string dataset_id;
  std::string subject_id;
  std::int64_t frame_index = 0;
  int camera_id = 0;
  std::string image;
  CameraIntrinsics intrinsics;
  std::optional<Vec3> head_rotation;  // axis-angle, radians
  std::optional<Vec3> face_center;    // camera frame, mm
  std::optional<PitchYaw> gaze;
  std::vector<Vec2> landmarks;        // pixel coordinates, generic face model order
  std::string split = "unsplit";      // train, test or unsplit

  bool operator==(const SampleRecord&) const = default;
};

inline std::string record_key(const SampleRecord& r) {
  return r.dataset_id + "/" + r.subject_id + "/" + std::to_string(r.frame_index) + "/" +
         std::to_string(r.camera_id);
}

struct DatasetManifest {
  std::string name;
  std::vector<SampleRecord> records;
  std::vector<std::string> provenance;

  std::size_t size() const { return records.size(); }
  bool operator==(const DatasetManifest&) const = default;
};

inline constexpr const char* kManifestFormat = "unigaze-manifest";
inline constexpr int kManifestVersion = 1;

namespace detail {

using ojson = nlohmann::ordered_json;

inline ojson vec_json(const auto& v) {
  ojson a = ojson::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline ojson record_to_json(const SampleRecord& r) {
  ojson j;
  j["dataset"] = r.dataset_id;
  j["subject"] = r.subject_id;
  j["frame"] = r.frame_index;
  j["camera"] = r.camera_id;
  j["image"] = r.image;
  j["intrinsics"] = {r.intrinsics.fx, r.intrinsics.fy, r.intrinsics.cx, r.intrinsics.cy};
  if (r.head_rotation) j["head_rotation"] = vec_json(*r.head_rotation);
  if (r.face_center) j["face_center"] = vec_json(*r.face_center);
  if (r.gaze) j["gaze"] = {r.gaze->pitch, r.gaze->yaw};
  if (!r.landmarks.empty()) {
    ojson lm = ojson::array();
    for (const auto& p : r.landmarks) lm.push_back({p.x(), p.y()});
    j["landmarks"] = lm;
  }
  j["split"] = r.split;
  return j;
}

template <int N>
Eigen::Matrix<double, N, 1> json_vec(const ojson& j, const char* field) {
  if (!j.is_array() || j.size() != N) {
    throw DataError(std::string("field '") + field + "' must be an array of " + std::to_string(N) +
                    " numbers");
  }
  Eigen::Matrix<double, N, 1> v;
  for (int i = 0; i < N; ++i) {
    if (!j[static_cast<std::size_t>(i)].is_number()) {
      throw DataError(std::string("field '") + field + "' must contain numbers");
    }
    v[i] = j[static_cast<std::size_t>(i)].get<double>();
    if (!std::isfinite(v[i])) throw DataError(std::string("field '") + field + "' is not finite");
  }
  return v;
}

inline const ojson& require(const ojson& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end()) throw DataError(std::string("missing field '") + field + "'");
  return *it;
}

inline SampleRecord record_from_json(const ojson& j) {
  if (!j.is_object()) throw DataError("record must be a JSON object");
  static const std::set<std::string> known{"dataset", "subject",     "frame", "camera",
                                           "image",   "intrinsics",  "head_rotation",
                                           "face_center", "gaze",    "landmarks", "split"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw DataError("unknown field '" + k + "'");
  }
  SampleRecord r;
  try {
    r.dataset_id = require(j, "dataset").get<std::string>();
    r.subject_id = require(j, "subject").get<std::string>();
    r.frame_index = require(j, "frame").get<std::int64_t>();
    r.camera_id = require(j, "camera").get<int>();
    r.image = require(j, "image").get<std::string>();
    r.split = require(j, "split").get<std::string>();
  } catch (const nlohmann::json::type_error& e) {
    throw DataError(std::string("wrong field type: ") + e.what());
  }
  if (r.image.empty()) throw DataError("field 'image' is empty");
  if (r.split != "train" && r.split != "test" && r.split != "unsplit") {
    throw DataError("field 'split' must be train, test or unsplit, got '" + r.split + "'");
  }
  const auto k = json_vec<4>(require(j, "intrinsics"), "intrinsics");
  r.intrinsics = {k[0], k[1], k[2], k[3]};
  r.intrinsics.validate();
  if (j.contains("head_rotation")) r.head_rotation = json_vec<3>(j["head_rotation"], "head_rotation");
  if (j.contains("face_center")) r.face_center = json_vec<3>(j["face_center"], "face_center");
  if (j.contains("gaze") && !j["gaze"].is_null()) {
    const auto g = json_vec<2>(j["gaze"], "gaze");
    r.gaze = PitchYaw{g[0], g[1]};
  }
  if (j.contains("landmarks")) {
    const auto& lm = j["landmarks"];
    if (!lm.is_array()) throw DataError("field 'landmarks' must be an array");
    for (const auto& p : lm) r.landmarks.push_back(json_vec<2>(p, "landmarks"));
  }
  return r;
}

}  // namespace detail

/// JSON Lines: a header object, then one record per line.
inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("write_manifest: cannot open " + path.string());
  detail::ojson header;
  header["format"] = kManifestFormat;
  header["version"] = kManifestVersion;
  header["name"] = m.name;
  header["provenance"] = m.provenance;
  out << header.dump() << '\n';
  for (const auto& r : m.records) out << detail::record_to_json(r).dump() << '\n';
  if (!out) throw DataError("write_manifest: write failed for " + path.string());
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_manifest: cannot open " + path.string());
  DatasetManifest m;
  std::unordered_map<std::string, std::size_t> seen;  // key -> line
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  auto fail = [&](const std::string& msg) {
    throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    detail::ojson j;
    try {
      j = detail::ojson::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(std::string("malformed line: ") + e.what());
    }
    if (!have_header) {
      have_header = true;
      if (!j.is_object() || j.value("format", std::string()) != kManifestFormat) {
        fail("missing manifest header");
      }
      if (j.value("version", -1) != kManifestVersion) {
        fail("unsupported manifest version " + j.value("version", nlohmann::ordered_json()).dump());
      }
      m.name = j.value("name", std::string());
      if (j.contains("provenance")) m.provenance = j["provenance"].get<std::vector<std::string>>();
      continue;
    }
    SampleRecord r;
    try {
      r = detail::record_from_json(j);
    } catch (const Error& e) {
      fail(e.what());
    }
    const std::string key = record_key(r);
    auto [it, fresh] = seen.emplace(key, lineno);
    if (!fresh) {
      fail("duplicate key " + key + " (first on line " + std::to_string(it->second) + ", again on line " +
           std::to_string(lineno) + ")");
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

/// Throws on repeated (dataset, subject, frame, camera) keys.
inline void check_unique_keys(const DatasetManifest& m) {
  std::unordered_map<std::string, std::size_t> seen;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    auto [it, fresh] = seen.emplace(record_key(m.records[i]), i);
    if (!fresh) {
      throw DataError("manifest " + m.name + ": duplicate key " + it->first + " at records " +
                      std::to_string(it->second) + " and " + std::to_string(i));
    }
  }
}

inline Image load_record_image(const SampleRecord& r, const std::filesystem::path& root) {
  return read_png(root / r.image);
}

inline std::vector<Image> load_images(const DatasetManifest& m, const std::filesystem::path& root) {
  std::vector<Image> out;
  out.reserve(m.size());
  for (const auto& r : m.records) out.push_back(load_record_image(r, root));
  return out;
}

inline DatasetManifest filter_split(const DatasetManifest& m, const std::string& split) {
  DatasetManifest out{m.name, {}, m.provenance};
  for (const auto& r : m.records) {
    if (r.split == split) out.records.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Curation

/// Keeps frames whose index is a multiple of k.
inline DatasetManifest every_k_sampler(const DatasetManifest& m, std::int64_t k) {
  if (k < 1) throw ConfigError("every_k_sampler: k must be >= 1");
  DatasetManifest out{m.name, {}, m.provenance};
  for (const auto& r : m.records) {
    if (r.frame_index % k == 0) out.records.push_back(r);
  }
  out.provenance.push_back("every_k_sampler k=" + std::to_string(k));
  return out;
}

/// At most `cap` records per (dataset, subject), drawn uniformly; survivors
/// keep their original order.
inline DatasetManifest per_identity_cap(const DatasetManifest& m, std::size_t cap, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    groups[m.records[i].dataset_id + "/" + m.records[i].subject_id].push_back(i);
  }
  std::vector<bool> keep(m.records.size(), false);
  for (auto& [id, idx] : groups) {
    if (idx.size() > cap) {
      Rng rng(derive_seed(seed, fnv1a(id)));
      shuffle(idx, rng);
      idx.resize(cap);
    }
    for (auto i : idx) keep[i] = true;
  }
  DatasetManifest out{m.name, {}, m.provenance};
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (keep[i]) out.records.push_back(m.records[i]);
  }
  out.provenance.push_back("per_identity_cap cap=" + std::to_string(cap) + " seed=" + std::to_string(seed));
  return out;
}

/// Draws n camera ids per dataset once and keeps only their records.
inline DatasetManifest camera_subset_select(const DatasetManifest& m, std::size_t n, std::uint64_t seed) {
  std::map<std::string, std::set<int>> cams;
  for (const auto& r : m.records) cams[r.dataset_id].insert(r.camera_id);
  std::map<std::string, std::set<int>> chosen;
  std::string note = "camera_subset_select n=" + std::to_string(n) + " seed=" + std::to_string(seed);
  for (const auto& [ds, ids] : cams) {
    if (n > ids.size()) {
      throw DataError("camera_subset_select: dataset " + ds + " has " + std::to_string(ids.size()) +
                      " cameras, cannot select " + std::to_string(n));
    }
    std::vector<int> v(ids.begin(), ids.end());
    Rng rng(derive_seed(seed, fnv1a(ds)));
    shuffle(v, rng);
    chosen[ds].insert(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n));
    note += " " + ds + ":";
    bool first = true;
    for (int c : chosen[ds]) {
      note += (first ? "" : ",") + std::to_string(c);
      first = false;
    }
  }
  DatasetManifest out{m.name, {}, m.provenance};
  for (const auto& r : m.records) {
    if (chosen[r.dataset_id].count(r.camera_id)) out.records.push_back(r);
  }
  out.provenance.push_back(note);
  return out;
}

inline PitchYaw record_head_pose(const SampleRecord& r) {
  if (!r.head_rotation) throw DataError("record " + record_key(r) + " has no head pose");
  return head_pose_pitchyaw(rotation_from_axis_angle(*r.head_rotation));
}

/// Drops records whose head pose lies beyond limit_deg.
inline DatasetManifest pose_filter(const DatasetManifest& m, double limit_deg) {
  DatasetManifest out{m.name, {}, m.provenance};
  for (const auto& r : m.records) {
    if (pose_filter_check(record_head_pose(r), limit_deg)) out.records.push_back(r);
  }
  std::ostringstream note;
  note << "pose_filter limit_deg=" << limit_deg;
  out.provenance.push_back(note.str());
  return out;
}

/// Epoch-seeded shuffle of [0, n) cut into batches; the last may be short.
inline std::vector<std::vector<std::size_t>> batch_iterator(std::size_t n, std::size_t batch_size,
                                                            std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch_iterator: batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, epoch, 0xba7c4));
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> batch_iterator(const DatasetManifest& m, std::size_t batch_size,
                                                            std::uint64_t seed, std::uint64_t epoch) {
  return batch_iterator(m.size(), batch_size, seed, epoch);
}

// ---------------------------------------------------------------------------
// Augmentation

struct JitterSpec {
  double probability = 0.5;
  double hue = 0.15;                      // shift drawn from [-hue, hue], fraction of a turn
  std::array<double, 2> saturation{0.8, 1.2};
  std::array<double, 2> contrast{0.4, 1.8};
  std::array<double, 2> brightness{0.7, 1.3};
  double grayscale_probability = 0.05;

  void validate() const {
    auto ordered = [](const std::array<double, 2>& r) { return r[0] >= 0 && r[0] <= r[1]; };
    if (!ordered(saturation) || !ordered(contrast) || !ordered(brightness) || hue < 0 || hue > 0.5) {
      throw ConfigError("JitterSpec: ranges must be ordered and non-negative, hue in [0, 0.5]");
    }
    if (probability < 0 || probability > 1 || grayscale_probability < 0 || grayscale_probability > 1) {
      throw ConfigError("JitterSpec: probabilities must lie in [0, 1]");
    }
  }
  bool operator==(const JitterSpec&) const = default;
};

/// Concrete jitter factors. Identity is (1, 1, 1, 0, false).
struct JitterDraw {
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;
  bool grayscale = false;
};

namespace detail {

inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }
inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0.0;
  if (d <= 0) {
    h = 0.0;
  } else if (mx == r) {
    h = (g - b) / d / 6.0;
  } else if (mx == g) {
    h = ((b - r) / d + 2.0) / 6.0;
  } else {
    h = ((r - g) / d + 4.0) / 6.0;
  }
  h -= std::floor(h);
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  h = (h - std::floor(h)) * 6.0;
  const int i = std::min(5, static_cast<int>(h));
  const double f = h - i;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

}  // namespace detail

/// Brightness, contrast, saturation, hue, then grayscale, clamping to [0, 1]
/// after each step. Three-channel images only.
inline Image apply_jitter(const Image& img, const JitterDraw& d) {
  if (img.channels != 3) throw DataError("color_jitter: expected 3 channels");
  Image out = img;
  auto& px = out.data;
  const std::size_t n = px.size() / 3;
  if (d.brightness != 1.0) {
    for (auto& v : px) v = detail::clamp01(v * d.brightness);
  }
  if (d.contrast != 1.0) {
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += detail::luma(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
    mean /= static_cast<double>(n);
    for (auto& v : px) v = detail::clamp01(mean + d.contrast * (v - mean));
  }
  if (d.saturation != 1.0) {
    for (std::size_t i = 0; i < n; ++i) {
      const double y = detail::luma(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
      for (int c = 0; c < 3; ++c) px[3 * i + c] = detail::clamp01(y + d.saturation * (px[3 * i + c] - y));
    }
  }
  if (d.hue != 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      double h, s, v;
      detail::rgb_to_hsv(px[3 * i], px[3 * i + 1], px[3 * i + 2], h, s, v);
      detail::hsv_to_rgb(h + d.hue, s, v, px[3 * i], px[3 * i + 1], px[3 * i + 2]);
    }
  }
  if (d.grayscale) {
    for (std::size_t i = 0; i < n; ++i) {
      const double y = detail::luma(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
      px[3 * i] = px[3 * i + 1] = px[3 * i + 2] = y;
    }
  }
  return out;
}

inline JitterDraw draw_jitter(const JitterSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  JitterDraw d;
  if (uniform01(rng) < spec.probability) {
    d.brightness = uniform(rng, spec.brightness[0], spec.brightness[1]);
    d.contrast = uniform(rng, spec.contrast[0], spec.contrast[1]);
    d.saturation = uniform(rng, spec.saturation[0], spec.saturation[1]);
    d.hue = uniform(rng, -spec.hue, spec.hue);
  }
  d.grayscale = uniform01(rng) < spec.grayscale_probability;
  return d;
}

inline Image color_jitter(const Image& img, const JitterSpec& spec, std::uint64_t seed) {
  return apply_jitter(img, draw_jitter(spec, seed));
}

inline Image hflip(const Image& img) {
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

/// Separable Gaussian blur with clamped borders; sigma in pixels.
inline Image gaussian_blur(const Image& img, double sigma) {
  if (!(sigma > 0)) return img;
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (int i = -radius; i <= radius; ++i) {
    total += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  }
  for (auto& v : k) v /= total;
  auto pass = [&](const Image& src, bool horizontal) {
    Image dst(src.height, src.width, src.channels);
    for (int y = 0; y < src.height; ++y) {
      for (int x = 0; x < src.width; ++x) {
        for (int c = 0; c < src.channels; ++c) {
          double acc = 0;
          for (int i = -radius; i <= radius; ++i) {
            const int sx = horizontal ? std::clamp(x + i, 0, src.width - 1) : x;
            const int sy = horizontal ? y : std::clamp(y + i, 0, src.height - 1);
            acc += k[static_cast<std::size_t>(i + radius)] * src.at(sy, sx, c);
          }
          dst.at(y, x, c) = acc;
        }
      }
    }
    return dst;
  };
  return pass(pass(img, true), false);
}

/// Rounds to the 8-bit levels a PNG round trip would produce.
inline void quantize_u8(Image& img) {
  for (auto& v : img.data) v = to_u8(v) / 255.0;
}

// ---------------------------------------------------------------------------
// Procedural toy faces

/// Appearance and label distribution of one toy dataset.
struct ToyDomain {
  std::string name;
  std::array<double, 3> background{0.5, 0.5, 0.5};
  double background_jitter = 0.05;  // per-image uniform offset per channel
  std::array<double, 3> skin{0.85, 0.68, 0.55};
  double light = 1.0;
  double light_jitter = 0.1;
  double shading = 0.2;             // strength of a random linear light gradient
  double blur = 0.0;                // Gaussian sigma as a fraction of image size
  double blur_jitter = 0.0;
  double noise = 0.01;
  double head_pitch_deg = 15;       // head pose drawn uniformly in +-range
  double head_yaw_deg = 20;
  double gaze_pitch_deg = 20;
  double gaze_yaw_deg = 30;
  int cameras = 1;
  double camera_yaw_spread_deg = 0;   // per-camera head pose offsets
  double camera_pitch_spread_deg = 0;

  bool operator==(const ToyDomain&) const = default;
};

/// Five named domains that differ in tint, lighting, pose range and blur.
/// "studio" has 18 cameras.
inline std::vector<ToyDomain> toy_domains() {
  std::vector<ToyDomain> d(5);
  d[0].name = "studio";
  d[0].background = {0.55, 0.55, 0.58};
  d[0].cameras = 18;
  d[0].camera_yaw_spread_deg = 25;
  d[0].camera_pitch_spread_deg = 12;
  d[0].head_pitch_deg = 8;
  d[0].head_yaw_deg = 10;
  d[0].gaze_pitch_deg = 25;
  d[0].gaze_yaw_deg = 35;

  d[1].name = "laptop";
  d[1].background = {0.78, 0.62, 0.45};
  d[1].skin = {0.92, 0.70, 0.52};
  d[1].light = 0.95;
  d[1].blur = 0.018;
  d[1].noise = 0.02;
  d[1].head_pitch_deg = 12;
  d[1].head_yaw_deg = 18;
  d[1].gaze_pitch_deg = 18;
  d[1].gaze_yaw_deg = 25;

  d[2].name = "outdoor";
  d[2].background = {0.35, 0.62, 0.82};
  d[2].skin = {0.80, 0.62, 0.50};
  d[2].light = 1.15;
  d[2].shading = 0.45;
  d[2].blur = 0.008;
  d[2].head_pitch_deg = 18;
  d[2].head_yaw_deg = 28;
  d[2].gaze_pitch_deg = 22;
  d[2].gaze_yaw_deg = 32;

  d[3].name = "dim";
  d[3].background = {0.16, 0.15, 0.22};
  d[3].skin = {0.70, 0.55, 0.48};
  d[3].light = 0.6;
  d[3].light_jitter = 0.15;
  d[3].blur = 0.022;
  d[3].noise = 0.05;
  d[3].head_pitch_deg = 10;
  d[3].head_yaw_deg = 15;
  d[3].gaze_pitch_deg = 20;
  d[3].gaze_yaw_deg = 28;

  d[4].name = "wild";
  d[4].background = {0.45, 0.5, 0.4};
  d[4].background_jitter = 0.3;
  d[4].skin = {0.82, 0.64, 0.52};
  d[4].light_jitter = 0.25;
  d[4].shading = 0.35;
  d[4].blur = 0.012;
  d[4].blur_jitter = 0.012;
  d[4].noise = 0.03;
  d[4].head_pitch_deg = 20;
  d[4].head_yaw_deg = 30;
  d[4].gaze_pitch_deg = 25;
  d[4].gaze_yaw_deg = 35;
  return d;
}

inline const ToyDomain& find_toy_domain(const std::vector<ToyDomain>& domains, const std::string& name) {
  for (const auto& d : domains) {
    if (d.name == name) return d;
  }
  throw ConfigError("unknown toy domain '" + name + "'");
}

struct ToySpec {
  ToyDomain domain;
  int image_size = 32;
  int subjects = 25;
  int test_subjects = 5;  // the last subjects form the test split
  int supersample = 3;

  bool operator==(const ToySpec&) const = default;
};

/// Geometry of one rendered face in pixel units; ground truth for the
/// inverse-render check.
struct ToyRenderInfo {
  std::array<Vec2, 2> eye_centers;
  std::array<Vec2, 2> pupil_centers;
  double eyeball_radius = 0.0;  // pupil offset = eyeball_radius * (g.x, g.y)
};

struct ToyDataset {
  DatasetManifest manifest;
  std::vector<Image> images;
  std::vector<ToyRenderInfo> info;
};

/// Gaze label recovered from a pupil displacement (pixels).
inline PitchYaw toy_inverse_render(const Vec2& eye_center, const Vec2& pupil_center, double eyeball_radius) {
  const double gx = (pupil_center.x() - eye_center.x()) / eyeball_radius;
  const double gy = (pupil_center.y() - eye_center.y()) / eyeball_radius;
  const double gz = -std::sqrt(std::max(0.0, 1.0 - gx * gx - gy * gy));
  return vector_to_pitchyaw(Vec3(gx, gy, gz));
}

namespace detail {

struct ToySubject {
  std::array<double, 3> skin;
  std::array<double, 3> hair;
  std::array<double, 3> iris;
  double face_width;
  double eye_spacing;
  double eye_size;
};

struct ToyScene {
  std::array<double, 3> background;
  std::array<double, 3> background2;
  double light;
  Vec2 light_dir;
  double shading;
  PitchYaw head;
  PitchYaw gaze;
  Vec2 head_offset;
};

inline bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
  const double dx = (x - cx) / rx, dy = (y - cy) / ry;
  return dx * dx + dy * dy <= 1.0;
}

// Renders in unit coordinates (image spans [0, 1]^2) and fills `info` in
// pixels.
inline Image render_toy_face(const ToySubject& subj, const ToyScene& sc, int size, int ss,
                             ToyRenderInfo& info) {
  const Vec3 facing = pitchyaw_to_vector(sc.head);
  const Vec3 gaze = pitchyaw_to_vector(sc.gaze);
  const double hx = 0.5 + sc.head_offset.x() + 0.05 * facing.x();
  const double hy = 0.53 + sc.head_offset.y() + 0.05 * facing.y();
  const double head_rx = 0.34 * subj.face_width, head_ry = 0.42;
  // Features slide across the head with its rotation.
  const double fdx = 0.16 * facing.x(), fdy = 0.16 * facing.y();
  const double cos_yaw = std::cos(sc.head.yaw);
  const double ex_off = subj.eye_spacing * cos_yaw;
  const double eye_y = hy - 0.06 + fdy;
  const std::array<double, 2> eye_x{hx - ex_off + fdx, hx + ex_off + fdx};
  const double eye_rx = 0.105 * subj.eye_size * (0.6 + 0.4 * cos_yaw), eye_ry = 0.07 * subj.eye_size;
  const double iris_r = 0.062 * subj.eye_size, pupil_r = 0.028 * subj.eye_size;
  const double ball = 0.10 * subj.eye_size;
  std::array<Vec2, 2> pupil;
  for (int e = 0; e < 2; ++e) {
    pupil[static_cast<std::size_t>(e)] = {eye_x[static_cast<std::size_t>(e)] + ball * gaze.x(),
                                          eye_y + ball * gaze.y()};
    info.eye_centers[static_cast<std::size_t>(e)] = Vec2(eye_x[static_cast<std::size_t>(e)], eye_y) * size;
    info.pupil_centers[static_cast<std::size_t>(e)] = pupil[static_cast<std::size_t>(e)] * size;
  }
  info.eyeball_radius = ball * size;

  Image img(size, size, 3);
  const double inv = 1.0 / (size * ss);
  for (int py = 0; py < size; ++py) {
    for (int px = 0; px < size; ++px) {
      std::array<double, 3> acc{0, 0, 0};
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double x = (px * ss + sx + 0.5) * inv;
          const double y = (py * ss + sy + 0.5) * inv;
          std::array<double, 3> c;
          const double t = y;
          for (int k = 0; k < 3; ++k) {
            c[static_cast<std::size_t>(k)] = (1 - t) * sc.background[static_cast<std::size_t>(k)] +
                                             t * sc.background2[static_cast<std::size_t>(k)];
          }
          if (in_ellipse(x, y, hx, hy, head_rx, head_ry)) {
            c = subj.skin;
            if (y < hy - 0.26 + 0.5 * fdy && !in_ellipse(x, y, hx + 0.5 * fdx, hy - 0.05, head_rx * 0.92, 0.34)) {
              c = subj.hair;
            }
            if (in_ellipse(x, y, hx + 1.3 * fdx, hy + 0.09 + 1.2 * fdy, 0.035, 0.06)) {
              for (auto& v : c) v *= 0.8;  // nose
            }
            if (in_ellipse(x, y, hx + fdx, hy + 0.24 + fdy, 0.11 * (0.6 + 0.4 * cos_yaw), 0.025)) {
              c = {0.55, 0.25, 0.25};  // mouth
            }
            for (int e = 0; e < 2; ++e) {
              const double ex = eye_x[static_cast<std::size_t>(e)];
              if (in_ellipse(x, y, ex, eye_y - 0.085, eye_rx * 1.1, 0.018)) c = subj.hair;  // brow
              if (in_ellipse(x, y, ex, eye_y, eye_rx, eye_ry)) {
                c = {0.95, 0.95, 0.93};
                const Vec2& p = pupil[static_cast<std::size_t>(e)];
                const double d2 = (x - p.x()) * (x - p.x()) + (y - p.y()) * (y - p.y());
                if (d2 <= pupil_r * pupil_r) {
                  c = {0.05, 0.05, 0.05};
                } else if (d2 <= iris_r * iris_r) {
                  c = subj.iris;
                }
              }
            }
          }
          const double shade =
              sc.light * (1.0 + sc.shading * ((x - 0.5) * sc.light_dir.x() + (y - 0.5) * sc.light_dir.y()));
          for (int k = 0; k < 3; ++k) acc[static_cast<std::size_t>(k)] += c[static_cast<std::size_t>(k)] * shade;
        }
      }
      for (int k = 0; k < 3; ++k) img.at(py, px, k) = acc[static_cast<std::size_t>(k)] / (ss * ss);
    }
  }
  return img;
}

}  // namespace detail

/// Renders n labeled faces spread evenly over the spec's subjects. Labels
/// are exact by construction; output is a pure function of (spec, n, seed).
inline ToyDataset toy_face_generate(const ToySpec& spec, std::size_t n, std::uint64_t seed) {
  const ToyDomain& dom = spec.domain;
  if (spec.subjects < 1 || spec.test_subjects < 0 || spec.test_subjects > spec.subjects ||
      spec.image_size < 8 || spec.supersample < 1 || dom.cameras < 1) {
    throw ConfigError("toy_face_generate: invalid spec for domain " + dom.name);
  }
  const std::uint64_t base = derive_seed(seed, fnv1a(dom.name));

  std::vector<PitchYaw> camera_offsets;
  {
    Rng rng(derive_seed(base, 1));
    for (int c = 0; c < dom.cameras; ++c) {
      camera_offsets.push_back({deg2rad(uniform(rng, -1, 1) * dom.camera_pitch_spread_deg),
                                deg2rad(uniform(rng, -1, 1) * dom.camera_yaw_spread_deg)});
    }
  }
  std::vector<detail::ToySubject> subjects;
  {
    Rng rng(derive_seed(base, 2));
    for (int s = 0; s < spec.subjects; ++s) {
      detail::ToySubject t;
      const double tone = uniform(rng, 0.75, 1.1);
      for (int k = 0; k < 3; ++k) t.skin[static_cast<std::size_t>(k)] = std::min(1.0, dom.skin[static_cast<std::size_t>(k)] * tone);
      const double hair = uniform(rng, 0.05, 0.45);
      t.hair = {hair * 1.1, hair * 0.9, hair * 0.75};
      const double iris_hue = uniform01(rng);
      detail::hsv_to_rgb(iris_hue, uniform(rng, 0.3, 0.8), uniform(rng, 0.25, 0.55), t.iris[0], t.iris[1], t.iris[2]);
      t.face_width = uniform(rng, 0.9, 1.1);
      t.eye_spacing = uniform(rng, 0.14, 0.17);
      t.eye_size = uniform(rng, 0.9, 1.1);
      subjects.push_back(t);
    }
  }

  ToyDataset out;
  out.manifest.name = dom.name;
  out.manifest.provenance.push_back("toy_face_generate domain=" + dom.name + " n=" + std::to_string(n) +
                                    " seed=" + std::to_string(seed));
  const CameraIntrinsics cam = default_normalized_camera(spec.image_size);
  std::vector<std::int64_t> frame_counter(static_cast<std::size_t>(spec.subjects), 0);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(base, 3, i));
    const auto s = static_cast<int>(i % static_cast<std::size_t>(spec.subjects));
    const auto camera = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(dom.cameras)));
    detail::ToyScene sc;
    const double lo = -dom.background_jitter, hi = dom.background_jitter;
    for (int k = 0; k < 3; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      sc.background[kk] = std::clamp(dom.background[kk] + uniform(rng, lo, hi), 0.0, 1.0);
      sc.background2[kk] = std::clamp(sc.background[kk] * uniform(rng, 0.75, 1.05), 0.0, 1.0);
    }
    sc.light = dom.light * (1.0 + uniform(rng, -dom.light_jitter, dom.light_jitter));
    const double ang = uniform(rng, 0, 2 * kPi);
    sc.light_dir = {std::cos(ang), std::sin(ang)};
    sc.shading = dom.shading;
    const PitchYaw& off = camera_offsets[static_cast<std::size_t>(camera)];
    sc.head = {off.pitch + deg2rad(uniform(rng, -1, 1) * dom.head_pitch_deg),
               off.yaw + deg2rad(uniform(rng, -1, 1) * dom.head_yaw_deg)};
    sc.gaze = {deg2rad(uniform(rng, -1, 1) * dom.gaze_pitch_deg), deg2rad(uniform(rng, -1, 1) * dom.gaze_yaw_deg)};
    sc.head_offset = {uniform(rng, -0.03, 0.03), uniform(rng, -0.03, 0.03)};
    const double blur = std::max(0.0, dom.blur + uniform(rng, -dom.blur_jitter, dom.blur_jitter)) * spec.image_size;
    const std::uint64_t noise_seed = rng();

    ToyRenderInfo info;
    Image img = detail::render_toy_face(subjects[static_cast<std::size_t>(s)], sc, spec.image_size,
                                        spec.supersample, info);
    img = gaussian_blur(img, blur);
    if (dom.noise > 0) {
      Rng nrng(noise_seed);
      for (auto& v : img.data) v += dom.noise * normal01(nrng);
    }
    quantize_u8(img);

    SampleRecord r;
    r.dataset_id = dom.name;
    char sid[16];
    std::snprintf(sid, sizeof sid, "s%03d", s);
    r.subject_id = sid;
    r.frame_index = frame_counter[static_cast<std::size_t>(s)]++;
    r.camera_id = camera;
    char path[96];
    std::snprintf(path, sizeof path, "images/%s/%s_%05lld.png", dom.name.c_str(), sid,
                  static_cast<long long>(r.frame_index));
    r.image = path;
    r.intrinsics = cam;
    r.head_rotation = axis_angle_from_rotation(head_rotation_from_pitchyaw(sc.head));
    r.face_center = Vec3(0, 0, kDefaultStandardDistance);
    r.gaze = sc.gaze;
    r.split = s >= spec.subjects - spec.test_subjects ? "test" : "train";
    out.manifest.records.push_back(std::move(r));
    out.images.push_back(std::move(img));
    out.info.push_back(info);
  }
  return out;
}

/// Writes images and `<name>.jsonl` under dir; returns the manifest path.
inline std::filesystem::path write_toy_dataset(const ToyDataset& ds, const std::filesystem::path& dir) {
  for (std::size_t i = 0; i < ds.images.size(); ++i) write_png(ds.images[i], dir / ds.manifest.records[i].image);
  const auto path = dir / (ds.manifest.name + ".jsonl");
  write_manifest(ds.manifest, path);
  return path;
}

}  // namespace unigaze

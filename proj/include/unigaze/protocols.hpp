#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "unigaze/training.hpp"

namespace unigaze {

// ---------------------------------------------------------------------------
// Protocol resolution

struct ProtocolSpec {
  std::string kind = "cross";              // within, cross, leave_one_out, joint
  std::vector<std::string> datasets;       // within: {A}; cross: {A, B}; others: all
  std::string held_out;                    // leave_one_out: run only this fold when set
  bool cross_full_target = true;           // cross: test on all of B, else on its test split
  std::string train_split = "train";
  std::string test_split = "test";

  void validate() const {
    if (kind != "within" && kind != "cross" && kind != "leave_one_out" && kind != "joint") {
      throw ConfigError("ProtocolSpec: unknown kind '" + kind + "'");
    }
    if (datasets.empty()) throw ConfigError("ProtocolSpec: no datasets named");
    if (kind == "within" && datasets.size() != 1) throw ConfigError("within protocol takes exactly one dataset");
    if (kind == "cross" && datasets.size() != 2) throw ConfigError("cross protocol takes exactly two datasets");
    if (kind == "cross" && datasets[0] == datasets[1]) {
      throw ConfigError("cross protocol needs different train and test datasets, got " + datasets[0] + " twice");
    }
    if (kind == "leave_one_out" && datasets.size() < 2) throw ConfigError("leave_one_out needs at least 2 datasets");
    if (!held_out.empty() && std::find(datasets.begin(), datasets.end(), held_out) == datasets.end()) {
      throw ConfigError("held_out dataset '" + held_out + "' is not among the protocol datasets");
    }
    std::set<std::string> uniq(datasets.begin(), datasets.end());
    if (uniq.size() != datasets.size()) throw ConfigError("ProtocolSpec: dataset named twice");
  }
  bool operator==(const ProtocolSpec&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProtocolSpec, kind, datasets, held_out, cross_full_target,
                                                train_split, test_split)

/// One training run and the test sets it is scored on.
struct ProtocolRun {
  std::string train_config;  // row label, e.g. "laptop+outdoor"
  DatasetManifest train;
  std::vector<DatasetManifest> tests;
};

namespace detail {

inline const DatasetManifest& find_manifest(const std::vector<DatasetManifest>& ms, const std::string& name) {
  for (const auto& m : ms) {
    if (m.name == name) return m;
  }
  std::string known;
  for (const auto& m : ms) known += (known.empty() ? "" : ", ") + m.name;
  throw DataError("unknown dataset '" + name + "' (known: " + known + ")");
}

inline DatasetManifest union_of(const std::vector<DatasetManifest>& parts, const std::string& name) {
  DatasetManifest out;
  out.name = name;
  for (const auto& p : parts) {
    out.records.insert(out.records.end(), p.records.begin(), p.records.end());
    for (const auto& note : p.provenance) out.provenance.push_back(p.name + ": " + note);
  }
  return out;
}

inline void check_disjoint(const ProtocolRun& run) {
  std::unordered_set<std::string> train;
  for (const auto& r : run.train.records) train.insert(record_key(r));
  for (const auto& t : run.tests) {
    for (const auto& r : t.records) {
      if (train.count(record_key(r))) {
        throw DataError("protocol run '" + run.train_config + "': sample " + record_key(r) +
                        " is in both train and test " + t.name);
      }
    }
  }
}

inline std::string join_names(const std::vector<std::string>& names) {
  std::string s;
  for (const auto& n : names) s += (s.empty() ? "" : "+") + n;
  return s;
}

}  // namespace detail

/// Expands a protocol into concrete (train, tests) runs over named manifests.
inline std::vector<ProtocolRun> resolve_protocol(const ProtocolSpec& spec, const std::vector<DatasetManifest>& ms) {
  spec.validate();
  for (const auto& n : spec.datasets) detail::find_manifest(ms, n);
  auto train_of = [&](const std::string& n) {
    DatasetManifest m = filter_split(detail::find_manifest(ms, n), spec.train_split);
    m.name = n;
    return m;
  };
  auto test_of = [&](const std::string& n) {
    DatasetManifest m = filter_split(detail::find_manifest(ms, n), spec.test_split);
    m.name = n;
    return m;
  };
  std::vector<ProtocolRun> runs;
  if (spec.kind == "within") {
    const auto& a = spec.datasets[0];
    runs.push_back({a, train_of(a), {test_of(a)}});
  } else if (spec.kind == "cross") {
    const auto& a = spec.datasets[0];
    const auto& b = spec.datasets[1];
    DatasetManifest target = spec.cross_full_target ? detail::find_manifest(ms, b) : test_of(b);
    target.name = b;
    runs.push_back({a, train_of(a), {target}});
  } else if (spec.kind == "leave_one_out") {
    for (const auto& held : spec.datasets) {
      if (!spec.held_out.empty() && held != spec.held_out) continue;
      std::vector<DatasetManifest> parts;
      std::vector<std::string> names;
      for (const auto& n : spec.datasets) {
        if (n == held) continue;
        parts.push_back(train_of(n));
        names.push_back(n);
      }
      DatasetManifest target = detail::find_manifest(ms, held);
      target.name = held;
      const std::string label = detail::join_names(names);
      runs.push_back({label, detail::union_of(parts, label), {target}});
    }
  } else {
    std::vector<DatasetManifest> parts, tests;
    for (const auto& n : spec.datasets) {
      parts.push_back(train_of(n));
      tests.push_back(test_of(n));
    }
    const std::string label = "joint(" + detail::join_names(spec.datasets) + ")";
    runs.push_back({label, detail::union_of(parts, label), tests});
  }
  for (const auto& run : runs) {
    if (run.train.size() == 0) throw DataError("protocol run '" + run.train_config + "' has no training samples");
    for (const auto& t : run.tests) {
      if (t.size() == 0) throw DataError("protocol run '" + run.train_config + "' has an empty test set " + t.name);
    }
    detail::check_disjoint(run);
  }
  return runs;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double mean_error_deg = 0.0;
  std::vector<double> per_sample;
};

/// Angular errors of predictions against the manifest's labels.
inline EvalResult score_predictions(const std::vector<PitchYaw>& pred, const DatasetManifest& m) {
  if (pred.size() != m.size()) {
    throw DataError("score_predictions: " + std::to_string(pred.size()) + " predictions for " +
                    std::to_string(m.size()) + " samples");
  }
  if (m.size() == 0) throw DataError("score_predictions: empty test set " + m.name);
  EvalResult r;
  r.per_sample.reserve(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!m.records[i].gaze) throw DataError("evaluation sample " + record_key(m.records[i]) + " has no gaze label");
    r.per_sample.push_back(angular_error_deg(pred[i], *m.records[i].gaze));
  }
  double sum = 0;
  for (double e : r.per_sample) sum += e;
  r.mean_error_deg = sum / static_cast<double>(r.per_sample.size());
  return r;
}

/// Runs the checkpoint's model over the images, in its stored precision.
inline EvalResult evaluate_model(const Checkpoint& c, const DatasetManifest& m, const std::vector<Image>& images) {
  detail::check_aligned(m, images, "evaluate_model");
  for (const auto& r : m.records) {
    if (!r.gaze) throw DataError("evaluation sample " + record_key(r) + " has no gaze label");
  }
  std::vector<const Image*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  std::vector<PitchYaw> pred;
  if (c.dtype == "float32") {
    pred = predict_gaze(params_from_checkpoint<float>(c, c.model, 0), c.model, ptrs);
  } else {
    pred = predict_gaze(params_from_checkpoint<double>(c, c.model, 0), c.model, ptrs);
  }
  return score_predictions(pred, m);
}

// ---------------------------------------------------------------------------
// Reports

struct EvalRow {
  std::string train_config;
  std::string test_dataset;
  std::size_t n_samples = 0;
  double mean_error_deg = 0.0;

  bool operator==(const EvalRow&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalRow, train_config, test_dataset, n_samples, mean_error_deg)

struct EvalReport {
  std::vector<EvalRow> rows;
  nlohmann::json meta = nlohmann::json::object();  // seed, checkpoint id, config hash

  void validate() const {
    for (const auto& r : rows) {
      if (r.n_samples == 0) throw DataError("report row " + r.train_config + " / " + r.test_dataset + " has no samples");
      if (!(r.mean_error_deg >= 0)) throw DataError("report row " + r.train_config + " / " + r.test_dataset + " has a negative or NaN error");
    }
  }
  bool operator==(const EvalReport&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalReport, rows, meta)

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// FNV-1a over the compact JSON dump.
inline std::string config_hash(const nlohmann::json& j) { return hex64(fnv1a(j.dump())); }

/// FNV-1a over the serialized checkpoint bytes.
inline std::string checkpoint_id(const Checkpoint& c) { return hex64(fnv1a(serialize_checkpoint(c))); }

/// Markdown grid: training configs as rows, test sets as columns, both in
/// first-appearance order. The column minimum is bold.
inline std::string aggregate_report(const EvalReport& report) {
  report.validate();
  std::vector<std::string> row_names, col_names;
  std::map<std::pair<std::string, std::string>, double> cell;
  for (const auto& r : report.rows) {
    if (std::find(row_names.begin(), row_names.end(), r.train_config) == row_names.end()) row_names.push_back(r.train_config);
    if (std::find(col_names.begin(), col_names.end(), r.test_dataset) == col_names.end()) col_names.push_back(r.test_dataset);
    if (!cell.emplace(std::make_pair(r.train_config, r.test_dataset), r.mean_error_deg).second) {
      throw DataError("report has two rows for " + r.train_config + " / " + r.test_dataset);
    }
  }
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  std::map<std::string, std::string> col_min;  // formatted, so ties in print are ties in bold
  for (const auto& c : col_names) {
    double best = INFINITY;
    for (const auto& r : row_names) {
      auto it = cell.find({r, c});
      if (it != cell.end()) best = std::min(best, it->second);
    }
    col_min[c] = fmt(best);
  }
  std::string md = "| train \\ test |";
  for (const auto& c : col_names) md += " " + c + " |";
  md += "\n|---|";
  for (std::size_t i = 0; i < col_names.size(); ++i) md += "---:|";
  md += "\n";
  for (const auto& r : row_names) {
    md += "| " + r + " |";
    for (const auto& c : col_names) {
      auto it = cell.find({r, c});
      if (it == cell.end()) {
        md += " - |";
        continue;
      }
      const std::string v = fmt(it->second);
      md += (v == col_min[c] ? " **" + v + "** |" : " " + v + " |");
    }
    md += "\n";
  }
  return md;
}

struct CellChange {
  std::string train_config;
  std::string test_dataset;
  double baseline = 0.0;
  double candidate = 0.0;
  double percent = 0.0;  // negative is an improvement
};

struct Comparison {
  std::vector<CellChange> cells;
  std::vector<std::string> warnings;  // unmatched cells
};

/// 100 * (candidate - baseline) / baseline for every cell present in both.
inline Comparison compare_runs(const EvalReport& baseline, const EvalReport& candidate) {
  Comparison out;
  std::map<std::pair<std::string, std::string>, double> cand;
  for (const auto& r : candidate.rows) cand[{r.train_config, r.test_dataset}] = r.mean_error_deg;
  std::set<std::pair<std::string, std::string>> matched;
  for (const auto& r : baseline.rows) {
    const auto key = std::make_pair(r.train_config, r.test_dataset);
    auto it = cand.find(key);
    if (it == cand.end()) {
      out.warnings.push_back("no candidate cell for " + r.train_config + " / " + r.test_dataset);
      continue;
    }
    if (!(r.mean_error_deg > 0)) {
      out.warnings.push_back("baseline cell " + r.train_config + " / " + r.test_dataset + " is zero");
      continue;
    }
    matched.insert(key);
    out.cells.push_back({r.train_config, r.test_dataset, r.mean_error_deg, it->second,
                         100.0 * (it->second - r.mean_error_deg) / r.mean_error_deg});
  }
  for (const auto& r : candidate.rows) {
    if (!matched.count({r.train_config, r.test_dataset}) &&
        std::none_of(baseline.rows.begin(), baseline.rows.end(), [&](const EvalRow& b) {
          return b.train_config == r.train_config && b.test_dataset == r.test_dataset;
        })) {
      out.warnings.push_back("no baseline cell for " + r.train_config + " / " + r.test_dataset);
    }
  }
  return out;
}

/// Markdown listing of a comparison, e.g. "5.04 (-4.0)".
inline std::string comparison_markdown(const Comparison& c) {
  std::string md = "| train | test | baseline | candidate (change %) |\n|---|---|---:|---:|\n";
  char buf[160];
  for (const auto& x : c.cells) {
    std::snprintf(buf, sizeof buf, "| %s | %s | %.2f | %.2f (%+.1f) |\n", x.train_config.c_str(),
                  x.test_dataset.c_str(), x.baseline, x.candidate, x.percent);
    md += buf;
  }
  for (const auto& w : c.warnings) md += "\nwarning: " + w;
  if (!c.warnings.empty()) md += "\n";
  return md;
}

inline void write_report(const EvalReport& r, const std::filesystem::path& json_path) {
  if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
  {
    std::ofstream out(json_path);
    out << nlohmann::json(r).dump(2) << "\n";
    if (!out) throw DataError("write_report: cannot write " + json_path.string());
  }
  std::filesystem::path md = json_path;
  md.replace_extension(".md");
  std::ofstream out(md);
  out << aggregate_report(r);
  if (!out) throw DataError("write_report: cannot write " + md.string());
}

inline EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_report: cannot open " + path.string());
  try {
    EvalReport r = nlohmann::json::parse(in).get<EvalReport>();
    r.validate();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("load_report: " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Running a protocol

/// Manifests with their decoded images, aligned by index.
struct ImageSet {
  DatasetManifest manifest;
  std::vector<Image> images;
};

namespace detail {

inline std::vector<Image> gather_images(const DatasetManifest& m,
                                        const std::unordered_map<std::string, const Image*>& lookup) {
  std::vector<Image> out;
  out.reserve(m.size());
  for (const auto& r : m.records) {
    auto it = lookup.find(record_key(r));
    if (it == lookup.end()) throw DataError("no image loaded for sample " + record_key(r));
    out.push_back(*it->second);
  }
  return out;
}

}  // namespace detail

/// Fine-tunes one model per protocol run and scores it on every test set.
/// Runs are independent, so `jobs` > 1 trains them on separate threads;
/// results do not depend on the job count.
template <typename T>
EvalReport run_protocol(const ProtocolSpec& spec, const std::vector<ImageSet>& data, const TrainRunConfig& cfg,
                        const Checkpoint* init, unsigned jobs = 1) {
  std::vector<DatasetManifest> ms;
  std::unordered_map<std::string, const Image*> lookup;
  for (const auto& d : data) {
    detail::check_aligned(d.manifest, d.images, "run_protocol");
    ms.push_back(d.manifest);
    for (std::size_t i = 0; i < d.images.size(); ++i) lookup[record_key(d.manifest.records[i])] = &d.images[i];
  }
  const std::vector<ProtocolRun> runs = resolve_protocol(spec, ms);
  std::vector<std::vector<EvalRow>> rows(runs.size());
  std::vector<std::exception_ptr> errors(runs.size());
  auto work = [&](std::size_t k) {
    try {
      const ProtocolRun& run = runs[k];
      const auto train_images = detail::gather_images(run.train, lookup);
      const TrainOutput out = finetune_loop<T>(cfg, run.train, train_images, init);
      for (const auto& t : run.tests) {
        const EvalResult e = evaluate_model(out.checkpoint, t, detail::gather_images(t, lookup));
        rows[k].push_back({run.train_config, t.name, t.size(), e.mean_error_deg});
      }
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(runs.size())));
  if (jobs == 1) {
    for (std::size_t k = 0; k < runs.size(); ++k) work(k);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (unsigned j = 0; j < jobs; ++j) {
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < runs.size(); k = next++) work(k);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  EvalReport report;
  for (auto& r : rows) report.rows.insert(report.rows.end(), r.begin(), r.end());
  report.meta["protocol"] = spec;
  report.meta["seed"] = cfg.seed;
  report.meta["config_hash"] = config_hash(nlohmann::json(cfg));
  report.meta["checkpoint"] = init ? checkpoint_id(*init) : "random-init";
  return report;
}

}  // namespace unigaze

// unigaze command-line tool. Every subcommand writes its artifacts and a
// resolved_config.json under --out.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "unigaze/config.hpp"
#include "unigaze/datasets.hpp"
#include "unigaze/overlay.hpp"
#include "unigaze/protocols.hpp"
#include "unigaze/training.hpp"

namespace fs = std::filesystem;
using namespace unigaze;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::int64_t seed = -1;
  unsigned jobs = 0;
  bool fast = false;
  bool reference = false;
};

void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
  sub->add_option("--set", o.overrides, "Override a config key, e.g. --set finetune.lr=3e-4")->take_all();
  sub->add_option("--out", o.out, "Output directory")->required();
  sub->add_option("--seed", o.seed, "Run seed (overrides the config)");
  sub->add_option("--jobs", o.jobs, "Parallel protocol runs; 1 is bit-reproducible");
  auto* f = sub->add_flag("--fast", o.fast, "float32 arithmetic");
  auto* r = sub->add_flag("--reference", o.reference, "float64 arithmetic (default)");
  f->excludes(r);
}

AppConfig resolve(const CommonOptions& o) {
  std::vector<std::string> ov = o.overrides;
  if (o.seed >= 0) ov.push_back("seed=" + std::to_string(o.seed));
  if (o.jobs > 0) ov.push_back("jobs=" + std::to_string(o.jobs));
  if (o.fast) ov.push_back("precision=\"fast\"");
  if (o.reference) ov.push_back("precision=\"reference\"");
  AppConfig c = load_config(o.config, ov);
  echo_config(c, o.out);
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

ImageSet load_set(const fs::path& manifest, const std::string& split) {
  ImageSet s;
  s.manifest = load_manifest(manifest);
  if (!split.empty()) s.manifest = filter_split(s.manifest, split);
  s.images = load_images(s.manifest, manifest.parent_path());
  return s;
}

ImageSet keep_split(ImageSet s, const std::string& split) {
  ImageSet out;
  out.manifest = filter_split(s.manifest, split);
  for (std::size_t i = 0; i < s.manifest.size(); ++i) {
    if (s.manifest.records[i].split == split) out.images.push_back(std::move(s.images[i]));
  }
  return out;
}

/// Concatenates several manifests (and their images) into one set.
ImageSet load_union(const std::vector<std::string>& paths, const std::string& split) {
  ImageSet all;
  std::vector<std::string> names;
  for (const auto& p : paths) {
    ImageSet s = load_set(p, split);
    names.push_back(s.manifest.name);
    all.manifest.records.insert(all.manifest.records.end(), s.manifest.records.begin(), s.manifest.records.end());
    all.manifest.provenance.insert(all.manifest.provenance.end(), s.manifest.provenance.begin(),
                                   s.manifest.provenance.end());
    all.images.insert(all.images.end(), std::make_move_iterator(s.images.begin()),
                      std::make_move_iterator(s.images.end()));
  }
  all.manifest.name = detail::join_names(names);
  check_unique_keys(all.manifest);
  return all;
}

template <typename F>
auto dispatch(const AppConfig& c, F&& f) {
  if (c.reference()) return f.template operator()<double>();
  return f.template operator()<float>();
}

std::string safe_name(std::string s) {
  for (auto& ch : s) {
    if (ch == '/' || ch == '\\' || ch == ' ') ch = '_';
  }
  return s;
}

// ---------------------------------------------------------------------------

int cmd_synth(const CommonOptions& o) {
  const AppConfig c = resolve(o);
  const auto domains = toy_domains();
  for (const auto& name : c.synth.domains) {
    ToySpec spec{.domain = find_toy_domain(domains, name),
                 .image_size = c.synth.image_size,
                 .subjects = c.synth.subjects,
                 .test_subjects = c.synth.test_subjects,
                 .supersample = c.synth.supersample};
    const ToyDataset ds = toy_face_generate(spec, static_cast<std::size_t>(c.synth.images), c.seed);
    const fs::path p = write_toy_dataset(ds, o.out);
    std::printf("synth: %s (%zu images)\n", p.string().c_str(), ds.images.size());
  }
  return kOk;
}

int cmd_normalize(const CommonOptions& o, const std::string& manifest_path) {
  const AppConfig c = resolve(o);
  const DatasetManifest m = load_manifest(manifest_path);
  const fs::path root = fs::path(manifest_path).parent_path();
  DatasetManifest out = m;
  out.records.clear();
  for (const auto& r : m.records) {
    const Image img = load_record_image(r, root);
    NormalizedSample s = normalize_sample(r, img, c.normalize.image_size, c.normalize.standard_distance);
    s.record.image = (fs::path("normalized") / r.image).generic_string();
    write_png(s.image, fs::path(o.out) / s.record.image);
    out.records.push_back(std::move(s.record));
  }
  char note[128];
  std::snprintf(note, sizeof note, "normalize size=%d distance=%.17g", c.normalize.image_size,
                c.normalize.standard_distance);
  out.provenance.push_back(note);
  const fs::path dst = fs::path(o.out) / (m.name + ".jsonl");
  write_manifest(out, dst);
  std::printf("normalize: %s (%zu samples)\n", dst.string().c_str(), out.size());
  return kOk;
}

int cmd_curate(const CommonOptions& o, const std::string& manifest_path, const std::vector<std::string>& ops) {
  CommonOptions oo = o;
  if (!ops.empty()) oo.overrides.push_back("curate.ops=" + nlohmann::json(ops).dump());
  const AppConfig c = resolve(oo);
  const DatasetManifest m = load_manifest(manifest_path);
  DatasetManifest out = apply_curate_chain(m, c.curate.ops, c.seed);
  // Image paths stay valid by pointing back at the source directory.
  const fs::path rel = fs::relative(fs::absolute(fs::path(manifest_path).parent_path()), fs::absolute(o.out));
  for (auto& r : out.records) r.image = (rel / r.image).lexically_normal().generic_string();
  const fs::path dst = fs::path(o.out) / (m.name + ".jsonl");
  write_manifest(out, dst);
  std::printf("curate: %s kept %zu of %zu\n", dst.string().c_str(), out.size(), m.size());
  return kOk;
}

int cmd_pretrain(const CommonOptions& o, const std::vector<std::string>& manifests, const std::string& split) {
  const AppConfig c = resolve(o);
  const ImageSet data = load_union(manifests, split);
  const TrainRunConfig run = c.pretrain_run();
  const fs::path out(o.out);
  TrainHooks hooks;
  hooks.on_checkpoint = [&](const Checkpoint& ck) {
    char name[64];
    std::snprintf(name, sizeof name, "checkpoint_step%06lld.ckpt", static_cast<long long>(ck.step));
    save_checkpoint(ck, out / name);
  };
  TrainOutput res = dispatch(c, [&]<typename T>() { return pretrain_loop<T>(run, data.manifest, data.images, hooks); });
  save_checkpoint(res.checkpoint, out / "checkpoint.ckpt");
  write_text(out / "trace.csv", trace_csv(res.trace));
  std::printf("pretrain: %zu steps, loss %.6g -> %.6g\n", res.trace.size(), res.trace.front().loss,
              res.trace.back().loss);
  return kOk;
}

int cmd_finetune(const CommonOptions& o, const std::vector<std::string>& manifests, const std::string& split,
                 const std::string& val_path, const std::string& val_split, const std::string& init_path) {
  const AppConfig c = resolve(o);
  const ImageSet data = load_union(manifests, split);
  std::optional<ImageSet> val;
  if (!val_path.empty()) val = load_set(val_path, val_split);
  std::optional<Checkpoint> init;
  if (!init_path.empty()) init = load_checkpoint(init_path);
  const TrainRunConfig run = c.finetune_run();
  const fs::path out(o.out);
  TrainHooks hooks;
  hooks.on_checkpoint = [&](const Checkpoint& ck) {
    char name[64];
    std::snprintf(name, sizeof name, "checkpoint_step%06lld.ckpt", static_cast<long long>(ck.step));
    save_checkpoint(ck, out / name);
  };
  TrainOutput res = dispatch(c, [&]<typename T>() {
    return finetune_loop<T>(run, data.manifest, data.images, init ? &*init : nullptr, val ? &val->manifest : nullptr,
                            val ? &val->images : nullptr, hooks);
  });
  save_checkpoint(res.checkpoint, out / "checkpoint.ckpt");
  write_text(out / "trace.csv", trace_csv(res.trace));
  if (!res.val_errors.empty()) {
    std::string csv = "epoch,mean_error_deg\n";
    char buf[64];
    for (std::size_t e = 0; e < res.val_errors.size(); ++e) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g\n", e, res.val_errors[e]);
      csv += buf;
    }
    write_text(out / "val.csv", csv);
    std::printf("finetune: validation error %.4f -> %.4f deg\n", res.val_errors.front(), res.val_errors.back());
  } else {
    std::printf("finetune: %zu steps, loss %.6g -> %.6g\n", res.trace.size(), res.trace.front().loss,
                res.trace.back().loss);
  }
  return kOk;
}

int cmd_eval(const CommonOptions& o, const std::vector<std::string>& manifests, const std::string& protocol,
             const std::string& checkpoint_path, const std::string& init_path, const std::string& split) {
  CommonOptions oo = o;
  if (!protocol.empty()) oo.overrides.push_back("protocol.kind=\"" + protocol + "\"");
  const AppConfig c = resolve(oo);
  std::vector<ImageSet> sets;
  for (const auto& p : manifests) sets.push_back(load_set(p, ""));
  EvalReport report;
  if (!checkpoint_path.empty()) {
    if (!protocol.empty()) throw ConfigError("--checkpoint and --protocol are mutually exclusive");
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    const std::string label = ck.meta.value("label", "checkpoint " + checkpoint_id(ck));
    for (auto& s : sets) {
      if (!split.empty()) s = keep_split(std::move(s), split);
      const EvalResult e = evaluate_model(ck, s.manifest, s.images);
      report.rows.push_back({label, s.manifest.name, s.manifest.size(), e.mean_error_deg});
    }
    report.meta["checkpoint"] = checkpoint_id(ck);
  } else {
    ProtocolSpec spec = c.protocol;
    if (spec.datasets.empty()) {
      for (const auto& s : sets) spec.datasets.push_back(s.manifest.name);
    }
    spec.validate();
    std::optional<Checkpoint> init;
    if (!init_path.empty()) init = load_checkpoint(init_path);
    const TrainRunConfig run = c.finetune_run();
    report = dispatch(c, [&]<typename T>() {
      return run_protocol<T>(spec, sets, run, init ? &*init : nullptr, c.jobs);
    });
  }
  report.meta["precision"] = c.precision;
  write_report(report, fs::path(o.out) / "report.json");
  std::fputs(aggregate_report(report).c_str(), stdout);
  return kOk;
}

int cmd_report(const CommonOptions& o, const std::vector<std::string>& reports, const std::string& baseline) {
  resolve(o);
  EvalReport merged;
  nlohmann::json sources = nlohmann::json::array();
  for (const auto& p : reports) {
    const EvalReport r = load_report(p);
    merged.rows.insert(merged.rows.end(), r.rows.begin(), r.rows.end());
    sources.push_back(r.meta);
  }
  merged.meta["sources"] = sources;
  merged.validate();
  const fs::path out(o.out);
  write_report(merged, out / "report.json");
  std::fputs(aggregate_report(merged).c_str(), stdout);
  if (!baseline.empty()) {
    const Comparison cmp = compare_runs(load_report(baseline), merged);
    const std::string md = comparison_markdown(cmp);
    write_text(out / "comparison.md", md);
    std::fputs(md.c_str(), stdout);
  }
  return kOk;
}

int cmd_draw(const CommonOptions& o, const std::string& manifest_path, const std::vector<std::size_t>& indices,
             std::size_t limit, const std::string& checkpoint_path) {
  const AppConfig c = resolve(o);
  const DatasetManifest m = load_manifest(manifest_path);
  const fs::path root = fs::path(manifest_path).parent_path();
  std::optional<Checkpoint> ck;
  if (c.draw.source == "prediction") {
    if (checkpoint_path.empty()) throw ConfigError("draw.source=prediction needs --checkpoint");
    ck = load_checkpoint(checkpoint_path);
  }
  std::vector<std::size_t> pick = indices;
  if (pick.empty()) {
    for (std::size_t i = 0; i < std::min(limit, m.size()); ++i) pick.push_back(i);
  }
  for (std::size_t i : pick) {
    if (i >= m.size()) throw DataError("draw: index " + std::to_string(i) + " out of range for " + m.name);
    const SampleRecord& r = m.records[i];
    Image img = load_record_image(r, root);
    Vec3 g;
    if (ck) {
      // Predict in the normalized camera, then rotate back into the record's camera.
      const NormalizedSample s = normalize_sample(r, img, ck->model.image_size, c.normalize.standard_distance);
      const Image* ptr = &s.image;
      std::vector<PitchYaw> pred;
      if (ck->dtype == "float32") {
        const auto params = params_from_checkpoint<float>(*ck, ck->model, 0);
        pred = predict_gaze<float>(params, ck->model, std::span<const Image* const>(&ptr, 1));
      } else {
        const auto params = params_from_checkpoint<double>(*ck, ck->model, 0);
        pred = predict_gaze<double>(params, ck->model, std::span<const Image* const>(&ptr, 1));
      }
      g = denormalize_gaze(pitchyaw_to_vector(pred[0]), s.norm);
    } else {
      if (!r.gaze) throw DataError("draw: sample " + record_key(r) + " has no gaze label");
      g = pitchyaw_to_vector(*r.gaze);
    }
    const Vec2 a = gaze_anchor(r, img, c.draw.anchor);
    draw_gaze_arrow(img, a, gaze_arrow_tip(a, g, c.draw.length_px));
    const fs::path dst = fs::path(o.out) / "draw" / (safe_name(record_key(r)) + ".png");
    fs::create_directories(dst.parent_path());
    write_png(img, dst);
  }
  std::printf("draw: %zu overlays under %s\n", pick.size(), (fs::path(o.out) / "draw").string().c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Training allocates and frees many short-lived buffers per step; keeping
  // them on the heap avoids repeated mmap/munmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
  CLI::App app{"unigaze: gaze estimation with masked-autoencoder pre-training"};
  app.require_subcommand(1);

  CommonOptions opt;
  std::vector<std::string> manifests, ops, reports;
  std::string manifest, split, val, val_split = "test", init, checkpoint, protocol, baseline;
  std::vector<std::size_t> indices;
  std::size_t limit = 16;

  auto* synth = app.add_subcommand("synth", "Generate the toy face domains");
  add_common(synth, opt);

  auto* normalize = app.add_subcommand("normalize", "Warp samples into the normalized camera");
  add_common(normalize, opt);
  normalize->add_option("--manifest", manifest, "Input manifest")->required()->check(CLI::ExistingFile);

  auto* curate = app.add_subcommand("curate", "Apply a curation op chain to a manifest");
  add_common(curate, opt);
  curate->add_option("--manifest", manifest, "Input manifest")->required()->check(CLI::ExistingFile);
  curate->add_option("--op", ops, "Op name:arg, in order (replaces curate.ops)");

  auto* pretrain = app.add_subcommand("pretrain", "MAE pre-training");
  add_common(pretrain, opt);
  pretrain->add_option("--manifest", manifests, "Training manifests")->required()->check(CLI::ExistingFile);
  pretrain->add_option("--split", split, "Use only this split of each manifest");

  auto* finetune = app.add_subcommand("finetune", "Gaze regression fine-tuning");
  add_common(finetune, opt);
  finetune->add_option("--manifest", manifests, "Training manifests")->required()->check(CLI::ExistingFile);
  finetune->add_option("--split", split, "Use only this split of each manifest");
  finetune->add_option("--val", val, "Validation manifest")->check(CLI::ExistingFile);
  finetune->add_option("--val-split", val_split, "Split of the validation manifest (empty for all)");
  finetune->add_option("--init", init, "Pre-trained checkpoint")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Score a checkpoint or run a protocol");
  add_common(eval, opt);
  eval->add_option("--manifest", manifests, "Dataset manifests")->required()->check(CLI::ExistingFile);
  eval->add_option("--protocol", protocol, "within, cross, leave_one_out or joint");
  eval->add_option("--checkpoint", checkpoint, "Score this checkpoint instead of running a protocol")
      ->check(CLI::ExistingFile);
  eval->add_option("--init", init, "Pre-trained checkpoint for protocol runs")->check(CLI::ExistingFile);
  eval->add_option("--split", split, "With --checkpoint: score only this split");

  auto* report = app.add_subcommand("report", "Merge reports into tables");
  add_common(report, opt);
  report->add_option("--report", reports, "Report JSON files")->required()->check(CLI::ExistingFile);
  report->add_option("--baseline", baseline, "Baseline report for relative changes")->check(CLI::ExistingFile);

  auto* draw = app.add_subcommand("draw", "Overlay gaze arrows on sample images");
  add_common(draw, opt);
  draw->add_option("--manifest", manifest, "Input manifest")->required()->check(CLI::ExistingFile);
  draw->add_option("--index", indices, "Record indices (default: the first --limit)");
  draw->add_option("--limit", limit, "Number of records when no --index is given");
  draw->add_option("--checkpoint", checkpoint, "Model for draw.source=prediction")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? kOk : kUsage;
  }

  const CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  auto fail = [&](int code, const std::string& what) {
    std::fprintf(stderr, "unigaze %s: %s\n", name.c_str(), what.c_str());
    return code;
  };
  try {
    if (sub == synth) return cmd_synth(opt);
    if (sub == normalize) return cmd_normalize(opt, manifest);
    if (sub == curate) return cmd_curate(opt, manifest, ops);
    if (sub == pretrain) return cmd_pretrain(opt, manifests, split);
    if (sub == finetune) return cmd_finetune(opt, manifests, split, val, val_split, init);
    if (sub == eval) return cmd_eval(opt, manifests, protocol, checkpoint, init, split);
    if (sub == report) return cmd_report(opt, reports, baseline);
    if (sub == draw) return cmd_draw(opt, manifest, indices, limit, checkpoint);
  } catch (const ConfigError& e) {
    return fail(kUsage, e.what());
  } catch (const NumericError& e) {
    return fail(kNumeric, e.what());
  } catch (const DataError& e) {
    return fail(kData, e.what());
  } catch (const ad::ShapeError& e) {
    return fail(kData, e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(kData, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(kData, e.what());
  } catch (const std::exception& e) {
    return fail(kData, e.what());
  }
  return kUsage;
}

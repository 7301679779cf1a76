#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <set>
#include <string>

#include "unigaze/protocols.hpp"

using namespace unigaze;
namespace fs = std::filesystem;

namespace {

// Five labeled manifests with 8 train and 4 test records each.
std::vector<DatasetManifest> five_manifests() {
  std::vector<DatasetManifest> out;
  for (const std::string name : {"a", "b", "c", "d", "e"}) {
    DatasetManifest m;
    m.name = name;
    for (int i = 0; i < 12; ++i) {
      SampleRecord r;
      r.dataset_id = name;
      r.subject_id = "s" + std::to_string(i % 3);
      r.frame_index = i;
      r.image = name + std::to_string(i) + ".png";
      r.gaze = PitchYaw{0.01 * i, -0.02 * i};
      r.split = i < 8 ? "train" : "test";
      m.records.push_back(r);
    }
    out.push_back(m);
  }
  return out;
}

std::set<std::string> keys(const DatasetManifest& m) {
  std::set<std::string> s;
  for (const auto& r : m.records) s.insert(record_key(r));
  return s;
}

ProtocolSpec spec(const std::string& kind, std::vector<std::string> ds) {
  ProtocolSpec s;
  s.kind = kind;
  s.datasets = std::move(ds);
  return s;
}

}  // namespace

TEST(Resolve, LeaveOneOutOverFive) {
  const auto ms = five_manifests();
  const auto runs = resolve_protocol(spec("leave_one_out", {"a", "b", "c", "d", "e"}), ms);
  ASSERT_EQ(runs.size(), 5u);
  std::vector<std::string> held;
  for (const auto& run : runs) {
    ASSERT_EQ(run.tests.size(), 1u);
    held.push_back(run.tests[0].name);
    EXPECT_EQ(run.train.size(), 4u * 8u);
    EXPECT_EQ(run.tests[0].size(), 12u);
    const auto tr = keys(run.train), te = keys(run.tests[0]);
    for (const auto& k : te) EXPECT_FALSE(tr.count(k)) << k;
    for (const auto& r : run.train.records) {
      EXPECT_EQ(r.split, "train");
      EXPECT_NE(r.dataset_id, run.tests[0].name);
    }
  }
  std::vector<std::string> sorted = held;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<std::string>{"a", "b", "c", "d", "e"}));

  ProtocolSpec one = spec("leave_one_out", {"a", "b", "c", "d", "e"});
  one.held_out = "c";
  const auto single = resolve_protocol(one, ms);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_EQ(single[0].tests[0].name, "c");
  EXPECT_EQ(single[0].train_config, "a+b+d+e");
}

TEST(Resolve, JointOverFive) {
  const auto runs = resolve_protocol(spec("joint", {"a", "b", "c", "d", "e"}), five_manifests());
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_EQ(runs[0].tests.size(), 5u);
  EXPECT_EQ(runs[0].train.size(), 5u * 8u);
  for (const auto& t : runs[0].tests) EXPECT_EQ(t.size(), 4u);
}

TEST(Resolve, WithinAndCross) {
  const auto ms = five_manifests();
  const auto within = resolve_protocol(spec("within", {"b"}), ms);
  ASSERT_EQ(within.size(), 1u);
  EXPECT_EQ(within[0].train.size(), 8u);
  EXPECT_EQ(within[0].tests[0].size(), 4u);

  const auto cross = resolve_protocol(spec("cross", {"a", "b"}), ms);
  EXPECT_EQ(cross[0].train.size(), 8u);
  EXPECT_EQ(cross[0].tests[0].size(), 12u);  // full target by default
  ProtocolSpec split = spec("cross", {"a", "b"});
  split.cross_full_target = false;
  EXPECT_EQ(resolve_protocol(split, ms)[0].tests[0].size(), 4u);
}

TEST(Resolve, Errors) {
  const auto ms = five_manifests();
  EXPECT_THROW(resolve_protocol(spec("cross", {"a", "a"}), ms), ConfigError);
  EXPECT_THROW(resolve_protocol(spec("cross", {"a", "zzz"}), ms), DataError);
  EXPECT_THROW(resolve_protocol(spec("leave_one_out", {"a"}), ms), ConfigError);
  EXPECT_THROW(resolve_protocol(spec("nested", {"a"}), ms), ConfigError);

  // A record duplicated across datasets must not land on both sides.
  auto leaky = ms;
  SampleRecord dup = leaky[0].records[0];
  dup.split = "test";
  leaky[1].records.push_back(dup);
  EXPECT_THROW(resolve_protocol(spec("cross", {"a", "b"}), leaky), DataError);
}

TEST(Evaluate, ScoresAndRecount) {
  const DatasetManifest m = five_manifests()[0];
  std::vector<PitchYaw> exact;
  for (const auto& r : m.records) exact.push_back(*r.gaze);
  const EvalResult zero = score_predictions(exact, m);
  EXPECT_EQ(zero.mean_error_deg, 0.0);

  Rng rng(9);
  std::vector<PitchYaw> noisy;
  for (const auto& r : m.records) noisy.push_back({r.gaze->pitch + 0.1 * normal01(rng), r.gaze->yaw + 0.1 * normal01(rng)});
  const EvalResult e = score_predictions(noisy, m);
  ASSERT_EQ(e.per_sample.size(), m.size());
  long double recount = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Vec3 a = pitchyaw_to_vector(noisy[i]), b = pitchyaw_to_vector(*m.records[i].gaze);
    const double c = std::clamp(a.dot(b) / (a.norm() * b.norm()), -1.0, 1.0);
    recount += std::acos(c) * 180.0 / kPi;
  }
  EXPECT_NEAR(e.mean_error_deg, static_cast<double>(recount / m.size()), 1e-12);

  // Permutation invariance.
  DatasetManifest shuffled = m;
  std::vector<PitchYaw> shuffled_pred = noisy;
  std::reverse(shuffled.records.begin(), shuffled.records.end());
  std::reverse(shuffled_pred.begin(), shuffled_pred.end());
  EXPECT_NEAR(score_predictions(shuffled_pred, shuffled).mean_error_deg, e.mean_error_deg, 1e-12);
}

TEST(Evaluate, MeanOfOneTwoThreeDegrees) {
  DatasetManifest m;
  std::vector<PitchYaw> pred;
  for (int k = 1; k <= 3; ++k) {
    SampleRecord r;
    r.dataset_id = "x";
    r.frame_index = k;
    r.gaze = PitchYaw{0, 0};
    m.records.push_back(r);
    pred.push_back({0, deg2rad(k)});
  }
  EXPECT_NEAR(score_predictions(pred, m).mean_error_deg, 2.0, 1e-12);
}

TEST(Evaluate, UnlabeledSampleIsAnError) {
  DatasetManifest m = five_manifests()[0];
  m.records[3].gaze.reset();
  std::vector<PitchYaw> pred(m.size(), PitchYaw{0, 0});
  try {
    score_predictions(pred, m);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(record_key(m.records[3])), std::string::npos);
  }
}

TEST(Evaluate, ModelOnToyData) {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.depth = 1;
  cfg.embed_dim = 16;
  cfg.decoder_depth = 1;
  cfg.decoder_dim = 16;
  const auto params = init_params<double>(cfg, 1);
  const Checkpoint c = make_checkpoint<double>(cfg, params, nullptr);
  ToySpec ts;
  ts.domain = toy_domains()[1];
  ts.image_size = 16;
  const ToyDataset ds = toy_face_generate(ts, 10, 2);
  const EvalResult e = evaluate_model(c, ds.manifest, ds.images);
  std::vector<const Image*> ptrs;
  for (const auto& im : ds.images) ptrs.push_back(&im);
  const EvalResult direct = score_predictions(predict_gaze(params, cfg, ptrs), ds.manifest);
  EXPECT_EQ(e.per_sample, direct.per_sample);
}

// ---------------------------------------------------------------------------
// Reports

namespace {

EvalReport grid_report() {
  EvalReport r;
  r.rows = {{"a", "x", 10, 5.25}, {"a", "y", 10, 7.5}, {"b", "x", 10, 6.0}, {"b", "y", 10, 7.125}};
  r.meta = {{"seed", 1}};
  return r;
}

}  // namespace

TEST(Report, SingleRunIsOneByOne) {
  EvalReport r;
  r.rows = {{"a", "x", 3, 4.5}};
  EXPECT_EQ(aggregate_report(r), "| train \\ test | x |\n|---|---:|\n| a | **4.50** |\n");
}

TEST(Report, BoldColumnMinimaAndStableBytes) {
  const std::string md = aggregate_report(grid_report());
  EXPECT_EQ(md,
            "| train \\ test | x | y |\n"
            "|---|---:|---:|\n"
            "| a | **5.25** | 7.50 |\n"
            "| b | 6.00 | **7.12** |\n");
  EXPECT_EQ(aggregate_report(grid_report()), md);
}

TEST(Report, JsonRoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "unigaze_test_protocols";
  fs::remove_all(dir);
  write_report(grid_report(), dir / "r.json");
  EXPECT_EQ(load_report(dir / "r.json"), grid_report());
  EXPECT_TRUE(fs::exists(dir / "r.md"));
}

TEST(Report, RejectsEmptyRows) {
  EvalReport r;
  r.rows = {{"a", "x", 0, 1.0}};
  EXPECT_THROW(aggregate_report(r), DataError);
}

TEST(Compare, TableOneCell) {
  EvalReport base, cand;
  base.rows = {{"a", "x", 10, 5.25}};
  cand.rows = {{"a", "x", 10, 5.04}};
  const Comparison c = compare_runs(base, cand);
  ASSERT_EQ(c.cells.size(), 1u);
  EXPECT_NEAR(c.cells[0].percent, -4.0, 1e-12);
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.1f", c.cells[0].percent);
  EXPECT_STREQ(buf, "-4.0");
  EXPECT_NE(comparison_markdown(c).find("5.04 (-4.0)"), std::string::npos);
}

TEST(Compare, EqualReportsAndUnmatchedCells) {
  const Comparison same = compare_runs(grid_report(), grid_report());
  EXPECT_EQ(same.cells.size(), 4u);
  for (const auto& c : same.cells) EXPECT_EQ(c.percent, 0.0);
  EXPECT_TRUE(same.warnings.empty());

  EvalReport cand = grid_report();
  cand.rows.pop_back();
  cand.rows.push_back({"c", "x", 10, 1.0});
  const Comparison c = compare_runs(grid_report(), cand);
  EXPECT_EQ(c.cells.size(), 3u);
  EXPECT_EQ(c.warnings.size(), 2u);
}

// ---------------------------------------------------------------------------
// Running protocols end to end

namespace {

std::vector<ImageSet> toy_sets(std::size_t n) {
  std::vector<ImageSet> out;
  for (const auto& d : toy_domains()) {
    ToySpec ts;
    ts.domain = d;
    ts.image_size = 16;
    ts.subjects = 4;
    ts.test_subjects = 1;
    ToyDataset ds = toy_face_generate(ts, n, 3);
    out.push_back({ds.manifest, ds.images});
  }
  return out;
}

TrainRunConfig tiny_finetune() {
  TrainRunConfig cfg = finetune_defaults();
  cfg.model.image_size = 16;
  cfg.model.depth = 1;
  cfg.model.embed_dim = 16;
  cfg.model.decoder_depth = 1;
  cfg.model.decoder_dim = 16;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  return cfg;
}

}  // namespace

TEST(RunProtocol, LeaveOneOutGivesFiveRowsIndependentOfJobs) {
  const auto sets = toy_sets(12);
  ProtocolSpec s = spec("leave_one_out", {});
  for (const auto& d : sets) s.datasets.push_back(d.manifest.name);
  const EvalReport one = run_protocol<double>(s, sets, tiny_finetune(), nullptr, 1);
  ASSERT_EQ(one.rows.size(), 5u);
  for (const auto& r : one.rows) EXPECT_EQ(r.n_samples, 12u);
  const EvalReport three = run_protocol<double>(s, sets, tiny_finetune(), nullptr, 3);
  EXPECT_EQ(three, one);
  EXPECT_EQ(aggregate_report(three), aggregate_report(one));
}

TEST(RunProtocol, JointGivesOneRunFiveRows) {
  const auto sets = toy_sets(12);
  ProtocolSpec s = spec("joint", {});
  for (const auto& d : sets) s.datasets.push_back(d.manifest.name);
  const EvalReport r = run_protocol<float>(s, sets, tiny_finetune(), nullptr, 1);
  ASSERT_EQ(r.rows.size(), 5u);
  std::set<std::string> configs;
  for (const auto& row : r.rows) configs.insert(row.train_config);
  EXPECT_EQ(configs.size(), 1u);
  EXPECT_EQ(r.meta["checkpoint"], "random-init");
}

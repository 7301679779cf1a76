#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <vector>

#include "unigaze/model.hpp"

using namespace unigaze;

namespace {

Image random_image(int size, int channels, Rng& rng) {
  Image img(size, size, channels);
  for (auto& v : img.data) v = uniform01(rng);
  return img;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 2;
  cfg.channels = 3;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.embed_dim = 8;
  cfg.mlp_ratio = 2;
  cfg.decoder_depth = 1;
  cfg.decoder_dim = 8;
  cfg.decoder_heads = 2;
  cfg.mask_ratio = 0.5;
  return cfg;
}

Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = scale * uniform(rng, -1, 1);
  return t;
}

// Perturbs every parameter so LayerNorm gains, biases and the head are not
// at their symmetric initial values.
ModelParams<double> jittered_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = init_params<double>(cfg, seed);
  Rng rng(seed + 1);
  for (auto& t : p.tensors()) {
    for (auto& v : t.data) v += 0.3 * uniform(rng, -1, 1);
  }
  return p;
}

}  // namespace

TEST(Patchify, ShapesAndRoundTrip) {
  Rng rng(1);
  const PatchGrid grid{32, 4, 3};
  const Image img = random_image(32, 3, rng);
  const auto p = patchify(img, grid);
  EXPECT_EQ(p.shape, (Shape{64, 48}));
  EXPECT_EQ(unpatchify(p, grid), img);

  const Image flat(32, 32, 3, 0.25);
  const auto q = patchify(flat, grid);
  for (std::size_t r = 1; r < q.rows(); ++r) {
    EXPECT_TRUE(std::equal(q.data.begin(), q.data.begin() + 48, q.data.begin() + static_cast<std::ptrdiff_t>(r * 48)));
  }
}

TEST(Patchify, RasterOrderChannelsLast) {
  Image img(4, 4, 2);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 2; ++c) img.at(y, x, c) = y * 100 + x * 10 + c;
  const auto p = patchify(img, PatchGrid{4, 2, 2});
  // Patch 1 is the top-right 2x2 block; its second pixel is (0, 3).
  EXPECT_EQ(p.data[1 * 8 + 2], 3 * 10);
  EXPECT_EQ(p.data[1 * 8 + 3], 3 * 10 + 1);
  // Patch 2 starts at (2, 0).
  EXPECT_EQ(p.data[2 * 8 + 0], 200);
}

TEST(Patchify, IndivisibleSizeFails) {
  EXPECT_THROW(PatchGrid({30, 4, 3}).validate(), ConfigError);
  Image img(30, 30, 3);
  EXPECT_THROW(patchify(img, PatchGrid{30, 4, 3}), ConfigError);
}

TEST(Mask, CountsAndDeterminism) {
  const auto plan = sample_mask(64, 0.75, 5);
  EXPECT_EQ(plan.masked_ids.size(), 48u);
  EXPECT_EQ(plan.visible_ids.size(), 16u);
  std::vector<bool> seen(64, false);
  for (auto i : plan.masked_ids) seen[i] = true;
  for (auto i : plan.visible_ids) {
    EXPECT_FALSE(seen[i]);
    seen[i] = true;
  }
  EXPECT_EQ(std::count(seen.begin(), seen.end(), true), 64);
  const auto again = sample_mask(64, 0.75, 5);
  EXPECT_EQ(plan.masked_ids, again.masked_ids);
  EXPECT_EQ(masked_count(196, 0.75), 147u);
  EXPECT_THROW(sample_mask(64, 1.0, 0), ConfigError);
}

TEST(Mask, UniformPerIndexFrequency) {
  constexpr int kDraws = 10000;
  std::vector<int> counts(64, 0);
  for (int s = 0; s < kDraws; ++s) {
    for (auto i : sample_mask(64, 0.75, static_cast<std::uint64_t>(s)).masked_ids) ++counts[i];
  }
  double chi2 = 0.0;
  const double expected = kDraws * 0.75;
  for (int c : counts) {
    EXPECT_NEAR(c / double(kDraws), 0.75, 0.02);
    chi2 += (c - expected) * (c - expected) / (expected * 0.25);
  }
  // Fixed-size subsets: per-index counts sum to a constant, leaving N-1
  // degrees of freedom.
  const boost::math::chi_squared dist(63);
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.001);
}

TEST(PerPatchNormalize, ConstantTwoValuedAndStatistics) {
  Tensor<double> t(Shape{2, 4}, {0.7, 0.7, 0.7, 0.7, 0, 2, 0, 2});
  const auto n = per_patch_normalize(t);
  for (int j = 0; j < 4; ++j) EXPECT_EQ(n.data[static_cast<std::size_t>(j)], 0.0);
  EXPECT_NEAR(n.data[4], -1.0, 1e-6);
  EXPECT_NEAR(n.data[5], 1.0, 1e-6);

  Rng rng(3);
  const auto r = per_patch_normalize(random_tensor({20, 48}, rng));
  for (std::size_t i = 0; i < 20; ++i) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 48; ++j) m += r.data[i * 48 + j];
    m /= 48;
    for (std::size_t j = 0; j < 48; ++j) v += (r.data[i * 48 + j] - m) * (r.data[i * 48 + j] - m);
    EXPECT_NEAR(m, 0.0, 1e-9);
    // eps = 1e-6 against a variance near 1/3.
    EXPECT_NEAR(v / 48, 1.0, 1e-5);
  }
}

TEST(Encoder, ZeroDepthReturnsEmbedding) {
  ModelConfig cfg = tiny_config();
  cfg.depth = 0;
  const auto params = jittered_params(cfg, 1);
  Rng rng(2);
  const auto patches = random_tensor({4, cfg.grid().patch_dim()}, rng);
  const std::vector<std::size_t> pos{0, 1, 2, 3};
  Graph<double> g;
  BoundParams<double> bp(g, params);
  const auto& out = encoder_forward(bp, cfg, g.constant(patches), pos, 1).value();
  const auto table = sincos_position_table<double>(4, cfg.embed_dim);
  const auto& w = params["patch_embed.weight"];
  const auto& b = params["patch_embed.bias"];
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      double e = 0;
      for (std::size_t k = 0; k < cfg.grid().patch_dim(); ++k) e += patches.data[r * 12 + k] * w.data[k * 8 + c];
      e += b.data[c] + table.data[r * 8 + c];
      EXPECT_NEAR(out.data[r * 8 + c], e, 1e-12);
    }
  }
}

TEST(Encoder, PermutationEquivariantWithoutPositions) {
  const ModelConfig cfg = tiny_config();
  const auto params = jittered_params(cfg, 4);
  Rng rng(5);
  const auto patches = random_tensor({4, cfg.grid().patch_dim()}, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Tensor<double> permuted(patches.shape);
  for (std::size_t r = 0; r < 4; ++r) {
    std::copy_n(patches.data.begin() + static_cast<std::ptrdiff_t>(perm[r] * 12), 12,
                permuted.data.begin() + static_cast<std::ptrdiff_t>(r * 12));
  }
  const std::vector<std::size_t> pos{0, 1, 2, 3};
  ForwardOptions opts;
  opts.positional = false;
  Graph<double> g;
  BoundParams<double> bp(g, params);
  const auto& a = encoder_forward(bp, cfg, g.constant(patches), pos, 1, opts).value();
  const auto& b = encoder_forward(bp, cfg, g.constant(permuted), pos, 1, opts).value();
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(b.data[r * 8 + c], a.data[perm[r] * 8 + c], 1e-12);
  }
}

TEST(Encoder, AttentionRowsSumToOne) {
  const ModelConfig cfg = tiny_config();
  const auto params = jittered_params(cfg, 6);
  Rng rng(7);
  Graph<double> g;
  BoundParams<double> bp(g, params);
  ForwardOptions opts;
  opts.collect_attention = true;
  ForwardTrace<double> trace;
  const std::vector<std::size_t> pos{0, 1, 2, 3, 0, 1, 2, 3};
  encoder_forward(bp, cfg, g.constant(random_tensor({8, 12}, rng)), pos, 2, opts, &trace);
  ASSERT_EQ(trace.attention.size(), 1u);
  const auto& a = trace.attention[0].value();
  EXPECT_EQ(a.shape, (Shape{4, 4, 4}));
  for (std::size_t r = 0; r < 16; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 4; ++j) s += a.data[r * 4 + j];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Encoder, ShapeMismatchFails) {
  const ModelConfig cfg = tiny_config();
  const auto params = init_params<double>(cfg, 1);
  Graph<double> g;
  BoundParams<double> bp(g, params);
  const std::vector<std::size_t> pos{0, 1, 2};
  EXPECT_THROW(encoder_forward(bp, cfg, g.constant(Tensor<double>(Shape{4, 12})), pos, 1), ad::ShapeError);
}

TEST(Decoder, ShapeAndZeroDepthProjection) {
  ModelConfig cfg = tiny_config();
  cfg.decoder_depth = 0;
  const auto params = jittered_params(cfg, 8);
  Rng rng(9);
  const std::vector<MaskPlan> plans{sample_mask(16, 0.5, 1), sample_mask(16, 0.5, 2)};
  Graph<double> g;
  BoundParams<double> bp(g, params);
  const auto enc = g.constant(random_tensor({16, 8}, rng));
  const auto& out = decoder_forward(bp, cfg, enc, plans).value();
  EXPECT_EQ(out.shape, (Shape{32, 12}));
  // Two masked slots of the same image see the same mask token and differ
  // only through positions; recompute one by hand.
  const std::size_t slot = plans[0].masked_ids[0];
  Graph<double> h;
  BoundParams<double> hp(h, params);
  auto tok = h.constant(Tensor<double>(Shape{1, 8}, params["mask_token"].data));
  const auto table = sincos_position_table<double>(4, cfg.decoder_dim);
  tok = tok + h.constant(Tensor<double>(Shape{8}, std::vector<double>(table.data.begin() + static_cast<std::ptrdiff_t>(slot * 8), table.data.begin() + static_cast<std::ptrdiff_t>(slot * 8 + 8))));
  tok = layer_norm(tok, -1, 1e-6) * hp("decoder_norm.weight") + hp("decoder_norm.bias");
  tok = matmul(tok, hp("decoder_pred.weight")) + hp("decoder_pred.bias");
  for (std::size_t c = 0; c < 12; ++c) EXPECT_NEAR(out.data[slot * 12 + c], tok.value()[c], 1e-12);
}

TEST(Decoder, SensitivityStaysWithinImage) {
  const ModelConfig cfg = tiny_config();
  const auto params = jittered_params(cfg, 10);
  Rng rng(11);
  const std::vector<MaskPlan> plans{sample_mask(16, 0.5, 3), sample_mask(16, 0.5, 4)};
  auto enc = random_tensor({16, 8}, rng);
  auto run = [&](const Tensor<double>& e) {
    Graph<double> g;
    BoundParams<double> bp(g, params);
    return decoder_forward(bp, cfg, g.constant(e), plans).value();
  };
  const auto base = run(enc);
  enc.data[3] += 0.5;  // row 0 belongs to image 0
  const auto moved = run(enc);
  bool image0_changed = false;
  for (std::size_t i = 0; i < 16 * 12; ++i) image0_changed |= base.data[i] != moved.data[i];
  EXPECT_TRUE(image0_changed);
  for (std::size_t i = 16 * 12; i < 32 * 12; ++i) EXPECT_EQ(base.data[i], moved.data[i]);

  Graph<double> g;
  BoundParams<double> bp(g, params);
  EXPECT_THROW(decoder_forward(bp, cfg, g.constant(Tensor<double>(Shape{3, 8})), plans), ad::ShapeError);
}

TEST(MaeLoss, Contract) {
  Rng rng(12);
  const std::vector<MaskPlan> plans{sample_mask(16, 0.75, 1), sample_mask(16, 0.75, 2)};
  const auto target = random_tensor({32, 12}, rng);
  {
    Graph<double> g;
    EXPECT_EQ(mae_loss(g.constant(target), target, plans, false).value()[0], 0.0);
  }
  {
    Graph<double> g;
    const double v = mae_loss(g.constant(Tensor<double>(Shape{32, 12})), target, plans, true).value()[0];
    // Normalized targets have unit variance up to eps.
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
  auto pred = random_tensor({32, 12}, rng);
  Graph<double> g;
  const double before = mae_loss(g.constant(pred), target, plans, true).value()[0];
  for (std::size_t b = 0; b < 2; ++b) {
    for (auto i : plans[b].visible_ids) {
      for (std::size_t j = 0; j < 12; ++j) pred.data[(b * 16 + i) * 12 + j] += uniform(rng, -5, 5);
    }
  }
  const double after = mae_loss(g.constant(pred), target, plans, true).value()[0];
  EXPECT_EQ(before, after);

  MaskPlan empty;
  empty.visible_ids = {0, 1, 2, 3};
  const std::vector<MaskPlan> none{empty};
  EXPECT_THROW(mae_loss(g.constant(Tensor<double>(Shape{4, 12})), Tensor<double>(Shape{4, 12}), none, false),
               DataError);
}

TEST(GazeHead, ZeroHeadAndFiniteOutputs) {
  const ModelConfig cfg = tiny_config();
  auto params = jittered_params(cfg, 13);
  Rng rng(14);
  const Image img = random_image(8, 3, rng);
  const std::vector<const Image*> batch{&img};
  params["head.weight"] = Tensor<double>(Shape{8, 2}, 0.0);
  params["head.bias"] = Tensor<double>(Shape{2}, 0.0);
  const auto zero = predict_gaze(params, cfg, batch);
  EXPECT_EQ(zero[0].pitch, 0.0);
  EXPECT_EQ(zero[0].yaw, 0.0);
  const auto out = predict_gaze(jittered_params(cfg, 15), cfg, batch);
  EXPECT_TRUE(std::isfinite(out[0].pitch) && std::isfinite(out[0].yaw));
}

TEST(GazeLoss, ValuesAndSignGradient) {
  Graph<double> g;
  const Tensor<double> label(Shape{1, 2}, {0.0, 0.0});
  EXPECT_EQ(gaze_loss(g.constant(label), label).value()[0], 0.0);
  EXPECT_NEAR(gaze_loss(g.constant(Tensor<double>(Shape{1, 2}, {0.1, 0.0})), label).value()[0], 0.1, 1e-15);

  auto p = g.param(Tensor<double>(Shape{2, 2}, {0.3, -0.2, -0.5, 0.4}));
  g.backward(gaze_loss(p, Tensor<double>(Shape{2, 2}, {0.0, 0.1, 0.2, 0.0})));
  EXPECT_EQ(g.grad(p).data, (ad::Buffer<double>{0.5, -0.5, -0.5, 0.5}));

  const Tensor<double> lbl(Shape{2, 2}, {0.0, 0.1, 0.2, 0.0});
  const double err = ad::finite_difference_check(
      [&](Graph<double>&, std::span<const Var<double>> v) { return gaze_loss(v[0], lbl); },
      {Tensor<double>(Shape{2, 2}, {0.3, -0.2, -0.5, 0.4})});
  EXPECT_LT(err, 1e-9);
}

namespace {

// Registers params on g, substituting `replaced` for tensor `index` (or all
// tensors from `all` when index is npos).
BoundParams<double> bind(Graph<double>& g, const ModelParams<double>& params,
                         std::span<const Var<double>> v, std::size_t index) {
  std::vector<Var<double>> vars;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (index == std::string::npos) {
      vars.push_back(v[i]);
    } else {
      vars.push_back(i == index ? v[0] : g.constant(params.tensors()[i]));
    }
  }
  return BoundParams<double>(g, params, std::move(vars));
}

}  // namespace

TEST(GradientFidelity, VitBlockSampledCoordinates) {
  ModelConfig cfg = tiny_config();
  const auto params = jittered_params(cfg, 16);
  Rng rng(17);
  const auto x = random_tensor({8, 8}, rng);
  const auto probe_w = random_tensor({8, 8}, rng);
  std::vector<Tensor<double>> all{x};
  for (const auto& t : params.tensors()) all.push_back(t);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const double err = ad::finite_difference_check(
        [&](Graph<double>& g, std::span<const Var<double>> v) {
          auto bp = bind(g, params, v.subspan(1), std::string::npos);
          auto y = detail::transformer_block(bp, "blocks.0", v[0], 2, 4, 2, 1e-6,
                                             static_cast<ForwardTrace<double>*>(nullptr));
          return sum(y * g.constant(probe_w));
        },
        all, {1e-4, 8, seed});
    EXPECT_LT(err, 1e-5);
  }
}

// End-to-end MAE and gaze losses against central differences with
// coordinates sampled from every parameter tensor.
TEST(GradientFidelity, EveryParameterTensor) {
  const ModelConfig cfg = tiny_config();
  const auto params = jittered_params(cfg, 18);
  Rng rng(19);
  const Image a = random_image(8, 3, rng), b = random_image(8, 3, rng);
  const std::vector<const Image*> imgs{&a, &b};
  const auto inputs = stack_patches<double>(imgs, cfg.grid(), true);
  const auto targets = stack_patches<double>(imgs, cfg.grid(), false);
  const std::vector<MaskPlan> plans{sample_mask(16, 0.5, 1), sample_mask(16, 0.5, 2)};
  const Tensor<double> labels(Shape{2, 2}, {0.1, -0.3, -0.2, 0.25});

  for (std::size_t t = 0; t < params.size(); ++t) {
    const std::string& name = params.names()[t];
    if (!is_head_param(name)) {
      const double err = ad::finite_difference_check(
          [&](Graph<double>& g, std::span<const Var<double>> v) {
            auto bp = bind(g, params, v, t);
            std::vector<std::size_t> rows, pos;
            for (std::size_t i = 0; i < 2; ++i) {
              for (auto id : plans[i].visible_ids) {
                rows.push_back(i * 16 + id);
                pos.push_back(id);
              }
            }
            auto vis = g.gather_rows(g.constant(inputs), rows);
            auto enc = encoder_forward(bp, cfg, vis, pos, 2);
            auto pred = decoder_forward(bp, cfg, enc, plans);
            return mae_loss(pred, targets, plans, true);
          },
          {params.tensors()[t]}, {1e-4, 8, t});
      EXPECT_LT(err, 1e-5) << "mae w.r.t. " << name;
    }
    if (!is_decoder_param(name)) {
      const double err = ad::finite_difference_check(
          [&](Graph<double>& g, std::span<const Var<double>> v) {
            auto bp = bind(g, params, v, t);
            // L1 has kinks; square the residual to keep the check smooth and
            // test the head path separately above.
            auto pred = gaze_forward(bp, cfg, g.constant(inputs), 2);
            return sum(square(pred - g.constant(labels)));
          },
          {params.tensors()[t]}, {1e-4, 8, t + 1000});
      EXPECT_LT(err, 1e-5) << "gaze w.r.t. " << name;
    }
  }
}

TEST(GradientFidelity, GazeLossAwayFromKinks) {
  const ModelConfig cfg = tiny_config();
  const auto params = jittered_params(cfg, 20);
  Rng rng(21);
  const Image a = random_image(8, 3, rng);
  const std::vector<const Image*> imgs{&a};
  const auto inputs = stack_patches<double>(imgs, cfg.grid(), true);
  const auto pred = predict_gaze(params, cfg, imgs)[0];
  // Labels well away from the prediction keep the L1 loss differentiable.
  const Tensor<double> labels(Shape{1, 2}, {pred.pitch + 0.5, pred.yaw - 0.5});
  const std::size_t t = params.index("head.weight");
  const double err = ad::finite_difference_check(
      [&](Graph<double>& g, std::span<const Var<double>> v) {
        auto bp = bind(g, params, v, t);
        return gaze_loss(gaze_forward(bp, cfg, g.constant(inputs), 1), labels);
      },
      {params.tensors()[t]});
  EXPECT_LT(err, 1e-6);
}

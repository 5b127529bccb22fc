#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <numeric>

#include "touchmatch/world.hpp"

using namespace touchmatch;

namespace {

ObjectSpec spec_with(std::initializer_list<std::pair<Latent, double>> values, double fill = 0.5) {
  ObjectSpec s;
  s.latent.fill(fill);
  for (auto [l, v] : values) s[l] = v;
  return s;
}

double stdev(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

/// Horizontal minus vertical mean absolute pixel difference: the vertical
/// stripe texture raises only the first term, noise raises both equally.
double stripe_energy(const Tensor& img) {
  const std::size_t c = img.dim(0), r = img.dim(1);
  double dx = 0.0, dy = 0.0;
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i + 1 < r; ++i)
      for (std::size_t j = 0; j + 1 < r; ++j) {
        dx += std::abs(img.at({k, i, j + 1}) - img.at({k, i, j}));
        dy += std::abs(img.at({k, i + 1, j}) - img.at({k, i, j}));
      }
  return (dx - dy) / static_cast<double>(c * (r - 1) * (r - 1));
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

bool in_unit_range(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return v >= 0.0 && v <= 1.0; });
}

}  // namespace

TEST(SampleObject, Reproducible) {
  Rng a(5), b(5), c(6);
  const auto sa = sample_object(a), sb = sample_object(b), sc = sample_object(c);
  EXPECT_EQ(sa.latent, sb.latent);
  EXPECT_NE(sa.latent, sc.latent);
}

TEST(SampleObject, ComponentMeans) {
  Rng rng(17);
  std::array<double, kLatentDims> sums{};
  for (int i = 0; i < 1000; ++i) {
    const auto s = sample_object(rng, i);
    for (std::size_t k = 0; k < kLatentDims; ++k) {
      ASSERT_GE(s.latent[k], 0.0);
      ASSERT_LE(s.latent[k], 1.0);
      sums[k] += s.latent[k];
    }
  }
  for (std::size_t k = 0; k < kLatentDims; ++k) {
    EXPECT_GE(sums[k] / 1000.0, 0.45) << kLatentNames[k];
    EXPECT_LE(sums[k] / 1000.0, 0.55) << kLatentNames[k];
  }
}

TEST(RenderVisual, FlatTextureInterior) {
  const auto spec = spec_with({{Latent::size, 1.0}, {Latent::aspect, 1.0}, {Latent::texture_amp, 0.0}});
  Rng rng(3);
  const auto obs = render_visual(spec, rng);
  ASSERT_EQ(obs.image.shape(), (Shape{3, 32, 32}));
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> interior;
    for (std::size_t i = 12; i < 20; ++i)
      for (std::size_t j = 12; j < 20; ++j) interior.push_back(obs.image.at({c, i, j}));
    EXPECT_LT(stdev(interior), 0.03) << "channel " << c;
  }
}

TEST(RenderVisual, EmptyObjectIsBackground) {
  const auto spec = spec_with({{Latent::size, 0.0}});
  Rng rng(4);
  const auto obs = render_visual(spec, rng);
  const std::vector<double> px(obs.image.data().begin(), obs.image.data().end());
  EXPECT_LT(stdev(px), 0.03);
  EXPECT_NEAR(obs.image.mean(), 0.3, 0.035);
}

TEST(RenderVisual, TwoRendersCloseButDistinct) {
  const auto spec = spec_with({});
  Rng rng(9);
  const auto a = render_visual(spec, rng), b = render_visual(spec, rng);
  const double d = mean_abs_diff(a.image, b.image);
  EXPECT_GT(d, 0.0);
  EXPECT_LT(d, 0.1);
  EXPECT_TRUE(in_unit_range(a.image));
}

TEST(RenderVisual, RerenderDifferenceAcrossObjects) {
  // Pixel noise alone contributes E|N(0, 2 * 0.02^2)| = 0.04 / sqrt(pi); the
  // rest comes from translation and brightness jitter.
  Rng rng(10);
  double total = 0.0;
  const int n = 200;
  for (int o = 0; o < n; ++o) {
    const auto spec = sample_object(rng, o);
    const auto a = render_visual(spec, rng), b = render_visual(spec, rng);
    const double d = mean_abs_diff(a.image, b.image);
    EXPECT_GT(d, 0.0);
    total += d;
  }
  EXPECT_GT(total / n, 0.04 / std::sqrt(std::numbers::pi) * 0.9);
  EXPECT_LT(total / n, 0.1);
}

TEST(GraspSuccess, Rule) {
  for (double size : {1e-6, 0.01, 0.5, 1.0}) {
    EXPECT_TRUE(grasp_success(spec_with({{Latent::size, size}}), {0.0, 0.0, 0.5}));
  }
  EXPECT_FALSE(grasp_success(spec_with({{Latent::size, 1.0}}), {0.0, 0.0, 0.1}));
  EXPECT_FALSE(grasp_success(spec_with({{Latent::size, 0.1}}), {1.0, 1.0, 0.9}));
}

TEST(RenderTactile, FlatContactAwayFromBoundary) {
  const auto spec = spec_with({{Latent::size, 1.0}, {Latent::aspect, 1.0}, {Latent::texture_amp, 0.0}});
  Rng rng(21);
  const auto obs = render_tactile(spec, {0.0, 0.0, 0.7}, rng);
  for (const Tensor* t : {&obs.finger_a, &obs.finger_b}) {
    const std::vector<double> px(t->data().begin(), t->data().end());
    EXPECT_LT(stdev(px), 0.03);
    EXPECT_TRUE(in_unit_range(*t));
  }
}

TEST(RenderTactile, HarderPressBrighter) {
  const auto spec = spec_with({{Latent::size, 1.0}});
  Rng a(30), b(30);
  const auto weak = render_tactile(spec, {0.1, 0.0, 0.2}, a);
  const auto strong = render_tactile(spec, {0.1, 0.0, 1.0}, b);
  EXPECT_GT(strong.finger_a.mean(), weak.finger_a.mean());
  EXPECT_GT(tactile_height_field(spec, {0.1, 0.0, 1.0}).mean(), tactile_height_field(spec, {0.1, 0.0, 0.2}).mean());
}

TEST(RenderTactile, OpposingFingerIsMirrored) {
  Rng srng(40);
  const auto spec = spec_with({{Latent::size, 0.8}, {Latent::texture_amp, 0.9}});
  const GraspParams g{0.35, -0.1, 0.6};
  WorldConfig clean_cfg;
  clean_cfg.pixel_noise = 0.0;
  Rng r0(1), r1(2);
  const auto clean = render_tactile(spec, g, r0, clean_cfg);
  const auto noisy = render_tactile(spec, g, r1);
  EXPECT_LT(mean_abs_diff(noisy.finger_b, mirror_horizontal(clean.finger_a)), 0.05);
  EXPECT_GT(mean_abs_diff(noisy.finger_b, noisy.finger_a), 0.0);
}

TEST(RenderTactile, RejectsFailedGrasp) {
  Rng rng(1);
  EXPECT_THROW(render_tactile(spec_with({{Latent::size, 0.5}}), {0.0, 0.0, 0.05}, rng), InvalidGraspError);
}

TEST(CollectEpisode, SucceedsForGraspableObjects) {
  Rng rng(50);
  for (int i = 0; i < 200; ++i) {
    auto spec = sample_object(rng, i);
    spec[Latent::size] = 0.2 + 0.8 * spec[Latent::size];
    const auto ep = collect_episode(spec, rng, i);
    EXPECT_TRUE(ep.success);
    EXPECT_TRUE(grasp_success(spec, ep.grasp));
  }
}

TEST(CollectEpisode, WorstCaseAcceptanceProbability) {
  // Smallest graspable footprint: size 0.2, aspect 0, curvature 0. Estimate
  // its area by a fine grid over the table and bound the failure chance of
  // 100 uniform attempts with force >= 0.2.
  const auto spec = spec_with({{Latent::size, 0.2}, {Latent::aspect, 0.0}, {Latent::curvature, 0.0}});
  const int n = 801;
  int inside = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double x = -1.0 + 2.0 * i / (n - 1), y = -1.0 + 2.0 * j / (n - 1);
      inside += grasp_success(spec, {x, y, 1.0});
    }
  const double p = static_cast<double>(inside) / (n * n) * 0.8;
  EXPECT_LT(std::pow(1.0 - p, 100.0), 1e-2);
}

TEST(CollectEpisode, DegenerateObjectError) {
  Rng rng(1);
  EXPECT_THROW(collect_episode(spec_with({{Latent::size, 0.0}}), rng), DegenerateObjectError);
}

TEST(CollectEpisode, Deterministic) {
  Rng srng(60);
  const auto spec = sample_object(srng);
  Rng a(61), b(61);
  const auto ea = collect_episode(spec, a, 3), eb = collect_episode(spec, b, 3);
  EXPECT_EQ(ea.visual.image, eb.visual.image);
  EXPECT_EQ(ea.tactile.finger_a, eb.tactile.finger_a);
  EXPECT_EQ(ea.tactile.finger_b, eb.tactile.finger_b);
  EXPECT_EQ(ea.grasp.force, eb.grasp.force);
}

TEST(World, TextureEnergyIsSharedAcrossModalities) {
  Rng rng(70);
  std::vector<double> visual, tactile;
  for (int o = 0; o < 60; ++o) {
    auto spec = sample_object(rng, o);
    spec[Latent::size] = 0.3 + 0.7 * spec[Latent::size];
    double ve = 0.0, te = 0.0;
    for (int e = 0; e < 5; ++e) {
      const auto ep = collect_episode(spec, rng, e);
      ve += stripe_energy(ep.visual.image);
      te += stripe_energy(ep.tactile.finger_a);
    }
    visual.push_back(ve);
    tactile.push_back(te);
  }
  EXPECT_GT(pearson(visual, tactile), 0.5);
}

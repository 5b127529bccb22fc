#pragma once

// Procedural objects with shared latent structure, and the two renderers
// (frontal camera image, pair of gel-sensor finger images) that observe them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>

#include "touchmatch/error.hpp"
#include "touchmatch/rng.hpp"
#include "touchmatch/tensor.hpp"

namespace touchmatch {

enum class Latent : std::size_t { size, aspect, curvature, hue, texture_freq, texture_amp, hardness, gloss };
inline constexpr std::size_t kLatentDims = 8;
inline constexpr std::array<const char*, kLatentDims> kLatentNames = {
    "size", "aspect", "curvature", "hue", "texture_freq", "texture_amp", "hardness", "gloss"};

struct ObjectSpec {
  std::int64_t object_id = 0;
  std::array<double, kLatentDims> latent{};

  double operator[](Latent l) const { return latent[static_cast<std::size_t>(l)]; }
  double& operator[](Latent l) { return latent[static_cast<std::size_t>(l)]; }
};

struct GraspParams {
  double contact_x = 0.0;  // table units relative to the object center, [-1, 1]
  double contact_y = 0.0;
  double force = 0.0;  // [0, 1]
};

struct VisualObs {
  Tensor image;  // [3, R, R] in [0, 1]
};

struct TactileObs {
  Tensor finger_a;  // [3, R, R] in [0, 1]
  Tensor finger_b;
};

struct Episode {
  std::int64_t episode_id = 0;
  std::int64_t object_id = 0;
  VisualObs visual;
  TactileObs tactile;
  GraspParams grasp;
  bool success = false;
};

/// Renderer and grasp-filter settings. All of these are run configuration.
struct WorldConfig {
  std::size_t resolution = 32;
  double pixel_noise = 0.02;
  double jitter_px = 2.0;
  double brightness_jitter = 0.1;  // scale drawn from [1 - j, 1 + j]
  double min_force = 0.2;
  std::size_t max_grasp_attempts = 100;
  double pad_half_width = 0.3;  // table units seen by one gel pad
};

namespace world_detail {

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

struct Footprint {
  double a, b, n;

  /// Superellipse level function: < 1 inside, 1 on the boundary.
  double level(double x, double y) const {
    if (a <= 0.0 || b <= 0.0) return std::numeric_limits<double>::infinity();
    return std::pow(std::abs(x / a), n) + std::pow(std::abs(y / b), n);
  }

  /// Approximate signed distance to the boundary (negative inside).
  double signed_distance(double x, double y) const {
    const double l = level(x, y);
    if (!std::isfinite(l)) return std::numeric_limits<double>::infinity();
    return (std::pow(l, 1.0 / n) - 1.0) * std::sqrt(a * b);
  }
};

inline Footprint footprint(const ObjectSpec& s) {
  const double a = 0.9 * std::sqrt(s[Latent::size]);
  return {a, a * (0.6 + 0.4 * s[Latent::aspect]), 1.5 + 4.5 * s[Latent::curvature]};
}

/// Texture cycles across one observation width.
inline double texture_cycles(const ObjectSpec& s) { return 2.0 + 5.0 * s[Latent::texture_freq]; }

inline std::array<double, 3> hue_to_rgb(double hue) {
  const double sat = 0.5, val = 0.9;
  const double h6 = std::fmod(hue, 1.0) * 6.0;
  const double c = val * sat;
  const double x = c * (1.0 - std::abs(std::fmod(h6, 2.0) - 1.0));
  const double m = val - c;
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h6) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (double& v : rgb) v += m;
  return rgb;
}

inline constexpr double kBackground = 0.3;
inline constexpr double kVisualTextureDepth = 0.8;
inline constexpr double kRidgeGain = 0.8;
inline constexpr double kTactileTextureGain = 1.0;
inline constexpr double kRelief = 6.0;
inline constexpr double kPressGain = 0.1;

}  // namespace world_detail

/// Latent components drawn independently and uniformly on [0, 1].
inline ObjectSpec sample_object(Rng& rng, std::int64_t object_id = 0) {
  ObjectSpec spec;
  spec.object_id = object_id;
  for (double& v : spec.latent) v = rng.uniform();
  return spec;
}

/// Point-in-footprint and minimum-force rule that stands in for a learned
/// grasp-outcome classifier.
inline bool grasp_success(const ObjectSpec& spec, const GraspParams& grasp, const WorldConfig& cfg = {}) {
  if (grasp.force < cfg.min_force) return false;
  return world_detail::footprint(spec).level(grasp.contact_x, grasp.contact_y) <= 1.0;
}

/// Frontal camera view: superellipse silhouette, hue-derived color, gloss sheen
/// and a vertical sinusoidal texture, with translation/brightness/pixel noise.
inline VisualObs render_visual(const ObjectSpec& spec, Rng& rng, const WorldConfig& cfg = {}) {
  using namespace world_detail;
  const std::size_t r = cfg.resolution;
  const double px = 2.0 / static_cast<double>(r);
  const double dx = rng.uniform(-cfg.jitter_px, cfg.jitter_px) * px;
  const double dy = rng.uniform(-cfg.jitter_px, cfg.jitter_px) * px;
  const double bright = rng.uniform(1.0 - cfg.brightness_jitter, 1.0 + cfg.brightness_jitter);

  const Footprint fp = footprint(spec);
  const auto rgb = hue_to_rgb(spec[Latent::hue]);
  const double gloss = spec[Latent::gloss];
  const double amp = spec[Latent::texture_amp];
  const double cycles = texture_cycles(spec);

  VisualObs obs{Tensor({3, r, r})};
  for (std::size_t i = 0; i < r; ++i) {
    const double v = (static_cast<double>(i) + 0.5) * px - 1.0 - dy;
    for (std::size_t j = 0; j < r; ++j) {
      const double u = (static_cast<double>(j) + 0.5) * px - 1.0 - dx;
      const bool inside = fp.level(u, v) <= 1.0;
      const double tex = 0.5 * (1.0 + std::sin(std::numbers::pi * cycles * u));
      for (std::size_t c = 0; c < 3; ++c) {
        double value = kBackground;
        if (inside) {
          value = rgb[c] * (1.0 - kVisualTextureDepth * amp * tex);
          value = value * (1.0 - 0.15 * gloss) + 0.15 * gloss;
        }
        obs.image[(c * r + i) * r + j] = clamp01(bright * value + cfg.pixel_noise * rng.normal());
      }
    }
  }
  return obs;
}

/// Noise-free gel height field [R, R] for a grasp: uniform indentation over the
/// contact region, a ridge where the silhouette boundary crosses the pad, and
/// the material texture scaled by force.
inline Tensor tactile_height_field(const ObjectSpec& spec, const GraspParams& grasp, const WorldConfig& cfg = {}) {
  using namespace world_detail;
  const std::size_t r = cfg.resolution;
  const double px = 2.0 / static_cast<double>(r);
  const Footprint fp = footprint(spec);
  const double depth = grasp.force * (1.0 - 0.5 * spec[Latent::hardness]);
  const double ridge_width = cfg.pad_half_width * (0.04 + 0.16 * (1.0 - spec[Latent::curvature]));
  const double edge_softness = 0.25 * px * cfg.pad_half_width;
  const double amp = kTactileTextureGain * spec[Latent::texture_amp] * grasp.force;
  const double cycles = texture_cycles(spec);

  Tensor h({r, r});
  for (std::size_t i = 0; i < r; ++i) {
    const double gy = (static_cast<double>(i) + 0.5) * px - 1.0;
    for (std::size_t j = 0; j < r; ++j) {
      const double gx = (static_cast<double>(j) + 0.5) * px - 1.0;
      const double x = grasp.contact_x + cfg.pad_half_width * gx;
      const double y = grasp.contact_y + cfg.pad_half_width * gy;
      const double d = fp.signed_distance(x, y);
      const double contact = 1.0 / (1.0 + std::exp(std::clamp(d / edge_softness, -50.0, 50.0)));
      const double ridge = kRidgeGain * depth * std::exp(-d * d / (2.0 * ridge_width * ridge_width));
      const double tex =
          amp * 0.5 * (1.0 + std::sin(std::numbers::pi * cycles * (x / cfg.pad_half_width)));
      h[i * r + j] = contact * (depth + tex) + (std::isfinite(d) ? ridge : 0.0);
    }
  }
  return h;
}

/// Photometric encoding of a height field with three directional lights.
inline Tensor shade_height_field(const Tensor& h) {
  using namespace world_detail;
  const std::size_t r = h.dim(0);
  constexpr double elev = std::numbers::pi / 4.0;
  constexpr std::array<double, 3> azimuth = {std::numbers::pi / 2.0, 7.0 * std::numbers::pi / 6.0,
                                             11.0 * std::numbers::pi / 6.0};
  Tensor img({3, r, r});
  auto at = [&](std::ptrdiff_t i, std::ptrdiff_t j) {
    i = std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(r) - 1);
    j = std::clamp<std::ptrdiff_t>(j, 0, static_cast<std::ptrdiff_t>(r) - 1);
    return h[static_cast<std::size_t>(i) * r + static_cast<std::size_t>(j)];
  };
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < r; ++j) {
      const auto ii = static_cast<std::ptrdiff_t>(i), jj = static_cast<std::ptrdiff_t>(j);
      const double hx = kRelief * 0.5 * (at(ii, jj + 1) - at(ii, jj - 1));
      const double hy = kRelief * 0.5 * (at(ii + 1, jj) - at(ii - 1, jj));
      const double norm = std::sqrt(1.0 + hx * hx + hy * hy);
      for (std::size_t c = 0; c < 3; ++c) {
        const double lx = std::cos(azimuth[c]) * std::cos(elev);
        const double ly = std::sin(azimuth[c]) * std::cos(elev);
        const double lz = std::sin(elev);
        const double lambert = std::max(0.0, (-hx * lx - hy * ly + lz) / norm);
        img[(c * r + i) * r + j] = 0.15 + 0.5 * lambert + kPressGain * h[i * r + j];
      }
    }
  }
  return img;
}

/// Horizontal mirror of a [C, R, R] image.
inline Tensor mirror_horizontal(const Tensor& img) {
  const std::size_t c = img.dim(0), rows = img.dim(1), cols = img.dim(2);
  Tensor out(img.shape());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out[(k * rows + i) * cols + j] = img[(k * rows + i) * cols + (cols - 1 - j)];
  return out;
}

/// Both finger images of one grasp. The opposing finger sees the same contact
/// through a mirrored camera frame; each finger gets independent pixel noise.
inline TactileObs render_tactile(const ObjectSpec& spec, const GraspParams& grasp, Rng& rng,
                                 const WorldConfig& cfg = {}) {
  if (!grasp_success(spec, grasp, cfg)) {
    throw InvalidGraspError("render_tactile: grasp at (" + std::to_string(grasp.contact_x) + ", " +
                            std::to_string(grasp.contact_y) + ") force " + std::to_string(grasp.force) +
                            " is not a successful grasp on object " + std::to_string(spec.object_id));
  }
  const Tensor clean = shade_height_field(tactile_height_field(spec, grasp, cfg));
  TactileObs obs{clean, mirror_horizontal(clean)};
  for (double& v : obs.finger_a.data()) v = world_detail::clamp01(v + cfg.pixel_noise * rng.normal());
  for (double& v : obs.finger_b.data()) v = world_detail::clamp01(v + cfg.pixel_noise * rng.normal());
  return obs;
}

/// One interaction: image first, then grasp attempts until the success rule
/// holds, then the tactile reading.
inline Episode collect_episode(const ObjectSpec& spec, Rng& rng, std::int64_t episode_id = 0,
                               const WorldConfig& cfg = {}) {
  Episode ep;
  ep.episode_id = episode_id;
  ep.object_id = spec.object_id;
  ep.visual = render_visual(spec, rng, cfg);
  for (std::size_t attempt = 0; attempt < cfg.max_grasp_attempts; ++attempt) {
    GraspParams g{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform()};
    if (grasp_success(spec, g, cfg)) {
      ep.grasp = g;
      ep.tactile = render_tactile(spec, g, rng, cfg);
      ep.success = true;
      return ep;
    }
  }
  throw DegenerateObjectError("object " + std::to_string(spec.object_id) + " yielded no successful grasp in " +
                              std::to_string(cfg.max_grasp_attempts) + " attempts (size " +
                              std::to_string(spec[Latent::size]) + ")");
}

}  // namespace touchmatch

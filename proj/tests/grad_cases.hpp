#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "touchmatch/grad_check.hpp"
#include "touchmatch/matchnet.hpp"

namespace touchmatch::testing {

struct GradCase {
  std::string name;
  ScalarFn fn;
  Tensor point;
  double tolerance;
};

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

/// Keeps entries away from the ReLU kink so central differences never straddle it.
inline Tensor away_from_zero(Tensor t, double margin = 1e-2) {
  for (double& v : t.data())
    if (std::abs(v) < margin) v = v < 0.0 ? v - margin : v + margin;
  return t;
}

/// sum(y * w) for a fixed random weight w: reduces any op output to a scalar
/// while keeping every output coordinate in play.
inline ad::Var weighted_sum(ad::Var y, const Tensor& w) {
  return ad::sum(ad::mul(y, y.tape->constant(w)));
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

inline EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.channels = {2, 3};
  c.kernel = 3;
  c.stride = 2;
  c.feature_dim = 4;
  c.hidden_dim = 5;
  c.dropout = 0.5;
  c.resolution = 8;
  return c;
}

/// Every differentiable op at randomized shapes drawn from `seed`. Linear
/// ops carry the tighter tolerance.
inline std::vector<GradCase> op_cases(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCase> cases;
  constexpr double kNonlinear = 1e-4, kLinear = 1e-6;

  {
    const std::size_t n = pick(rng, 1, 2), c = pick(rng, 1, 3), f = pick(rng, 1, 4), k = pick(rng, 1, 3);
    const std::size_t stride = pick(rng, 1, 2), pad = rng.below(k), hw = pick(rng, k + 1, 7);
    const Tensor kernel = random_tensor({f, c, k, k}, rng);
    const Tensor input = random_tensor({n, c, hw, hw}, rng);
    ad::Tape probe;
    const Tensor& y = ad::conv2d(probe.constant(input), probe.constant(kernel), stride, pad).value();
    const Tensor w = random_tensor(y.shape(), rng);
    cases.push_back({"conv2d/input", [=](ad::Tape& t, ad::Var x) {
                       return weighted_sum(ad::conv2d(x, t.constant(kernel), stride, pad), w);
                     },
                     input, kLinear});
    cases.push_back({"conv2d/kernel", [=](ad::Tape& t, ad::Var kv) {
                       return weighted_sum(ad::conv2d(t.constant(input), kv, stride, pad), w);
                     },
                     kernel, kLinear});
  }
  {
    const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 4), hw = pick(rng, 1, 4);
    const Tensor x = random_tensor({n, c, hw, hw}, rng), b = random_tensor({c}, rng);
    const Tensor w = random_tensor({n, c, hw, hw}, rng);
    cases.push_back({"add_channel_bias/input",
                     [=](ad::Tape& t, ad::Var v) { return weighted_sum(ad::add_channel_bias(v, t.constant(b)), w); }, x,
                     kLinear});
    cases.push_back({"add_channel_bias/bias",
                     [=](ad::Tape& t, ad::Var v) { return weighted_sum(ad::add_channel_bias(t.constant(x), v), w); }, b,
                     kLinear});
  }
  {
    const std::size_t n = pick(rng, 1, 4), d = pick(rng, 1, 6), m = pick(rng, 1, 5);
    const Tensor x = random_tensor({n, d}, rng), wt = random_tensor({d, m}, rng), b = random_tensor({m}, rng);
    const Tensor w = random_tensor({n, m}, rng);
    cases.push_back({"affine/input",
                     [=](ad::Tape& t, ad::Var v) { return weighted_sum(ad::affine(v, t.constant(wt), t.constant(b)), w); },
                     x, kLinear});
    cases.push_back({"affine/weight",
                     [=](ad::Tape& t, ad::Var v) { return weighted_sum(ad::affine(t.constant(x), v, t.constant(b)), w); },
                     wt, kLinear});
    cases.push_back({"affine/bias",
                     [=](ad::Tape& t, ad::Var v) { return weighted_sum(ad::affine(t.constant(x), t.constant(wt), v), w); },
                     b, kLinear});
  }
  {
    const Shape s{pick(rng, 1, 3), pick(rng, 1, 6)};
    const Tensor x = away_from_zero(random_tensor(s, rng)), w = random_tensor(s, rng);
    cases.push_back({"relu", [=](ad::Tape&, ad::Var v) { return weighted_sum(ad::relu(v), w); }, x, kNonlinear});
  }
  {
    const Shape s{pick(rng, 1, 3), pick(rng, 1, 6)};
    const Tensor x = random_tensor(s, rng, 2.0), w = random_tensor(s, rng);
    cases.push_back({"sigmoid", [=](ad::Tape&, ad::Var v) { return weighted_sum(ad::sigmoid(v), w); }, x, kNonlinear});
  }
  {
    const std::size_t rows = pick(rng, 1, 3), a = pick(rng, 1, 4), b = pick(rng, 1, 4), axis = rng.below(2);
    const Shape sa = axis == 1 ? Shape{rows, a} : Shape{a, rows};
    const Shape sb = axis == 1 ? Shape{rows, b} : Shape{b, rows};
    const Tensor x = random_tensor(sa, rng), other = random_tensor(sb, rng);
    const Tensor w = random_tensor(axis == 1 ? Shape{rows, a + b} : Shape{a + b, rows}, rng);
    cases.push_back({"concat", [=](ad::Tape& t, ad::Var v) {
                       return weighted_sum(ad::concat({v, t.constant(other)}, axis), w);
                     },
                     x, kLinear});
  }
  {
    const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 4), hw = pick(rng, 1, 5);
    const Tensor x = random_tensor({n, c, hw, hw}, rng), w = random_tensor({n, c}, rng);
    cases.push_back({"global_avg_pool", [=](ad::Tape&, ad::Var v) { return weighted_sum(ad::global_avg_pool(v), w); },
                     x, kLinear});
  }
  {
    const Shape s{pick(rng, 2, 4), pick(rng, 2, 8)};
    const Tensor x = random_tensor(s, rng), w = random_tensor(s, rng);
    const std::uint64_t mask_seed = rng.next_u64();
    cases.push_back({"dropout", [=](ad::Tape&, ad::Var v) {
                       Rng mask(mask_seed);
                       return weighted_sum(ad::dropout(v, 0.5, true, mask), w);
                     },
                     x, kLinear});
  }
  {
    const std::size_t n = pick(rng, 1, 6);
    const Tensor z = random_tensor({n, 1}, rng, 3.0);
    Tensor labels({n});
    for (double& y : labels.data()) y = static_cast<double>(rng.below(2));
    cases.push_back({"bce_with_logits", [=](ad::Tape&, ad::Var v) { return ad::bce_with_logits(v, labels); }, z,
                     kNonlinear});
  }
  {
    const Shape s{pick(rng, 1, 3), pick(rng, 1, 5)};
    const Tensor x = random_tensor(s, rng), other = random_tensor(s, rng);
    cases.push_back({"mul", [=](ad::Tape& t, ad::Var v) { return ad::sum(ad::mul(v, t.constant(other))); }, x,
                     kLinear});
    cases.push_back({"sum", [](ad::Tape&, ad::Var v) { return ad::sum(v); }, x, kLinear});
  }
  return cases;
}

/// A two-example batch for `cfg`, with a positive and a negative label.
inline PairBatch random_batch(const EncoderConfig& cfg, Rng& rng) {
  const std::size_t r = cfg.resolution, c = cfg.input_channels;
  auto images = [&] {
    Tensor t({2, c, r, r});
    for (double& v : t.data()) v = rng.uniform(-0.5, 0.5);
    return t;
  };
  PairBatch b{images(), images(), images(), Tensor::from({2}, {1.0, 0.0})};
  return b;
}

/// Training-mode loss of the full match network with respect to each
/// parameter tensor in turn; dropout masks are replayed from a fixed seed.
inline std::vector<GradCase> composite_cases(std::uint64_t seed) {
  Rng rng(seed);
  const EncoderConfig cfg = tiny_encoder();
  const MatchModelParams params = init_model(cfg, rng.next_u64());
  const PairBatch batch = random_batch(cfg, rng);
  const std::uint64_t mask_seed = rng.next_u64();
  const auto names = params.parameter_names();
  const auto tensors = params.parameters();

  std::vector<GradCase> cases;
  for (std::size_t i = 0; i < names.size(); ++i) {
    Tensor point = *tensors[i];
    // Zero-initialized biases sit exactly on ReLU kinks; move them off.
    if (names[i].ends_with("bias")) point = away_from_zero(random_tensor(point.shape(), rng, 0.1), 1e-3);
    cases.push_back({"matchnet/" + names[i], [=](ad::Tape& t, ad::Var v) {
                       BoundModel m = bind(t, params, false);
                       *m.slots()[i] = v;
                       Rng mask(mask_seed);
                       ad::Var fa = t.constant(batch.finger_a), fb = t.constant(batch.finger_b);
                       ad::Var z = match_logits(m, encode_tactile(m, fa, fb),
                                                encode_visual(m, t.constant(batch.visual)), true, mask);
                       return ad::bce_with_logits(z, batch.labels);
                     },
                     point, 1e-4});
  }
  return cases;
}

}  // namespace touchmatch::testing

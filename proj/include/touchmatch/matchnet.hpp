#pragma once

// Cross-modal match classifier p(y = 1 | T, I).
//
//   finger_a ─┐ tactile encoder (one parameter set) ─┐
//   finger_b ─┘                                       ├─ concat(2F + F) ─ FC+ReLU ─ dropout ─ FC+ReLU ─ FC ─ sigmoid
//   image    ── visual encoder ───────────────────────┘
//
// Each encoder: [conv k×k stride s + bias + ReLU] per channel stage, global
// average pool, affine to F, ReLU.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "touchmatch/adam.hpp"
#include "touchmatch/autodiff.hpp"
#include "touchmatch/dataset.hpp"
#include "touchmatch/error.hpp"
#include "touchmatch/io.hpp"
#include "touchmatch/rng.hpp"
#include "touchmatch/world.hpp"

namespace touchmatch {

struct EncoderConfig {
  std::vector<std::size_t> channels{16, 32, 64};
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t feature_dim = 64;
  std::size_t hidden_dim = 128;
  double dropout = 0.5;
  std::size_t input_channels = 3;
  std::size_t resolution = 32;

  void validate() const {
    if (channels.empty()) throw ConfigError("encoder needs at least one conv stage");
    for (std::size_t c : channels)
      if (c == 0) throw ConfigError("encoder channel counts must be positive");
    if (kernel == 0 || stride == 0 || feature_dim == 0 || hidden_dim == 0 || input_channels == 0 ||
        resolution == 0) {
      throw ConfigError("encoder dimensions must be positive");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 48;
  std::size_t iterations = 3000;
  std::uint64_t seed = 0;
  std::size_t log_every = 50;
};

struct EncoderParams {
  std::vector<Tensor> kernels;  // [C_out, C_in, k, k]
  std::vector<Tensor> biases;   // [C_out]
  Tensor proj_w;                // [C_last, F]
  Tensor proj_b;                // [F]
};

enum class Finger { a, b };

struct MatchModelParams {
  EncoderConfig config;
  EncoderParams tactile;  // the only tactile parameter set; both fingers read it
  EncoderParams visual;
  Tensor fc1_w, fc1_b;  // [3F, H], [H]
  Tensor fc2_w, fc2_b;  // [H, H], [H]
  Tensor out_w, out_b;  // [H, 1], [1]

  const EncoderParams& finger_encoder(Finger) const { return tactile; }

  /// Every trainable tensor, each exactly once, in a fixed order.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (EncoderParams* e : {&tactile, &visual}) {
      for (std::size_t i = 0; i < e->kernels.size(); ++i) {
        out.push_back(&e->kernels[i]);
        out.push_back(&e->biases[i]);
      }
      out.push_back(&e->proj_w);
      out.push_back(&e->proj_b);
    }
    for (Tensor* t : {&fc1_w, &fc1_b, &fc2_w, &fc2_b, &out_w, &out_b}) out.push_back(t);
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    auto ptrs = const_cast<MatchModelParams*>(this)->parameters();
    return {ptrs.begin(), ptrs.end()};
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (const char* branch : {"tactile", "visual"}) {
      for (std::size_t i = 0; i < config.channels.size(); ++i) {
        names.push_back(std::string(branch) + ".conv" + std::to_string(i) + ".kernel");
        names.push_back(std::string(branch) + ".conv" + std::to_string(i) + ".bias");
      }
      names.push_back(std::string(branch) + ".proj.weight");
      names.push_back(std::string(branch) + ".proj.bias");
    }
    for (const char* n : {"fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "out.weight", "out.bias"}) {
      names.emplace_back(n);
    }
    return names;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor* t : parameters()) n += t->size();
    return n;
  }
};

namespace matchnet_detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double stdev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.normal(0.0, stdev);
  return t;
}

inline EncoderParams init_encoder(const EncoderConfig& cfg, Rng& rng) {
  EncoderParams e;
  std::size_t in = cfg.input_channels;
  for (std::size_t out : cfg.channels) {
    e.kernels.push_back(he_normal({out, in, cfg.kernel, cfg.kernel}, in * cfg.kernel * cfg.kernel, rng));
    e.biases.emplace_back(Shape{out}, 0.0);
    in = out;
  }
  e.proj_w = he_normal({in, cfg.feature_dim}, in, rng);
  e.proj_b = Tensor({cfg.feature_dim}, 0.0);
  return e;
}

}  // namespace matchnet_detail

/// Fan-in scaled normal weights (stdev sqrt(2 / fan_in)), zero biases.
inline MatchModelParams init_model(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  MatchModelParams p;
  p.config = cfg;
  p.tactile = matchnet_detail::init_encoder(cfg, rng);
  p.visual = matchnet_detail::init_encoder(cfg, rng);
  const std::size_t joint = 3 * cfg.feature_dim, h = cfg.hidden_dim;
  p.fc1_w = matchnet_detail::he_normal({joint, h}, joint, rng);
  p.fc1_b = Tensor({h}, 0.0);
  p.fc2_w = matchnet_detail::he_normal({h, h}, h, rng);
  p.fc2_b = Tensor({h}, 0.0);
  p.out_w = matchnet_detail::he_normal({h, 1}, h, rng);
  p.out_b = Tensor({1}, 0.0);
  return p;
}

/// Parameters placed on a tape as leaves.
struct BoundEncoder {
  std::vector<ad::Var> kernels, biases;
  ad::Var proj_w, proj_b;
};

struct BoundModel {
  const EncoderConfig* config = nullptr;
  BoundEncoder tactile;
  BoundEncoder visual;
  ad::Var fc1_w, fc1_b, fc2_w, fc2_b, out_w, out_b;

  /// Same order as MatchModelParams::parameters().
  std::vector<ad::Var> leaves() const {
    BoundModel copy = *this;
    std::vector<ad::Var> out;
    for (ad::Var* v : copy.slots()) out.push_back(*v);
    return out;
  }

  /// Writable references to the leaves, in leaves() order.
  std::vector<ad::Var*> slots() {
    std::vector<ad::Var*> out;
    for (BoundEncoder* e : {&tactile, &visual}) {
      for (std::size_t i = 0; i < e->kernels.size(); ++i) {
        out.push_back(&e->kernels[i]);
        out.push_back(&e->biases[i]);
      }
      out.push_back(&e->proj_w);
      out.push_back(&e->proj_b);
    }
    for (ad::Var* v : {&fc1_w, &fc1_b, &fc2_w, &fc2_b, &out_w, &out_b}) out.push_back(v);
    return out;
  }
};

inline BoundModel bind(ad::Tape& tape, const MatchModelParams& p, bool requires_grad) {
  auto bind_encoder = [&](const EncoderParams& e) {
    BoundEncoder b;
    for (std::size_t i = 0; i < e.kernels.size(); ++i) {
      b.kernels.push_back(tape.leaf(e.kernels[i], requires_grad));
      b.biases.push_back(tape.leaf(e.biases[i], requires_grad));
    }
    b.proj_w = tape.leaf(e.proj_w, requires_grad);
    b.proj_b = tape.leaf(e.proj_b, requires_grad);
    return b;
  };
  BoundModel m;
  m.config = &p.config;
  m.tactile = bind_encoder(p.tactile);
  m.visual = bind_encoder(p.visual);
  m.fc1_w = tape.leaf(p.fc1_w, requires_grad);
  m.fc1_b = tape.leaf(p.fc1_b, requires_grad);
  m.fc2_w = tape.leaf(p.fc2_w, requires_grad);
  m.fc2_b = tape.leaf(p.fc2_b, requires_grad);
  m.out_w = tape.leaf(p.out_w, requires_grad);
  m.out_b = tape.leaf(p.out_b, requires_grad);
  return m;
}

/// Images [N, C, R, R] -> features [N, F].
inline ad::Var encode(const BoundEncoder& enc, const EncoderConfig& cfg, ad::Var images) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != cfg.input_channels || s[2] != cfg.resolution || s[3] != cfg.resolution) {
    throw DimensionError("encoder expects [N," + std::to_string(cfg.input_channels) + "," +
                         std::to_string(cfg.resolution) + "," + std::to_string(cfg.resolution) + "], got " +
                         shape_str(s));
  }
  ad::Var x = images;
  for (std::size_t i = 0; i < enc.kernels.size(); ++i) {
    x = ad::conv2d(x, enc.kernels[i], cfg.stride, cfg.kernel / 2);
    x = ad::relu(ad::add_channel_bias(x, enc.biases[i]));
  }
  return ad::relu(ad::affine(ad::global_avg_pool(x), enc.proj_w, enc.proj_b));
}

/// Both finger batches through the single tactile encoder -> [N, 2F].
inline ad::Var encode_tactile(const BoundModel& m, ad::Var finger_a, ad::Var finger_b) {
  return ad::concat({encode(m.tactile, *m.config, finger_a), encode(m.tactile, *m.config, finger_b)}, 1);
}

inline ad::Var encode_visual(const BoundModel& m, ad::Var image) { return encode(m.visual, *m.config, image); }

/// Fusion head: [N, 2F] x [N, F] -> logits [N, 1].
inline ad::Var match_logits(const BoundModel& m, ad::Var tactile_features, ad::Var visual_features, bool training,
                            Rng& rng) {
  ad::Var joint = ad::concat({tactile_features, visual_features}, 1);
  ad::Var h = ad::relu(ad::affine(joint, m.fc1_w, m.fc1_b));
  h = ad::dropout(h, m.config->dropout, training, rng);
  h = ad::relu(ad::affine(h, m.fc2_w, m.fc2_b));
  return ad::affine(h, m.out_w, m.out_b);
}

inline constexpr double kInputCenter = 0.5;

/// Stacks single observations [C, R, R] into a batch [N, C, R, R], shifting
/// pixel values from [0, 1] to [-0.5, 0.5].
inline Tensor stack_images(const std::vector<const Tensor*>& images) {
  if (images.empty()) throw InvalidArgument("stack_images: empty batch");
  const Shape& s = images.front()->shape();
  if (s.size() != 3) throw DimensionError("observation must be [C,R,R], got " + shape_str(s));
  Tensor out({images.size(), s[0], s[1], s[2]});
  const std::size_t per = images.front()->size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != s) {
      throw DimensionError("observation " + shape_str(images[i]->shape()) + " vs " + shape_str(s));
    }
    const double* src = images[i]->data().data();
    for (std::size_t k = 0; k < per; ++k) out[i * per + k] = src[k] - kInputCenter;
  }
  return out;
}

/// Observation tensors and labels for a list of pairs.
struct PairBatch {
  Tensor finger_a, finger_b, visual;  // [N, 3, R, R]
  Tensor labels;                      // [N]
};

inline PairBatch make_batch(const EpisodeStore& store, const std::vector<PairExample>& pairs) {
  std::vector<const Tensor*> fa, fb, vis;
  Tensor labels({pairs.size()});
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Episode& t = store.episode(pairs[i].tactile_episode_id);
    fa.push_back(&t.tactile.finger_a);
    fb.push_back(&t.tactile.finger_b);
    vis.push_back(&store.episode(pairs[i].visual_episode_id).visual.image);
    labels[i] = pairs[i].label;
  }
  return {stack_images(fa), stack_images(fb), stack_images(vis), std::move(labels)};
}

/// p(y = 1 | T, I) for one pair.
inline double predict_match(const MatchModelParams& params, const TactileObs& tactile, const VisualObs& visual,
                            bool training, Rng& rng) {
  ad::Tape tape;
  BoundModel m = bind(tape, params, false);
  ad::Var fa = tape.constant(stack_images({&tactile.finger_a}));
  ad::Var fb = tape.constant(stack_images({&tactile.finger_b}));
  ad::Var im = tape.constant(stack_images({&visual.image}));
  ad::Var z = match_logits(m, encode_tactile(m, fa, fb), encode_visual(m, im), training, rng);
  return ad::sigmoid(z.value()[0]);
}

/// Mean binary cross-entropy over a batch (training mode) and its gradient
/// with respect to every parameter, aligned with MatchModelParams::parameters().
struct LossAndGrad {
  double loss = 0.0;
  std::vector<Tensor> grads;
};

inline LossAndGrad loss_and_grad(const MatchModelParams& params, const PairBatch& batch, Rng& rng,
                                 bool training = true) {
  if (batch.labels.empty()) throw InvalidArgument("loss: empty batch");
  ad::Tape tape;
  BoundModel m = bind(tape, params, true);
  ad::Var fa = tape.constant(batch.finger_a);
  ad::Var fb = tape.constant(batch.finger_b);
  ad::Var im = tape.constant(batch.visual);
  ad::Var z = match_logits(m, encode_tactile(m, fa, fb), encode_visual(m, im), training, rng);
  ad::Var l = ad::bce_with_logits(z, batch.labels);
  tape.backward(l);
  LossAndGrad out{l.value()[0], {}};
  for (ad::Var v : m.leaves()) out.grads.push_back(tape.grad(v));
  return out;
}

inline double loss(const MatchModelParams& params, const PairBatch& batch, Rng& rng, bool training = true) {
  if (batch.labels.empty()) throw InvalidArgument("loss: empty batch");
  ad::Tape tape;
  BoundModel m = bind(tape, params, false);
  ad::Var z = match_logits(m, encode_tactile(m, tape.constant(batch.finger_a), tape.constant(batch.finger_b)),
                           encode_visual(m, tape.constant(batch.visual)), training, rng);
  return ad::bce_with_logits(z, batch.labels).value()[0];
}

struct LossRecord {
  std::size_t iteration;
  double loss;
};

struct TrainResult {
  MatchModelParams params;
  std::vector<LossRecord> history;       // every log_every iterations and the last one
  std::vector<double> iteration_losses;  // every iteration
};

/// Minibatch Adam on the mean cross-entropy. Batches are drawn uniformly with
/// replacement from `pairs`; all randomness derives from cfg.seed.
inline TrainResult train(const EpisodeStore& store, const std::vector<PairExample>& pairs, const TrainConfig& cfg,
                         const EncoderConfig& enc_cfg,
                         const std::function<void(std::size_t, double)>& on_log = nullptr) {
  if (pairs.empty()) throw DatasetError("train: no training pairs");
  if (cfg.batch_size == 0 || cfg.iterations == 0 || !(cfg.learning_rate > 0.0) || cfg.log_every == 0) {
    throw ConfigError("train: batch size, iterations, learning rate and log interval must be positive");
  }
  const auto summary = dataset_summary(pairs);
  if (summary.positives != summary.negatives) {
    throw DatasetError("train: pair list is not label-balanced (" + std::to_string(summary.positives) + " vs " +
                       std::to_string(summary.negatives) + ")");
  }

  TrainResult result{init_model(enc_cfg, derive_seed(cfg.seed, "init")), {}, {}};
  std::vector<Tensor*> params = result.params.parameters();
  AdamState adam(params);
  Rng batch_rng(derive_seed(cfg.seed, "batch"));
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));

  std::vector<PairExample> chosen(cfg.batch_size);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    for (auto& c : chosen) c = pairs[batch_rng.below(pairs.size())];
    const PairBatch batch = make_batch(store, chosen);
    LossAndGrad lg;
    try {
      lg = loss_and_grad(result.params, batch, dropout_rng);
    } catch (const NumericError& e) {
      throw NumericError("train: iteration " + std::to_string(it) + ": " + e.what());
    }
    if (!std::isfinite(lg.loss)) {
      throw NumericError("train: non-finite loss at iteration " + std::to_string(it));
    }
    result.iteration_losses.push_back(lg.loss);
    if (it % cfg.log_every == 0 || it + 1 == cfg.iterations) {
      result.history.push_back({it, lg.loss});
      if (on_log) on_log(it, lg.loss);
    }
    adam_step(params, lg.grads, adam, cfg.learning_rate);
  }
  return result;
}

/// Eval-mode features for every episode in the store, computed in batches.
struct EncodedStore {
  Tensor tactile;  // [episodes, 2F]
  Tensor visual;   // [episodes, F]
};

inline EncodedStore encode_store(const MatchModelParams& params, const EpisodeStore& store,
                                 std::size_t chunk = 64) {
  const std::size_t n = store.size(), f = params.config.feature_dim;
  EncodedStore out{Tensor({n, 2 * f}), Tensor({n, f})};
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t end = std::min(n, start + chunk);
    std::vector<const Tensor*> fa, fb, vis;
    for (std::size_t i = start; i < end; ++i) {
      const Episode& ep = store.episode(static_cast<std::int64_t>(i));
      fa.push_back(&ep.tactile.finger_a);
      fb.push_back(&ep.tactile.finger_b);
      vis.push_back(&ep.visual.image);
    }
    ad::Tape tape;
    BoundModel m = bind(tape, params, false);
    const Tensor& t = encode_tactile(m, tape.constant(stack_images(fa)), tape.constant(stack_images(fb))).value();
    const Tensor& v = encode_visual(m, tape.constant(stack_images(vis))).value();
    std::copy(t.data().begin(), t.data().end(), &out.tactile[start * 2 * f]);
    std::copy(v.data().begin(), v.data().end(), &out.visual[start * f]);
  }
  return out;
}

/// Eval-mode logits of the fusion head for N rows of precomputed features
/// ([N, 2F] and [N, F]). Evaluates the same layers as match_logits without a
/// tape, reading the parameters in place.
inline Tensor head_logits(const MatchModelParams& p, const Tensor& tactile_features, const Tensor& visual_features) {
  using detail_mat = ad::detail::RowMat;
  const std::size_t f = p.config.feature_dim, h = p.config.hidden_dim;
  if (tactile_features.rank() != 2 || visual_features.rank() != 2 || tactile_features.dim(1) != 2 * f ||
      visual_features.dim(1) != f || tactile_features.dim(0) != visual_features.dim(0)) {
    throw DimensionError("head_logits: features " + shape_str(tactile_features.shape()) + " and " +
                         shape_str(visual_features.shape()));
  }
  const std::size_t n = tactile_features.dim(0);
  detail_mat joint(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(3 * f));
  joint.leftCols(static_cast<Eigen::Index>(2 * f)) = ad::detail::as_matrix(tactile_features, n, 2 * f);
  joint.rightCols(static_cast<Eigen::Index>(f)) = ad::detail::as_matrix(visual_features, n, f);
  detail_mat h1 = joint * ad::detail::as_matrix(p.fc1_w, 3 * f, h);
  h1.rowwise() += ad::detail::as_matrix(p.fc1_b, 1, h).row(0);
  h1 = h1.cwiseMax(0.0);
  detail_mat h2 = h1 * ad::detail::as_matrix(p.fc2_w, h, h);
  h2.rowwise() += ad::detail::as_matrix(p.fc2_b, 1, h).row(0);
  h2 = h2.cwiseMax(0.0);
  Tensor z({n, 1});
  auto zm = ad::detail::as_matrix(z, n, 1);
  zm.noalias() = h2 * ad::detail::as_matrix(p.out_w, h, 1);
  zm.array() += p.out_b[0];
  return z;
}

// ---------------------------------------------------------------- checkpoints

inline io::TensorArchive to_archive(const MatchModelParams& p) {
  io::TensorArchive a;
  a.kind = "matchnet";
  const EncoderConfig& c = p.config;
  std::string channels;
  for (std::size_t i = 0; i < c.channels.size(); ++i) channels += (i ? "," : "") + std::to_string(c.channels[i]);
  a.attributes = {{"channels", channels},
                  {"kernel", std::to_string(c.kernel)},
                  {"stride", std::to_string(c.stride)},
                  {"feature_dim", std::to_string(c.feature_dim)},
                  {"hidden_dim", std::to_string(c.hidden_dim)},
                  {"dropout", io::format_double(c.dropout)},
                  {"input_channels", std::to_string(c.input_channels)},
                  {"resolution", std::to_string(c.resolution)}};
  const auto names = p.parameter_names();
  const auto tensors = p.parameters();
  for (std::size_t i = 0; i < names.size(); ++i) a.tensors.emplace_back(names[i], *tensors[i]);
  return a;
}

inline MatchModelParams from_archive(const io::TensorArchive& a) {
  if (a.kind != "matchnet") throw IoError("archive kind '" + a.kind + "' is not a matchnet checkpoint");
  EncoderConfig c;
  c.channels.clear();
  std::istringstream ch(a.attribute("channels"));
  for (std::string tok; std::getline(ch, tok, ',');) c.channels.push_back(io::parse_int<std::size_t>(tok, "channels"));
  c.kernel = io::parse_int<std::size_t>(a.attribute("kernel"), "kernel");
  c.stride = io::parse_int<std::size_t>(a.attribute("stride"), "stride");
  c.feature_dim = io::parse_int<std::size_t>(a.attribute("feature_dim"), "feature_dim");
  c.hidden_dim = io::parse_int<std::size_t>(a.attribute("hidden_dim"), "hidden_dim");
  c.dropout = io::parse_double(a.attribute("dropout"), "dropout");
  c.input_channels = io::parse_int<std::size_t>(a.attribute("input_channels"), "input_channels");
  c.resolution = io::parse_int<std::size_t>(a.attribute("resolution"), "resolution");
  MatchModelParams p = init_model(c, 0);
  const auto names = p.parameter_names();
  auto tensors = p.parameters();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor& t = a.tensor(names[i]);
    tensors[i]->require_same_shape(t, ("checkpoint tensor " + names[i]).c_str());
    *tensors[i] = t;
  }
  return p;
}

inline void save_checkpoint(const MatchModelParams& p, const io::fs::path& header, const io::fs::path& blob) {
  io::save_archive(to_archive(p), header, blob);
}

inline MatchModelParams load_checkpoint(const io::fs::path& header, const io::fs::path& blob) {
  return from_archive(io::load_archive(header, blob));
}

}  // namespace touchmatch

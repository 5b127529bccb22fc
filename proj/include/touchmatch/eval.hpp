#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "touchmatch/cca.hpp"
#include "touchmatch/dataset.hpp"
#include "touchmatch/error.hpp"
#include "touchmatch/io.hpp"
#include "touchmatch/matchnet.hpp"
#include "touchmatch/rng.hpp"

namespace touchmatch {

/// Confidence that a tactile episode and a visual episode show the same
/// object; higher means more likely.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::string name() const = 0;
  virtual double score(const Episode& tactile, const Episode& visual) const = 0;
  /// Score inside numbered evaluation draw `draw` (a trial or pair index).
  /// Only scorers with per-draw randomness depend on it.
  virtual double draw_score(const Episode& tactile, const Episode& visual, std::uint64_t /*draw*/) const {
    return score(tactile, visual);
  }
  /// Decision threshold for pair classification (score >= threshold).
  virtual double threshold() const = 0;
};

/// Log-probability of a match under a trained network (eval mode). Episodes
/// of the store given at construction use cached encodings.
class MatchnetScorer final : public Scorer {
 public:
  MatchnetScorer(const MatchModelParams& params, const EpisodeStore& store)
      : params_(params), store_(&store), enc_(encode_store(params, store)) {}

  std::string name() const override { return "matchnet"; }
  double threshold() const override { return std::log(0.5); }

  double score(const Episode& tactile, const Episode& visual) const override {
    const std::size_t f = params_.config.feature_dim;
    Tensor tf({1, 2 * f}), vf({1, f});
    features(tactile, &tf, nullptr);
    features(visual, nullptr, &vf);
    return ad::log_sigmoid(head_logits(params_, tf, vf)[0]);
  }

 private:
  bool cached(const Episode& ep) const {
    return ep.episode_id >= 0 && static_cast<std::size_t>(ep.episode_id) < store_->size() &&
           &store_->episode(ep.episode_id) == &ep;
  }

  void features(const Episode& ep, Tensor* tf, Tensor* vf) const {
    const std::size_t f = params_.config.feature_dim;
    if (cached(ep)) {
      const auto row = static_cast<std::size_t>(ep.episode_id);
      if (tf) std::copy_n(&enc_.tactile[row * 2 * f], 2 * f, tf->data().data());
      if (vf) std::copy_n(&enc_.visual[row * f], f, vf->data().data());
      return;
    }
    ad::Tape tape;
    BoundModel m = bind(tape, params_, false);
    if (tf) {
      *tf = encode_tactile(m, tape.constant(stack_images({&ep.tactile.finger_a})),
                           tape.constant(stack_images({&ep.tactile.finger_b})))
                .value();
    }
    if (vf) *vf = encode_visual(m, tape.constant(stack_images({&ep.visual.image}))).value();
  }

  MatchModelParams params_;
  const EpisodeStore* store_;
  EncodedStore enc_;
};

/// CCA agreement score; canonical projections of store episodes are cached.
class CcaScorer final : public Scorer {
 public:
  CcaScorer(CcaModel model, const EpisodeStore& store) : model_(std::move(model)), store_(&store) {
    px_.reserve(store.size());
    py_.reserve(store.size());
    for (const Episode& ep : store.episodes()) {
      px_.push_back(model_.project_x(featurize(ep.tactile)));
      py_.push_back(model_.project_y(featurize(ep.visual)));
    }
  }

  std::string name() const override { return "cca"; }
  double threshold() const override { return model_.threshold; }

  double score(const Episode& tactile, const Episode& visual) const override {
    const Eigen::VectorXd x = cached(tactile) ? px_[static_cast<std::size_t>(tactile.episode_id)]
                                              : model_.project_x(featurize(tactile.tactile));
    const Eigen::VectorXd y = cached(visual) ? py_[static_cast<std::size_t>(visual.episode_id)]
                                             : model_.project_y(featurize(visual.visual));
    return model_.score_projected(x, y);
  }

  const CcaModel& model() const noexcept { return model_; }

 private:
  bool cached(const Episode& ep) const {
    return ep.episode_id >= 0 && static_cast<std::size_t>(ep.episode_id) < store_->size() &&
           &store_->episode(ep.episode_id) == &ep;
  }

  CcaModel model_;
  const EpisodeStore* store_;
  std::vector<Eigen::VectorXd> px_, py_;
};

/// Uniform [0, 1) score that is a pure function of (seed, draw, tactile id,
/// visual id), so repeated episode pairs in different draws are independent.
class ChanceScorer final : public Scorer {
 public:
  explicit ChanceScorer(std::uint64_t seed) : seed_(seed) {}

  std::string name() const override { return "chance"; }
  double threshold() const override { return 0.5; }

  double score(const Episode& tactile, const Episode& visual) const override {
    return draw_score(tactile, visual, 0);
  }

  double draw_score(const Episode& tactile, const Episode& visual, std::uint64_t draw) const override {
    std::uint64_t s = derive_seed(seed_, draw);
    s = derive_seed(derive_seed(s, static_cast<std::uint64_t>(tactile.episode_id)),
                    static_cast<std::uint64_t>(visual.episode_id));
    return static_cast<double>(s >> 11) * 0x1.0p-53;
  }

 private:
  std::uint64_t seed_;
};

/// Negative Euclidean distance between the true latent vectors. Reads ground
/// truth, so it only validates the generator and the harness.
class LatentOracleScorer final : public Scorer {
 public:
  explicit LatentOracleScorer(const EpisodeStore& store) : store_(&store) {}

  std::string name() const override { return "oracle"; }
  double threshold() const override { return -1e-9; }

  double score(const Episode& tactile, const Episode& visual) const override {
    const ObjectSpec& a = store_->object(tactile.object_id);
    const ObjectSpec& b = store_->object(visual.object_id);
    double d2 = 0.0;
    for (std::size_t k = 0; k < a.latent.size(); ++k) d2 += (a.latent[k] - b.latent[k]) * (a.latent[k] - b.latent[k]);
    return -std::sqrt(d2);
  }

 private:
  const EpisodeStore* store_;
};

inline double checked_score(const Scorer& scorer, const Episode& tactile, const Episode& visual,
                            std::uint64_t draw, const char* what) {
  const double s = scorer.draw_score(tactile, visual, draw);
  if (!std::isfinite(s)) {
    throw NumericError("scorer '" + scorer.name() + "' produced a non-finite confidence on " + what + " " +
                       std::to_string(draw));
  }
  return s;
}

/// Fraction of pairs where (score >= threshold) agrees with the label.
inline double pair_accuracy(const Scorer& scorer, const EpisodeStore& store, const std::vector<PairExample>& pairs,
                            double threshold) {
  if (pairs.empty()) throw InvalidArgument("pair_accuracy: empty pair list");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const PairExample& p = pairs[i];
    const double s =
        checked_score(scorer, store.episode(p.tactile_episode_id), store.episode(p.visual_episode_id), i, "pair");
    correct += static_cast<std::size_t>((s >= threshold) == (p.label == 1));
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

inline double pair_accuracy(const Scorer& scorer, const EpisodeStore& store, const std::vector<PairExample>& pairs) {
  return pair_accuracy(scorer, store, pairs, scorer.threshold());
}

struct RankingTrial {
  std::size_t trial_id = 0;
  std::int64_t query_episode_id = 0;
  std::vector<std::int64_t> candidate_episode_ids;  // visual episodes
  std::vector<std::int64_t> candidate_object_ids;
  std::size_t true_index = 0;
  std::vector<double> confidences;  // filled by rank_candidates
  std::size_t rank_of_truth = 0;    // 1-based, 0 until ranked

  std::int64_t true_object_id() const { return candidate_object_ids.at(true_index); }
};

/// Trial i draws from a stream seeded by derive_seed(seed, i), so trials are
/// independent of evaluation order.
inline std::vector<RankingTrial> make_trials(const EpisodeStore& store, const ObjectSet& side, std::size_t k,
                                             std::size_t n_trials, std::uint64_t seed) {
  if (k < 1) throw InvalidArgument("make_trials: K must be at least 1");
  if (side.size() < k) {
    throw DatasetError("make_trials: K = " + std::to_string(k) + " exceeds the " + std::to_string(side.size()) +
                       " objects available");
  }
  const std::vector<std::int64_t> objects(side.begin(), side.end());
  std::vector<std::int64_t> pool;
  for (std::int64_t o : objects) {
    const auto& eps = store.episodes_of(o);
    if (eps.empty()) throw DatasetError("make_trials: object " + std::to_string(o) + " has no episodes");
    pool.insert(pool.end(), eps.begin(), eps.end());
  }

  std::vector<RankingTrial> trials(n_trials);
  for (std::size_t t = 0; t < n_trials; ++t) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
    RankingTrial& trial = trials[t];
    trial.trial_id = t;
    trial.query_episode_id = pool[rng.below(pool.size())];
    const std::int64_t truth = store.episode(trial.query_episode_id).object_id;

    std::vector<std::int64_t> others;
    for (std::int64_t o : objects)
      if (o != truth) others.push_back(o);
    for (std::size_t i = 0; i + 1 < k; ++i) {
      const std::size_t j = i + rng.below(others.size() - i);
      std::swap(others[i], others[j]);
    }
    std::vector<std::int64_t> cands(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(k - 1));
    cands.push_back(truth);
    rng.shuffle(cands);
    for (std::size_t c = 0; c < k; ++c) {
      const auto& eps = store.episodes_of(cands[c]);
      trial.candidate_object_ids.push_back(cands[c]);
      trial.candidate_episode_ids.push_back(eps[rng.below(eps.size())]);
      if (cands[c] == truth) trial.true_index = c;
    }
  }
  return trials;
}

/// Candidate indices from most to least confident; equal confidences order by
/// ascending object id.
inline std::vector<std::size_t> ranking_order(const RankingTrial& trial) {
  std::vector<std::size_t> order(trial.confidences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (trial.confidences[a] != trial.confidences[b]) return trial.confidences[a] > trial.confidences[b];
    return trial.candidate_object_ids[a] < trial.candidate_object_ids[b];
  });
  return order;
}

/// Scores every candidate against the query and returns the 1-based rank of
/// the true candidate.
inline std::size_t rank_candidates(const Scorer& scorer, const EpisodeStore& store, RankingTrial& trial) {
  const std::size_t k = trial.candidate_episode_ids.size();
  if (k == 0 || trial.candidate_object_ids.size() != k || trial.true_index >= k) {
    throw InvalidArgument("rank_candidates: malformed trial " + std::to_string(trial.trial_id));
  }
  const Episode& query = store.episode(trial.query_episode_id);
  trial.confidences.assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    trial.confidences[c] =
        checked_score(scorer, query, store.episode(trial.candidate_episode_ids[c]), trial.trial_id, "trial");
  }
  const auto order = ranking_order(trial);
  trial.rank_of_truth = static_cast<std::size_t>(std::find(order.begin(), order.end(), trial.true_index) -
                                                 order.begin()) + 1;
  return trial.rank_of_truth;
}

inline std::vector<std::size_t> rank_all(const Scorer& scorer, const EpisodeStore& store,
                                         std::vector<RankingTrial>& trials) {
  std::vector<std::size_t> ranks;
  ranks.reserve(trials.size());
  for (RankingTrial& t : trials) ranks.push_back(rank_candidates(scorer, store, t));
  return ranks;
}

/// curve[n-1] = fraction of trials whose true candidate ranked within n guesses.
inline std::vector<double> cumulative_accuracy(const std::vector<std::size_t>& ranks, std::size_t k) {
  if (ranks.empty()) throw InvalidArgument("cumulative_accuracy: no trials");
  std::vector<std::size_t> hist(k + 1, 0);
  for (std::size_t r : ranks) {
    if (r < 1 || r > k) {
      throw InvalidArgument("cumulative_accuracy: rank " + std::to_string(r) + " outside 1.." + std::to_string(k));
    }
    ++hist[r];
  }
  std::vector<double> curve(k);
  std::size_t acc = 0;
  for (std::size_t n = 1; n <= k; ++n) {
    acc += hist[n];
    curve[n - 1] = static_cast<double>(acc) / static_cast<double>(ranks.size());
  }
  return curve;
}

struct ObjectAccuracy {
  std::size_t correct = 0;
  std::size_t trials = 0;
  double accuracy() const { return trials == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(trials); }
};

struct FirstShotTable {
  std::map<std::int64_t, ObjectAccuracy> per_object;  // keyed by true object
  std::map<std::pair<std::int64_t, std::int64_t>, std::size_t> confusion;  // (true, first guess) -> count

  /// Unweighted mean of per-object accuracies over the objects in `which`
  /// that appeared in at least one trial.
  double mean_accuracy(const ObjectSet& which) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [o, a] : per_object) {
      if (!which.contains(o) || a.trials == 0) continue;
      sum += a.accuracy();
      ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  }
};

/// Ranks every trial and tallies the first guess per true object.
inline FirstShotTable first_shot_by_object(const Scorer& scorer, const EpisodeStore& store,
                                           std::vector<RankingTrial>& trials) {
  FirstShotTable table;
  for (RankingTrial& t : trials) {
    rank_candidates(scorer, store, t);
    const std::int64_t truth = t.true_object_id();
    const std::int64_t guess = t.candidate_object_ids[ranking_order(t).front()];
    ObjectAccuracy& a = table.per_object[truth];
    ++a.trials;
    a.correct += static_cast<std::size_t>(guess == truth);
    ++table.confusion[{truth, guess}];
  }
  return table;
}

// ---------------------------------------------------------------- CSV emitters

inline std::string curve_csv_header() { return "guess_index,accuracy,scorer,K\n"; }

inline std::string curve_csv_rows(const std::vector<double>& curve, const std::string& scorer, std::size_t k) {
  std::ostringstream os;
  for (std::size_t n = 0; n < curve.size(); ++n) {
    os << n + 1 << ',' << io::format_double(curve[n]) << ',' << scorer << ',' << k << '\n';
  }
  return os.str();
}

inline std::string per_object_csv_header() { return "object_id,split,accuracy,n_trials,scorer,pool\n"; }

inline std::string per_object_csv_rows(const FirstShotTable& table, const SplitManifest& split,
                                       const std::string& scorer, const std::string& pool) {
  std::ostringstream os;
  for (const auto& [o, a] : table.per_object) {
    os << o << ',' << (split.is_test(o) ? "test" : "train") << ',' << io::format_double(a.accuracy()) << ','
       << a.trials << ',' << scorer << ',' << pool << '\n';
  }
  return os.str();
}

inline std::string confusion_csv_header() { return "true_object_id,guessed_object_id,count,scorer,pool\n"; }

inline std::string confusion_csv_rows(const FirstShotTable& table, const std::string& scorer,
                                      const std::string& pool) {
  std::ostringstream os;
  for (const auto& [key, count] : table.confusion) {
    os << key.first << ',' << key.second << ',' << count << ',' << scorer << ',' << pool << '\n';
  }
  return os.str();
}

}  // namespace touchmatch

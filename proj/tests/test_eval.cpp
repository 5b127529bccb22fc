#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "grad_cases.hpp"
#include "touchmatch/eval.hpp"

using namespace touchmatch;

namespace {

const EpisodeStore& store() {
  static const EpisodeStore s = [] {
    WorldConfig cfg;
    cfg.resolution = 8;
    return generate_store(12, 6, cfg, 31);
  }();
  return s;
}

ObjectSet all_objects() {
  const auto ids = store().object_ids();
  return {ids.begin(), ids.end()};
}

/// Every pair scores the same.
class ConstantScorer final : public Scorer {
 public:
  std::string name() const override { return "constant"; }
  double threshold() const override { return 0.0; }
  double score(const Episode&, const Episode&) const override { return 1.0; }
};

/// A strictly increasing transform of another scorer.
class CubedScorer final : public Scorer {
 public:
  explicit CubedScorer(const Scorer& inner) : inner_(inner) {}
  std::string name() const override { return "cubed"; }
  double threshold() const override { return 0.0; }
  double score(const Episode& t, const Episode& v) const override { return draw_score(t, v, 0); }
  double draw_score(const Episode& t, const Episode& v, std::uint64_t draw) const override {
    const double s = inner_.draw_score(t, v, draw) - 0.5;
    return 3.0 * s * s * s + 1.0;
  }

 private:
  const Scorer& inner_;
};

/// Returns NaN against one particular visual episode.
class PoisonScorer final : public Scorer {
 public:
  explicit PoisonScorer(std::int64_t bad) : bad_(bad) {}
  std::string name() const override { return "poison"; }
  double threshold() const override { return 0.0; }
  double score(const Episode&, const Episode& v) const override {
    return v.episode_id == bad_ ? std::numeric_limits<double>::quiet_NaN() : 0.0;
  }

 private:
  std::int64_t bad_;
};

}  // namespace

TEST(PairAccuracy, OracleIsPerfect) {
  const auto pairs = build_pairs(store(), all_objects(), 4, 4, 1);
  EXPECT_EQ(pair_accuracy(LatentOracleScorer(store()), store(), pairs), 1.0);
}

TEST(PairAccuracy, ChanceNearHalf) {
  const auto pairs = build_pairs(store(), all_objects(), 8, 8, 2);
  ASSERT_GE(pairs.size(), 1000u);
  const double acc = pair_accuracy(ChanceScorer(3), store(), pairs);
  EXPECT_GE(acc, 0.45);
  EXPECT_LE(acc, 0.55);
}

TEST(PairAccuracy, EmptyListRejected) {
  EXPECT_THROW(pair_accuracy(ChanceScorer(1), store(), {}), InvalidArgument);
}

TEST(ChanceScorer, PureFunctionOfSeedDrawAndIds) {
  const ChanceScorer a(5), b(5), c(6);
  const auto& t = store().episode(1);
  const auto& v = store().episode(2);
  EXPECT_EQ(a.score(t, v), b.score(t, v));
  EXPECT_EQ(a.draw_score(t, v, 9), b.draw_score(t, v, 9));
  EXPECT_NE(a.draw_score(t, v, 9), a.draw_score(t, v, 10));
  EXPECT_NE(a.score(t, v), c.score(t, v));
  EXPECT_NE(a.score(t, v), a.score(v, t));
  EXPECT_GE(a.score(t, v), 0.0);
  EXPECT_LT(a.score(t, v), 1.0);
}

TEST(MakeTrials, SamplingContract) {
  const auto split = split_objects(12, 0.5, 4);
  ASSERT_GE(split.test_object_ids.size(), 5u);
  const auto trials = make_trials(store(), split.test_object_ids, 5, 500, 5);
  ASSERT_EQ(trials.size(), 500u);
  for (const auto& t : trials) {
    ASSERT_EQ(t.candidate_object_ids.size(), 5u);
    const std::set<std::int64_t> distinct(t.candidate_object_ids.begin(), t.candidate_object_ids.end());
    EXPECT_EQ(distinct.size(), 5u);
    const std::int64_t truth = store().episode(t.query_episode_id).object_id;
    EXPECT_EQ(t.true_object_id(), truth);
    EXPECT_EQ(std::count(t.candidate_object_ids.begin(), t.candidate_object_ids.end(), truth), 1);
    EXPECT_TRUE(split.test_object_ids.contains(truth));
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_EQ(store().episode(t.candidate_episode_ids[c]).object_id, t.candidate_object_ids[c]);
      EXPECT_TRUE(split.test_object_ids.contains(t.candidate_object_ids[c]));
    }
  }
}

TEST(MakeTrials, DistractorFrequenciesUniform) {
  const std::size_t n = 10000, k = 5, objects = 12;
  const auto trials = make_trials(store(), all_objects(), k, n, 6);
  std::map<std::int64_t, double> eligible, seen;
  for (const auto& t : trials) {
    for (std::int64_t o : all_objects())
      if (o != t.true_object_id()) eligible[o] += 1.0;
    for (std::size_t c = 0; c < k; ++c)
      if (c != t.true_index) seen[t.candidate_object_ids[c]] += 1.0;
  }
  // Given the truth, each other object is a distractor with probability
  // (K-1)/(n_objects-1), independently across trials.
  const double p = static_cast<double>(k - 1) / static_cast<double>(objects - 1);
  for (const auto& [o, m] : eligible) {
    const double sd = std::sqrt(m * p * (1 - p));
    EXPECT_NEAR(seen[o], m * p, 3.0 * sd) << "object " << o;
  }
}

TEST(MakeTrials, QueryAndTruePositionUniform) {
  const std::size_t n = 10000, k = 5;
  const auto trials = make_trials(store(), all_objects(), k, n, 7);
  std::vector<double> pos(k, 0.0);
  for (const auto& t : trials) pos[t.true_index] += 1.0;
  double chi2 = 0.0;
  for (double c : pos) chi2 += (c - n / 5.0) * (c - n / 5.0) / (n / 5.0);
  EXPECT_LT(chi2, 18.47);  // 0.999 quantile, 4 degrees of freedom
}

TEST(MakeTrials, DeterministicAndPrefixStable) {
  const auto a = make_trials(store(), all_objects(), 4, 50, 8);
  const auto b = make_trials(store(), all_objects(), 4, 80, 8);
  const auto c = make_trials(store(), all_objects(), 4, 50, 9);
  bool differs = false;
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(a[i].query_episode_id, b[i].query_episode_id);
    EXPECT_EQ(a[i].candidate_episode_ids, b[i].candidate_episode_ids);
    EXPECT_EQ(a[i].true_index, b[i].true_index);
    differs |= a[i].candidate_episode_ids != c[i].candidate_episode_ids;
  }
  EXPECT_TRUE(differs);
}

TEST(MakeTrials, Errors) {
  EXPECT_THROW(make_trials(store(), {0, 1, 2}, 4, 10, 1), DatasetError);
  EXPECT_THROW(make_trials(store(), all_objects(), 0, 10, 1), InvalidArgument);
}

TEST(RankCandidates, OracleAlwaysFirst) {
  auto trials = make_trials(store(), all_objects(), 10, 300, 10);
  for (std::size_t r : rank_all(LatentOracleScorer(store()), store(), trials)) EXPECT_EQ(r, 1u);
}

TEST(RankCandidates, TiesResolvedByObjectId) {
  auto trials = make_trials(store(), all_objects(), 5, 200, 11);
  auto again = trials;
  const auto ranks = rank_all(ConstantScorer(), store(), trials);
  EXPECT_EQ(ranks, rank_all(ConstantScorer(), store(), again));
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const auto& t = trials[i];
    const auto smaller = std::count_if(t.candidate_object_ids.begin(), t.candidate_object_ids.end(),
                                       [&](std::int64_t o) { return o < t.true_object_id(); });
    EXPECT_EQ(ranks[i], static_cast<std::size_t>(smaller) + 1);
  }
}

TEST(RankCandidates, ChanceRanksUniform) {
  const std::size_t n = 10000, k = 5;
  auto trials = make_trials(store(), all_objects(), k, n, 12);
  std::vector<double> hist(k + 1, 0.0);
  for (std::size_t r : rank_all(ChanceScorer(13), store(), trials)) hist[r] += 1.0;
  double chi2 = 0.0;
  for (std::size_t r = 1; r <= k; ++r) chi2 += (hist[r] - n / 5.0) * (hist[r] - n / 5.0) / (n / 5.0);
  EXPECT_LT(chi2, 18.47);
}

TEST(RankCandidates, InvariantUnderIncreasingTransform) {
  auto a = make_trials(store(), all_objects(), 6, 500, 14);
  auto b = a;
  const ChanceScorer chance(15);
  EXPECT_EQ(rank_all(chance, store(), a), rank_all(CubedScorer(chance), store(), b));
}

TEST(RankCandidates, NonFiniteConfidenceNamesTrial) {
  auto trials = make_trials(store(), all_objects(), 5, 20, 16);
  const std::int64_t bad = trials[3].candidate_episode_ids[0];
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& ids = trials[i].candidate_episode_ids;
    ASSERT_EQ(std::count(ids.begin(), ids.end(), bad), 0) << "pick a different seed";
  }
  try {
    rank_all(PoisonScorer(bad), store(), trials);
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("trial 3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("poison"), std::string::npos) << e.what();
  }
}

TEST(CumulativeAccuracy, ShapeAndChanceLine) {
  for (std::size_t k : {5u, 10u}) {
    auto trials = make_trials(store(), all_objects(), k, 10000, 17 + k);
    const auto curve = cumulative_accuracy(rank_all(ChanceScorer(k), store(), trials), k);
    ASSERT_EQ(curve.size(), k);
    EXPECT_EQ(curve.back(), 1.0);
    for (std::size_t n = 1; n <= k; ++n) {
      if (n > 1) EXPECT_GE(curve[n - 1], curve[n - 2]);
      EXPECT_NEAR(curve[n - 1], static_cast<double>(n) / static_cast<double>(k), 0.03);
    }
  }
}

TEST(CumulativeAccuracy, HandWorkedExample) {
  const auto curve = cumulative_accuracy({1, 3, 1, 2}, 4);
  EXPECT_EQ(curve, (std::vector<double>{0.5, 0.75, 1.0, 1.0}));
  EXPECT_THROW(cumulative_accuracy({0}, 3), InvalidArgument);
  EXPECT_THROW(cumulative_accuracy({4}, 3), InvalidArgument);
  EXPECT_THROW(cumulative_accuracy({}, 3), InvalidArgument);
}

TEST(FirstShot, OracleDiagonal) {
  auto trials = make_trials(store(), all_objects(), 5, 600, 20);
  const auto table = first_shot_by_object(LatentOracleScorer(store()), store(), trials);
  EXPECT_EQ(table.per_object.size(), 12u);
  for (const auto& [o, a] : table.per_object) EXPECT_EQ(a.accuracy(), 1.0);
  for (const auto& [key, count] : table.confusion) EXPECT_EQ(key.first, key.second);
  EXPECT_EQ(table.mean_accuracy(all_objects()), 1.0);
}

TEST(FirstShot, ConfusionRowsConserveTrials) {
  auto trials = make_trials(store(), all_objects(), 5, 2000, 21);
  const auto table = first_shot_by_object(ChanceScorer(22), store(), trials);
  std::map<std::int64_t, std::size_t> row_sum;
  std::size_t total = 0;
  for (const auto& [key, count] : table.confusion) {
    row_sum[key.first] += count;
    total += count;
  }
  EXPECT_EQ(total, 2000u);
  for (const auto& [o, a] : table.per_object) {
    EXPECT_EQ(row_sum[o], a.trials);
    EXPECT_EQ(table.confusion.contains({o, o}) ? table.confusion.at({o, o}) : 0u, a.correct);
  }
}

TEST(FirstShot, MeanOverSubset) {
  FirstShotTable t;
  t.per_object[1] = {1, 2};
  t.per_object[2] = {3, 3};
  t.per_object[3] = {0, 4};
  EXPECT_DOUBLE_EQ(t.mean_accuracy({1, 2}), 0.75);
  EXPECT_DOUBLE_EQ(t.mean_accuracy({3, 9}), 0.0);
  EXPECT_DOUBLE_EQ(t.mean_accuracy({1, 2, 3}), 0.5);
}

TEST(Csv, Emitters) {
  EXPECT_EQ(curve_csv_header(), "guess_index,accuracy,scorer,K\n");
  EXPECT_EQ(curve_csv_rows({0.5, 1.0}, "cca", 2), "1,0.5,cca,2\n2,1,cca,2\n");
  FirstShotTable t;
  t.per_object[4] = {1, 2};
  t.confusion[{4, 4}] = 1;
  t.confusion[{4, 7}] = 1;
  SplitManifest split;
  split.test_object_ids = {4};
  EXPECT_EQ(per_object_csv_rows(t, split, "chance", "test"), "4,test,0.5,2,chance,test\n");
  EXPECT_EQ(confusion_csv_rows(t, "chance", "all"), "4,4,1,chance,all\n4,7,1,chance,all\n");
}

TEST(Scorers, CachedAndFreshAgree) {
  const EncoderConfig cfg = touchmatch::testing::tiny_encoder();
  const auto params = init_model(cfg, 23);
  const MatchnetScorer net(params, store());
  CcaOptions opt;
  opt.pca_dims = 8;
  opt.canonical_dims = 3;
  const auto pairs = build_pairs(store(), all_objects(), 4, 4, 24);
  const CcaScorer cca(fit_cca_baseline(store(), pairs, opt), store());
  for (std::int64_t i : {0, 17, 40}) {
    const Episode& t = store().episode(i);
    const Episode& v = store().episode(71 - i);
    const Episode tc = t, vc = v;
    EXPECT_NEAR(net.score(t, v), net.score(tc, vc), 1e-12);
    EXPECT_NEAR(cca.score(t, v), cca.score(tc, vc), 1e-9);
    EXPECT_LE(net.score(t, v), 0.0);
  }
  EXPECT_DOUBLE_EQ(std::exp(net.threshold()), 0.5);
}

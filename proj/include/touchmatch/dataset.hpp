#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "touchmatch/error.hpp"
#include "touchmatch/rng.hpp"
#include "touchmatch/world.hpp"

namespace touchmatch {

using ObjectSet = std::set<std::int64_t>;

/// Episodes indexed densely by id, plus the object -> episodes index and the
/// ground-truth object specs (used only by the latent-oracle scorer).
class EpisodeStore {
 public:
  void add_object(const ObjectSpec& spec) {
    if (objects_.contains(spec.object_id)) {
      throw DatasetError("duplicate object id " + std::to_string(spec.object_id));
    }
    objects_.emplace(spec.object_id, spec);
    by_object_.try_emplace(spec.object_id);
  }

  void add_episode(Episode ep) {
    if (ep.episode_id != static_cast<std::int64_t>(episodes_.size())) {
      throw DatasetError("episode ids must be dense: expected " + std::to_string(episodes_.size()) + ", got " +
                         std::to_string(ep.episode_id));
    }
    if (!ep.success) throw DatasetError("refusing to store failed grasp episode " + std::to_string(ep.episode_id));
    if (!objects_.contains(ep.object_id)) {
      throw DatasetError("episode " + std::to_string(ep.episode_id) + " references unknown object " +
                         std::to_string(ep.object_id));
    }
    by_object_[ep.object_id].push_back(ep.episode_id);
    episodes_.push_back(std::move(ep));
  }

  std::size_t size() const noexcept { return episodes_.size(); }
  std::size_t object_count() const noexcept { return objects_.size(); }

  const Episode& episode(std::int64_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= episodes_.size()) {
      throw DatasetError("unknown episode id " + std::to_string(id));
    }
    return episodes_[static_cast<std::size_t>(id)];
  }

  const std::vector<Episode>& episodes() const noexcept { return episodes_; }

  const std::vector<std::int64_t>& episodes_of(std::int64_t object_id) const {
    auto it = by_object_.find(object_id);
    if (it == by_object_.end()) throw DatasetError("unknown object id " + std::to_string(object_id));
    return it->second;
  }

  const ObjectSpec& object(std::int64_t object_id) const {
    auto it = objects_.find(object_id);
    if (it == objects_.end()) throw DatasetError("unknown object id " + std::to_string(object_id));
    return it->second;
  }

  std::vector<std::int64_t> object_ids() const {
    std::vector<std::int64_t> ids;
    for (const auto& [id, _] : objects_) ids.push_back(id);
    return ids;
  }

 private:
  std::vector<Episode> episodes_;
  std::map<std::int64_t, std::vector<std::int64_t>> by_object_;
  std::map<std::int64_t, ObjectSpec> objects_;
};

/// Samples n_objects objects and collects episodes_per_object successful
/// episodes for each. Object o draws from streams derived from (seed, o), so
/// the store does not depend on generation order. An object that yields a
/// degenerate-object error (too small to grasp) is replaced by the next spec
/// from its stream, up to `max_redraws` times.
inline EpisodeStore generate_store(std::size_t n_objects, std::size_t episodes_per_object, const WorldConfig& cfg,
                                   std::uint64_t seed, std::size_t max_redraws = 16) {
  EpisodeStore store;
  std::int64_t next_episode = 0;
  for (std::size_t o = 0; o < n_objects; ++o) {
    const std::uint64_t object_seed = derive_seed(derive_seed(seed, "object"), o);
    Rng spec_rng(derive_seed(object_seed, "spec"));
    for (std::size_t draw = 0;; ++draw) {
      const ObjectSpec spec = sample_object(spec_rng, static_cast<std::int64_t>(o));
      std::vector<Episode> episodes;
      try {
        for (std::size_t e = 0; e < episodes_per_object; ++e) {
          Rng ep_rng(derive_seed(derive_seed(derive_seed(object_seed, "episode"), draw), e));
          episodes.push_back(collect_episode(spec, ep_rng, next_episode + static_cast<std::int64_t>(e), cfg));
        }
      } catch (const DegenerateObjectError& err) {
        if (draw + 1 >= max_redraws) throw;
        continue;
      }
      store.add_object(spec);
      for (Episode& ep : episodes) store.add_episode(std::move(ep));
      next_episode += static_cast<std::int64_t>(episodes_per_object);
      break;
    }
  }
  return store;
}

struct SplitManifest {
  ObjectSet train_object_ids;
  ObjectSet test_object_ids;
  std::uint64_t seed = 0;

  ObjectSet all() const {
    ObjectSet s = train_object_ids;
    s.insert(test_object_ids.begin(), test_object_ids.end());
    return s;
  }
  bool is_test(std::int64_t object_id) const { return test_object_ids.contains(object_id); }

  friend bool operator==(const SplitManifest&, const SplitManifest&) = default;
};

/// Uniform random partition with |test| = round(n * test_fraction), clamped so
/// each side keeps at least two objects.
inline SplitManifest split_objects(const std::vector<std::int64_t>& object_ids, double test_fraction,
                                   std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw InvalidArgument("split_objects: test_fraction must be in (0, 1), got " + std::to_string(test_fraction));
  }
  const std::size_t n = object_ids.size();
  if (n < 4) {
    throw DatasetError("split_objects: need at least 4 objects for two per side, got " + std::to_string(n));
  }
  auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
  n_test = std::clamp<std::size_t>(n_test, 2, n - 2);

  std::vector<std::int64_t> ids = object_ids;
  std::sort(ids.begin(), ids.end());
  Rng rng(seed);
  rng.shuffle(ids);
  SplitManifest m;
  m.seed = seed;
  m.test_object_ids.insert(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_test));
  m.train_object_ids.insert(ids.begin() + static_cast<std::ptrdiff_t>(n_test), ids.end());
  return m;
}

inline SplitManifest split_objects(std::size_t n_objects, double test_fraction, std::uint64_t seed) {
  std::vector<std::int64_t> ids(n_objects);
  for (std::size_t i = 0; i < n_objects; ++i) ids[i] = static_cast<std::int64_t>(i);
  return split_objects(ids, test_fraction, seed);
}

struct PairExample {
  std::int64_t tactile_episode_id = 0;
  std::int64_t visual_episode_id = 0;
  int label = 0;  // 1 iff both episodes come from the same object
  std::int64_t tactile_object_id = 0;
  std::int64_t visual_object_id = 0;

  friend bool operator==(const PairExample&, const PairExample&) = default;
};

/// Pairs every tactile reading on one side of the split with `pos_per_tactile`
/// same-object images (self-pairing allowed) and `neg_per_tactile` images of
/// other objects on the same side. Negatives pick the distractor object first,
/// then one of its episodes. Objects contribute equally many tactile readings:
/// when episode counts differ, each object uses a random subset of the
/// smallest count.
inline std::vector<PairExample> build_pairs(const EpisodeStore& store, const ObjectSet& side,
                                            std::size_t pos_per_tactile, std::size_t neg_per_tactile,
                                            std::uint64_t seed) {
  const std::vector<std::int64_t> objects(side.begin(), side.end());
  if (objects.size() < 2) {
    throw DatasetError("build_pairs: need at least 2 objects on the split side, got " +
                       std::to_string(objects.size()));
  }
  std::size_t per_object = std::numeric_limits<std::size_t>::max();
  for (std::int64_t o : objects) {
    const std::size_t count = store.episodes_of(o).size();
    if (count < 2) {
      throw DatasetError("build_pairs: under-populated object " + std::to_string(o) + " has " +
                         std::to_string(count) + " episode(s), need at least 2");
    }
    per_object = std::min(per_object, count);
  }

  Rng rng(seed);
  std::vector<PairExample> pairs;
  pairs.reserve(objects.size() * per_object * (pos_per_tactile + neg_per_tactile));
  for (std::size_t oi = 0; oi < objects.size(); ++oi) {
    const std::int64_t object = objects[oi];
    std::vector<std::int64_t> tactile = store.episodes_of(object);
    if (tactile.size() > per_object) {
      rng.shuffle(tactile);
      tactile.resize(per_object);
      std::sort(tactile.begin(), tactile.end());
    }
    const auto& same = store.episodes_of(object);
    for (std::int64_t t : tactile) {
      for (std::size_t k = 0; k < pos_per_tactile; ++k) {
        const std::int64_t v = same[rng.below(same.size())];
        pairs.push_back({t, v, 1, object, object});
      }
      for (std::size_t k = 0; k < neg_per_tactile; ++k) {
        std::size_t other = rng.below(objects.size() - 1);
        if (other >= oi) ++other;
        const auto& eps = store.episodes_of(objects[other]);
        pairs.push_back({t, eps[rng.below(eps.size())], 0, object, objects[other]});
      }
    }
  }
  rng.shuffle(pairs);
  return pairs;
}

struct DatasetSummary {
  std::size_t total = 0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  double label_ratio = 0.0;  // positives / total
  std::map<std::int64_t, std::size_t> tactile_usage;  // pairs per tactile object
  std::map<std::int64_t, std::size_t> visual_usage;   // pairs per visual object
};

inline DatasetSummary dataset_summary(const std::vector<PairExample>& pairs) {
  DatasetSummary s;
  s.total = pairs.size();
  for (const auto& p : pairs) {
    (p.label == 1 ? s.positives : s.negatives) += 1;
    s.tactile_usage[p.tactile_object_id] += 1;
    s.visual_usage[p.visual_object_id] += 1;
  }
  s.label_ratio = s.total == 0 ? 0.0 : static_cast<double>(s.positives) / static_cast<double>(s.total);
  return s;
}

}  // namespace touchmatch

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "touchmatch/cca.hpp"
#include "touchmatch/error.hpp"
#include "touchmatch/io.hpp"
#include "touchmatch/matchnet.hpp"
#include "touchmatch/rng.hpp"
#include "touchmatch/world.hpp"

namespace touchmatch {

/// Everything a pipeline run depends on. Serialized as flat `key = value`
/// lines; `#` starts a comment.
struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::filesystem::path out_dir = "run";

  std::size_t n_objects = 62;
  std::size_t episodes_per_object = 20;
  WorldConfig world;

  double test_fraction = 12.0 / 62.0;
  std::size_t pos_per_tactile = 4;
  std::size_t neg_per_tactile = 4;

  EncoderConfig encoder;
  TrainConfig train;

  CcaOptions cca;

  std::vector<std::size_t> eval_k = {5, 10};
  std::size_t eval_trials = 2000;
  std::size_t first_shot_k = 5;

  std::uint64_t master_seed() const {
    if (!seed) throw ConfigError("seed is mandatory: set `seed` in the config or pass --seed");
    return *seed;
  }

  /// Named stage seed, e.g. sub_seed("world").
  std::uint64_t sub_seed(std::string_view stage) const { return derive_seed(master_seed(), stage); }

  void validate() const;
  std::string to_text() const;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::size_t> parse_list(const std::string& v, const std::string& key) {
  std::vector<std::size_t> out;
  std::istringstream in(v);
  for (std::string tok; std::getline(in, tok, ',');) {
    tok = trim(tok);
    if (tok.empty()) throw ConfigError(key + ": empty list element");
    try {
      out.push_back(io::parse_int<std::size_t>(tok, key));
    } catch (const IoError&) {
      throw ConfigError(key + ": '" + tok + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline std::size_t to_count(const std::string& key, const std::string& v) {
  try {
    return io::parse_int<std::size_t>(v, key);
  } catch (const IoError&) {
    throw ConfigError(key + ": '" + v + "' is not a non-negative integer");
  }
}

inline double to_real(const std::string& key, const std::string& v) {
  try {
    return io::parse_double(v, key);
  } catch (const IoError&) {
    throw ConfigError(key + ": '" + v + "' is not a number");
  }
}

#define TOUCHMATCH_COUNT(key, member) \
  {key, {[](RunConfig& c, const std::string& v) { c.member = to_count(key, v); }, \
         [](const RunConfig& c) { return std::to_string(c.member); }}}
#define TOUCHMATCH_REAL(key, member) \
  {key, {[](RunConfig& c, const std::string& v) { c.member = to_real(key, v); }, \
         [](const RunConfig& c) { return io::format_double(c.member); }}}

/// The schema: every accepted key, in the order written by to_text.
inline const std::vector<std::pair<std::string, Field>>& schema() {
  static const std::vector<std::pair<std::string, Field>> fields = {
      {"seed",
       {[](RunConfig& c, const std::string& v) {
          try {
            c.seed = io::parse_int<std::uint64_t>(v, "seed");
          } catch (const IoError&) {
            throw ConfigError("seed: '" + v + "' is not an unsigned 64-bit integer");
          }
        },
        [](const RunConfig& c) { return c.seed ? std::to_string(*c.seed) : std::string(); }}},
      {"out", {[](RunConfig& c, const std::string& v) { c.out_dir = v; },
               [](const RunConfig& c) { return c.out_dir.string(); }}},
      TOUCHMATCH_COUNT("world.n_objects", n_objects),
      TOUCHMATCH_COUNT("world.episodes_per_object", episodes_per_object),
      TOUCHMATCH_COUNT("world.resolution", world.resolution),
      TOUCHMATCH_REAL("world.pixel_noise", world.pixel_noise),
      TOUCHMATCH_REAL("world.jitter_px", world.jitter_px),
      TOUCHMATCH_REAL("world.brightness_jitter", world.brightness_jitter),
      TOUCHMATCH_REAL("world.min_force", world.min_force),
      TOUCHMATCH_COUNT("world.max_grasp_attempts", world.max_grasp_attempts),
      TOUCHMATCH_REAL("world.pad_half_width", world.pad_half_width),
      TOUCHMATCH_REAL("split.test_fraction", test_fraction),
      TOUCHMATCH_COUNT("pairs.pos_per_tactile", pos_per_tactile),
      TOUCHMATCH_COUNT("pairs.neg_per_tactile", neg_per_tactile),
      {"model.channels", {[](RunConfig& c, const std::string& v) { c.encoder.channels = parse_list(v, "model.channels"); },
                          [](const RunConfig& c) { return join(c.encoder.channels); }}},
      TOUCHMATCH_COUNT("model.kernel", encoder.kernel),
      TOUCHMATCH_COUNT("model.stride", encoder.stride),
      TOUCHMATCH_COUNT("model.feature_dim", encoder.feature_dim),
      TOUCHMATCH_COUNT("model.hidden_dim", encoder.hidden_dim),
      TOUCHMATCH_REAL("model.dropout", encoder.dropout),
      TOUCHMATCH_REAL("train.learning_rate", train.learning_rate),
      TOUCHMATCH_COUNT("train.batch_size", train.batch_size),
      TOUCHMATCH_COUNT("train.iterations", train.iterations),
      TOUCHMATCH_COUNT("train.log_every", train.log_every),
      TOUCHMATCH_COUNT("cca.pca_dims", cca.pca_dims),
      TOUCHMATCH_COUNT("cca.canonical_dims", cca.canonical_dims),
      TOUCHMATCH_REAL("cca.ridge", cca.ridge),
      {"eval.k", {[](RunConfig& c, const std::string& v) { c.eval_k = parse_list(v, "eval.k"); },
                  [](const RunConfig& c) { return join(c.eval_k); }}},
      TOUCHMATCH_COUNT("eval.n_trials", eval_trials),
      TOUCHMATCH_COUNT("eval.first_shot_k", first_shot_k),
  };
  return fields;
}

#undef TOUCHMATCH_COUNT
#undef TOUCHMATCH_REAL

}  // namespace config_detail

inline void RunConfig::validate() const {
  auto positive = [](std::size_t v, const char* key) {
    if (v == 0) throw ConfigError(std::string(key) + " must be positive");
  };
  master_seed();
  positive(n_objects, "world.n_objects");
  positive(episodes_per_object, "world.episodes_per_object");
  positive(world.resolution, "world.resolution");
  positive(world.max_grasp_attempts, "world.max_grasp_attempts");
  if (world.resolution % 2 != 0) throw ConfigError("world.resolution must be even");
  if (!(world.pixel_noise >= 0.0) || !(world.jitter_px >= 0.0) || !(world.brightness_jitter >= 0.0) ||
      !(world.brightness_jitter < 1.0)) {
    throw ConfigError("world noise levels must be >= 0 and brightness_jitter < 1");
  }
  if (!(world.min_force >= 0.0 && world.min_force < 1.0)) throw ConfigError("world.min_force must be in [0, 1)");
  if (!(world.pad_half_width > 0.0)) throw ConfigError("world.pad_half_width must be positive");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("split.test_fraction must be in (0, 1)");
  positive(pos_per_tactile, "pairs.pos_per_tactile");
  positive(neg_per_tactile, "pairs.neg_per_tactile");
  if (pos_per_tactile != neg_per_tactile) {
    throw ConfigError("pairs.pos_per_tactile and pairs.neg_per_tactile must be equal for a balanced pair list");
  }
  if (encoder.resolution != world.resolution) {
    throw ConfigError("model input resolution " + std::to_string(encoder.resolution) +
                      " does not match world.resolution " + std::to_string(world.resolution));
  }
  try {
    encoder.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (!(train.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  positive(train.batch_size, "train.batch_size");
  positive(train.iterations, "train.iterations");
  positive(train.log_every, "train.log_every");
  positive(cca.canonical_dims, "cca.canonical_dims");
  if (cca.pca_dims < cca.canonical_dims) throw ConfigError("cca.pca_dims must be >= cca.canonical_dims");
  if (!(cca.ridge >= 0.0)) throw ConfigError("cca.ridge must be >= 0");
  for (std::size_t k : eval_k) positive(k, "eval.k");
  positive(eval_trials, "eval.n_trials");
  positive(first_shot_k, "eval.first_shot_k");
}

inline std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& [key, field] : config_detail::schema()) {
    const std::string v = field.get(*this);
    if (key == "seed" && v.empty()) continue;
    s += key + " = " + v + "\n";
  }
  return s;
}

/// Applies `key = value` lines on top of `base`. Unknown keys and malformed
/// lines are config errors naming the line.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  const auto& fields = config_detail::schema();
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.first == key; });
    if (it == fields.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (value.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty value for '" + key + "'");
    it->second.set(base, value);
  }
  base.encoder.resolution = base.world.resolution;
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) { return parse_config(io::read_file(path)); }

}  // namespace touchmatch

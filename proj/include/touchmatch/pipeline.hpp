#pragma once

#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "touchmatch/cca.hpp"
#include "touchmatch/config.hpp"
#include "touchmatch/dataset.hpp"
#include "touchmatch/eval.hpp"
#include "touchmatch/io.hpp"
#include "touchmatch/matchnet.hpp"

namespace touchmatch {

namespace fs = std::filesystem;

/// File layout of one run below the output directory.
struct RunPaths {
  fs::path root;

  fs::path config() const { return root / "config.txt"; }
  fs::path episodes_manifest() const { return root / "data" / "episodes.manifest"; }
  fs::path episodes_blob() const { return root / "data" / "episodes.bin"; }
  fs::path split() const { return root / "data" / "split.manifest"; }
  fs::path train_pairs() const { return root / "data" / "pairs_train.csv"; }
  fs::path test_pairs() const { return root / "data" / "pairs_test.csv"; }
  fs::path checkpoint_header() const { return root / "model" / "matchnet.header"; }
  fs::path checkpoint_blob() const { return root / "model" / "matchnet.bin"; }
  fs::path loss_csv() const { return root / "model" / "loss.csv"; }
  fs::path cca_header() const { return root / "model" / "cca.header"; }
  fs::path cca_blob() const { return root / "model" / "cca.bin"; }
  fs::path metrics_dir() const { return root / "metrics"; }
  fs::path summary() const { return metrics_dir() / "summary.txt"; }
  fs::path pair_accuracy_csv() const { return metrics_dir() / "pair_accuracy.csv"; }
  fs::path curves_csv() const { return metrics_dir() / "curves.csv"; }
  fs::path per_object_csv() const { return metrics_dir() / "per_object.csv"; }
  fs::path confusion_csv() const { return metrics_dir() / "confusion.csv"; }
  fs::path report_txt() const { return root / "report" / "report.txt"; }
  fs::path report_csv() const { return root / "report" / "report.csv"; }
};

/// Blob path that accompanies an archive header (x.header -> x.bin).
inline fs::path blob_for(const fs::path& header) {
  fs::path p = header;
  p.replace_extension(".bin");
  return p;
}

namespace pipeline_detail {

inline void log_line(std::ostream* log, const std::string& msg) {
  if (log) *log << msg << '\n' << std::flush;
}

inline void record_config(const RunConfig& cfg) {
  io::write_file_atomic(RunPaths{cfg.out_dir}.config(), cfg.to_text());
}

inline EpisodeStore load_store(const RunPaths& p) {
  io::require_file(p.episodes_manifest(), "gen-data");
  io::require_file(p.episodes_blob(), "gen-data");
  return io::load_store(p.episodes_manifest(), p.episodes_blob());
}

inline std::vector<PairExample> load_pairs(const fs::path& path, const EpisodeStore& store) {
  io::require_file(path, "build-pairs");
  return io::load_pairs(path, store);
}

inline SplitManifest load_split(const RunPaths& p) {
  io::require_file(p.split(), "build-pairs");
  return io::load_split(p.split());
}

}  // namespace pipeline_detail

inline void cmd_gen_data(const RunConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const RunPaths p{cfg.out_dir};
  pipeline_detail::record_config(cfg);
  const EpisodeStore store = generate_store(cfg.n_objects, cfg.episodes_per_object, cfg.world, cfg.sub_seed("world"));
  io::save_store(store, p.episodes_manifest(), p.episodes_blob());
  pipeline_detail::log_line(log, "gen-data: " + std::to_string(store.size()) + " episodes of " +
                                     std::to_string(store.object_count()) + " objects -> " +
                                     p.episodes_manifest().string());
}

inline void cmd_build_pairs(const RunConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const RunPaths p{cfg.out_dir};
  pipeline_detail::record_config(cfg);
  const EpisodeStore store = pipeline_detail::load_store(p);
  const SplitManifest split = split_objects(store.object_ids(), cfg.test_fraction, cfg.sub_seed("split"));
  const auto train = build_pairs(store, split.train_object_ids, cfg.pos_per_tactile, cfg.neg_per_tactile,
                                 cfg.sub_seed("pairs.train"));
  const auto test = build_pairs(store, split.test_object_ids, cfg.pos_per_tactile, cfg.neg_per_tactile,
                                cfg.sub_seed("pairs.test"));
  io::save_split(split, p.split());
  io::save_pairs(train, p.train_pairs());
  io::save_pairs(test, p.test_pairs());
  pipeline_detail::log_line(log, "build-pairs: " + std::to_string(split.train_object_ids.size()) + " train / " +
                                     std::to_string(split.test_object_ids.size()) + " test objects, " +
                                     std::to_string(train.size()) + " / " + std::to_string(test.size()) + " pairs");
}

inline void cmd_train(const RunConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const RunPaths p{cfg.out_dir};
  pipeline_detail::record_config(cfg);
  const EpisodeStore store = pipeline_detail::load_store(p);
  const auto pairs = pipeline_detail::load_pairs(p.train_pairs(), store);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.sub_seed("train");
  const TrainResult result = train(store, pairs, tc, cfg.encoder, [&](std::size_t it, double loss) {
    pipeline_detail::log_line(log, "train: iteration " + std::to_string(it) + " loss " + io::format_double(loss));
  });
  std::string csv = "iteration,loss\n";
  for (const LossRecord& r : result.history) csv += std::to_string(r.iteration) + "," + io::format_double(r.loss) + "\n";
  io::write_file_atomic(p.loss_csv(), csv);
  save_checkpoint(result.params, p.checkpoint_header(), p.checkpoint_blob());
  pipeline_detail::log_line(log, "train: checkpoint -> " + p.checkpoint_header().string());
}

inline void cmd_baseline(const RunConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const RunPaths p{cfg.out_dir};
  pipeline_detail::record_config(cfg);
  const EpisodeStore store = pipeline_detail::load_store(p);
  const auto pairs = pipeline_detail::load_pairs(p.train_pairs(), store);
  const CcaModel model = fit_cca_baseline(store, pairs, cfg.cca);
  save_cca(model, p.cca_header(), p.cca_blob());
  pipeline_detail::log_line(log, "baseline: rho_1 " + io::format_double(model.rho[0]) + ", threshold " +
                                     io::format_double(model.threshold) + " -> " + p.cca_header().string());
}

/// Artifact locations for cmd_eval; empty paths mean the run's defaults.
struct EvalInputs {
  fs::path checkpoint_header;
  fs::path cca_header;
};

/// Metrics for every scorer: pair accuracy on the held-out pairs, K-shot
/// curves on held-out objects, and first-shot tables over the held-out pool
/// and over the pool of all objects.
inline void cmd_eval(const RunConfig& cfg, const EvalInputs& inputs = {}, std::ostream* log = nullptr) {
  cfg.validate();
  const RunPaths p{cfg.out_dir};
  pipeline_detail::record_config(cfg);
  const EpisodeStore store = pipeline_detail::load_store(p);
  const SplitManifest split = pipeline_detail::load_split(p);
  const auto test_pairs = pipeline_detail::load_pairs(p.test_pairs(), store);

  const fs::path ckpt = inputs.checkpoint_header.empty() ? p.checkpoint_header() : inputs.checkpoint_header;
  const fs::path cca = inputs.cca_header.empty() ? p.cca_header() : inputs.cca_header;
  io::require_file(ckpt, "train");
  io::require_file(blob_for(ckpt), "train");
  io::require_file(cca, "baseline");
  io::require_file(blob_for(cca), "baseline");

  const MatchnetScorer matchnet(load_checkpoint(ckpt, blob_for(ckpt)), store);
  const CcaScorer cca_scorer(load_cca(cca, blob_for(cca)), store);
  const ChanceScorer chance(cfg.sub_seed("eval.chance"));
  const LatentOracleScorer oracle(store);
  const std::vector<const Scorer*> scorers = {&matchnet, &cca_scorer, &chance, &oracle};

  std::ostringstream summary;
  summary << "test_pairs = " << test_pairs.size() << '\n'
          << "trials = " << cfg.eval_trials << '\n';

  std::string pair_csv = "scorer,accuracy,n_pairs,threshold\n";
  for (const Scorer* s : scorers) {
    const double acc = pair_accuracy(*s, store, test_pairs);
    pair_csv += s->name() + "," + io::format_double(acc) + "," + std::to_string(test_pairs.size()) + "," +
                io::format_double(s->threshold()) + "\n";
    summary << "pair_accuracy." << s->name() << " = " << io::format_double(acc) << '\n';
    pipeline_detail::log_line(log, "eval: pair accuracy " + s->name() + " " + io::format_double(acc));
  }

  std::string curves = curve_csv_header();
  for (std::size_t k : cfg.eval_k) {
    const auto base = make_trials(store, split.test_object_ids, k, cfg.eval_trials,
                                  cfg.sub_seed("eval.trials.K" + std::to_string(k)));
    for (const Scorer* s : scorers) {
      auto trials = base;
      const auto curve = cumulative_accuracy(rank_all(*s, store, trials), k);
      curves += curve_csv_rows(curve, s->name(), k);
      summary << "first_guess.K" << k << '.' << s->name() << " = " << io::format_double(curve[0]) << '\n';
    }
  }

  std::string per_object = per_object_csv_header();
  std::string confusion = confusion_csv_header();
  const std::vector<std::pair<std::string, ObjectSet>> pools = {{"test", split.test_object_ids}, {"all", split.all()}};
  for (const auto& [pool, objects] : pools) {
    const auto base = make_trials(store, objects, cfg.first_shot_k, cfg.eval_trials, cfg.sub_seed("eval.first_shot." + pool));
    for (const Scorer* s : scorers) {
      auto trials = base;
      const FirstShotTable table = first_shot_by_object(*s, store, trials);
      per_object += per_object_csv_rows(table, split, s->name(), pool);
      confusion += confusion_csv_rows(table, s->name(), pool);
      summary << "per_object_mean." << pool << ".test." << s->name() << " = "
              << io::format_double(table.mean_accuracy(split.test_object_ids)) << '\n';
      if (pool == "all") {
        summary << "per_object_mean." << pool << ".train." << s->name() << " = "
                << io::format_double(table.mean_accuracy(split.train_object_ids)) << '\n';
      }
    }
  }

  io::write_file_atomic(p.pair_accuracy_csv(), pair_csv);
  io::write_file_atomic(p.curves_csv(), curves);
  io::write_file_atomic(p.per_object_csv(), per_object);
  io::write_file_atomic(p.confusion_csv(), confusion);
  io::write_file_atomic(p.summary(), summary.str());
  pipeline_detail::log_line(log, "eval: metrics -> " + p.metrics_dir().string());
}

/// Parsed `key = value` metrics summary.
inline std::map<std::string, std::string> read_summary(const fs::path& path) {
  io::require_file(path, "eval");
  std::map<std::string, std::string> out;
  for (const std::string& line : io::lines_of(io::read_file(path))) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    out[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

struct CurveRow {
  std::size_t guess_index;
  double accuracy;
  std::string scorer;
  std::size_t k;
};

inline std::vector<CurveRow> read_curves(const fs::path& path) {
  io::require_file(path, "eval");
  std::vector<CurveRow> rows;
  const auto lines = io::lines_of(io::read_file(path));
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> f;
    std::istringstream in(lines[i]);
    for (std::string tok; std::getline(in, tok, ',');) f.push_back(tok);
    if (f.size() != 4) throw IoError(path.string() + ": malformed row " + std::to_string(i + 1));
    rows.push_back({io::parse_int<std::size_t>(f[0], "guess_index"), io::parse_double(f[1], "accuracy"), f[2],
                    io::parse_int<std::size_t>(f[3], "K")});
  }
  return rows;
}

/// Text and CSV report comparing the scorers, built from a metrics directory.
inline void cmd_report(const fs::path& metrics_dir, const fs::path& report_dir, std::ostream* log = nullptr) {
  const auto summary = read_summary(metrics_dir / "summary.txt");
  const auto curves = read_curves(metrics_dir / "curves.csv");
  const std::vector<std::string> scorers = {"matchnet", "cca", "chance", "oracle"};
  auto get = [&](const std::string& key) {
    auto it = summary.find(key);
    return it == summary.end() ? std::string("-") : it->second;
  };
  auto pct = [](const std::string& v) {
    if (v == "-") return v;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * io::parse_double(v, "metric"));
    return std::string(buf);
  };

  std::ostringstream txt, csv;
  csv << "metric,scorer,value\n";
  txt << "Held-out pair accuracy (" << get("test_pairs") << " pairs)\n";
  for (const auto& s : scorers) {
    txt << "  " << s << std::string(10 - s.size(), ' ') << pct(get("pair_accuracy." + s)) << '\n';
    csv << "pair_accuracy," << s << ',' << get("pair_accuracy." + s) << '\n';
  }

  std::map<std::size_t, std::map<std::string, std::vector<double>>> by_k;
  for (const CurveRow& r : curves) {
    auto& v = by_k[r.k][r.scorer];
    if (v.size() < r.guess_index) v.resize(r.guess_index);
    v[r.guess_index - 1] = r.accuracy;
  }
  for (const auto& [k, rows] : by_k) {
    txt << "\nCumulative accuracy, K = " << k << " (" << get("trials") << " trials)\n  guesses ";
    for (const auto& s : scorers)
      if (rows.contains(s)) txt << ' ' << s << std::string(s.size() < 9 ? 9 - s.size() : 0, ' ');
    txt << " chance-line\n";
    for (std::size_t n = 1; n <= k; ++n) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "  %-7zu ", n);
      txt << buf;
      for (const auto& s : scorers) {
        auto it = rows.find(s);
        if (it == rows.end()) continue;
        std::snprintf(buf, sizeof buf, " %-9.3f", it->second.at(n - 1));
        txt << buf;
        csv << "curve.K" << k << '.' << n << ',' << s << ',' << io::format_double(it->second.at(n - 1)) << '\n';
      }
      std::snprintf(buf, sizeof buf, " %.3f\n", static_cast<double>(n) / static_cast<double>(k));
      txt << buf;
    }
  }

  txt << "\nMean per-object first-guess accuracy\n";
  for (const auto& s : scorers) {
    const std::string t = get("per_object_mean.test.test." + s), at = get("per_object_mean.all.test." + s),
                      ar = get("per_object_mean.all.train." + s);
    txt << "  " << s << std::string(10 - s.size(), ' ') << "test pool: test " << pct(t) << "  all pool: train "
        << pct(ar) << ", test " << pct(at) << '\n';
    csv << "per_object_mean.test_pool.test," << s << ',' << t << '\n'
        << "per_object_mean.all_pool.train," << s << ',' << ar << '\n'
        << "per_object_mean.all_pool.test," << s << ',' << at << '\n';
  }

  io::write_file_atomic(report_dir / "report.txt", txt.str());
  io::write_file_atomic(report_dir / "report.csv", csv.str());
  pipeline_detail::log_line(log, "report: " + (report_dir / "report.txt").string());
}

inline void cmd_report(const RunConfig& cfg, std::ostream* log = nullptr) {
  const RunPaths p{cfg.out_dir};
  cmd_report(p.metrics_dir(), p.report_txt().parent_path(), log);
}

/// gen-data, build-pairs, train, baseline, eval, report.
inline void cmd_run_all(const RunConfig& cfg, std::ostream* log = nullptr) {
  cmd_gen_data(cfg, log);
  cmd_build_pairs(cfg, log);
  cmd_train(cfg, log);
  cmd_baseline(cfg, log);
  cmd_eval(cfg, {}, log);
  cmd_report(cfg, log);
}

}  // namespace touchmatch

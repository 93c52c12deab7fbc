// Command orchestration behind the kpca_audit CLI: load dumps, run an
// analysis across a worker pool, reduce in key order, and emit CSV reports
// with a JSON sidecar.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "attention_core.hpp"
#include "gamma_audit.hpp"
#include "kernel_feature.hpp"
#include "projection_loss.hpp"
#include "random.hpp"
#include "similarity.hpp"
#include "spectral.hpp"
#include "tensor_container.hpp"

namespace kpca_audit {

inline constexpr const char* kVersion = "1.0.0";

enum class Command { Gen, Plant, Similarity, Spectrum, Projection, Gamma, Selftest };

inline const char* command_name(Command c) {
  switch (c) {
    case Command::Gen: return "gen";
    case Command::Plant: return "plant";
    case Command::Similarity: return "similarity";
    case Command::Spectrum: return "spectrum";
    case Command::Projection: return "projection";
    case Command::Gamma: return "gamma";
    case Command::Selftest: return "selftest";
  }
  return "?";
}

struct RunConfig {
  Command command = Command::Selftest;
  std::filesystem::path input_dir;
  std::filesystem::path output_path;
  bool standardize = false;
  std::optional<double> dv_scale;  ///< nullopt = auto (1/d_v per dump)
  double sigma = 0.1;
  std::uint64_t seed = 0;
  Aggregate aggregate = Aggregate::Mean;
  SynthesisConfig synthesis;  ///< used by `gen`
};

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitPartial = 2;

/// Worker count: KPCA_AUDIT_THREADS if set and positive, else hardware concurrency.
inline unsigned worker_count() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("KPCA_AUDIT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) n = static_cast<unsigned>(v);
  }
  return n;
}

/// Outcome of one work item: a value or the error message that caused a skip.
template <typename T>
struct Outcome {
  std::optional<T> value;
  std::string error;
  std::string kind;
};

inline std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const RangeError*>(&e)) return "RangeError";
  if (dynamic_cast<const FormatError*>(&e)) return "FormatError";
  if (dynamic_cast<const ValidationError*>(&e)) return "ValidationError";
  if (dynamic_cast<const NumericalError*>(&e)) return "NumericalError";
  return "Error";
}

/// Applies `fn` to every index in [0, n) on a pool of threads. Results land at
/// their own index, so the output order never depends on scheduling.
template <typename T, typename Fn>
std::vector<Outcome<T>> parallel_map(std::size_t n, Fn&& fn, unsigned threads = worker_count()) {
  std::vector<Outcome<T>> out(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        out[i].value = fn(i);
      } catch (const std::exception& e) {
        out[i].error = e.what();
        out[i].kind = error_kind(e);
      }
    }
  };
  const unsigned t = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(n, 1)));
  std::vector<std::thread> pool;
  for (unsigned k = 1; k < t; ++k) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  return out;
}

inline std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw Error("cannot open " + path.string() + " for writing");
  }
  template <typename... Cells>
  void row(const Cells&... cells) {
    bool first = true;
    ((out_ << (first ? "" : ",") << cell(cells), first = false), ...);
    out_ << "\n";
  }

 private:
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double x) { return fmt_double(x); }
  static std::string cell(bool b) { return b ? "true" : "false"; }
  template <typename I>
    requires std::is_integral_v<I>
  static std::string cell(I i) {
    return std::to_string(i);
  }
  std::ofstream out_;
};

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

inline nlohmann::json config_echo(const RunConfig& cfg) {
  nlohmann::json j;
  j["command"] = command_name(cfg.command);
  j["input"] = cfg.input_dir.string();
  j["output"] = cfg.output_path.string();
  j["standardize"] = cfg.standardize;
  j["dv_scale"] = cfg.dv_scale ? nlohmann::json(*cfg.dv_scale) : nlohmann::json("auto");
  j["sigma"] = cfg.sigma;
  j["seed"] = cfg.seed;
  j["aggregate"] = cfg.aggregate == Aggregate::Mean ? "mean" : "max";
  return j;
}

inline void write_sidecar(const RunConfig& cfg, nlohmann::json summary) {
  nlohmann::json j;
  j["tool"] = "kpca_audit";
  j["version"] = kVersion;
  j["config"] = config_echo(cfg);
  j["summary"] = std::move(summary);
  std::ofstream out(cfg.output_path.string() + ".json", std::ios::trunc);
  if (!out) throw Error("cannot write sidecar for " + cfg.output_path.string());
  out << j.dump(2) << "\n";
}

inline void report_error(std::ostream& err, const std::string& kind, const std::string& message,
                         const std::string& context = {}) {
  nlohmann::json j = {{"error", message}, {"kind", kind}};
  if (!context.empty()) j["context"] = context;
  err << j.dump() << "\n";
}

/// Reports skipped dumps on `err` and returns how many were skipped.
template <typename T>
std::size_t report_skips(std::ostream& err, const std::vector<AttentionDump>& dumps,
                         const std::vector<Outcome<T>>& outcomes) {
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (outcomes[i].value) continue;
    ++skipped;
    report_error(err, outcomes[i].kind, outcomes[i].error, "skipped " + dump_label(dumps[i]));
  }
  return skipped;
}

inline int run_gen(const RunConfig& cfg) {
  SynthesisConfig s = cfg.synthesis;
  s.seed = cfg.seed;
  write_dumpset(gen_synthetic(s), cfg.output_path);
  return kExitOk;
}

inline int run_plant(const RunConfig& cfg, std::ostream& err) {
  const DumpSet in = read_dumpset(cfg.input_dir);
  auto outcomes = parallel_map<AttentionDump>(in.dumps.size(), [&](std::size_t i) {
    return plant_kpca_control(in.dumps[i], cfg.standardize);
  });
  const std::size_t skipped = report_skips(err, in.dumps, outcomes);
  DumpSet out;
  out.manifest = in.manifest;
  for (auto& o : outcomes)
    if (o.value) out.dumps.push_back(std::move(*o.value));
  write_dumpset(out, cfg.output_path);
  return skipped ? kExitPartial : kExitOk;
}

inline int run_similarity(const RunConfig& cfg, std::ostream& err) {
  const DumpSet in = read_dumpset(cfg.input_dir);
  auto outcomes = parallel_map<SimilarityScores>(in.dumps.size(), [&](std::size_t i) {
    return compare(in.dumps[i], cfg.standardize);
  });
  const std::size_t skipped = report_skips(err, in.dumps, outcomes);

  std::map<std::string, std::vector<SimilarityScores>> by_model;
  for (std::size_t i = 0; i < outcomes.size(); ++i)
    if (outcomes[i].value) by_model[in.dumps[i].model_id].push_back(*outcomes[i].value);

  CsvWriter csv(cfg.output_path);
  csv.row("model_id", "n_dumps", "MDC", "MOC", "LCKA", "KCKA", "entrywise_pass_fraction");
  nlohmann::json summary = {{"n_dumps", in.dumps.size()}, {"skipped", skipped}};
  for (const auto& [model, scores] : by_model) {
    const SimilarityRow r = aggregate_scores(model, scores, cfg.aggregate);
    csv.row(r.model_id, r.n_dumps, r.mdc, r.moc, r.lcka, r.kcka, r.entrywise_pass_fraction);
  }
  write_sidecar(cfg, summary);
  return skipped ? kExitPartial : kExitOk;
}

inline int run_spectrum(const RunConfig& cfg, std::ostream& err) {
  const DumpSet in = read_dumpset(cfg.input_dir);
  auto outcomes = parallel_map<Vector>(in.dumps.size(), [&](std::size_t i) {
    try {
      return eigh(gram(in.dumps[i].K, cfg.standardize).K_tilde).eigenvalues;
    } catch (const RangeError& e) {
      throw RangeError(dump_label(in.dumps[i]) + ": " + e.what(), e.exponent());
    }
  });
  std::size_t skipped = report_skips(err, in.dumps, outcomes);

  std::map<std::string, std::map<std::string, std::vector<Vector>>> grouped;
  for (std::size_t i = 0; i < outcomes.size(); ++i)
    if (outcomes[i].value) grouped[in.dumps[i].model_id][in.dumps[i].sample_id].push_back(*outcomes[i].value);

  CsvWriter csv(cfg.output_path);
  csv.row("model_id", "standardized", "max", "max_std", "min", "min_std", "mean", "mean_std", "median",
          "median_std", "n_samples");
  for (const auto& [model, samples] : grouped) {
    std::vector<RankStats> per_sample;
    for (const auto& [sample, spectra] : samples) {
      try {
        per_sample.push_back(rank_stats(spectra));
      } catch (const ValidationError& e) {
        report_error(err, "ValidationError", e.what(), "skipped sample " + model + "/" + sample);
        ++skipped;
      }
    }
    if (per_sample.empty()) continue;
    const EigStatSummary s = summarize_samples(per_sample);
    csv.row(model, cfg.standardize, s.max.mean, s.max.std, s.min.mean, s.min.std, s.mean.mean, s.mean.std,
            s.median.mean, s.median.std, s.n_samples);
  }
  write_sidecar(cfg, {{"n_dumps", in.dumps.size()}, {"skipped", skipped}});
  return skipped ? kExitPartial : kExitOk;
}

inline int run_projection(const RunConfig& cfg, std::ostream& err) {
  const DumpSet in = read_dumpset(cfg.input_dir);
  auto outcomes = parallel_map<ProjStats>(in.dumps.size(), [&](std::size_t i) {
    return j_mae(in.dumps[i], cfg.dv_scale);
  });
  const std::size_t skipped = report_skips(err, in.dumps, outcomes);

  std::vector<AttentionDump> kept;
  std::vector<ProjStats> stats;
  for (std::size_t i = 0; i < outcomes.size(); ++i)
    if (outcomes[i].value) {
      kept.push_back(in.dumps[i]);
      stats.push_back(*outcomes[i].value);
    }

  CsvWriter csv(cfg.output_path);
  csv.row("model_id", "layer", "norm_family", "median", "p2_5", "p97_5", "n_values");
  for (const auto& r : norm_series_from(kept, stats))
    csv.row(r.model_id, r.layer, r.norm_family, r.median, r.p2_5, r.p97_5, r.n_values);

  // Per-model J_proj, weighting every dump (head) equally.
  std::map<std::string, std::vector<const ProjStats*>> by_model;
  for (std::size_t i = 0; i < kept.size(); ++i) by_model[kept[i].model_id].push_back(&stats[i]);
  nlohmann::json models = nlohmann::json::object();
  for (const auto& [model, list] : by_model) {
    double mae = 0, sgn = 0, rphi = 0, rh = 0;
    for (const auto* s : list) {
      mae += s->j_mae;
      sgn += s->j_signed;
      rphi += s->rel_err_phi;
      rh += s->rel_err_h;
    }
    const auto n = static_cast<double>(list.size());
    models[model] = {{"n_dumps", list.size()}, {"j_mae", mae / n}, {"j_signed", sgn / n},
                     {"rel_err_phi", rphi / n}, {"rel_err_h", std::isfinite(rh) ? nlohmann::json(rh / n) : nlohmann::json(nullptr)}};
  }
  write_sidecar(cfg, {{"n_dumps", in.dumps.size()}, {"skipped", skipped}, {"models", models}});
  return skipped ? kExitPartial : kExitOk;
}

inline int run_gamma(const RunConfig& cfg, std::ostream& err) {
  const DumpSet in = read_dumpset(cfg.input_dir);
  auto outcomes = parallel_map<GammaComparison>(in.dumps.size(), [&](std::size_t i) {
    const auto& d = in.dumps[i];
    const GramBundle b = gram(d.K, cfg.standardize);
    const Spectrum sp = eigh(b.K_tilde);
    const std::uint64_t seed =
        stream_seed(cfg.seed, fnv1a(d.model_id), fnv1a(d.sample_id), static_cast<std::uint64_t>(d.layer),
                    static_cast<std::uint64_t>(d.head));
    return gamma_comparison(b.K_tilde, sp.A, cfg.sigma, seed);
  });
  const std::size_t skipped = report_skips(err, in.dumps, outcomes);

  CsvWriter csv(cfg.output_path);
  csv.row("model_id", "sample_id", "layer", "head", "eigen_rank", "eigenvalue", "mean_abs_diff", "std_abs_diff",
          "mean_rel_diff", "masked_count", "source");
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (!outcomes[i].value) continue;
    const auto& d = in.dumps[i];
    for (const auto& [rows, source] :
         {std::pair{&outcomes[i].value->true_rows, "true"}, std::pair{&outcomes[i].value->perturbed_rows, "perturbed"}})
      for (const auto& r : *rows)
        csv.row(d.model_id, d.sample_id, d.layer, d.head, r.eigen_rank, r.eigenvalue, r.stats.mean_abs_diff,
                r.stats.std_abs_diff, r.stats.mean_rel_diff, r.stats.masked_count, source);
  }
  write_sidecar(cfg, {{"n_dumps", in.dumps.size()}, {"skipped", skipped}});
  return skipped ? kExitPartial : kExitOk;
}

}  // namespace detail

struct SelftestCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Fixed internal suite: LAP against brute force, eigensolver residuals, the
/// two-eigenvector assignment-sensitivity witness, and the orthonormal reduction.
inline std::vector<SelftestCheck> run_selftest_checks(std::uint64_t seed = 7) {
  std::vector<SelftestCheck> checks;
  Rng rng(seed);

  {
    int failures = 0;
    const int trials = 100;
    for (int t = 0; t < trials; ++t) {
      const std::size_t n = 6;
      Matrix c = rng.normal_matrix(n, n);
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      double best = INFINITY;
      do {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += c(i, perm[i]);
        best = std::min(best, s);
      } while (std::next_permutation(perm.begin(), perm.end()));
      if (std::abs(lap_solve(c).total_cost - best) > 1e-12 * std::max(1.0, std::abs(best))) ++failures;
    }
    checks.push_back({"lap_bruteforce_6x6", failures == 0, std::to_string(trials - failures) + "/" +
                                                               std::to_string(trials) + " optimal"});
  }
  {
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
      const Matrix B = rng.normal_matrix(16, 16);
      const Spectrum s = eigh(B.transpose() * B);
      worst = std::max(worst, max_abs(s.residuals));
    }
    checks.push_back({"eigh_residuals", worst <= 1e-8, "max residual " + fmt_double(worst)});
  }
  {
    const Vector h = {1.0, 2.0};
    const Matrix a1{{1.0, -1.0}, {1.0, 0.0}};
    const Matrix a2{{-1.0, 1.0}, {0.0, 1.0}};
    const double c1 = cross_term(h, a1), c2 = cross_term(h, a2);
    checks.push_back({"assignment_sensitivity_witness", c1 == 2.0 && c2 == 5.0,
                      "cross terms " + fmt_double(c1) + " and " + fmt_double(c2)});
  }
  {
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      const Matrix U = orthonormal_factor(rng.normal_matrix(8, 4));
      const Vector phi = rng.normal_matrix(8, 1).data();
      const Vector h = U.transpose() * std::span<const double>(phi);
      worst = std::max(worst, std::abs(j_full_toy(h, U, phi).total - (dot(phi, phi) - dot(h, h))));
    }
    checks.push_back({"orthonormal_reduction", worst <= 1e-10, "max deviation " + fmt_double(worst)});
  }
  return checks;
}

inline int run_selftest(std::ostream& out) {
  const auto checks = run_selftest_checks();
  bool ok = true;
  for (const auto& c : checks) {
    out << (c.pass ? "PASS  " : "FAIL  ") << c.name << "  (" << c.detail << ")\n";
    ok = ok && c.pass;
  }
  return ok ? kExitOk : kExitError;
}

/// Runs one command. Returns 0 on success, 2 when some dumps were skipped, and
/// 1 on a fatal error, which is also written to `err` as a JSON record.
inline int run(const RunConfig& cfg, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    if (!(cfg.sigma >= 0.0)) throw ValidationError("sigma must be >= 0");
    if (cfg.dv_scale && !(*cfg.dv_scale > 0.0)) throw ValidationError("dv-scale must be > 0 or 'auto'");
    switch (cfg.command) {
      case Command::Gen: return detail::run_gen(cfg);
      case Command::Plant: return detail::run_plant(cfg, err);
      case Command::Similarity: return detail::run_similarity(cfg, err);
      case Command::Spectrum: return detail::run_spectrum(cfg, err);
      case Command::Projection: return detail::run_projection(cfg, err);
      case Command::Gamma: return detail::run_gamma(cfg, err);
      case Command::Selftest: return run_selftest(out);
    }
  } catch (const std::exception& e) {
    detail::report_error(err, error_kind(e), e.what(), command_name(cfg.command));
  }
  return kExitError;
}

}  // namespace kpca_audit

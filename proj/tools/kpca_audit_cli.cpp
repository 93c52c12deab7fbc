// kpca_audit: command-line front end for the attention/KPCA audit pipeline.
#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "kpca_audit/report.hpp"

namespace ka = kpca_audit;

int main(int argc, char** argv) {
  CLI::App app{"Kernel-PCA audit of self-attention dumps"};
  app.require_subcommand(1);

  ka::RunConfig cfg;
  std::string dv_scale = "auto";
  std::string aggregate = "mean";

  auto* gen = app.add_subcommand("gen", "Generate a synthetic DumpSet directory");
  gen->add_option("--layers", cfg.synthesis.layers, "Layers")->check(CLI::PositiveNumber)->default_val(2);
  gen->add_option("--heads", cfg.synthesis.heads, "Heads per layer")->check(CLI::PositiveNumber)->default_val(2);
  gen->add_option("--n", cfg.synthesis.n_tokens, "Tokens per sequence")->default_val(16);
  gen->add_option("--d", cfg.synthesis.d, "Embedding dimension")->default_val(32);
  gen->add_option("--dq", cfg.synthesis.d_q, "Query/key dimension")->default_val(8);
  gen->add_option("--dv", cfg.synthesis.d_v, "Value dimension")->default_val(8);
  gen->add_option("--samples", cfg.synthesis.samples, "Samples (sequences)")->check(CLI::PositiveNumber)->default_val(1);
  gen->add_option("--seed", cfg.seed, "Random seed")->default_val(0);
  gen->add_option("--out", cfg.output_path, "Output directory")->required();

  auto* plant = app.add_subcommand("plant", "Replace V with the KPCA value matrix (positive control)");
  plant->add_option("--in", cfg.input_dir, "Input DumpSet directory")->required()->check(CLI::ExistingDirectory);
  plant->add_option("--out", cfg.output_path, "Output directory")->required();

  auto* similarity = app.add_subcommand("similarity", "MDC/MOC/LCKA/KCKA and entrywise test per model");
  similarity->add_option("--in", cfg.input_dir, "Input DumpSet directory")->required()->check(CLI::ExistingDirectory);
  similarity->add_option("--out", cfg.output_path, "Output CSV")->required();
  similarity->add_option("--aggregate", aggregate, "Per-model reduction")
      ->check(CLI::IsMember({"mean", "max"}))
      ->default_val("mean");

  auto* spectrum = app.add_subcommand("spectrum", "Rank-wise eigenvalue statistics of the centered Gram matrix");
  spectrum->add_option("--in", cfg.input_dir, "Input DumpSet directory")->required()->check(CLI::ExistingDirectory);
  spectrum->add_option("--out", cfg.output_path, "Output CSV")->required();
  spectrum->add_flag("--standardize", cfg.standardize, "z-score key dimensions first");

  auto* projection = app.add_subcommand("projection", "Feature/output norm distributions and MAE projection error");
  projection->add_option("--in", cfg.input_dir, "Input DumpSet directory")->required()->check(CLI::ExistingDirectory);
  projection->add_option("--out", cfg.output_path, "Output CSV")->required();
  projection->add_option("--dv-scale", dv_scale, "Scale on ||phi(q)||^2: a number, or 'auto' for 1/d_v")
      ->default_val("auto");

  auto* gamma = app.add_subcommand("gamma", "Gamma-vector audit of true vs perturbed eigenvectors");
  gamma->add_option("--in", cfg.input_dir, "Input DumpSet directory")->required()->check(CLI::ExistingDirectory);
  gamma->add_option("--out", cfg.output_path, "Output CSV")->required();
  gamma->add_option("--sigma", cfg.sigma, "Perturbation scale")->check(CLI::NonNegativeNumber)->default_val(0.1);
  gamma->add_option("--seed", cfg.seed, "Perturbation seed")->default_val(0);

  auto* selftest = app.add_subcommand("selftest", "Run the built-in oracle checks");

  CLI11_PARSE(app, argc, argv);

  if (*gen) cfg.command = ka::Command::Gen;
  else if (*plant) cfg.command = ka::Command::Plant;
  else if (*similarity) cfg.command = ka::Command::Similarity;
  else if (*spectrum) cfg.command = ka::Command::Spectrum;
  else if (*projection) cfg.command = ka::Command::Projection;
  else if (*gamma) cfg.command = ka::Command::Gamma;
  else if (*selftest) cfg.command = ka::Command::Selftest;

  cfg.aggregate = aggregate == "max" ? ka::Aggregate::Max : ka::Aggregate::Mean;
  if (dv_scale != "auto") {
    char* end = nullptr;
    const double v = std::strtod(dv_scale.c_str(), &end);
    if (end == dv_scale.c_str() || *end != '\0') {
      std::cerr << R"({"error":"--dv-scale must be a number or 'auto'","kind":"ValidationError"})" << "\n";
      return ka::kExitError;
    }
    cfg.dv_scale = v;
  }
  return ka::run(cfg);
}

// dfxtrain: paired integer/float training, verification suites, bit-width
// ablations and loss-landscape probes.
#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "dfx/app.hpp"
#include "dfx/theory.hpp"

namespace {

std::filesystem::path env_out(const std::string& fallback) {
  const char* o = std::getenv("DFX_OUT");
  return o && *o ? std::filesystem::path(o) : std::filesystem::path(fallback);
}

void report(const dfx::ArmSummary& a) {
  std::cout << a.arm << ": test_accuracy " << dfx::fmt9(a.test_accuracy) << "% test_loss " << dfx::fmt9(a.test_loss);
  if (!a.epoch_loss.empty()) std::cout << " final_train_loss " << dfx::fmt9(a.epoch_loss.back());
  std::cout << "\n";
  if (a.diverged) std::cout << "DivergenceDetected: " << a.arm << " (" << a.divergence_reason << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic fixed-point integer training"};
  app.require_subcommand(1);

  std::string config_path;
  bool paired = false;
  auto* train = app.add_subcommand("train", "train the integer arm (and the float arm with --paired)");
  train->add_option("--config", config_path, "key = value config file")->required()->check(CLI::ExistingFile);
  train->add_flag("--paired", paired, "also train the float reference arm");

  std::string suite;
  std::string verify_out;
  auto* verify = app.add_subcommand("verify", "run a verification suite");
  verify->add_option("suite", suite, "rounding | mapping | gemm | norm | sgd | theorem1 | variance")->required();
  verify->add_option("--out", verify_out, "report directory (default $DFX_OUT or dfx_verify)");

  std::string ablate_config;
  std::vector<int> bits{8, 7, 6, 5, 4};
  auto* ablate = app.add_subcommand("ablate", "one integer run per bit width");
  ablate->add_option("--config", ablate_config, "key = value config file")->required()->check(CLI::ExistingFile);
  ablate->add_option("--bits", bits, "comma-separated bit widths")->delimiter(',');

  std::string ckpt, landscape_out;
  dfx::Index grid = 11, samples = 1000;
  double scale = 1.0;
  auto* landscape = app.add_subcommand("landscape", "loss grid around a checkpoint");
  landscape->add_option("--ckpt", ckpt, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  landscape->add_option("--grid", grid, "points per axis")->check(CLI::PositiveNumber);
  landscape->add_option("--scale", scale, "perturbation half-width");
  landscape->add_option("--samples", samples, "test samples per evaluation")->check(CLI::PositiveNumber);
  landscape->add_option("--out", landscape_out, "output directory (default $DFX_OUT or the checkpoint directory)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      dfx::RunConfig c = dfx::load_run_config(config_path);
      dfx::apply_environment(c);
      if (paired) c.paired = true;
      const dfx::RunSummary s = dfx::run_training(c);
      report(s.integer);
      if (s.reference) {
        report(*s.reference);
        std::cout << "batch_order_match " << (s.reference->epoch_digest == s.integer.epoch_digest ? "true" : "false")
                  << "\n";
      }
      std::cout << "artifacts in " << c.out_dir.string() << "\n";
      return 0;
    }
    if (*verify) {
      const std::filesystem::path out = verify_out.empty() ? env_out("dfx_verify") : std::filesystem::path(verify_out);
      const dfx::SuiteResult r = dfx::run_suite(suite, out);
      for (const dfx::SuiteCheck& c : r.checks)
        std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << (c.detail.empty() ? "" : "  " + c.detail) << "\n";
      std::cout << suite << ": " << (r.passed() ? "PASS" : "FAIL") << " (report " << (out / ("verify_" + suite + ".csv")).string()
                << ")\n";
      return r.passed() ? 0 : 1;
    }
    if (*ablate) {
      dfx::RunConfig c = dfx::load_run_config(ablate_config);
      dfx::apply_environment(c);
      for (const dfx::AblationRow& r : dfx::run_ablation(c, bits)) {
        std::cout << "int" << r.bits << ": test_accuracy " << dfx::fmt9(r.test_accuracy) << "% final_loss "
                  << dfx::fmt9(r.final_loss) << (r.diverged ? "  DivergenceDetected" : "") << "\n";
      }
      std::cout << "table in " << (c.out_dir / "ablation.csv").string() << "\n";
      return 0;
    }
    if (*landscape) {
      const std::filesystem::path out = !landscape_out.empty() ? std::filesystem::path(landscape_out)
                                        : std::getenv("DFX_OUT") ? env_out("")
                                                                 : std::filesystem::path(ckpt);
      const dfx::LandscapeGrids g = dfx::landscape_probe(ckpt, grid, scale, out, samples);
      std::cout << "center loss float " << dfx::fmt9(g.center_float) << " fixed " << dfx::fmt9(g.center_fixed) << "\n"
                << "grids in " << out.string() << "\n";
      return 0;
    }
  } catch (const dfx::DfxError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

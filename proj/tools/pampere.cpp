#include <iostream>

#include <CLI11.hpp>

#include "pampere/cli.hpp"

int main(int argc, char** argv) {
  using namespace pampere;
  CLI::App app{"Parabolic Monge-Ampere toolkit"};
  cli::RunOptions opt;
  std::string out;
  std::uint64_t seed = 0;
  app.add_option("command", opt.command, "one of: cell-solve, build-ancient, ibvp-solve, homogenize-sweep, "
                                         "fit-decomposition, level-set")
      ->required();
  app.add_option("--config", opt.config, "JSON configuration file")->required();
  auto* out_opt = app.add_option("--out", out, "output directory (default: config output_dir, else ./out)");
  auto* seed_opt = app.add_option("--seed", seed, "seed for sampled checks (overrides the config)");
  app.add_flag("--timing", opt.timing, "record wall-clock times (outputs are then not reproducible)");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const auto j = cli::detail::error_json(Error(ErrorKind::config_invalid, e.what()), cli::config_error);
    std::cerr << j.dump() << "\n";
    return cli::config_error;
  }
  if (*out_opt) opt.out = out;
  if (*seed_opt) opt.seed = seed;
  return cli::run(opt, std::cerr);
}

// s2gr: runs one pipeline stage (or all of them) from a config file.
//
//   s2gr <command> [--config run.cfg] [--section.key=value ...] [--threads N] [--allow-leakage] [--quiet]

#include <CLI11.hpp>
#include <fmt/format.h>

#include <iostream>
#include <string>
#include <vector>

#include "s2gr/config.hpp"
#include "s2gr/errors.hpp"
#include "s2gr/pipeline.hpp"

namespace {

constexpr int kConfigExit = 2;
constexpr int kPrerequisiteExit = 3;
constexpr int kNumericalExit = 4;

int fail(int code, const std::string& msg) {
  std::cerr << "s2gr: " << msg << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic-ID generative recommendation pipeline"};
  app.allow_extras();

  std::string command, config_path;
  int threads = 0;
  bool allow_leakage = false, quiet = false;
  std::string cmds;
  for (const auto& c : s2gr::pipeline::command_names()) cmds += (cmds.empty() ? "" : " | ") + c;
  app.add_option("command", command, cmds)->required();
  app.add_option("-c,--config", config_path, "Config file (flat [section] key = value)");
  app.add_option("--threads", threads, "Worker threads (1 = deterministic mode)");
  app.add_flag("--allow-leakage", allow_leakage, "Allow building the graph from all interactions");
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kConfigExit;
  }

  try {
    auto cfg = config_path.empty() ? s2gr::cfg::Config{} : s2gr::cfg::Config::load(config_path);
    for (const auto& extra : app.remaining()) {
      if (extra.rfind("--", 0) != 0) return fail(kConfigExit, "unexpected argument '" + extra + "'");
      cfg.apply_override(extra);
    }
    if (threads != 0) cfg.set("run.threads", std::to_string(threads));
    const auto rc = s2gr::pipeline::RunConfig::from(cfg);
    s2gr::pipeline::Options opt;
    opt.allow_leakage = allow_leakage;
    opt.log = quiet ? nullptr : &std::cerr;
    s2gr::pipeline::run_command(command, rc, opt);
  } catch (const s2gr::MissingPrerequisite& e) {
    return fail(kPrerequisiteExit, e.what());
  } catch (const s2gr::NumericalError& e) {
    return fail(kNumericalExit, e.what());
  } catch (const s2gr::ConfigError& e) {
    return fail(kConfigExit, e.what());
  } catch (const s2gr::ParseError& e) {
    return fail(kConfigExit, e.what());
  } catch (const std::exception& e) {
    return fail(1, e.what());
  }
  return 0;
}

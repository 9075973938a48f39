#include <exception>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "kvleak/runner.hpp"
#include "kvleak/util.hpp"

namespace {

constexpr const char* kUsage =
    R"(usage: kvleak <subcommand> [--config FILE] [--key=value ...]

subcommands:
  ingest       build the vocabulary and tokenized corpus files
  train-sft    fit the adversary model on the training corpus
  annotate     mark hard tokens and emit preference pairs
  train-dpo    preference-optimize the fitted model
  attack       run recovery sessions against every test query and report metrics
  assess-risk  replay the attack against cached entries and flag leakable ones

Any config key can be set on the command line, e.g. --seed=42 --out=runs/a
--attack.m=20. --config loads a key = value file first; flags override it.
exit codes: 0 ok, 2 usage, 3 config, 4 vocabulary mismatch, 5 input file, 6 runtime
)";

int exit_code_for(kvleak::ErrKind kind) {
  switch (kind) {
    case kvleak::ErrKind::Config:
      return 3;
    case kvleak::ErrKind::VocabMismatch:
      return 4;
    case kvleak::ErrKind::Io:
    case kvleak::ErrKind::Parse:
      return 5;
    case kvleak::ErrKind::Metric:
    case kvleak::ErrKind::Invalid:
      return 6;
  }
  return 6;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty()) {
    std::cerr << kUsage;
    return 2;
  }
  if (args[0] == "-h" || args[0] == "--help") {
    std::cout << kUsage;
    return 0;
  }

  std::string sub = args[0];
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "-h" || a == "--help") {
      std::cout << kUsage;
      return 0;
    }
    if (a == "--config") {
      if (i + 1 >= args.size()) {
        std::cerr << "kvleak: --config needs a file argument\n";
        return 2;
      }
      config_path = args[++i];
      continue;
    }
    if (a.rfind("--config=", 0) == 0) {
      config_path = a.substr(9);
      continue;
    }
    if (a.rfind("--", 0) == 0) {
      std::size_t eq = a.find('=');
      if (eq == std::string::npos || eq == 2) {
        std::cerr << "kvleak: expected --key=value, got '" << a << "'\n";
        return 2;
      }
      overrides.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
      continue;
    }
    std::cerr << "kvleak: unexpected argument '" << a << "'\n";
    return 2;
  }

  try {
    kvleak::KvConfig cfg;
    if (!config_path.empty()) cfg = kvleak::KvConfig::from_file(config_path);
    for (const auto& [key, value] : overrides) cfg.set(key, value);
    if (!kvleak::run_subcommand(sub, cfg)) {
      std::cerr << "kvleak: unknown subcommand '" << sub << "'\n" << kUsage;
      return 2;
    }
  } catch (const kvleak::Error& e) {
    std::cerr << "kvleak: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "kvleak: " << e.what() << "\n";
    return 6;
  }
  return 0;
}

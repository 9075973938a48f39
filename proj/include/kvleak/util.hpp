#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace kvleak {

// Error categories map one-to-one onto CLI exit codes; library code throws,
// the CLI entry point translates.
enum class ErrKind {
  Io,             // file missing / unreadable / unwritable
  Parse,          // malformed input file
  Config,         // unknown key, bad value, missing required key
  VocabMismatch,  // model was built against a different vocabulary
  Metric,         // requested metric undefined on the given records
  Invalid,        // contract violation (bad argument, empty input, ...)
};

class Error : public std::runtime_error {
 public:
  Error(ErrKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrKind kind() const { return kind_; }

 private:
  ErrKind kind_;
};

std::uint64_t fnv1a64(const void* data, std::size_t n,
                      std::uint64_t seed = 14695981039346656037ull);
std::uint64_t fnv1a64(const std::string& s);

// Derives an independent stream seed from a global seed. Used to give every
// attack session its own reproducible randomness regardless of scheduling.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// Small deterministic generator (splitmix64). The standard <random>
// distributions are implementation-defined sequences, which would break the
// byte-identical-report contract, so sampling is done by hand here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  double uniform01();  // [0, 1)
  double normal(double mean, double sigma);
  // Inclusive bounds. Modulo bias is irrelevant at the ranges used here.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

 private:
  std::uint64_t state_;
};

// Runs fn(0..n-1), fanning out over `jobs` threads when jobs > 1. Iterations
// must be independent; results keyed by index stay deterministic.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

// Fixed float formatting. Reports pin 6 significant digits; model files use
// hexfloat so parameters round-trip exactly.
std::string fmt_g6(double v);
std::string fmt_hex(double v);
double parse_double(const std::string& s);  // accepts decimal and hexfloat

std::string json_escape(const std::string& s);

double softplus(double x);  // log(1 + e^x), stable on both tails
double sigmoid(double x);

}  // namespace kvleak

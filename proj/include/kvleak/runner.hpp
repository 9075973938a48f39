#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace kvleak {

// Flat dotted-key configuration. File lines are `key = value`; blank lines
// and lines starting with `#` are skipped. Command-line `--key=value`
// overrides are applied on top via set(). Keys are validated against the
// known-key table, so a typo fails fast instead of being ignored.
class KvConfig {
 public:
  KvConfig() = default;
  static KvConfig from_file(const std::string& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string get_str(const std::string& key, const std::string& fallback) const;
  std::string require_str(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::uint64_t> get_u64_list(const std::string& key,
                                          const std::vector<std::uint64_t>& fallback) const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

// Subcommand bodies. Each one reads only serialized artifacts, so any stage
// can rerun from the previous stage's files. All throw Error on failure.
void run_ingest(const KvConfig& cfg);
void run_train_sft(const KvConfig& cfg);
void run_annotate(const KvConfig& cfg);
void run_train_dpo(const KvConfig& cfg);
void run_attack(const KvConfig& cfg);
void run_assess_risk(const KvConfig& cfg);

// Dispatches by name; returns false when the name is not a subcommand.
bool run_subcommand(const std::string& name, const KvConfig& cfg);

}  // namespace kvleak

#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "duet/decoding.hpp"
#include "duet/lm.hpp"
#include "duet/nn/model.hpp"
#include "duet/synthesis.hpp"
#include "duet/verifier.hpp"

namespace duet::cli {

// Layered key-value configuration: defaults < config file < command line.
// Every key is declared up front; unknown keys are rejected. Files use a flat
// INI-style format ([section] + key = value).
class RunConfig {
 public:
  RunConfig();  // defaults

  void set(const std::string& dotted_key, const std::string& value);
  void load_file(const std::string& path);

  std::string get_string(const std::string& key) const;
  long long get_int(const std::string& key) const;
  uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool has(const std::string& key) const;

  std::string echo_ini() const;  // full resolved config, diff-friendly
  nlohmann::ordered_json to_json() const;

  // Derived bundles.
  nn::ModelConfig model_config() const;
  lm::LmTrainConfig lm_train_config() const;
  synthesis::SynthesisConfig synthesis_config() const;
  verifier::VerifierTrainConfig verifier_train_config() const;
  decoding::DecodeConfig decode_config() const;
  std::vector<task::DifficultyWeight> difficulty_mix() const;

  uint64_t seed() const { return get_u64("run.seed"); }
  int workers() const;  // run.workers, 0 = hardware concurrency
  std::string out_root() const { return get_string("run.out"); }

 private:
  struct KeySpec {
    std::string key;
    std::string def;
    enum class Type { string_t, int_t, double_t } type;
    std::string help;
  };
  static const std::vector<KeySpec>& registry();
  const KeySpec& spec(const std::string& key) const;

  std::map<std::string, std::string> values_;
};

}  // namespace duet::cli

#pragma once

#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "duet/decoding.hpp"
#include "duet/lm.hpp"
#include "duet/task.hpp"
#include "duet/verifier.hpp"

namespace duet::eval {

using ordered_json = nlohmann::ordered_json;

// A named way to produce an answer text for a problem.
struct DecoderSpec {
  std::string name;
  std::function<std::string(const task::Problem&)> decode_text;
};

DecoderSpec vanilla_greedy_decoder(const lm::LmEngine& engine, int max_tokens);
DecoderSpec dual_greedy_decoder(const lm::LmEngine& engine, const verifier::Scorer& scorer,
                                const decoding::DecodeConfig& cfg);

struct ProblemOutcome {
  std::string id;
  bool correct = false;
  std::optional<long long> extracted;
  std::string error;  // per-problem decode failures are recorded, not fatal
  double wall_ms = 0;
};

struct AccuracyReport {
  std::string name;
  ordered_json config;
  std::vector<ProblemOutcome> outcomes;
  long n_problems = 0;
  long n_errors = 0;
  double accuracy = 0;  // mean of per-problem booleans
  double total_ms = 0;

  ordered_json to_json() const;
};

AccuracyReport evaluate_accuracy(const DecoderSpec& decoder, const task::Corpus& corpus,
                                 int workers);

struct MajorReport {
  std::string name;
  ordered_json config;
  std::vector<int> n_values;
  std::map<int, double> accuracy_at;
  std::vector<std::string> problem_ids;
  std::vector<std::vector<std::optional<long long>>> sample_answers;  // [problem][sample]
  double total_ms = 0;

  ordered_json to_json() const;
};

// Draws max(n_values) samples once per problem and reuses prefixes for the
// smaller N values.
MajorReport major_at_n(const lm::LmEngine& engine, const verifier::Scorer* scorer,
                       const task::Corpus& corpus, const decoding::DecodeConfig& cfg,
                       const std::vector<int>& n_values, int workers);

struct LatencyReport {
  std::string name;
  ordered_json config;
  int repetitions = 0;
  long instances = 0;
  std::vector<double> vanilla_ms;  // raw per (rep, instance), rep-major
  std::vector<double> dual_ms;
  double vanilla_mean_ms = 0;
  double dual_mean_ms = 0;
  double overhead_ratio = 0;  // dual mean / vanilla mean
  long total_steps = 0;
  long multi_candidate_steps = 0;
  double invoked_fraction = 0;
  bool invocation_rule_ok = false;  // invoked <=> |V_t| > 1 on every traced step
  double phase_consistency_max_rel_err = 0;

  ordered_json to_json() const;
};

// Single-worker wall-time comparison of vanilla greedy vs dual-process greedy
// decoding on identical prompts; one warm-up pass is excluded.
LatencyReport latency_bench(const lm::LmEngine& engine, const verifier::Scorer& scorer,
                            const task::Corpus& corpus, const decoding::DecodeConfig& cfg,
                            int repetitions);

// Removes every wall-clock field ("timing" subtrees) from a report.
ordered_json strip_timing(const ordered_json& j);

// Default experiment manifest: vanilla / dual / dual-SA accuracy, self-
// consistency curves for both arms, latency plus the alpha=1 control,
// token discrimination, and the deeper-difficulty generalization probe.
ordered_json default_manifest(const std::string& data_dir, const std::string& models_dir,
                              uint64_t seed, int workers);

struct SuiteResult {
  std::vector<std::string> run_names;
  std::vector<std::string> failed_runs;
  std::vector<std::string> reused_runs;
};

// Executes every run in the manifest, isolating failures. A run whose report
// already exists with a matching config hash is reused untouched.
SuiteResult run_experiment_suite(const ordered_json& manifest, const std::string& out_dir);

}  // namespace duet::eval

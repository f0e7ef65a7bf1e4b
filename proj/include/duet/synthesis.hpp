#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "duet/lm.hpp"
#include "duet/task.hpp"
#include "duet/verifier.hpp"

namespace duet::synthesis {

// Which pool negatives are drawn from: the LM's top-k most probable tokens
// (default) or the alpha-filtered plausible set.
enum class NegativePool { top_k, alpha_set };

struct SynthesisConfig {
  int n_rollouts = 20;             // N
  int top_k = 5;                   // k
  double threshold = 0.5;          // tau
  double rollout_temperature = 1.0;
  int rollout_cap = 192;
  uint64_t rng_seed = 0;
  NegativePool pool = NegativePool::top_k;
  double alpha = 0.1;  // used only by the alpha_set pool

  void validate() const;
};

// Per-position quality estimates q(v) for the assessed candidates. Every value
// is a multiple of 1/N; the ground-truth token is never a key.
struct QualityMap {
  int position = 0;
  std::map<lm::TokenId, double> entries;
  int assessed_count = 0;
};

// k highest-logit tokens excluding ground_truth: take the top k+1, drop the
// ground truth if present, otherwise drop the (k+1)-th. Ties break toward the
// lower token id.
std::vector<lm::TokenId> candidate_set(const std::vector<float>& logits, int k,
                                       lm::TokenId ground_truth);

// Plausible-set variant of the negative pool (ground truth excluded).
std::vector<lm::TokenId> alpha_candidate_set(const std::vector<float>& logits, double alpha,
                                             lm::TokenId ground_truth);

// q(v): fraction of N rollouts from prefix+candidate whose final text passes
// the answer check. Deterministic under cfg.rng_seed.
double assess_quality(const lm::LmEngine& engine, const lm::Context& prefix,
                      lm::TokenId candidate, const task::Problem& problem,
                      const SynthesisConfig& cfg);

// Uniform draw from {v : q(v) < threshold}; empty set yields nothing.
std::optional<lm::TokenId> sample_negative(const QualityMap& qmap, double threshold,
                                           uint64_t rng_seed);

struct InstanceStats {
  int positions = 0;
  int pairs = 0;
  int skipped = 0;
  std::vector<int> q_histogram;  // q*N counts, indices 0..N
};

// One preference pair at most per solution-token position; prompt tokens are
// conditioning only. Deterministic under the per-instance seed schedule
// seed_mix(cfg.rng_seed, hash(problem.id)).
std::vector<verifier::PreferencePair> synthesize_instance(const lm::LmEngine& engine,
                                                          const task::Problem& problem,
                                                          const SynthesisConfig& cfg,
                                                          InstanceStats* stats = nullptr);

struct DatasetStats {
  long positions = 0;
  long pairs = 0;
  long skipped = 0;
  long instances = 0;
  long instances_without_pairs = 0;
  std::vector<int> q_histogram;
  std::vector<std::pair<std::string, int>> pairs_per_instance;
};

// Called after each instance completes, in corpus order.
using InstanceSink =
    std::function<void(int index, const task::Problem&,
                       const std::vector<verifier::PreferencePair>&, const InstanceStats&)>;

// Concatenation of synthesize_instance over the corpus (ordered by problem,
// then position). start_index supports resuming a partially written dataset.
verifier::PreferenceDataset synthesize_dataset(const lm::LmEngine& engine,
                                               const task::Corpus& corpus,
                                               const SynthesisConfig& cfg, int workers,
                                               DatasetStats* stats = nullptr,
                                               const InstanceSink& sink = nullptr,
                                               int start_index = 0);

nlohmann::ordered_json provenance_json(const SynthesisConfig& cfg);

// Replaces each solution with the model's first self-generated passing sample;
// problems that never pass within n_samples are dropped.
task::Corpus self_generated_corpus(const lm::LmEngine& engine, const task::Corpus& corpus,
                                   int n_samples, double temperature, uint64_t rng_seed,
                                   int workers, int rollout_cap = 192);

}  // namespace duet::synthesis

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "duet/lm.hpp"
#include "duet/verifier.hpp"

namespace duet::decoding {

enum class Strategy { greedy, sample };

struct DecodeConfig {
  double alpha = 0.1;
  double beta = 0.25;
  double temperature = 1.0;
  int max_tokens = 192;
  Strategy strategy = Strategy::greedy;
  uint64_t rng_seed = 0;

  void validate() const;
};

struct StepTrace {
  int t = 0;
  int set_size = 0;
  bool verifier_invoked = false;  // exactly when set_size > 1
  std::vector<std::pair<lm::TokenId, float>> scores;  // present iff invoked
  lm::TokenId chosen = -1;
  double ms_lm = 0;
  double ms_verifier = 0;
};

// { v : z[v] >= ln(alpha) + max_w z[w] }; always contains the argmax.
std::vector<lm::TokenId> plausible_set(const std::vector<float>& logits, double alpha);

// z*[v] = z[v] + beta * score[v] on the plausible set, -inf elsewhere. Every
// plausible token must have a score.
std::vector<float> combine_logits(const std::vector<float>& logits,
                                  const std::map<lm::TokenId, float>& scores, double beta,
                                  const std::vector<lm::TokenId>& plausible);

// Masked vanilla logits (no verifier term); the singleton fast path.
std::vector<float> mask_logits(const std::vector<float>& logits,
                               const std::vector<lm::TokenId>& plausible);

// Normalized distribution over the combined logits; temperature divides z*.
std::vector<double> combined_distribution(const std::vector<float>& z_star, double temperature);

int argmax_combined(const std::vector<float>& z_star);  // lowest-id tie break

// One dual-process step from scratch: LM logits, plausibility filter, verifier
// rescoring of multi-candidate sets, combined softmax. The trace's chosen
// field is left to the caller.
std::pair<std::vector<double>, StepTrace> dual_step(const lm::LmEngine& engine,
                                                    const verifier::Scorer& scorer,
                                                    const lm::Context& context,
                                                    const DecodeConfig& cfg);

struct DecodeResult {
  lm::Continuation continuation;
  std::vector<StepTrace> trace;
  double prefill_ms = 0;
  double total_ms = 0;
};

// Sequence decoding with the verifier engaged only on multi-candidate steps;
// the verifier cache catches up lazily so singleton-only decodes never pay for
// System 2.
DecodeResult decode(const lm::LmEngine& engine, const verifier::Scorer& scorer,
                    const lm::Context& prompt, const DecodeConfig& cfg);

// Majority vote over extracted answers; absent answers are excluded, ties
// break toward the lowest answer value.
std::optional<long long> vote_majority(const std::vector<std::optional<long long>>& answers,
                                       std::map<long long, int>* votes_out = nullptr);

struct SelfConsistencyResult {
  std::optional<long long> answer;
  std::map<long long, int> votes;
  std::vector<std::optional<long long>> sample_answers;
  std::vector<std::string> sample_texts;
};

// m independent sampled decodes (dual-process when scorer != nullptr, vanilla
// otherwise) followed by a majority vote. Sample j always uses the RNG stream
// seed_mix(cfg.rng_seed, j), so prefixes of the sample list are reusable.
SelfConsistencyResult self_consistency(const lm::LmEngine& engine,
                                       const verifier::Scorer* scorer,
                                       const lm::Context& prompt, const DecodeConfig& cfg,
                                       int m);

// Step JSONL: {t, set_size, invoked, chosen, ms_lm, ms_verifier}.
void save_trace_jsonl(const std::vector<StepTrace>& trace, const std::string& path);

}  // namespace duet::decoding

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "duet/nn/adam.hpp"
#include "duet/nn/infer.hpp"
#include "duet/nn/model.hpp"
#include "duet/rng.hpp"
#include "duet/task.hpp"
#include "duet/vocab.hpp"

namespace duet::lm {

using LogitsVector = std::vector<float>;
using LmParams = nn::Params<float>;

// Token prefix x_<t. Always starts with BOS and fits the context window.
struct Context {
  std::vector<TokenId> ids;
  int max_len = 0;

  static Context from_tokens(std::vector<TokenId> ids, int max_len, TokenId bos);
  static Context from_text(const Vocabulary& vocab, std::string_view text, int max_len);
  int size() const { return static_cast<int>(ids.size()); }
};

// Tokens appended after a prefix.
struct Continuation {
  std::vector<TokenId> token_ids;
  std::string text;
  bool terminated = false;  // true iff EOS was emitted before the cap/window
};

struct SampleOptions {
  int n = 1;
  double temperature = 1.0;
  bool greedy = false;  // temperature->0 limit
  uint64_t rng_seed = 0;
  int cap = 192;
};

// Read-only inference wrapper around a trained LM; safe to share across
// threads. All logits produced here come from one kernel family, so repeated
// and batched calls are bitwise reproducible.
class LmEngine {
 public:
  explicit LmEngine(const LmParams& params);

  const Vocabulary& vocab() const { return model_.vocab; }
  const nn::ModelConfig& config() const { return model_.cfg; }
  const nn::InferModel& infer_model() const { return model_; }

  // Next-token logits at the final position of the context.
  LogitsVector forward_logits(const Context& context) const;

  std::vector<Continuation> sample_continuations(const Context& prefix,
                                                 const SampleOptions& opts) const;

  Continuation greedy_decode(const Context& prompt, int cap) const;

  // Prompt context for a problem (BOS + prompt text).
  Context prompt_context(const task::Problem& problem) const;

 private:
  nn::InferModel model_;
};

// Greedy argmax with lowest-token-id tie break.
int argmax_token(std::span<const float> logits);

// Temperature softmax sampling from raw logits (double-precision cumulative walk).
int sample_token(std::span<const float> logits, double temperature, Rng& rng);

struct LmTrainConfig {
  double lr = 1.5e-3;
  int batch_size = 16;
  int steps = 3000;
  uint64_t seed = 1;
  int warmup = 100;
  double grad_clip = 1.0;
  double val_fraction = 0.03;
  int val_every = 250;
  int workers = 1;
  nn::AdamConfig adam;
};

struct TrainCurvePoint {
  int step = 0;
  double loss = 0;
  double lr = 0;
  double wall_ms = 0;
};

struct LmTrainReport {
  double init_val_ce = 0;
  double final_val_ce = 0;
  std::vector<TrainCurvePoint> curve;                 // one row per step
  std::vector<std::pair<int, double>> val_curve;      // (step, held-out ce)
};

// Next-token cross-entropy training. Deterministic under the config seed and
// independent of the worker count (fixed microbatch grain, ordered reduction).
// A non-null init overrides the fresh initialization; its architecture must
// match cfg exactly.
LmParams train_lm(const task::Corpus& corpus, const nn::ModelConfig& cfg,
                  const Vocabulary& vocab, const LmTrainConfig& train_cfg,
                  LmTrainReport* report = nullptr, const LmParams* init = nullptr);

// Mean next-token CE of the model on the given problems.
double corpus_cross_entropy(const LmParams& params, std::span<const task::Problem> problems);

// Full training sequence for a problem: BOS + prompt + solution + EOS.
std::vector<TokenId> problem_tokens(const Vocabulary& vocab, const task::Problem& p);

}  // namespace duet::lm

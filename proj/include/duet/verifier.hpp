#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "duet/lm.hpp"
#include "duet/nn/adam.hpp"
#include "duet/nn/infer.hpp"
#include "duet/nn/model.hpp"
#include "duet/task.hpp"

namespace duet::verifier {

using VerifierParams = nn::Params<float>;

// One unit of process supervision: in this context, `pos` is preferable to `neg`.
struct PreferencePair {
  std::vector<lm::TokenId> context_ids;  // BOS + prompt + solution prefix
  lm::TokenId pos = -1;
  lm::TokenId neg = -1;
  int t = 0;                 // position within the solution
  std::string source_id;
  double neg_quality = 0.0;  // rollout quality recorded at synthesis time
};

struct PreferenceDataset {
  std::vector<PreferencePair> pairs;
  nlohmann::ordered_json provenance;  // synthesis config snapshot
};

void save_dataset_jsonl(const PreferenceDataset& ds, const std::string& path);
PreferenceDataset load_dataset_jsonl(const std::string& path);

// Builds verifier parameters from a trained LM: backbone copied, scalar head
// zero-initialized (so the untrained verifier scores exactly 0 everywhere).
VerifierParams verifier_from_lm(const nn::Params<float>& lm_params);

// Read-only scoring wrapper; shares the batch-invariant inference kernels with
// the LM engine, so batched scoring equals serial scoring.
class Scorer {
 public:
  explicit Scorer(const VerifierParams& params);

  const nn::InferModel& infer_model() const { return model_; }
  const nn::ModelConfig& config() const { return model_.cfg; }

  // s(x_<t, v): backbone over context+candidate, scalar head at the final position.
  float score(const lm::Context& context, lm::TokenId candidate) const;
  std::vector<float> score_batch(const lm::Context& context,
                                 std::span<const lm::TokenId> candidates) const;

 private:
  nn::InferModel model_;
};

// Per-pair loss -ln sigma(margin), computed with the stable softplus identity.
double pairwise_loss_from_margin(double margin);

// Mean pairwise comparison loss of the model over a batch of pairs.
double pairwise_loss(const VerifierParams& params, std::span<const PreferencePair> batch);

struct VerifierTrainConfig {
  int epochs = 3;         // batch size and epoch count follow the reference regime
  int batch_pairs = 128;
  double lr = 3e-4;
  int warmup = 20;
  double grad_clip = 1.0;
  uint64_t seed = 2;
  double holdout_fraction = 0.25;
  int workers = 1;
  nn::AdamConfig adam;
};

struct VerifierTrainReport {
  double init_loss = 0;  // ln 2 by construction
  std::vector<lm::TrainCurvePoint> curve;
  long holdout_pairs = 0;
  double holdout_pair_accuracy = 0;  // ties count 0.5
  double holdout_accuracy_wilson_low = 0;
  bool warning_low_accuracy = false;
};

VerifierParams train_verifier(const PreferenceDataset& dataset,
                              const nn::Params<float>& lm_init,
                              const VerifierTrainConfig& cfg,
                              VerifierTrainReport* report = nullptr);

// Fraction of held-out pairs with s(pos) > s(neg), ties counted 0.5.
double pair_accuracy(const Scorer& scorer, std::span<const PreferencePair> pairs, int workers);

struct DiscriminationReport {
  long positions = 0;
  double accuracy = 0;            // ties count 0.5
  double wilson_low = 0;          // 95% lower confidence bound
  std::vector<long> bin_count;    // position bins of width 8
  std::vector<double> bin_accuracy;
};

// Ground-truth-vs-distractor probe: at every solution position, the LM's
// highest-probability non-ground-truth token is scored against the true token.
DiscriminationReport token_discrimination_eval(const VerifierParams& verifier,
                                               const nn::Params<float>& lm,
                                               const task::Corpus& corpus, int workers);

double wilson_lower_bound(double acc, long n, double z = 1.959963984540054);

}  // namespace duet::verifier

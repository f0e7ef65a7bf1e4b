#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "duet/error.hpp"
#include "duet/verifier.hpp"
#include "toy_models.hpp"

using namespace duet;

namespace {

verifier::VerifierParams randomized_verifier(uint64_t seed) {
  auto lm_params = testing::make_random_lm(seed);
  auto v = verifier::verifier_from_lm(lm_params);
  Rng rng(seed_mix(seed, 0x5C0));
  for (auto& w : v.tensor("score_head.w")) w = static_cast<float>(0.5 * rng.normal());
  v.tensor("score_head.b")[0] = 0.1f;
  return v;
}

lm::Context make_context(const lm::Vocabulary& vocab, const std::string& text, int n_ctx) {
  return lm::Context::from_text(vocab, text, n_ctx);
}

verifier::PreferenceDataset learnable_dataset(const lm::Vocabulary& vocab, int n_pairs,
                                              uint64_t seed) {
  // Positive candidate is always '4', negative always '7': trivially separable.
  verifier::PreferenceDataset ds;
  ds.provenance = {{"note", "synthetic-unit-test"}, {"threshold", 0.5}};
  auto pos_tok = vocab.tokenize("4")[0];
  auto neg_tok = vocab.tokenize("7")[0];
  Rng rng(seed);
  for (int i = 0; i < n_pairs; ++i) {
    verifier::PreferencePair p;
    p.context_ids.push_back(vocab.bos_id);
    int len = rng.uniform_int(2, 6);
    for (int t = 0; t < len; ++t) {
      p.context_ids.push_back(rng.uniform_int(4, vocab.size() - 1));
    }
    p.pos = pos_tok;
    p.neg = neg_tok;
    p.t = len;
    p.source_id = "unit-" + std::to_string(i);
    p.neg_quality = 0.0;
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

}  // namespace

TEST_CASE("a zero head scores exactly zero everywhere") {
  auto lm_params = testing::make_random_lm(51);
  auto v = verifier::verifier_from_lm(lm_params);
  CHECK(v.cfg.head == nn::HeadKind::scalar);
  verifier::Scorer scorer(v);
  auto ctx = make_context(lm_params.vocab, "Q: 1+2\nA:\n", v.cfg.n_ctx);
  for (int cand : {3, 9, 10, 15}) {
    CHECK(scorer.score(ctx, cand) == 0.0f);
  }
}

TEST_CASE("scoring is deterministic; batched equals serial") {
  auto v = randomized_verifier(53);
  verifier::Scorer scorer(v);
  auto ctx = make_context(v.vocab, "Q: 12-3\nA:\n1", v.cfg.n_ctx);
  std::vector<int> cands = {5, 9, 12, 17};

  auto batch = scorer.score_batch(ctx, cands);
  auto batch2 = scorer.score_batch(ctx, cands);
  CHECK(batch == batch2);

  for (size_t i = 0; i < cands.size(); ++i) {
    float solo = scorer.score(ctx, cands[i]);
    CHECK(std::abs(solo - batch[i]) <= 1e-6f);
  }

  // singleton batch equals score
  auto one = scorer.score_batch(ctx, std::vector<int>{9});
  CHECK(one[0] == scorer.score(ctx, 9));

  // permutation equivariance
  std::vector<int> perm = {17, 5, 12, 9};
  auto permuted = scorer.score_batch(ctx, perm);
  CHECK(permuted[0] == batch[3]);
  CHECK(permuted[1] == batch[0]);
  CHECK(permuted[2] == batch[2]);
  CHECK(permuted[3] == batch[1]);

  CHECK_THROWS_AS(scorer.score_batch(ctx, std::vector<int>{}), Error);
  CHECK_THROWS_AS(scorer.score_batch(ctx, std::vector<int>{3, 3}), Error);
}

TEST_CASE("pairwise loss of a zero-head verifier is exactly ln 2") {
  auto lm_params = testing::make_random_lm(57);
  auto v = verifier::verifier_from_lm(lm_params);
  auto ds = learnable_dataset(v.vocab, 16, 3);
  double loss = verifier::pairwise_loss(v, ds.pairs);
  CHECK(std::abs(loss - std::log(2.0)) < 1e-9);
}

TEST_CASE("per-pair loss matches an independent high-precision softplus") {
  for (double d : {-5.0, 0.0, 5.0, -50.0, 50.0}) {
    long double ref = logl(1.0L + expl(-static_cast<long double>(d)));
    CHECK(std::abs(verifier::pairwise_loss_from_margin(d) - static_cast<double>(ref)) < 1e-12);
  }
  CHECK(std::isfinite(verifier::pairwise_loss_from_margin(-1000.0)));
  CHECK(std::isfinite(verifier::pairwise_loss_from_margin(1000.0)));
}

TEST_CASE("loss antisymmetry: softplus(-d) - softplus(d) = -d") {
  for (double d = -8.0; d <= 8.0; d += 0.37) {
    double lhs = verifier::pairwise_loss_from_margin(d) - verifier::pairwise_loss_from_margin(-d);
    CHECK(std::abs(lhs - (-d)) < 1e-6);
  }
}

TEST_CASE("pairwise loss is invariant to batch order") {
  auto v = randomized_verifier(59);
  auto ds = learnable_dataset(v.vocab, 24, 7);
  double a = verifier::pairwise_loss(v, ds.pairs);
  std::vector<verifier::PreferencePair> reversed(ds.pairs.rbegin(), ds.pairs.rend());
  double b = verifier::pairwise_loss(v, reversed);
  CHECK(std::abs(a - b) < 1e-6);
}

TEST_CASE("zero training epochs leaves chance-level holdout accuracy") {
  auto lm_params = testing::make_random_lm(61);
  auto ds = learnable_dataset(lm_params.vocab, 40, 11);
  verifier::VerifierTrainConfig cfg;
  cfg.epochs = 0;
  cfg.holdout_fraction = 0.5;
  verifier::VerifierTrainReport report;
  auto v = verifier::train_verifier(ds, lm_params, cfg, &report);
  CHECK(report.holdout_pair_accuracy == 0.5);  // zero head ties everywhere
  for (float w : v.tensor("score_head.w")) CHECK(w == 0.0f);
}

TEST_CASE("the verifier learns a separable preference dataset") {
  auto lm_params = testing::make_random_lm(63, 32, 1, 64);
  auto ds = learnable_dataset(lm_params.vocab, 120, 13);
  verifier::VerifierTrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_pairs = 16;
  cfg.lr = 1e-3;
  cfg.warmup = 4;
  cfg.holdout_fraction = 0.25;
  cfg.seed = 15;
  verifier::VerifierTrainReport report;
  auto v = verifier::train_verifier(ds, lm_params, cfg, &report);
  CHECK(report.init_loss == doctest::Approx(std::log(2.0)));
  CHECK(report.holdout_pair_accuracy > 0.9);
  CHECK(!report.warning_low_accuracy);
  CHECK(report.holdout_pairs == 30);

  // deterministic retrain, independent of workers
  verifier::VerifierTrainConfig cfg2 = cfg;
  cfg2.workers = 3;
  auto v2 = verifier::train_verifier(ds, lm_params, cfg2);
  CHECK(v.data == v2.data);
}

TEST_CASE("token discrimination with a zero head is exactly one half") {
  auto lm_params = testing::make_random_lm(67, 32, 1, 96);
  auto v = verifier::verifier_from_lm(lm_params);
  std::vector<task::DifficultyWeight> mix = {{1, 1.0}};
  auto corpus = task::build_corpus(6, 3, mix);
  auto rep = verifier::token_discrimination_eval(v, lm_params, corpus, 1);
  CHECK(rep.positions > 0);
  CHECK(rep.accuracy == 0.5);
}

TEST_CASE("preference dataset JSONL round-trips with provenance") {
  auto lm_params = testing::make_random_lm(69);
  auto ds = learnable_dataset(lm_params.vocab, 10, 17);
  auto dir = std::filesystem::temp_directory_path() / "duet_verifier_test";
  std::filesystem::create_directories(dir);
  std::string path = (dir / "pairs.jsonl").string();
  verifier::save_dataset_jsonl(ds, path);
  auto loaded = verifier::load_dataset_jsonl(path);
  REQUIRE(loaded.pairs.size() == ds.pairs.size());
  CHECK(loaded.provenance == ds.provenance);
  for (size_t i = 0; i < ds.pairs.size(); ++i) {
    CHECK(loaded.pairs[i].context_ids == ds.pairs[i].context_ids);
    CHECK(loaded.pairs[i].pos == ds.pairs[i].pos);
    CHECK(loaded.pairs[i].neg == ds.pairs[i].neg);
    CHECK(loaded.pairs[i].t == ds.pairs[i].t);
    CHECK(loaded.pairs[i].source_id == ds.pairs[i].source_id);
  }
}

TEST_CASE("invalid pairs are rejected") {
  verifier::PreferencePair p;
  p.context_ids = {0, 5};
  p.pos = 9;
  p.neg = 9;
  verifier::PreferenceDataset ds;
  ds.pairs.push_back(p);
  auto lm_params = testing::make_random_lm(71);
  verifier::VerifierTrainConfig cfg;
  CHECK_THROWS_AS((void)verifier::train_verifier(ds, lm_params, cfg), Error);
}

TEST_CASE("wilson lower bound behaves sensibly") {
  CHECK(verifier::wilson_lower_bound(0.75, 2000) > 0.5);
  CHECK(verifier::wilson_lower_bound(0.52, 100) < 0.5);
  CHECK(verifier::wilson_lower_bound(0.5, 0) == 0.0);
  CHECK(verifier::wilson_lower_bound(1.0, 50) < 1.0);
}

#include "duet/verifier.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>

#include "duet/error.hpp"
#include "duet/nn/graph.hpp"
#include "duet/parallel.hpp"

namespace duet::verifier {

namespace {
using Clock = std::chrono::steady_clock;
using ordered_json = nlohmann::ordered_json;

constexpr int kMicrobatchPairs = 8;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// Two padded sequences per pair: context+pos, context+neg.
nn::ScoreBatch make_pair_batch(const nn::ModelConfig& cfg, int pad_id,
                               std::span<const PreferencePair> pairs) {
  nn::ScoreBatch b;
  b.n_seq = static_cast<int>(pairs.size()) * 2;
  b.t_max = 0;
  for (const auto& p : pairs) {
    b.t_max = std::max(b.t_max, static_cast<int>(p.context_ids.size()) + 1);
  }
  if (b.t_max > cfg.n_ctx) fail_validation("preference pair exceeds the context window");
  b.ids.assign(static_cast<size_t>(b.n_seq) * b.t_max, pad_id);
  b.last.resize(static_cast<size_t>(b.n_seq));
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    for (int which = 0; which < 2; ++which) {
      size_t row = (2 * i + static_cast<size_t>(which)) * b.t_max;
      for (size_t t = 0; t < p.context_ids.size(); ++t) b.ids[row + t] = p.context_ids[t];
      b.ids[row + p.context_ids.size()] = which == 0 ? p.pos : p.neg;
      b.last[2 * i + static_cast<size_t>(which)] = static_cast<int>(p.context_ids.size());
    }
  }
  return b;
}

void validate_pair(const PreferencePair& p) {
  if (p.context_ids.empty()) fail_validation("preference pair: empty context");
  if (p.pos == p.neg) fail_validation("preference pair: positive equals negative");
}

}  // namespace

void save_dataset_jsonl(const PreferenceDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_runtime("cannot open for writing: " + path);
  ordered_json head;
  head["provenance"] = ds.provenance;
  out << head.dump() << '\n';
  for (const auto& p : ds.pairs) {
    ordered_json j;
    j["context_ids"] = p.context_ids;
    j["pos"] = p.pos;
    j["neg"] = p.neg;
    j["t"] = p.t;
    j["source_id"] = p.source_id;
    j["neg_quality"] = p.neg_quality;
    out << j.dump() << '\n';
  }
  if (!out) fail_runtime("write failed: " + path);
}

PreferenceDataset load_dataset_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_runtime("cannot open dataset: " + path);
  PreferenceDataset ds;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ordered_json j = ordered_json::parse(line, nullptr, false);
    if (j.is_discarded()) fail_runtime("malformed dataset line in " + path);
    if (first) {
      first = false;
      if (!j.contains("provenance")) {
        fail_runtime("dataset missing provenance header: " + path);
      }
      ds.provenance = j.at("provenance");
      continue;
    }
    PreferencePair p;
    p.context_ids = j.at("context_ids").get<std::vector<int>>();
    p.pos = j.at("pos").get<int>();
    p.neg = j.at("neg").get<int>();
    p.t = j.at("t").get<int>();
    p.source_id = j.at("source_id").get<std::string>();
    p.neg_quality = j.at("neg_quality").get<double>();
    validate_pair(p);
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

VerifierParams verifier_from_lm(const nn::Params<float>& lm_params) {
  if (lm_params.cfg.head != nn::HeadKind::lm) {
    fail_validation("verifier_from_lm: expected an lm-headed model");
  }
  nn::ModelConfig cfg = lm_params.cfg;
  cfg.head = nn::HeadKind::scalar;
  VerifierParams v;
  v.cfg = cfg;
  v.vocab = lm_params.vocab;
  v.layout = nn::build_layout(cfg);
  v.data.assign(v.layout.total, 0.0f);
  for (const auto& spec : v.layout.tensors) {
    if (spec.name.starts_with("score_head")) continue;  // stays zero
    auto src = lm_params.tensor(spec.name);
    std::copy(src.begin(), src.end(), v.data.begin() + static_cast<long>(spec.offset));
  }
  return v;
}

Scorer::Scorer(const VerifierParams& params) : model_(nn::InferModel::from_params(params)) {
  if (params.cfg.head != nn::HeadKind::scalar) {
    fail_validation("Scorer requires a scalar-headed checkpoint");
  }
}

float Scorer::score(const lm::Context& context, lm::TokenId candidate) const {
  return score_batch(context, std::span<const lm::TokenId>{&candidate, 1}).front();
}

std::vector<float> Scorer::score_batch(const lm::Context& context,
                                       std::span<const lm::TokenId> candidates) const {
  if (candidates.empty()) fail_validation("score_batch: empty candidate list");
  for (size_t i = 0; i < candidates.size(); ++i) {
    for (size_t j = i + 1; j < candidates.size(); ++j) {
      if (candidates[i] == candidates[j]) {
        fail_validation("score_batch: candidates must be pairwise distinct");
      }
    }
  }
  if (context.size() + 1 > model_.cfg.n_ctx) fail_runtime("score_batch: window exceeded");
  nn::KvCache cache;
  cache.init(model_.cfg);
  nn::StepScratch scratch;
  nn::prefill(model_, cache, context.ids, nullptr, scratch);
  std::vector<float> scores(candidates.size());
  nn::branch_batch(model_, cache, candidates, scores.data(), scratch);
  return scores;
}

double pairwise_loss_from_margin(double margin) { return nn::softplus_neg(margin); }

double pairwise_loss(const VerifierParams& params, std::span<const PreferencePair> batch) {
  if (batch.empty()) fail_validation("pairwise_loss: empty batch");
  for (const auto& p : batch) validate_pair(p);
  double sum = 0;
  for (size_t lo = 0; lo < batch.size(); lo += kMicrobatchPairs) {
    size_t hi = std::min(batch.size(), lo + kMicrobatchPairs);
    nn::ScoreBatch sb = make_pair_batch(params.cfg, params.vocab.pad_id,
                                        batch.subspan(lo, hi - lo));
    sum += nn::pairwise_forward_backward<float>(params, sb, nullptr);
  }
  return sum / static_cast<double>(batch.size());
}

double pair_accuracy(const Scorer& scorer, std::span<const PreferencePair> pairs, int workers) {
  if (pairs.empty()) return 0.5;
  std::vector<double> credit(pairs.size(), 0.0);
  parallel_for(static_cast<int>(pairs.size()), workers, [&](int i) {
    const auto& p = pairs[static_cast<size_t>(i)];
    lm::Context ctx = lm::Context::from_tokens(p.context_ids, scorer.config().n_ctx,
                                               scorer.infer_model().vocab.bos_id);
    std::array<lm::TokenId, 2> cands{p.pos, p.neg};
    auto s = scorer.score_batch(ctx, cands);
    credit[static_cast<size_t>(i)] = s[0] > s[1] ? 1.0 : (s[0] == s[1] ? 0.5 : 0.0);
  });
  double sum = 0;
  for (double c : credit) sum += c;
  return sum / static_cast<double>(pairs.size());
}

VerifierParams train_verifier(const PreferenceDataset& dataset,
                              const nn::Params<float>& lm_init,
                              const VerifierTrainConfig& cfg, VerifierTrainReport* report) {
  if (dataset.pairs.empty()) fail_validation("train_verifier: empty dataset");
  for (const auto& p : dataset.pairs) validate_pair(p);

  VerifierParams params = verifier_from_lm(lm_init);

  // Shuffled split; the holdout tail never contributes gradients.
  std::vector<int> order(dataset.pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  {
    Rng rng(seed_mix(cfg.seed, 0x5811FF1E));
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = rng.next_below(static_cast<uint32_t>(i));
      std::swap(order[i - 1], order[j]);
    }
  }
  size_t n_holdout = static_cast<size_t>(
      std::llround(cfg.holdout_fraction * static_cast<double>(order.size())));
  if (n_holdout >= order.size()) n_holdout = order.size() > 1 ? order.size() - 1 : 0;
  size_t n_train = order.size() - n_holdout;
  std::vector<PreferencePair> holdout;
  holdout.reserve(n_holdout);
  for (size_t i = n_train; i < order.size(); ++i) {
    holdout.push_back(dataset.pairs[static_cast<size_t>(order[i])]);
  }

  if (report) {
    report->curve.clear();
    report->init_loss = std::log(2.0);  // zero head scores everything 0
    report->holdout_pairs = static_cast<long>(holdout.size());
  }

  const int steps_per_epoch =
      static_cast<int>((n_train + cfg.batch_pairs - 1) / cfg.batch_pairs);
  const int total_steps = cfg.epochs * steps_per_epoch;
  nn::Adam adam(params.layout.total, cfg.adam);
  std::vector<float> grad(params.layout.total, 0.0f);
  auto t0 = Clock::now();
  int step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> epoch_order(order.begin(), order.begin() + static_cast<long>(n_train));
    Rng rng(seed_mix(cfg.seed, 0xE90C, static_cast<uint64_t>(epoch)));
    for (size_t i = epoch_order.size(); i > 1; --i) {
      size_t j = rng.next_below(static_cast<uint32_t>(i));
      std::swap(epoch_order[i - 1], epoch_order[j]);
    }

    for (size_t lo = 0; lo < epoch_order.size(); lo += cfg.batch_pairs) {
      size_t hi = std::min(epoch_order.size(), lo + cfg.batch_pairs);
      std::vector<PreferencePair> batch;
      batch.reserve(hi - lo);
      for (size_t i = lo; i < hi; ++i) {
        batch.push_back(dataset.pairs[static_cast<size_t>(epoch_order[i])]);
      }

      const int n_slots =
          (static_cast<int>(batch.size()) + kMicrobatchPairs - 1) / kMicrobatchPairs;
      std::vector<double> slot_loss(static_cast<size_t>(n_slots), 0.0);
      std::vector<std::vector<float>> slot_grad(static_cast<size_t>(n_slots));
      parallel_for(n_slots, cfg.workers, [&](int slot) {
        size_t s_lo = static_cast<size_t>(slot) * kMicrobatchPairs;
        size_t s_hi = std::min(batch.size(), s_lo + kMicrobatchPairs);
        nn::ScoreBatch sb = make_pair_batch(
            params.cfg, params.vocab.pad_id,
            std::span<const PreferencePair>(batch.data() + s_lo, s_hi - s_lo));
        slot_grad[static_cast<size_t>(slot)].assign(params.layout.total, 0.0f);
        slot_loss[static_cast<size_t>(slot)] =
            nn::pairwise_forward_backward(params, sb, &slot_grad[static_cast<size_t>(slot)]);
      });

      std::fill(grad.begin(), grad.end(), 0.0f);
      double loss_sum = 0;
      for (int s = 0; s < n_slots; ++s) {
        loss_sum += slot_loss[static_cast<size_t>(s)];
        const auto& sg = slot_grad[static_cast<size_t>(s)];
        for (size_t i = 0; i < grad.size(); ++i) grad[i] += sg[i];
      }
      double loss = loss_sum / static_cast<double>(batch.size());
      if (!std::isfinite(loss)) {
        fail_runtime("train_verifier: training diverged (non-finite loss) at step " +
                     std::to_string(step));
      }
      float inv = 1.0f / static_cast<float>(batch.size());
      for (auto& g : grad) g *= inv;
      nn::clip_grad_norm(grad, cfg.grad_clip);
      double lr = nn::lr_schedule(cfg.lr, step, total_steps, cfg.warmup);
      adam.step(params.data, grad, lr);
      if (report) report->curve.push_back({step, loss, lr, ms_since(t0)});
      ++step;
    }
  }

  if (report) {
    Scorer scorer(params);
    report->holdout_pair_accuracy = pair_accuracy(scorer, holdout, cfg.workers);
    report->holdout_accuracy_wilson_low =
        wilson_lower_bound(report->holdout_pair_accuracy, report->holdout_pairs);
    report->warning_low_accuracy =
        total_steps > 0 && report->holdout_pair_accuracy <= 0.5;
  }
  return params;
}

DiscriminationReport token_discrimination_eval(const VerifierParams& verifier,
                                               const nn::Params<float>& lm,
                                               const task::Corpus& corpus, int workers) {
  if (!verifier.cfg.same_backbone(lm.cfg)) {
    fail_validation("token_discrimination_eval: model dimensions differ");
  }
  nn::InferModel vm = nn::InferModel::from_params(verifier);
  nn::InferModel lmm = nn::InferModel::from_params(lm);
  const auto& vocab = lm.vocab;
  const int V = lm.cfg.vocab_size;

  struct Slot {
    std::vector<double> credit;
    std::vector<int> t_index;
  };
  std::vector<Slot> slots(corpus.problems.size());

  parallel_for(static_cast<int>(corpus.problems.size()), workers, [&](int pi) {
    const auto& problem = corpus.problems[static_cast<size_t>(pi)];
    std::vector<int> prefix;
    prefix.push_back(vocab.bos_id);
    auto pt = vocab.tokenize(problem.prompt_text);
    prefix.insert(prefix.end(), pt.begin(), pt.end());
    auto sol = vocab.tokenize(problem.solution_text);
    if (static_cast<int>(prefix.size() + sol.size()) + 1 > lm.cfg.n_ctx) {
      fail_runtime("token_discrimination_eval: problem exceeds window: " + problem.id);
    }

    nn::KvCache lm_cache, ver_cache;
    lm_cache.init(lm.cfg);
    ver_cache.init(verifier.cfg);
    nn::StepScratch scratch;
    std::vector<float> logits(static_cast<size_t>(V));
    nn::prefill(lmm, lm_cache, prefix, logits.data(), scratch);
    nn::prefill(vm, ver_cache, prefix, nullptr, scratch);

    Slot& slot = slots[static_cast<size_t>(pi)];
    for (size_t t = 0; t < sol.size(); ++t) {
      int gt = sol[t];
      // highest-probability non-ground-truth token, lowest id on ties
      int alt = gt == 0 ? 1 : 0;
      for (int v = 0; v < V; ++v) {
        if (v == gt) continue;
        if (logits[static_cast<size_t>(v)] > logits[static_cast<size_t>(alt)]) alt = v;
      }
      std::array<int, 2> cands{gt, alt};
      float scores[2];
      nn::branch_batch(vm, ver_cache, cands, scores, scratch);
      double credit = scores[0] > scores[1] ? 1.0 : (scores[0] == scores[1] ? 0.5 : 0.0);
      slot.credit.push_back(credit);
      slot.t_index.push_back(static_cast<int>(t));

      int tok = gt;
      nn::KvCache* lc = &lm_cache;
      nn::KvCache* vc = &ver_cache;
      nn::step_batch(lmm, std::span<nn::KvCache* const>{&lc, 1}, std::span<const int>{&tok, 1},
                     logits.data(), scratch);
      nn::step_batch(vm, std::span<nn::KvCache* const>{&vc, 1}, std::span<const int>{&tok, 1},
                     nullptr, scratch);
    }
  });

  DiscriminationReport rep;
  double sum = 0;
  std::vector<std::pair<double, long>> bins;
  for (const auto& slot : slots) {
    for (size_t i = 0; i < slot.credit.size(); ++i) {
      sum += slot.credit[i];
      ++rep.positions;
      size_t bin = static_cast<size_t>(slot.t_index[i] / 8);
      if (bins.size() <= bin) bins.resize(bin + 1, {0.0, 0});
      bins[bin].first += slot.credit[i];
      bins[bin].second += 1;
    }
  }
  rep.accuracy = rep.positions > 0 ? sum / static_cast<double>(rep.positions) : 0.5;
  rep.wilson_low = wilson_lower_bound(rep.accuracy, rep.positions);
  for (const auto& [credit, count] : bins) {
    rep.bin_count.push_back(count);
    rep.bin_accuracy.push_back(count > 0 ? credit / static_cast<double>(count) : 0.0);
  }
  return rep;
}

double wilson_lower_bound(double acc, long n, double z) {
  if (n <= 0) return 0.0;
  double nn_ = static_cast<double>(n);
  double z2 = z * z;
  double denom = 1.0 + z2 / nn_;
  double center = acc + z2 / (2.0 * nn_);
  double rad = z * std::sqrt(acc * (1.0 - acc) / nn_ + z2 / (4.0 * nn_ * nn_));
  return (center - rad) / denom;
}

}  // namespace duet::verifier

#include "duet/decoding.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>

#include "duet/error.hpp"
#include "duet/rng.hpp"
#include "duet/task.hpp"

namespace duet::decoding {

namespace {
using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}
}  // namespace

void DecodeConfig::validate() const {
  if (!(alpha > 0.0 && alpha <= 1.0)) fail_validation("decode: alpha must be in (0,1]");
  if (beta < 0.0) fail_validation("decode: beta must be >= 0");
  if (max_tokens < 1) fail_validation("decode: max_tokens must be >= 1");
  if (strategy == Strategy::sample && !(temperature > 0)) {
    fail_validation("decode: sampling needs temperature > 0");
  }
}

std::vector<lm::TokenId> plausible_set(const std::vector<float>& logits, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) fail_validation("plausible_set: alpha must be in (0,1]");
  if (logits.empty()) fail_validation("plausible_set: empty logits");
  float maxv = logits[0];
  for (float z : logits) {
    if (!std::isfinite(z)) fail_validation("plausible_set: logits must be finite");
    maxv = std::max(maxv, z);
  }
  // alpha == 1 keeps exactly the argmax set (threshold == max).
  double threshold = std::log(alpha) + static_cast<double>(maxv);
  std::vector<lm::TokenId> out;
  for (int v = 0; v < static_cast<int>(logits.size()); ++v) {
    if (static_cast<double>(logits[static_cast<size_t>(v)]) >= threshold) out.push_back(v);
  }
  return out;
}

std::vector<float> combine_logits(const std::vector<float>& logits,
                                  const std::map<lm::TokenId, float>& scores, double beta,
                                  const std::vector<lm::TokenId>& plausible) {
  std::vector<float> out(logits.size(), -std::numeric_limits<float>::infinity());
  for (lm::TokenId v : plausible) {
    auto it = scores.find(v);
    if (it == scores.end()) {
      fail_runtime("combine_logits: missing score for plausible token " + std::to_string(v));
    }
    out[static_cast<size_t>(v)] =
        logits[static_cast<size_t>(v)] + static_cast<float>(beta) * it->second;
  }
  return out;
}

std::vector<float> mask_logits(const std::vector<float>& logits,
                               const std::vector<lm::TokenId>& plausible) {
  std::vector<float> out(logits.size(), -std::numeric_limits<float>::infinity());
  for (lm::TokenId v : plausible) out[static_cast<size_t>(v)] = logits[static_cast<size_t>(v)];
  return out;
}

std::vector<double> combined_distribution(const std::vector<float>& z_star, double temperature) {
  if (!(temperature > 0)) fail_validation("combined_distribution: temperature must be > 0");
  double maxv = -std::numeric_limits<double>::infinity();
  for (float z : z_star) maxv = std::max(maxv, static_cast<double>(z));
  std::vector<double> p(z_star.size(), 0.0);
  double sum = 0;
  for (size_t v = 0; v < z_star.size(); ++v) {
    if (std::isinf(z_star[v]) && z_star[v] < 0) continue;
    p[v] = std::exp((static_cast<double>(z_star[v]) - maxv) / temperature);
    sum += p[v];
  }
  for (auto& x : p) x /= sum;
  return p;
}

int argmax_combined(const std::vector<float>& z_star) {
  int best = -1;
  for (int v = 0; v < static_cast<int>(z_star.size()); ++v) {
    float z = z_star[static_cast<size_t>(v)];
    if (std::isinf(z) && z < 0) continue;
    if (best < 0 || z > z_star[static_cast<size_t>(best)]) best = v;
  }
  if (best < 0) fail_runtime("argmax_combined: fully masked logits");
  return best;
}

namespace {

int sample_from_distribution(const std::vector<double>& probs, Rng& rng) {
  double r = rng.next_double();
  double cum = 0;
  int last_positive = -1;
  for (int v = 0; v < static_cast<int>(probs.size()); ++v) {
    double p = probs[static_cast<size_t>(v)];
    if (p <= 0) continue;
    last_positive = v;
    cum += p;
    if (r < cum) return v;
  }
  return last_positive;
}

}  // namespace

std::pair<std::vector<double>, StepTrace> dual_step(const lm::LmEngine& engine,
                                                    const verifier::Scorer& scorer,
                                                    const lm::Context& context,
                                                    const DecodeConfig& cfg) {
  cfg.validate();
  auto t0 = Clock::now();
  auto logits = engine.forward_logits(context);
  auto plausible = plausible_set(logits, cfg.alpha);

  StepTrace trace;
  trace.t = 0;
  trace.set_size = static_cast<int>(plausible.size());
  trace.verifier_invoked = plausible.size() > 1;

  std::vector<float> z_star;
  if (trace.verifier_invoked) {
    double lm_ms = ms_since(t0);
    auto tv = Clock::now();
    auto scores = scorer.score_batch(context, plausible);
    trace.ms_verifier = ms_since(tv);
    std::map<lm::TokenId, float> score_map;
    for (size_t i = 0; i < plausible.size(); ++i) {
      score_map[plausible[i]] = scores[i];
      trace.scores.emplace_back(plausible[i], scores[i]);
    }
    auto tc = Clock::now();
    z_star = combine_logits(logits, score_map, cfg.beta, plausible);
    trace.ms_lm = lm_ms + ms_since(tc);
  } else {
    z_star = mask_logits(logits, plausible);
    trace.ms_lm = ms_since(t0);
  }

  double temp = cfg.strategy == Strategy::sample ? cfg.temperature : 1.0;
  return {combined_distribution(z_star, temp), trace};
}

DecodeResult decode(const lm::LmEngine& engine, const verifier::Scorer& scorer,
                    const lm::Context& prompt, const DecodeConfig& cfg) {
  cfg.validate();
  const auto& mc = engine.config();
  if (!engine.config().same_backbone(scorer.config())) {
    fail_validation("decode: LM and verifier dimensions differ");
  }
  if (prompt.size() > mc.n_ctx) fail_runtime("decode: prompt exceeds window");
  const int V = mc.vocab_size;

  auto t_total = Clock::now();
  nn::KvCache lm_cache, ver_cache;
  lm_cache.init(mc);
  ver_cache.init(scorer.config());
  nn::StepScratch scratch;

  std::vector<float> logits(static_cast<size_t>(V));
  auto t0 = Clock::now();
  nn::prefill(engine.infer_model(), lm_cache, prompt.ids, logits.data(), scratch);
  DecodeResult result;
  result.prefill_ms = ms_since(t0);

  std::vector<lm::TokenId> all_ids = prompt.ids;  // verifier context to catch up on
  Rng rng(cfg.rng_seed);
  int emitted = 0;

  while (true) {
    auto t_lm = Clock::now();
    StepTrace trace;
    trace.t = emitted;
    auto plausible = plausible_set(logits, cfg.alpha);
    trace.set_size = static_cast<int>(plausible.size());
    trace.verifier_invoked = plausible.size() > 1;
    double lm_ms = ms_since(t_lm);

    std::vector<float> z_star;
    if (trace.verifier_invoked) {
      auto t_ver = Clock::now();
      // Lazy catch-up: feed the verifier every token it has not seen yet.
      while (ver_cache.len < static_cast<int>(all_ids.size())) {
        int tok = all_ids[static_cast<size_t>(ver_cache.len)];
        nn::KvCache* vc = &ver_cache;
        nn::step_batch(scorer.infer_model(), std::span<nn::KvCache* const>{&vc, 1},
                       std::span<const int>{&tok, 1}, nullptr, scratch);
      }
      std::vector<float> scores(plausible.size());
      nn::branch_batch(scorer.infer_model(), ver_cache, plausible, scores.data(), scratch);
      trace.ms_verifier = ms_since(t_ver);

      auto t_comb = Clock::now();
      std::map<lm::TokenId, float> score_map;
      for (size_t i = 0; i < plausible.size(); ++i) {
        score_map[plausible[i]] = scores[i];
        trace.scores.emplace_back(plausible[i], scores[i]);
      }
      z_star = combine_logits(logits, score_map, cfg.beta, plausible);
      lm_ms += ms_since(t_comb);
    } else {
      auto t_mask = Clock::now();
      z_star = mask_logits(logits, plausible);
      lm_ms += ms_since(t_mask);
    }

    auto t_pick = Clock::now();
    int chosen;
    if (cfg.strategy == Strategy::greedy) {
      chosen = argmax_combined(z_star);
    } else {
      chosen = sample_from_distribution(combined_distribution(z_star, cfg.temperature), rng);
    }
    trace.chosen = chosen;
    result.continuation.token_ids.push_back(chosen);
    all_ids.push_back(chosen);
    ++emitted;

    bool eos = chosen == engine.vocab().eos_id;
    bool full = lm_cache.len >= mc.n_ctx;
    bool done = eos || emitted >= cfg.max_tokens || full;
    if (eos) result.continuation.terminated = true;
    if (!done) {
      nn::KvCache* lc = &lm_cache;
      nn::step_batch(engine.infer_model(), std::span<nn::KvCache* const>{&lc, 1},
                     std::span<const int>{&chosen, 1}, logits.data(), scratch);
    }
    trace.ms_lm = lm_ms + ms_since(t_pick);
    result.trace.push_back(std::move(trace));
    if (done) break;
  }

  result.continuation.text = engine.vocab().detokenize(result.continuation.token_ids);
  result.total_ms = ms_since(t_total);
  return result;
}

std::optional<long long> vote_majority(const std::vector<std::optional<long long>>& answers,
                                       std::map<long long, int>* votes_out) {
  std::map<long long, int> votes;
  for (const auto& a : answers) {
    if (a) votes[*a] += 1;
  }
  if (votes_out) *votes_out = votes;
  std::optional<long long> best;
  int best_count = 0;
  for (const auto& [value, count] : votes) {  // ascending keys: ties keep the lowest
    if (count > best_count) {
      best = value;
      best_count = count;
    }
  }
  return best;
}

SelfConsistencyResult self_consistency(const lm::LmEngine& engine,
                                       const verifier::Scorer* scorer,
                                       const lm::Context& prompt, const DecodeConfig& cfg,
                                       int m) {
  if (m < 1) fail_validation("self_consistency: m must be >= 1");
  if (cfg.strategy != Strategy::sample) {
    fail_validation("self_consistency: strategy must be sample");
  }
  cfg.validate();

  SelfConsistencyResult result;
  if (scorer) {
    for (int j = 0; j < m; ++j) {
      DecodeConfig per = cfg;
      per.rng_seed = seed_mix(cfg.rng_seed, static_cast<uint64_t>(j));
      auto decoded = decode(engine, *scorer, prompt, per);
      result.sample_texts.push_back(decoded.continuation.text);
    }
  } else {
    lm::SampleOptions opts;
    opts.n = m;
    opts.temperature = cfg.temperature;
    opts.rng_seed = cfg.rng_seed;  // sample j draws from seed_mix(rng_seed, j)
    opts.cap = cfg.max_tokens;
    for (auto& c : engine.sample_continuations(prompt, opts)) {
      result.sample_texts.push_back(std::move(c.text));
    }
  }
  for (const auto& text : result.sample_texts) {
    result.sample_answers.push_back(task::extract_answer(text));
  }
  result.answer = vote_majority(result.sample_answers, &result.votes);
  return result;
}

void save_trace_jsonl(const std::vector<StepTrace>& trace, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_runtime("cannot open for writing: " + path);
  for (const auto& s : trace) {
    nlohmann::ordered_json j;
    j["t"] = s.t;
    j["set_size"] = s.set_size;
    j["invoked"] = s.verifier_invoked;
    j["chosen"] = s.chosen;
    j["ms_lm"] = s.ms_lm;
    j["ms_verifier"] = s.ms_verifier;
    out << j.dump() << '\n';
  }
  if (!out) fail_runtime("write failed: " + path);
}

}  // namespace duet::decoding

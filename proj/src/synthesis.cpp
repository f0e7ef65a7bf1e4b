#include "duet/synthesis.hpp"

#include <algorithm>
#include <cmath>

#include "duet/error.hpp"
#include "duet/parallel.hpp"
#include "duet/rng.hpp"

namespace duet::synthesis {

namespace {
constexpr uint64_t kNegativeStream = 0x4E39;
}

void SynthesisConfig::validate() const {
  if (n_rollouts < 1) fail_validation("synthesis: n_rollouts must be >= 1");
  if (top_k < 2) fail_validation("synthesis: top_k must be >= 2");
  if (threshold < 0.0 || threshold > 1.0) fail_validation("synthesis: threshold must be in [0,1]");
  if (!(rollout_temperature > 0)) fail_validation("synthesis: rollout temperature must be > 0");
  if (rollout_cap < 1) fail_validation("synthesis: rollout_cap must be >= 1");
  if (pool == NegativePool::alpha_set && !(alpha > 0.0 && alpha <= 1.0)) {
    fail_validation("synthesis: alpha must be in (0,1] for the alpha_set pool");
  }
}

std::vector<lm::TokenId> candidate_set(const std::vector<float>& logits, int k,
                                       lm::TokenId ground_truth) {
  if (k < 1) fail_validation("candidate_set: k must be >= 1");
  const int V = static_cast<int>(logits.size());
  if (V < k + 1) {
    fail_validation("candidate_set: vocabulary smaller than k+1 (" + std::to_string(V) +
                    " < " + std::to_string(k + 1) + ")");
  }
  std::vector<lm::TokenId> order(static_cast<size_t>(V));
  for (int v = 0; v < V; ++v) order[static_cast<size_t>(v)] = v;
  std::partial_sort(order.begin(), order.begin() + k + 1, order.end(),
                    [&](lm::TokenId a, lm::TokenId b) {
                      float za = logits[static_cast<size_t>(a)];
                      float zb = logits[static_cast<size_t>(b)];
                      return za > zb || (za == zb && a < b);
                    });
  std::vector<lm::TokenId> top(order.begin(), order.begin() + k + 1);
  auto it = std::find(top.begin(), top.end(), ground_truth);
  if (it != top.end()) {
    top.erase(it);
  } else {
    top.pop_back();
  }
  return top;
}

std::vector<lm::TokenId> alpha_candidate_set(const std::vector<float>& logits, double alpha,
                                             lm::TokenId ground_truth) {
  if (!(alpha > 0.0 && alpha <= 1.0)) fail_validation("alpha_candidate_set: alpha in (0,1]");
  float maxv = logits[0];
  for (float z : logits) maxv = std::max(maxv, z);
  float threshold = static_cast<float>(std::log(alpha)) + maxv;
  std::vector<lm::TokenId> out;
  for (int v = 0; v < static_cast<int>(logits.size()); ++v) {
    if (v != ground_truth && logits[static_cast<size_t>(v)] >= threshold) out.push_back(v);
  }
  return out;
}

double assess_quality(const lm::LmEngine& engine, const lm::Context& prefix,
                      lm::TokenId candidate, const task::Problem& problem,
                      const SynthesisConfig& cfg) {
  cfg.validate();
  std::vector<lm::TokenId> ids = prefix.ids;
  ids.push_back(candidate);
  lm::Context start = lm::Context::from_tokens(std::move(ids), prefix.max_len,
                                               engine.vocab().bos_id);
  lm::SampleOptions opts;
  opts.n = cfg.n_rollouts;
  opts.temperature = cfg.rollout_temperature;
  opts.rng_seed = cfg.rng_seed;
  opts.cap = cfg.rollout_cap;
  auto rollouts = engine.sample_continuations(start, opts);

  std::string stem = engine.vocab().detokenize(start.ids);
  int correct = 0;
  for (const auto& c : rollouts) {
    if (task::check_answer(problem, stem + c.text)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(cfg.n_rollouts);
}

std::optional<lm::TokenId> sample_negative(const QualityMap& qmap, double threshold,
                                           uint64_t rng_seed) {
  std::vector<lm::TokenId> eligible;  // map iteration keeps ids ascending
  for (const auto& [token, q] : qmap.entries) {
    if (q < threshold) eligible.push_back(token);
  }
  if (eligible.empty()) return std::nullopt;
  Rng rng(rng_seed);
  return eligible[rng.next_below(static_cast<uint32_t>(eligible.size()))];
}

std::vector<verifier::PreferencePair> synthesize_instance(const lm::LmEngine& engine,
                                                          const task::Problem& problem,
                                                          const SynthesisConfig& cfg,
                                                          InstanceStats* stats) {
  cfg.validate();
  const auto& vocab = engine.vocab();
  const int n_ctx = engine.config().n_ctx;
  uint64_t instance_seed = seed_mix(cfg.rng_seed, hash_str(problem.id));

  std::vector<lm::TokenId> context;
  context.push_back(vocab.bos_id);
  auto pt = vocab.tokenize(problem.prompt_text);
  context.insert(context.end(), pt.begin(), pt.end());
  auto sol = vocab.tokenize(problem.solution_text);
  if (static_cast<int>(context.size() + sol.size()) + 1 > n_ctx) {
    fail_runtime("synthesize_instance: problem exceeds window: " + problem.id);
  }

  std::vector<verifier::PreferencePair> pairs;
  if (stats) {
    *stats = InstanceStats{};
    stats->q_histogram.assign(static_cast<size_t>(cfg.n_rollouts) + 1, 0);
  }

  for (size_t t = 0; t < sol.size(); ++t) {
    lm::TokenId gt = sol[t];
    lm::Context ctx = lm::Context::from_tokens(context, n_ctx, vocab.bos_id);
    auto logits = engine.forward_logits(ctx);
    std::vector<lm::TokenId> candidates =
        cfg.pool == NegativePool::top_k ? candidate_set(logits, cfg.top_k, gt)
                                        : alpha_candidate_set(logits, cfg.alpha, gt);

    QualityMap qmap;
    qmap.position = static_cast<int>(t);
    for (lm::TokenId cand : candidates) {
      SynthesisConfig per = cfg;
      per.rng_seed = seed_mix(instance_seed, t, static_cast<uint64_t>(cand));
      double q = assess_quality(engine, ctx, cand, problem, per);
      qmap.entries[cand] = q;
      ++qmap.assessed_count;
      if (stats) {
        stats->q_histogram[static_cast<size_t>(std::llround(q * cfg.n_rollouts))] += 1;
      }
    }

    auto neg = sample_negative(qmap, cfg.threshold,
                               seed_mix(instance_seed, t, kNegativeStream));
    if (stats) ++stats->positions;
    if (neg) {
      verifier::PreferencePair pair;
      pair.context_ids = context;
      pair.pos = gt;
      pair.neg = *neg;
      pair.t = static_cast<int>(t);
      pair.source_id = problem.id;
      pair.neg_quality = qmap.entries.at(*neg);
      pairs.push_back(std::move(pair));
      if (stats) ++stats->pairs;
    } else if (stats) {
      ++stats->skipped;
    }
    context.push_back(gt);
  }
  return pairs;
}

nlohmann::ordered_json provenance_json(const SynthesisConfig& cfg) {
  nlohmann::ordered_json j;
  j["n_rollouts"] = cfg.n_rollouts;
  j["top_k"] = cfg.top_k;
  j["threshold"] = cfg.threshold;
  j["rollout_temperature"] = cfg.rollout_temperature;
  j["rollout_cap"] = cfg.rollout_cap;
  j["rng_seed"] = cfg.rng_seed;
  j["pool"] = cfg.pool == NegativePool::top_k ? "top_k" : "alpha_set";
  j["alpha"] = cfg.alpha;
  return j;
}

verifier::PreferenceDataset synthesize_dataset(const lm::LmEngine& engine,
                                               const task::Corpus& corpus,
                                               const SynthesisConfig& cfg, int workers,
                                               DatasetStats* stats, const InstanceSink& sink,
                                               int start_index) {
  cfg.validate();
  if (corpus.problems.empty()) fail_validation("synthesize_dataset: empty corpus");
  const int n = static_cast<int>(corpus.problems.size());
  if (start_index < 0 || start_index > n) fail_validation("synthesize_dataset: bad start index");

  verifier::PreferenceDataset ds;
  ds.provenance = provenance_json(cfg);
  DatasetStats local;
  local.q_histogram.assign(static_cast<size_t>(cfg.n_rollouts) + 1, 0);

  // Chunked so completed instances flush in order while later ones compute.
  const int chunk = std::max(1, workers) * 4;
  std::vector<std::vector<verifier::PreferencePair>> chunk_pairs(static_cast<size_t>(chunk));
  std::vector<InstanceStats> chunk_stats(static_cast<size_t>(chunk));
  for (int lo = start_index; lo < n; lo += chunk) {
    int hi = std::min(n, lo + chunk);
    parallel_for(hi - lo, workers, [&](int off) {
      chunk_pairs[static_cast<size_t>(off)] = synthesize_instance(
          engine, corpus.problems[static_cast<size_t>(lo + off)], cfg,
          &chunk_stats[static_cast<size_t>(off)]);
    });
    for (int off = 0; off < hi - lo; ++off) {
      const auto& problem = corpus.problems[static_cast<size_t>(lo + off)];
      const auto& pairs = chunk_pairs[static_cast<size_t>(off)];
      const auto& st = chunk_stats[static_cast<size_t>(off)];
      local.positions += st.positions;
      local.pairs += st.pairs;
      local.skipped += st.skipped;
      local.instances += 1;
      if (pairs.empty()) local.instances_without_pairs += 1;
      for (size_t b = 0; b < st.q_histogram.size(); ++b) {
        local.q_histogram[b] += st.q_histogram[b];
      }
      local.pairs_per_instance.emplace_back(problem.id, st.pairs);
      ds.pairs.insert(ds.pairs.end(), pairs.begin(), pairs.end());
      if (sink) sink(lo + off, problem, pairs, st);
    }
  }
  if (stats) *stats = std::move(local);
  return ds;
}

task::Corpus self_generated_corpus(const lm::LmEngine& engine, const task::Corpus& corpus,
                                   int n_samples, double temperature, uint64_t rng_seed,
                                   int workers, int rollout_cap) {
  if (n_samples < 1) fail_validation("self_generated_corpus: n_samples must be >= 1");
  std::vector<std::optional<std::string>> kept(corpus.problems.size());
  parallel_for(static_cast<int>(corpus.problems.size()), workers, [&](int i) {
    const auto& problem = corpus.problems[static_cast<size_t>(i)];
    lm::Context prompt = engine.prompt_context(problem);
    lm::SampleOptions opts;
    opts.n = n_samples;
    opts.temperature = temperature;
    opts.rng_seed = seed_mix(rng_seed, hash_str(problem.id));
    opts.cap = rollout_cap;
    auto samples = engine.sample_continuations(prompt, opts);
    for (const auto& s : samples) {
      if (task::check_answer(problem, s.text)) {
        kept[static_cast<size_t>(i)] = s.text;
        break;
      }
    }
  });

  task::Corpus out;
  out.split_tag = corpus.split_tag;
  for (size_t i = 0; i < corpus.problems.size(); ++i) {
    if (!kept[i]) continue;
    task::Problem p = corpus.problems[i];
    p.solution_text = *kept[i];
    out.problems.push_back(std::move(p));
  }
  return out;
}

}  // namespace duet::synthesis

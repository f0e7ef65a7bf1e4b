#include "duet/lm.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "duet/error.hpp"
#include "duet/nn/graph.hpp"
#include "duet/parallel.hpp"

namespace duet::lm {

namespace {
using Clock = std::chrono::steady_clock;

constexpr int kMicrobatchSeqs = 4;  // fixed grain: results do not depend on worker count

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}
}  // namespace

Context Context::from_tokens(std::vector<TokenId> ids, int max_len, TokenId bos) {
  if (ids.empty() || ids.front() != bos) fail_validation("context must start with BOS");
  if (static_cast<int>(ids.size()) > max_len) {
    fail_validation("context exceeds window (" + std::to_string(ids.size()) + " > " +
                    std::to_string(max_len) + ")");
  }
  Context c;
  c.ids = std::move(ids);
  c.max_len = max_len;
  return c;
}

Context Context::from_text(const Vocabulary& vocab, std::string_view text, int max_len) {
  std::vector<TokenId> ids;
  ids.push_back(vocab.bos_id);
  auto toks = vocab.tokenize(text);
  ids.insert(ids.end(), toks.begin(), toks.end());
  return from_tokens(std::move(ids), max_len, vocab.bos_id);
}

LmEngine::LmEngine(const LmParams& params) : model_(nn::InferModel::from_params(params)) {
  if (params.cfg.head != nn::HeadKind::lm) {
    fail_validation("LmEngine requires an lm-headed checkpoint");
  }
}

LogitsVector LmEngine::forward_logits(const Context& context) const {
  if (context.ids.empty()) fail_validation("forward_logits: empty context");
  if (context.size() > model_.cfg.n_ctx) fail_runtime("forward_logits: context exceeds window");
  nn::KvCache cache;
  cache.init(model_.cfg);
  nn::StepScratch scratch;
  LogitsVector logits(static_cast<size_t>(model_.cfg.vocab_size));
  nn::prefill(model_, cache, context.ids, logits.data(), scratch);
  return logits;
}

int argmax_token(std::span<const float> logits) {
  int best = 0;
  for (int v = 1; v < static_cast<int>(logits.size()); ++v) {
    if (logits[static_cast<size_t>(v)] > logits[static_cast<size_t>(best)]) best = v;
  }
  return best;
}

int sample_token(std::span<const float> logits, double temperature, Rng& rng) {
  if (!(temperature > 0)) fail_validation("sample_token: temperature must be > 0");
  const int n = static_cast<int>(logits.size());
  double maxv = logits[0];
  for (int v = 1; v < n; ++v) maxv = std::max(maxv, static_cast<double>(logits[static_cast<size_t>(v)]));
  std::vector<double> p(static_cast<size_t>(n));
  double sum = 0;
  for (int v = 0; v < n; ++v) {
    p[static_cast<size_t>(v)] = std::exp((static_cast<double>(logits[static_cast<size_t>(v)]) - maxv) / temperature);
    sum += p[static_cast<size_t>(v)];
  }
  double r = rng.next_double() * sum;
  double cum = 0;
  for (int v = 0; v < n; ++v) {
    cum += p[static_cast<size_t>(v)];
    if (r < cum) return v;
  }
  return n - 1;
}

std::vector<Continuation> LmEngine::sample_continuations(const Context& prefix,
                                                         const SampleOptions& opts) const {
  if (opts.n < 1) fail_validation("sample_continuations: n must be >= 1");
  if (!opts.greedy && !(opts.temperature > 0)) {
    fail_validation("sample_continuations: temperature must be > 0 (or use greedy)");
  }
  if (opts.cap < 1) fail_validation("sample_continuations: cap must be >= 1");
  if (prefix.size() > model_.cfg.n_ctx) fail_runtime("sample_continuations: prefix exceeds window");

  const int n = opts.n;
  const int V = model_.cfg.vocab_size;
  nn::StepScratch scratch;

  nn::KvCache base;
  base.init(model_.cfg);
  LogitsVector base_logits(static_cast<size_t>(V));
  nn::prefill(model_, base, prefix.ids, base_logits.data(), scratch);

  std::vector<nn::KvCache> caches(static_cast<size_t>(n));
  std::vector<Continuation> outs(static_cast<size_t>(n));
  std::vector<Rng> rngs;
  rngs.reserve(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    caches[static_cast<size_t>(j)].init(model_.cfg);
    caches[static_cast<size_t>(j)].copy_from(base);
    rngs.emplace_back(seed_mix(opts.rng_seed, static_cast<uint64_t>(j)));
  }

  // Each live rollout picks its next token from its current logits row, then
  // all live rollouts advance together. Per-rollout RNG streams keep results
  // identical to running each rollout alone.
  std::vector<int> live(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) live[static_cast<size_t>(j)] = j;
  std::vector<float> logits_rows(static_cast<size_t>(n) * V, 0.0f);
  for (int j = 0; j < n; ++j) {
    std::copy(base_logits.begin(), base_logits.end(),
              logits_rows.begin() + static_cast<size_t>(j) * V);
  }

  int emitted = 0;
  while (!live.empty() && emitted < opts.cap) {
    std::vector<int> chosen(live.size());
    for (size_t i = 0; i < live.size(); ++i) {
      int j = live[i];
      std::span<const float> row{logits_rows.data() + static_cast<size_t>(j) * V,
                                 static_cast<size_t>(V)};
      chosen[i] = opts.greedy ? argmax_token(row)
                              : sample_token(row, opts.temperature, rngs[static_cast<size_t>(j)]);
      outs[static_cast<size_t>(j)].token_ids.push_back(chosen[i]);
    }
    ++emitted;

    std::vector<int> next_live;
    std::vector<nn::KvCache*> step_caches;
    std::vector<int> step_tokens;
    for (size_t i = 0; i < live.size(); ++i) {
      int j = live[i];
      bool eos = chosen[i] == model_.vocab.eos_id;
      bool full = caches[static_cast<size_t>(j)].len >= model_.cfg.n_ctx;
      if (eos) {
        outs[static_cast<size_t>(j)].terminated = true;
        continue;
      }
      if (emitted >= opts.cap || full) continue;  // cap or window reached, token kept
      next_live.push_back(j);
      step_caches.push_back(&caches[static_cast<size_t>(j)]);
      step_tokens.push_back(chosen[i]);
    }
    if (!step_caches.empty()) {
      std::vector<float> fresh(static_cast<size_t>(step_caches.size()) * V);
      nn::step_batch(model_, step_caches, step_tokens, fresh.data(), scratch);
      for (size_t i = 0; i < next_live.size(); ++i) {
        std::copy(fresh.begin() + static_cast<size_t>(i) * V,
                  fresh.begin() + static_cast<size_t>(i + 1) * V,
                  logits_rows.begin() + static_cast<size_t>(next_live[i]) * V);
      }
    }
    live = std::move(next_live);
  }

  for (auto& c : outs) c.text = model_.vocab.detokenize(c.token_ids);
  return outs;
}

Continuation LmEngine::greedy_decode(const Context& prompt, int cap) const {
  SampleOptions opts;
  opts.n = 1;
  opts.greedy = true;
  opts.cap = cap;
  return sample_continuations(prompt, opts).front();
}

Context LmEngine::prompt_context(const task::Problem& problem) const {
  return Context::from_text(model_.vocab, problem.prompt_text, model_.cfg.n_ctx);
}

std::vector<TokenId> problem_tokens(const Vocabulary& vocab, const task::Problem& p) {
  std::vector<TokenId> ids;
  ids.push_back(vocab.bos_id);
  auto pt = vocab.tokenize(p.prompt_text);
  ids.insert(ids.end(), pt.begin(), pt.end());
  auto st = vocab.tokenize(p.solution_text);
  ids.insert(ids.end(), st.begin(), st.end());
  ids.push_back(vocab.eos_id);
  return ids;
}

namespace {

// Pads sequences to a common length and shifts targets by one.
nn::SeqBatch make_batch(const Vocabulary& vocab,
                        const std::vector<std::vector<TokenId>>& seqs) {
  nn::SeqBatch b;
  b.n_seq = static_cast<int>(seqs.size());
  b.t_max = 0;
  for (const auto& s : seqs) b.t_max = std::max(b.t_max, static_cast<int>(s.size()) - 1);
  b.ids.assign(static_cast<size_t>(b.n_seq) * b.t_max, vocab.pad_id);
  b.targets.assign(static_cast<size_t>(b.n_seq) * b.t_max, -1);
  for (int s = 0; s < b.n_seq; ++s) {
    const auto& seq = seqs[static_cast<size_t>(s)];
    int len = static_cast<int>(seq.size()) - 1;  // inputs drop the final token
    for (int t = 0; t < len; ++t) {
      b.ids[static_cast<size_t>(s) * b.t_max + t] = seq[static_cast<size_t>(t)];
      b.targets[static_cast<size_t>(s) * b.t_max + t] = seq[static_cast<size_t>(t) + 1];
    }
  }
  return b;
}

// Summed CE and grads over a batch, computed in fixed microbatch slots so the
// result is independent of the worker count.
std::pair<double, long> batch_loss_grad(const nn::Params<float>& params, const Vocabulary& vocab,
                                        const std::vector<std::vector<TokenId>>& seqs,
                                        std::vector<float>* grad, int workers) {
  const int n_slots =
      (static_cast<int>(seqs.size()) + kMicrobatchSeqs - 1) / kMicrobatchSeqs;
  std::vector<double> slot_loss(static_cast<size_t>(n_slots), 0.0);
  std::vector<long> slot_count(static_cast<size_t>(n_slots), 0);
  std::vector<std::vector<float>> slot_grad(static_cast<size_t>(n_slots));

  parallel_for(n_slots, workers, [&](int slot) {
    size_t lo = static_cast<size_t>(slot) * kMicrobatchSeqs;
    size_t hi = std::min(seqs.size(), lo + kMicrobatchSeqs);
    std::vector<std::vector<TokenId>> part(seqs.begin() + static_cast<long>(lo),
                                           seqs.begin() + static_cast<long>(hi));
    nn::SeqBatch batch = make_batch(vocab, part);
    std::vector<float>* g = nullptr;
    if (grad) {
      slot_grad[static_cast<size_t>(slot)].assign(params.layout.total, 0.0f);
      g = &slot_grad[static_cast<size_t>(slot)];
    }
    auto [loss, count] = nn::lm_ce_forward_backward(params, batch, g);
    slot_loss[static_cast<size_t>(slot)] = loss;
    slot_count[static_cast<size_t>(slot)] = count;
  });

  double loss = 0;
  long count = 0;
  for (int s = 0; s < n_slots; ++s) {
    loss += slot_loss[static_cast<size_t>(s)];
    count += slot_count[static_cast<size_t>(s)];
    if (grad) {
      const auto& sg = slot_grad[static_cast<size_t>(s)];
      for (size_t i = 0; i < grad->size(); ++i) (*grad)[i] += sg[i];
    }
  }
  return {loss, count};
}

}  // namespace

double corpus_cross_entropy(const LmParams& params, std::span<const task::Problem> problems) {
  if (problems.empty()) fail_validation("corpus_cross_entropy: empty problem set");
  std::vector<std::vector<TokenId>> seqs;
  seqs.reserve(problems.size());
  for (const auto& p : problems) seqs.push_back(problem_tokens(params.vocab, p));
  auto [loss, count] = batch_loss_grad(params, params.vocab, seqs, nullptr, 1);
  return loss / static_cast<double>(count);
}

LmParams train_lm(const task::Corpus& corpus, const nn::ModelConfig& cfg,
                  const Vocabulary& vocab, const LmTrainConfig& train_cfg,
                  LmTrainReport* report, const LmParams* init) {
  if (corpus.problems.empty()) fail_validation("train_lm: empty corpus");
  if (train_cfg.batch_size < 1) fail_validation("train_lm: batch_size must be >= 1");

  LmParams params;
  if (init) {
    if (!init->cfg.same_backbone(cfg) || init->cfg.head != nn::HeadKind::lm ||
        init->vocab.symbols != vocab.symbols) {
      fail_runtime("train_lm: init checkpoint architecture does not match the configuration");
    }
    params = *init;
  } else {
    params = nn::init_params<float>(cfg, vocab, train_cfg.seed);
  }

  std::vector<std::vector<TokenId>> seqs;
  seqs.reserve(corpus.problems.size());
  for (const auto& p : corpus.problems) {
    auto toks = problem_tokens(vocab, p);
    if (static_cast<int>(toks.size()) > cfg.n_ctx) {
      fail_validation("train_lm: problem " + p.id + " exceeds the context window");
    }
    seqs.push_back(std::move(toks));
  }

  size_t n_val = std::max<size_t>(1, static_cast<size_t>(
                                         std::llround(train_cfg.val_fraction *
                                                      static_cast<double>(seqs.size()))));
  if (n_val >= seqs.size()) n_val = seqs.size() > 1 ? seqs.size() - 1 : 0;
  size_t n_train = seqs.size() - n_val;
  std::vector<std::vector<TokenId>> val_seqs(seqs.begin() + static_cast<long>(n_train),
                                             seqs.end());

  auto val_ce = [&]() -> double {
    if (val_seqs.empty()) return 0.0;
    auto [loss, count] = batch_loss_grad(params, vocab, val_seqs, nullptr, train_cfg.workers);
    return loss / static_cast<double>(count);
  };

  if (report) {
    report->curve.clear();
    report->val_curve.clear();
    report->init_val_ce = val_ce();
    report->val_curve.emplace_back(0, report->init_val_ce);
  }

  nn::Adam adam(params.layout.total, train_cfg.adam);
  std::vector<float> grad(params.layout.total, 0.0f);
  auto t0 = Clock::now();

  for (int step = 0; step < train_cfg.steps; ++step) {
    Rng rng(seed_mix(train_cfg.seed, 0xBA7C4, static_cast<uint64_t>(step)));
    std::vector<std::vector<TokenId>> batch;
    batch.reserve(static_cast<size_t>(train_cfg.batch_size));
    for (int i = 0; i < train_cfg.batch_size; ++i) {
      batch.push_back(seqs[rng.next_below(static_cast<uint32_t>(n_train))]);
    }

    std::fill(grad.begin(), grad.end(), 0.0f);
    auto [loss_sum, count] = batch_loss_grad(params, vocab, batch, &grad, train_cfg.workers);
    double loss = loss_sum / static_cast<double>(count);
    if (!std::isfinite(loss)) {
      fail_runtime("train_lm: training diverged (non-finite loss) at step " +
                   std::to_string(step));
    }
    float inv = 1.0f / static_cast<float>(count);
    for (auto& g : grad) g *= inv;
    nn::clip_grad_norm(grad, train_cfg.grad_clip);
    double lr = nn::lr_schedule(train_cfg.lr, step, train_cfg.steps, train_cfg.warmup);
    adam.step(params.data, grad, lr);

    if (report) {
      report->curve.push_back({step, loss, lr, ms_since(t0)});
      if (train_cfg.val_every > 0 &&
          ((step + 1) % train_cfg.val_every == 0 || step + 1 == train_cfg.steps)) {
        report->val_curve.emplace_back(step + 1, val_ce());
      }
    }
  }

  if (report) report->final_val_ce = train_cfg.steps > 0 ? val_ce() : report->init_val_ce;
  return params;
}

}  // namespace duet::lm

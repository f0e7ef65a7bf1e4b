#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "duet/error.hpp"
#include "duet/lm.hpp"
#include "duet/nn/graph.hpp"
#include "duet/nn/infer.hpp"
#include "duet/nn/model.hpp"
#include "duet/rng.hpp"
#include "toy_models.hpp"

using namespace duet;

namespace {

nn::ModelConfig small_config(const lm::Vocabulary& vocab) {
  nn::ModelConfig cfg;
  cfg.n_layer = 2;
  cfg.d_model = 16;
  cfg.n_head = 2;
  cfg.d_ff = 32;
  cfg.n_ctx = 16;
  cfg.vocab_size = vocab.size();
  return cfg;
}

// Random parameters with a non-zero head so gradients reach the backbone.
template <typename T>
nn::Params<T> randomized_params(const nn::ModelConfig& cfg, const lm::Vocabulary& vocab,
                                uint64_t seed) {
  auto p = nn::init_params<T>(cfg, vocab, seed);
  Rng rng(seed_mix(seed, 0xABC));
  for (auto& v : p.data) v += static_cast<T>(0.05 * rng.normal());
  return p;
}

nn::SeqBatch random_seq_batch(const nn::ModelConfig& cfg, uint64_t seed, int n_seq, int t_max) {
  nn::SeqBatch b;
  b.n_seq = n_seq;
  b.t_max = t_max;
  Rng rng(seed);
  b.ids.resize(static_cast<size_t>(n_seq) * t_max);
  b.targets.resize(static_cast<size_t>(n_seq) * t_max);
  for (size_t i = 0; i < b.ids.size(); ++i) {
    b.ids[i] = rng.uniform_int(0, cfg.vocab_size - 1);
    b.targets[i] = rng.next_double() < 0.8 ? rng.uniform_int(0, cfg.vocab_size - 1) : -1;
  }
  return b;
}

nn::ScoreBatch random_pair_batch(const nn::ModelConfig& cfg, uint64_t seed, int n_pairs) {
  nn::ScoreBatch b;
  b.n_seq = 2 * n_pairs;
  b.t_max = 8;
  Rng rng(seed);
  b.ids.assign(static_cast<size_t>(b.n_seq) * b.t_max, 2);
  b.last.resize(static_cast<size_t>(b.n_seq));
  for (int i = 0; i < n_pairs; ++i) {
    int ctx_len = rng.uniform_int(2, 6);
    std::vector<int> ctx(static_cast<size_t>(ctx_len));
    ctx[0] = 0;
    for (int t = 1; t < ctx_len; ++t) ctx[static_cast<size_t>(t)] = rng.uniform_int(3, cfg.vocab_size - 1);
    int pos = rng.uniform_int(3, cfg.vocab_size - 1);
    int neg = pos;
    while (neg == pos) neg = rng.uniform_int(3, cfg.vocab_size - 1);
    for (int which = 0; which < 2; ++which) {
      size_t row = static_cast<size_t>(2 * i + which) * b.t_max;
      for (int t = 0; t < ctx_len; ++t) b.ids[row + static_cast<size_t>(t)] = ctx[static_cast<size_t>(t)];
      b.ids[row + static_cast<size_t>(ctx_len)] = which == 0 ? pos : neg;
      b.last[static_cast<size_t>(2 * i + which)] = ctx_len;
    }
  }
  return b;
}

// Central finite differences on `n_coords` coordinates with step h.
template <typename LossFn>
void finite_difference_check(nn::Params<double>& p, const std::vector<double>& grad,
                             LossFn loss_fn, uint64_t seed, int n_coords,
                             const std::vector<size_t>& forced_coords = {}) {
  Rng rng(seed);
  const double h = 1e-4;
  std::vector<size_t> coords = forced_coords;
  while (static_cast<int>(coords.size()) < n_coords) {
    coords.push_back(rng.next_u64() % p.data.size());
  }
  for (size_t idx : coords) {
    double orig = p.data[idx];
    p.data[idx] = orig + h;
    double lp = loss_fn(p);
    p.data[idx] = orig - h;
    double lm_ = loss_fn(p);
    p.data[idx] = orig;
    double fd = (lp - lm_) / (2 * h);
    double ad = grad[idx];
    double denom = std::max({std::abs(fd), std::abs(ad), 1e-8});
    double rel = std::abs(fd - ad) / denom;
    INFO("coord " << idx << " fd=" << fd << " ad=" << ad);
    if (std::abs(fd) < 1e-10 && std::abs(ad) < 1e-10) continue;
    CHECK(rel < 1e-3);
  }
}

}  // namespace

TEST_CASE("parameter layout and initialization invariants") {
  auto vocab = lm::Vocabulary::task_default();
  auto cfg = small_config(vocab);
  auto p = nn::init_params<float>(cfg, vocab, 1);
  size_t total = 0;
  for (const auto& t : p.layout.tensors) {
    CHECK(t.offset == total);
    total += t.numel;
  }
  CHECK(total == p.layout.total);
  for (float v : p.tensor("lm_head.w")) CHECK(v == 0.0f);
  for (float v : p.tensor("lnf.g")) CHECK(v == 1.0f);
  for (float v : p.data) CHECK(std::isfinite(v));

  cfg.head = nn::HeadKind::scalar;
  auto vp = nn::init_params<float>(cfg, vocab, 1);
  CHECK(vp.layout.has("score_head.w"));
  CHECK(!vp.layout.has("lm_head.w"));
}

TEST_CASE("checkpoint round-trip and header validation") {
  auto vocab = lm::Vocabulary::task_default();
  auto cfg = small_config(vocab);
  auto p = randomized_params<float>(cfg, vocab, 3);
  auto dir = std::filesystem::temp_directory_path() / "duet_model_test";
  std::filesystem::create_directories(dir);
  std::string path = (dir / "m.ckpt").string();
  nn::save_checkpoint(p, path);
  auto q = nn::load_checkpoint(path);
  CHECK(q.cfg.same_backbone(p.cfg));
  CHECK(q.vocab.symbols == p.vocab.symbols);
  REQUIRE(q.data.size() == p.data.size());
  CHECK(std::equal(p.data.begin(), p.data.end(), q.data.begin()));

  CHECK_THROWS_AS(nn::load_checkpoint(path, nn::HeadKind::scalar), Error);
  CHECK_THROWS_AS(nn::load_checkpoint((dir / "missing.ckpt").string()), Error);

  // corrupt magic
  {
    std::string bad = (dir / "bad.ckpt").string();
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    bytes[0] = 'X';
    std::ofstream out(bad, std::ios::binary);
    out << bytes;
    out.close();
    CHECK_THROWS_AS(nn::load_checkpoint(bad), Error);
  }
  // truncated data
  {
    std::string bad = (dir / "trunc.ckpt").string();
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    bytes.resize(bytes.size() - 64);
    std::ofstream out(bad, std::ios::binary);
    out << bytes;
    out.close();
    CHECK_THROWS_AS(nn::load_checkpoint(bad), Error);
  }
}

TEST_CASE("LM cross-entropy gradient matches finite differences") {
  auto vocab = lm::Vocabulary::task_default();
  auto cfg = small_config(vocab);
  auto p = randomized_params<double>(cfg, vocab, 7);
  auto batch = random_seq_batch(cfg, 11, 3, 9);

  std::vector<double> grad(p.layout.total, 0.0);
  auto [loss, count] = nn::lm_ce_forward_backward(p, batch, &grad);
  CHECK(count > 0);
  CHECK(std::isfinite(loss));

  finite_difference_check(
      p, grad,
      [&](const nn::Params<double>& q) {
        return nn::lm_ce_forward_backward<double>(q, batch, nullptr).first;
      },
      13, 20);
}

TEST_CASE("pairwise loss gradient matches finite differences, including the head") {
  auto vocab = lm::Vocabulary::task_default();
  auto cfg = small_config(vocab);
  cfg.head = nn::HeadKind::scalar;
  auto p = randomized_params<double>(cfg, vocab, 17);
  auto batch = random_pair_batch(cfg, 19, 6);

  std::vector<double> grad(p.layout.total, 0.0);
  double loss = nn::pairwise_forward_backward(p, batch, &grad);
  CHECK(std::isfinite(loss));

  std::vector<size_t> forced;
  const auto& hw = p.layout.spec("score_head.w");
  const auto& hb = p.layout.spec("score_head.b");
  for (int i = 0; i < 4; ++i) forced.push_back(hw.offset + static_cast<size_t>(i));
  forced.push_back(hb.offset);

  finite_difference_check(
      p, grad,
      [&](const nn::Params<double>& q) {
        return nn::pairwise_forward_backward<double>(q, batch, nullptr);
      },
      23, 20, forced);
}

TEST_CASE("perturbing a token never changes logits at earlier positions") {
  auto vocab = lm::Vocabulary::task_default();
  auto cfg = small_config(vocab);
  auto p = randomized_params<float>(cfg, vocab, 29);
  auto batch = random_seq_batch(cfg, 31, 2, 10);

  std::vector<float> logits_a, logits_b;
  nn::lm_ce_forward_backward<float>(p, batch, nullptr, nullptr, &logits_a);
  const int perturb_pos = 6;
  auto batch2 = batch;
  batch2.ids[static_cast<size_t>(perturb_pos)] =
      (batch2.ids[static_cast<size_t>(perturb_pos)] + 1) % cfg.vocab_size;
  nn::lm_ce_forward_backward<float>(p, batch2, nullptr, nullptr, &logits_b);

  for (int t = 0; t < perturb_pos; ++t) {
    for (int v = 0; v < cfg.vocab_size; ++v) {
      size_t i = static_cast<size_t>(t) * cfg.vocab_size + static_cast<size_t>(v);
      CHECK(logits_a[i] == logits_b[i]);
    }
  }
  bool changed = false;
  for (int t = perturb_pos; t < batch.t_max; ++t) {
    for (int v = 0; v < cfg.vocab_size; ++v) {
      size_t i = static_cast<size_t>(t) * cfg.vocab_size + static_cast<size_t>(v);
      if (logits_a[i] != logits_b[i]) changed = true;
    }
  }
  CHECK(changed);
}

TEST_CASE("training and inference kernels agree on logits") {
  auto vocab = lm::Vocabulary::task_default();
  auto cfg = small_config(vocab);
  auto p = randomized_params<float>(cfg, vocab, 37);
  lm::LmEngine engine(p);

  Rng rng(41);
  for (int rep = 0; rep < 5; ++rep) {
    int len = rng.uniform_int(2, 10);
    std::vector<int> ids(static_cast<size_t>(len));
    ids[0] = vocab.bos_id;
    for (int t = 1; t < len; ++t) ids[static_cast<size_t>(t)] = rng.uniform_int(3, cfg.vocab_size - 1);

    auto inf = engine.forward_logits(lm::Context::from_tokens(ids, cfg.n_ctx, vocab.bos_id));

    nn::SeqBatch batch;
    batch.n_seq = 1;
    batch.t_max = len;
    batch.ids = ids;
    batch.targets.assign(static_cast<size_t>(len), -1);
    batch.targets[static_cast<size_t>(len - 1)] = 3;
    std::vector<float> logits;
    nn::lm_ce_forward_backward<float>(p, batch, nullptr, nullptr, &logits);

    for (int v = 0; v < cfg.vocab_size; ++v) {
      double diff = std::abs(static_cast<double>(inf[static_cast<size_t>(v)]) -
                             logits[static_cast<size_t>((len - 1) * cfg.vocab_size + v)]);
      CHECK(diff < 1e-3);
    }
  }
}

TEST_CASE("batched greedy rollouts are bitwise identical to serial ones") {
  auto p = testing::make_random_lm(43);
  lm::LmEngine engine(p);
  auto ctx = lm::Context::from_text(engine.vocab(), "Q: 12+34\nA:\n", p.cfg.n_ctx);

  lm::SampleOptions batch_opts;
  batch_opts.n = 3;
  batch_opts.greedy = true;
  batch_opts.cap = 24;
  auto batched = engine.sample_continuations(ctx, batch_opts);

  lm::SampleOptions single = batch_opts;
  single.n = 1;
  auto solo = engine.sample_continuations(ctx, single);
  REQUIRE(batched.size() == 3);
  for (const auto& c : batched) {
    CHECK(c.token_ids == solo[0].token_ids);
    CHECK(c.text == solo[0].text);
  }
}

TEST_CASE("stable softplus and sigmoid survive extreme margins") {
  CHECK(std::isfinite(nn::softplus_neg(1000.0)));
  CHECK(std::isfinite(nn::softplus_neg(-1000.0)));
  CHECK(nn::softplus_neg(-1000.0) == doctest::Approx(1000.0));
  CHECK(nn::softplus_neg(0.0) == doctest::Approx(std::log(2.0)));
  CHECK(nn::sigmoid(0.0) == doctest::Approx(0.5));
  CHECK(nn::sigmoid(1000.0) == doctest::Approx(1.0));
  CHECK(nn::sigmoid(-1000.0) == doctest::Approx(0.0));
}

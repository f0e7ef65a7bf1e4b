#include "duet/nn/infer.hpp"

#include <cmath>
#include <cstring>
#include <limits>

#include "duet/error.hpp"

namespace duet::nn {

namespace {

typedef float v8f __attribute__((vector_size(32)));

// Fixed-order SIMD dot product: four 8-lane accumulators, deterministic
// horizontal reduction. The arithmetic for one row never depends on the
// number of rows processed alongside it.
inline float dot_f(const float* a, const float* b, int k) {
  v8f acc0{}, acc1{}, acc2{}, acc3{};
  int i = 0;
  for (; i + 32 <= k; i += 32) {
    v8f a0, a1, a2, a3, b0, b1, b2, b3;
    std::memcpy(&a0, a + i, 32);
    std::memcpy(&b0, b + i, 32);
    std::memcpy(&a1, a + i + 8, 32);
    std::memcpy(&b1, b + i + 8, 32);
    std::memcpy(&a2, a + i + 16, 32);
    std::memcpy(&b2, b + i + 16, 32);
    std::memcpy(&a3, a + i + 24, 32);
    std::memcpy(&b3, b + i + 24, 32);
    acc0 += a0 * b0;
    acc1 += a1 * b1;
    acc2 += a2 * b2;
    acc3 += a3 * b3;
  }
  for (; i + 8 <= k; i += 8) {
    v8f av, bv;
    std::memcpy(&av, a + i, 32);
    std::memcpy(&bv, b + i, 32);
    acc0 += av * bv;
  }
  v8f acc = (acc0 + acc1) + (acc2 + acc3);
  float s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < k; ++i) s += a[i] * b[i];
  return s;
}

// y += alpha * x (element-independent, safe under any vectorization)
inline void axpy_f(float alpha, const float* x, float* y, int k) {
  for (int i = 0; i < k; ++i) y[i] += alpha * x[i];
}

// C[r][j] = dot(A[r], Bt[j]) + bias[j]
void mm_rows(const float* a, const float* bt, const float* bias, float* c, int rows, int k,
             int n) {
  for (int r = 0; r < rows; ++r) {
    const float* ar = a + static_cast<size_t>(r) * k;
    float* cr = c + static_cast<size_t>(r) * n;
    for (int j = 0; j < n; ++j) {
      cr[j] = dot_f(ar, bt + static_cast<size_t>(j) * k, k) + (bias ? bias[j] : 0.0f);
    }
  }
}

void layernorm_rows(const float* x, const float* g, const float* b, float* out, int rows, int d) {
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + static_cast<size_t>(r) * d;
    float* orow = out + static_cast<size_t>(r) * d;
    float mean = 0;
    for (int i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<float>(d);
    float var = 0;
    for (int i = 0; i < d; ++i) {
      float cdev = xr[i] - mean;
      var += cdev * cdev;
    }
    var /= static_cast<float>(d);
    float rstd = 1.0f / std::sqrt(var + 1e-5f);
    for (int i = 0; i < d; ++i) orow[i] = (xr[i] - mean) * rstd * g[i] + b[i];
  }
}

inline float gelu_f(float x) {
  const float k = 0.7978845608028654f;
  const float a = 0.044715f;
  return 0.5f * x * (1.0f + std::tanh(k * (x + a * x * x * x)));
}

std::vector<float> transpose_copy(std::span<const float> w, int in_dim, int out_dim) {
  std::vector<float> t(static_cast<size_t>(in_dim) * out_dim);
  for (int i = 0; i < in_dim; ++i) {
    for (int j = 0; j < out_dim; ++j) {
      t[static_cast<size_t>(j) * in_dim + i] = w[static_cast<size_t>(i) * out_dim + j];
    }
  }
  return t;
}

// Core step: computes one new position for each of `rows` streams. In append
// mode each stream has its own cache and the new K/V rows are written there.
// In branch mode every stream reads the same frozen cache and its own K/V stay
// in scratch. Per-stream arithmetic is identical in both modes.
void run_positions(const InferModel& m, KvCache* const* caches, const KvCache* shared,
                   const int* tokens, int rows, float* head_out, StepScratch& s) {
  const ModelConfig& cfg = m.cfg;
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const int f = cfg.d_ff;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  auto cache_of = [&](int r) -> const KvCache& { return shared ? *shared : *caches[r]; };
  for (int r = 0; r < rows; ++r) {
    const KvCache& c = cache_of(r);
    if (c.len >= c.capacity) fail_runtime("context window exceeded during decode");
    if (tokens[r] < 0 || tokens[r] >= cfg.vocab_size) fail_validation("token id out of range");
  }

  s.x.resize(static_cast<size_t>(rows) * d);
  s.norm.resize(static_cast<size_t>(rows) * d);
  s.qkv.resize(static_cast<size_t>(rows) * 3 * d);
  s.ctx.resize(static_cast<size_t>(rows) * d);
  s.proj.resize(static_cast<size_t>(rows) * d);
  s.fc.resize(static_cast<size_t>(rows) * f);
  s.hidden.resize(static_cast<size_t>(rows) * d);
  s.att.resize(static_cast<size_t>(cfg.n_ctx) + 1);
  if (shared) {
    s.cur_k.resize(static_cast<size_t>(rows) * d);
    s.cur_v.resize(static_cast<size_t>(rows) * d);
  }

  for (int r = 0; r < rows; ++r) {
    const int pos = cache_of(r).len;
    const float* te = m.tok_emb.data() + static_cast<size_t>(tokens[r]) * d;
    const float* pe = m.pos_emb.data() + static_cast<size_t>(pos) * d;
    float* x = s.x.data() + static_cast<size_t>(r) * d;
    for (int i = 0; i < d; ++i) x[i] = te[i] + pe[i];
  }

  for (int l = 0; l < cfg.n_layer; ++l) {
    const auto& lw = m.layers[static_cast<size_t>(l)];
    layernorm_rows(s.x.data(), lw.ln1_g.data(), lw.ln1_b.data(), s.norm.data(), rows, d);
    mm_rows(s.norm.data(), lw.w_qkv_t.data(), lw.b_qkv.data(), s.qkv.data(), rows, d, 3 * d);

    for (int r = 0; r < rows; ++r) {
      const KvCache& c = cache_of(r);
      const int pos = c.len;
      const float* q = s.qkv.data() + static_cast<size_t>(r) * 3 * d;
      const float* k_new = q + d;
      const float* v_new = q + 2 * d;

      float* k_store;
      float* v_store;
      if (shared) {
        k_store = s.cur_k.data() + static_cast<size_t>(r) * d;
        v_store = s.cur_v.data() + static_cast<size_t>(r) * d;
      } else {
        k_store = caches[r]->k_row(l, pos);
        v_store = caches[r]->v_row(l, pos);
      }
      std::memcpy(k_store, k_new, static_cast<size_t>(d) * sizeof(float));
      std::memcpy(v_store, v_new, static_cast<size_t>(d) * sizeof(float));

      float* ctx = s.ctx.data() + static_cast<size_t>(r) * d;
      for (int h = 0; h < cfg.n_head; ++h) {
        const float* qh = q + h * hd;
        float* att = s.att.data();
        float maxv = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < pos; ++j) {
          att[j] = dot_f(qh, c.k_row(l, j) + h * hd, hd) * scale;
          maxv = std::max(maxv, att[j]);
        }
        att[pos] = dot_f(qh, k_store + h * hd, hd) * scale;
        maxv = std::max(maxv, att[pos]);
        float sum = 0;
        for (int j = 0; j <= pos; ++j) {
          att[j] = std::exp(att[j] - maxv);
          sum += att[j];
        }
        float inv = 1.0f / sum;
        float* ctxh = ctx + h * hd;
        for (int e = 0; e < hd; ++e) ctxh[e] = 0;
        for (int j = 0; j < pos; ++j) {
          axpy_f(att[j] * inv, c.v_row(l, j) + h * hd, ctxh, hd);
        }
        axpy_f(att[pos] * inv, v_store + h * hd, ctxh, hd);
      }
    }

    mm_rows(s.ctx.data(), lw.w_out_t.data(), lw.b_out.data(), s.proj.data(), rows, d, d);
    for (size_t i = 0; i < s.x.size(); ++i) s.x[i] += s.proj[i];

    layernorm_rows(s.x.data(), lw.ln2_g.data(), lw.ln2_b.data(), s.norm.data(), rows, d);
    mm_rows(s.norm.data(), lw.w_fc_t.data(), lw.b_fc.data(), s.fc.data(), rows, d, f);
    for (size_t i = 0; i < s.fc.size(); ++i) s.fc[i] = gelu_f(s.fc[i]);
    mm_rows(s.fc.data(), lw.w_proj_t.data(), lw.b_proj.data(), s.proj.data(), rows, f, d);
    for (size_t i = 0; i < s.x.size(); ++i) s.x[i] += s.proj[i];
  }

  layernorm_rows(s.x.data(), m.lnf_g.data(), m.lnf_b.data(), s.hidden.data(), rows, d);

  if (head_out) {
    if (cfg.head == HeadKind::lm) {
      mm_rows(s.hidden.data(), m.head_t.data(), nullptr, head_out, rows, d, cfg.vocab_size);
    } else {
      for (int r = 0; r < rows; ++r) {
        head_out[r] = dot_f(s.hidden.data() + static_cast<size_t>(r) * d, m.head_t.data(), d) +
                      m.head_bias;
      }
    }
  }

  if (!shared) {
    for (int r = 0; r < rows; ++r) caches[r]->len += 1;
  }
}

}  // namespace

InferModel InferModel::from_params(const Params<float>& p) {
  InferModel m;
  m.cfg = p.cfg;
  m.vocab = p.vocab;
  const int d = m.cfg.d_model;
  const int f = m.cfg.d_ff;

  auto copy_vec = [&](std::string_view name) {
    auto s = p.tensor(name);
    return std::vector<float>(s.begin(), s.end());
  };
  m.tok_emb = copy_vec("tok_emb");
  m.pos_emb = copy_vec("pos_emb");
  m.layers.resize(static_cast<size_t>(m.cfg.n_layer));
  for (int l = 0; l < m.cfg.n_layer; ++l) {
    auto& lw = m.layers[static_cast<size_t>(l)];
    std::string pre = "layer" + std::to_string(l) + ".";
    lw.ln1_g = copy_vec(pre + "ln1.g");
    lw.ln1_b = copy_vec(pre + "ln1.b");
    lw.ln2_g = copy_vec(pre + "ln2.g");
    lw.ln2_b = copy_vec(pre + "ln2.b");
    lw.w_qkv_t = transpose_copy(p.tensor(pre + "attn.w_qkv"), d, 3 * d);
    lw.b_qkv = copy_vec(pre + "attn.b_qkv");
    lw.w_out_t = transpose_copy(p.tensor(pre + "attn.w_out"), d, d);
    lw.b_out = copy_vec(pre + "attn.b_out");
    lw.w_fc_t = transpose_copy(p.tensor(pre + "mlp.w_fc"), d, f);
    lw.b_fc = copy_vec(pre + "mlp.b_fc");
    lw.w_proj_t = transpose_copy(p.tensor(pre + "mlp.w_proj"), f, d);
    lw.b_proj = copy_vec(pre + "mlp.b_proj");
  }
  m.lnf_g = copy_vec("lnf.g");
  m.lnf_b = copy_vec("lnf.b");
  if (m.cfg.head == HeadKind::lm) {
    m.head_t = transpose_copy(p.tensor("lm_head.w"), d, m.cfg.vocab_size);
  } else {
    m.head_t = copy_vec("score_head.w");
    m.head_bias = p.tensor("score_head.b")[0];
  }
  return m;
}

void KvCache::init(const ModelConfig& cfg) {
  n_layer = cfg.n_layer;
  d = cfg.d_model;
  capacity = cfg.n_ctx;
  len = 0;
  k.assign(static_cast<size_t>(n_layer) * capacity * d, 0.0f);
  v.assign(static_cast<size_t>(n_layer) * capacity * d, 0.0f);
}

void KvCache::copy_from(const KvCache& src) {
  if (n_layer != src.n_layer || d != src.d || capacity != src.capacity) {
    fail_runtime("KvCache::copy_from: incompatible cache shapes");
  }
  len = src.len;
  for (int l = 0; l < n_layer; ++l) {
    std::memcpy(k_row(l, 0), src.k_row(l, 0), static_cast<size_t>(len) * d * sizeof(float));
    std::memcpy(v_row(l, 0), src.v_row(l, 0), static_cast<size_t>(len) * d * sizeof(float));
  }
}

void step_batch(const InferModel& m, std::span<KvCache* const> caches,
                std::span<const int> tokens, float* head_out, StepScratch& scratch) {
  if (caches.size() != tokens.size() || caches.empty()) {
    fail_validation("step_batch: caches and tokens must align and be nonempty");
  }
  run_positions(m, caches.data(), nullptr, tokens.data(), static_cast<int>(tokens.size()),
                head_out, scratch);
}

void branch_batch(const InferModel& m, const KvCache& cache, std::span<const int> candidates,
                  float* head_out, StepScratch& scratch) {
  if (candidates.empty()) fail_validation("branch_batch: empty candidate list");
  run_positions(m, nullptr, &cache, candidates.data(), static_cast<int>(candidates.size()),
                head_out, scratch);
}

void prefill(const InferModel& m, KvCache& cache, std::span<const int> tokens,
             float* last_head_out, StepScratch& scratch) {
  KvCache* cp = &cache;
  for (size_t i = 0; i < tokens.size(); ++i) {
    bool last = i + 1 == tokens.size();
    int tok = tokens[i];
    run_positions(m, &cp, nullptr, &tok, 1, last ? last_head_out : nullptr, scratch);
  }
}

}  // namespace duet::nn

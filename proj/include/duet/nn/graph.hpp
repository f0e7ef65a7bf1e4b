#pragma once

// Training-path compute: full-sequence batched forward and hand-derived
// backward over the transformer backbone, templated on the scalar type so
// gradient checks can run in double while training runs in float. Dense
// products go through Eigen; attention is looped per sequence and head.
//
// Losses are returned as sums (cross entropy summed over target tokens,
// pairwise loss summed over pairs) and gradients accumulate the gradient of
// that sum. Callers normalize, which keeps microbatch-sliced training exactly
// equal to a monolithic batch regardless of worker count.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "duet/error.hpp"
#include "duet/nn/model.hpp"

namespace duet::nn {

inline constexpr double kLnEps = 1e-5;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// C(m,n) = A(m,k) * B(k,n), optionally accumulating.
template <typename T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  CMapMat<T> A(a, m, k);
  CMapMat<T> B(b, k, n);
  MapMat<T> C(c, m, n);
  if (accumulate) {
    C.noalias() += A * B;
  } else {
    C.noalias() = A * B;
  }
}

// C(k,n) = A(m,k)^T * B(m,n)
template <typename T>
void matmul_at_b(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  CMapMat<T> A(a, m, k);
  CMapMat<T> B(b, m, n);
  MapMat<T> C(c, k, n);
  if (accumulate) {
    C.noalias() += A.transpose() * B;
  } else {
    C.noalias() = A.transpose() * B;
  }
}

// C(m,n) = A(m,k) * B(n,k)^T
template <typename T>
void matmul_a_bt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  CMapMat<T> A(a, m, k);
  CMapMat<T> B(b, n, k);
  MapMat<T> C(c, m, n);
  if (accumulate) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() = A * B.transpose();
  }
}

template <typename T>
T gelu(T x) {
  const T k = T(0.7978845608028654);
  const T a = T(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(k * (x + a * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T k = T(0.7978845608028654);
  const T a = T(0.044715);
  T u = k * (x + a * x * x * x);
  T t = std::tanh(u);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * k * (T(1) + T(3) * a * x * x);
}

// -log(sigmoid(d)) via the stable softplus identity.
inline double softplus_neg(double d) {
  return d >= 0 ? std::log1p(std::exp(-d)) : -d + std::log1p(std::exp(d));
}

inline double sigmoid(double d) {
  return d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d));
}

// Token batch. ids are row-major [n_seq][t_max], pad-filled at the tail;
// targets use -1 for positions that carry no loss.
struct SeqBatch {
  int n_seq = 0;
  int t_max = 0;
  std::vector<int> ids;
  std::vector<int> targets;
};

// Sequences whose score is read at a per-sequence final position.
struct ScoreBatch {
  int n_seq = 0;
  int t_max = 0;
  std::vector<int> ids;
  std::vector<int> last;  // index of the scored position per sequence
};

template <typename T>
struct GraphCache {
  int n_seq = 0, t_max = 0;
  std::vector<T> x0;
  struct Layer {
    std::vector<T> ln1_hat, ln1_out, ln1_rstd;
    std::vector<T> qkv;
    std::vector<T> att_probs;  // [n_seq][n_head][t_max][t_max], lower-triangular
    std::vector<T> att_ctx;
    std::vector<T> x_mid;  // residual after attention
    std::vector<T> ln2_hat, ln2_out, ln2_rstd;
    std::vector<T> fc_pre, fc_act;
    std::vector<T> x_out;
  };
  std::vector<Layer> layers;
  std::vector<T> lnf_hat, lnf_rstd;
  std::vector<T> hidden;  // final-norm output, n_rows x d_model

  void resize(const ModelConfig& cfg, int n_seq_, int t_max_) {
    n_seq = n_seq_;
    t_max = t_max_;
    size_t rows = static_cast<size_t>(n_seq) * t_max;
    size_t nd = rows * cfg.d_model;
    size_t nf = rows * cfg.d_ff;
    x0.resize(nd);
    layers.resize(static_cast<size_t>(cfg.n_layer));
    for (auto& l : layers) {
      l.ln1_hat.resize(nd);
      l.ln1_out.resize(nd);
      l.ln1_rstd.resize(rows);
      l.qkv.resize(rows * 3 * cfg.d_model);
      l.att_probs.resize(static_cast<size_t>(n_seq) * cfg.n_head * t_max * t_max);
      l.att_ctx.resize(nd);
      l.x_mid.resize(nd);
      l.ln2_hat.resize(nd);
      l.ln2_out.resize(nd);
      l.ln2_rstd.resize(rows);
      l.fc_pre.resize(nf);
      l.fc_act.resize(nf);
      l.x_out.resize(nd);
    }
    lnf_hat.resize(nd);
    lnf_rstd.resize(rows);
    hidden.resize(nd);
  }
};

namespace detail {

template <typename T>
void layernorm_forward(const T* x, const T* g, const T* b, int rows, int d, T* hat, T* out,
                       T* rstd) {
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<size_t>(r) * d;
    T* hr = hat + static_cast<size_t>(r) * d;
    T* orow = out + static_cast<size_t>(r) * d;
    T mean = 0;
    for (int i = 0; i < d; ++i) mean += xr[i];
    mean /= T(d);
    T var = 0;
    for (int i = 0; i < d; ++i) {
      T c = xr[i] - mean;
      var += c * c;
    }
    var /= T(d);
    T rs = T(1) / std::sqrt(var + T(kLnEps));
    rstd[r] = rs;
    for (int i = 0; i < d; ++i) {
      hr[i] = (xr[i] - mean) * rs;
      orow[i] = hr[i] * g[i] + b[i];
    }
  }
}

// dx is accumulated; g_g/g_b accumulate gain/bias grads.
template <typename T>
void layernorm_backward(const T* dy, const T* hat, const T* rstd, const T* g, int rows, int d,
                        T* dx, T* g_g, T* g_b) {
  for (int r = 0; r < rows; ++r) {
    const T* dyr = dy + static_cast<size_t>(r) * d;
    const T* hr = hat + static_cast<size_t>(r) * d;
    T* dxr = dx + static_cast<size_t>(r) * d;
    T sum_dhat = 0, sum_dhat_hat = 0;
    for (int i = 0; i < d; ++i) {
      T dhat = dyr[i] * g[i];
      sum_dhat += dhat;
      sum_dhat_hat += dhat * hr[i];
      g_g[i] += dyr[i] * hr[i];
      g_b[i] += dyr[i];
    }
    T inv_d = T(1) / T(d);
    for (int i = 0; i < d; ++i) {
      T dhat = dyr[i] * g[i];
      dxr[i] += rstd[r] * (dhat - sum_dhat * inv_d - hr[i] * sum_dhat_hat * inv_d);
    }
  }
}

template <typename T>
void add_bias(T* x, const T* b, int rows, int n) {
  for (int r = 0; r < rows; ++r) {
    T* xr = x + static_cast<size_t>(r) * n;
    for (int i = 0; i < n; ++i) xr[i] += b[i];
  }
}

template <typename T>
void bias_grad(const T* dy, int rows, int n, T* g_b) {
  for (int r = 0; r < rows; ++r) {
    const T* dr = dy + static_cast<size_t>(r) * n;
    for (int i = 0; i < n; ++i) g_b[i] += dr[i];
  }
}

}  // namespace detail

template <typename T>
void backbone_forward(const Params<T>& p, const int* ids, int n_seq, int t_max,
                      GraphCache<T>& c) {
  const ModelConfig& cfg = p.cfg;
  if (t_max > cfg.n_ctx) fail_validation("backbone_forward: sequence exceeds context window");
  c.resize(cfg, n_seq, t_max);
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const int rows = n_seq * t_max;
  const T scale = T(1) / std::sqrt(T(hd));

  auto tok = p.tensor("tok_emb");
  auto pos = p.tensor("pos_emb");
  for (int r = 0; r < rows; ++r) {
    int id = ids[r];
    int t = r % t_max;
    const T* te = tok.data() + static_cast<size_t>(id) * d;
    const T* pe = pos.data() + static_cast<size_t>(t) * d;
    T* x = c.x0.data() + static_cast<size_t>(r) * d;
    for (int i = 0; i < d; ++i) x[i] = te[i] + pe[i];
  }

  const std::vector<T>* x_in = &c.x0;
  for (int l = 0; l < cfg.n_layer; ++l) {
    auto& lc = c.layers[static_cast<size_t>(l)];
    std::string pre = "layer" + std::to_string(l) + ".";
    auto ln1_g = p.tensor(pre + "ln1.g"), ln1_b = p.tensor(pre + "ln1.b");
    auto w_qkv = p.tensor(pre + "attn.w_qkv"), b_qkv = p.tensor(pre + "attn.b_qkv");
    auto w_out = p.tensor(pre + "attn.w_out"), b_out = p.tensor(pre + "attn.b_out");
    auto ln2_g = p.tensor(pre + "ln2.g"), ln2_b = p.tensor(pre + "ln2.b");
    auto w_fc = p.tensor(pre + "mlp.w_fc"), b_fc = p.tensor(pre + "mlp.b_fc");
    auto w_proj = p.tensor(pre + "mlp.w_proj"), b_proj = p.tensor(pre + "mlp.b_proj");

    detail::layernorm_forward(x_in->data(), ln1_g.data(), ln1_b.data(), rows, d,
                              lc.ln1_hat.data(), lc.ln1_out.data(), lc.ln1_rstd.data());
    matmul(lc.ln1_out.data(), w_qkv.data(), lc.qkv.data(), rows, d, 3 * d);
    detail::add_bias(lc.qkv.data(), b_qkv.data(), rows, 3 * d);

    // causal attention, per sequence and head
    std::fill(lc.att_probs.begin(), lc.att_probs.end(), T(0));
    for (int s = 0; s < n_seq; ++s) {
      const size_t base = static_cast<size_t>(s) * t_max;
      for (int h = 0; h < cfg.n_head; ++h) {
        const int qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
        T* probs = lc.att_probs.data() +
                   ((static_cast<size_t>(s) * cfg.n_head + h) * t_max) * t_max;
        for (int i = 0; i < t_max; ++i) {
          const T* q = lc.qkv.data() + (base + i) * 3 * d + qo;
          T* prow = probs + static_cast<size_t>(i) * t_max;
          T maxv = std::numeric_limits<T>::lowest();
          for (int j = 0; j <= i; ++j) {
            const T* k = lc.qkv.data() + (base + j) * 3 * d + ko;
            T dot = 0;
            for (int e = 0; e < hd; ++e) dot += q[e] * k[e];
            prow[j] = dot * scale;
            maxv = std::max(maxv, prow[j]);
          }
          T sum = 0;
          for (int j = 0; j <= i; ++j) {
            prow[j] = std::exp(prow[j] - maxv);
            sum += prow[j];
          }
          T inv = T(1) / sum;
          for (int j = 0; j <= i; ++j) prow[j] *= inv;
          T* ctx = lc.att_ctx.data() + (base + i) * d + h * hd;
          for (int e = 0; e < hd; ++e) ctx[e] = 0;
          for (int j = 0; j <= i; ++j) {
            const T* v = lc.qkv.data() + (base + j) * 3 * d + vo;
            T pj = prow[j];
            for (int e = 0; e < hd; ++e) ctx[e] += pj * v[e];
          }
        }
      }
    }

    matmul(lc.att_ctx.data(), w_out.data(), lc.x_mid.data(), rows, d, d);
    detail::add_bias(lc.x_mid.data(), b_out.data(), rows, d);
    for (int i = 0; i < rows * d; ++i) lc.x_mid[static_cast<size_t>(i)] += (*x_in)[static_cast<size_t>(i)];

    detail::layernorm_forward(lc.x_mid.data(), ln2_g.data(), ln2_b.data(), rows, d,
                              lc.ln2_hat.data(), lc.ln2_out.data(), lc.ln2_rstd.data());
    matmul(lc.ln2_out.data(), w_fc.data(), lc.fc_pre.data(), rows, d, cfg.d_ff);
    detail::add_bias(lc.fc_pre.data(), b_fc.data(), rows, cfg.d_ff);
    for (size_t i = 0; i < lc.fc_pre.size(); ++i) lc.fc_act[i] = gelu(lc.fc_pre[i]);
    matmul(lc.fc_act.data(), w_proj.data(), lc.x_out.data(), rows, cfg.d_ff, d);
    detail::add_bias(lc.x_out.data(), b_proj.data(), rows, d);
    for (int i = 0; i < rows * d; ++i) lc.x_out[static_cast<size_t>(i)] += lc.x_mid[static_cast<size_t>(i)];
    x_in = &lc.x_out;
  }

  auto lnf_g = p.tensor("lnf.g"), lnf_b = p.tensor("lnf.b");
  detail::layernorm_forward(x_in->data(), lnf_g.data(), lnf_b.data(), rows, d, c.lnf_hat.data(),
                            c.hidden.data(), c.lnf_rstd.data());
}

// d_hidden holds dLoss/d(hidden) on entry and is clobbered. grad accumulates.
template <typename T>
void backbone_backward(const Params<T>& p, const int* ids, const GraphCache<T>& c,
                       std::vector<T>& d_hidden, std::vector<T>& grad) {
  const ModelConfig& cfg = p.cfg;
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const int n_seq = c.n_seq, t_max = c.t_max;
  const int rows = n_seq * t_max;
  const T scale = T(1) / std::sqrt(T(hd));

  auto gspan = [&](std::string_view name) {
    const auto& s = p.layout.spec(name);
    return std::span<T>(grad.data() + s.offset, s.numel);
  };

  std::vector<T> dx(static_cast<size_t>(rows) * d, T(0));
  {
    auto lnf_g = p.tensor("lnf.g");
    detail::layernorm_backward(d_hidden.data(), c.lnf_hat.data(), c.lnf_rstd.data(), lnf_g.data(),
                               rows, d, dx.data(), gspan("lnf.g").data(), gspan("lnf.b").data());
  }

  std::vector<T> d_ln_out(static_cast<size_t>(rows) * d);
  std::vector<T> d_fc_act(static_cast<size_t>(rows) * cfg.d_ff);
  std::vector<T> d_qkv(static_cast<size_t>(rows) * 3 * d);
  std::vector<T> d_ctx(static_cast<size_t>(rows) * d);
  std::vector<T> dx_prev(static_cast<size_t>(rows) * d);
  std::vector<T> dp_buf(static_cast<size_t>(t_max));

  for (int l = cfg.n_layer - 1; l >= 0; --l) {
    const auto& lc = c.layers[static_cast<size_t>(l)];
    std::string pre = "layer" + std::to_string(l) + ".";
    auto ln1_g = p.tensor(pre + "ln1.g");
    auto w_qkv = p.tensor(pre + "attn.w_qkv");
    auto w_out = p.tensor(pre + "attn.w_out");
    auto ln2_g = p.tensor(pre + "ln2.g");
    auto w_fc = p.tensor(pre + "mlp.w_fc");
    auto w_proj = p.tensor(pre + "mlp.w_proj");

    // MLP branch: dx is d(x_out); residual passes it through to x_mid as well.
    matmul_a_bt(dx.data(), w_proj.data(), d_fc_act.data(), rows, d, cfg.d_ff);
    matmul_at_b(lc.fc_act.data(), dx.data(), gspan(pre + "mlp.w_proj").data(), rows, cfg.d_ff, d,
                true);
    detail::bias_grad(dx.data(), rows, d, gspan(pre + "mlp.b_proj").data());
    for (size_t i = 0; i < d_fc_act.size(); ++i) d_fc_act[i] *= gelu_grad(lc.fc_pre[i]);
    matmul_a_bt(d_fc_act.data(), w_fc.data(), d_ln_out.data(), rows, cfg.d_ff, d);
    matmul_at_b(lc.ln2_out.data(), d_fc_act.data(), gspan(pre + "mlp.w_fc").data(), rows, d,
                cfg.d_ff, true);
    detail::bias_grad(d_fc_act.data(), rows, cfg.d_ff, gspan(pre + "mlp.b_fc").data());

    // d(x_mid) = residual dx + LN2 backward of d_ln_out
    std::copy(dx.begin(), dx.end(), dx_prev.begin());
    detail::layernorm_backward(d_ln_out.data(), lc.ln2_hat.data(), lc.ln2_rstd.data(),
                               ln2_g.data(), rows, d, dx_prev.data(),
                               gspan(pre + "ln2.g").data(), gspan(pre + "ln2.b").data());
    std::swap(dx, dx_prev);  // dx now holds d(x_mid)

    // attention output projection
    matmul_a_bt(dx.data(), w_out.data(), d_ctx.data(), rows, d, d);
    matmul_at_b(lc.att_ctx.data(), dx.data(), gspan(pre + "attn.w_out").data(), rows, d, d, true);
    detail::bias_grad(dx.data(), rows, d, gspan(pre + "attn.b_out").data());

    std::fill(d_qkv.begin(), d_qkv.end(), T(0));
    for (int s = 0; s < n_seq; ++s) {
      const size_t base = static_cast<size_t>(s) * t_max;
      for (int h = 0; h < cfg.n_head; ++h) {
        const int qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
        const T* probs = lc.att_probs.data() +
                         ((static_cast<size_t>(s) * cfg.n_head + h) * t_max) * t_max;
        for (int i = 0; i < t_max; ++i) {
          const T* dctx = d_ctx.data() + (base + i) * d + h * hd;
          const T* prow = probs + static_cast<size_t>(i) * t_max;
          // dP_j = dctx . v_j ; dv_j += P_j * dctx ; softmax backward
          // needs sum_j dP_j P_j
          T dot_dp_p = 0;
          for (int j = 0; j <= i; ++j) {
            const T* v = lc.qkv.data() + (base + j) * 3 * d + vo;
            T* dv = d_qkv.data() + (base + j) * 3 * d + vo;
            T dp = 0;
            T pj = prow[j];
            for (int e = 0; e < hd; ++e) {
              dp += dctx[e] * v[e];
              dv[e] += pj * dctx[e];
            }
            dp_buf[j] = dp;
            dot_dp_p += dp * pj;
          }
          const T* q = lc.qkv.data() + (base + i) * 3 * d + qo;
          T* dq = d_qkv.data() + (base + i) * 3 * d + qo;
          for (int j = 0; j <= i; ++j) {
            T ds = prow[j] * (dp_buf[j] - dot_dp_p) * scale;
            const T* k = lc.qkv.data() + (base + j) * 3 * d + ko;
            T* dk = d_qkv.data() + (base + j) * 3 * d + ko;
            for (int e = 0; e < hd; ++e) {
              dq[e] += ds * k[e];
              dk[e] += ds * q[e];
            }
          }
        }
      }
    }

    matmul_a_bt(d_qkv.data(), w_qkv.data(), d_ln_out.data(), rows, 3 * d, d);
    matmul_at_b(lc.ln1_out.data(), d_qkv.data(), gspan(pre + "attn.w_qkv").data(), rows, d, 3 * d,
                true);
    detail::bias_grad(d_qkv.data(), rows, 3 * d, gspan(pre + "attn.b_qkv").data());

    std::copy(dx.begin(), dx.end(), dx_prev.begin());
    detail::layernorm_backward(d_ln_out.data(), lc.ln1_hat.data(), lc.ln1_rstd.data(),
                               ln1_g.data(), rows, d, dx_prev.data(),
                               gspan(pre + "ln1.g").data(), gspan(pre + "ln1.b").data());
    std::swap(dx, dx_prev);
  }

  auto g_tok = gspan("tok_emb");
  auto g_pos = gspan("pos_emb");
  for (int r = 0; r < rows; ++r) {
    int id = ids[r];
    int t = r % t_max;
    const T* dr = dx.data() + static_cast<size_t>(r) * d;
    T* gt = g_tok.data() + static_cast<size_t>(id) * d;
    T* gp2 = g_pos.data() + static_cast<size_t>(t) * d;
    for (int i = 0; i < d; ++i) {
      gt[i] += dr[i];
      gp2[i] += dr[i];
    }
  }
}

// Summed cross entropy over target positions. Returns {loss_sum, n_targets}.
// When grad is non-null, accumulates d(loss_sum)/d(theta).
template <typename T>
std::pair<double, long> lm_ce_forward_backward(const Params<T>& p, const SeqBatch& batch,
                                               std::vector<T>* grad,
                                               GraphCache<T>* cache_opt = nullptr,
                                               std::vector<T>* logits_opt = nullptr) {
  if (p.cfg.head != HeadKind::lm) fail_validation("lm loss requires an lm-headed model");
  GraphCache<T> local_cache;
  GraphCache<T>& c = cache_opt ? *cache_opt : local_cache;
  backbone_forward(p, batch.ids.data(), batch.n_seq, batch.t_max, c);

  const int rows = batch.n_seq * batch.t_max;
  const int V = p.cfg.vocab_size;
  auto w_lm = p.tensor("lm_head.w");
  std::vector<T> local_logits;
  std::vector<T>& logits = logits_opt ? *logits_opt : local_logits;
  logits.resize(static_cast<size_t>(rows) * V);
  matmul(c.hidden.data(), w_lm.data(), logits.data(), rows, p.cfg.d_model, V);

  double loss_sum = 0;
  long n_targets = 0;
  std::vector<T> dlogits;
  if (grad) dlogits.assign(static_cast<size_t>(rows) * V, T(0));

  for (int r = 0; r < rows; ++r) {
    int tgt = batch.targets[static_cast<size_t>(r)];
    if (tgt < 0) continue;
    const T* lr = logits.data() + static_cast<size_t>(r) * V;
    T maxv = lr[0];
    for (int v = 1; v < V; ++v) maxv = std::max(maxv, lr[v]);
    double sum = 0;
    for (int v = 0; v < V; ++v) sum += std::exp(static_cast<double>(lr[v] - maxv));
    double lse = std::log(sum) + static_cast<double>(maxv);
    loss_sum += lse - static_cast<double>(lr[tgt]);
    ++n_targets;
    if (grad) {
      T* dr = dlogits.data() + static_cast<size_t>(r) * V;
      for (int v = 0; v < V; ++v) {
        dr[v] = static_cast<T>(std::exp(static_cast<double>(lr[v] - maxv)) / sum);
      }
      dr[tgt] -= T(1);
    }
  }

  if (grad) {
    std::vector<T> d_hidden(static_cast<size_t>(rows) * p.cfg.d_model);
    matmul_a_bt(dlogits.data(), w_lm.data(), d_hidden.data(), rows, V, p.cfg.d_model);
    const auto& s = p.layout.spec("lm_head.w");
    matmul_at_b(c.hidden.data(), dlogits.data(), grad->data() + s.offset, rows, p.cfg.d_model, V,
                true);
    backbone_backward(p, batch.ids.data(), c, d_hidden, *grad);
  }
  return {loss_sum, n_targets};
}

// Scalar scores at each sequence's final position.
template <typename T>
std::vector<T> score_forward(const Params<T>& p, const ScoreBatch& batch,
                             GraphCache<T>* cache_opt = nullptr) {
  if (p.cfg.head != HeadKind::scalar) fail_validation("score requires a scalar-headed model");
  GraphCache<T> local_cache;
  GraphCache<T>& c = cache_opt ? *cache_opt : local_cache;
  backbone_forward(p, batch.ids.data(), batch.n_seq, batch.t_max, c);
  auto w = p.tensor("score_head.w");
  auto b = p.tensor("score_head.b");
  std::vector<T> scores(static_cast<size_t>(batch.n_seq));
  for (int s = 0; s < batch.n_seq; ++s) {
    const T* h = c.hidden.data() +
                 (static_cast<size_t>(s) * batch.t_max + batch.last[static_cast<size_t>(s)]) *
                     p.cfg.d_model;
    T acc = b[0];
    for (int i = 0; i < p.cfg.d_model; ++i) acc += h[i] * w[i];
    scores[static_cast<size_t>(s)] = acc;
  }
  return scores;
}

// Pairwise comparison loss over a batch of (positive, negative) sequence pairs:
// sequences 2i and 2i+1 share a context and differ in the final token. Returns
// the summed loss; grad accumulates d(sum)/d(theta).
template <typename T>
double pairwise_forward_backward(const Params<T>& p, const ScoreBatch& batch,
                                 std::vector<T>* grad, long* correct_out = nullptr) {
  if (batch.n_seq % 2 != 0) fail_validation("pairwise batch needs an even sequence count");
  GraphCache<T> c;
  std::vector<T> scores = score_forward(p, batch, &c);
  const int n_pairs = batch.n_seq / 2;

  double loss_sum = 0;
  long correct = 0;
  std::vector<T> dscore(static_cast<size_t>(batch.n_seq), T(0));
  for (int i = 0; i < n_pairs; ++i) {
    double sp = static_cast<double>(scores[static_cast<size_t>(2 * i)]);
    double sn = static_cast<double>(scores[static_cast<size_t>(2 * i + 1)]);
    double margin = sp - sn;
    loss_sum += softplus_neg(margin);
    if (margin > 0) ++correct;
    double g = -sigmoid(-margin);  // d loss / d margin
    dscore[static_cast<size_t>(2 * i)] = static_cast<T>(g);
    dscore[static_cast<size_t>(2 * i + 1)] = static_cast<T>(-g);
  }
  if (correct_out) *correct_out = correct;

  if (grad) {
    auto w = p.tensor("score_head.w");
    const auto& sw = p.layout.spec("score_head.w");
    const auto& sb = p.layout.spec("score_head.b");
    std::vector<T> d_hidden(
        static_cast<size_t>(batch.n_seq) * batch.t_max * p.cfg.d_model, T(0));
    for (int s = 0; s < batch.n_seq; ++s) {
      size_t row = static_cast<size_t>(s) * batch.t_max + batch.last[static_cast<size_t>(s)];
      const T* h = c.hidden.data() + row * p.cfg.d_model;
      T* dh = d_hidden.data() + row * p.cfg.d_model;
      T g = dscore[static_cast<size_t>(s)];
      for (int i = 0; i < p.cfg.d_model; ++i) {
        dh[i] += g * w[i];
        (*grad)[sw.offset + static_cast<size_t>(i)] += g * h[i];
      }
      (*grad)[sb.offset] += g;
    }
    backbone_backward(p, batch.ids.data(), c, d_hidden, *grad);
  }
  return loss_sum;
}

}  // namespace duet::nn

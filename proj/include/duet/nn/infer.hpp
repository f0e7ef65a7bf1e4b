#pragma once

// Inference-path compute: incremental decoding over KV caches. Every output
// element is produced by a fixed-order reduction that does not depend on how
// many rows are in the batch, so batched rollouts, singleton steps, and
// branch scoring are bitwise-identical to their serial equivalents.

#include <cstdint>
#include <span>
#include <vector>

#include "duet/nn/model.hpp"

namespace duet::nn {

// Weights copied into out-major (transposed) layout for row-dot kernels.
struct InferModel {
  ModelConfig cfg;
  lm::Vocabulary vocab;

  std::vector<float> tok_emb, pos_emb;
  struct Layer {
    std::vector<float> ln1_g, ln1_b, ln2_g, ln2_b;
    std::vector<float> w_qkv_t, b_qkv;    // [3d][d]
    std::vector<float> w_out_t, b_out;    // [d][d]
    std::vector<float> w_fc_t, b_fc;      // [f][d]
    std::vector<float> w_proj_t, b_proj;  // [d][f]
  };
  std::vector<Layer> layers;
  std::vector<float> lnf_g, lnf_b;
  std::vector<float> head_t;  // lm head: [V][d]; scalar head: [1][d]
  float head_bias = 0.0f;

  static InferModel from_params(const Params<float>& p);
  int head_out_dim() const { return cfg.head == HeadKind::lm ? cfg.vocab_size : 1; }
};

struct KvCache {
  int len = 0;
  int n_layer = 0, d = 0, capacity = 0;
  std::vector<float> k, v;  // [n_layer][capacity][d]

  void init(const ModelConfig& cfg);
  void reset() { len = 0; }
  void copy_from(const KvCache& src);
  float* k_row(int layer, int pos) {
    return k.data() + (static_cast<size_t>(layer) * capacity + pos) * d;
  }
  float* v_row(int layer, int pos) {
    return v.data() + (static_cast<size_t>(layer) * capacity + pos) * d;
  }
  const float* k_row(int layer, int pos) const {
    return k.data() + (static_cast<size_t>(layer) * capacity + pos) * d;
  }
  const float* v_row(int layer, int pos) const {
    return v.data() + (static_cast<size_t>(layer) * capacity + pos) * d;
  }
};

// Reusable per-batch buffers.
struct StepScratch {
  std::vector<float> x, norm, qkv, ctx, proj, fc, hidden;
  std::vector<float> cur_k, cur_v, att;
};

// Advances each cache by one token (tokens[r] appended to caches[r]) and, when
// head_out is non-null, writes the head output rows (vocab logits for an lm
// head, one scalar per row for a scalar head).
void step_batch(const InferModel& m, std::span<KvCache* const> caches,
                std::span<const int> tokens, float* head_out, StepScratch& scratch);

// Evaluates candidate tokens at position cache.len against a shared read-only
// cache without mutating it. head_out has candidates.size() rows.
void branch_batch(const InferModel& m, const KvCache& cache, std::span<const int> candidates,
                  float* head_out, StepScratch& scratch);

// Feeds tokens one position at a time; optionally returns the head output of
// the final position (head_out_dim floats).
void prefill(const InferModel& m, KvCache& cache, std::span<const int> tokens,
             float* last_head_out, StepScratch& scratch);

}  // namespace duet::nn

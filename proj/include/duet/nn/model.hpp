#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "duet/vocab.hpp"

namespace duet::nn {

enum class HeadKind { lm, scalar };

// Decoder-only transformer dimensions. The same backbone serves the language
// model (vocabulary-sized unembedding) and the verifier (scalar head).
struct ModelConfig {
  int n_layer = 2;
  int d_model = 128;
  int n_head = 4;
  int d_ff = 512;
  int n_ctx = 256;
  int vocab_size = 0;
  HeadKind head = HeadKind::lm;

  int head_dim() const { return d_model / n_head; }
  void validate() const;
  bool same_backbone(const ModelConfig& o) const {
    return n_layer == o.n_layer && d_model == o.d_model && n_head == o.n_head &&
           d_ff == o.d_ff && n_ctx == o.n_ctx && vocab_size == o.vocab_size;
  }
};

struct TensorSpec {
  std::string name;
  std::vector<int> shape;
  size_t offset = 0;
  size_t numel = 0;
};

// Declared tensor order; checkpoints serialize raw data in exactly this order.
struct ParamLayout {
  std::vector<TensorSpec> tensors;
  size_t total = 0;

  const TensorSpec& spec(std::string_view name) const;
  bool has(std::string_view name) const;
};

ParamLayout build_layout(const ModelConfig& cfg);

template <typename T>
struct Params {
  ModelConfig cfg;
  lm::Vocabulary vocab;
  ParamLayout layout;
  std::vector<T> data;

  std::span<T> tensor(std::string_view name) {
    const auto& s = layout.spec(name);
    return {data.data() + s.offset, s.numel};
  }
  std::span<const T> tensor(std::string_view name) const {
    const auto& s = layout.spec(name);
    return {data.data() + s.offset, s.numel};
  }
};

// Gaussian init (std 0.02) for projections and embeddings, ones/zeros for layer
// norms, and a zero output head: initial LM logits are exactly uniform and the
// initial verifier score is exactly 0.
template <typename T>
Params<T> init_params(const ModelConfig& cfg, const lm::Vocabulary& vocab, uint64_t seed);

extern template Params<float> init_params<float>(const ModelConfig&, const lm::Vocabulary&, uint64_t);
extern template Params<double> init_params<double>(const ModelConfig&, const lm::Vocabulary&, uint64_t);

Params<double> to_double(const Params<float>& p);
Params<float> to_float(const Params<double>& p);

// Checkpoint file: magic, format version, JSON header (kind, dims, vocabulary,
// tensor manifest), then raw little-endian float32 tensors in declared order.
void save_checkpoint(const Params<float>& params, const std::string& path);
Params<float> load_checkpoint(const std::string& path);
Params<float> load_checkpoint(const std::string& path, HeadKind expected_head);

}  // namespace duet::nn

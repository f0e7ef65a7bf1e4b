#include "duet/nn/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "duet/error.hpp"
#include "duet/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace duet::nn {

namespace {
using ordered_json = nlohmann::ordered_json;
constexpr char kMagic[8] = {'D', 'U', 'E', 'T', 'C', 'K', 'P', '1'};
constexpr uint32_t kFormatVersion = 1;
}  // namespace

void ModelConfig::validate() const {
  if (n_layer < 1 || d_model < 1 || n_head < 1 || d_ff < 1 || n_ctx < 2 || vocab_size < 4) {
    fail_validation("model config: dimensions out of range");
  }
  if (d_model % n_head != 0) fail_validation("model config: d_model must divide by n_head");
}

const TensorSpec& ParamLayout::spec(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  fail_runtime("unknown tensor: " + std::string(name));
}

bool ParamLayout::has(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

ParamLayout build_layout(const ModelConfig& cfg) {
  cfg.validate();
  ParamLayout layout;
  auto add = [&](const std::string& name, std::vector<int> shape) {
    TensorSpec s;
    s.name = name;
    s.shape = std::move(shape);
    s.numel = 1;
    for (int d : s.shape) s.numel *= static_cast<size_t>(d);
    s.offset = layout.total;
    layout.total += s.numel;
    layout.tensors.push_back(std::move(s));
  };

  add("tok_emb", {cfg.vocab_size, cfg.d_model});
  add("pos_emb", {cfg.n_ctx, cfg.d_model});
  for (int l = 0; l < cfg.n_layer; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1.g", {cfg.d_model});
    add(p + "ln1.b", {cfg.d_model});
    add(p + "attn.w_qkv", {cfg.d_model, 3 * cfg.d_model});
    add(p + "attn.b_qkv", {3 * cfg.d_model});
    add(p + "attn.w_out", {cfg.d_model, cfg.d_model});
    add(p + "attn.b_out", {cfg.d_model});
    add(p + "ln2.g", {cfg.d_model});
    add(p + "ln2.b", {cfg.d_model});
    add(p + "mlp.w_fc", {cfg.d_model, cfg.d_ff});
    add(p + "mlp.b_fc", {cfg.d_ff});
    add(p + "mlp.w_proj", {cfg.d_ff, cfg.d_model});
    add(p + "mlp.b_proj", {cfg.d_model});
  }
  add("lnf.g", {cfg.d_model});
  add("lnf.b", {cfg.d_model});
  if (cfg.head == HeadKind::lm) {
    add("lm_head.w", {cfg.d_model, cfg.vocab_size});
  } else {
    add("score_head.w", {cfg.d_model});
    add("score_head.b", {1});
  }
  return layout;
}

template <typename T>
Params<T> init_params(const ModelConfig& cfg, const lm::Vocabulary& vocab, uint64_t seed) {
  if (cfg.vocab_size != vocab.size()) {
    fail_validation("init_params: config vocab_size does not match vocabulary");
  }
  Params<T> p;
  p.cfg = cfg;
  p.vocab = vocab;
  p.layout = build_layout(cfg);
  p.data.assign(p.layout.total, T(0));

  Rng rng(seed);
  for (const auto& spec : p.layout.tensors) {
    std::span<T> t{p.data.data() + spec.offset, spec.numel};
    bool is_gain = spec.name.ends_with("ln1.g") || spec.name.ends_with("ln2.g") ||
                   spec.name == "lnf.g";
    bool is_bias = spec.name.ends_with(".b") || spec.name.ends_with("b_qkv") ||
                   spec.name.ends_with("b_out") || spec.name.ends_with("b_fc") ||
                   spec.name.ends_with("b_proj");
    bool is_head = spec.name.starts_with("lm_head") || spec.name.starts_with("score_head");
    if (is_gain) {
      for (auto& v : t) v = T(1);
    } else if (is_bias || is_head) {
      // already zero
    } else {
      for (auto& v : t) v = static_cast<T>(0.02 * rng.normal());
    }
  }
  return p;
}

template Params<float> init_params<float>(const ModelConfig&, const lm::Vocabulary&, uint64_t);
template Params<double> init_params<double>(const ModelConfig&, const lm::Vocabulary&, uint64_t);

Params<double> to_double(const Params<float>& p) {
  Params<double> q;
  q.cfg = p.cfg;
  q.vocab = p.vocab;
  q.layout = p.layout;
  q.data.assign(p.data.begin(), p.data.end());
  return q;
}

Params<float> to_float(const Params<double>& p) {
  Params<float> q;
  q.cfg = p.cfg;
  q.vocab = p.vocab;
  q.layout = p.layout;
  q.data.resize(p.data.size());
  for (size_t i = 0; i < p.data.size(); ++i) q.data[i] = static_cast<float>(p.data[i]);
  return q;
}

void save_checkpoint(const Params<float>& params, const std::string& path) {
  ordered_json header;
  header["kind"] = params.cfg.head == HeadKind::lm ? "lm" : "verifier";
  header["n_layer"] = params.cfg.n_layer;
  header["d_model"] = params.cfg.d_model;
  header["n_head"] = params.cfg.n_head;
  header["d_ff"] = params.cfg.d_ff;
  header["n_ctx"] = params.cfg.n_ctx;
  header["vocab_size"] = params.cfg.vocab_size;
  header["vocab"] = {{"symbols", params.vocab.symbols},
                     {"bos", params.vocab.bos_id},
                     {"eos", params.vocab.eos_id},
                     {"pad", params.vocab.pad_id}};
  ordered_json tensors = ordered_json::array();
  for (const auto& t : params.layout.tensors) {
    tensors.push_back({{"name", t.name}, {"shape", t.shape}});
  }
  header["tensors"] = std::move(tensors);
  std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) fail_runtime("cannot open for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  uint32_t ver = kFormatVersion;
  uint32_t hlen = static_cast<uint32_t>(hs.size());
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  out.write(reinterpret_cast<const char*>(params.data.data()),
            static_cast<std::streamsize>(params.data.size() * sizeof(float)));
  if (!out) fail_runtime("write failed: " + path);
}

Params<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_runtime("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    fail_runtime("bad checkpoint magic: " + path);
  }
  uint32_t ver = 0, hlen = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || ver != kFormatVersion) fail_runtime("unsupported checkpoint version in " + path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) fail_runtime("truncated checkpoint header: " + path);
  ordered_json header = ordered_json::parse(hs, nullptr, false);
  if (header.is_discarded()) fail_runtime("malformed checkpoint header: " + path);

  ModelConfig cfg;
  cfg.n_layer = header.at("n_layer").get<int>();
  cfg.d_model = header.at("d_model").get<int>();
  cfg.n_head = header.at("n_head").get<int>();
  cfg.d_ff = header.at("d_ff").get<int>();
  cfg.n_ctx = header.at("n_ctx").get<int>();
  cfg.vocab_size = header.at("vocab_size").get<int>();
  std::string kind = header.at("kind").get<std::string>();
  cfg.head = kind == "lm" ? HeadKind::lm : HeadKind::scalar;

  auto vj = header.at("vocab");
  lm::Vocabulary vocab = lm::Vocabulary::from_symbols(
      vj.at("symbols").get<std::vector<std::string>>(), vj.at("bos").get<int>(),
      vj.at("eos").get<int>(), vj.at("pad").get<int>());

  Params<float> p;
  p.cfg = cfg;
  p.vocab = vocab;
  p.layout = build_layout(cfg);

  // Manifest must match the layout this build declares.
  auto tensors = header.at("tensors");
  if (tensors.size() != p.layout.tensors.size()) {
    fail_runtime("checkpoint tensor manifest mismatch: " + path);
  }
  for (size_t i = 0; i < p.layout.tensors.size(); ++i) {
    const auto& want = p.layout.tensors[i];
    if (tensors[i].at("name").get<std::string>() != want.name ||
        tensors[i].at("shape").get<std::vector<int>>() != want.shape) {
      fail_runtime("checkpoint tensor mismatch at '" + want.name + "': " + path);
    }
  }

  p.data.resize(p.layout.total);
  in.read(reinterpret_cast<char*>(p.data.data()),
          static_cast<std::streamsize>(p.data.size() * sizeof(float)));
  if (!in || in.gcount() != static_cast<std::streamsize>(p.data.size() * sizeof(float))) {
    fail_runtime("truncated checkpoint data: " + path);
  }
  for (float v : p.data) {
    if (!std::isfinite(v)) fail_runtime("non-finite parameter in checkpoint: " + path);
  }
  return p;
}

Params<float> load_checkpoint(const std::string& path, HeadKind expected_head) {
  Params<float> p = load_checkpoint(path);
  if (p.cfg.head != expected_head) {
    fail_runtime("checkpoint kind mismatch (expected " +
                 std::string(expected_head == HeadKind::lm ? "lm" : "verifier") + "): " + path);
  }
  return p;
}

}  // namespace duet::nn

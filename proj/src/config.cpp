#include "duet/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "duet/error.hpp"
#include "duet/parallel.hpp"

namespace duet::cli {

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace

const std::vector<RunConfig::KeySpec>& RunConfig::registry() {
  using T = KeySpec::Type;
  static const std::vector<KeySpec> kRegistry = {
      {"run.seed", "1234", T::int_t, "global seed; all streams derive from it"},
      {"run.workers", "0", T::int_t, "worker threads (0 = hardware concurrency)"},
      {"run.out", "out", T::string_t, "artifact root (data/, models/, synth/, reports/)"},

      {"data.n_train", "2000", T::int_t, "training problems"},
      {"data.n_test", "500", T::int_t, "held-out test problems"},
      {"data.n_probe", "200", T::int_t, "deeper-difficulty generalization probe problems"},
      {"data.difficulty_min", "1", T::int_t, "lowest difficulty in train/test mix"},
      {"data.difficulty_max", "3", T::int_t, "highest difficulty in train/test mix"},
      {"data.probe_difficulty", "4", T::int_t, "difficulty of the probe split"},

      {"lm.n_layer", "2", T::int_t, "transformer layers"},
      {"lm.d_model", "128", T::int_t, "model width"},
      {"lm.n_head", "4", T::int_t, "attention heads"},
      {"lm.d_ff", "512", T::int_t, "feed-forward width"},
      {"lm.n_ctx", "256", T::int_t, "context window"},
      {"lm.lr", "1.5e-3", T::double_t, "peak learning rate"},
      {"lm.batch_size", "16", T::int_t, "sequences per step"},
      {"lm.steps", "3000", T::int_t, "training steps"},
      {"lm.warmup", "100", T::int_t, "warmup steps"},
      {"lm.grad_clip", "1.0", T::double_t, "global-norm gradient clip"},
      {"lm.val_fraction", "0.03", T::double_t, "held-out fraction of the train corpus"},
      {"lm.val_every", "250", T::int_t, "validation cadence in steps"},

      {"synth.n_rollouts", "20", T::int_t, "rollouts per candidate (N)"},
      {"synth.top_k", "5", T::int_t, "candidate pool size (k)"},
      {"synth.threshold", "0.5", T::double_t, "negative quality threshold (tau)"},
      {"synth.temperature", "1.0", T::double_t, "rollout sampling temperature"},
      {"synth.cap", "192", T::int_t, "rollout length cap"},
      {"synth.max_instances", "400", T::int_t, "training problems to synthesize over"},
      {"synth.pool", "top_k", T::string_t, "negative pool: top_k or alpha_set"},
      {"synth.alpha", "0.1", T::double_t, "alpha for the alpha_set pool"},
      {"synth.sa_samples", "20", T::int_t, "samples per problem for self-generated data"},

      {"verifier.epochs", "3", T::int_t, "training epochs"},
      {"verifier.batch_pairs", "128", T::int_t, "preference pairs per step"},
      {"verifier.lr", "3e-4", T::double_t, "peak learning rate"},
      {"verifier.warmup", "20", T::int_t, "warmup steps"},
      {"verifier.grad_clip", "1.0", T::double_t, "global-norm gradient clip"},
      {"verifier.holdout_fraction", "0.25", T::double_t, "held-out pair fraction"},

      {"decode.alpha", "0.1", T::double_t, "adaptive plausibility threshold"},
      {"decode.beta", "0.25", T::double_t, "verifier steering strength"},
      {"decode.temperature", "1.0", T::double_t, "sampling temperature"},
      {"decode.max_tokens", "192", T::int_t, "generation cap"},

      {"eval.sc_limit", "150", T::int_t, "problems for self-consistency runs"},
      {"eval.latency_limit", "25", T::int_t, "problems for latency runs"},
      {"eval.latency_reps", "3", T::int_t, "recorded latency repetitions"},
  };
  return kRegistry;
}

RunConfig::RunConfig() {
  for (const auto& spec : registry()) values_[spec.key] = spec.def;
}

const RunConfig::KeySpec& RunConfig::spec(const std::string& key) const {
  for (const auto& s : registry()) {
    if (s.key == key) return s;
  }
  fail_validation("unknown config key: " + key);
}

void RunConfig::set(const std::string& dotted_key, const std::string& value) {
  const KeySpec& s = spec(dotted_key);
  std::string v = trim(value);
  if (s.type == KeySpec::Type::int_t) {
    try {
      size_t used = 0;
      (void)std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      fail_validation("config key " + dotted_key + " expects an integer, got '" + v + "'");
    }
  } else if (s.type == KeySpec::Type::double_t) {
    try {
      size_t used = 0;
      (void)std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      fail_validation("config key " + dotted_key + " expects a number, got '" + v + "'");
    }
  }
  values_[dotted_key] = v;
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_validation("cannot open config file: " + path);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      fail_validation(path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(t.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    set(key, trim(t.substr(eq + 1)));
  }
}

std::string RunConfig::get_string(const std::string& key) const {
  spec(key);
  return values_.at(key);
}

long long RunConfig::get_int(const std::string& key) const {
  return std::stoll(get_string(key));
}

uint64_t RunConfig::get_u64(const std::string& key) const {
  return static_cast<uint64_t>(std::stoll(get_string(key)));
}

double RunConfig::get_double(const std::string& key) const {
  return std::stod(get_string(key));
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) > 0; }

std::string RunConfig::echo_ini() const {
  std::ostringstream out;
  std::string section;
  for (const auto& s : registry()) {
    size_t dot = s.key.find('.');
    std::string sec = s.key.substr(0, dot);
    std::string name = s.key.substr(dot + 1);
    if (sec != section) {
      if (!section.empty()) out << '\n';
      out << '[' << sec << "]\n";
      section = sec;
    }
    out << name << " = " << values_.at(s.key) << '\n';
  }
  return out.str();
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  for (const auto& s : registry()) j[s.key] = values_.at(s.key);
  return j;
}

nn::ModelConfig RunConfig::model_config() const {
  nn::ModelConfig cfg;
  cfg.n_layer = static_cast<int>(get_int("lm.n_layer"));
  cfg.d_model = static_cast<int>(get_int("lm.d_model"));
  cfg.n_head = static_cast<int>(get_int("lm.n_head"));
  cfg.d_ff = static_cast<int>(get_int("lm.d_ff"));
  cfg.n_ctx = static_cast<int>(get_int("lm.n_ctx"));
  cfg.vocab_size = lm::Vocabulary::task_default().size();
  cfg.head = nn::HeadKind::lm;
  return cfg;
}

lm::LmTrainConfig RunConfig::lm_train_config() const {
  lm::LmTrainConfig t;
  t.lr = get_double("lm.lr");
  t.batch_size = static_cast<int>(get_int("lm.batch_size"));
  t.steps = static_cast<int>(get_int("lm.steps"));
  t.seed = seed_mix(seed(), hash_str("train_lm"));
  t.warmup = static_cast<int>(get_int("lm.warmup"));
  t.grad_clip = get_double("lm.grad_clip");
  t.val_fraction = get_double("lm.val_fraction");
  t.val_every = static_cast<int>(get_int("lm.val_every"));
  t.workers = workers();
  return t;
}

synthesis::SynthesisConfig RunConfig::synthesis_config() const {
  synthesis::SynthesisConfig s;
  s.n_rollouts = static_cast<int>(get_int("synth.n_rollouts"));
  s.top_k = static_cast<int>(get_int("synth.top_k"));
  s.threshold = get_double("synth.threshold");
  s.rollout_temperature = get_double("synth.temperature");
  s.rollout_cap = static_cast<int>(get_int("synth.cap"));
  s.rng_seed = seed_mix(seed(), hash_str("synthesize"));
  std::string pool = get_string("synth.pool");
  if (pool == "top_k") {
    s.pool = synthesis::NegativePool::top_k;
  } else if (pool == "alpha_set") {
    s.pool = synthesis::NegativePool::alpha_set;
  } else {
    fail_validation("synth.pool must be top_k or alpha_set, got '" + pool + "'");
  }
  s.alpha = get_double("synth.alpha");
  return s;
}

verifier::VerifierTrainConfig RunConfig::verifier_train_config() const {
  verifier::VerifierTrainConfig v;
  v.epochs = static_cast<int>(get_int("verifier.epochs"));
  v.batch_pairs = static_cast<int>(get_int("verifier.batch_pairs"));
  v.lr = get_double("verifier.lr");
  v.warmup = static_cast<int>(get_int("verifier.warmup"));
  v.grad_clip = get_double("verifier.grad_clip");
  v.seed = seed_mix(seed(), hash_str("train_verifier"));
  v.holdout_fraction = get_double("verifier.holdout_fraction");
  v.workers = workers();
  return v;
}

decoding::DecodeConfig RunConfig::decode_config() const {
  decoding::DecodeConfig d;
  d.alpha = get_double("decode.alpha");
  d.beta = get_double("decode.beta");
  d.temperature = get_double("decode.temperature");
  d.max_tokens = static_cast<int>(get_int("decode.max_tokens"));
  d.rng_seed = seed_mix(seed(), hash_str("decode"));
  return d;
}

std::vector<task::DifficultyWeight> RunConfig::difficulty_mix() const {
  int lo = static_cast<int>(get_int("data.difficulty_min"));
  int hi = static_cast<int>(get_int("data.difficulty_max"));
  if (lo > hi) fail_validation("data.difficulty_min must be <= data.difficulty_max");
  std::vector<task::DifficultyWeight> mix;
  for (int d = lo; d <= hi; ++d) mix.push_back({d, 1.0});
  return mix;
}

int RunConfig::workers() const {
  int w = static_cast<int>(get_int("run.workers"));
  if (w <= 0) return default_workers();
  return w;
}

}  // namespace duet::cli

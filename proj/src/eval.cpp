#include "duet/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include "duet/error.hpp"
#include "duet/parallel.hpp"
#include "duet/rng.hpp"

namespace duet::eval {

namespace {
using Clock = std::chrono::steady_clock;
namespace fs = std::filesystem;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

task::Corpus corpus_head(const task::Corpus& corpus, int limit) {
  if (limit <= 0 || limit >= static_cast<int>(corpus.problems.size())) return corpus;
  task::Corpus out;
  out.split_tag = corpus.split_tag;
  out.problems.assign(corpus.problems.begin(), corpus.problems.begin() + limit);
  return out;
}

ordered_json json_opt(const std::optional<long long>& v) {
  if (v) return *v;
  return nullptr;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_runtime("cannot open for writing: " + path);
  out << text;
  if (!out) fail_runtime("write failed: " + path);
}

}  // namespace

DecoderSpec vanilla_greedy_decoder(const lm::LmEngine& engine, int max_tokens) {
  DecoderSpec spec;
  spec.name = "vanilla_greedy";
  spec.decode_text = [&engine, max_tokens](const task::Problem& p) {
    return engine.greedy_decode(engine.prompt_context(p), max_tokens).text;
  };
  return spec;
}

DecoderSpec dual_greedy_decoder(const lm::LmEngine& engine, const verifier::Scorer& scorer,
                                const decoding::DecodeConfig& cfg) {
  DecoderSpec spec;
  spec.name = "dual_greedy";
  decoding::DecodeConfig greedy_cfg = cfg;
  greedy_cfg.strategy = decoding::Strategy::greedy;
  spec.decode_text = [&engine, &scorer, greedy_cfg](const task::Problem& p) {
    return decoding::decode(engine, scorer, engine.prompt_context(p), greedy_cfg)
        .continuation.text;
  };
  return spec;
}

AccuracyReport evaluate_accuracy(const DecoderSpec& decoder, const task::Corpus& corpus,
                                 int workers) {
  AccuracyReport rep;
  rep.name = decoder.name;
  rep.n_problems = static_cast<long>(corpus.problems.size());
  rep.outcomes.resize(corpus.problems.size());
  auto t0 = Clock::now();
  parallel_for(static_cast<int>(corpus.problems.size()), workers, [&](int i) {
    const auto& problem = corpus.problems[static_cast<size_t>(i)];
    ProblemOutcome& out = rep.outcomes[static_cast<size_t>(i)];
    out.id = problem.id;
    auto tp = Clock::now();
    try {
      std::string text = decoder.decode_text(problem);
      out.extracted = task::extract_answer(text);
      out.correct = task::check_answer(problem, text);
    } catch (const std::exception& e) {
      out.error = e.what();
      out.correct = false;
    }
    out.wall_ms = ms_since(tp);
  });
  rep.total_ms = ms_since(t0);
  long correct = 0;
  for (const auto& o : rep.outcomes) {
    if (o.correct) ++correct;
    if (!o.error.empty()) ++rep.n_errors;
  }
  rep.accuracy = rep.n_problems > 0 ? static_cast<double>(correct) / rep.n_problems : 0.0;
  return rep;
}

ordered_json AccuracyReport::to_json() const {
  ordered_json j;
  j["name"] = name;
  j["type"] = "accuracy";
  j["config"] = config;
  j["n_problems"] = n_problems;
  j["n_errors"] = n_errors;
  j["accuracy"] = accuracy;
  ordered_json outs = ordered_json::array();
  ordered_json per_ms = ordered_json::array();
  for (const auto& o : outcomes) {
    ordered_json oj;
    oj["id"] = o.id;
    oj["correct"] = o.correct;
    oj["extracted"] = json_opt(o.extracted);
    if (!o.error.empty()) oj["error"] = o.error;
    outs.push_back(std::move(oj));
    per_ms.push_back(o.wall_ms);
  }
  j["outcomes"] = std::move(outs);
  j["timing"] = {{"total_ms", total_ms}, {"per_problem_ms", std::move(per_ms)}};
  return j;
}

MajorReport major_at_n(const lm::LmEngine& engine, const verifier::Scorer* scorer,
                       const task::Corpus& corpus, const decoding::DecodeConfig& cfg,
                       const std::vector<int>& n_values, int workers) {
  if (n_values.empty()) fail_validation("major_at_n: empty n_values");
  decoding::DecodeConfig sample_cfg = cfg;
  sample_cfg.strategy = decoding::Strategy::sample;
  int m = *std::max_element(n_values.begin(), n_values.end());
  if (m < 1) fail_validation("major_at_n: N values must be >= 1");

  MajorReport rep;
  rep.name = scorer ? "major_dual" : "major_vanilla";
  rep.n_values = n_values;
  rep.problem_ids.resize(corpus.problems.size());
  rep.sample_answers.resize(corpus.problems.size());
  auto t0 = Clock::now();

  parallel_for(static_cast<int>(corpus.problems.size()), workers, [&](int i) {
    const auto& problem = corpus.problems[static_cast<size_t>(i)];
    decoding::DecodeConfig per = sample_cfg;
    per.rng_seed = seed_mix(sample_cfg.rng_seed, hash_str(problem.id));
    auto sc = decoding::self_consistency(engine, scorer, engine.prompt_context(problem), per, m);
    rep.problem_ids[static_cast<size_t>(i)] = problem.id;
    rep.sample_answers[static_cast<size_t>(i)] = std::move(sc.sample_answers);
  });

  for (int n : n_values) {
    long correct = 0;
    for (size_t i = 0; i < corpus.problems.size(); ++i) {
      std::vector<std::optional<long long>> head(
          rep.sample_answers[i].begin(),
          rep.sample_answers[i].begin() + std::min<size_t>(static_cast<size_t>(n),
                                                           rep.sample_answers[i].size()));
      auto vote = decoding::vote_majority(head);
      if (vote && *vote == corpus.problems[i].answer) ++correct;
    }
    rep.accuracy_at[n] =
        corpus.problems.empty() ? 0.0
                                : static_cast<double>(correct) /
                                      static_cast<double>(corpus.problems.size());
  }
  rep.total_ms = ms_since(t0);
  return rep;
}

ordered_json MajorReport::to_json() const {
  ordered_json j;
  j["name"] = name;
  j["type"] = "major";
  j["config"] = config;
  j["n_values"] = n_values;
  ordered_json acc;
  for (const auto& [n, a] : accuracy_at) acc[std::to_string(n)] = a;
  j["accuracy_at"] = std::move(acc);
  ordered_json problems = ordered_json::array();
  for (size_t i = 0; i < problem_ids.size(); ++i) {
    ordered_json pj;
    pj["id"] = problem_ids[i];
    ordered_json answers = ordered_json::array();
    for (const auto& a : sample_answers[i]) answers.push_back(json_opt(a));
    pj["answers"] = std::move(answers);
    problems.push_back(std::move(pj));
  }
  j["problems"] = std::move(problems);
  j["timing"] = {{"total_ms", total_ms}};
  return j;
}

LatencyReport latency_bench(const lm::LmEngine& engine, const verifier::Scorer& scorer,
                            const task::Corpus& corpus, const decoding::DecodeConfig& cfg,
                            int repetitions) {
  if (repetitions < 3) fail_validation("latency_bench: repetitions must be >= 3");
  if (corpus.problems.empty()) fail_validation("latency_bench: empty corpus");
  decoding::DecodeConfig greedy_cfg = cfg;
  greedy_cfg.strategy = decoding::Strategy::greedy;

  LatencyReport rep;
  rep.repetitions = repetitions;
  rep.instances = static_cast<long>(corpus.problems.size());
  rep.invocation_rule_ok = true;

  // Warm-up pass (excluded) plus `repetitions` recorded passes, single worker.
  for (int r = -1; r < repetitions; ++r) {
    for (const auto& problem : corpus.problems) {
      lm::Context prompt = engine.prompt_context(problem);

      auto tv = Clock::now();
      auto vanilla = engine.greedy_decode(prompt, greedy_cfg.max_tokens);
      double van_ms = ms_since(tv);
      (void)vanilla;

      auto td = Clock::now();
      auto dual = decoding::decode(engine, scorer, prompt, greedy_cfg);
      double dual_ms_one = ms_since(td);

      double phase_sum = dual.prefill_ms;
      for (const auto& step : dual.trace) {
        phase_sum += step.ms_lm + step.ms_verifier;
        if (step.verifier_invoked != (step.set_size > 1)) rep.invocation_rule_ok = false;
        if (r >= 0) {
          ++rep.total_steps;
          if (step.set_size > 1) ++rep.multi_candidate_steps;
        }
      }
      if (r >= 0) {
        rep.vanilla_ms.push_back(van_ms);
        rep.dual_ms.push_back(dual_ms_one);
        double rel = std::abs(dual.total_ms - phase_sum) / std::max(dual.total_ms, 1e-9);
        rep.phase_consistency_max_rel_err = std::max(rep.phase_consistency_max_rel_err, rel);
      }
    }
  }

  double vs = 0, ds = 0;
  for (double v : rep.vanilla_ms) vs += v;
  for (double d : rep.dual_ms) ds += d;
  rep.vanilla_mean_ms = vs / static_cast<double>(rep.vanilla_ms.size());
  rep.dual_mean_ms = ds / static_cast<double>(rep.dual_ms.size());
  rep.overhead_ratio = rep.dual_mean_ms / rep.vanilla_mean_ms;
  rep.invoked_fraction = rep.total_steps > 0
                             ? static_cast<double>(rep.multi_candidate_steps) / rep.total_steps
                             : 0.0;
  return rep;
}

ordered_json LatencyReport::to_json() const {
  ordered_json j;
  j["name"] = name;
  j["type"] = "latency";
  j["config"] = config;
  j["repetitions"] = repetitions;
  j["instances"] = instances;
  j["total_steps"] = total_steps;
  j["multi_candidate_steps"] = multi_candidate_steps;
  j["invoked_fraction"] = invoked_fraction;
  j["invocation_rule_ok"] = invocation_rule_ok;
  j["timing"] = {{"vanilla_ms", vanilla_ms},
                 {"dual_ms", dual_ms},
                 {"vanilla_mean_ms", vanilla_mean_ms},
                 {"dual_mean_ms", dual_mean_ms},
                 {"overhead_ratio", overhead_ratio},
                 {"phase_consistency_max_rel_err", phase_consistency_max_rel_err}};
  return j;
}

ordered_json strip_timing(const ordered_json& j) {
  if (j.is_object()) {
    ordered_json out = ordered_json::object();
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() == "timing") continue;
      out[it.key()] = strip_timing(it.value());
    }
    return out;
  }
  if (j.is_array()) {
    ordered_json out = ordered_json::array();
    for (const auto& e : j) out.push_back(strip_timing(e));
    return out;
  }
  return j;
}

ordered_json default_manifest(const std::string& data_dir, const std::string& models_dir,
                              uint64_t seed, int workers) {
  ordered_json m;
  m["seed"] = seed;
  m["workers"] = workers;
  m["corpus"] = data_dir + "/test.jsonl";
  m["models"] = {{"lm", models_dir + "/lm.ckpt"},
                 {"verifier", models_dir + "/verifier.ckpt"},
                 {"verifier_sa", models_dir + "/verifier_sa.ckpt"}};
  ordered_json runs = ordered_json::array();
  auto add = [&](ordered_json run) { runs.push_back(std::move(run)); };
  add({{"name", "vanilla_greedy"}, {"type", "accuracy"}, {"decoder", "vanilla"}});
  add({{"name", "dual_greedy"}, {"type", "accuracy"}, {"decoder", "dual"}});
  add({{"name", "dual_greedy_sa"}, {"type", "accuracy"}, {"decoder", "dual_sa"}});
  add({{"name", "sc_vanilla"},
       {"type", "major"},
       {"decoder", "vanilla"},
       {"n_values", {1, 5, 10, 20}},
       {"temperature", 1.0},
       {"limit", 150}});
  add({{"name", "sc_dual"},
       {"type", "major"},
       {"decoder", "dual"},
       {"n_values", {1, 5, 10, 20}},
       {"temperature", 1.0},
       {"limit", 150}});
  add({{"name", "latency"}, {"type", "latency"}, {"limit", 25}, {"repetitions", 3}});
  add({{"name", "latency_control_alpha1"},
       {"type", "latency"},
       {"alpha", 1.0},
       {"limit", 25},
       {"repetitions", 3}});
  add({{"name", "discrimination"}, {"type", "discrimination"}});
  add({{"name", "probe_vanilla"},
       {"type", "accuracy"},
       {"decoder", "vanilla"},
       {"corpus", data_dir + "/probe.jsonl"}});
  add({{"name", "probe_dual"},
       {"type", "accuracy"},
       {"decoder", "dual"},
       {"corpus", data_dir + "/probe.jsonl"}});
  m["runs"] = std::move(runs);
  return m;
}

namespace {

struct SuiteContext {
  ordered_json manifest;
  std::string out_dir;
  uint64_t seed = 0;
  int workers = 1;

  std::map<std::string, task::Corpus> corpora;
  std::unique_ptr<lm::LmEngine> lm_engine;
  nn::Params<float> lm_params;
  std::map<std::string, std::unique_ptr<verifier::Scorer>> scorers;
  std::map<std::string, nn::Params<float>> verifier_params;

  const task::Corpus& corpus(const std::string& path) {
    auto it = corpora.find(path);
    if (it == corpora.end()) it = corpora.emplace(path, task::load_corpus_jsonl(path)).first;
    return it->second;
  }

  const lm::LmEngine& lm() {
    if (!lm_engine) {
      lm_params = nn::load_checkpoint(manifest.at("models").at("lm").get<std::string>(),
                                      nn::HeadKind::lm);
      lm_engine = std::make_unique<lm::LmEngine>(lm_params);
    }
    return *lm_engine;
  }

  const verifier::Scorer& scorer(const std::string& which) {
    auto it = scorers.find(which);
    if (it == scorers.end()) {
      std::string key = which == "sa" ? "verifier_sa" : "verifier";
      verifier_params[which] = nn::load_checkpoint(
          manifest.at("models").at(key).get<std::string>(), nn::HeadKind::scalar);
      it = scorers.emplace(which, std::make_unique<verifier::Scorer>(verifier_params[which]))
               .first;
    }
    return *it->second;
  }
};

uint64_t run_config_hash(const ordered_json& manifest, const ordered_json& run) {
  ordered_json key;
  key["seed"] = manifest.value("seed", 0ull);
  key["corpus"] = manifest.value("corpus", std::string());
  key["models"] = manifest.value("models", ordered_json::object());
  key["run"] = run;
  return hash_str(key.dump());
}

std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

decoding::DecodeConfig decode_cfg_from_run(const ordered_json& run, uint64_t seed) {
  decoding::DecodeConfig cfg;
  cfg.alpha = run.value("alpha", cfg.alpha);
  cfg.beta = run.value("beta", cfg.beta);
  cfg.temperature = run.value("temperature", cfg.temperature);
  cfg.max_tokens = run.value("max_tokens", cfg.max_tokens);
  cfg.rng_seed = seed;
  return cfg;
}

ordered_json execute_run(SuiteContext& ctx, const ordered_json& run) {
  std::string type = run.at("type").get<std::string>();
  std::string name = run.at("name").get<std::string>();
  std::string corpus_path = run.value("corpus", ctx.manifest.at("corpus").get<std::string>());
  task::Corpus corpus = corpus_head(ctx.corpus(corpus_path), run.value("limit", 0));
  uint64_t run_seed = seed_mix(ctx.seed, hash_str(name));

  ordered_json config = run;
  config["corpus"] = corpus_path;
  config["effective_problems"] = corpus.problems.size();

  if (type == "accuracy") {
    std::string dec = run.value("decoder", std::string("vanilla"));
    decoding::DecodeConfig cfg = decode_cfg_from_run(run, run_seed);
    DecoderSpec spec;
    if (dec == "vanilla") {
      spec = vanilla_greedy_decoder(ctx.lm(), cfg.max_tokens);
    } else if (dec == "dual") {
      spec = dual_greedy_decoder(ctx.lm(), ctx.scorer("gt"), cfg);
    } else if (dec == "dual_sa") {
      spec = dual_greedy_decoder(ctx.lm(), ctx.scorer("sa"), cfg);
    } else {
      fail_validation("unknown decoder in run " + name + ": " + dec);
    }
    spec.name = name;
    AccuracyReport rep = evaluate_accuracy(spec, corpus, ctx.workers);
    rep.config = config;
    return rep.to_json();
  }
  if (type == "major") {
    std::string dec = run.value("decoder", std::string("vanilla"));
    decoding::DecodeConfig cfg = decode_cfg_from_run(run, run_seed);
    cfg.strategy = decoding::Strategy::sample;
    std::vector<int> n_values = run.value("n_values", std::vector<int>{1, 5, 10, 20});
    const verifier::Scorer* scorer = nullptr;
    if (dec == "dual") scorer = &ctx.scorer("gt");
    if (dec == "dual_sa") scorer = &ctx.scorer("sa");
    MajorReport rep = major_at_n(ctx.lm(), scorer, corpus, cfg, n_values, ctx.workers);
    rep.name = name;
    rep.config = config;
    return rep.to_json();
  }
  if (type == "latency") {
    decoding::DecodeConfig cfg = decode_cfg_from_run(run, run_seed);
    LatencyReport rep =
        latency_bench(ctx.lm(), ctx.scorer("gt"), corpus, cfg, run.value("repetitions", 3));
    rep.name = name;
    rep.config = config;
    return rep.to_json();
  }
  if (type == "discrimination") {
    std::string which = run.value("verifier", std::string("gt"));
    ctx.scorer(which);  // ensures params are loaded
    const auto& vp = ctx.verifier_params.at(which);
    auto drep = verifier::token_discrimination_eval(vp, ctx.lm_params, corpus, ctx.workers);
    ordered_json j;
    j["name"] = name;
    j["type"] = "discrimination";
    j["config"] = config;
    j["positions"] = drep.positions;
    j["accuracy"] = drep.accuracy;
    j["wilson_low"] = drep.wilson_low;
    ordered_json bins = ordered_json::array();
    for (size_t b = 0; b < drep.bin_count.size(); ++b) {
      bins.push_back({{"t_lo", static_cast<int>(b) * 8},
                      {"count", drep.bin_count[b]},
                      {"accuracy", drep.bin_accuracy[b]}});
    }
    j["position_bins"] = std::move(bins);
    return j;
  }
  fail_validation("unknown run type: " + type);
}

std::string render_summary_table(const std::vector<std::pair<std::string, ordered_json>>& runs) {
  auto find = [&](const std::string& name) -> const ordered_json* {
    for (const auto& [n, j] : runs) {
      if (n == name) return &j;
    }
    return nullptr;
  };
  std::ostringstream out;
  out << "== accuracy (greedy) ==\n";
  out << "  corpus         vanilla    dual       dual-sa\n";
  auto acc_of = [&](const char* name) -> std::string {
    const ordered_json* j = find(name);
    if (!j || !j->contains("accuracy")) return "    -  ";
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%7.4f", j->at("accuracy").get<double>());
    return buf;
  };
  out << "  test          " << acc_of("vanilla_greedy") << "    " << acc_of("dual_greedy")
      << "    " << acc_of("dual_greedy_sa") << "\n";
  out << "  probe         " << acc_of("probe_vanilla") << "    " << acc_of("probe_dual")
      << "        -  \n";

  out << "== self-consistency major@N ==\n";
  for (const char* name : {"sc_vanilla", "sc_dual"}) {
    const ordered_json* j = find(name);
    if (!j || !j->contains("accuracy_at")) continue;
    out << "  " << name << ":";
    for (auto it = j->at("accuracy_at").begin(); it != j->at("accuracy_at").end(); ++it) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "  @%s %.4f", it.key().c_str(),
                    it.value().get<double>());
      out << buf;
    }
    out << "\n";
  }

  out << "== latency ==\n";
  for (const char* name : {"latency", "latency_control_alpha1"}) {
    const ordered_json* j = find(name);
    if (!j || !j->contains("timing")) continue;
    const auto& t = j->at("timing");
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "  %-24s vanilla %8.2f ms  dual %8.2f ms  ratio x%.3f  invoked %.3f\n", name,
                  t.at("vanilla_mean_ms").get<double>(), t.at("dual_mean_ms").get<double>(),
                  t.at("overhead_ratio").get<double>(),
                  j->at("invoked_fraction").get<double>());
    out << buf;
  }

  if (const ordered_json* j = find("discrimination"); j && j->contains("accuracy")) {
    char buf[120];
    std::snprintf(buf, sizeof(buf),
                  "== verifier ==\n  discrimination accuracy %.4f over %ld positions "
                  "(wilson_low %.4f)\n",
                  j->at("accuracy").get<double>(), j->at("positions").get<long>(),
                  j->at("wilson_low").get<double>());
    out << buf;
  }
  return out.str();
}

}  // namespace

SuiteResult run_experiment_suite(const ordered_json& manifest, const std::string& out_dir) {
  if (!manifest.contains("runs")) fail_validation("manifest missing 'runs'");
  fs::create_directories(out_dir);

  SuiteContext ctx;
  ctx.manifest = manifest;
  ctx.out_dir = out_dir;
  ctx.seed = manifest.value("seed", 0ull);
  ctx.workers = manifest.value("workers", 1);

  SuiteResult result;
  std::vector<std::pair<std::string, ordered_json>> reports;
  ordered_json summary_runs = ordered_json::array();

  for (const auto& run : manifest.at("runs")) {
    std::string name = run.at("name").get<std::string>();
    result.run_names.push_back(name);
    std::string path = out_dir + "/" + name + ".json";
    std::string chash = hash_hex(run_config_hash(manifest, run));

    ordered_json report;
    bool reused = false;
    if (fs::exists(path)) {
      std::ifstream in(path, std::ios::binary);
      ordered_json existing = ordered_json::parse(in, nullptr, false);
      if (!existing.is_discarded() && existing.value("config_hash", std::string()) == chash) {
        report = std::move(existing);
        reused = true;
        result.reused_runs.push_back(name);
      }
    }

    if (!reused) {
      auto t0 = Clock::now();
      try {
        report = execute_run(ctx, run);
      } catch (const std::exception& e) {
        report = ordered_json{{"name", name}, {"type", run.value("type", std::string())},
                              {"status", "failed"}, {"error", e.what()}};
        result.failed_runs.push_back(name);
      }
      if (!report.contains("status")) report["status"] = "ok";
      report["config_hash"] = chash;
      if (!report.contains("timing")) report["timing"] = ordered_json::object();
      report["timing"]["suite_run_ms"] = ms_since(t0);
      write_text_file(path, report.dump(2) + "\n");
    }
    reports.emplace_back(name, std::move(report));
  }

  ordered_json summary;
  summary["out_dir"] = out_dir;
  for (const auto& [name, rep] : reports) {
    ordered_json s;
    s["name"] = name;
    s["status"] = rep.value("status", std::string("ok"));
    if (rep.contains("accuracy")) s["accuracy"] = rep.at("accuracy");
    if (rep.contains("accuracy_at")) s["accuracy_at"] = rep.at("accuracy_at");
    if (rep.contains("invoked_fraction")) s["invoked_fraction"] = rep.at("invoked_fraction");
    if (rep.contains("wilson_low")) s["wilson_low"] = rep.at("wilson_low");
    if (!rep.value("error", std::string()).empty()) s["error"] = rep.at("error");
    summary_runs.push_back(std::move(s));
  }
  summary["runs"] = std::move(summary_runs);
  write_text_file(out_dir + "/summary.json", summary.dump(2) + "\n");
  write_text_file(out_dir + "/summary.txt", render_summary_table(reports));
  return result;
}

}  // namespace duet::eval

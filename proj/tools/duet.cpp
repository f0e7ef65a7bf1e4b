// duet: a small trainable language model steered token-by-token by a process
// verifier. Subcommands cover the whole pipeline:
//   gen-data -> train-lm -> synthesize -> train-verifier -> decode / eval

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>

#include "duet/config.hpp"
#include "duet/decoding.hpp"
#include "duet/error.hpp"
#include "duet/eval.hpp"
#include "duet/lm.hpp"
#include "duet/nn/model.hpp"
#include "duet/synthesis.hpp"
#include "duet/task.hpp"
#include "duet/verifier.hpp"

namespace fs = std::filesystem;
using duet::Error;
using duet::ErrorKind;
using ordered_json = nlohmann::ordered_json;

namespace {

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> overrides;  // key=value
  std::string seed;
  std::string out;
  std::string workers;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_file, "config file (INI, sections)");
  cmd->add_option("--set", args.overrides, "override a config key (key=value)")
      ->type_name("KEY=VALUE");
  cmd->add_option("--seed", args.seed, "global seed (run.seed)");
  cmd->add_option("--out", args.out, "artifact root (run.out)");
  cmd->add_option("--workers", args.workers, "worker threads (run.workers)");
  cmd->add_flag("--force", args.force, "overwrite existing artifacts");
}

duet::cli::RunConfig resolve_config(const CommonArgs& args) {
  duet::cli::RunConfig cfg;
  if (!args.config_file.empty()) cfg.load_file(args.config_file);
  for (const auto& kv : args.overrides) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos) duet::fail_usage("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!args.seed.empty()) cfg.set("run.seed", args.seed);
  if (!args.out.empty()) cfg.set("run.out", args.out);
  if (!args.workers.empty()) cfg.set("run.workers", args.workers);
  return cfg;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) duet::fail_runtime("cannot open for writing: " + path);
  out << text;
  if (!out) duet::fail_runtime("write failed: " + path);
}

void echo_config(const duet::cli::RunConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  write_file(dir + "/config.ini", cfg.echo_ini());
}

void refuse_existing(const std::vector<std::string>& paths, bool force) {
  if (force) return;
  for (const auto& p : paths) {
    if (fs::exists(p)) {
      duet::fail_validation("refusing to overwrite " + p + " (use --force)");
    }
  }
}

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(const CommonArgs& common) {
  auto cfg = resolve_config(common);
  std::string dir = cfg.out_root() + "/data";
  fs::create_directories(dir);
  std::string train_path = dir + "/train.jsonl";
  std::string test_path = dir + "/test.jsonl";
  std::string probe_path = dir + "/probe.jsonl";
  refuse_existing({train_path, test_path, probe_path}, common.force);

  auto mix = cfg.difficulty_mix();
  auto train = duet::task::build_corpus(static_cast<int>(cfg.get_int("data.n_train")),
                                        duet::seed_mix(cfg.seed(), duet::hash_str("train")),
                                        mix, "train");
  std::unordered_set<std::string> reserved;
  for (const auto& p : train.problems) reserved.insert(p.prompt_text);
  auto test = duet::task::build_corpus(static_cast<int>(cfg.get_int("data.n_test")),
                                       duet::seed_mix(cfg.seed(), duet::hash_str("test")), mix,
                                       "test", &reserved);
  for (const auto& p : test.problems) reserved.insert(p.prompt_text);
  std::vector<duet::task::DifficultyWeight> probe_mix = {
      {static_cast<int>(cfg.get_int("data.probe_difficulty")), 1.0}};
  auto probe = duet::task::build_corpus(static_cast<int>(cfg.get_int("data.n_probe")),
                                        duet::seed_mix(cfg.seed(), duet::hash_str("probe")),
                                        probe_mix, "probe", &reserved);

  duet::task::save_corpus_jsonl(train, train_path);
  duet::task::save_corpus_jsonl(test, test_path);
  duet::task::save_corpus_jsonl(probe, probe_path);
  echo_config(cfg, dir);
  std::cout << "wrote " << train.problems.size() << " train / " << test.problems.size()
            << " test / " << probe.problems.size() << " probe problems under " << dir << "\n";
  return 0;
}

// ---------------------------------------------------------------- train-lm

int cmd_train_lm(const CommonArgs& common, const std::string& init_from) {
  auto cfg = resolve_config(common);
  std::string data_dir = cfg.out_root() + "/data";
  std::string dir = cfg.out_root() + "/models";
  fs::create_directories(dir);
  std::string ckpt_path = dir + "/lm.ckpt";
  refuse_existing({ckpt_path}, common.force);

  auto corpus = duet::task::load_corpus_jsonl(data_dir + "/train.jsonl");
  auto vocab = duet::lm::Vocabulary::task_default();
  auto mc = cfg.model_config();
  auto tc = cfg.lm_train_config();

  duet::lm::LmParams init;
  const duet::lm::LmParams* init_ptr = nullptr;
  if (!init_from.empty()) {
    init = duet::nn::load_checkpoint(init_from, duet::nn::HeadKind::lm);
    if (!init.cfg.same_backbone(mc)) {
      duet::fail_runtime("--init-from checkpoint architecture does not match lm.* config");
    }
    init_ptr = &init;
  }

  duet::lm::LmTrainReport report;
  auto params = duet::lm::train_lm(corpus, mc, vocab, tc, &report, init_ptr);
  duet::nn::save_checkpoint(params, ckpt_path);

  std::ofstream curve(dir + "/lm_curve.jsonl", std::ios::binary);
  for (const auto& pt : report.curve) {
    ordered_json j{{"step", pt.step}, {"loss", pt.loss}, {"lr", pt.lr}, {"wall_ms", pt.wall_ms}};
    curve << j.dump() << '\n';
  }
  ordered_json rj;
  rj["init_val_ce"] = report.init_val_ce;
  rj["final_val_ce"] = report.final_val_ce;
  ordered_json vc = ordered_json::array();
  for (const auto& [step, ce] : report.val_curve) vc.push_back({{"step", step}, {"ce", ce}});
  rj["val_curve"] = std::move(vc);
  write_file(dir + "/lm_train_report.json", rj.dump(2) + "\n");
  echo_config(cfg, dir);
  std::cout << "trained lm: init val ce " << report.init_val_ce << " -> final "
            << report.final_val_ce << "; checkpoint " << ckpt_path << "\n";
  return 0;
}

// ---------------------------------------------------------------- synthesize

int cmd_synthesize(const CommonArgs& common, bool self_generated, int limit_override) {
  auto cfg = resolve_config(common);
  std::string dir = cfg.out_root() + "/synth";
  fs::create_directories(dir);
  std::string suffix = self_generated ? "_sa" : "";
  std::string pairs_path = dir + "/pairs" + suffix + ".jsonl";
  std::string stats_path = dir + "/stats" + suffix + ".json";
  std::string cursor_path = dir + "/cursor" + suffix + ".json";

  auto scfg = cfg.synthesis_config();
  int limit = limit_override > 0 ? limit_override
                                 : static_cast<int>(cfg.get_int("synth.max_instances"));

  auto lm_params =
      duet::nn::load_checkpoint(cfg.out_root() + "/models/lm.ckpt", duet::nn::HeadKind::lm);
  duet::lm::LmEngine engine(lm_params);
  auto full = duet::task::load_corpus_jsonl(cfg.out_root() + "/data/train.jsonl");
  duet::task::Corpus corpus;
  corpus.split_tag = full.split_tag;
  corpus.problems.assign(full.problems.begin(),
                         full.problems.begin() +
                             std::min<size_t>(full.problems.size(),
                                              static_cast<size_t>(limit)));

  if (self_generated) {
    corpus = duet::synthesis::self_generated_corpus(
        engine, corpus, static_cast<int>(cfg.get_int("synth.sa_samples")),
        scfg.rollout_temperature, duet::seed_mix(cfg.seed(), duet::hash_str("sa_corpus")),
        cfg.workers(), scfg.rollout_cap);
    duet::task::save_corpus_jsonl(corpus, dir + "/sa_corpus.jsonl");
    std::cout << "self-generated corpus kept " << corpus.problems.size() << " problems\n";
    if (corpus.problems.empty()) {
      std::cerr << "warning: self-generated corpus is empty; nothing to synthesize\n";
      write_file(stats_path, "{\"pairs\": 0, \"instances\": 0}\n");
      write_file(pairs_path,
                 ordered_json{{"provenance", duet::synthesis::provenance_json(scfg)}}.dump() +
                     "\n");
      echo_config(cfg, dir);
      return 0;
    }
  }

  std::string config_tag = duet::eval::strip_timing(cfg.to_json()).dump() +
                           std::to_string(limit) + (self_generated ? "sa" : "gt");
  uint64_t config_hash = duet::hash_str(config_tag);

  // Resume from the cursor when the previous run used the same configuration.
  int start_index = 0;
  duet::synthesis::DatasetStats resumed;
  resumed.q_histogram.assign(static_cast<size_t>(scfg.n_rollouts) + 1, 0);
  bool appending = false;
  if (fs::exists(cursor_path) && fs::exists(pairs_path) && !common.force) {
    std::ifstream in(cursor_path, std::ios::binary);
    ordered_json cur = ordered_json::parse(in, nullptr, false);
    if (!cur.is_discarded() && cur.value("config_hash", 0ull) == config_hash) {
      start_index = cur.value("completed", 0);
      if (start_index >= static_cast<int>(corpus.problems.size())) {
        std::cout << "synthesis already complete (" << start_index << " instances)\n";
        return 0;
      }
      appending = true;
      resumed.positions = cur["stats"].value("positions", 0l);
      resumed.pairs = cur["stats"].value("pairs", 0l);
      resumed.skipped = cur["stats"].value("skipped", 0l);
      resumed.instances = cur["stats"].value("instances", 0l);
      resumed.instances_without_pairs = cur["stats"].value("instances_without_pairs", 0l);
      auto h = cur["stats"].value("q_histogram", std::vector<int>{});
      for (size_t i = 0; i < h.size() && i < resumed.q_histogram.size(); ++i) {
        resumed.q_histogram[i] = h[i];
      }
      std::cout << "resuming synthesis at instance " << start_index << "\n";
    }
  }

  std::ofstream pairs_out;
  if (appending) {
    pairs_out.open(pairs_path, std::ios::binary | std::ios::app);
  } else {
    refuse_existing({pairs_path}, common.force);
    pairs_out.open(pairs_path, std::ios::binary | std::ios::trunc);
    pairs_out << ordered_json{{"provenance", duet::synthesis::provenance_json(scfg)}}.dump()
              << '\n';
  }
  if (!pairs_out) duet::fail_runtime("cannot open for writing: " + pairs_path);

  duet::synthesis::DatasetStats running = resumed;
  auto sink = [&](int index, const duet::task::Problem& problem,
                  const std::vector<duet::verifier::PreferencePair>& pairs,
                  const duet::synthesis::InstanceStats& st) {
    for (const auto& p : pairs) {
      ordered_json j;
      j["context_ids"] = p.context_ids;
      j["pos"] = p.pos;
      j["neg"] = p.neg;
      j["t"] = p.t;
      j["source_id"] = p.source_id;
      j["neg_quality"] = p.neg_quality;
      pairs_out << j.dump() << '\n';
    }
    pairs_out.flush();
    running.positions += st.positions;
    running.pairs += st.pairs;
    running.skipped += st.skipped;
    running.instances += 1;
    if (pairs.empty()) running.instances_without_pairs += 1;
    for (size_t i = 0; i < st.q_histogram.size(); ++i) running.q_histogram[i] += st.q_histogram[i];
    running.pairs_per_instance.emplace_back(problem.id, st.pairs);

    ordered_json cur;
    cur["completed"] = index + 1;
    cur["config_hash"] = config_hash;
    cur["stats"] = {{"positions", running.positions},
                    {"pairs", running.pairs},
                    {"skipped", running.skipped},
                    {"instances", running.instances},
                    {"instances_without_pairs", running.instances_without_pairs},
                    {"q_histogram", running.q_histogram}};
    write_file(cursor_path, cur.dump() + "\n");
    if ((index + 1) % 10 == 0 || index + 1 == static_cast<int>(corpus.problems.size())) {
      std::cerr << "synthesized " << (index + 1) << "/" << corpus.problems.size()
                << " instances, " << running.pairs << " pairs\n";
    }
  };

  duet::synthesis::synthesize_dataset(engine, corpus, scfg, cfg.workers(), nullptr, sink,
                                      start_index);

  ordered_json stats;
  stats["positions"] = running.positions;
  stats["pairs"] = running.pairs;
  stats["skipped"] = running.skipped;
  stats["instances"] = running.instances;
  stats["instances_without_pairs"] = running.instances_without_pairs;
  stats["q_histogram"] = running.q_histogram;
  ordered_json ppi = ordered_json::array();
  for (const auto& [id, n] : running.pairs_per_instance) {
    ppi.push_back({{"id", id}, {"pairs", n}});
  }
  stats["pairs_per_instance_tail"] = std::move(ppi);
  write_file(stats_path, stats.dump(2) + "\n");
  echo_config(cfg, dir);
  if (running.pairs == 0) {
    std::cerr << "warning: synthesis produced an empty dataset (tau="
              << scfg.threshold << ")\n";
  }
  std::cout << "synthesized " << running.pairs << " pairs over " << running.instances
            << " instances -> " << pairs_path << "\n";
  return 0;
}

// ---------------------------------------------------------------- train-verifier

int cmd_train_verifier(const CommonArgs& common, const std::string& dataset_path, bool sa) {
  auto cfg = resolve_config(common);
  std::string models = cfg.out_root() + "/models";
  fs::create_directories(models);
  std::string suffix = sa ? "_sa" : "";
  std::string ds_path =
      dataset_path.empty() ? cfg.out_root() + "/synth/pairs" + suffix + ".jsonl" : dataset_path;
  std::string ckpt_path = models + "/verifier" + suffix + ".ckpt";
  refuse_existing({ckpt_path}, common.force);

  auto dataset = duet::verifier::load_dataset_jsonl(ds_path);
  auto lm_params = duet::nn::load_checkpoint(models + "/lm.ckpt", duet::nn::HeadKind::lm);
  auto vcfg = cfg.verifier_train_config();
  if (sa) vcfg.seed = duet::seed_mix(vcfg.seed, duet::hash_str("sa"));

  duet::verifier::VerifierTrainReport report;
  auto params = duet::verifier::train_verifier(dataset, lm_params, vcfg, &report);
  duet::nn::save_checkpoint(params, ckpt_path);

  std::ofstream curve(models + "/verifier_curve" + suffix + ".jsonl", std::ios::binary);
  for (const auto& pt : report.curve) {
    ordered_json j{{"step", pt.step}, {"loss", pt.loss}, {"lr", pt.lr}, {"wall_ms", pt.wall_ms}};
    curve << j.dump() << '\n';
  }
  ordered_json rj;
  rj["dataset"] = ds_path;
  rj["pairs"] = dataset.pairs.size();
  rj["init_loss"] = report.init_loss;
  rj["holdout_pairs"] = report.holdout_pairs;
  rj["holdout_pair_accuracy"] = report.holdout_pair_accuracy;
  rj["holdout_accuracy_wilson_low"] = report.holdout_accuracy_wilson_low;
  rj["warning_low_accuracy"] = report.warning_low_accuracy;
  write_file(models + "/verifier_train_report" + suffix + ".json", rj.dump(2) + "\n");
  echo_config(cfg, models);

  std::cout << "initial loss " << report.init_loss << " (ln 2 = 0.693147)\n";
  std::cout << "held-out pair accuracy " << report.holdout_pair_accuracy << " over "
            << report.holdout_pairs << " pairs";
  if (report.warning_low_accuracy) std::cout << "  [warning: at or below chance]";
  std::cout << "\ncheckpoint " << ckpt_path << "\n";
  return 0;
}

// ---------------------------------------------------------------- decode

int cmd_decode(const CommonArgs& common, std::string prompt, const std::string& expr,
               bool vanilla, const std::string& trace_path) {
  auto cfg = resolve_config(common);
  if (!expr.empty()) prompt = "Q: " + expr + "\nA:\n";
  if (prompt.empty()) duet::fail_usage("decode needs --prompt or --expr");

  auto lm_params =
      duet::nn::load_checkpoint(cfg.out_root() + "/models/lm.ckpt", duet::nn::HeadKind::lm);
  duet::lm::LmEngine engine(lm_params);
  auto dcfg = cfg.decode_config();
  duet::lm::Context ctx =
      duet::lm::Context::from_text(engine.vocab(), prompt, engine.config().n_ctx);

  std::string text;
  if (vanilla) {
    auto c = engine.greedy_decode(ctx, dcfg.max_tokens);
    text = c.text;
  } else {
    auto ver_params = duet::nn::load_checkpoint(cfg.out_root() + "/models/verifier.ckpt",
                                                duet::nn::HeadKind::scalar);
    duet::verifier::Scorer scorer(ver_params);
    auto result = duet::decoding::decode(engine, scorer, ctx, dcfg);
    text = result.continuation.text;
    if (!trace_path.empty()) duet::decoding::save_trace_jsonl(result.trace, trace_path);
  }

  std::cout << text;
  if (!text.empty() && text.back() != '\n') std::cout << '\n';
  auto answer = duet::task::extract_answer(text);
  if (answer) {
    std::cout << "[answer] " << *answer << "\n";
  } else {
    std::cout << "[answer] absent\n";
  }
  return 0;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const CommonArgs& common, const std::string& manifest_path) {
  auto cfg = resolve_config(common);
  std::string reports = cfg.out_root() + "/reports";
  fs::create_directories(reports);

  ordered_json manifest;
  if (!manifest_path.empty()) {
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) duet::fail_validation("cannot open manifest: " + manifest_path);
    manifest = ordered_json::parse(in, nullptr, false);
    if (manifest.is_discarded()) duet::fail_validation("malformed manifest: " + manifest_path);
  } else {
    manifest = duet::eval::default_manifest(cfg.out_root() + "/data",
                                            cfg.out_root() + "/models", cfg.seed(),
                                            cfg.workers());
    for (auto& run : manifest["runs"]) {
      std::string type = run.value("type", std::string());
      if (type == "major") run["limit"] = cfg.get_int("eval.sc_limit");
      if (type == "latency") {
        run["limit"] = cfg.get_int("eval.latency_limit");
        run["repetitions"] = cfg.get_int("eval.latency_reps");
      }
      if (run.contains("max_tokens") || type == "accuracy" || type == "major" ||
          type == "latency") {
        run["max_tokens"] = cfg.get_int("decode.max_tokens");
      }
    }
  }
  write_file(reports + "/manifest.json", manifest.dump(2) + "\n");
  echo_config(cfg, reports);

  auto result = duet::eval::run_experiment_suite(manifest, reports);
  std::ifstream summary(reports + "/summary.txt");
  std::cout << summary.rdbuf();
  if (!result.failed_runs.empty()) {
    std::cerr << result.failed_runs.size() << " run(s) failed\n";
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-process decoding pipeline for a synthetic arithmetic task"};
  app.require_subcommand(1);

  CommonArgs gen_args, lm_args, synth_args, ver_args, dec_args, eval_args;

  auto* gen = app.add_subcommand("gen-data", "generate train/test/probe corpora");
  add_common(gen, gen_args);

  auto* tlm = app.add_subcommand("train-lm", "train the language model");
  add_common(tlm, lm_args);
  std::string init_from;
  tlm->add_option("--init-from", init_from, "initialize from an existing checkpoint");

  auto* syn = app.add_subcommand("synthesize", "build the preference dataset");
  add_common(syn, synth_args);
  bool self_generated = false;
  int synth_limit = 0;
  syn->add_flag("--self-generated", self_generated,
                "replace solutions with verified self-generated answers first");
  syn->add_option("--limit", synth_limit, "instances to synthesize over (0 = synth.max_instances)");

  auto* tv = app.add_subcommand("train-verifier", "train the process verifier");
  add_common(tv, ver_args);
  std::string dataset_path;
  bool sa = false;
  tv->add_option("--dataset", dataset_path, "preference dataset path");
  tv->add_flag("--sa", sa, "use the self-generated dataset and _sa output names");

  auto* dec = app.add_subcommand("decode", "decode an ad-hoc prompt");
  add_common(dec, dec_args);
  std::string prompt, expr, trace_path;
  bool vanilla = false;
  dec->add_option("--prompt", prompt, "raw prompt text");
  dec->add_option("--expr", expr, "arithmetic chain, wrapped as 'Q: <expr>\\nA:\\n'");
  dec->add_flag("--vanilla", vanilla, "plain greedy decoding without the verifier");
  dec->add_option("--trace", trace_path, "write per-step trace JSONL here");

  auto* ev = app.add_subcommand("eval", "run the experiment suite");
  add_common(ev, eval_args);
  std::string manifest_path;
  ev->add_option("--manifest", manifest_path, "experiment manifest (JSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;  // usage errors exit 1
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_args);
    if (tlm->parsed()) return cmd_train_lm(lm_args, init_from);
    if (syn->parsed()) return cmd_synthesize(synth_args, self_generated, synth_limit);
    if (tv->parsed()) return cmd_train_verifier(ver_args, dataset_path, sa);
    if (dec->parsed()) return cmd_decode(dec_args, prompt, expr, vanilla, trace_path);
    if (ev->parsed()) return cmd_eval(eval_args, manifest_path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

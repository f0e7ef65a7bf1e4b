// End-to-end CLI checks: exit codes, artifact layout, determinism, and a tiny
// full pipeline run. Scales are shrunk hard so the whole file stays fast.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

const std::string kCli = DUET_CLI_PATH;

struct WorkDir {
  fs::path root;
  explicit WorkDir(const std::string& name) {
    root = fs::temp_directory_path() / name;
    fs::remove_all(root);
    fs::create_directories(root);
  }
};

int run(const std::string& args) {
  std::string cmd = kCli + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

int run_capture(const std::string& args, const std::string& out_file) {
  std::string cmd = kCli + " " + args + " >" + out_file + " 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

long count_lines(const fs::path& path) {
  std::ifstream in(path);
  long n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

// Small-scale overrides shared by the pipeline tests.
std::string tiny_flags(const fs::path& out, int seed = 7) {
  return "--out " + out.string() + " --seed " + std::to_string(seed) +
         " --workers 1"
         " --set data.n_train=24 --set data.n_test=8 --set data.n_probe=4"
         " --set data.difficulty_max=1"
         " --set lm.n_layer=1 --set lm.d_model=48 --set lm.n_head=2 --set lm.d_ff=96"
         " --set lm.n_ctx=96 --set lm.steps=200 --set lm.batch_size=8 --set lm.lr=3e-3"
         " --set lm.val_every=100"
         " --set synth.max_instances=4 --set synth.n_rollouts=4 --set synth.cap=48"
         " --set synth.sa_samples=8"
         " --set verifier.epochs=2 --set verifier.batch_pairs=8"
         " --set verifier.holdout_fraction=0.3"
         " --set decode.max_tokens=48"
         " --set eval.sc_limit=3 --set eval.latency_limit=2 --set eval.latency_reps=3";
}

}  // namespace

TEST_CASE("usage errors exit with code 1") {
  CHECK(run("--definitely-not-a-flag") == 1);
  CHECK(run("") == 1);  // missing subcommand
  CHECK(run("decode") == 1);  // decode requires --prompt or --expr
}

TEST_CASE("validation errors exit with code 2") {
  WorkDir w("duet_cli_validation");
  CHECK(run("gen-data --out " + (w.root / "o").string() + " --set bogus.key=1") == 2);
  CHECK(run("gen-data --out " + (w.root / "o").string() + " --set data.n_train=abc") == 2);
}

TEST_CASE("gen-data writes deterministic corpora and respects --force") {
  WorkDir w("duet_cli_gendata");
  fs::path out = w.root / "run";
  std::string flags = "--out " + out.string() +
                      " --seed 11 --set data.n_train=20 --set data.n_test=6 --set data.n_probe=3";
  REQUIRE(run("gen-data " + flags) == 0);
  CHECK(fs::exists(out / "data" / "train.jsonl"));
  CHECK(fs::exists(out / "data" / "test.jsonl"));
  CHECK(fs::exists(out / "data" / "probe.jsonl"));
  CHECK(fs::exists(out / "data" / "config.ini"));
  CHECK(count_lines(out / "data" / "train.jsonl") == 20);
  CHECK(count_lines(out / "data" / "test.jsonl") == 6);

  // refuses to overwrite without --force
  CHECK(run("gen-data " + flags) == 2);

  std::string before = slurp(out / "data" / "train.jsonl");
  REQUIRE(run("gen-data " + flags + " --force") == 0);
  CHECK(slurp(out / "data" / "train.jsonl") == before);

  // a different seed changes the data
  fs::path out2 = w.root / "run2";
  REQUIRE(run("gen-data --out " + out2.string() +
              " --seed 12 --set data.n_train=20 --set data.n_test=6 --set data.n_probe=3") == 0);
  CHECK(slurp(out2 / "data" / "train.jsonl") != before);
}

TEST_CASE("the echoed config reproduces the same artifacts") {
  WorkDir w("duet_cli_echo");
  fs::path out_a = w.root / "a";
  fs::path out_b = w.root / "b";
  REQUIRE(run("gen-data --out " + out_a.string() +
              " --seed 21 --set data.n_train=15 --set data.n_test=5 --set data.n_probe=2") == 0);

  // rerun purely from the echoed config, overriding only the output root
  REQUIRE(run("gen-data --config " + (out_a / "data" / "config.ini").string() + " --out " +
              out_b.string()) == 0);
  CHECK(slurp(out_a / "data" / "train.jsonl") == slurp(out_b / "data" / "train.jsonl"));
  CHECK(slurp(out_a / "data" / "test.jsonl") == slurp(out_b / "data" / "test.jsonl"));
}

TEST_CASE("tiny pipeline: train, synthesize, verify, decode, eval") {
  WorkDir w("duet_cli_pipeline");
  fs::path out = w.root / "run";
  std::string flags = tiny_flags(out);

  REQUIRE(run("gen-data " + flags) == 0);
  REQUIRE(run("train-lm " + flags) == 0);
  CHECK(fs::exists(out / "models" / "lm.ckpt"));
  CHECK(count_lines(out / "models" / "lm_curve.jsonl") == 200);  // one row per step

  // resume-style init refuses a mismatched architecture
  CHECK(run("train-lm " + flags + " --force --init-from " + (out / "models" / "lm.ckpt").string() +
            " --set lm.d_model=64") == 3);

  REQUIRE(run("synthesize " + flags) == 0);
  CHECK(fs::exists(out / "synth" / "pairs.jsonl"));
  CHECK(fs::exists(out / "synth" / "stats.json"));
  CHECK(fs::exists(out / "synth" / "cursor.json"));
  {
    auto stats = ordered_json::parse(slurp(out / "synth" / "stats.json"));
    CHECK(stats.at("instances").get<int>() == 4);
    CHECK(stats.at("positions").get<long>() ==
          stats.at("pairs").get<long>() + stats.at("skipped").get<long>());
    // cursor marks completion; re-running is a no-op
    CHECK(run("synthesize " + flags) == 0);
    auto stats2 = ordered_json::parse(slurp(out / "synth" / "stats.json"));
    CHECK(stats2.at("pairs") == stats.at("pairs"));
  }

  REQUIRE(run("train-verifier " + flags) == 0);
  CHECK(fs::exists(out / "models" / "verifier.ckpt"));
  {
    auto rep = ordered_json::parse(slurp(out / "models" / "verifier_train_report.json"));
    CHECK(std::abs(rep.at("init_loss").get<double>() - 0.6931471805599453) < 1e-6);
    CHECK(rep.contains("holdout_pair_accuracy"));
  }

  // SA route: sample self-generated solutions, then synthesize and train on them
  REQUIRE(run("synthesize " + flags + " --self-generated") == 0);
  CHECK(fs::exists(out / "synth" / "pairs_sa.jsonl"));
  REQUIRE(run("train-verifier " + flags + " --sa") == 0);
  CHECK(fs::exists(out / "models" / "verifier_sa.ckpt"));

  // decode: beta=0 equals vanilla token-for-token
  fs::path d1 = w.root / "dual.txt";
  fs::path d2 = w.root / "vanilla.txt";
  REQUIRE(run_capture("decode " + flags + " --expr 12+7 --set decode.beta=0 --trace " +
                          (w.root / "trace.jsonl").string(),
                      d1.string()) == 0);
  REQUIRE(run_capture("decode " + flags + " --expr 12+7 --vanilla", d2.string()) == 0);
  CHECK(slurp(d1) == slurp(d2));
  CHECK(fs::exists(w.root / "trace.jsonl"));

  // prompt longer than the window fails cleanly
  std::string long_expr(300, '1');
  CHECK(run("decode " + flags + " --expr " + long_expr) == 2);

  // eval writes reports and a summary
  REQUIRE(run("eval " + flags) == 0);
  for (const char* name :
       {"vanilla_greedy", "dual_greedy", "dual_greedy_sa", "sc_vanilla", "sc_dual", "latency",
        "latency_control_alpha1", "discrimination", "probe_vanilla", "probe_dual"}) {
    INFO(name);
    CHECK(fs::exists(out / "reports" / (std::string(name) + ".json")));
  }
  CHECK(fs::exists(out / "reports" / "summary.json"));
  CHECK(fs::exists(out / "reports" / "summary.txt"));
  auto summary = ordered_json::parse(slurp(out / "reports" / "summary.json"));
  for (const auto& run_summary : summary.at("runs")) {
    CHECK(run_summary.at("status").get<std::string>() == "ok");
  }
}

TEST_CASE("synthesize with tau=0 warns and produces an empty dataset") {
  WorkDir w("duet_cli_tau0");
  fs::path out = w.root / "run";
  std::string flags = tiny_flags(out, 9) + " --set synth.threshold=0";
  REQUIRE(run("gen-data " + flags) == 0);
  REQUIRE(run("train-lm " + flags) == 0);
  fs::path log = w.root / "synth_log.txt";
  REQUIRE(run_capture("synthesize " + flags, log.string()) == 0);
  auto stats = ordered_json::parse(slurp(out / "synth" / "stats.json"));
  CHECK(stats.at("pairs").get<long>() == 0);
  CHECK(slurp(log).find("warning") != std::string::npos);
  CHECK(count_lines(out / "synth" / "pairs.jsonl") == 1);  // provenance header only
}

#include "duet/task.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>

#include "duet/error.hpp"
#include "duet/rng.hpp"

namespace duet::task {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr uint64_t kDifficultyStream = 0xD1FF;
constexpr uint64_t kProblemStream = 0x9E0B;

struct OpDraw {
  char op;
  long long add_sub_operand;  // in [1, 99]
  long long mul_operand;      // in [2, 9]
};

bool op_valid(char op, long long acc, const OpDraw& d) {
  switch (op) {
    case '+': return acc + d.add_sub_operand <= kMaxChainValue;
    case '-': return acc - d.add_sub_operand >= 0;
    case '*': return acc * d.mul_operand <= kMaxChainValue;
    default: return false;
  }
}

// Picks the drawn operator when it keeps the running value in range, otherwise
// the first valid fallback. '+' and '-' cannot both be invalid, so this always
// resolves.
char resolve_op(char drawn, long long acc, const OpDraw& d) {
  if (op_valid(drawn, acc, d)) return drawn;
  for (char op : {'-', '+', '*'}) {
    if (op != drawn && op_valid(op, acc, d)) return op;
  }
  return '+';
}

}  // namespace

Problem generate_problem(uint64_t rng_seed, int difficulty) {
  if (difficulty < kMinDifficulty || difficulty > kMaxDifficulty) {
    fail_validation("generate_problem: difficulty must be in [1,4], got " +
                    std::to_string(difficulty));
  }
  Rng rng(rng_seed);
  int n_ops = difficulty + 1;

  long long acc = rng.uniform_int(kMinOperand, kMaxOperand);
  std::string expr = std::to_string(acc);
  std::string steps;
  for (int i = 0; i < n_ops; ++i) {
    // Fixed draw count per step keeps the schedule independent of fallbacks.
    double r = rng.next_double();
    OpDraw d;
    d.add_sub_operand = rng.uniform_int(kMinOperand, kMaxOperand);
    d.mul_operand = rng.uniform_int(2, 9);
    char drawn = r < 0.4 ? '+' : (r < 0.8 ? '-' : '*');
    char op = resolve_op(drawn, acc, d);
    long long operand = op == '*' ? d.mul_operand : d.add_sub_operand;
    long long next = op == '+' ? acc + operand : (op == '-' ? acc - operand : acc * operand);

    steps += std::to_string(acc);
    steps += op;
    steps += std::to_string(operand);
    steps += '=';
    steps += std::to_string(next);
    steps += '\n';
    expr += op;
    expr += std::to_string(operand);
    acc = next;
  }

  Problem p;
  p.difficulty = difficulty;
  p.prompt_text = "Q: " + expr + "\nA:\n";
  p.solution_text = steps + format_final_answer(acc);
  p.answer = acc;
  return p;
}

std::optional<long long> extract_answer(std::string_view text) {
  size_t pos = text.rfind("####");
  if (pos == std::string_view::npos) return std::nullopt;
  size_t i = pos + 4;
  while (i < text.size() && (text[i] == ' ' || text[i] == '\t')) ++i;
  bool negative = false;
  if (i < text.size() && text[i] == '-') {
    negative = true;
    ++i;
  }
  if (i >= text.size() || !std::isdigit(static_cast<unsigned char>(text[i]))) {
    return std::nullopt;
  }
  long long value = 0;
  bool overflow = false;
  for (; i < text.size() && std::isdigit(static_cast<unsigned char>(text[i])); ++i) {
    if (value > (std::numeric_limits<long long>::max() - 9) / 10) {
      overflow = true;
      break;
    }
    value = value * 10 + (text[i] - '0');
  }
  if (overflow) return std::nullopt;
  return negative ? -value : value;
}

std::string format_final_answer(long long answer) {
  return "#### " + std::to_string(answer);
}

bool check_answer(const Problem& problem, std::string_view text) {
  auto got = extract_answer(text);
  return got.has_value() && *got == problem.answer;
}

Corpus build_corpus(int n_problems, uint64_t rng_seed,
                    const std::vector<DifficultyWeight>& difficulty_mix,
                    const std::string& split_tag,
                    const std::unordered_set<std::string>* reserved_prompts) {
  if (n_problems < 1) fail_validation("build_corpus: n_problems must be >= 1");
  double total_weight = 0;
  for (const auto& dw : difficulty_mix) {
    if (dw.difficulty < kMinDifficulty || dw.difficulty > kMaxDifficulty) {
      fail_validation("build_corpus: difficulty out of range in mix");
    }
    if (dw.weight < 0) fail_validation("build_corpus: negative weight");
    total_weight += dw.weight;
  }
  if (!(total_weight > 0)) fail_validation("build_corpus: weights must sum to a positive value");

  Corpus corpus;
  corpus.split_tag = split_tag;
  corpus.problems.reserve(static_cast<size_t>(n_problems));
  std::unordered_set<std::string> seen;
  if (reserved_prompts) seen = *reserved_prompts;

  for (int i = 0; i < n_problems; ++i) {
    int last_difficulty = 0;
    bool placed = false;
    for (int attempt = 0; attempt < kCorpusRetryBound; ++attempt) {
      uint64_t base = seed_mix(rng_seed, static_cast<uint64_t>(i), static_cast<uint64_t>(attempt));
      Rng drng(seed_mix(base, kDifficultyStream));
      double r = drng.next_double() * total_weight;
      int difficulty = difficulty_mix.back().difficulty;
      double cum = 0;
      for (const auto& dw : difficulty_mix) {
        cum += dw.weight;
        if (r < cum) {
          difficulty = dw.difficulty;
          break;
        }
      }
      last_difficulty = difficulty;
      Problem p = generate_problem(seed_mix(base, kProblemStream), difficulty);
      if (!seen.insert(p.prompt_text).second) continue;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%s-%06d", split_tag.c_str(), i);
      p.id = buf;
      corpus.problems.push_back(std::move(p));
      placed = true;
      break;
    }
    if (!placed) {
      fail_runtime("build_corpus: retry bound exhausted at difficulty " +
                   std::to_string(last_difficulty));
    }
  }
  return corpus;
}

void save_corpus_jsonl(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_runtime("cannot open for writing: " + path);
  for (const auto& p : corpus.problems) {
    ordered_json j;
    j["id"] = p.id;
    j["prompt"] = p.prompt_text;
    j["solution"] = p.solution_text;
    j["answer"] = p.answer;
    j["difficulty"] = p.difficulty;
    out << j.dump() << '\n';
  }
  if (!out) fail_runtime("write failed: " + path);
}

Corpus load_corpus_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_runtime("cannot open corpus: " + path);
  Corpus corpus;
  corpus.split_tag = "loaded";
  std::string line;
  std::unordered_set<std::string> ids;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ordered_json j = ordered_json::parse(line, nullptr, false);
    if (j.is_discarded()) fail_runtime("malformed corpus line in " + path);
    Problem p;
    p.id = j.at("id").get<std::string>();
    p.prompt_text = j.at("prompt").get<std::string>();
    p.solution_text = j.at("solution").get<std::string>();
    p.answer = j.at("answer").get<long long>();
    p.difficulty = j.at("difficulty").get<int>();
    if (!ids.insert(p.id).second) fail_runtime("duplicate problem id in " + path);
    corpus.problems.push_back(std::move(p));
  }
  if (!corpus.problems.empty()) {
    const std::string& id = corpus.problems.front().id;
    size_t dash = id.rfind('-');
    if (dash != std::string::npos) corpus.split_tag = id.substr(0, dash);
  }
  return corpus;
}

}  // namespace duet::task

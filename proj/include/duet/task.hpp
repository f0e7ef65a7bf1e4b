#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace duet::task {

// One multi-step arithmetic problem. The question is a left-to-right chain of
// binary operations ("12+34-5*2" means ((12+34)-5)*2); the canonical solution
// lists one step per line and closes with the `#### <answer>` marker line.
struct Problem {
  std::string id;
  std::string prompt_text;
  std::string solution_text;
  long long answer = 0;
  int difficulty = 0;
};

struct Corpus {
  std::vector<Problem> problems;
  std::string split_tag;  // "train" or "test"
};

struct DifficultyWeight {
  int difficulty;
  double weight;
};

inline constexpr int kMinDifficulty = 1;
inline constexpr int kMaxDifficulty = 4;
inline constexpr int kMinOperand = 1;
inline constexpr int kMaxOperand = 99;
inline constexpr long long kMaxChainValue = 9999;  // running value stays in [0, 9999]
inline constexpr int kCorpusRetryBound = 1000;

// Deterministic under rng_seed. difficulty in [1,4] yields difficulty+1 chained
// binary operations over operands in [1,99].
Problem generate_problem(uint64_t rng_seed, int difficulty);

// Integer after the last "####" marker, if present and parseable.
std::optional<long long> extract_answer(std::string_view text);

std::string format_final_answer(long long answer);  // marker line, "#### <n>"

bool check_answer(const Problem& problem, std::string_view text);

// Seed schedule (replayable): per problem index i and retry attempt a,
//   base   = seed_mix(rng_seed, i, a)
//   difficulty drawn by Rng(seed_mix(base, 0xD1FF))
//   problem    = generate_problem(seed_mix(base, 0x9E0B), difficulty)
// reserved_prompts, when given, are treated as already taken (used to keep
// train/test splits disjoint by prompt).
Corpus build_corpus(int n_problems, uint64_t rng_seed,
                    const std::vector<DifficultyWeight>& difficulty_mix,
                    const std::string& split_tag = "train",
                    const std::unordered_set<std::string>* reserved_prompts = nullptr);

// JSON Lines, one problem per line: {id, prompt, solution, answer, difficulty}.
void save_corpus_jsonl(const Corpus& corpus, const std::string& path);
Corpus load_corpus_jsonl(const std::string& path);

}  // namespace duet::task

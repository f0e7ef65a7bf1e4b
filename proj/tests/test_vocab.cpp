#include <doctest.h>

#include <set>

#include "duet/error.hpp"
#include "duet/task.hpp"
#include "duet/vocab.hpp"

using namespace duet;

TEST_CASE("task vocabulary covers every generated string and round-trips") {
  auto vocab = lm::Vocabulary::task_default();
  std::set<std::string> symbols(vocab.symbols.begin(), vocab.symbols.end());
  CHECK(symbols.size() == vocab.symbols.size());  // bijection

  for (uint64_t seed = 0; seed < 300; ++seed) {
    auto p = task::generate_problem(seed, 1 + static_cast<int>(seed % 4));
    for (const std::string& text : {p.prompt_text, p.solution_text}) {
      auto ids = vocab.tokenize(text);
      CHECK(vocab.detokenize(ids) == text);
      for (int id : ids) CHECK(!vocab.is_special(id));
    }
  }
}

TEST_CASE("the marker piece tokenizes as one symbol") {
  auto vocab = lm::Vocabulary::task_default();
  auto ids = vocab.tokenize("#### 42");
  REQUIRE(ids.size() == 4);
  CHECK(vocab.symbols[static_cast<size_t>(ids[0])] == "####");
  CHECK_THROWS_AS(vocab.tokenize("# 42"), Error);  // lone '#' is out of vocabulary
  CHECK(!vocab.tokenizable("abc"));
  CHECK(vocab.tokenizable("12+3=15\n#### 15"));
}

TEST_CASE("detokenize drops specials") {
  auto vocab = lm::Vocabulary::task_default();
  std::vector<int> ids = {vocab.bos_id, 9, 10, vocab.eos_id};
  auto text = vocab.detokenize(ids);
  CHECK(text.size() == 2);
  CHECK_THROWS_AS(vocab.detokenize(std::vector<int>{999}), Error);
}

TEST_CASE("vocabulary construction validates specials and duplicates") {
  CHECK_THROWS_AS(lm::Vocabulary::from_symbols({"a", "b"}, 0, 0, 1), Error);
  CHECK_THROWS_AS(lm::Vocabulary::from_symbols({"a", "a", "b"}, 0, 1, 2), Error);
  CHECK_THROWS_AS(lm::Vocabulary::from_symbols({"a", "b", "c"}, 0, 1, 5), Error);
}

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace duet::lm {

using TokenId = int;

// Ordered symbol table. Symbols are atomic strings: single characters plus the
// multi-character final-answer marker piece "####". Tokenization is greedy
// longest-match, so detokenize(tokenize(s)) == s for any in-vocabulary string.
struct Vocabulary {
  std::vector<std::string> symbols;
  TokenId bos_id = 0;
  TokenId eos_id = 1;
  TokenId pad_id = 2;

  // Fixed vocabulary covering every string the task module emits.
  static Vocabulary task_default();
  static Vocabulary from_symbols(std::vector<std::string> symbols, TokenId bos,
                                 TokenId eos, TokenId pad);

  int size() const { return static_cast<int>(symbols.size()); }
  bool is_special(TokenId id) const {
    return id == bos_id || id == eos_id || id == pad_id;
  }

  // Throws a validation error on out-of-vocabulary input. Never emits specials.
  std::vector<TokenId> tokenize(std::string_view text) const;
  bool tokenizable(std::string_view text) const;

  // Specials map to the empty string.
  std::string detokenize(std::span<const TokenId> ids) const;
};

}  // namespace duet::lm

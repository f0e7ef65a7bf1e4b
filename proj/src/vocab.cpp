#include "duet/vocab.hpp"

#include <algorithm>

#include "duet/error.hpp"

namespace duet::lm {

Vocabulary Vocabulary::task_default() {
  std::vector<std::string> symbols = {"<bos>", "<eos>", "<pad>", "####"};
  for (char c : std::string("\n *+-0123456789:=?AQ")) symbols.emplace_back(1, c);
  return from_symbols(std::move(symbols), 0, 1, 2);
}

Vocabulary Vocabulary::from_symbols(std::vector<std::string> symbols, TokenId bos,
                                    TokenId eos, TokenId pad) {
  Vocabulary v;
  v.symbols = std::move(symbols);
  v.bos_id = bos;
  v.eos_id = eos;
  v.pad_id = pad;
  int n = v.size();
  if (bos < 0 || bos >= n || eos < 0 || eos >= n || pad < 0 || pad >= n ||
      bos == eos || bos == pad || eos == pad) {
    fail_validation("vocabulary: bos/eos/pad ids must be distinct and in range");
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (v.symbols[i] == v.symbols[j]) {
        fail_validation("vocabulary: duplicate symbol '" + v.symbols[i] + "'");
      }
    }
  }
  return v;
}

std::vector<TokenId> Vocabulary::tokenize(std::string_view text) const {
  // Longest-match order: try longer symbols before single characters.
  std::vector<int> order(symbols.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return symbols[a].size() > symbols[b].size();
  });

  std::vector<TokenId> out;
  out.reserve(text.size());
  size_t pos = 0;
  while (pos < text.size()) {
    int matched = -1;
    for (int id : order) {
      if (is_special(id)) continue;
      const std::string& sym = symbols[id];
      if (text.compare(pos, sym.size(), sym) == 0) {
        matched = id;
        break;
      }
    }
    if (matched < 0) {
      fail_validation("tokenize: out-of-vocabulary input at byte " + std::to_string(pos));
    }
    out.push_back(matched);
    pos += symbols[matched].size();
  }
  return out;
}

bool Vocabulary::tokenizable(std::string_view text) const {
  try {
    tokenize(text);
    return true;
  } catch (const Error&) {
    return false;
  }
}

std::string Vocabulary::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || id >= size()) fail_validation("detokenize: token id out of range");
    if (is_special(id)) continue;
    out += symbols[static_cast<size_t>(id)];
  }
  return out;
}

}  // namespace duet::lm

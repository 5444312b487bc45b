#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace redteam {

using TokenId = std::int32_t;

// Token ids together with the text they detokenize to.
struct TokenSeq {
  std::vector<TokenId> ids;
  std::string text;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }

  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

// Half-open token index range [begin, end).
struct Slice {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return begin == end; }

  friend bool operator==(const Slice&, const Slice&) = default;
};

}  // namespace redteam

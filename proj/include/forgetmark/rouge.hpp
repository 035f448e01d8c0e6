#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vocab.hpp"

namespace forgetmark {

struct RougeScore {
  std::size_t lcs = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

inline std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// LCS F-measure with equal precision/recall weight.
inline RougeScore rouge_l_tokens(std::span<const std::string> candidate, std::span<const std::string> reference) {
  RougeScore s;
  if (candidate.empty() && reference.empty()) {
    s.precision = s.recall = s.f = 1.0;
    return s;
  }
  if (candidate.empty() || reference.empty()) return s;
  s.lcs = lcs_length(candidate, reference);
  if (s.lcs == 0) return s;
  s.precision = static_cast<double>(s.lcs) / static_cast<double>(candidate.size());
  s.recall = static_cast<double>(s.lcs) / static_cast<double>(reference.size());
  s.f = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

/// Lowercased whitespace tokens on both sides.
inline double rouge_l(std::string_view candidate, std::string_view reference) {
  const auto c = whitespace_tokens(candidate);
  const auto r = whitespace_tokens(reference);
  return rouge_l_tokens(c, r).f;
}

}  // namespace forgetmark

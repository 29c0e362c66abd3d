#ifndef GAZEREG_ROUGE_HPP
#define GAZEREG_ROUGE_HPP

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

namespace gazereg {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

/// Length of the longest common subsequence (two-row dynamic program).
template <typename T>
std::size_t lcs_length(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// ROUGE-L: P = LCS/|cand|, R = LCS/|ref|, F = (1+b^2)PR / (R + b^2 P).
/// Throws ParameterError on an empty reference.
RougeScore rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
                   double beta = 1.0);
RougeScore rouge_l_ids(const std::vector<int>& candidate, const std::vector<int>& reference, double beta = 1.0);

/// Fixed, versioned id -> word table used to render token sequences.
inline constexpr const char* kTokenTableVersion = "tokens-v1";
std::string token_word(int id);
std::vector<std::string> render_tokens(const std::vector<int>& ids);

}  // namespace gazereg

#endif  // GAZEREG_ROUGE_HPP

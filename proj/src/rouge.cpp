#include "gazereg/rouge.hpp"

#include <algorithm>
#include <array>

#include "gazereg/errors.hpp"

namespace gazereg {
namespace {

template <typename T>
RougeScore score(const std::vector<T>& cand, const std::vector<T>& ref, double beta) {
  if (ref.empty()) throw ParameterError("rouge_l: reference must be non-empty");
  if (!(beta > 0.0)) throw ParameterError("rouge_l: beta must be > 0");
  RougeScore s;
  if (cand.empty()) return s;
  const auto lcs = static_cast<double>(lcs_length(cand, ref));
  s.precision = lcs / static_cast<double>(cand.size());
  s.recall = lcs / static_cast<double>(ref.size());
  const double b2 = beta * beta;
  const double denom = s.recall + b2 * s.precision;
  s.f = denom > 0.0 ? (1.0 + b2) * s.precision * s.recall / denom : 0.0;
  return s;
}

// Do not edit: changing any entry changes every reported ROUGE-L value.
constexpr std::array<const char*, 32> kWords = {
    "take",   "put",    "open",   "close",  "wash",   "cut",    "pour",   "stir",
    "table",  "sink",   "stove",  "fridge", "shelf",  "drawer", "counter", "floor",
    "bowl",   "knife",  "pan",    "cup",    "plate",  "spoon",  "board",  "towel",
    "left",   "right",  "front",  "back",   "top",    "bottom", "inside", "outside"};

}  // namespace

RougeScore rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference, double beta) {
  return score(candidate, reference, beta);
}

RougeScore rouge_l_ids(const std::vector<int>& candidate, const std::vector<int>& reference, double beta) {
  return score(candidate, reference, beta);
}

std::string token_word(int id) {
  if (id >= 0 && id < static_cast<int>(kWords.size())) return kWords[static_cast<std::size_t>(id)];
  return "tok" + std::to_string(id);
}

std::vector<std::string> render_tokens(const std::vector<int>& ids) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(token_word(id));
  return out;
}

}  // namespace gazereg

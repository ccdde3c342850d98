#pragma once

// Brute-force reimplementations of the evaluation metrics, kept deliberately
// independent of the library code paths. Test-only oracle.

#include <optional>
#include <vector>

#include "relrank/evaluator.hpp"

namespace naive {

inline double full(const std::vector<relrank::EvalRecord>& rs) {
  double c = 0;
  for (const auto& r : rs) c += (!r.ranked.empty() && r.ranked[0] == r.gold) ? 1 : 0;
  return c / static_cast<double>(rs.size());
}

inline std::optional<double> dict(const std::vector<relrank::EvalRecord>& rs) {
  double c = 0, n = 0;
  for (const auto& r : rs) {
    if (!r.gold_in_lexicon) continue;
    n += 1;
    c += (!r.ranked.empty() && r.ranked[0] == r.gold) ? 1 : 0;
  }
  if (n == 0) return std::nullopt;
  return c / n;
}

inline std::optional<double> list(const std::vector<relrank::EvalRecord>& rs) {
  double c = 0, n = 0;
  for (const auto& r : rs) {
    bool found = false;
    for (const auto& w : r.ranked) found = found || w == r.gold;
    if (!found) continue;
    n += 1;
    c += r.ranked[0] == r.gold ? 1 : 0;
  }
  if (n == 0) return std::nullopt;
  return c / n;
}

inline double mrr(const std::vector<relrank::EvalRecord>& rs) {
  double total = 0;
  for (const auto& r : rs) {
    for (std::size_t i = 0; i < r.ranked.size(); ++i)
      if (r.ranked[i] == r.gold) {
        total += 1.0 / static_cast<double>(i + 1);
        break;
      }
  }
  return total / static_cast<double>(rs.size());
}

}  // namespace naive

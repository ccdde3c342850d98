#pragma once

#include <algorithm>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "relrank/reranker.hpp"
#include "relrank/text.hpp"

namespace relrank {

using Lexicon = std::unordered_set<std::string>;  // lowercased words

// One evaluated image: the re-ranked word list plus the flags that decide
// which metric denominators it enters.
struct EvalRecord {
  std::string image_id;
  std::string gold;
  std::vector<std::string> ranked;
  bool gold_in_lexicon = false;
  bool gold_in_list = false;
};

inline EvalRecord make_record(const HypothesisSet& h, const std::vector<ScoredCandidate>& reranked,
                              const Lexicon* lexicon) {
  EvalRecord r;
  r.image_id = h.image_id;
  r.gold = to_lower(h.gold);
  for (const auto& c : reranked) r.ranked.push_back(to_lower(c.word));
  r.gold_in_lexicon = lexicon && lexicon->count(r.gold) > 0;
  r.gold_in_list = std::find(r.ranked.begin(), r.ranked.end(), r.gold) != r.ranked.end();
  return r;
}

// A metric together with its denominator; `value` is empty when the
// denominator is zero (undefined, deliberately distinct from 0).
struct MetricValue {
  std::optional<double> value;
  std::size_t correct = 0;
  std::size_t denominator = 0;
};

enum class AccuracyMode { full, dict, list };

// full: top-1 over all records; dict: over records whose gold is in the
// lexicon; list: over records whose gold appears among the candidates.
inline MetricValue accuracy(const std::vector<EvalRecord>& records, AccuracyMode mode,
                            const Lexicon* lexicon = nullptr) {
  if (records.empty()) throw std::invalid_argument("accuracy: no records");
  if (mode == AccuracyMode::dict && !lexicon)
    throw std::invalid_argument("accuracy: dict mode needs a lexicon");
  MetricValue m;
  for (const auto& r : records) {
    if (mode == AccuracyMode::dict && !r.gold_in_lexicon) continue;
    if (mode == AccuracyMode::list && !r.gold_in_list) continue;
    ++m.denominator;
    if (!r.ranked.empty() && r.ranked.front() == r.gold) ++m.correct;
  }
  if (m.denominator > 0)
    m.value = static_cast<double>(m.correct) / static_cast<double>(m.denominator);
  return m;
}

// Mean reciprocal rank of the gold word (1-based); a record whose list
// misses the gold contributes 0.
inline double mrr(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw std::invalid_argument("mrr: no records");
  double total = 0.0;
  for (const auto& r : records) {
    auto it = std::find(r.ranked.begin(), r.ranked.end(), r.gold);
    if (it != r.ranked.end())
      total += 1.0 / static_cast<double>(std::distance(r.ranked.begin(), it) + 1);
  }
  return total / static_cast<double>(records.size());
}

struct SweepRow {
  std::size_t k = 0;
  MetricValue full, dict, list;
  double mrr_value = 0.0;
};

struct EvalReport {
  std::vector<SweepRow> rows;
  std::size_t dataset_size = 0;
  // argmax k per metric (smallest k on ties); 0 when undefined everywhere
  std::size_t best_k_full = 0, best_k_dict = 0, best_k_list = 0, best_k_mrr = 0;
};

// Evaluates one k: candidate lists are truncated to their top-k by baseline
// order before re-ranking.
inline SweepRow evaluate_at_k(const std::vector<HypothesisSet>& sets,
                              const RelatednessScorer& scorer, const UnigramModel* lm,
                              const FusionConfig& cfg, const Lexicon* lexicon, std::size_t k) {
  if (k < 1) throw std::invalid_argument("evaluate_at_k: k must be >= 1");
  std::vector<EvalRecord> records;
  records.reserve(sets.size());
  for (const auto& h : sets) {
    HypothesisSet cut = h;
    if (cut.candidates.size() > k) cut.candidates.resize(k);
    records.push_back(make_record(cut, rerank(cut, scorer, lm, cfg), lexicon));
  }
  SweepRow row;
  row.k = k;
  row.full = accuracy(records, AccuracyMode::full);
  if (lexicon) row.dict = accuracy(records, AccuracyMode::dict, lexicon);
  row.list = accuracy(records, AccuracyMode::list);
  row.mrr_value = mrr(records);
  return row;
}

inline EvalReport k_sweep(const std::vector<HypothesisSet>& sets, const RelatednessScorer& scorer,
                          const UnigramModel* lm, const FusionConfig& cfg, const Lexicon* lexicon,
                          std::size_t k_max = 10) {
  if (k_max < 1) throw std::invalid_argument("k_sweep: k_max must be >= 1");
  if (sets.empty()) throw std::invalid_argument("k_sweep: no hypothesis sets");
  EvalReport report;
  report.dataset_size = sets.size();
  for (std::size_t k = 1; k <= k_max; ++k)
    report.rows.push_back(evaluate_at_k(sets, scorer, lm, cfg, lexicon, k));

  auto argmax = [&](auto&& get) {
    std::size_t best = 0;
    double best_v = -1.0;
    for (const auto& row : report.rows) {
      auto v = get(row);
      if (v && *v > best_v) {
        best_v = *v;
        best = row.k;
      }
    }
    return best;
  };
  report.best_k_full = argmax([](const SweepRow& r) { return r.full.value; });
  report.best_k_dict = argmax([](const SweepRow& r) { return r.dict.value; });
  report.best_k_list = argmax([](const SweepRow& r) { return r.list.value; });
  report.best_k_mrr =
      argmax([](const SweepRow& r) { return std::optional<double>(r.mrr_value); });
  return report;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace detail {
inline std::string pct(const std::optional<double>& v) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << (*v * 100.0);
  return os.str();
}
}  // namespace detail

// Text table in the full / dict / list / k / MRR column layout (percent).
inline std::string render_report(const EvalReport& report) {
  std::ostringstream os;
  os << "full\tdict\tlist\tk\tMRR\n";
  for (const auto& row : report.rows) {
    os << detail::pct(row.full.value) << "\t" << detail::pct(row.dict.value) << "\t"
       << detail::pct(row.list.value) << "\t" << row.k << "\t"
       << detail::pct(std::optional<double>(row.mrr_value)) << "\n";
  }
  os << "# best k: full " << report.best_k_full << ", dict " << report.best_k_dict << ", list "
     << report.best_k_list << ", MRR " << report.best_k_mrr << "\n";
  os << "# records: " << report.dataset_size << "\n";
  return os.str();
}

inline nlohmann::json report_json(const EvalReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  auto metric = [](const MetricValue& m) {
    nlohmann::json j;
    j["correct"] = m.correct;
    j["denominator"] = m.denominator;
    if (m.value)
      j["value"] = *m.value;
    else
      j["value"] = nullptr;
    return j;
  };
  for (const auto& row : report.rows) {
    rows.push_back({{"k", row.k},
                    {"full", metric(row.full)},
                    {"dict", metric(row.dict)},
                    {"list", metric(row.list)},
                    {"mrr", row.mrr_value}});
  }
  return {{"rows", rows},
          {"dataset_size", report.dataset_size},
          {"best_k", {{"full", report.best_k_full},
                      {"dict", report.best_k_dict},
                      {"list", report.best_k_list},
                      {"mrr", report.best_k_mrr}}}};
}

}  // namespace relrank

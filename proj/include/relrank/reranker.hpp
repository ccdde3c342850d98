#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "relrank/model.hpp"
#include "relrank/text.hpp"

namespace relrank {

// One hypothesis from the upstream spotting system.
struct Candidate {
  std::string word;
  double baseline_score = 0.0;  // spotting softmax, in [0,1]
};

// An image's k-best list with its gold word and visual context. Candidates
// are kept sorted by baseline score descending.
struct HypothesisSet {
  std::string image_id;
  std::string gold;
  std::vector<Candidate> candidates;
  ContextBundle ctx;
};

// ---------------------------------------------------------------------------
// Unigram language model with add-alpha smoothing
// ---------------------------------------------------------------------------

// P(w) = (count(w) + a) / (N + a(V+1)); the +1 reserves one bucket of
// probability mass for all unseen words, so the distribution over
// vocab + OOV sums to one.
struct UnigramModel {
  std::unordered_map<std::string, long long> counts;
  long long total = 0;  // N
  double alpha = 1.0;

  std::size_t vocab() const { return counts.size(); }

  double prob(const std::string& word) const {
    if (total <= 0) throw std::logic_error("unigram model: empty corpus");
    auto it = counts.find(to_lower(word));
    const double c = it == counts.end() ? 0.0 : static_cast<double>(it->second);
    return (c + alpha) /
           (static_cast<double>(total) + alpha * (static_cast<double>(vocab()) + 1.0));
  }

  static UnigramModel from_tokens(const std::vector<std::string>& tokens, double alpha = 1.0) {
    if (alpha < 0.0) throw std::invalid_argument("unigram model: negative alpha");
    UnigramModel lm;
    lm.alpha = alpha;
    for (const auto& t : tokens) {
      ++lm.counts[to_lower(t)];
      ++lm.total;
    }
    if (lm.total == 0) throw std::invalid_argument("unigram model: empty corpus");
    return lm;
  }

  static UnigramModel from_text(std::istream& is, double alpha = 1.0) {
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(is, line))
      for (auto& t : tokenize(line)) tokens.push_back(std::move(t));
    return from_tokens(tokens, alpha);
  }
};

// ---------------------------------------------------------------------------
// Relatedness scorers
// ---------------------------------------------------------------------------

enum class CosineMode { max, mean };

struct CosineResult {
  double value = 0.0;  // in [-1, 1]
  bool oov = false;    // word or every context term missing from the table
};

// Word-level cosine baseline: similarity between the candidate vector and
// each object/place label vector, aggregated by max (default) or mean.
// Captions are excluded here; the word-level scorers only see classifier
// labels. Lookups are strict (no unk fallback).
inline CosineResult cosine_relatedness(const std::string& word, const ContextBundle& ctx,
                                       const EmbeddingTable& emb,
                                       CosineMode mode = CosineMode::max) {
  auto word_row = emb.find(word);
  if (!word_row) return {0.0, true};
  const std::size_t d = emb.dim;
  const double* wv = &emb.matrix->values[*word_row * d];
  double wn = 0.0;
  for (std::size_t i = 0; i < d; ++i) wn += wv[i] * wv[i];
  wn = std::sqrt(wn);

  double best = -2.0, total = 0.0;
  std::size_t hits = 0;
  auto visit = [&](const std::string& label) {
    auto r = emb.find(label);
    if (!r) return;
    const double* tv = &emb.matrix->values[*r * d];
    double dot = 0.0, tn = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dot += wv[i] * tv[i];
      tn += tv[i] * tv[i];
    }
    tn = std::sqrt(tn);
    if (wn == 0.0 || tn == 0.0) return;
    const double cos = dot / (wn * tn);
    best = std::max(best, cos);
    total += cos;
    ++hits;
  };
  for (const auto& o : ctx.objects) visit(o.label);
  for (const auto& p : ctx.places) visit(p.label);
  if (hits == 0) return {0.0, true};
  return {mode == CosineMode::max ? best : total / static_cast<double>(hits), false};
}

// Pluggable relatedness backend; implementations return scores in [0,1].
class RelatednessScorer {
 public:
  virtual ~RelatednessScorer() = default;
  virtual double relatedness(const std::string& word, const ContextBundle& ctx) const = 0;
};

class NeuralScorer : public RelatednessScorer {
 public:
  explicit NeuralScorer(const RelatednessModel& model) : model_(model) {}
  double relatedness(const std::string& word, const ContextBundle& ctx) const override {
    return score(model_, word, ctx);
  }

 private:
  const RelatednessModel& model_;
};

// Maps cosine in [-1,1] to [0,1]; OOV words score the midpoint of 0 cosine.
class CosineScorer : public RelatednessScorer {
 public:
  CosineScorer(const EmbeddingTable& emb, CosineMode mode = CosineMode::max)
      : emb_(emb), mode_(mode) {}
  double relatedness(const std::string& word, const ContextBundle& ctx) const override {
    return (cosine_relatedness(word, ctx, emb_, mode_).value + 1.0) / 2.0;
  }

 private:
  const EmbeddingTable& emb_;
  CosineMode mode_;
};

// ---------------------------------------------------------------------------
// Score fusion
// ---------------------------------------------------------------------------

// Log-linear weights over the four score components. All weights must be
// non-negative with at least one positive.
struct FusionConfig {
  double baseline = 1.0;
  double relatedness = 1.0;
  double context = 0.0;
  double unigram = 1.0;

  void validate() const {
    if (baseline < 0.0 || relatedness < 0.0 || context < 0.0 || unigram < 0.0)
      throw std::invalid_argument("fusion: negative weight");
    if (baseline == 0.0 && relatedness == 0.0 && context == 0.0 && unigram == 0.0)
      throw std::invalid_argument("fusion: all weights are zero");
  }
};

// exp(sum of weighted log components); inputs floored at 1e-9 so the result
// is always positive and finite. Strictly increasing in every component
// whose weight is positive.
inline double fuse_scores(double baseline, double relatedness, double ctx_confidence,
                          double p_unigram, const FusionConfig& cfg) {
  cfg.validate();
  auto ln = [](double v) { return std::log(std::max(v, 1e-9)); };
  return std::exp(cfg.baseline * ln(baseline) + cfg.relatedness * ln(relatedness) +
                  cfg.context * ln(ctx_confidence) + cfg.unigram * ln(p_unigram));
}

// ---------------------------------------------------------------------------
// Re-ranking
// ---------------------------------------------------------------------------

// A candidate annotated with every score component, for audit traces.
struct ScoredCandidate {
  std::string word;
  double baseline = 0.0;
  double relatedness = 0.0;
  double ctx_confidence = 1.0;
  double unigram = 1.0;
  double final_score = 0.0;
};

// Confidence of the context observation matching this candidate: the
// highest classifier confidence among object/place labels equal to the
// word, 1.0 (neutral) when nothing matches.
inline double context_confidence(const std::string& word, const ContextBundle& ctx) {
  const std::string w = to_lower(word);
  double best = 0.0;
  bool matched = false;
  for (const auto& o : ctx.objects)
    if (to_lower(o.label) == w) {
      best = std::max(best, o.confidence);
      matched = true;
    }
  for (const auto& p : ctx.places)
    if (to_lower(p.label) == w) {
      best = std::max(best, p.confidence);
      matched = true;
    }
  return matched ? best : 1.0;
}

// Reorders the hypothesis list by fused score, descending. Ties break by
// baseline score, then lexicographically. The output is a permutation of
// the input, each entry annotated with all four components.
inline std::vector<ScoredCandidate> rerank(const HypothesisSet& h, const RelatednessScorer& scorer,
                                           const UnigramModel* lm, const FusionConfig& cfg) {
  if (h.candidates.empty())
    throw std::invalid_argument("rerank: no candidates for image '" + h.image_id + "'");
  cfg.validate();
  std::vector<ScoredCandidate> out;
  out.reserve(h.candidates.size());
  for (const auto& c : h.candidates) {
    ScoredCandidate sc;
    sc.word = c.word;
    sc.baseline = c.baseline_score;
    sc.relatedness = scorer.relatedness(c.word, h.ctx);
    sc.ctx_confidence = context_confidence(c.word, h.ctx);
    sc.unigram = lm ? lm->prob(c.word) : 1.0;
    sc.final_score = fuse_scores(sc.baseline, sc.relatedness, sc.ctx_confidence, sc.unigram, cfg);
    out.push_back(std::move(sc));
  }
  std::stable_sort(out.begin(), out.end(), [](const ScoredCandidate& a, const ScoredCandidate& b) {
    if (a.final_score != b.final_score) return a.final_score > b.final_score;
    if (a.baseline != b.baseline) return a.baseline > b.baseline;
    return a.word < b.word;
  });
  return out;
}

}  // namespace relrank

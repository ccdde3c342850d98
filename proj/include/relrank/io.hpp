#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "relrank/evaluator.hpp"
#include "relrank/reranker.hpp"
#include "relrank/text.hpp"
#include "relrank/trainer.hpp"

namespace relrank {

struct IngestReport {
  std::size_t records = 0;
  std::vector<std::string> warnings;

  void warn(std::string msg) { warnings.push_back(std::move(msg)); }
};

namespace detail {

inline std::runtime_error parse_error(const std::string& path, std::size_t line,
                                      const std::string& what) {
  return std::runtime_error(path + ": line " + std::to_string(line) + ": " + what);
}

inline double parse_score(const std::string& tok, const std::string& path, std::size_t line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(tok, &used);
  } catch (const std::exception&) {
    throw parse_error(path, line, "'" + tok + "' is not a number");
  }
  if (used != tok.size()) throw parse_error(path, line, "'" + tok + "' is not a number");
  if (v < 0.0 || v > 1.0)
    throw parse_error(path, line, "score " + tok + " outside [0,1]");
  return v;
}

// %.17g round-trips doubles exactly
inline std::string format_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

inline std::vector<std::string> split_char(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return is;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  return os;
}

// header line of the versioned text formats, e.g. "# hypotheses v1"
inline void expect_header(std::istream& is, const std::string& kind, const std::string& path,
                          std::size_t& line_no) {
  std::string line;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line == "# " + kind + " v1") return;
    throw parse_error(path, line_no, "expected header '# " + kind + " v1', found '" + line + "'");
  }
  throw std::runtime_error(path + ": no records (missing '# " + kind + " v1' header)");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Hypothesis files: "# hypotheses v1", then per line
//   image_id gold w1 s1 [w2 s2 ...]
// ---------------------------------------------------------------------------

inline std::vector<HypothesisSet> load_hypotheses(const std::string& path,
                                                  IngestReport* report = nullptr) {
  auto is = detail::open_input(path);
  std::size_t line_no = 0;
  detail::expect_header(is, "hypotheses", path, line_no);

  std::vector<HypothesisSet> sets;
  std::string line;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto toks = detail::split_ws(line);
    if (toks.size() < 4 || toks.size() % 2 != 0)
      throw detail::parse_error(path, line_no,
                                "expected 'image_id gold word score [word score ...]'");
    HypothesisSet h;
    h.image_id = toks[0];
    h.gold = to_lower(toks[1]);
    for (std::size_t i = 2; i + 1 < toks.size(); i += 2)
      h.candidates.push_back({to_lower(toks[i]), detail::parse_score(toks[i + 1], path, line_no)});
    std::stable_sort(h.candidates.begin(), h.candidates.end(),
                     [](const Candidate& a, const Candidate& b) {
                       return a.baseline_score > b.baseline_score;
                     });
    if (h.candidates.size() > 10) {
      if (report)
        report->warn(path + ": line " + std::to_string(line_no) + ": " +
                     std::to_string(h.candidates.size()) + " candidates, keeping the top 10");
      h.candidates.resize(10);
    }
    sets.push_back(std::move(h));
  }
  if (sets.empty()) throw std::runtime_error(path + ": no records");
  if (report) report->records += sets.size();
  return sets;
}

inline void save_hypotheses(const std::vector<HypothesisSet>& sets, const std::string& path) {
  auto os = detail::open_output(path);
  os << "# hypotheses v1\n";
  for (const auto& h : sets) {
    os << h.image_id << " " << h.gold;
    for (const auto& c : h.candidates)
      os << " " << c.word << " " << detail::format_score(c.baseline_score);
    os << "\n";
  }
}

// ---------------------------------------------------------------------------
// Context files: "# context v1", then per line (tab-separated)
//   image_id <TAB> obj:conf,obj:conf <TAB> place:conf <TAB> caption text
// ---------------------------------------------------------------------------

using ContextMap = std::map<std::string, ContextBundle>;

namespace detail {

inline std::vector<WeightedLabel> parse_labels(const std::string& field, const std::string& path,
                                               std::size_t line_no) {
  std::vector<WeightedLabel> out;
  if (field.empty()) return out;
  for (const auto& entry : split_char(field, ',')) {
    if (entry.empty()) continue;
    auto colon = entry.rfind(':');
    if (colon == std::string::npos || colon == 0)
      throw parse_error(path, line_no, "label entry '" + entry + "' is not label:confidence");
    out.push_back(
        {to_lower(entry.substr(0, colon)), parse_score(entry.substr(colon + 1), path, line_no)});
  }
  return out;
}

inline std::string format_labels(const std::vector<WeightedLabel>& labels) {
  std::string out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i) out += ",";
    out += labels[i].label + ":" + format_score(labels[i].confidence);
  }
  return out;
}

}  // namespace detail

inline ContextMap load_context(const std::string& path, IngestReport* report = nullptr) {
  auto is = detail::open_input(path);
  std::size_t line_no = 0;
  detail::expect_header(is, "context", path, line_no);

  ContextMap map;
  std::string line;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto fields = detail::split_char(line, '\t');
    if (fields.size() != 4)
      throw detail::parse_error(path, line_no,
                                "expected 4 tab-separated fields, found " +
                                    std::to_string(fields.size()));
    ContextBundle ctx;
    ctx.objects = detail::parse_labels(fields[1], path, line_no);
    ctx.places = detail::parse_labels(fields[2], path, line_no);
    ctx.caption = tokenize(fields[3]);
    if (map.count(fields[0]) && report)
      report->warn(path + ": line " + std::to_string(line_no) + ": duplicate image_id '" +
                   fields[0] + "', last record wins");
    map[fields[0]] = std::move(ctx);
  }
  if (map.empty()) throw std::runtime_error(path + ": no records");
  if (report) report->records += map.size();
  return map;
}

inline void save_context(const ContextMap& map, const std::string& path) {
  auto os = detail::open_output(path);
  os << "# context v1\n";
  for (const auto& [id, ctx] : map) {
    os << id << "\t" << detail::format_labels(ctx.objects) << "\t"
       << detail::format_labels(ctx.places) << "\t" << join(ctx.caption) << "\n";
  }
}

// Joins hypothesis sets with their contexts; unresolved image ids keep an
// empty context and are flagged in the report.
inline void attach_contexts(std::vector<HypothesisSet>& sets, const ContextMap& contexts,
                            IngestReport* report = nullptr) {
  for (auto& h : sets) {
    auto it = contexts.find(h.image_id);
    if (it == contexts.end()) {
      if (report)
        report->warn("image_id '" + h.image_id + "' has no context record, using empty context");
      h.ctx = ContextBundle{};
    } else {
      h.ctx = it->second;
    }
  }
}

// ---------------------------------------------------------------------------
// Embedding files: standard pretrained-vector text layout, one word and d
// reals per line; an optional word2vec "count dim" first line is skipped.
// ---------------------------------------------------------------------------

inline EmbeddingTable load_embeddings(const std::string& path, IngestReport* report = nullptr) {
  auto is = detail::open_input(path);
  std::vector<std::string> words;
  std::vector<double> flat;
  std::unordered_set<std::string> seen;
  std::size_t dim = 0, line_no = 0, dup = 0;
  std::string line;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto toks = detail::split_ws(line);
    if (line_no == 1 && toks.size() == 2) {
      // word2vec header: two integer tokens
      bool numeric = true;
      for (const auto& t : toks)
        for (char c : t) numeric = numeric && std::isdigit(static_cast<unsigned char>(c));
      if (numeric) continue;
    }
    if (toks.size() < 2)
      throw detail::parse_error(path, line_no, "expected a word followed by its vector");
    if (dim == 0) dim = toks.size() - 1;
    if (toks.size() - 1 != dim)
      throw detail::parse_error(path, line_no,
                                "vector has " + std::to_string(toks.size() - 1) +
                                    " dimensions, expected " + std::to_string(dim));
    std::string word = to_lower(toks[0]);
    if (!seen.insert(word).second) {
      ++dup;
      continue;  // first occurrence wins
    }
    words.push_back(word);
    for (std::size_t i = 1; i < toks.size(); ++i) {
      try {
        flat.push_back(std::stod(toks[i]));
      } catch (const std::exception&) {
        throw detail::parse_error(path, line_no, "'" + toks[i] + "' is not a number");
      }
    }
  }
  if (words.empty()) throw std::runtime_error(path + ": no records");
  if (report) {
    report->records += words.size();
    if (dup) report->warn(path + ": " + std::to_string(dup) + " duplicate words ignored");
  }
  return EmbeddingTable::build(std::move(words), std::move(flat), dim);
}

inline void save_embeddings(const EmbeddingTable& emb, const std::string& path) {
  auto os = detail::open_output(path);
  for (std::size_t i = 0; i < emb.words.size(); ++i) {
    os << emb.words[i];
    for (std::size_t j = 0; j < emb.dim; ++j)
      os << " " << detail::format_score(emb.matrix->values[i * emb.dim + j]);
    os << "\n";
  }
}

// ---------------------------------------------------------------------------
// Lexicon, unigram corpus, traces, manifests
// ---------------------------------------------------------------------------

inline Lexicon load_lexicon(const std::string& path) {
  auto is = detail::open_input(path);
  Lexicon lex;
  std::string line;
  while (std::getline(is, line))
    for (const auto& t : tokenize(line)) lex.insert(t);
  if (lex.empty()) throw std::runtime_error(path + ": no records");
  return lex;
}

inline UnigramModel load_unigram(const std::string& path, double alpha = 1.0) {
  auto is = detail::open_input(path);
  return UnigramModel::from_text(is, alpha);
}

// Re-rank audit trace: one line per candidate with all score components.
inline void save_trace(const std::vector<std::pair<std::string, std::vector<ScoredCandidate>>>& traces,
                       const std::string& path) {
  auto os = detail::open_output(path);
  os << "# trace v1\n";
  os << "# image_id rank word baseline relatedness ctx_confidence unigram final\n";
  for (const auto& [image_id, candidates] : traces) {
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto& c = candidates[i];
      os << image_id << " " << (i + 1) << " " << c.word << " "
         << detail::format_score(c.baseline) << " " << detail::format_score(c.relatedness) << " "
         << detail::format_score(c.ctx_confidence) << " " << detail::format_score(c.unigram)
         << " " << detail::format_score(c.final_score) << "\n";
    }
  }
}

// Run manifest: every effective setting and seed, as sorted JSON. Contains
// no timestamps so identical runs write identical bytes.
inline void save_manifest(const nlohmann::json& manifest, const std::string& path) {
  auto os = detail::open_output(path);
  os << manifest.dump(2) << "\n";
}

}  // namespace relrank

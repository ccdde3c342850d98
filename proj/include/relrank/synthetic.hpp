#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "relrank/io.hpp"
#include "relrank/reranker.hpp"
#include "relrank/rng.hpp"
#include "relrank/trainer.hpp"

namespace relrank {

// Desk-scale planted-signal corpus: the vocabulary is organized into
// topics, each scene's context and gold word come from one topic, and
// distractor candidates come from other topics. Embeddings cluster around
// per-topic centroids, so relatedness between gold and context is real and
// learnable by construction.
struct SyntheticSpec {
  std::size_t topics = 20;
  std::size_t words_per_topic = 20;
  std::size_t train_scenes = 400;
  std::size_t eval_scenes = 500;
  std::size_t k = 5;  // candidates per eval scene
  std::size_t embedding_dim = 16;
  double gold_in_caption_prob = 0.3;  // plants overlap-layer signal
  std::size_t unigram_tokens = 20000;
  double lexicon_coverage = 0.9;
};

struct SyntheticData {
  EmbeddingTable embeddings;
  std::vector<Scene> train;
  std::vector<HypothesisSet> eval_sets;
  std::vector<std::string> unigram_corpus;
  Lexicon lexicon;
};

namespace detail {

inline std::string topic_word(std::size_t topic, std::size_t i) {
  return "t" + std::to_string(topic) + "w" + std::to_string(i);
}

inline const std::vector<std::string>& function_words() {
  static const std::vector<std::string> words = {"a", "the", "on", "near", "with", "under"};
  return words;
}

}  // namespace detail

inline SyntheticData make_synthetic(const SyntheticSpec& spec, Rng rng) {
  if (spec.topics < 2) throw std::invalid_argument("make_synthetic: need at least 2 topics");
  if (spec.words_per_topic < 6)
    throw std::invalid_argument("make_synthetic: need at least 6 words per topic");
  if (spec.k < 2 || spec.k > 10)
    throw std::invalid_argument("make_synthetic: k must be in [2,10]");

  SyntheticData data;
  Rng emb_rng = rng.fork("embeddings");
  Rng scene_rng = rng.fork("scenes");
  Rng eval_rng = rng.fork("eval");
  Rng corpus_rng = rng.fork("corpus");
  Rng lex_rng = rng.fork("lexicon");

  // topic-clustered embeddings, plus standalone function words
  std::vector<std::string> words;
  std::vector<double> flat;
  for (std::size_t t = 0; t < spec.topics; ++t) {
    std::vector<double> centroid(spec.embedding_dim);
    for (auto& v : centroid) v = emb_rng.normal(0.0, 1.0);
    for (std::size_t i = 0; i < spec.words_per_topic; ++i) {
      words.push_back(detail::topic_word(t, i));
      for (std::size_t d = 0; d < spec.embedding_dim; ++d)
        flat.push_back(centroid[d] + 0.3 * emb_rng.normal(0.0, 1.0));
    }
  }
  for (const auto& fw : detail::function_words()) {
    words.push_back(fw);
    for (std::size_t d = 0; d < spec.embedding_dim; ++d)
      flat.push_back(emb_rng.normal(0.0, 1.0));
  }
  data.embeddings = EmbeddingTable::build(std::move(words), std::move(flat), spec.embedding_dim);

  // a scene: gold plus objects/places/caption drawn from the gold's topic
  auto make_scene = [&](Rng& r, const std::string& id) {
    Scene scene;
    scene.image_id = id;
    const std::size_t topic = r.index(spec.topics);
    std::vector<std::size_t> picks;  // distinct word indices within the topic
    while (picks.size() < 6) {
      std::size_t w = r.index(spec.words_per_topic);
      bool fresh = true;
      for (std::size_t p : picks) fresh = fresh && p != w;
      if (fresh) picks.push_back(w);
    }
    scene.gold = detail::topic_word(topic, picks[0]);
    scene.ctx.objects = {{detail::topic_word(topic, picks[1]), r.uniform(0.6, 0.95)},
                         {detail::topic_word(topic, picks[2]), r.uniform(0.6, 0.95)}};
    scene.ctx.places = {{detail::topic_word(topic, picks[3]), r.uniform(0.6, 0.95)}};
    const auto& fws = detail::function_words();
    scene.ctx.caption = {fws[r.index(fws.size())], detail::topic_word(topic, picks[4]),
                         fws[r.index(fws.size())], detail::topic_word(topic, picks[5])};
    if (r.uniform(0.0, 1.0) < spec.gold_in_caption_prob)
      scene.ctx.caption.push_back(scene.gold);  // overlap-layer signal
    return scene;
  };

  for (std::size_t i = 0; i < spec.train_scenes; ++i)
    data.train.push_back(make_scene(scene_rng, "train" + std::to_string(i)));

  // eval scenes: gold planted at baseline rank uniform in {1..k-1} so the
  // baseline's top-1 accuracy is 1/(k-1) and its mean rank (k/2)
  for (std::size_t i = 0; i < spec.eval_scenes; ++i) {
    Scene scene = make_scene(eval_rng, "eval" + std::to_string(i));
    HypothesisSet h;
    h.image_id = scene.image_id;
    h.gold = scene.gold;
    h.ctx = scene.ctx;
    const std::size_t gold_rank = eval_rng.index(spec.k - 1);  // 0-based
    for (std::size_t c = 0; c < spec.k; ++c) {
      const double score = 0.9 - 0.08 * static_cast<double>(c);
      if (c == gold_rank) {
        h.candidates.push_back({scene.gold, score});
      } else {
        // distractor from a different topic than the scene's
        std::string w;
        do {
          w = detail::topic_word(eval_rng.index(spec.topics), eval_rng.index(spec.words_per_topic));
        } while (w.substr(0, w.find('w')) == scene.gold.substr(0, scene.gold.find('w')));
        h.candidates.push_back({w, score});
      }
    }
    data.eval_sets.push_back(std::move(h));
  }

  // unigram corpus: all vocabulary words at roughly uniform frequency with
  // frequent function words
  for (std::size_t i = 0; i < spec.unigram_tokens; ++i) {
    if (corpus_rng.uniform(0.0, 1.0) < 0.25) {
      const auto& fws = detail::function_words();
      data.unigram_corpus.push_back(fws[corpus_rng.index(fws.size())]);
    } else {
      data.unigram_corpus.push_back(detail::topic_word(corpus_rng.index(spec.topics),
                                                       corpus_rng.index(spec.words_per_topic)));
    }
  }

  // lexicon covering most of the vocabulary
  for (std::size_t t = 0; t < spec.topics; ++t)
    for (std::size_t i = 0; i < spec.words_per_topic; ++i)
      if (lex_rng.uniform(0.0, 1.0) < spec.lexicon_coverage)
        data.lexicon.insert(detail::topic_word(t, i));
  return data;
}

// Writes the corpus in the library's file formats:
//   train.hyps train.ctx eval.hyps eval.ctx embeddings.txt unigram.txt lexicon.txt
inline void write_synthetic(const SyntheticData& data, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto path = [&](const char* name) { return (std::filesystem::path(dir) / name).string(); };

  std::vector<HypothesisSet> train_sets;
  ContextMap train_ctx;
  for (const auto& scene : data.train) {
    HypothesisSet h;
    h.image_id = scene.image_id;
    h.gold = scene.gold;
    h.candidates = {{scene.gold, 1.0}};
    train_sets.push_back(std::move(h));
    train_ctx[scene.image_id] = scene.ctx;
  }
  save_hypotheses(train_sets, path("train.hyps"));
  save_context(train_ctx, path("train.ctx"));

  ContextMap eval_ctx;
  for (const auto& h : data.eval_sets) eval_ctx[h.image_id] = h.ctx;
  save_hypotheses(data.eval_sets, path("eval.hyps"));
  save_context(eval_ctx, path("eval.ctx"));

  save_embeddings(data.embeddings, path("embeddings.txt"));

  {
    auto os = detail::open_output(path("unigram.txt"));
    for (std::size_t i = 0; i < data.unigram_corpus.size(); ++i) {
      os << data.unigram_corpus[i];
      os << ((i + 1) % 20 == 0 ? "\n" : " ");
    }
    os << "\n";
  }
  {
    auto os = detail::open_output(path("lexicon.txt"));
    std::vector<std::string> sorted(data.lexicon.begin(), data.lexicon.end());
    std::sort(sorted.begin(), sorted.end());
    for (const auto& w : sorted) os << w << "\n";
  }
}

}  // namespace relrank

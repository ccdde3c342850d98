#include "relrank/io.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "relrank/rng.hpp"
#include "relrank/synthetic.hpp"

using namespace relrank;

namespace {

std::string temp_path(const char* name) {
  return std::string(::testing::TempDir()) + name;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream(path) << content;
}

}  // namespace

TEST(HypothesesFile, LoadsAndSortsByBaseline) {
  auto path = temp_path("hyps1.txt");
  write_file(path,
             "# hypotheses v1\n"
             "img1 delta united 0.44 delta 0.31 del 0.10\n"
             "img2 stop stop 0.9\n");
  IngestReport report;
  auto sets = load_hypotheses(path, &report);
  ASSERT_EQ(sets.size(), 2u);
  EXPECT_EQ(report.records, 2u);
  EXPECT_EQ(sets[0].gold, "delta");
  EXPECT_EQ(sets[0].candidates[0].word, "united");
  EXPECT_EQ(sets[0].candidates[2].word, "del");
  std::remove(path.c_str());
}

TEST(HypothesesFile, RoundTripIsLossless) {
  auto path = temp_path("hyps2.txt");
  std::vector<HypothesisSet> sets(2);
  sets[0].image_id = "a";
  sets[0].gold = "gold";
  sets[0].candidates = {{"gold", 0.123456789012345678}, {"w", 0.1}};
  sets[1].image_id = "b";
  sets[1].gold = "x";
  sets[1].candidates = {{"x", 1.0 / 3.0}};
  save_hypotheses(sets, path);
  auto loaded = load_hypotheses(path);
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded[0].candidates[0].baseline_score, sets[0].candidates[0].baseline_score);
  EXPECT_EQ(loaded[1].candidates[0].baseline_score, sets[1].candidates[0].baseline_score);
  std::remove(path.c_str());
}

TEST(HypothesesFile, MalformedLineCitesLineNumber) {
  auto path = temp_path("hyps3.txt");
  write_file(path,
             "# hypotheses v1\n"
             "img1 delta united 0.44\n"
             "img2 broken word\n");
  try {
    load_hypotheses(path);
    FAIL() << "expected parse error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  std::remove(path.c_str());
}

TEST(HypothesesFile, ScoreOutsideUnitIntervalRejected) {
  auto path = temp_path("hyps4.txt");
  write_file(path, "# hypotheses v1\nimg1 w w 1.5\n");
  EXPECT_THROW(load_hypotheses(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST(HypothesesFile, EmptyFileRejected) {
  auto path = temp_path("hyps5.txt");
  write_file(path, "");
  try {
    load_hypotheses(path);
    FAIL() << "expected error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("no records"), std::string::npos) << e.what();
  }
  write_file(path, "# hypotheses v1\n");
  EXPECT_THROW(load_hypotheses(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST(HypothesesFile, MissingHeaderRejected) {
  auto path = temp_path("hyps6.txt");
  write_file(path, "img1 gold w 0.5\n");
  EXPECT_THROW(load_hypotheses(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST(HypothesesFile, MoreThanTenCandidatesTruncatedWithWarning) {
  auto path = temp_path("hyps7.txt");
  std::string line = "img1 w0";
  for (int i = 0; i < 12; ++i)
    line += " w" + std::to_string(i) + " 0." + std::to_string(99 - i);
  write_file(path, "# hypotheses v1\n" + line + "\n");
  IngestReport report;
  auto sets = load_hypotheses(path, &report);
  EXPECT_EQ(sets[0].candidates.size(), 10u);
  ASSERT_FALSE(report.warnings.empty());
  std::remove(path.c_str());
}

TEST(ContextFile, LoadsAllSections) {
  auto path = temp_path("ctx1.txt");
  write_file(path,
             "# context v1\n"
             "img1\tairliner:0.92,sky:0.5\trunway:0.83\tA plane on the Runway.\n"
             "img2\t\t\t\n");
  auto map = load_context(path);
  ASSERT_EQ(map.size(), 2u);
  const auto& ctx = map.at("img1");
  ASSERT_EQ(ctx.objects.size(), 2u);
  EXPECT_EQ(ctx.objects[0].label, "airliner");
  EXPECT_DOUBLE_EQ(ctx.objects[0].confidence, 0.92);
  ASSERT_EQ(ctx.places.size(), 1u);
  EXPECT_EQ(ctx.caption, (std::vector<std::string>{"a", "plane", "on", "the", "runway"}));
  EXPECT_TRUE(map.at("img2").empty());
  std::remove(path.c_str());
}

TEST(ContextFile, DuplicateImageIdLastWinsWithWarning) {
  auto path = temp_path("ctx2.txt");
  write_file(path,
             "# context v1\n"
             "img1\ta:0.5\t\tfirst\n"
             "img1\tb:0.6\t\tsecond\n");
  IngestReport report;
  auto map = load_context(path, &report);
  EXPECT_EQ(map.at("img1").objects[0].label, "b");
  ASSERT_EQ(report.warnings.size(), 1u);
  EXPECT_NE(report.warnings[0].find("duplicate"), std::string::npos);
  std::remove(path.c_str());
}

TEST(ContextFile, RoundTripIsLossless) {
  auto path = temp_path("ctx3.txt");
  ContextMap map;
  ContextBundle ctx;
  ctx.objects = {{"plane", 0.123456789012345}};
  ctx.places = {{"runway", 1.0 / 7.0}};
  ctx.caption = {"a", "plane"};
  map["img9"] = ctx;
  save_context(map, path);
  auto loaded = load_context(path);
  EXPECT_EQ(loaded.at("img9").objects[0].confidence, ctx.objects[0].confidence);
  EXPECT_EQ(loaded.at("img9").places[0].confidence, ctx.places[0].confidence);
  EXPECT_EQ(loaded.at("img9").caption, ctx.caption);
  std::remove(path.c_str());
}

TEST(ContextFile, AttachReportsUnresolvedIds) {
  auto hpath = temp_path("ctx4h.txt");
  auto cpath = temp_path("ctx4c.txt");
  write_file(hpath, "# hypotheses v1\nimgA gold gold 0.9\nimgB gold gold 0.9\n");
  write_file(cpath, "# context v1\nimgA\tx:0.5\t\tcap\n");
  auto sets = load_hypotheses(hpath);
  auto ctx = load_context(cpath);
  IngestReport report;
  attach_contexts(sets, ctx, &report);
  EXPECT_FALSE(sets[0].ctx.empty());
  EXPECT_TRUE(sets[1].ctx.empty());
  ASSERT_EQ(report.warnings.size(), 1u);
  EXPECT_NE(report.warnings[0].find("imgB"), std::string::npos);
  std::remove(hpath.c_str());
  std::remove(cpath.c_str());
}

TEST(EmbeddingFile, LoadsGloveLayout) {
  auto path = temp_path("emb1.txt");
  write_file(path, "the 0.1 0.2\ncat -0.3 0.4\n");
  auto emb = load_embeddings(path);
  EXPECT_EQ(emb.dim, 2u);
  EXPECT_EQ(emb.vocab_size(), 2u);
  EXPECT_DOUBLE_EQ(emb.matrix->at(1, 0), -0.3);
  std::remove(path.c_str());
}

TEST(EmbeddingFile, SkipsWord2vecCountHeader) {
  auto path = temp_path("emb2.txt");
  write_file(path, "2 3\nw1 1 2 3\nw2 4 5 6\n");
  auto emb = load_embeddings(path);
  EXPECT_EQ(emb.dim, 3u);
  EXPECT_EQ(emb.vocab_size(), 2u);
  std::remove(path.c_str());
}

TEST(EmbeddingFile, InconsistentDimensionCitesLine) {
  auto path = temp_path("emb3.txt");
  write_file(path,
             "w1 1 2 3\nw2 1 2 3\nw3 1 2 3\nw4 1 2 3\nw5 1 2 3\nw6 1 2 3\n"
             "w7 1 2\n");
  try {
    load_embeddings(path);
    FAIL() << "expected dimension error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("line 7"), std::string::npos) << e.what();
  }
  std::remove(path.c_str());
}

TEST(EmbeddingFile, DuplicateWordsFirstWinsWithWarning) {
  auto path = temp_path("emb4.txt");
  write_file(path, "w 1 1\nW 2 2\n");
  IngestReport report;
  auto emb = load_embeddings(path, &report);
  EXPECT_EQ(emb.vocab_size(), 1u);
  EXPECT_DOUBLE_EQ(emb.matrix->at(0, 0), 1.0);
  ASSERT_EQ(report.warnings.size(), 1u);
  std::remove(path.c_str());
}

TEST(EmbeddingFile, RoundTripIsLossless) {
  auto path = temp_path("emb5.txt");
  auto emb = EmbeddingTable::build({"a", "b"}, {1.0 / 3.0, 0.25, -0.7, 1e-17}, 2);
  save_embeddings(emb, path);
  auto loaded = load_embeddings(path);
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_EQ(loaded.matrix->values[i], emb.matrix->values[i]);
  std::remove(path.c_str());
}

TEST(LexiconFile, LoadsLowercasedWords) {
  auto path = temp_path("lex1.txt");
  write_file(path, "Alpha\nbeta\n");
  auto lex = load_lexicon(path);
  EXPECT_TRUE(lex.count("alpha"));
  EXPECT_TRUE(lex.count("beta"));
  std::remove(path.c_str());
}

TEST(Trace, WritesOneLinePerCandidate) {
  auto path = temp_path("trace1.txt");
  std::vector<std::pair<std::string, std::vector<ScoredCandidate>>> traces;
  traces.push_back({"img1", {{"delta", 0.3, 0.9, 1.0, 0.01, 0.5}, {"united", 0.4, 0.1, 1.0, 0.02, 0.2}}});
  save_trace(traces, path);
  std::ifstream is(path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  EXPECT_NE(text.find("# trace v1"), std::string::npos);
  EXPECT_NE(text.find("img1 1 delta"), std::string::npos);
  EXPECT_NE(text.find("img1 2 united"), std::string::npos);
  std::remove(path.c_str());
}

TEST(Synthetic, GeneratorIsDeterministicAndPlantsSignal) {
  SyntheticSpec spec;
  spec.topics = 5;
  spec.words_per_topic = 8;
  spec.train_scenes = 20;
  spec.eval_scenes = 40;
  auto a = make_synthetic(spec, Rng(42));
  auto b = make_synthetic(spec, Rng(42));
  ASSERT_EQ(a.train.size(), 20u);
  ASSERT_EQ(a.eval_sets.size(), 40u);
  EXPECT_EQ(a.train[3].gold, b.train[3].gold);
  EXPECT_EQ(a.eval_sets[7].candidates[2].word, b.eval_sets[7].candidates[2].word);

  // planted structure: gold's topic matches the context words' topic,
  // distractors come from other topics
  for (const auto& h : a.eval_sets) {
    auto topic_of = [](const std::string& w) { return w.substr(0, w.find('w')); };
    EXPECT_EQ(topic_of(h.gold), topic_of(h.ctx.objects[0].label));
    std::size_t gold_seen = 0;
    for (const auto& c : h.candidates) {
      if (c.word == h.gold) {
        ++gold_seen;
      } else {
        EXPECT_NE(topic_of(c.word), topic_of(h.gold));
      }
    }
    EXPECT_EQ(gold_seen, 1u);
  }
}

TEST(Synthetic, BaselinePlacementMatchesDesign) {
  SyntheticSpec spec;
  spec.eval_scenes = 500;
  auto data = make_synthetic(spec, Rng(7));
  double mean_rank = 0.0;
  std::size_t top1 = 0;
  for (const auto& h : data.eval_sets) {
    for (std::size_t i = 0; i < h.candidates.size(); ++i)
      if (h.candidates[i].word == h.gold) {
        mean_rank += static_cast<double>(i + 1);
        top1 += i == 0;
      }
  }
  mean_rank /= static_cast<double>(data.eval_sets.size());
  EXPECT_NEAR(mean_rank, 2.5, 0.15);
  EXPECT_LE(static_cast<double>(top1) / 500.0, 0.45);
}

TEST(Synthetic, WriteProducesLoadableFiles) {
  SyntheticSpec spec;
  spec.topics = 4;
  spec.words_per_topic = 8;
  spec.train_scenes = 10;
  spec.eval_scenes = 10;
  spec.unigram_tokens = 500;
  auto data = make_synthetic(spec, Rng(3));
  auto dir = temp_path("synthdir");
  write_synthetic(data, dir);

  auto train = load_hypotheses(dir + "/train.hyps");
  auto train_ctx = load_context(dir + "/train.ctx");
  auto eval = load_hypotheses(dir + "/eval.hyps");
  auto eval_ctx = load_context(dir + "/eval.ctx");
  auto emb = load_embeddings(dir + "/embeddings.txt");
  auto lm = load_unigram(dir + "/unigram.txt");
  auto lex = load_lexicon(dir + "/lexicon.txt");
  EXPECT_EQ(train.size(), 10u);
  EXPECT_EQ(eval.size(), 10u);
  EXPECT_EQ(train_ctx.size(), 10u);
  EXPECT_EQ(eval_ctx.size(), 10u);
  EXPECT_EQ(emb.dim, spec.embedding_dim);
  EXPECT_GT(lm.total, 0);
  EXPECT_FALSE(lex.empty());
  std::filesystem::remove_all(dir);
}

#include "relrank/model.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>

#include "relrank/gradcheck.hpp"
#include "relrank/rng.hpp"

using namespace relrank;

namespace {

EmbeddingTable small_table(std::size_t dim = 8, std::uint64_t seed = 5) {
  Rng rng(seed);
  std::vector<std::string> words = {"plane", "runway", "sky", "delta", "cat", "tree"};
  std::vector<double> flat;
  for (std::size_t i = 0; i < words.size() * dim; ++i) flat.push_back(rng.uniform(-1.0, 1.0));
  return EmbeddingTable::build(words, flat, dim);
}

ModelConfig toy_config(Variant v) {
  ModelConfig cfg;
  cfg.variant = v;
  cfg.kernels_per_channel = 4;
  cfg.lstm_hidden = 8;
  cfg.max_context_len = 12;
  cfg.max_candidate_len = 2;
  cfg.mlp_sizes = {8};
  cfg.overlap_buckets = 8;
  cfg.overlap_proj = 4;
  return cfg;
}

ContextBundle runway_context() {
  ContextBundle ctx;
  ctx.objects = {{"airliner", 0.92}};
  ctx.places = {{"runway", 0.83}};
  ctx.caption = {"a", "plane", "on", "the", "runway"};
  return ctx;
}

std::string temp_path(const char* name) {
  return std::string(::testing::TempDir()) + name;
}

}  // namespace

TEST(Overlap, CountsOccurrencesAcrossSources) {
  auto ov = overlap_features("delta", runway_context());
  EXPECT_EQ(ov.counts.at("runway"), 2);  // place + caption
  EXPECT_EQ(ov.counts.at("airliner"), 1);
  EXPECT_FALSE(ov.candidate_in_context);
}

TEST(Overlap, EmptyContextGivesZeroVector) {
  ContextBundle empty;
  auto ov = overlap_features("anything", empty);
  EXPECT_TRUE(ov.counts.empty());
  EXPECT_FALSE(ov.candidate_in_context);
  auto f = ov.to_features(16);
  ASSERT_EQ(f.size(), 17u);
  for (double v : f) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Overlap, CandidateInContextSetsIndicator) {
  auto ov = overlap_features("Runway", runway_context());
  EXPECT_TRUE(ov.candidate_in_context);
  EXPECT_DOUBLE_EQ(ov.to_features(16).back(), 1.0);
}

TEST(Overlap, OrderInsensitiveAcrossSources) {
  ContextBundle a = runway_context();
  ContextBundle b;
  b.objects = a.objects;
  b.places = a.places;
  b.caption = {"runway", "the", "on", "plane", "a"};
  std::swap(b.objects, b.objects);  // same content
  EXPECT_EQ(overlap_features("delta", a).counts, overlap_features("delta", b).counts);
}

TEST(Overlap, DuplicatesWithinOneSourceCountOnce) {
  ContextBundle ctx;
  ctx.caption = {"blue", "blue", "blue"};
  EXPECT_EQ(overlap_features("x", ctx).counts.at("blue"), 1);
  ctx.places = {{"blue", 0.4}};
  EXPECT_EQ(overlap_features("x", ctx).counts.at("blue"), 2);
}

TEST(BuildModel, SameSeedGivesBitIdenticalParameters) {
  auto table = small_table();
  auto cfg = toy_config(Variant::fdclstm_at);
  auto a = build_model(cfg, table, Rng(99));
  auto b = build_model(cfg, table, Rng(99));
  auto pa = a.named_parameters(), pb = b.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_EQ(pa[i].second->values, pb[i].second->values) << pa[i].first;
  }
}

TEST(BuildModel, DifferentSeedsDiffer) {
  auto table = small_table();
  auto cfg = toy_config(Variant::fdclstm_at);
  auto a = build_model(cfg, table, Rng(1));
  auto b = build_model(cfg, table, Rng(2));
  EXPECT_NE(a.head.w->values, b.head.w->values);
}

TEST(BuildModel, PlainVariantHasNoAttentionAndNoConvBn) {
  auto m = build_model(toy_config(Variant::fdclstm), small_table(), Rng(7));
  EXPECT_FALSE(m.attention.has_value());
  EXPECT_TRUE(m.conv_bn.empty());
  EXPECT_FALSE(m.config.bn_after_conv());
  // BN between MLP layers stays in both variants
  EXPECT_EQ(m.mlp_bn.size(), m.mlp.size());
}

TEST(BuildModel, AttentionVariantHasBnAfterEachConv) {
  auto m = build_model(toy_config(Variant::fdclstm_at), small_table(), Rng(7));
  ASSERT_TRUE(m.attention.has_value());
  EXPECT_EQ(m.conv_bn.size(), 9u);  // candidate + 4 per subnetwork
}

TEST(BuildModel, KernelWidthsFollowConfig) {
  auto m = build_model(toy_config(Variant::fdclstm_at), small_table(), Rng(7));
  const std::array<std::size_t, 4> expected{3, 3, 5, 8};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(m.conv_a[i].width, expected[i]);
    EXPECT_EQ(m.conv_b[i].width, expected[i]);
    EXPECT_EQ(m.conv_a[i].kernel_count(), 4u);
  }
}

TEST(BuildModel, DimensionMismatchThrows) {
  auto cfg = toy_config(Variant::fdclstm_at);
  cfg.embedding_dim = 16;  // table is 8-dimensional
  EXPECT_THROW(build_model(cfg, small_table(), Rng(7)), std::invalid_argument);
}

TEST(BuildModel, ContextShorterThanWidestKernelRejected) {
  auto cfg = toy_config(Variant::fdclstm_at);
  cfg.max_context_len = 6;  // widest kernel is 8
  EXPECT_THROW(build_model(cfg, small_table(), Rng(7)), std::invalid_argument);
}

TEST(BuildModel, ParameterCountMatchesSumOfSizes) {
  auto m = build_model(toy_config(Variant::fdclstm_at), small_table(), Rng(7));
  std::size_t total = 0;
  for (auto& [name, t] : m.named_parameters()) total += t->size();
  EXPECT_EQ(m.parameter_count(), total);
  EXPECT_GT(total, 0u);
}

TEST(Forward, ScoreStrictlyInsideUnitInterval) {
  auto m = build_model(toy_config(Variant::fdclstm_at), small_table(), Rng(3));
  for (const char* cand : {"delta", "cat", "unseenword", "x"}) {
    double s = score(m, cand, runway_context());
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }
}

TEST(Forward, InferIsDeterministic) {
  auto m = build_model(toy_config(Variant::fdclstm_at), small_table(), Rng(3));
  double a = score(m, "delta", runway_context());
  double b = score(m, "delta", runway_context());
  EXPECT_EQ(a, b);
}

TEST(Forward, EmptyContextStillScores) {
  auto m = build_model(toy_config(Variant::fdclstm), small_table(), Rng(3));
  ContextBundle empty;
  double s = score(m, "delta", empty);
  EXPECT_TRUE(std::isfinite(s));
  EXPECT_GT(s, 0.0);
  EXPECT_LT(s, 1.0);
}

TEST(Forward, ContextBeyondMaxLengthIsTruncatedDeterministically) {
  auto m = build_model(toy_config(Variant::fdclstm_at), small_table(), Rng(3));
  ContextBundle big;
  for (int i = 0; i < 40; ++i) big.caption.push_back("plane");
  ContextBundle truncated;
  for (std::size_t i = 0; i < m.config.max_context_len; ++i) truncated.caption.push_back("plane");
  EXPECT_EQ(score(m, "delta", big), score(m, "delta", truncated));
}

TEST(Forward, LongCandidateTruncatesWithWarning) {
  auto m = build_model(toy_config(Variant::fdclstm_at), small_table(), Rng(3));
  testing::internal::CaptureStderr();
  double a = score(m, "plane runway sky", runway_context());  // 3 tokens, max is 2
  std::string err = testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("truncated"), std::string::npos);
  double b = score(m, "plane runway", runway_context());
  EXPECT_EQ(a, b);
}

TEST(Forward, EmptyCandidateThrows) {
  auto m = build_model(toy_config(Variant::fdclstm_at), small_table(), Rng(3));
  EXPECT_THROW(score(m, "", runway_context()), std::invalid_argument);
}

TEST(Forward, TrainModeRequiresBatchOfTwo) {
  auto m = build_model(toy_config(Variant::fdclstm_at), small_table(), Rng(3));
  std::string cand = "delta";
  ContextBundle ctx = runway_context();
  Rng rng(0);
  std::vector<ScoreRequest> one = {{&cand, &ctx}};
  EXPECT_THROW(forward_batch(m, one, Mode::train, rng), std::invalid_argument);
}

TEST(Forward, FullModelGradientsMatchFiniteDifferences) {
  // one seed per variant here; the gradcheck suite sweeps many
  EXPECT_LT(check_full_model(Variant::fdclstm, 424242), 1e-3);
  EXPECT_LT(check_full_model(Variant::fdclstm_at, 424242), 1e-3);
}

TEST(SaveLoad, RoundTripIsBitExact) {
  auto m = build_model(toy_config(Variant::fdclstm_at), small_table(), Rng(11));
  const std::string path = temp_path("model_roundtrip.bin");
  save_model(m, path);
  auto loaded = load_model(path);

  double probe_before = score(m, "delta", runway_context());
  double probe_after = score(loaded, "delta", runway_context());
  EXPECT_EQ(probe_before, probe_after);  // 0 ulps

  auto pa = m.named_parameters(), pb = loaded.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_EQ(pa[i].second->values, pb[i].second->values) << pa[i].first;
  std::remove(path.c_str());
}

TEST(SaveLoad, PlainVariantRoundTrips) {
  auto m = build_model(toy_config(Variant::fdclstm), small_table(), Rng(12));
  const std::string path = temp_path("model_plain.bin");
  save_model(m, path);
  auto loaded = load_model(path);
  EXPECT_FALSE(loaded.attention.has_value());
  EXPECT_EQ(score(m, "cat", runway_context()), score(loaded, "cat", runway_context()));
  std::remove(path.c_str());
}

TEST(SaveLoad, CorruptedHeaderFailsCleanly) {
  auto m = build_model(toy_config(Variant::fdclstm_at), small_table(), Rng(13));
  const std::string path = temp_path("model_corrupt.bin");
  save_model(m, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(24);  // first byte of the JSON header
    f.put('#');
  }
  EXPECT_THROW(load_model(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST(SaveLoad, NotAModelFileRejected) {
  const std::string path = temp_path("not_a_model.bin");
  std::ofstream(path) << "just some text, definitely not a model";
  EXPECT_THROW(load_model(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST(SaveLoad, TruncatedParameterBlockRejected) {
  auto m = build_model(toy_config(Variant::fdclstm_at), small_table(), Rng(14));
  const std::string path = temp_path("model_trunc.bin");
  save_model(m, path);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(load_model(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST(SaveLoad, MismatchedDimensionInHeaderRejected) {
  auto m = build_model(toy_config(Variant::fdclstm_at), small_table(), Rng(15));
  const std::string path = temp_path("model_dim.bin");
  save_model(m, path);
  // rewrite the header with a doctored embedding dim, keeping lengths valid
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  std::uint64_t hlen;
  std::memcpy(&hlen, bytes.data() + 12, sizeof(hlen));
  std::string header = bytes.substr(20, hlen);
  auto pos = header.find("\"dim\":8");
  ASSERT_NE(pos, std::string::npos);
  header.replace(pos, 7, "\"dim\":9");
  bytes.replace(20, hlen, header);
  std::ofstream(path, std::ios::binary) << bytes;
  try {
    load_model(path);
    FAIL() << "expected dimension mismatch";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("dim"), std::string::npos) << e.what();
  }
  std::remove(path.c_str());
}

#pragma once

#include <cstdint>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "relrank/layers.hpp"
#include "relrank/model.hpp"
#include "relrank/rng.hpp"
#include "relrank/tensor.hpp"
#include "relrank/trainer.hpp"

namespace relrank {

struct GradCheck {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t trials = 0;
};

struct GradCheckReport {
  std::vector<GradCheck> checks;
  double tolerance = 1e-3;

  double worst() const {
    double w = 0.0;
    for (const auto& c : checks) w = std::max(w, c.max_rel_err);
    return w;
  }

  bool all_pass() const { return worst() < tolerance; }

  void print(std::ostream& os) const {
    for (const auto& c : checks)
      os << (c.max_rel_err < tolerance ? "pass" : "FAIL") << "  " << c.name << "  max_rel_err "
         << c.max_rel_err << "  (" << c.trials << " trials)\n";
    os << (all_pass() ? "gradcheck: all checks passed" : "gradcheck: FAILURES above") << " (worst "
       << worst() << ", tolerance " << tolerance << ")\n";
  }
};

namespace detail {

inline TensorPtr rand_param(std::vector<std::size_t> shape, Rng& rng, double lo = -0.5,
                            double hi = 0.5) {
  auto t = Tensor::make(std::move(shape), true);
  for (auto& v : t->values) v = rng.uniform(lo, hi);
  return t;
}

inline TensorPtr rand_const(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  auto t = Tensor::make(std::move(shape), false);
  for (auto& v : t->values) v = rng.uniform(lo, hi);
  return t;
}

// Toy model: d=8, H=8, j=4, context length 12, over a small synthetic
// vocabulary. Dimensions chosen so a full-parameter finite-difference sweep
// stays fast.
inline RelatednessModel toy_model(Variant variant, Rng& rng) {
  std::vector<std::string> words = {"plane", "runway", "sky",  "delta", "cat",
                                    "tree",  "parking", "meter", "sign",  "blue"};
  std::vector<double> flat;
  for (std::size_t i = 0; i < words.size() * 8; ++i) flat.push_back(rng.uniform(-0.8, 0.8));
  auto table = EmbeddingTable::build(words, flat, 8);

  ModelConfig cfg;
  cfg.variant = variant;
  cfg.kernels_per_channel = 4;
  cfg.lstm_hidden = 8;
  cfg.max_context_len = 12;
  cfg.max_candidate_len = 2;
  cfg.mlp_sizes = {8};
  cfg.overlap_buckets = 8;
  cfg.overlap_proj = 4;
  cfg.dropout_rate = 0.7;
  return build_model(cfg, table, rng.fork("model"));
}

// A batch of three candidate/context pairs over the toy vocabulary, one of
// them with a short 6-token context.
struct ToyBatch {
  std::vector<std::string> candidates;
  std::vector<ContextBundle> contexts;

  std::vector<ScoreRequest> requests() const {
    std::vector<ScoreRequest> reqs;
    for (std::size_t i = 0; i < candidates.size(); ++i)
      reqs.push_back({&candidates[i], &contexts[i]});
    return reqs;
  }
};

inline ToyBatch toy_batch() {
  ToyBatch b;
  b.candidates = {"delta", "meter", "cat"};
  // context lengths 9, 6 and 12: the widest (width-8) channels see real
  // windows in two of the three examples, so no BN group degenerates to an
  // all-zero feature map (whose zero batch variance finite differences
  // cannot resolve)
  ContextBundle c1;
  c1.objects = {{"plane", 0.9}, {"sky", 0.6}};
  c1.places = {{"runway", 0.8}};
  c1.caption = {"plane", "on", "the", "runway", "under", "blue"};
  ContextBundle c2;  // 6 context tokens in total
  c2.objects = {{"meter", 0.7}};
  c2.places = {{"parking", 0.9}};
  c2.caption = {"parking", "sign", "near", "tree"};
  ContextBundle c3;
  c3.objects = {{"tree", 0.5}, {"sign", 0.4}, {"blue", 0.3}};
  c3.places = {{"sky", 0.6}};
  c3.caption = {"a", "blue", "sign", "under", "a", "tree", "meter", "cat"};
  b.contexts = {c1, c2, c3};
  return b;
}

}  // namespace detail

// Finite-difference check of the full model: mean BCE over a 3-example toy
// batch, differentiated with respect to every trainable parameter. Dropout
// and train-mode BN stay active; the dropout stream is re-seeded per
// evaluation so the loss is a fixed deterministic function.
// coords_per_tensor 0 probes every coordinate; a nonzero budget probes that
// many per tensor, seeded, for the wide multi-seed sweeps.
inline double check_full_model(Variant variant, std::uint64_t seed,
                               std::size_t coords_per_tensor = 0) {
  Rng rng(seed);
  RelatednessModel model = detail::toy_model(variant, rng);
  detail::ToyBatch batch = detail::toy_batch();
  auto reqs = batch.requests();
  auto targets = Tensor::make({3, 1}, {1.0, 1.0, 0.0});

  auto loss = [&]() {
    Rng dropout_rng(seed ^ 0x9e3779b97f4a7c15ull);
    return bce_loss(forward_batch(model, reqs, Mode::train, dropout_rng), targets);
  };
  Rng coord_rng(seed ^ 0x517cc1b727220a95ull);
  // step 2e-5 balances central-difference truncation against float64 noise;
  // the 1e-7 floor means gradients below it are certified to 1e-10 absolute
  return finite_diff_check_params(
      loss, model.trainable_parameters(), 2e-5, coords_per_tensor,
      [&coord_rng](std::size_t n) { return static_cast<std::size_t>(coord_rng.index(n)); }, 1e-7);
}

// Runs the whole gradient suite: every layer over `layer_trials` seeds and
// both full-model variants over `model_trials` coordinate-sampled seeds
// plus `exhaustive_model_trials` every-coordinate sweeps each.
inline GradCheckReport run_gradient_suite(std::uint64_t seed, std::size_t layer_trials = 100,
                                          std::size_t model_trials = 100,
                                          double tolerance = 1e-3,
                                          std::size_t exhaustive_model_trials = 2) {
  GradCheckReport report;
  report.tolerance = tolerance;
  Rng root(seed);

  auto run = [&](const std::string& name, std::size_t trials,
                 const std::function<double(Rng&)>& one) {
    GradCheck check{name, 0.0, trials};
    for (std::size_t t = 0; t < trials; ++t) {
      Rng rng = root.fork(name + "#" + std::to_string(t));
      check.max_rel_err = std::max(check.max_rel_err, one(rng));
    }
    report.checks.push_back(check);
  };

  run("dense", layer_trials, [](Rng& rng) {
    auto w = detail::rand_param({4, 3}, rng);
    auto b = detail::rand_param({3}, rng);
    auto x = detail::rand_param({2, 4}, rng);
    auto probe = detail::rand_const({2, 3}, rng);
    const Activation act = static_cast<Activation>(rng.index(4));
    double worst = 0.0;
    auto through = [&](const TensorPtr&) { return sum(mul(dense(x, w, b, act), probe)); };
    worst = std::max(worst, finite_diff_check(through, w));
    worst = std::max(worst, finite_diff_check(through, b));
    worst = std::max(worst, finite_diff_check(through, x));
    return worst;
  });

  run("conv_channel", layer_trials, [](Rng& rng) {
    const std::size_t k = 1 + rng.index(3), s = k + 2 + rng.index(4);
    ConvChannel ch{k, detail::rand_param({k * 3, 2}, rng), detail::rand_param({2}, rng)};
    auto x = detail::rand_param({s, 3}, rng);
    auto probe = detail::rand_const({s - k + 1, 2}, rng);
    auto through = [&](const TensorPtr&) { return sum(mul(conv_channel(x, ch), probe)); };
    double worst = finite_diff_check(through, ch.kernels);
    worst = std::max(worst, finite_diff_check(through, ch.bias));
    worst = std::max(worst, finite_diff_check(through, x));
    return worst;
  });

  run("masked_conv", layer_trials, [](Rng& rng) {
    const std::size_t k = 1 + rng.index(2), s = k + 3 + rng.index(3);
    ConvChannel ch{k, detail::rand_param({k * 3, 2}, rng), detail::rand_param({2}, rng)};
    auto x = detail::rand_param({s, 3}, rng);
    std::vector<bool> mask(s, false);
    for (std::size_t i = 0; i < s; ++i) mask[i] = rng.bernoulli(0.3);
    auto probe = detail::rand_const({s - k + 1, 2}, rng);
    auto through = [&](const TensorPtr&) { return sum(mul(masked_conv(x, mask, ch), probe)); };
    double worst = finite_diff_check(through, ch.kernels);
    worst = std::max(worst, finite_diff_check(through, x));
    return worst;
  });

  run("lstm", layer_trials, [](Rng& rng) {
    LstmParams p;
    auto block = [&](TensorPtr& wx, TensorPtr& wh, TensorPtr& b) {
      wx = detail::rand_param({3, 4}, rng);
      wh = detail::rand_param({4, 4}, rng);
      b = detail::rand_param({4}, rng);
    };
    block(p.wx_i, p.wh_i, p.b_i);
    block(p.wx_f, p.wh_f, p.b_f);
    block(p.wx_o, p.wh_o, p.b_o);
    block(p.wx_g, p.wh_g, p.b_g);
    auto seq = detail::rand_param({5, 3}, rng);
    auto probe = detail::rand_const({5, 4}, rng);
    auto loss = [&]() { return sum(mul(lstm_forward(seq, p), probe)); };
    std::vector<TensorPtr> params = {seq,      p.wx_i, p.wh_i, p.b_i, p.wx_f, p.wh_f, p.b_f,
                                     p.wx_o,   p.wh_o, p.b_o,  p.wx_g, p.wh_g, p.b_g};
    return finite_diff_check_params(loss, params);
  });

  run("attention_pool", layer_trials, [](Rng& rng) {
    AttentionParams a{detail::rand_param({4, 4}, rng), detail::rand_param({4}, rng)};
    auto states = detail::rand_param({5, 4}, rng);
    auto probe = detail::rand_const({4}, rng);
    auto loss = [&]() { return sum(mul(attention_pool(states, a).context, probe)); };
    return finite_diff_check_params(loss, {states, a.w_a, a.v_a});
  });

  run("batch_norm", layer_trials, [](Rng& rng) {
    auto p = BatchNormParams::create(3);
    p.gamma->requires_grad = true;
    p.beta->requires_grad = true;
    for (auto& v : p.gamma->values) v = rng.uniform(0.5, 1.5);
    for (auto& v : p.beta->values) v = rng.uniform(-0.5, 0.5);
    auto x = detail::rand_param({5, 3}, rng, -1.5, 1.5);
    auto probe = detail::rand_const({5, 3}, rng);
    auto loss = [&]() { return sum(mul(batch_norm(x, p, Mode::train), probe)); };
    return finite_diff_check_params(loss, {x, p.gamma, p.beta});
  });

  run("dropout", layer_trials, [](Rng& rng) {
    auto x = detail::rand_param({4, 4}, rng);
    auto probe = detail::rand_const({4, 4}, rng);
    const std::uint64_t mask_seed = rng.index(1u << 30);
    auto loss = [&]() {
      Rng mask_rng(mask_seed);
      return sum(mul(dropout(x, 0.7, Mode::train, mask_rng), probe));
    };
    return finite_diff_check_params(loss, {x});
  });

  run("embedding_lookup", layer_trials, [](Rng& rng) {
    std::vector<double> flat;
    for (int i = 0; i < 12; ++i) flat.push_back(rng.uniform(-1.0, 1.0));
    auto table = EmbeddingTable::build({"a", "b", "c"}, flat, 4);
    table.matrix->requires_grad = true;
    auto probe = detail::rand_const({3, 4}, rng);
    auto loss = [&]() { return sum(mul(embed({"a", "c", "a"}, table), probe)); };
    return finite_diff_check_params(loss, {table.matrix});
  });

  run("softmax_norm", layer_trials, [](Rng& rng) {
    auto v = detail::rand_param({5}, rng, -2.0, 2.0);
    auto probe = detail::rand_const({5}, rng);
    return finite_diff_check(
        [&](const TensorPtr& t) { return sum(mul(softmax_norm(t), probe)); }, v);
  });

  run("bce_sigmoid_dense", layer_trials, [](Rng& rng) {
    auto w = detail::rand_param({5, 1}, rng);
    auto b = detail::rand_param({1}, rng);
    auto x = detail::rand_param({3, 5}, rng);
    auto target = Tensor::make({3, 1}, {1.0, 0.0, 1.0});
    auto loss = [&]() { return bce_loss(dense(x, w, b, Activation::sigmoid), target); };
    return finite_diff_check_params(loss, {w, b, x});
  });

  // Wide sweeps probe a seeded sample of coordinates per parameter tensor;
  // the exhaustive runs cover every coordinate of every parameter.
  run("full_fdclstm (sampled)", model_trials,
      [](Rng& rng) { return check_full_model(Variant::fdclstm, rng.seed(), 8); });
  run("full_fdclstm_at (sampled)", model_trials,
      [](Rng& rng) { return check_full_model(Variant::fdclstm_at, rng.seed(), 8); });
  run("full_fdclstm (exhaustive)", exhaustive_model_trials,
      [](Rng& rng) { return check_full_model(Variant::fdclstm, rng.seed()); });
  run("full_fdclstm_at (exhaustive)", exhaustive_model_trials,
      [](Rng& rng) { return check_full_model(Variant::fdclstm_at, rng.seed()); });

  return report;
}

}  // namespace relrank

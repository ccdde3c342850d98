#pragma once

#include <cmath>
#include <iostream>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "relrank/model.hpp"
#include "relrank/rng.hpp"
#include "relrank/tensor.hpp"

namespace relrank {

// One labeled corpus item: the gold word spotted in an image plus the
// image's visual context.
struct Scene {
  std::string image_id;
  std::string gold;
  ContextBundle ctx;
};

// A supervised example. target 1 marks a related (gold) pair, 0 an
// unrelated one; graded targets in (0,1) are accepted by the loss.
struct TrainingPair {
  std::string candidate;
  ContextBundle ctx;
  double target = 1.0;
};

// Builds one positive pair per scene plus `neg_ratio` negatives, sampling
// gold words from other images and rejecting any word that collides with
// the scene's own gold or context terms.
inline std::vector<TrainingPair> make_pairs(const std::vector<Scene>& corpus, std::size_t neg_ratio,
                                            Rng rng) {
  if (corpus.empty()) throw std::invalid_argument("make_pairs: empty corpus");
  if (neg_ratio < 1) throw std::invalid_argument("make_pairs: neg_ratio must be >= 1");
  Rng pick = rng.fork("pairs");

  std::vector<TrainingPair> pairs;
  pairs.reserve(corpus.size() * (1 + neg_ratio));
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Scene& scene = corpus[i];
    pairs.push_back({scene.gold, scene.ctx, 1.0});

    std::set<std::string> taboo;
    taboo.insert(to_lower(scene.gold));
    for (const auto& t : context_tokens(scene.ctx)) taboo.insert(t);

    for (std::size_t k = 0; k < neg_ratio; ++k) {
      const std::size_t max_attempts = 100 * (neg_ratio + corpus.size());
      bool found = false;
      for (std::size_t attempt = 0; attempt < max_attempts; ++attempt) {
        std::size_t pick_idx = pick.index(corpus.size());
        if (pick_idx == i) continue;
        const std::string& word = corpus[pick_idx].gold;
        if (taboo.count(to_lower(word))) continue;
        pairs.push_back({word, scene.ctx, 0.0});
        found = true;
        break;
      }
      if (!found)
        throw std::runtime_error("make_pairs: cannot sample a negative for image '" +
                                 scene.image_id + "': every other gold word collides with its "
                                 "gold or context");
    }
  }
  return pairs;
}

// Mean binary cross-entropy over a batch of predictions. Predictions are
// clamped to [1e-7, 1-1e-7] so the loss stays finite.
inline TensorPtr bce_loss(const TensorPtr& pred, const TensorPtr& target) {
  if (pred->shape != target->shape)
    throw std::invalid_argument("bce_loss: prediction shape " + shape_str(pred->shape) +
                                " vs target " + shape_str(target->shape));
  TensorPtr p = clamp(pred, 1e-7, 1.0 - 1e-7);
  TensorPtr term = add(mul(target, log(p)), mul(affine(target, -1.0, 1.0), log(affine(p, -1.0, 1.0))));
  return affine(mean(term), -1.0, 0.0);
}

// ---------------------------------------------------------------------------
// Nadam
// ---------------------------------------------------------------------------

struct NadamConfig {
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam moments with a Nesterov lookahead on the first moment:
//   m_t = b1 m + (1-b1) g          v_t = b2 v + (1-b2) g^2
//   step = lr * (b1 m_t/(1-b1^{t+1}) + (1-b1) g/(1-b1^t)) / (sqrt(v_t/(1-b2^t)) + eps)
class Nadam {
 public:
  explicit Nadam(std::vector<TensorPtr> params, NadamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) {
      p->ensure_grad();
      p->zero_grad();
    }
  }

  // Applies one update from the gradients currently stored on the
  // parameters. Aborts on any non-finite gradient.
  void step() {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double b1t = std::pow(b1, static_cast<double>(t_));
    const double b1t1 = b1t * b1;
    const double b2t = std::pow(b2, static_cast<double>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = *params_[pi];
      p.ensure_grad();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = p.grad[i];
        if (!std::isfinite(g))
          throw std::runtime_error("nadam: non-finite gradient at parameter " +
                                   std::to_string(pi) + "[" + std::to_string(i) + "]");
        double& m = m_[pi][i];
        double& v = v_[pi][i];
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        const double v_hat = v / (1.0 - b2t);
        const double m_bar = b1 * m / (1.0 - b1t1) + (1.0 - b1) * g / (1.0 - b1t);
        p.values[i] -= cfg_.learning_rate * m_bar / (std::sqrt(v_hat) + cfg_.epsilon);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<TensorPtr> params_;
  std::vector<std::vector<double>> m_, v_;
  NadamConfig cfg_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double validation_split = 0.1;
  std::size_t patience = 5;  // early stop on validation loss
  NadamConfig optimizer;
  // stop once deterministic (infer-mode) accuracy over the training pairs
  // reaches this level; > 1 disables the check
  double stop_at_train_accuracy = 1.1;
  bool verbose = false;
};

struct EpochStats {
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  std::size_t best_epoch = 0;
};

namespace detail {

struct BatchEval {
  double loss = 0.0;
  std::size_t correct = 0;
};

inline BatchEval eval_predictions(const TensorPtr& pred, const std::vector<double>& targets) {
  BatchEval out;
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double p = std::min(std::max(pred->values[i], 1e-7), 1.0 - 1e-7);
    total += -(targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p));
    if ((p > 0.5) == (targets[i] > 0.5)) ++out.correct;
  }
  out.loss = total / static_cast<double>(targets.size());
  return out;
}

inline std::vector<std::vector<double>> snapshot_params(const RelatednessModel& m) {
  std::vector<std::vector<double>> snap;
  for (auto& [name, t] : m.named_parameters()) snap.push_back(t->values);
  for (auto* bn : m.batchnorms()) {
    snap.push_back(bn->running_mean);
    snap.push_back(bn->running_var);
  }
  return snap;
}

inline void restore_params(RelatednessModel& m, const std::vector<std::vector<double>>& snap) {
  std::size_t i = 0;
  for (auto& [name, t] : m.named_parameters()) t->values = snap[i++];
  for (auto* bn : m.batchnorms()) {
    bn->running_mean = snap[i++];
    bn->running_var = snap[i++];
  }
}

}  // namespace detail

// Deterministic accuracy at threshold 0.5 over a pair list (infer mode,
// batched). The overfit checks use this rather than the dropout-noised
// train-mode accuracy recorded in the history.
inline double evaluate_accuracy(const RelatednessModel& model,
                                const std::vector<TrainingPair>& pairs,
                                std::size_t batch_size = 64) {
  if (pairs.empty()) throw std::invalid_argument("evaluate_accuracy: no pairs");
  std::size_t correct = 0;
  Rng unused(0);
  for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, pairs.size() - start);
    std::vector<ScoreRequest> reqs;
    reqs.reserve(count);
    for (std::size_t b = 0; b < count; ++b)
      reqs.push_back({&pairs[start + b].candidate, &pairs[start + b].ctx});
    TensorPtr pred = forward_batch(model, reqs, Mode::infer, unused);
    for (std::size_t b = 0; b < count; ++b)
      if ((pred->values[b] > 0.5) == (pairs[start + b].target > 0.5)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

// Seeded minibatch training with the Nadam optimizer. Shuffles per epoch,
// records mean loss and accuracy-at-0.5 per epoch, retains the best
// validation snapshot and stops early when validation loss has not improved
// for `patience` epochs. Fully deterministic given (seed, data, options).
inline TrainHistory train(RelatednessModel& model, const std::vector<TrainingPair>& pairs,
                          const TrainOptions& opt, Rng rng) {
  if (opt.batch_size < 2) throw std::invalid_argument("train: batch_size must be >= 2");
  if (pairs.size() < opt.batch_size)
    throw std::invalid_argument("train: " + std::to_string(pairs.size()) +
                                " pairs for batch size " + std::to_string(opt.batch_size));
  if (opt.validation_split < 0.0 || opt.validation_split >= 1.0)
    throw std::invalid_argument("train: validation_split outside [0,1)");

  Rng shuffle_rng = rng.fork("shuffle");
  Rng dropout_rng = rng.fork("dropout");
  Rng split_rng = rng.fork("split");

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  split_rng.shuffle(order);
  const std::size_t val_count =
      static_cast<std::size_t>(std::floor(opt.validation_split * static_cast<double>(pairs.size())));
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + val_count);
  std::vector<std::size_t> train_idx(order.begin() + val_count, order.end());
  if (train_idx.size() < opt.batch_size)
    throw std::invalid_argument("train: validation split leaves fewer pairs than one batch");

  Nadam optimizer(model.trainable_parameters(), opt.optimizer);

  auto run_infer = [&](const std::vector<std::size_t>& idx) {
    std::vector<ScoreRequest> reqs;
    std::vector<double> targets;
    for (std::size_t i : idx) {
      reqs.push_back({&pairs[i].candidate, &pairs[i].ctx});
      targets.push_back(pairs[i].target);
    }
    Rng unused(0);
    TensorPtr pred = forward_batch(model, reqs, Mode::infer, unused);
    return detail::eval_predictions(pred, targets);
  };

  TrainHistory history;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_snapshot;
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    shuffle_rng.shuffle(train_idx);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0; start < train_idx.size(); start += opt.batch_size) {
      const std::size_t count = std::min(opt.batch_size, train_idx.size() - start);
      if (count < 2) break;  // a trailing singleton cannot be batch-normalized
      std::vector<ScoreRequest> reqs;
      std::vector<double> targets;
      reqs.reserve(count);
      for (std::size_t b = 0; b < count; ++b) {
        const TrainingPair& pair = pairs[train_idx[start + b]];
        reqs.push_back({&pair.candidate, &pair.ctx});
        targets.push_back(pair.target);
      }
      TensorPtr pred = forward_batch(model, reqs, Mode::train, dropout_rng);
      TensorPtr loss = bce_loss(pred, Tensor::make({count, 1}, std::vector<double>(targets)));
      optimizer.zero_grad();
      auto graph = ComputeGraph::trace(loss);
      graph.backward();
      optimizer.step();

      loss_sum += loss->values[0] * static_cast<double>(count);
      for (std::size_t b = 0; b < count; ++b)
        if ((pred->values[b] > 0.5) == (targets[b] > 0.5)) ++correct;
      seen += count;
    }

    EpochStats stats;
    stats.train_loss = loss_sum / static_cast<double>(seen);
    stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    if (!val_idx.empty()) {
      auto val = run_infer(val_idx);
      stats.val_loss = val.loss;
      stats.val_accuracy = static_cast<double>(val.correct) / static_cast<double>(val_idx.size());
    }
    history.epochs.push_back(stats);
    if (opt.verbose) {
      std::cerr << "epoch " << (epoch + 1) << ": loss " << stats.train_loss << " acc "
                << stats.train_accuracy;
      if (!val_idx.empty())
        std::cerr << " val_loss " << stats.val_loss << " val_acc " << stats.val_accuracy;
      std::cerr << "\n";
    }

    if (!val_idx.empty()) {
      if (stats.val_loss < best_val) {
        best_val = stats.val_loss;
        best_snapshot = detail::snapshot_params(model);
        history.best_epoch = epoch;
        since_best = 0;
      } else if (++since_best >= opt.patience) {
        break;
      }
    } else {
      history.best_epoch = epoch;
    }
    if (opt.stop_at_train_accuracy <= 1.0) {
      std::vector<TrainingPair> train_pairs;
      train_pairs.reserve(train_idx.size());
      for (std::size_t i : train_idx) train_pairs.push_back(pairs[i]);
      if (evaluate_accuracy(model, train_pairs) >= opt.stop_at_train_accuracy) break;
    }
  }

  if (!best_snapshot.empty()) detail::restore_params(model, best_snapshot);
  return history;
}

}  // namespace relrank

#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "relrank/rng.hpp"
#include "relrank/tensor.hpp"
#include "relrank/text.hpp"

namespace relrank {

enum class Mode { train, infer };

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

// Vocabulary-indexed word vectors. The matrix has one extra row beyond the
// word list: a shared unknown-word vector, initialized to the mean of all
// known vectors so out-of-vocabulary tokens land in a neutral spot.
struct EmbeddingTable {
  std::vector<std::string> words;                      // row i <-> words[i]
  std::unordered_map<std::string, std::size_t> index;  // lowercased word -> row
  TensorPtr matrix;                                    // (|V|+1) x d, last row = unk
  std::size_t dim = 0;
  std::size_t unk_index = 0;

  static EmbeddingTable build(std::vector<std::string> words, std::vector<double> flat,
                              std::size_t dim) {
    EmbeddingTable t;
    t.dim = dim;
    t.words = std::move(words);
    if (t.words.empty()) throw std::invalid_argument("embedding table: no words");
    if (flat.size() != t.words.size() * dim)
      throw std::invalid_argument("embedding table: value count does not match |V| x d");
    std::vector<double> unk(dim, 0.0);
    for (std::size_t i = 0; i < t.words.size(); ++i)
      for (std::size_t j = 0; j < dim; ++j) unk[j] += flat[i * dim + j];
    for (double& v : unk) v /= static_cast<double>(t.words.size());
    flat.insert(flat.end(), unk.begin(), unk.end());
    t.matrix = Tensor::matrix(t.words.size() + 1, dim, std::move(flat));
    t.unk_index = t.words.size();
    for (std::size_t i = 0; i < t.words.size(); ++i) t.index.emplace(to_lower(t.words[i]), i);
    return t;
  }

  std::optional<std::size_t> find(const std::string& word) const {
    auto it = index.find(to_lower(word));
    if (it == index.end()) return std::nullopt;
    return it->second;
  }

  std::size_t lookup(const std::string& word) const {
    auto i = find(word);
    return i ? *i : unk_index;
  }

  bool has(const std::string& word) const { return find(word).has_value(); }

  std::size_t vocab_size() const { return words.size(); }
};

// Sentence matrix: one embedding row per token, unknown tokens mapped to
// the shared unk row. Lookup is graph-linked, so embeddings fine-tune.
inline TensorPtr embed(const std::vector<std::string>& tokens, const EmbeddingTable& table) {
  if (tokens.empty()) throw std::invalid_argument("embed: empty token list");
  std::vector<TensorPtr> rows;
  rows.reserve(tokens.size());
  for (const auto& tok : tokens) rows.push_back(row(table.matrix, table.lookup(tok)));
  return stack_rows(rows);
}

// ---------------------------------------------------------------------------
// Convolution over token windows
// ---------------------------------------------------------------------------

// One conv channel: j kernels of width k over d-dimensional embeddings.
// Kernels are stored flattened as a (k*d) x j matrix so a whole sentence is
// one im2row + one matmul.
struct ConvChannel {
  std::size_t width = 1;  // k
  TensorPtr kernels;      // (k*d) x j
  TensorPtr bias;         // j

  std::size_t kernel_count() const { return bias->size(); }
  std::size_t embedding_dim() const { return kernels->rows() / width; }
};

// m_i = relu(w_i . c + b) for each window of k consecutive token rows;
// output row i, column j' is kernel j' applied at position i.
inline TensorPtr conv_channel(const TensorPtr& x, const ConvChannel& ch) {
  if (x->rank() != 2 || x->cols() != ch.embedding_dim())
    throw std::invalid_argument("conv_channel: input " + shape_str(x->shape) +
                                " does not match kernel dim " + std::to_string(ch.embedding_dim()));
  if (x->rows() < ch.width)
    throw std::invalid_argument("conv_channel: sequence too short, " + std::to_string(x->rows()) +
                                " tokens for kernel width " + std::to_string(ch.width) +
                                " (pad the input first)");
  return relu(add_rowwise(matmul(windows(x, ch.width), ch.kernels), ch.bias));
}

// Convolution with masking: any window that touches a masked (padding)
// position yields exactly zero, so padding content can never influence the
// output. mask[i] == true marks position i as padding.
inline TensorPtr masked_conv(const TensorPtr& x, const std::vector<bool>& mask,
                             const ConvChannel& ch) {
  if (mask.size() != x->rows())
    throw std::invalid_argument("masked_conv: mask length " + std::to_string(mask.size()) +
                                " for " + std::to_string(x->rows()) + " positions");
  TensorPtr conv = conv_channel(x, ch);
  const std::size_t n = x->rows() - ch.width + 1;
  std::vector<double> keep(n, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = i; p < i + ch.width; ++p)
      if (mask[p]) {
        keep[i] = 0.0;
        break;
      }
  return scale_rows(conv, keep);
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

// Four gate blocks (input, forget, output, candidate), each with input and
// recurrent weights plus a bias.
struct LstmParams {
  TensorPtr wx_i, wh_i, b_i;
  TensorPtr wx_f, wh_f, b_f;
  TensorPtr wx_o, wh_o, b_o;
  TensorPtr wx_g, wh_g, b_g;

  std::size_t hidden() const { return b_i->size(); }
  std::size_t input_dim() const { return wx_i->rows(); }
};

// Standard recurrence with sigmoid gates and tanh candidate. Returns all
// hidden states as a T x H matrix: attention pooling consumes the full
// sequence, the no-attention variant takes the last row. The four gate
// blocks are packed into one matmul pair per step.
inline TensorPtr lstm_forward(const TensorPtr& seq, const LstmParams& p) {
  if (seq->rank() != 2 || seq->cols() != p.input_dim())
    throw std::invalid_argument("lstm_forward: input " + shape_str(seq->shape) +
                                " does not match weight dim " + std::to_string(p.input_dim()));
  const std::size_t steps = seq->rows(), hid = p.hidden();
  TensorPtr wx = concat_cols({p.wx_i, p.wx_f, p.wx_o, p.wx_g});
  TensorPtr wh = concat_cols({p.wh_i, p.wh_f, p.wh_o, p.wh_g});
  TensorPtr bias = concat_vec({p.b_i, p.b_f, p.b_o, p.b_g});
  TensorPtr h = Tensor::make({1, hid});
  TensorPtr c = Tensor::make({1, hid});
  std::vector<TensorPtr> states;
  states.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    TensorPtr z = add_rowwise(add(matmul(slice_rows(seq, t, 1), wx), matmul(h, wh)), bias);
    TensorPtr ig = sigmoid(slice_cols(z, 0, hid));
    TensorPtr fg = sigmoid(slice_cols(z, hid, hid));
    TensorPtr og = sigmoid(slice_cols(z, 2 * hid, hid));
    TensorPtr cand = tanh(slice_cols(z, 3 * hid, hid));
    c = add(mul(fg, c), mul(ig, cand));
    h = mul(og, tanh(c));
    states.push_back(h);
  }
  return concat_rows(states);
}

// ---------------------------------------------------------------------------
// FFN attention pooling
// ---------------------------------------------------------------------------

struct AttentionParams {
  TensorPtr w_a;  // H x H
  TensorPtr v_a;  // H

  std::size_t hidden() const { return v_a->size(); }
};

struct AttentionOutput {
  TensorPtr context;  // H
  TensorPtr weights;  // T, sums to 1
};

// e_t = tanh(h_t W_a) v_a^T, alpha = softmax(e), context = sum_t alpha_t h_t.
// Each e_t depends only on its own state, so the pooled vector is invariant
// to permutations of the sequence.
inline AttentionOutput attention_pool(const TensorPtr& states, const AttentionParams& a) {
  if (states->rank() != 2 || states->cols() != a.hidden())
    throw std::invalid_argument("attention_pool: states " + shape_str(states->shape) +
                                " do not match attention dim " + std::to_string(a.hidden()));
  TensorPtr scores = flatten(matmul(tanh(matmul(states, a.w_a)), as_col(a.v_a)));
  TensorPtr alpha = softmax_norm(scores);
  TensorPtr context = flatten(matmul(as_row(alpha), states));
  return {context, alpha};
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

struct BatchNormParams {
  TensorPtr gamma;  // scale per feature
  TensorPtr beta;   // shift per feature
  // Exponential-average statistics used at inference. Mutated only by
  // train-mode forward passes, which are single-threaded by contract;
  // inference reads them through a const model.
  mutable std::vector<double> running_mean, running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;

  static BatchNormParams create(std::size_t features) {
    BatchNormParams p;
    p.gamma = Tensor::make({features}, std::vector<double>(features, 1.0));
    p.beta = Tensor::make({features}, std::vector<double>(features, 0.0));
    p.running_mean.assign(features, 0.0);
    p.running_var.assign(features, 1.0);
    return p;
  }

  std::size_t features() const { return gamma->size(); }
};

// Train mode normalizes by batch statistics (and folds them into the
// running averages); infer mode normalizes by the running averages.
inline TensorPtr batch_norm(const TensorPtr& x, const BatchNormParams& p, Mode mode) {
  if (x->rank() != 2 || x->cols() != p.features())
    throw std::invalid_argument("batch_norm: input " + shape_str(x->shape) + " for " +
                                std::to_string(p.features()) + " features");
  if (mode == Mode::train) {
    if (x->rows() < 2)
      throw std::invalid_argument("batch_norm: train mode needs a batch of at least 2, got " +
                                  std::to_string(x->rows()));
    TensorPtr mu = mean_rows(x);
    TensorPtr centered = add_rowwise(x, affine(mu, -1.0, 0.0));
    TensorPtr var = mean_rows(mul(centered, centered));
    TensorPtr inv_std = pow_const(affine(var, 1.0, p.epsilon), -0.5);
    for (std::size_t j = 0; j < p.features(); ++j) {
      p.running_mean[j] = (1.0 - p.momentum) * p.running_mean[j] + p.momentum * mu->values[j];
      p.running_var[j] = (1.0 - p.momentum) * p.running_var[j] + p.momentum * var->values[j];
    }
    return add_rowwise(mul_rowwise(mul_rowwise(centered, inv_std), p.gamma), p.beta);
  }
  std::vector<double> neg_mean(p.features()), inv_std(p.features());
  for (std::size_t j = 0; j < p.features(); ++j) {
    neg_mean[j] = -p.running_mean[j];
    inv_std[j] = 1.0 / std::sqrt(p.running_var[j] + p.epsilon);
  }
  TensorPtr centered = add_rowwise(x, Tensor::vec(std::move(neg_mean)));
  TensorPtr scaled = mul_rowwise(centered, Tensor::vec(std::move(inv_std)));
  return add_rowwise(mul_rowwise(scaled, p.gamma), p.beta);
}

// ---------------------------------------------------------------------------
// Dropout and dense
// ---------------------------------------------------------------------------

// Inverted dropout: train mode zeroes entries with probability `rate` and
// scales survivors by 1/(1-rate); infer mode is the identity.
inline TensorPtr dropout(const TensorPtr& x, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout: rate " + std::to_string(rate) + " outside [0,1)");
  if (mode == Mode::infer || rate == 0.0) return x;
  const double scale = 1.0 / (1.0 - rate);
  auto mask = Tensor::make(x->shape);
  for (auto& m : mask->values) m = rng.bernoulli(rate) ? 0.0 : scale;
  return mul(x, mask);
}

enum class Activation { linear, relu, tanh, sigmoid };

inline TensorPtr dense(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                       Activation act = Activation::linear) {
  TensorPtr z = add_rowwise(matmul(x, w), b);
  switch (act) {
    case Activation::linear: return z;
    case Activation::relu: return relu(z);
    case Activation::tanh: return tanh(z);
    case Activation::sigmoid: return sigmoid(z);
  }
  throw std::logic_error("dense: unknown activation");
}

}  // namespace relrank

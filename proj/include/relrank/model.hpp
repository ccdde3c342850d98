#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "relrank/layers.hpp"
#include "relrank/rng.hpp"
#include "relrank/tensor.hpp"
#include "relrank/text.hpp"

namespace relrank {

// ---------------------------------------------------------------------------
// Inputs: visual context and candidate words
// ---------------------------------------------------------------------------

struct WeightedLabel {
  std::string label;
  double confidence = 1.0;
};

// One image's visual context: object labels, place labels and a caption,
// each produced upstream by a separate classifier.
struct ContextBundle {
  std::vector<WeightedLabel> objects;
  std::vector<WeightedLabel> places;
  std::vector<std::string> caption;

  bool empty() const { return objects.empty() && places.empty() && caption.empty(); }
};

// Context token sequence fed to the convolution subnetworks:
// objects, then places, then the caption.
inline std::vector<std::string> context_tokens(const ContextBundle& ctx) {
  std::vector<std::string> out;
  out.reserve(ctx.objects.size() + ctx.places.size() + ctx.caption.size());
  for (const auto& o : ctx.objects) out.push_back(to_lower(o.label));
  for (const auto& p : ctx.places) out.push_back(to_lower(p.label));
  for (const auto& c : ctx.caption) out.push_back(to_lower(c));
  return out;
}

// ---------------------------------------------------------------------------
// Overlap layer
// ---------------------------------------------------------------------------

// Frequency counts of context terms across the three sources, plus an
// indicator for the candidate word appearing anywhere in the context. A
// term observed by o sources has count o (duplicates within one source do
// not inflate the count).
struct OverlapVector {
  std::map<std::string, int> counts;
  bool candidate_in_context = false;

  // Hashed bag of `buckets` counts followed by the indicator.
  std::vector<double> to_features(std::size_t buckets) const {
    std::vector<double> f(buckets + 1, 0.0);
    for (const auto& [term, count] : counts) f[fnv1a(term) % buckets] += count;
    f[buckets] = candidate_in_context ? 1.0 : 0.0;
    return f;
  }
};

inline OverlapVector overlap_features(const std::string& candidate, const ContextBundle& ctx) {
  OverlapVector out;
  std::set<std::string> sources[3];
  for (const auto& o : ctx.objects) sources[0].insert(to_lower(o.label));
  for (const auto& p : ctx.places) sources[1].insert(to_lower(p.label));
  for (const auto& c : ctx.caption) sources[2].insert(to_lower(c));
  for (const auto& src : sources)
    for (const auto& term : src) out.counts[term] += 1;
  const std::string cand = to_lower(candidate);
  for (const auto& src : sources)
    if (src.count(cand)) out.candidate_in_context = true;
  return out;
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

enum class Variant { fdclstm, fdclstm_at };

inline std::string variant_name(Variant v) {
  return v == Variant::fdclstm ? "fdclstm" : "fdclstm-at";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "fdclstm") return Variant::fdclstm;
  if (s == "fdclstm-at" || s == "fdclstm_at") return Variant::fdclstm_at;
  throw std::invalid_argument("unknown variant '" + s + "' (expected fdclstm or fdclstm-at)");
}

struct ModelConfig {
  Variant variant = Variant::fdclstm_at;
  std::array<std::size_t, 4> kernel_widths{3, 3, 5, 8};
  std::size_t kernels_per_channel = 64;  // j
  std::size_t embedding_dim = 0;         // d; 0 means adopt the table's dim at build
  std::size_t lstm_hidden = 64;          // H
  std::vector<std::size_t> mlp_sizes{128, 64};
  double dropout_rate = 0.7;
  std::size_t max_candidate_len = 4;
  std::size_t candidate_kernel_width = 1;
  std::size_t max_context_len = 32;
  std::size_t overlap_buckets = 1024;
  std::size_t overlap_proj = 32;

  // The attention variant normalizes every conv feature map; the plain
  // variant keeps BN only between the MLP layers.
  bool bn_after_conv() const { return variant == Variant::fdclstm_at; }

  std::size_t max_kernel_width() const {
    return *std::max_element(kernel_widths.begin(), kernel_widths.end());
  }

  void validate() const {
    if (kernels_per_channel < 1) throw std::invalid_argument("config: kernels_per_channel < 1");
    if (lstm_hidden < 1) throw std::invalid_argument("config: lstm_hidden < 1");
    for (std::size_t k : kernel_widths)
      if (k < 1) throw std::invalid_argument("config: kernel width < 1");
    if (max_context_len < max_kernel_width())
      throw std::invalid_argument("config: max_context_len " + std::to_string(max_context_len) +
                                  " shorter than widest kernel " +
                                  std::to_string(max_kernel_width()));
    if (candidate_kernel_width < 1 || max_candidate_len < candidate_kernel_width)
      throw std::invalid_argument("config: candidate channel needs width <= max_candidate_len");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw std::invalid_argument("config: dropout_rate outside [0,1)");
    if (overlap_buckets < 1) throw std::invalid_argument("config: overlap_buckets < 1");
    if (overlap_proj < 1) throw std::invalid_argument("config: overlap_proj < 1");
  }
};

// ---------------------------------------------------------------------------
// The relatedness model
// ---------------------------------------------------------------------------

struct DenseLayer {
  TensorPtr w, b;
};

// All learned parameters of the dual-subnetwork architecture. Subnetwork A
// is convolution-only over the context sequence; subnetwork B runs the same
// four channel widths into an LSTM, pooled by attention in the fdclstm-at
// variant (final state otherwise). The candidate word has its own masked
// conv channel so padding can never leak into the score.
struct RelatednessModel {
  ModelConfig config;
  EmbeddingTable embedding;
  bool freeze_embedding = false;

  ConvChannel candidate_conv;
  std::array<ConvChannel, 4> conv_a;
  std::array<ConvChannel, 4> conv_b;
  // fdclstm-at only: one BN per conv channel, order: candidate, A0..A3, B0..B3
  std::vector<BatchNormParams> conv_bn;
  LstmParams lstm;
  std::optional<AttentionParams> attention;
  DenseLayer overlap_proj;
  BatchNormParams merge_bn;
  std::vector<DenseLayer> mlp;
  std::vector<BatchNormParams> mlp_bn;
  DenseLayer head;

  std::size_t candidate_map_rows() const {
    return config.max_candidate_len - config.candidate_kernel_width + 1;
  }

  std::size_t context_map_rows(std::size_t channel) const {
    return config.max_context_len - config.kernel_widths[channel] + 1;
  }

  std::size_t lstm_steps() const { return config.max_context_len - config.max_kernel_width() + 1; }

  // Width of the merged feature row fed to the MLP stack.
  std::size_t merge_width() const {
    std::size_t a = 0;
    for (std::size_t ch = 0; ch < 4; ++ch)
      a += context_map_rows(ch) * config.kernels_per_channel;
    return a + config.lstm_hidden + candidate_map_rows() * config.kernels_per_channel +
           config.overlap_proj;
  }

  std::vector<std::pair<std::string, TensorPtr>> named_parameters() const {
    std::vector<std::pair<std::string, TensorPtr>> out;
    out.emplace_back("embedding", embedding.matrix);
    auto conv = [&](const std::string& name, const ConvChannel& ch) {
      out.emplace_back(name + ".kernels", ch.kernels);
      out.emplace_back(name + ".bias", ch.bias);
    };
    conv("candidate_conv", candidate_conv);
    for (std::size_t i = 0; i < 4; ++i) conv("conv_a." + std::to_string(i), conv_a[i]);
    for (std::size_t i = 0; i < 4; ++i) conv("conv_b." + std::to_string(i), conv_b[i]);
    auto gate = [&](const std::string& name, const TensorPtr& wx, const TensorPtr& wh,
                    const TensorPtr& b) {
      out.emplace_back("lstm." + name + ".wx", wx);
      out.emplace_back("lstm." + name + ".wh", wh);
      out.emplace_back("lstm." + name + ".b", b);
    };
    gate("input", lstm.wx_i, lstm.wh_i, lstm.b_i);
    gate("forget", lstm.wx_f, lstm.wh_f, lstm.b_f);
    gate("output", lstm.wx_o, lstm.wh_o, lstm.b_o);
    gate("candidate", lstm.wx_g, lstm.wh_g, lstm.b_g);
    if (attention) {
      out.emplace_back("attention.w_a", attention->w_a);
      out.emplace_back("attention.v_a", attention->v_a);
    }
    out.emplace_back("overlap_proj.w", overlap_proj.w);
    out.emplace_back("overlap_proj.b", overlap_proj.b);
    auto bn = [&](const std::string& name, const BatchNormParams& p) {
      out.emplace_back(name + ".gamma", p.gamma);
      out.emplace_back(name + ".beta", p.beta);
    };
    for (std::size_t i = 0; i < conv_bn.size(); ++i) bn("conv_bn." + std::to_string(i), conv_bn[i]);
    bn("merge_bn", merge_bn);
    for (std::size_t i = 0; i < mlp.size(); ++i) {
      out.emplace_back("mlp." + std::to_string(i) + ".w", mlp[i].w);
      out.emplace_back("mlp." + std::to_string(i) + ".b", mlp[i].b);
      bn("mlp_bn." + std::to_string(i), mlp_bn[i]);
    }
    out.emplace_back("head.w", head.w);
    out.emplace_back("head.b", head.b);
    return out;
  }

  std::vector<TensorPtr> trainable_parameters() const {
    std::vector<TensorPtr> out;
    for (auto& [name, t] : named_parameters()) {
      if (name == "embedding" && freeze_embedding) continue;
      out.push_back(t);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t->size();
    return n;
  }

  const std::vector<BatchNormParams*> batchnorms() const {
    std::vector<BatchNormParams*> out;
    for (auto& b : conv_bn) out.push_back(const_cast<BatchNormParams*>(&b));
    out.push_back(const_cast<BatchNormParams*>(&merge_bn));
    for (auto& b : mlp_bn) out.push_back(const_cast<BatchNormParams*>(&b));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace detail {

inline void init_uniform(const TensorPtr& t, Rng& rng, double lo = -0.08, double hi = 0.08) {
  for (auto& v : t->values) v = rng.uniform(lo, hi);
}

inline void init_he(const TensorPtr& t, Rng& rng, std::size_t fan_in) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t->values) v = rng.normal(0.0, stddev);
}

inline ConvChannel make_conv(std::size_t width, std::size_t dim, std::size_t kernels) {
  ConvChannel ch;
  ch.width = width;
  ch.kernels = Tensor::make({width * dim, kernels}, true);
  ch.bias = Tensor::make({kernels}, true);
  return ch;
}

inline DenseLayer make_dense(std::size_t in, std::size_t out) {
  return {Tensor::make({in, out}, true), Tensor::make({out}, true)};
}

inline BatchNormParams make_bn(std::size_t features) {
  auto p = BatchNormParams::create(features);
  p.gamma->requires_grad = true;
  p.beta->requires_grad = true;
  return p;
}

// Allocates every tensor at its final shape with zero values; build_model
// and load_model fill them in.
inline RelatednessModel make_skeleton(ModelConfig cfg, EmbeddingTable embedding) {
  cfg.validate();
  if (cfg.embedding_dim == 0) cfg.embedding_dim = embedding.dim;
  if (cfg.embedding_dim != embedding.dim)
    throw std::invalid_argument("build_model: config dimension " +
                                std::to_string(cfg.embedding_dim) +
                                " does not match embedding dimension " +
                                std::to_string(embedding.dim));
  RelatednessModel m;
  m.config = cfg;
  m.embedding = std::move(embedding);
  const std::size_t d = cfg.embedding_dim, j = cfg.kernels_per_channel;

  m.candidate_conv = make_conv(cfg.candidate_kernel_width, d, j);
  for (std::size_t i = 0; i < 4; ++i) {
    m.conv_a[i] = make_conv(cfg.kernel_widths[i], d, j);
    m.conv_b[i] = make_conv(cfg.kernel_widths[i], d, j);
  }
  if (cfg.bn_after_conv()) {
    for (std::size_t i = 0; i < 9; ++i) {
      auto bn = make_bn(j);
      // masked windows leave whole feature maps at zero, so conv-side batch
      // variance can collapse; the wider epsilon keeps 1/sqrt(var+eps) tame
      bn.epsilon = 1e-3;
      m.conv_bn.push_back(std::move(bn));
    }
  }

  const std::size_t lstm_in = 4 * j, hid = cfg.lstm_hidden;
  auto gate = [&](TensorPtr& wx, TensorPtr& wh, TensorPtr& b) {
    wx = Tensor::make({lstm_in, hid}, true);
    wh = Tensor::make({hid, hid}, true);
    b = Tensor::make({hid}, true);
  };
  gate(m.lstm.wx_i, m.lstm.wh_i, m.lstm.b_i);
  gate(m.lstm.wx_f, m.lstm.wh_f, m.lstm.b_f);
  gate(m.lstm.wx_o, m.lstm.wh_o, m.lstm.b_o);
  gate(m.lstm.wx_g, m.lstm.wh_g, m.lstm.b_g);

  if (cfg.variant == Variant::fdclstm_at) {
    AttentionParams a;
    a.w_a = Tensor::make({hid, hid}, true);
    a.v_a = Tensor::make({hid}, true);
    m.attention = std::move(a);
  }

  m.overlap_proj = make_dense(cfg.overlap_buckets + 1, cfg.overlap_proj);
  m.merge_bn = make_bn(m.merge_width());
  std::size_t prev = m.merge_width();
  for (std::size_t size : cfg.mlp_sizes) {
    m.mlp.push_back(make_dense(prev, size));
    m.mlp_bn.push_back(make_bn(size));
    prev = size;
  }
  m.head = make_dense(prev, 1);
  return m;
}

}  // namespace detail

// Deterministic initialization given the seed stream: conv kernels are
// He-initialized, the LSTM forget bias starts at 1, remaining weights are
// uniform in [-0.08, 0.08] and biases zero.
inline RelatednessModel build_model(const ModelConfig& cfg, EmbeddingTable embedding, Rng rng,
                                    bool freeze_embedding = false) {
  // the caller's table may be shared; the model owns and fine-tunes a copy
  EmbeddingTable owned = embedding;
  owned.matrix = Tensor::make(embedding.matrix->shape, embedding.matrix->values, true);
  RelatednessModel m = detail::make_skeleton(cfg, std::move(owned));
  m.freeze_embedding = freeze_embedding;

  Rng init = rng.fork("init");
  auto conv = [&](ConvChannel& ch) {
    detail::init_he(ch.kernels, init, ch.kernels->rows());
    // bias stays zero
  };
  conv(m.candidate_conv);
  for (auto& ch : m.conv_a) conv(ch);
  for (auto& ch : m.conv_b) conv(ch);

  auto gate = [&](TensorPtr& wx, TensorPtr& wh, TensorPtr& b, double bias_init) {
    detail::init_uniform(wx, init);
    detail::init_uniform(wh, init);
    std::fill(b->values.begin(), b->values.end(), bias_init);
  };
  gate(m.lstm.wx_i, m.lstm.wh_i, m.lstm.b_i, 0.0);
  gate(m.lstm.wx_f, m.lstm.wh_f, m.lstm.b_f, 1.0);  // forget gate opens
  gate(m.lstm.wx_o, m.lstm.wh_o, m.lstm.b_o, 0.0);
  gate(m.lstm.wx_g, m.lstm.wh_g, m.lstm.b_g, 0.0);

  if (m.attention) {
    detail::init_uniform(m.attention->w_a, init);
    detail::init_uniform(m.attention->v_a, init);
  }
  detail::init_uniform(m.overlap_proj.w, init);
  for (auto& layer : m.mlp) detail::init_uniform(layer.w, init);
  detail::init_uniform(m.head.w, init);

  m.embedding.matrix->requires_grad = !m.freeze_embedding;
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

// One scoring request; the referenced strings/bundles must outlive the call.
struct ScoreRequest {
  const std::string* candidate;
  const ContextBundle* ctx;
};

namespace detail {

// Embeds tokens into a fixed-length matrix; rows beyond the token count are
// zero padding and flagged in the mask (true = padding).
inline std::pair<TensorPtr, std::vector<bool>> embed_padded(const std::vector<std::string>& tokens,
                                                            const EmbeddingTable& table,
                                                            std::size_t len) {
  std::vector<TensorPtr> rows;
  rows.reserve(len);
  std::vector<bool> mask(len, false);
  TensorPtr pad;  // shared constant zero row
  for (std::size_t i = 0; i < len; ++i) {
    if (i < tokens.size()) {
      rows.push_back(row(table.matrix, table.lookup(tokens[i])));
    } else {
      if (!pad) pad = Tensor::make({table.dim});
      rows.push_back(pad);
      mask[i] = true;
    }
  }
  return {stack_rows(rows), mask};
}

}  // namespace detail

// Scores a batch of (candidate, context) pairs; returns a B x 1 tensor of
// sigmoid outputs in (0,1), graph-connected to every trainable parameter.
// Train mode requires B >= 2 (batch normalization); infer mode accepts any
// batch and is deterministic.
inline TensorPtr forward_batch(const RelatednessModel& m, const std::vector<ScoreRequest>& batch,
                               Mode mode, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("forward_batch: empty batch");
  const ModelConfig& cfg = m.config;
  const std::size_t n = batch.size();

  std::vector<TensorPtr> cand_mats(n), ctx_mats(n);
  std::vector<std::vector<bool>> cand_masks(n), ctx_masks(n);
  std::vector<TensorPtr> overlap_raw(n);

  for (std::size_t e = 0; e < n; ++e) {
    const std::string& cand = *batch[e].candidate;
    const ContextBundle& ctx = *batch[e].ctx;
    if (cand.empty()) throw std::invalid_argument("forward_batch: empty candidate word");

    std::vector<std::string> cand_tokens = tokenize(cand);
    if (cand_tokens.empty()) cand_tokens.push_back(to_lower(cand));
    if (cand_tokens.size() > cfg.max_candidate_len) {
      std::cerr << "warning: candidate '" << cand << "' truncated to " << cfg.max_candidate_len
                << " tokens\n";
      cand_tokens.resize(cfg.max_candidate_len);
    }
    std::tie(cand_mats[e], cand_masks[e]) =
        detail::embed_padded(cand_tokens, m.embedding, cfg.max_candidate_len);

    std::vector<std::string> ctx_tokens = context_tokens(ctx);
    if (ctx_tokens.size() > cfg.max_context_len) ctx_tokens.resize(cfg.max_context_len);
    std::tie(ctx_mats[e], ctx_masks[e]) =
        detail::embed_padded(ctx_tokens, m.embedding, cfg.max_context_len);

    overlap_raw[e] = as_row(Tensor::vec(overlap_features(cand, ctx).to_features(cfg.overlap_buckets)));
  }

  // Each channel convolves the whole batch as one stacked window matrix:
  // windows touching masked positions come out exactly zero, and the
  // attention variant batch-normalizes the stacked map before unstacking.
  auto conv_over_batch = [&](const ConvChannel& ch, const std::vector<TensorPtr>& mats,
                             const std::vector<std::vector<bool>>& masks,
                             const BatchNormParams* bn) {
    const std::size_t wlen = mats[0]->rows() - ch.width + 1;
    std::vector<TensorPtr> wins(n);
    std::vector<double> keep;
    keep.reserve(n * wlen);
    for (std::size_t e = 0; e < n; ++e) {
      wins[e] = windows(mats[e], ch.width);
      for (std::size_t i = 0; i < wlen; ++i) {
        double k = 1.0;
        for (std::size_t p = i; p < i + ch.width; ++p)
          if (masks[e][p]) {
            k = 0.0;
            break;
          }
        keep.push_back(k);
      }
    }
    TensorPtr stacked =
        scale_rows(relu(add_rowwise(matmul(concat_rows(wins), ch.kernels), ch.bias)), keep);
    if (bn) stacked = batch_norm(stacked, *bn, mode);
    std::vector<TensorPtr> out(n);
    for (std::size_t e = 0; e < n; ++e) out[e] = slice_rows(stacked, e * wlen, wlen);
    return out;
  };

  const bool with_bn = cfg.bn_after_conv();
  std::vector<TensorPtr> cand_maps =
      conv_over_batch(m.candidate_conv, cand_mats, cand_masks, with_bn ? &m.conv_bn[0] : nullptr);
  std::array<std::vector<TensorPtr>, 4> a_maps, b_maps;  // [channel][example]
  for (std::size_t ch = 0; ch < 4; ++ch) {
    a_maps[ch] =
        conv_over_batch(m.conv_a[ch], ctx_mats, ctx_masks, with_bn ? &m.conv_bn[1 + ch] : nullptr);
    b_maps[ch] =
        conv_over_batch(m.conv_b[ch], ctx_mats, ctx_masks, with_bn ? &m.conv_bn[5 + ch] : nullptr);
  }

  const std::size_t steps = m.lstm_steps();
  std::vector<TensorPtr> merged(n);
  for (std::size_t e = 0; e < n; ++e) {
    std::vector<TensorPtr> a_parts;
    for (std::size_t ch = 0; ch < 4; ++ch) a_parts.push_back(as_row(flatten(a_maps[ch][e])));
    TensorPtr a_flat = concat_cols(a_parts);

    std::vector<TensorPtr> b_parts;
    for (std::size_t ch = 0; ch < 4; ++ch) b_parts.push_back(slice_rows(b_maps[ch][e], 0, steps));
    TensorPtr states = lstm_forward(concat_cols(b_parts), m.lstm);
    TensorPtr b_vec = m.attention ? as_row(attention_pool(states, *m.attention).context)
                                  : slice_rows(states, steps - 1, 1);

    TensorPtr cand_flat = as_row(flatten(cand_maps[e]));
    TensorPtr overlap = dense(overlap_raw[e], m.overlap_proj.w, m.overlap_proj.b, Activation::relu);
    merged[e] = concat_cols({a_flat, b_vec, cand_flat, overlap});
  }

  TensorPtr h = batch_norm(concat_rows(merged), m.merge_bn, mode);
  for (std::size_t i = 0; i < m.mlp.size(); ++i) {
    h = dense(h, m.mlp[i].w, m.mlp[i].b);
    h = batch_norm(h, m.mlp_bn[i], mode);
    h = relu(h);
    h = dropout(h, cfg.dropout_rate, mode, rng);
  }
  return dense(h, m.head.w, m.head.b, Activation::sigmoid);
}

// Relatedness score of one candidate against one context; deterministic,
// safe to call concurrently on a trained (immutable) model.
inline double score(const RelatednessModel& m, const std::string& candidate,
                    const ContextBundle& ctx) {
  Rng unused(0);
  TensorPtr p = forward_batch(m, {{&candidate, &ctx}}, Mode::infer, unused);
  return p->values[0];
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kModelMagic[8] = {'R', 'E', 'L', 'R', 'A', 'N', 'K', '\n'};
constexpr std::uint32_t kModelVersion = 1;

inline std::uint64_t vocab_hash(const std::vector<std::string>& words) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& w : words) {
    for (char c : w) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    h ^= static_cast<unsigned char>('\n');
    h *= 1099511628211ull;
  }
  return h;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {
      {"variant", variant_name(c.variant)},
      {"kernel_widths", c.kernel_widths},
      {"kernels_per_channel", c.kernels_per_channel},
      {"embedding_dim", c.embedding_dim},
      {"lstm_hidden", c.lstm_hidden},
      {"mlp_sizes", c.mlp_sizes},
      {"dropout_rate", c.dropout_rate},
      {"max_candidate_len", c.max_candidate_len},
      {"candidate_kernel_width", c.candidate_kernel_width},
      {"max_context_len", c.max_context_len},
      {"overlap_buckets", c.overlap_buckets},
      {"overlap_proj", c.overlap_proj},
  };
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.variant = parse_variant(j.at("variant").get<std::string>());
  auto widths = j.at("kernel_widths").get<std::vector<std::size_t>>();
  if (widths.size() != 4) throw std::runtime_error("model file: kernel_widths must have 4 entries");
  std::copy(widths.begin(), widths.end(), c.kernel_widths.begin());
  c.kernels_per_channel = j.at("kernels_per_channel").get<std::size_t>();
  c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  c.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
  c.mlp_sizes = j.at("mlp_sizes").get<std::vector<std::size_t>>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.max_candidate_len = j.at("max_candidate_len").get<std::size_t>();
  c.candidate_kernel_width = j.at("candidate_kernel_width").get<std::size_t>();
  c.max_context_len = j.at("max_context_len").get<std::size_t>();
  c.overlap_buckets = j.at("overlap_buckets").get<std::size_t>();
  c.overlap_proj = j.at("overlap_proj").get<std::size_t>();
  return c;
}

inline void write_doubles(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_doubles(std::istream& is, std::vector<double>& v) {
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!is) throw std::runtime_error("model file: truncated parameter block");
}

}  // namespace detail

// Self-describing binary container: magic, version, JSON header (config,
// vocabulary, parameter shapes), then raw float64 blocks. Round-trips are
// bit-exact.
inline void save_model(const RelatednessModel& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_model: cannot open '" + path + "'");

  nlohmann::json header;
  header["config"] = detail::config_to_json(m.config);
  header["freeze_embedding"] = m.freeze_embedding;
  std::ostringstream hash;
  hash << std::hex << detail::vocab_hash(m.embedding.words);
  header["embedding"] = {{"dim", m.embedding.dim},
                         {"words", m.embedding.words},
                         {"hash", hash.str()}};
  nlohmann::json params = nlohmann::json::array();
  for (auto& [name, t] : m.named_parameters())
    params.push_back({{"name", name}, {"shape", t->shape}});
  header["params"] = params;
  nlohmann::json bns = nlohmann::json::array();
  auto bn_list = m.batchnorms();
  for (std::size_t i = 0; i < bn_list.size(); ++i)
    bns.push_back({{"features", bn_list[i]->features()},
                   {"epsilon", bn_list[i]->epsilon},
                   {"momentum", bn_list[i]->momentum}});
  header["batchnorm"] = bns;

  const std::string htext = header.dump();
  os.write(detail::kModelMagic, sizeof(detail::kModelMagic));
  std::uint32_t version = detail::kModelVersion;
  os.write(reinterpret_cast<const char*>(&version), sizeof(version));
  std::uint64_t hlen = htext.size();
  os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  os.write(htext.data(), static_cast<std::streamsize>(htext.size()));

  for (auto& [name, t] : m.named_parameters()) detail::write_doubles(os, t->values);
  for (auto* bn : bn_list) {
    detail::write_doubles(os, bn->running_mean);
    detail::write_doubles(os, bn->running_var);
  }
  if (!os) throw std::runtime_error("save_model: write failed for '" + path + "'");
}

inline RelatednessModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_model: cannot open '" + path + "'");

  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kModelMagic, sizeof(magic)) != 0)
    throw std::runtime_error("load_model: '" + path + "' is not a relrank model file");
  std::uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!is || version != detail::kModelVersion)
    throw std::runtime_error("load_model: unsupported model version " + std::to_string(version));
  std::uint64_t hlen = 0;
  is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!is) throw std::runtime_error("load_model: truncated header");
  std::string htext(hlen, '\0');
  is.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw std::runtime_error("load_model: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_model: corrupted header: " + std::string(e.what()));
  }

  ModelConfig cfg;
  RelatednessModel m;
  try {
    cfg = detail::config_from_json(header.at("config"));
    const auto& emb = header.at("embedding");
    const std::size_t dim = emb.at("dim").get<std::size_t>();
    if (dim != cfg.embedding_dim)
      throw std::runtime_error("load_model: embedding dim " + std::to_string(dim) +
                               " does not match config dim " + std::to_string(cfg.embedding_dim));
    auto words = emb.at("words").get<std::vector<std::string>>();
    std::ostringstream hash;
    hash << std::hex << detail::vocab_hash(words);
    if (hash.str() != emb.at("hash").get<std::string>())
      throw std::runtime_error("load_model: embedding vocabulary hash mismatch");

    EmbeddingTable table;
    table.dim = dim;
    table.words = std::move(words);
    table.unk_index = table.words.size();
    table.matrix = Tensor::make({table.words.size() + 1, dim}, true);
    for (std::size_t i = 0; i < table.words.size(); ++i)
      table.index.emplace(to_lower(table.words[i]), i);

    m = detail::make_skeleton(cfg, std::move(table));
    m.freeze_embedding = header.at("freeze_embedding").get<bool>();
    m.embedding.matrix->requires_grad = !m.freeze_embedding;

    auto expected = m.named_parameters();
    const auto& params = header.at("params");
    if (params.size() != expected.size())
      throw std::runtime_error("load_model: header lists " + std::to_string(params.size()) +
                               " parameters, model has " + std::to_string(expected.size()));
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto& [name, t] = expected[i];
      if (params[i].at("name").get<std::string>() != name)
        throw std::runtime_error("load_model: parameter order mismatch at '" + name + "'");
      auto shape = params[i].at("shape").get<std::vector<std::size_t>>();
      if (shape != t->shape)
        throw std::runtime_error("load_model: parameter '" + name + "' has shape " +
                                 shape_str(shape) + ", expected " + shape_str(t->shape));
    }
    for (auto& [name, t] : expected) detail::read_doubles(is, t->values);
    auto bn_list = m.batchnorms();
    const auto& bns = header.at("batchnorm");
    if (bns.size() != bn_list.size())
      throw std::runtime_error("load_model: batchnorm count mismatch");
    for (std::size_t i = 0; i < bn_list.size(); ++i) {
      if (bns[i].at("features").get<std::size_t>() != bn_list[i]->features())
        throw std::runtime_error("load_model: batchnorm feature count mismatch");
      bn_list[i]->epsilon = bns[i].at("epsilon").get<double>();
      bn_list[i]->momentum = bns[i].at("momentum").get<double>();
      detail::read_doubles(is, bn_list[i]->running_mean);
      detail::read_doubles(is, bn_list[i]->running_var);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_model: corrupted header: " + std::string(e.what()));
  }
  return m;
}

}  // namespace relrank

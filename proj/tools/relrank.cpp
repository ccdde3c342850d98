// relrank: learns word-to-context semantic relatedness and re-ranks k-best
// hypotheses from text-spotting systems.
//
// Subcommands: train, rerank, eval, sweep, gradcheck, make-synthetic.
// Exit codes: 0 success, 1 validation/runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include "relrank/evaluator.hpp"
#include "relrank/gradcheck.hpp"
#include "relrank/io.hpp"
#include "relrank/model.hpp"
#include "relrank/reranker.hpp"
#include "relrank/rng.hpp"
#include "relrank/synthetic.hpp"
#include "relrank/trainer.hpp"

namespace {

using namespace relrank;

void print_warnings(const IngestReport& report) {
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
}

FusionConfig parse_fusion(const std::string& spec) {
  auto parts = detail::split_char(spec, ',');
  if (parts.size() != 4)
    throw std::invalid_argument("--fusion-weights expects four comma-separated values, got '" +
                                spec + "'");
  FusionConfig cfg;
  try {
    cfg.baseline = std::stod(parts[0]);
    cfg.relatedness = std::stod(parts[1]);
    cfg.context = std::stod(parts[2]);
    cfg.unigram = std::stod(parts[3]);
  } catch (const std::exception&) {
    throw std::invalid_argument("--fusion-weights: '" + spec + "' is not numeric");
  }
  cfg.validate();
  return cfg;
}

std::vector<std::size_t> parse_sizes(const std::string& spec) {
  std::vector<std::size_t> out;
  for (const auto& part : detail::split_char(spec, ',')) {
    if (part.empty()) continue;
    out.push_back(static_cast<std::size_t>(std::stoul(part)));
  }
  if (out.empty()) throw std::invalid_argument("--mlp: no layer sizes in '" + spec + "'");
  return out;
}

// shared data-loading flags
struct DataArgs {
  std::string hypotheses, context, embeddings, unigram_corpus, lexicon;
  double alpha = 1.0;

  std::vector<HypothesisSet> load_sets(IngestReport& report) const {
    auto sets = load_hypotheses(hypotheses, &report);
    auto ctx = load_context(context, &report);
    attach_contexts(sets, ctx, &report);
    return sets;
  }
};

struct ScorerArgs {
  std::string model_path;
  std::string scorer_kind = "neural";  // neural | cosine
  std::string cosine_agg = "max";      // max | mean

  struct Loaded {
    std::unique_ptr<RelatednessModel> model;
    std::unique_ptr<EmbeddingTable> table;
    std::unique_ptr<RelatednessScorer> scorer;
  };

  Loaded build(const std::string& embeddings_path) const {
    Loaded out;
    if (scorer_kind == "neural") {
      if (model_path.empty())
        throw std::invalid_argument("the neural scorer needs --model (or pass --scorer cosine)");
      out.model = std::make_unique<RelatednessModel>(load_model(model_path));
      out.scorer = std::make_unique<NeuralScorer>(*out.model);
    } else if (scorer_kind == "cosine") {
      if (embeddings_path.empty())
        throw std::invalid_argument("the cosine scorer needs --embeddings");
      IngestReport report;
      out.table = std::make_unique<EmbeddingTable>(load_embeddings(embeddings_path, &report));
      print_warnings(report);
      out.scorer = std::make_unique<CosineScorer>(
          *out.table, cosine_agg == "mean" ? CosineMode::mean : CosineMode::max);
    } else {
      throw std::invalid_argument("unknown scorer '" + scorer_kind + "'");
    }
    return out;
  }
};

std::optional<UnigramModel> maybe_unigram(const DataArgs& data) {
  if (data.unigram_corpus.empty()) return std::nullopt;
  return load_unigram(data.unigram_corpus, data.alpha);
}

std::optional<Lexicon> maybe_lexicon(const DataArgs& data) {
  if (data.lexicon.empty()) return std::nullopt;
  return load_lexicon(data.lexicon);
}

void log_config(const std::string& command, const nlohmann::json& effective) {
  std::cerr << "[" << command << "] config " << effective.dump() << "\n";
}

// ---------------------------------------------------------------------------

int run_train(const DataArgs& data, const std::string& out, const std::string& variant_name,
              std::uint64_t seed, std::size_t epochs, std::size_t batch_size,
              std::size_t neg_ratio, double lr, double val_split, std::size_t patience,
              bool freeze_embedding, std::size_t kernels, std::size_t hidden,
              const std::string& mlp_spec, std::size_t max_context_len,
              std::size_t max_candidate_len, std::size_t overlap_buckets,
              std::size_t overlap_proj, double dropout) {
  ModelConfig cfg;
  cfg.variant = parse_variant(variant_name);
  cfg.kernels_per_channel = kernels;
  cfg.lstm_hidden = hidden;
  cfg.mlp_sizes = parse_sizes(mlp_spec);
  cfg.max_context_len = max_context_len;
  cfg.max_candidate_len = max_candidate_len;
  cfg.overlap_buckets = overlap_buckets;
  cfg.overlap_proj = overlap_proj;
  cfg.dropout_rate = dropout;

  TrainOptions opt;
  opt.epochs = epochs;
  opt.batch_size = batch_size;
  opt.validation_split = val_split;
  opt.patience = patience;
  opt.optimizer.learning_rate = lr;
  opt.verbose = true;

  nlohmann::json manifest = {
      {"command", "train"},
      {"seed", seed},
      {"variant", variant_name},
      {"epochs", epochs},
      {"batch_size", batch_size},
      {"neg_ratio", neg_ratio},
      {"learning_rate", lr},
      {"validation_split", val_split},
      {"patience", patience},
      {"freeze_embedding", freeze_embedding},
      {"kernels_per_channel", kernels},
      {"lstm_hidden", hidden},
      {"mlp", mlp_spec},
      {"max_context_len", max_context_len},
      {"max_candidate_len", max_candidate_len},
      {"overlap_buckets", overlap_buckets},
      {"overlap_proj", overlap_proj},
      {"dropout", dropout},
      {"hypotheses", data.hypotheses},
      {"context", data.context},
      {"embeddings", data.embeddings},
  };
  log_config("train", manifest);

  IngestReport report;
  auto sets = data.load_sets(report);
  auto table = load_embeddings(data.embeddings, &report);
  print_warnings(report);

  std::vector<Scene> corpus;
  corpus.reserve(sets.size());
  for (auto& h : sets) corpus.push_back({h.image_id, h.gold, h.ctx});

  Rng rng(seed);
  auto pairs = make_pairs(corpus, neg_ratio, rng);
  std::cerr << "[train] " << corpus.size() << " scenes -> " << pairs.size() << " pairs\n";

  auto model = build_model(cfg, table, rng, freeze_embedding);
  std::cerr << "[train] " << variant_name << " model, " << model.parameter_count()
            << " parameters\n";
  auto history = train(model, pairs, opt, rng);

  save_model(model, out);
  manifest["pairs"] = pairs.size();
  manifest["parameter_count"] = model.parameter_count();
  manifest["epochs_run"] = history.epochs.size();
  manifest["best_epoch"] = history.best_epoch;
  if (!history.epochs.empty()) {
    manifest["final_train_loss"] = history.epochs.back().train_loss;
    manifest["final_train_accuracy"] = history.epochs.back().train_accuracy;
  }
  save_manifest(manifest, out + ".manifest.json");
  std::cerr << "[train] wrote " << out << " and " << out << ".manifest.json\n";
  return 0;
}

int run_rerank(const DataArgs& data, const ScorerArgs& scorer_args, const std::string& fusion_spec,
               const std::string& out, const std::string& trace_path) {
  FusionConfig fusion = parse_fusion(fusion_spec);
  log_config("rerank", {{"command", "rerank"},
                        {"hypotheses", data.hypotheses},
                        {"context", data.context},
                        {"scorer", scorer_args.scorer_kind},
                        {"model", scorer_args.model_path},
                        {"fusion", fusion_spec},
                        {"unigram_corpus", data.unigram_corpus},
                        {"alpha", data.alpha},
                        {"out", out}});
  IngestReport report;
  auto sets = data.load_sets(report);
  print_warnings(report);
  auto loaded = scorer_args.build(data.embeddings);
  auto lm = maybe_unigram(data);

  std::vector<HypothesisSet> reranked_sets;
  std::vector<std::pair<std::string, std::vector<ScoredCandidate>>> traces;
  reranked_sets.reserve(sets.size());
  for (const auto& h : sets) {
    auto scored = rerank(h, *loaded.scorer, lm ? &*lm : nullptr, fusion);
    HypothesisSet out_set;
    out_set.image_id = h.image_id;
    out_set.gold = h.gold;
    out_set.ctx = h.ctx;
    for (const auto& sc : scored) out_set.candidates.push_back({sc.word, sc.final_score});
    reranked_sets.push_back(std::move(out_set));
    traces.emplace_back(h.image_id, std::move(scored));
  }
  save_hypotheses(reranked_sets, out);
  std::cerr << "[rerank] wrote " << out << " (" << reranked_sets.size() << " records)\n";
  if (!trace_path.empty()) {
    save_trace(traces, trace_path);
    std::cerr << "[rerank] wrote " << trace_path << "\n";
  }
  return 0;
}

int run_eval_or_sweep(const DataArgs& data, const ScorerArgs& scorer_args,
                      const std::string& fusion_spec, const std::string& out, std::size_t k_min,
                      std::size_t k_max, const char* command) {
  FusionConfig fusion = parse_fusion(fusion_spec);
  log_config(command, {{"command", command},
                       {"hypotheses", data.hypotheses},
                       {"context", data.context},
                       {"scorer", scorer_args.scorer_kind},
                       {"model", scorer_args.model_path},
                       {"fusion", fusion_spec},
                       {"lexicon", data.lexicon},
                       {"unigram_corpus", data.unigram_corpus},
                       {"k_min", k_min},
                       {"k_max", k_max},
                       {"out", out}});
  IngestReport report;
  auto sets = data.load_sets(report);
  print_warnings(report);
  auto loaded = scorer_args.build(data.embeddings);
  auto lm = maybe_unigram(data);
  auto lexicon = maybe_lexicon(data);

  EvalReport eval_report;
  eval_report.dataset_size = sets.size();
  for (std::size_t k = k_min; k <= k_max; ++k)
    eval_report.rows.push_back(evaluate_at_k(sets, *loaded.scorer, lm ? &*lm : nullptr, fusion,
                                             lexicon ? &*lexicon : nullptr, k));
  // reuse the sweep argmax bookkeeping
  if (!eval_report.rows.empty()) {
    auto argmax = [&](auto&& get) {
      std::size_t best = 0;
      double best_v = -1.0;
      for (const auto& row : eval_report.rows) {
        auto v = get(row);
        if (v && *v > best_v) {
          best_v = *v;
          best = row.k;
        }
      }
      return best;
    };
    eval_report.best_k_full = argmax([](const SweepRow& r) { return r.full.value; });
    eval_report.best_k_dict = argmax([](const SweepRow& r) { return r.dict.value; });
    eval_report.best_k_list = argmax([](const SweepRow& r) { return r.list.value; });
    eval_report.best_k_mrr =
        argmax([](const SweepRow& r) { return std::optional<double>(r.mrr_value); });
  }

  std::string text = render_report(eval_report);
  std::cout << text;
  if (!out.empty()) {
    detail::open_output(out) << text;
    detail::open_output(out + ".json") << report_json(eval_report).dump(2) << "\n";
    std::cerr << "[" << command << "] wrote " << out << " and " << out << ".json\n";
  }
  return 0;
}

int run_gradcheck(std::uint64_t seed, std::size_t layer_trials, std::size_t model_trials,
                  std::size_t exhaustive_trials, double tolerance) {
  log_config("gradcheck", {{"command", "gradcheck"},
                           {"seed", seed},
                           {"layer_trials", layer_trials},
                           {"model_trials", model_trials},
                           {"exhaustive_trials", exhaustive_trials},
                           {"tolerance", tolerance}});
  auto report = run_gradient_suite(seed, layer_trials, model_trials, tolerance, exhaustive_trials);
  report.print(std::cout);
  return report.all_pass() ? 0 : 1;
}

int run_make_synthetic(const std::string& out, std::uint64_t seed, const SyntheticSpec& spec) {
  log_config("make-synthetic", {{"command", "make-synthetic"},
                                {"out", out},
                                {"seed", seed},
                                {"topics", spec.topics},
                                {"words_per_topic", spec.words_per_topic},
                                {"train_scenes", spec.train_scenes},
                                {"eval_scenes", spec.eval_scenes},
                                {"k", spec.k},
                                {"embedding_dim", spec.embedding_dim}});
  auto data = make_synthetic(spec, Rng(seed));
  write_synthetic(data, out);
  std::cerr << "[make-synthetic] wrote " << data.train.size() << " train scenes and "
            << data.eval_sets.size() << " eval scenes to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semantic relatedness re-ranking for text spotting hypotheses"};
  app.require_subcommand(1);
  std::function<int()> action;

  // ---- train ----
  auto* train_cmd = app.add_subcommand("train", "fit a relatedness model from context+gold data");
  {
    auto data = std::make_shared<DataArgs>();
    auto out = std::make_shared<std::string>();
    auto variant = std::make_shared<std::string>("fdclstm-at");
    auto seed = std::make_shared<std::uint64_t>(42);
    auto epochs = std::make_shared<std::size_t>(30);
    auto batch = std::make_shared<std::size_t>(32);
    auto neg = std::make_shared<std::size_t>(1);
    auto lr = std::make_shared<double>(2e-3);
    auto val = std::make_shared<double>(0.1);
    auto patience = std::make_shared<std::size_t>(5);
    auto freeze = std::make_shared<bool>(false);
    auto kernels = std::make_shared<std::size_t>(64);
    auto hidden = std::make_shared<std::size_t>(64);
    auto mlp = std::make_shared<std::string>("128,64");
    auto ctx_len = std::make_shared<std::size_t>(32);
    auto cand_len = std::make_shared<std::size_t>(4);
    auto buckets = std::make_shared<std::size_t>(1024);
    auto proj = std::make_shared<std::size_t>(32);
    auto dropout = std::make_shared<double>(0.7);

    train_cmd->add_option("--hypotheses", data->hypotheses, "hypothesis file (gold source)")
        ->required();
    train_cmd->add_option("--context", data->context, "context file")->required();
    train_cmd->add_option("--embeddings", data->embeddings, "pretrained embedding file")
        ->required();
    train_cmd->add_option("--out", *out, "output model path")->required();
    train_cmd->add_option("--variant", *variant, "fdclstm or fdclstm-at");
    train_cmd->add_option("--seed", *seed, "root seed (default 42)");
    train_cmd->add_option("--epochs", *epochs, "training epochs");
    train_cmd->add_option("--batch-size", *batch, "minibatch size (>= 2)");
    train_cmd->add_option("--neg-ratio", *neg, "negatives per positive");
    train_cmd->add_option("--lr", *lr, "Nadam learning rate");
    train_cmd->add_option("--val-split", *val, "validation fraction");
    train_cmd->add_option("--patience", *patience, "early-stop patience (epochs)");
    train_cmd->add_flag("--freeze-embedding", *freeze, "do not fine-tune embeddings");
    train_cmd->add_option("--kernels", *kernels, "kernels per conv channel");
    train_cmd->add_option("--hidden", *hidden, "LSTM hidden size");
    train_cmd->add_option("--mlp", *mlp, "comma-separated MLP layer sizes");
    train_cmd->add_option("--max-context-len", *ctx_len, "context tokens kept");
    train_cmd->add_option("--max-candidate-len", *cand_len, "candidate tokens kept");
    train_cmd->add_option("--overlap-buckets", *buckets, "overlap hash buckets");
    train_cmd->add_option("--overlap-proj", *proj, "overlap projection width");
    train_cmd->add_option("--dropout", *dropout, "dropout rate between MLP layers");
    train_cmd->callback([=, &action] {
      action = [=] {
        return run_train(*data, *out, *variant, *seed, *epochs, *batch, *neg, *lr, *val,
                         *patience, *freeze, *kernels, *hidden, *mlp, *ctx_len, *cand_len,
                         *buckets, *proj, *dropout);
      };
    });
  }

  // ---- shared options for rerank/eval/sweep ----
  auto add_scoring_options = [](CLI::App* cmd, std::shared_ptr<DataArgs> data,
                                std::shared_ptr<ScorerArgs> scorer,
                                std::shared_ptr<std::string> fusion) {
    cmd->add_option("--hypotheses", data->hypotheses, "hypothesis file")->required();
    cmd->add_option("--context", data->context, "context file")->required();
    cmd->add_option("--model", scorer->model_path, "trained model file (neural scorer)");
    cmd->add_option("--embeddings", data->embeddings, "embedding file (cosine scorer)");
    cmd->add_option("--scorer", scorer->scorer_kind, "neural or cosine");
    cmd->add_option("--cosine-agg", scorer->cosine_agg, "max or mean aggregation");
    cmd->add_option("--unigram-corpus", data->unigram_corpus, "plain-text corpus for unigram LM");
    cmd->add_option("--alpha", data->alpha, "add-alpha smoothing (default 1.0)");
    cmd->add_option("--fusion-weights", *fusion,
                    "four weights: baseline,relatedness,context,unigram");
  };

  // ---- rerank ----
  auto* rerank_cmd = app.add_subcommand("rerank", "re-rank hypothesis files with fused scores");
  {
    auto data = std::make_shared<DataArgs>();
    auto scorer = std::make_shared<ScorerArgs>();
    auto fusion = std::make_shared<std::string>("1,1,0,1");
    auto out = std::make_shared<std::string>();
    auto trace = std::make_shared<std::string>();
    add_scoring_options(rerank_cmd, data, scorer, fusion);
    rerank_cmd->add_option("--out", *out, "re-ranked hypothesis output")->required();
    rerank_cmd->add_option("--trace", *trace, "per-candidate score trace output");
    rerank_cmd->callback([=, &action] {
      action = [=] { return run_rerank(*data, *scorer, *fusion, *out, *trace); };
    });
  }

  // ---- eval ----
  auto* eval_cmd = app.add_subcommand("eval", "evaluate re-ranking at a fixed k");
  {
    auto data = std::make_shared<DataArgs>();
    auto scorer = std::make_shared<ScorerArgs>();
    auto fusion = std::make_shared<std::string>("1,1,0,1");
    auto out = std::make_shared<std::string>();
    auto k = std::make_shared<std::size_t>(10);
    add_scoring_options(eval_cmd, data, scorer, fusion);
    eval_cmd->add_option("--lexicon", data->lexicon, "lexicon file for the dict metric");
    eval_cmd->add_option("--k", *k, "candidate list truncation");
    eval_cmd->add_option("--out", *out, "report path (text; .json added for machine format)");
    eval_cmd->callback([=, &action] {
      action = [=] { return run_eval_or_sweep(*data, *scorer, *fusion, *out, *k, *k, "eval"); };
    });
  }

  // ---- sweep ----
  auto* sweep_cmd = app.add_subcommand("sweep", "evaluate re-ranking for k = 1..k-max");
  {
    auto data = std::make_shared<DataArgs>();
    auto scorer = std::make_shared<ScorerArgs>();
    auto fusion = std::make_shared<std::string>("1,1,0,1");
    auto out = std::make_shared<std::string>();
    auto k_max = std::make_shared<std::size_t>(10);
    add_scoring_options(sweep_cmd, data, scorer, fusion);
    sweep_cmd->add_option("--lexicon", data->lexicon, "lexicon file for the dict metric");
    sweep_cmd->add_option("--k-max", *k_max, "largest k (default 10)");
    sweep_cmd->add_option("--out", *out, "report path (text; .json added for machine format)");
    sweep_cmd->callback([=, &action] {
      action = [=] {
        if (*k_max < 1) throw std::invalid_argument("--k-max must be >= 1");
        return run_eval_or_sweep(*data, *scorer, *fusion, *out, 1, *k_max, "sweep");
      };
    });
  }

  // ---- gradcheck ----
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  {
    auto seed = std::make_shared<std::uint64_t>(7);
    auto layer_trials = std::make_shared<std::size_t>(100);
    auto model_trials = std::make_shared<std::size_t>(100);
    auto exhaustive = std::make_shared<std::size_t>(2);
    auto tolerance = std::make_shared<double>(1e-3);
    grad_cmd->add_option("--seed", *seed, "root seed (default 7)");
    grad_cmd->add_option("--layer-trials", *layer_trials, "seeds per layer check");
    grad_cmd->add_option("--model-trials", *model_trials, "sampled full-model seeds per variant");
    grad_cmd->add_option("--exhaustive-trials", *exhaustive,
                         "every-coordinate full-model sweeps per variant");
    grad_cmd->add_option("--tolerance", *tolerance, "max relative error allowed");
    grad_cmd->callback([=, &action] {
      action = [=] {
        return run_gradcheck(*seed, *layer_trials, *model_trials, *exhaustive, *tolerance);
      };
    });
  }

  // ---- make-synthetic ----
  auto* synth_cmd = app.add_subcommand("make-synthetic", "emit the planted-signal desk corpus");
  {
    auto out = std::make_shared<std::string>();
    auto seed = std::make_shared<std::uint64_t>(42);
    auto spec = std::make_shared<SyntheticSpec>();
    synth_cmd->add_option("--out", *out, "output directory")->required();
    synth_cmd->add_option("--seed", *seed, "root seed (default 42)");
    synth_cmd->add_option("--topics", spec->topics, "number of word topics");
    synth_cmd->add_option("--words-per-topic", spec->words_per_topic, "vocabulary per topic");
    synth_cmd->add_option("--train-scenes", spec->train_scenes, "training scenes");
    synth_cmd->add_option("--eval-scenes", spec->eval_scenes, "evaluation scenes");
    synth_cmd->add_option("--k", spec->k, "candidates per eval scene");
    synth_cmd->add_option("--dim", spec->embedding_dim, "embedding dimension");
    synth_cmd->callback(
        [=, &action] { action = [=] { return run_make_synthetic(*out, *seed, *spec); }; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // 0 is --help / --version
  }

  try {
    return action ? action() : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

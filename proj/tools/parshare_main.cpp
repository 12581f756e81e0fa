#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "parshare/decode.hpp"
#include "parshare/errors.hpp"
#include "parshare/training.hpp"
#include "run_config.hpp"

using namespace parshare;
namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  return out;
}

int learn_bpe(const std::vector<std::string>& inputs, std::size_t merges, const std::string& output,
              const std::string& marker) {
  std::vector<std::string> lines;
  for (const auto& path : inputs) {
    auto l = read_lines(path);
    lines.insert(lines.end(), l.begin(), l.end());
  }
  auto model = bpe_learn(count_words(lines), merges, marker);
  model.save(output);
  std::cerr << "learned " << model.merges().size() << " merges\n";
  return 0;
}

int build_vocab_cmd(const std::vector<std::string>& inputs, const std::string& bpe_path,
                    const std::vector<std::string>& targets, const std::string& output) {
  std::vector<std::string> lines;
  for (const auto& path : inputs) {
    auto l = read_lines(path);
    lines.insert(lines.end(), l.begin(), l.end());
  }
  auto vocab = build_vocab(lines, BpeModel::load(bpe_path), targets);
  vocab.save(output);
  std::cerr << "vocabulary of " << vocab.size() << " tokens\n";
  return 0;
}

int train(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& out,
          bool resume) {
  auto config = cli::RunConfig::load(config_path);
  for (const auto& o : overrides) config.override_with(o);
  if (!out.empty()) config.out_dir = out;
  config.validate();
  const auto out_dir = config.out_dir;
  auto p = cli::prepare(config, out_dir, &std::cout);
  config.model.vocab_size = p.model.vocab_size;
  config.bpe_model = fs::absolute(fs::path(out_dir) / "model.bpe").string();
  config.vocab = fs::absolute(fs::path(out_dir) / "vocab.txt").string();
  open_out((fs::path(out_dir) / "resolved.cfg").string()) << config.resolved();

  const auto counts = count_parameters(p.model, p.plan);
  std::cout << "strategy " << strategy_name(p.plan.strategy) << ", " << counts.total << " parameters in "
            << counts.groups.size() << " cells\n";
  Trainer trainer(p.model, p.plan, config.train, p.vocab, p.bpe, p.train, p.dev);
  if (resume) {
    const auto last = fs::path(out_dir) / "last.ckpt";
    if (!fs::exists(last)) throw ConfigError("--resume: no " + last.string());
    const auto ckpt = load_checkpoint(last.string());
    trainer.restore(ckpt);
    std::cout << "resuming from step " << ckpt.step << '\n';
  }
  auto result = trainer.run(out_dir, &std::cout);
  std::cout << "stopped at step " << result.steps
            << (result.reached_target       ? " (training accuracy target reached)"
                : result.patience_exhausted ? " (patience exhausted)"
                                            : " (max steps)")
            << "; best step " << result.best_step << ", selection metric " << std::fixed << std::setprecision(2)
            << result.best_mean_bleu << "; outputs in " << out_dir << '\n';
  return 0;
}

int translate(const std::string& ckpt_path, const std::string& input, const std::string& lang, std::size_t beam,
              double alpha, std::string bpe_path, std::string vocab_path, const std::string& output) {
  const auto dir = fs::path(ckpt_path).parent_path();
  if (bpe_path.empty()) bpe_path = (dir / "model.bpe").string();
  if (vocab_path.empty()) vocab_path = (dir / "vocab.txt").string();
  const auto ckpt = load_checkpoint(ckpt_path);
  if (!ckpt.plan.serves(lang)) throw PlanError("language '" + lang + "' is not served by the checkpoint's plan");
  const auto bpe = BpeModel::load(bpe_path);
  const auto vocab = Vocabulary::load(vocab_path);
  if (vocab.hash() != ckpt.vocab_hash) throw VocabularyError(vocab_path + " is not the checkpoint's vocabulary");
  auto table = ParameterTable<float>::resolve(ckpt.model, ckpt.plan);
  for (std::size_t i = 0; i < table.cell_count(); ++i) {
    if (ckpt.names[i] != table.cell_name(i)) throw IntegrityError("checkpoint cell order does not match its plan");
    auto dst = table.cells()[i].mutable_data();
    std::copy(ckpt.cells[i].data().begin(), ckpt.cells[i].data().end(), dst.begin());
  }
  BeamConfig config;
  config.width = beam;
  config.alpha = alpha;
  std::ofstream file;
  if (!output.empty()) file = open_out(output);
  std::ostream& out = output.empty() ? std::cout : file;
  const int lang_id = vocab.language_id(lang);
  for (const auto& line : read_lines(input)) {
    std::vector<int> src = {lang_id};
    for (int id : vocab.ids(bpe.encode(line))) src.push_back(id);
    const auto words = ids_to_words(translate_ids(table, lang, src, config), vocab, bpe);
    for (std::size_t i = 0; i < words.size(); ++i) out << (i ? " " : "") << words[i];
    out << '\n';
  }
  return 0;
}

int score(const std::string& hyp_path, const std::string& ref_path, const std::string& lang, std::string csv_path,
          bool fmeasure, const std::string& train_corpus, std::string fcsv_path) {
  const auto hyp_lines = read_lines(hyp_path);
  const auto ref_lines = read_lines(ref_path);
  if (hyp_lines.size() != ref_lines.size()) {
    throw DataError("alignment error: " + std::to_string(hyp_lines.size()) + " hypothesis lines vs " +
                    std::to_string(ref_lines.size()) + " reference lines");
  }
  std::vector<std::vector<std::string>> hyps, refs;
  for (const auto& l : hyp_lines) hyps.push_back(split_tokens(l));
  for (const auto& l : ref_lines) refs.push_back(split_tokens(l));
  const auto b = bleu(hyps, refs);
  std::cout << std::fixed << std::setprecision(2) << "BLEU = " << b.score << ", " << 100 * b.precisions[0];
  for (int n = 1; n < 4; ++n) std::cout << '/' << 100 * b.precisions[n];
  std::cout << " (BP = " << std::setprecision(3) << b.brevity_penalty << ", hyp_len = " << b.hyp_length
            << ", ref_len = " << b.ref_length << ")\n";
  if (csv_path.empty()) csv_path = hyp_path + ".score.csv";
  auto csv = open_out(csv_path);
  csv << "metric,language,value\n" << std::setprecision(6);
  csv << "bleu," << lang << ',' << b.score << '\n';
  for (int n = 0; n < 4; ++n) csv << "precision_" << n + 1 << ',' << lang << ',' << b.precisions[n] << '\n';
  csv << "brevity_penalty," << lang << ',' << b.brevity_penalty << '\n';
  csv << "hyp_length," << lang << ',' << b.hyp_length << '\n';
  csv << "ref_length," << lang << ',' << b.ref_length << '\n';
  if (!fmeasure) return 0;
  if (train_corpus.empty()) throw ConfigError("--fmeasure needs --train-corpus");
  const auto words = count_words(read_lines(train_corpus));
  const auto buckets = fmeasure_buckets(hyps, refs, std::map<std::string, std::int64_t>(words.begin(), words.end()),
                                        default_buckets());
  if (fcsv_path.empty()) fcsv_path = hyp_path + ".fmeasure.csv";
  auto fcsv = open_out(fcsv_path);
  fcsv << "bucket_low,bucket_high,match,hyp_count,ref_count,f\n";
  std::cout << "F-measure by training frequency:\n";
  for (const auto& k : buckets) {
    const std::string high = k.high == std::numeric_limits<std::int64_t>::max() ? "inf" : std::to_string(k.high);
    fcsv << k.low << ',' << high << ',' << k.match << ',' << k.hyp_count << ',' << k.ref_count << ','
         << std::setprecision(6) << k.f << '\n';
    std::cout << "  [" << k.low << ", " << high << "] types " << k.types << "  F = " << std::setprecision(4) << k.f
              << '\n';
  }
  return 0;
}

int count_params(const std::string& config_path, const std::string& which, int vocab_size,
                 std::vector<std::string> targets) {
  ModelConfig model;
  model.vocab_size = vocab_size;
  if (!config_path.empty()) {
    auto config = cli::RunConfig::load(config_path);
    model = config.model;
    if (targets.empty()) targets = config.languages;
    if (vocab_size > 0) {
      model.vocab_size = vocab_size;
    } else if (model.vocab_size == 0) {
      model.vocab_size = cli::prepare(config, "", nullptr).model.vocab_size;
    }
  }
  if (targets.empty()) targets = {"de", "nl"};
  model.validate();
  std::vector<Strategy> strategies;
  if (which == "all") {
    strategies = builtin_strategies();
  } else {
    strategies = {parse_strategy(which)};
    if (strategies.front() == Strategy::kExplicit) throw ConfigError("count-params takes a built-in strategy");
  }
  std::cout << "layers " << model.num_layers << ", d_model " << model.d_model << ", d_ff " << model.d_ff
            << ", heads " << model.heads << ", vocab " << model.vocab_size << ", targets";
  for (const auto& t : targets) std::cout << ' ' << t;
  std::cout << "\n\n"
            << std::left << std::setw(13) << "strategy" << std::right << std::setw(14) << "weights" << std::setw(10)
            << "x10^6" << std::setw(14) << "total" << std::setw(10) << "x10^6" << '\n';
  for (auto s : strategies) {
    const auto c = count_parameters(model, plan_from_strategy(s, targets, model));
    std::cout << std::left << std::setw(13) << strategy_name(s) << std::right << std::setw(14) << c.weights_only
              << std::setw(10) << std::llround(static_cast<double>(c.weights_only) / 1e6) << std::setw(14) << c.total
              << std::setw(10) << std::llround(static_cast<double>(c.total) / 1e6) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter-shared multilingual Transformer: BPE, training, decoding, scoring"};
  app.require_subcommand(1);
  int status = 0;

  auto* bpe_cmd = app.add_subcommand("learn-bpe", "Learn a BPE merge list");
  std::vector<std::string> bpe_inputs;
  std::size_t merges = 0;
  std::string bpe_out, marker = "@@";
  bpe_cmd->add_option("--input", bpe_inputs, "Tokenized text files")->required()->check(CLI::ExistingFile);
  bpe_cmd->add_option("--merges", merges, "Number of merge operations")->required();
  bpe_cmd->add_option("--output", bpe_out, "Merge list to write")->required();
  bpe_cmd->add_option("--marker", marker, "Continuation marker");

  auto* vocab_cmd = app.add_subcommand("build-vocab", "Build a vocabulary from BPE-encoded text");
  std::vector<std::string> vocab_inputs, vocab_targets;
  std::string vocab_bpe, vocab_out;
  vocab_cmd->add_option("--input", vocab_inputs, "Tokenized text files")->required()->check(CLI::ExistingFile);
  vocab_cmd->add_option("--bpe", vocab_bpe, "BPE model")->required()->check(CLI::ExistingFile);
  vocab_cmd->add_option("--targets", vocab_targets, "Target languages (one <2xx> token each)")->required();
  vocab_cmd->add_option("--output", vocab_out, "Vocabulary file to write")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
  std::string train_config, train_out;
  bool resume = false;
  std::vector<std::string> overrides;
  train_cmd->add_option("--config", train_config, "Run config")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--set", overrides, "Override, e.g. training.max_steps=500 (repeatable)");
  train_cmd->add_option("--out", train_out, "Output directory (overrides output.dir)");
  train_cmd->add_flag("--resume", resume, "Continue from last.ckpt in the output directory");

  auto* tr_cmd = app.add_subcommand("translate", "Beam-decode a source file");
  std::string ckpt, tr_input, tr_lang, tr_bpe, tr_vocab, tr_out;
  std::size_t beam = 5;
  double alpha = 1.0;
  tr_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  tr_cmd->add_option("--input", tr_input, "Tokenized source sentences")->required()->check(CLI::ExistingFile);
  tr_cmd->add_option("--lang", tr_lang, "Target language")->required();
  tr_cmd->add_option("--beam", beam, "Beam width");
  tr_cmd->add_option("--alpha", alpha, "Length normalization exponent");
  tr_cmd->add_option("--bpe", tr_bpe, "BPE model (default: model.bpe next to the checkpoint)");
  tr_cmd->add_option("--vocab", tr_vocab, "Vocabulary (default: vocab.txt next to the checkpoint)");
  tr_cmd->add_option("--output", tr_out, "Output file (default: stdout)");

  auto* score_cmd = app.add_subcommand("score", "Corpus BLEU and optional frequency-bucketed F-measure");
  std::string hyp, ref, score_lang = "all", score_csv, train_corpus, fcsv;
  bool fmeasure = false;
  score_cmd->add_option("--hyp", hyp, "Hypotheses")->required()->check(CLI::ExistingFile);
  score_cmd->add_option("--ref", ref, "References")->required()->check(CLI::ExistingFile);
  score_cmd->add_option("--lang", score_lang, "Language label for the CSV");
  score_cmd->add_option("--csv", score_csv, "Score CSV (default: <hyp>.score.csv)");
  score_cmd->add_flag("--fmeasure", fmeasure, "Also report F-measure by training frequency");
  score_cmd->add_option("--train-corpus", train_corpus, "Target-side training text for word frequencies")
      ->check(CLI::ExistingFile);
  score_cmd->add_option("--fmeasure-csv", fcsv, "F-measure CSV (default: <hyp>.fmeasure.csv)");

  auto* count_cmd = app.add_subcommand("count-params", "Parameter counts per sharing strategy");
  std::string count_config, which = "all";
  int vocab_size = 0;
  std::vector<std::string> count_targets;
  count_cmd->add_option("--config", count_config, "Run config (default: base model, targets de nl)")
      ->check(CLI::ExistingFile);
  count_cmd->add_option("--strategy", which, "Strategy name or 'all'");
  count_cmd->add_option("--vocab-size", vocab_size, "Vocabulary size");
  count_cmd->add_option("--targets", count_targets, "Target languages");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*bpe_cmd) status = learn_bpe(bpe_inputs, merges, bpe_out, marker);
    if (*vocab_cmd) status = build_vocab_cmd(vocab_inputs, vocab_bpe, vocab_targets, vocab_out);
    if (*train_cmd) status = train(train_config, overrides, train_out, resume);
    if (*tr_cmd) status = translate(ckpt, tr_input, tr_lang, beam, alpha, tr_bpe, tr_vocab, tr_out);
    if (*score_cmd) status = score(hyp, ref, score_lang, score_csv, fmeasure, train_corpus, fcsv);
    if (*count_cmd) {
      if (vocab_size == 0 && count_config.empty()) vocab_size = 33200;
      status = count_params(count_config, which, vocab_size, count_targets);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return status;
}

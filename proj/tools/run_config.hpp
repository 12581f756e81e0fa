#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "parshare/bpe.hpp"
#include "parshare/corpus.hpp"
#include "parshare/model_config.hpp"
#include "parshare/sharing.hpp"
#include "parshare/training.hpp"
#include "parshare/vocab.hpp"

namespace parshare::cli {

struct LanguageFiles {
  std::string train_source, train_target, dev_source, dev_target;
};

// Flat sectioned `key = value` run description:
//
//   [data]      languages, train_source.<lang>, train_target.<lang>,
//               dev_source.<lang>, dev_target.<lang>, bpe_model, bpe_merges,
//               vocab, max_subwords
//   [model]     layers, d_model, d_ff, heads, dropout, max_position, norm,
//               scaling, vocab_size
//   [sharing]   strategy, plan
//   [training]  seed, warmup, lr_scale, beta1, beta2, adam_eps,
//               label_smoothing, token_budget, batch_mode, loss_weighting,
//               max_steps, eval_interval, patience, target_train_accuracy,
//               dev_beam, dev_alpha
//   [output]    dir
//
// Relative input paths resolve against the config file's directory; the
// output directory resolves against the working directory.
struct RunConfig {
  std::filesystem::path base_dir = ".";
  std::vector<std::string> languages;
  std::map<std::string, LanguageFiles> files;
  std::string bpe_model;
  std::size_t bpe_merges = 32000;
  std::string vocab;
  std::size_t max_subwords = kMaxSubwords;
  ModelConfig model;
  Strategy strategy = Strategy::kKqBoth;
  std::string plan_file;
  TrainConfig train;
  std::string out_dir = "run";

  // Throws ConfigError with the line number on unknown sections or keys and
  // malformed values.
  static RunConfig parse(const std::string& text, const std::filesystem::path& base_dir);
  static RunConfig load(const std::string& path);

  // Applies one "section.key=value" override.
  void override_with(const std::string& assignment);
  void set(const std::string& section, const std::string& key, const std::string& value);

  // Cross-key checks (languages have train files, EXPLICIT has a plan, ...).
  void validate() const;

  std::string path(const std::string& p) const;
  // Every key with its effective value; parse(resolved()) gives back an
  // equivalent config.
  std::string resolved() const;
};

// Everything a training run needs, prepared from a RunConfig.
struct Prepared {
  BpeModel bpe;
  Vocabulary vocab;
  ModelConfig model;
  SharingPlan plan;
  std::vector<Example> train;
  DevSet dev;
  std::size_t dropped = 0;
};

// Learns (or loads) BPE, builds (or loads) the vocabulary and prepares the
// corpora. Writes model.bpe and vocab.txt into out_dir when it is non-empty.
Prepared prepare(const RunConfig& config, const std::string& out_dir, std::ostream* log);

// Prepares line-aligned pairs keeping the raw target words of every kept pair
// as references.
DevSet prepare_references(const std::vector<ParallelText>& texts, const BpeModel& bpe, const Vocabulary& vocab,
                          std::size_t max_subwords);

}  // namespace parshare::cli

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "parshare/corpus.hpp"
#include "parshare/decode.hpp"
#include "parshare/graph.hpp"
#include "parshare/model_config.hpp"
#include "parshare/sharing.hpp"

namespace parshare {

enum class LossWeighting {
  kTokens,        // sum of token losses over all languages / total tokens
  kSentenceMean,  // mean over sentences of each sentence's token mean
};

std::string to_string(LossWeighting weighting);
LossWeighting parse_loss_weighting(const std::string& text);

struct TrainConfig {
  double beta1 = 0.9;
  double beta2 = 0.997;
  double adam_eps = 1e-9;
  int warmup = 16000;
  double lr_scale = 2.0;
  double label_smoothing = 0.1;
  std::size_t token_budget = 3000;
  BatchMode batch_mode = BatchMode::kBalanced;
  LossWeighting weighting = LossWeighting::kTokens;
  std::size_t max_steps = 100000;
  std::size_t eval_interval = 1000;
  std::size_t patience = 10;
  // Stop once teacher-forced training-set token accuracy reaches this value at
  // an evaluation (0 disables).
  double target_train_accuracy = 0.0;
  std::uint64_t seed = 1;
  BeamConfig dev_beam;
};

// Matrices U(+-sqrt(3 / fan_in)), W_E truncated normal (std d_model^-0.5,
// resampled beyond 2 std), biases 0, gains 1. Cells are filled in table order.
template <typename T>
void init_parameters(ParameterTable<T>& table, std::uint64_t seed);

// lr_scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5). Throws
// ConfigError for step 0.
double lr_at(std::size_t step, int d_model, int warmup, double lr_scale = 2.0);

// Summed label-smoothed cross entropy over non-pad targets, plus the count.
template <typename T>
std::pair<Tensor<T>, std::size_t> label_smoothed_ce(Graph<T>& g, const Tensor<T>& logits,
                                                    const std::vector<int>& targets, double eps);

// Sum of the per-language loss sums over the total token count, i.e. language
// means weighted by their token share. Throws DataError when no token is
// present.
template <typename T>
Tensor<T> multilingual_loss(Graph<T>& g, const std::vector<std::pair<Tensor<T>, std::size_t>>& parts);

// Forward pass of every language part of a batch (in part order) on one graph.
template <typename T>
Tensor<T> batch_loss(Graph<T>& g, const ParameterTable<T>& table, const Batch& batch, double label_smoothing,
                     LossWeighting weighting, std::size_t* tokens = nullptr);

// Per-cell bias-corrected Adam. One moment pair per storage cell.
class Adam {
 public:
  Adam() = default;
  Adam(const TrainConfig& config, const std::vector<Tensor<float>>& cells);

  // Applies one update from the accumulated gradients, then zeroes them.
  // Throws NonFiniteError naming the first cell with a non-finite gradient.
  void step(std::vector<Tensor<float>>& cells, const std::vector<std::string>& names, double lr);

  std::size_t steps() const { return steps_; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }
  void set_steps(std::size_t steps) { steps_ = steps; }

 private:
  double beta1_ = 0.9, beta2_ = 0.997, eps_ = 1e-9;
  std::size_t steps_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

struct Checkpoint {
  ModelConfig model;
  SharingPlan plan;
  std::uint64_t vocab_hash = 0;
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t batch_in_epoch = 0;
  double best_metric = -1.0;
  double best_dev_loss = 0.0;
  std::size_t best_step = 0;
  std::size_t evals_since_best = 0;
  std::vector<std::string> names;
  std::vector<Tensor<float>> cells;
  std::vector<std::vector<float>> adam_m, adam_v;
  std::size_t adam_steps = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Throws IntegrityError on a bad magic, version, truncation or checksum.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct DevSet {
  std::vector<Example> examples;
  std::vector<std::vector<std::string>> references;  // words, per example
};

struct EvalResult {
  std::map<std::string, double> bleu;  // per language
  double mean_bleu = 0.0;
  double dev_loss = 0.0;
  double train_accuracy = 0.0;
};

struct MetricsRow {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::map<std::string, double> dev_bleu;
  double tokens_per_sec = 0.0;
};

struct TrainResult {
  std::size_t steps = 0;
  std::vector<double> losses;  // one per optimizer step
  std::vector<MetricsRow> metrics;
  double best_mean_bleu = -1.0;
  std::size_t best_step = 0;
  double final_train_accuracy = 0.0;
  bool reached_target = false;
  bool patience_exhausted = false;
};

class Trainer {
 public:
  // Throws PlanError when a training language is not served by the plan.
  Trainer(const ModelConfig& model, const SharingPlan& plan, const TrainConfig& config, const Vocabulary& vocab,
          const BpeModel& bpe, std::vector<Example> train, DevSet dev);

  ParameterTable<float>& table() { return table_; }
  const ParameterTable<float>& table() const { return table_; }
  const TrainConfig& config() const { return config_; }
  std::size_t step() const { return step_; }
  const std::vector<std::string>& languages() const { return languages_; }

  // One optimizer step on a batch; returns the batch loss.
  double train_step(const Batch& batch);
  // Continues the batch stream for n steps (no evaluation); returns the losses.
  std::vector<double> advance(std::size_t n);

  // Teacher-forced argmax accuracy over non-pad target tokens.
  double accuracy(const std::vector<Example>& examples) const;
  double loss(const std::vector<Example>& examples) const;
  EvalResult evaluate() const;

  // Decodes every example's source and returns the hypothesis words.
  std::vector<std::vector<std::string>> translate(const std::vector<Example>& examples,
                                                  const BeamConfig& beam) const;

  // Runs until max_steps, patience exhaustion or the accuracy target. With a
  // non-empty out_dir, writes best.ckpt, last.ckpt and metrics.csv there.
  // `log` receives one progress line per evaluation.
  TrainResult run(const std::string& out_dir = "", std::ostream* log = nullptr);

  Checkpoint checkpoint() const;
  // Throws PlanError / ConfigError / IntegrityError when the checkpoint does
  // not belong to this trainer's plan, config or vocabulary.
  void restore(const Checkpoint& ckpt);

 private:
  std::vector<Batch> epoch_batches(std::size_t epoch) const;

  ModelConfig model_;
  SharingPlan plan_;
  TrainConfig config_;
  const Vocabulary& vocab_;
  const BpeModel& bpe_;
  std::vector<Example> train_;
  DevSet dev_;
  std::vector<std::string> languages_;
  ParameterTable<float> table_;
  Adam adam_;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
  std::size_t batch_in_epoch_ = 0;
  double best_metric_ = -1.0;
  double best_dev_loss_ = 0.0;
  std::size_t best_step_ = 0;
  std::size_t evals_since_best_ = 0;
};

// CSV with columns step, lr, train_loss, dev_bleu_<lang>..., tokens_per_sec.
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::vector<std::string>& languages,
                       std::ostream& out);

}  // namespace parshare

#include "parshare/training.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "parshare/errors.hpp"
#include "parshare/model.hpp"

namespace parshare {

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x5eedu};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// Chunks of at most `size` examples, in order.
std::vector<std::vector<std::size_t>> chunks(std::size_t count, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < count; i += size) {
    std::vector<std::size_t> c;
    for (std::size_t j = i; j < std::min(count, i + size); ++j) c.push_back(j);
    out.push_back(std::move(c));
  }
  return out;
}

std::string fixed(double x, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

}  // namespace

std::string to_string(LossWeighting weighting) {
  return weighting == LossWeighting::kTokens ? "tokens" : "sentence_mean";
}

LossWeighting parse_loss_weighting(const std::string& text) {
  if (text == "tokens") return LossWeighting::kTokens;
  if (text == "sentence_mean") return LossWeighting::kSentenceMean;
  throw ConfigError("unknown loss weighting '" + text + "' (expected tokens or sentence_mean)");
}

template <typename T>
void init_parameters(ParameterTable<T>& table, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double embed_std = 1.0 / std::sqrt(static_cast<double>(table.config().d_model));
  std::normal_distribution<double> normal(0.0, embed_std);
  for (std::size_t i = 0; i < table.cell_count(); ++i) {
    auto& cell = table.cells()[i];
    auto values = cell.mutable_data();
    switch (table.cell_slots(i).front().role) {
      case Role::kE:
        for (auto& x : values) {
          double s = normal(rng);
          while (std::abs(s) > 2.0 * embed_std) s = normal(rng);
          x = static_cast<T>(s);
        }
        break;
      case Role::kGain:
        std::fill(values.begin(), values.end(), T(1));
        break;
      case Role::kBias:
      case Role::kB1:
      case Role::kB2:
        std::fill(values.begin(), values.end(), T(0));
        break;
      default: {
        const double bound = std::sqrt(3.0 / static_cast<double>(cell.shape()[0]));
        std::uniform_real_distribution<double> uniform(-bound, bound);
        for (auto& x : values) x = static_cast<T>(uniform(rng));
      }
    }
  }
}

template void init_parameters(ParameterTable<float>&, std::uint64_t);
template void init_parameters(ParameterTable<double>&, std::uint64_t);

double lr_at(std::size_t step, int d_model, int warmup, double lr_scale) {
  if (step == 0) throw ConfigError("learning rate is defined from step 1");
  if (d_model < 1 || warmup < 1) throw ConfigError("d_model and warmup must be positive");
  const double s = static_cast<double>(step);
  return lr_scale / std::sqrt(static_cast<double>(d_model)) *
         std::min(1.0 / std::sqrt(s), s * std::pow(static_cast<double>(warmup), -1.5));
}

template <typename T>
std::pair<Tensor<T>, std::size_t> label_smoothed_ce(Graph<T>& g, const Tensor<T>& logits,
                                                    const std::vector<int>& targets, double eps) {
  const auto count = static_cast<std::size_t>(
      std::count_if(targets.begin(), targets.end(), [](int t) { return t != Vocabulary::kPad; }));
  return {g.smoothed_cross_entropy(logits, targets, static_cast<T>(eps), Vocabulary::kPad), count};
}

template <typename T>
Tensor<T> multilingual_loss(Graph<T>& g, const std::vector<std::pair<Tensor<T>, std::size_t>>& parts) {
  std::size_t total = 0;
  for (const auto& p : parts) total += p.second;
  if (total == 0) throw DataError("batch has no target tokens");
  Tensor<T> sum = parts.front().first;
  for (std::size_t i = 1; i < parts.size(); ++i) sum = g.add(sum, parts[i].first);
  return g.scale(sum, static_cast<T>(1.0 / static_cast<double>(total)));
}

template <typename T>
Tensor<T> batch_loss(Graph<T>& g, const ParameterTable<T>& table, const Batch& batch, double label_smoothing,
                     LossWeighting weighting, std::size_t* tokens) {
  std::vector<std::pair<Tensor<T>, std::size_t>> parts;
  std::vector<Tensor<T>> sentences;
  for (const auto& part : batch.parts) {
    Transformer<T> model(table, part.language);
    auto enc = model.encode(g, part.src);
    auto dec = model.decode(g, part.tgt_in, enc, part.src);
    auto logits = model.logits(g, dec);
    if (weighting == LossWeighting::kTokens) {
      parts.push_back(label_smoothed_ce(g, logits, part.tgt_out, label_smoothing));
      continue;
    }
    const std::size_t time = part.tgt_in.time;
    for (std::size_t b = 0; b < part.tgt_in.batch; ++b) {
      std::vector<int> rows(part.tgt_in.lengths[b]);
      std::vector<int> targets(rows.size());
      for (std::size_t t = 0; t < rows.size(); ++t) {
        rows[t] = static_cast<int>(b * time + t);
        targets[t] = part.tgt_out[b * time + t];
      }
      auto [sum, count] = label_smoothed_ce(g, g.gather_rows(logits, rows), targets, label_smoothing);
      sentences.push_back(g.scale(sum, static_cast<T>(1.0 / static_cast<double>(count))));
      parts.push_back({Tensor<T>(), count});
    }
  }
  if (tokens) {
    *tokens = 0;
    for (const auto& p : parts) *tokens += p.second;
  }
  if (weighting == LossWeighting::kTokens) return multilingual_loss(g, parts);
  if (sentences.empty()) throw DataError("batch has no sentences");
  Tensor<T> sum = sentences.front();
  for (std::size_t i = 1; i < sentences.size(); ++i) sum = g.add(sum, sentences[i]);
  return g.scale(sum, static_cast<T>(1.0 / static_cast<double>(sentences.size())));
}

template std::pair<Tensor<float>, std::size_t> label_smoothed_ce(Graph<float>&, const Tensor<float>&,
                                                                 const std::vector<int>&, double);
template std::pair<Tensor<double>, std::size_t> label_smoothed_ce(Graph<double>&, const Tensor<double>&,
                                                                  const std::vector<int>&, double);
template Tensor<float> multilingual_loss(Graph<float>&, const std::vector<std::pair<Tensor<float>, std::size_t>>&);
template Tensor<double> multilingual_loss(Graph<double>&,
                                          const std::vector<std::pair<Tensor<double>, std::size_t>>&);
template Tensor<float> batch_loss(Graph<float>&, const ParameterTable<float>&, const Batch&, double, LossWeighting,
                                  std::size_t*);
template Tensor<double> batch_loss(Graph<double>&, const ParameterTable<double>&, const Batch&, double,
                                   LossWeighting, std::size_t*);

Adam::Adam(const TrainConfig& config, const std::vector<Tensor<float>>& cells)
    : beta1_(config.beta1), beta2_(config.beta2), eps_(config.adam_eps) {
  for (const auto& c : cells) {
    m_.emplace_back(c.size(), 0.0f);
    v_.emplace_back(c.size(), 0.0f);
  }
}

void Adam::step(std::vector<Tensor<float>>& cells, const std::vector<std::string>& names, double lr) {
  if (cells.size() != m_.size()) throw ConfigError("optimizer state does not match the parameter table");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!cells[i].has_grad()) continue;
    for (float x : cells[i].grad()) {
      if (!std::isfinite(x)) {
        throw NonFiniteError("non-finite gradient in " + (i < names.size() ? names[i] : std::to_string(i)));
      }
    }
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(beta1_, t);
  const double c2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto values = cells[i].mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const bool has = cells[i].has_grad();
    const auto grad = cells[i].grad();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = has ? grad[j] : 0.0;
      m[j] = static_cast<float>(beta1_ * m[j] + (1.0 - beta1_) * g);
      v[j] = static_cast<float>(beta2_ * v[j] + (1.0 - beta2_) * g * g);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      values[j] = static_cast<float>(values[j] - lr * mhat / (std::sqrt(vhat) + eps_));
    }
    cells[i].zero_grad();
  }
}

Trainer::Trainer(const ModelConfig& model, const SharingPlan& plan, const TrainConfig& config,
                 const Vocabulary& vocab, const BpeModel& bpe, std::vector<Example> train, DevSet dev)
    : model_(model),
      plan_(plan),
      config_(config),
      vocab_(vocab),
      bpe_(bpe),
      train_(std::move(train)),
      dev_(std::move(dev)) {
  model_.validate();
  if (static_cast<std::size_t>(model_.vocab_size) != vocab_.size()) {
    throw ConfigError("model vocab_size " + std::to_string(model_.vocab_size) + " but vocabulary has " +
                      std::to_string(vocab_.size()) + " tokens");
  }
  if (train_.empty()) throw DataError("no training examples");
  if (dev_.references.size() != dev_.examples.size()) throw DataError("dev references do not match dev examples");
  if (config_.eval_interval == 0) throw ConfigError("eval_interval must be positive");
  std::set<std::string> langs;
  for (const auto& e : train_) langs.insert(e.language);
  for (const auto& e : dev_.examples) langs.insert(e.language);
  for (const auto& l : langs) {
    if (!plan_.serves(l)) throw PlanError("language '" + l + "' is not served by the sharing plan");
  }
  languages_.assign(langs.begin(), langs.end());
  table_ = ParameterTable<float>::resolve(model_, plan_);
  init_parameters(table_, config_.seed);
  adam_ = Adam(config_, table_.cells());
}

std::vector<Batch> Trainer::epoch_batches(std::size_t epoch) const {
  return make_batches(train_, BatchOptions{config_.token_budget, config_.batch_mode, config_.seed}, epoch);
}

double Trainer::train_step(const Batch& batch) {
  const std::size_t step = step_ + 1;
  Graph<float> g({.training = true, .record = true, .seed = derive_seed(config_.seed, step)});
  double value = 0.0;
  try {
    auto loss = batch_loss(g, table_, batch, config_.label_smoothing, config_.weighting);
    value = loss.item();
    g.backward(loss);
    std::vector<std::string> names;
    for (std::size_t i = 0; i < table_.cell_count(); ++i) names.push_back(table_.cell_name(i));
    adam_.step(table_.cells(), names, lr_at(step, model_.d_model, config_.warmup, config_.lr_scale));
  } catch (const NonFiniteError& e) {
    throw NonFiniteError("step " + std::to_string(step) + ": " + e.what());
  }
  step_ = step;
  return value;
}

std::vector<double> Trainer::advance(std::size_t n) {
  std::vector<double> losses;
  std::vector<Batch> batches = epoch_batches(epoch_);
  for (std::size_t i = 0; i < n; ++i) {
    if (batch_in_epoch_ >= batches.size()) {
      ++epoch_;
      batch_in_epoch_ = 0;
      batches = epoch_batches(epoch_);
    }
    losses.push_back(train_step(batches[batch_in_epoch_]));
    ++batch_in_epoch_;
  }
  return losses;
}

double Trainer::accuracy(const std::vector<Example>& examples) const {
  std::size_t correct = 0, total = 0;
  for (const auto& positions : chunks(examples.size(), 64)) {
    auto batch = assemble_batch(examples, positions);
    for (const auto& part : batch.parts) {
      Transformer<float> model(table_, part.language);
      Graph<float> g({.training = false, .record = false});
      auto logits = model.logits(g, model.decode(g, part.tgt_in, model.encode(g, part.src), part.src));
      const std::size_t v = logits.cols();
      for (std::size_t r = 0; r < part.tgt_out.size(); ++r) {
        if (part.tgt_out[r] == Vocabulary::kPad) continue;
        auto row = logits.data().subspan(r * v, v);
        const auto best = std::max_element(row.begin(), row.end()) - row.begin();
        correct += best == part.tgt_out[r] ? 1 : 0;
        ++total;
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

double Trainer::loss(const std::vector<Example>& examples) const {
  double sum = 0.0;
  std::size_t tokens = 0;
  for (const auto& positions : chunks(examples.size(), 64)) {
    auto batch = assemble_batch(examples, positions);
    Graph<float> g({.training = false, .record = false});
    std::size_t n = 0;
    auto l = batch_loss(g, table_, batch, config_.label_smoothing, LossWeighting::kTokens, &n);
    sum += static_cast<double>(l.item()) * static_cast<double>(n);
    tokens += n;
  }
  return tokens == 0 ? 0.0 : sum / static_cast<double>(tokens);
}

std::vector<std::vector<std::string>> Trainer::translate(const std::vector<Example>& examples,
                                                         const BeamConfig& beam) const {
  std::vector<std::vector<std::string>> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(ids_to_words(translate_ids(table_, e.language, e.src, beam), vocab_, bpe_));
  return out;
}

EvalResult Trainer::evaluate() const {
  EvalResult r;
  r.train_accuracy = accuracy(train_);
  if (dev_.examples.empty()) return r;
  const auto hyps = translate(dev_.examples, config_.dev_beam);
  for (const auto& lang : languages_) {
    std::vector<std::vector<std::string>> h, ref;
    for (std::size_t i = 0; i < dev_.examples.size(); ++i) {
      if (dev_.examples[i].language != lang) continue;
      h.push_back(hyps[i]);
      ref.push_back(dev_.references[i]);
    }
    if (h.empty()) continue;
    r.bleu[lang] = bleu(h, ref).score;
    r.mean_bleu += r.bleu[lang];
  }
  if (!r.bleu.empty()) r.mean_bleu /= static_cast<double>(r.bleu.size());
  r.dev_loss = loss(dev_.examples);
  return r;
}

TrainResult Trainer::run(const std::string& out_dir, std::ostream* log) {
  namespace fs = std::filesystem;
  using Clock = std::chrono::steady_clock;
  if (!out_dir.empty()) fs::create_directories(out_dir);
  TrainResult result;
  // A resumed run keeps the rows already logged up to the restored step.
  std::vector<std::string> earlier_rows;
  if (step_ > 0 && !out_dir.empty()) {
    std::ifstream old(fs::path(out_dir) / "metrics.csv");
    std::string line;
    std::getline(old, line);
    while (std::getline(old, line)) {
      if (!line.empty() && std::stoull(line.substr(0, line.find(','))) <= step_) earlier_rows.push_back(line);
    }
  }
  std::vector<Batch> batches = epoch_batches(epoch_);
  double window_loss = 0.0, window_seconds = 0.0;
  std::size_t window_steps = 0, window_tokens = 0;
  while (step_ < config_.max_steps) {
    if (batch_in_epoch_ >= batches.size()) {
      ++epoch_;
      batch_in_epoch_ = 0;
      batches = epoch_batches(epoch_);
    }
    const auto& batch = batches[batch_in_epoch_];
    const auto start = Clock::now();
    const double l = train_step(batch);
    window_seconds += std::chrono::duration<double>(Clock::now() - start).count();
    ++batch_in_epoch_;
    result.losses.push_back(l);
    window_loss += l;
    window_tokens += batch.tgt_subwords;
    ++window_steps;
    if (step_ % config_.eval_interval != 0 && step_ != config_.max_steps) continue;

    const auto eval = evaluate();
    MetricsRow row;
    row.step = step_;
    row.lr = lr_at(step_, model_.d_model, config_.warmup, config_.lr_scale);
    row.train_loss = window_loss / static_cast<double>(window_steps);
    row.dev_bleu = eval.bleu;
    row.tokens_per_sec = window_seconds > 0 ? static_cast<double>(window_tokens) / window_seconds : 0.0;
    result.metrics.push_back(row);
    window_loss = window_seconds = 0.0;
    window_steps = window_tokens = 0;

    // Without a dev set the selection metric falls back to training accuracy.
    const double metric = dev_.examples.empty() ? 100.0 * eval.train_accuracy : eval.mean_bleu;
    const bool improved =
        metric > best_metric_ || (metric == best_metric_ && eval.dev_loss < best_dev_loss_);
    if (improved) {
      best_metric_ = metric;
      best_dev_loss_ = eval.dev_loss;
      best_step_ = step_;
      evals_since_best_ = 0;
    } else {
      ++evals_since_best_;
    }
    if (!out_dir.empty()) {
      const auto ckpt = checkpoint();
      if (improved) save_checkpoint(ckpt, (fs::path(out_dir) / "best.ckpt").string());
      save_checkpoint(ckpt, (fs::path(out_dir) / "last.ckpt").string());
      std::ostringstream fresh;
      write_metrics_csv(result.metrics, languages_, fresh);
      const auto text = fresh.str();
      const auto header_end = text.find('\n') + 1;
      std::ofstream csv(fs::path(out_dir) / "metrics.csv");
      csv << text.substr(0, header_end);
      for (const auto& r : earlier_rows) csv << r << '\n';
      csv << text.substr(header_end);
    }
    if (log) {
      *log << "step " << step_ << " lr " << row.lr << " loss " << fixed(row.train_loss, 4) << " acc "
           << fixed(100.0 * eval.train_accuracy, 2);
      for (const auto& [lang, b] : eval.bleu) *log << " bleu_" << lang << ' ' << fixed(b, 2);
      *log << " tok/s " << fixed(row.tokens_per_sec, 0) << '\n';
      log->flush();
    }
    result.final_train_accuracy = eval.train_accuracy;
    if (config_.target_train_accuracy > 0 && eval.train_accuracy >= config_.target_train_accuracy) {
      result.reached_target = true;
      break;
    }
    if (evals_since_best_ >= config_.patience) {
      result.patience_exhausted = true;
      break;
    }
  }
  result.steps = step_;
  result.best_mean_bleu = best_metric_;
  result.best_step = best_step_;
  return result;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.model = model_;
  c.plan = plan_;
  c.vocab_hash = vocab_.hash();
  c.step = step_;
  c.epoch = epoch_;
  c.batch_in_epoch = batch_in_epoch_;
  c.best_metric = best_metric_;
  c.best_dev_loss = best_dev_loss_;
  c.best_step = best_step_;
  c.evals_since_best = evals_since_best_;
  for (std::size_t i = 0; i < table_.cell_count(); ++i) {
    c.names.push_back(table_.cell_name(i));
    c.cells.push_back(table_.cells()[i].clone());
  }
  c.adam_m = adam_.first_moments();
  c.adam_v = adam_.second_moments();
  c.adam_steps = adam_.steps();
  return c;
}

void Trainer::restore(const Checkpoint& ckpt) {
  if (!(ckpt.plan == plan_)) throw PlanError("checkpoint was trained under a different sharing plan");
  if (!(ckpt.model == model_)) throw ConfigError("checkpoint model configuration differs from the run");
  if (ckpt.vocab_hash != vocab_.hash()) throw VocabularyError("checkpoint was trained with a different vocabulary");
  if (ckpt.cells.size() != table_.cell_count() || ckpt.adam_m.size() != table_.cell_count() ||
      ckpt.adam_v.size() != table_.cell_count()) {
    throw IntegrityError("checkpoint cell count does not match the plan");
  }
  for (std::size_t i = 0; i < table_.cell_count(); ++i) {
    const auto& cell = table_.cells()[i];
    if (ckpt.names[i] != table_.cell_name(i) || ckpt.cells[i].shape() != cell.shape() ||
        ckpt.adam_m[i].size() != cell.size() || ckpt.adam_v[i].size() != cell.size()) {
      throw IntegrityError("checkpoint cell " + ckpt.names[i] + " does not match " + table_.cell_name(i));
    }
  }
  for (std::size_t i = 0; i < table_.cell_count(); ++i) {
    auto dst = table_.cells()[i].mutable_data();
    std::copy(ckpt.cells[i].data().begin(), ckpt.cells[i].data().end(), dst.begin());
    table_.cells()[i].zero_grad();
  }
  adam_.first_moments() = ckpt.adam_m;
  adam_.second_moments() = ckpt.adam_v;
  adam_.set_steps(ckpt.adam_steps);
  step_ = ckpt.step;
  epoch_ = ckpt.epoch;
  batch_in_epoch_ = ckpt.batch_in_epoch;
  best_metric_ = ckpt.best_metric;
  best_dev_loss_ = ckpt.best_dev_loss;
  best_step_ = ckpt.best_step;
  evals_since_best_ = ckpt.evals_since_best;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::vector<std::string>& languages,
                       std::ostream& out) {
  out << "step,lr,train_loss";
  for (const auto& l : languages) out << ",dev_bleu_" << l;
  out << ",tokens_per_sec\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.step;
    std::snprintf(buf, sizeof buf, ",%.9e,%.6f", r.lr, r.train_loss);
    out << buf;
    for (const auto& l : languages) {
      auto it = r.dev_bleu.find(l);
      out << ',' << (it == r.dev_bleu.end() ? std::string() : fixed(it->second, 4));
    }
    out << ',' << fixed(r.tokens_per_sec, 1) << '\n';
  }
}

}  // namespace parshare

// Runs every acceptance criterion and prints one PASS/FAIL line for each.
// Exit status is nonzero when any gating criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "parshare/decode.hpp"
#include "parshare/errors.hpp"
#include "parshare/model.hpp"
#include "parshare/training.hpp"
#include "run_config.hpp"

using namespace parshare;

namespace {

// Tolerances and budgets.
constexpr double kGradCheckStep = 1e-3;
constexpr double kGradCheckTolerance = 1e-4;
constexpr double kGradCheckSeconds = 60.0;
constexpr double kSharedGradTolerance = 1e-6;
constexpr double kLrTolerance = 1e-9;
constexpr double kUniformCeTolerance = 1e-6;
constexpr std::size_t kToyStepBudget = 2000;
constexpr double kToyAccuracy = 0.99;
constexpr double kToySeconds = 300.0;
constexpr double kToyBleu = 95.0;

const std::string kToyConfig = std::string(PARSHARE_SOURCE_DIR) + "/data/toy/toy.cfg";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Check {
  bool ok = true;
  std::ostringstream detail;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail << " [failed: " << what << "]";
    }
  }
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

cli::Prepared toy(const std::vector<std::string>& overrides = {}) {
  auto config = cli::RunConfig::load(kToyConfig);
  for (const auto& o : overrides) config.override_with(o);
  return cli::prepare(config, "", nullptr);
}

TrainConfig toy_training(const std::vector<std::string>& overrides = {}) {
  auto config = cli::RunConfig::load(kToyConfig);
  for (const auto& o : overrides) config.override_with(o);
  return config.train;
}

// 1. Parameter accounting against closed-form weight counts.
Check parameter_accounting() {
  Check c;
  ModelConfig m;  // L=6, d=512, d_ff=2048, 8 heads
  const std::vector<std::string> targets = {"de", "nl"};
  const std::uint64_t d = 512, ff = 2048, layers = 6;
  const std::uint64_t enc = layers * (4 * d * d + 2 * d * ff);
  const std::uint64_t dec = layers * (8 * d * d + 2 * d * ff);
  auto shared_decoder = [&](Strategy s) -> std::uint64_t {
    switch (s) {
      case Strategy::kFfn: return layers * 2 * d * ff;
      case Strategy::kSelfAttn:
      case Strategy::kEncDecAttn:
      case Strategy::kKvBoth:
      case Strategy::kKqBoth: return layers * 4 * d * d;
      case Strategy::kAttnBoth: return layers * 8 * d * d;
      case Strategy::kFull: return dec;
      default: return 0;
    }
  };
  auto oracle = [&](Strategy s, std::uint64_t v) {
    const std::uint64_t embeddings = s == Strategy::kNone ? 2 : 1;
    const std::uint64_t encoders = (s == Strategy::kNone || s == Strategy::kEmbed) ? 2 : 1;
    return embeddings * v * d + encoders * enc + 2 * dec - shared_decoder(s);
  };
  auto weights = [&](Strategy s, int v) {
    m.vocab_size = v;
    return count_parameters(m, plan_from_strategy(s, targets, m)).weights_only;
  };
  auto millions = [](std::uint64_t x) { return std::llround(static_cast<double>(x) / 1e6); };
  for (auto s : builtin_strategies()) {
    c.require(weights(s, 33200) == oracle(s, 33200), std::string(strategy_name(s)) + " weight count vs closed form");
  }
  const auto embed = weights(Strategy::kEmbed, 33200), embed_enc = weights(Strategy::kEmbedEnc, 33200);
  c.require(embed - embed_enc == 18874368, "encoder delta");
  c.require(embed_enc - weights(Strategy::kFfn, 33200) == 12582912, "FFN delta");
  for (auto s : {Strategy::kSelfAttn, Strategy::kEncDecAttn, Strategy::kKqBoth, Strategy::kKvBoth}) {
    c.require(embed_enc - weights(s, 33200) == 6291456, std::string(strategy_name(s)) + " delta");
  }
  const std::vector<std::pair<Strategy, long long>> published = {{Strategy::kEmbed, 105},   {Strategy::kEmbedEnc, 86},
                                                                 {Strategy::kKqBoth, 80},   {Strategy::kFfn, 74},
                                                                 {Strategy::kFull, 61},     {Strategy::kNone, 122}};
  for (const auto& [s, expect] : published) {
    c.require(millions(weights(s, 33200)) == expect, std::string(strategy_name(s)) + " rounded total");
    for (int v : {33000, 33400}) {
      const double off = std::abs(static_cast<double>(weights(s, v)) - 1e6 * static_cast<double>(expect));
      c.require(off <= 1e6, std::string(strategy_name(s)) + " total at V=" + std::to_string(v));
    }
  }
  m.vocab_size = 33200;
  const auto none = count_parameters(m, plan_from_strategy(Strategy::kNone, targets, m));
  const auto full = count_parameters(m, plan_from_strategy(Strategy::kFull, targets, m));
  c.require(none.total == 2 * full.total && none.weights_only == 2 * full.weights_only, "NONE = 2 x FULL");
  c.detail << "EMBED " << millions(embed) << "M, EMBED_ENC " << millions(embed_enc) << "M, KQ_BOTH "
           << millions(weights(Strategy::kKqBoth, 33200)) << "M, FFN " << millions(weights(Strategy::kFfn, 33200))
           << "M, FULL " << millions(full.weights_only) << "M, NONE " << millions(none.weights_only) << "M";
  return c;
}

ModelConfig tiny() {
  ModelConfig m;
  m.num_layers = 2;
  m.d_model = 8;
  m.heads = 2;
  m.d_ff = 16;
  m.vocab_size = 17;
  m.dropout = 0.0;
  return m;
}

// Two-language batch over the tiny vocabulary, T <= 5 on both sides.
Batch tiny_batch() {
  std::vector<Example> ex;
  auto add = [&](const std::string& lang, int tag, std::vector<int> src, std::vector<int> tgt) {
    Example e;
    e.index = ex.size();
    e.language = lang;
    e.src = {tag};
    e.src.insert(e.src.end(), src.begin(), src.end());
    e.tgt_in = {Vocabulary::kBos};
    e.tgt_in.insert(e.tgt_in.end(), tgt.begin(), tgt.end());
    e.tgt_out = tgt;
    e.tgt_out.push_back(Vocabulary::kEos);
    ex.push_back(e);
  };
  add("de", 4, {6, 7, 8, 9}, {10, 11, 12, 13});
  add("de", 4, {14, 15}, {16, 6});
  add("nl", 5, {7, 9, 11}, {12, 8, 14, 15});
  return assemble_batch(ex, {0, 1, 2});
}

// 2. End-to-end gradient check of the tiny model.
//
// Central differences are only meaningful where the loss is smooth within +-h,
// so the FFN is set up so no ReLU input can come near zero: W1 is scaled by
// 0.1 and b1 alternates +-1. The FFN input is a layer-norm output (norm
// sqrt(d) with unit gain), so every |W1 x| stays below 0.5 and half the units
// are always on, half always off. Everything else keeps its regular init.
void make_tiny_smooth(ParameterTable<double>& table) {
  init_parameters(table, 11);
  for (std::size_t i = 0; i < table.cell_count(); ++i) {
    const auto role = table.cell_slots(i).front().role;
    auto data = table.cells()[i].mutable_data();
    if (role == Role::kL1) {
      for (auto& x : data) x *= 0.1;
    } else if (role == Role::kB1) {
      for (std::size_t k = 0; k < data.size(); ++k) data[k] = k % 2 == 0 ? 1.0 : -1.0;
    }
  }
}

Check gradient_correctness() {
  Check c;
  const auto start = Clock::now();
  double worst = 0.0, worst_fine = 0.0, largest_bad_grad = 0.0;
  std::size_t coords = 0, bad = 0;
  for (auto norm : {NormPlacement::kPre, NormPlacement::kPost}) {
    auto m = tiny();
    m.norm = norm;
    auto table = ParameterTable<double>::resolve(m, plan_from_strategy(Strategy::kNone, {"de", "nl"}, m));
    make_tiny_smooth(table);
    const auto batch = tiny_batch();
    LossBuilder loss = [&](Graph<double>& g) { return batch_loss(g, table, batch, 0.1, LossWeighting::kTokens); };
    std::vector<Tensor<double>> params(table.cells().begin(), table.cells().end());
    const auto report = grad_check(loss, params, kGradCheckStep);
    for (std::size_t i = 0; i < params.size(); ++i) {
      c.require(report.max_relative_error[i] < kGradCheckTolerance, table.cell_name(i) + " (" + to_string(norm) + ")");
    }
    worst = std::max(worst, report.worst());

    // Diagnostics only: how many coordinates miss, how large their gradients
    // are, and the error at a 10x smaller step.
    worst_fine = std::max(worst_fine, grad_check(loss, params, kGradCheckStep / 10).worst());
    {
      Graph<double> g;
      g.backward(loss(g));
    }
    auto evaluate = [&] {
      GraphOptions o;
      o.record = false;
      Graph<double> g(o);
      return loss(g).item();
    };
    for (auto& p : params) {
      auto values = p.mutable_data();
      for (std::size_t k = 0; k < values.size(); ++k) {
        const double x = values[k];
        values[k] = x + kGradCheckStep;
        const double up = evaluate();
        values[k] = x - kGradCheckStep;
        const double down = evaluate();
        values[k] = x;
        const double numeric = (up - down) / (2 * kGradCheckStep);
        const double analytic = p.grad()[k];
        ++coords;
        if (std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-8}) >=
            kGradCheckTolerance) {
          ++bad;
          largest_bad_grad = std::max(largest_bad_grad, std::abs(analytic));
        }
      }
      p.zero_grad();
    }
  }
  const double secs = seconds_since(start);
  c.require(secs < kGradCheckSeconds, "runtime");
  c.detail << " worst relative error " << fmt("%.2e", worst) << " at h=1e-3 (" << bad << " of " << coords
           << " coordinates over 1e-4, largest |grad| among them " << fmt("%.1e", largest_bad_grad)
           << "); worst " << fmt("%.2e", worst_fine) << " at h=1e-4; pre and post norm, " << fmt("%.1f", secs)
           << " s";
  return c;
}

// 3. Sharing semantics.
Check sharing_semantics() {
  Check c;
  auto p = toy({"model.layers=1", "model.d_model=16", "model.d_ff=32", "model.heads=2"});
  auto train = toy_training();
  train.max_steps = 10;
  // (a) groups stay bit-identical after 10 optimizer steps.
  for (auto s : builtin_strategies()) {
    Trainer t(p.model, plan_from_strategy(s, {"copy", "rev"}, p.model), train, p.vocab, p.bpe, p.train, {});
    t.advance(10);
    c.require(verify_table(t.table()).empty(), std::string(strategy_name(s)) + " groups after 10 steps");
  }
  // (b) FULL two-decoder training equals one unified model trained on the same stream.
  Trainer full(p.model, plan_from_strategy(Strategy::kFull, {"copy", "rev"}, p.model), train, p.vocab, p.bpe, p.train,
               {});
  Trainer unified(p.model, plan_from_strategy(Strategy::kNone, {std::string(kUnifiedTarget)}, p.model), train,
                  p.vocab, p.bpe, p.train, {});
  const auto a = full.advance(10), b = unified.advance(10);
  bool identical = a == b && full.table().cell_count() == unified.table().cell_count();
  for (std::size_t i = 0; identical && i < full.table().cell_count(); ++i) {
    const auto& x = full.table().cells()[i];
    const auto& y = unified.table().cells()[i];
    identical = x.size() == y.size() && std::memcmp(x.data().data(), y.data().data(), x.size() * sizeof(float)) == 0;
  }
  c.require(identical, "FULL vs unified bit identity");

  // (c) shared-cell gradients equal the sum of isolated per-slot gradients (64-bit).
  double worst = 0.0;
  auto m = p.model;
  m.dropout = 0.0;
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < p.train.size(); i += 9) positions.push_back(i);
  const auto batch = assemble_batch(p.train, positions);
  for (auto s : builtin_strategies()) {
    auto shared = ParameterTable<double>::resolve(m, plan_from_strategy(s, {"copy", "rev"}, m));
    init_parameters(shared, 3);
    auto isolated = ParameterTable<double>::resolve(m, plan_from_strategy(Strategy::kNone, {"copy", "rev"}, m));
    for (std::size_t i = 0; i < isolated.cell_count(); ++i) {
      const auto& src = shared.slot(isolated.cell_slots(i).front()).data();
      std::copy(src.begin(), src.end(), isolated.cells()[i].mutable_data().begin());
    }
    Graph<double> gs, gi;
    gs.backward(batch_loss(gs, shared, batch, 0.1, LossWeighting::kTokens));
    gi.backward(batch_loss(gi, isolated, batch, 0.1, LossWeighting::kTokens));
    for (std::size_t i = 0; i < shared.cell_count(); ++i) {
      std::vector<double> sum(shared.cells()[i].size(), 0.0);
      for (const auto& slot : shared.cell_slots(i)) {
        const auto& iso = isolated.slot(slot);
        if (!iso.has_grad()) continue;
        for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += iso.grad()[j];
      }
      const auto& cell = shared.cells()[i];
      for (std::size_t j = 0; j < sum.size(); ++j) {
        worst = std::max(worst, std::abs((cell.has_grad() ? cell.grad()[j] : 0.0) - sum[j]));
      }
    }
  }
  c.require(worst <= kSharedGradTolerance, "shared gradient = sum of isolated gradients");
  c.detail << "verify_table clean after 10 steps for all 10 strategies; FULL vs unified "
           << (identical ? "bit-identical" : "DIFFERENT") << " over 10 steps; max |shared - sum isolated| "
           << fmt("%.1e", worst);
  return c;
}

// 4. Schedule and loss formulas.
Check formulas() {
  Check c;
  double worst_lr = 0.0;
  for (double s : {1.0, 100.0, 16000.0, 64000.0}) {
    const double closed = 2.0 * std::pow(512.0, -0.5) * std::min(std::pow(s, -0.5), s * std::pow(16000.0, -1.5));
    worst_lr = std::max(worst_lr, std::abs(lr_at(static_cast<std::size_t>(s), 512, 16000) / closed - 1.0));
  }
  c.require(worst_lr <= kLrTolerance, "lr closed form");
  c.require(std::abs(lr_at(16000, 512, 16000) - 6.988e-4) < 5e-7, "lr peak");
  double worst_ce = 0.0;
  for (std::size_t v : {4, 17, 100}) {
    Graph<double> g;
    std::vector<int> targets = {1, 2, 3};
    auto [loss, n] = label_smoothed_ce(g, Tensor<double>::filled({3, v}, -0.7), targets, 0.1);
    worst_ce = std::max(worst_ce, std::abs(loss.item() / n - std::log(static_cast<double>(v))));
  }
  c.require(worst_ce <= kUniformCeTolerance, "uniform CE = ln V");
  c.detail << "lr max relative error " << fmt("%.1e", worst_lr) << ", peak " << fmt("%.4e", lr_at(16000, 512, 16000))
           << "; uniform CE max |loss - ln V| " << fmt("%.1e", worst_ce);
  return c;
}

// 5. Desk-scale training on the toy copy + reverse corpus.
Check toy_training_check() {
  Check c;
  auto p = toy();
  auto train = toy_training();
  train.max_steps = kToyStepBudget;
  train.eval_interval = 50;
  train.patience = kToyStepBudget;  // stop on the accuracy target or the step budget only
  std::vector<std::vector<std::string>> refs;
  const auto sources = cli::prepare_references(
      {read_parallel("copy", std::string(PARSHARE_SOURCE_DIR) + "/data/toy/train.src",
                     std::string(PARSHARE_SOURCE_DIR) + "/data/toy/train.copy"),
       read_parallel("rev", std::string(PARSHARE_SOURCE_DIR) + "/data/toy/train.src",
                     std::string(PARSHARE_SOURCE_DIR) + "/data/toy/train.rev")},
      p.bpe, p.vocab, kMaxSubwords);
  double max_secs = 0.0, min_bleu = 100.0, min_acc = 1.0;
  std::size_t max_steps = 0;
  for (auto s : builtin_strategies()) {
    const auto start = Clock::now();
    Trainer t(p.model, plan_from_strategy(s, {"copy", "rev"}, p.model), train, p.vocab, p.bpe, p.train, {});
    const auto r = t.run();
    const double secs = seconds_since(start);
    const double acc = t.accuracy(p.train);
    BeamConfig beam;
    beam.width = 5;
    beam.alpha = 1.0;
    const double score = bleu(t.translate(sources.examples, beam), sources.references).score;
    const std::string name(strategy_name(s));
    c.require(acc > kToyAccuracy, name + " accuracy " + fmt("%.4f", acc));
    c.require(r.steps <= kToyStepBudget, name + " steps");
    c.require(secs < kToySeconds, name + " time " + fmt("%.0f s", secs));
    c.require(score > kToyBleu, name + " BLEU " + fmt("%.2f", score));
    std::cerr << "  " << name << ": " << r.steps << " steps, accuracy " << fmt("%.4f", acc) << ", BLEU "
              << fmt("%.2f", score) << ", " << fmt("%.1f", secs) << " s\n";
    max_secs = std::max(max_secs, secs);
    min_bleu = std::min(min_bleu, score);
    min_acc = std::min(min_acc, acc);
    max_steps = std::max(max_steps, r.steps);
  }
  c.detail << "all 10 strategies: min accuracy " << fmt("%.4f", min_acc) << ", max steps " << max_steps
           << ", max time " << fmt("%.1f", max_secs) << " s, min beam-5 BLEU " << fmt("%.2f", min_bleu);
  return c;
}

std::vector<std::vector<std::string>> words(const std::vector<std::string>& lines) {
  std::vector<std::vector<std::string>> out;
  for (const auto& l : lines) out.push_back(split_tokens(l));
  return out;
}

// 6. Evaluation oracles.
Check evaluation_oracles() {
  Check c;
  const auto refs = words({"the cat sat on the mat", "a quick brown fox", "x"});
  c.require(fmt("%.2f", bleu(refs, refs).score) == "100.00", "BLEU(x, x)");
  const auto clip = bleu(words({"the the the the the the the"}), words({"the cat is on the mat"}));
  c.require(clip.matches[0] == 2 && clip.totals[0] == 7, "2/7 clipping");

  ModelConfig m = tiny();
  m.num_layers = 1;
  m.vocab_size = 12;
  std::size_t agree = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto table = ParameterTable<float>::resolve(m, plan_from_strategy(Strategy::kNone, {"xx"}, m));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    for (std::size_t i = 0; i < table.cell_count(); ++i) {
      const bool gain = table.cell_slots(i).front().role == Role::kGain;
      for (auto& x : table.cells()[i].mutable_data()) x = gain ? 1.0f : u(rng);
    }
    const std::vector<int> src = {4, 5 + static_cast<int>(seed % 6), 6, 7};
    auto scorer = model_scorer(table, "xx", src);
    BeamConfig one;
    one.width = 1;
    const auto b = beam_search(scorer, 12, Vocabulary::kEos, one);
    const auto g = greedy(scorer, 12, Vocabulary::kEos);
    agree += b.best.tokens == g.tokens ? 1 : 0;
  }
  c.require(agree == 100, "beam 1 = greedy (" + std::to_string(agree) + "/100)");

  const auto f1 = fmeasure_buckets(words({"a", "a"}), words({"a b", "a b"}), {{"a", 3}, {"b", 50}}, default_buckets());
  c.require(f1[1].f == 1.0 && f1[3].f == 0.0, "F-measure: a=1, b=0");
  const auto f2 = fmeasure_buckets(words({"w"}), words({"w w"}), {{"w", 7}}, default_buckets());
  c.require(std::abs(f2[2].f - 2.0 / 3.0) < 1e-12, "F-measure: 2/3");
  const auto same = words({"x y z", "y y q"});
  bool ones = true;
  for (const auto& b : fmeasure_buckets(same, same, {{"x", 1}, {"y", 2000}}, default_buckets())) {
    if (b.types > 0 && b.f != 1.0) ones = false;
  }
  c.require(ones, "F-measure: identical corpora give 1");
  c.detail << "BLEU(x,x) = 100.00, unigram clip " << clip.matches[0] << "/" << clip.totals[0] << ", beam-1 = greedy on "
           << agree << "/100 models, F-measure hand cases match";
  return c;
}

// 7. Non-gating demo: FULL vs KQ_BOTH on a divergent task pair (copy vs sort).
Check divergent_demo() {
  Check c;
  auto config = cli::RunConfig::load(std::string(PARSHARE_SOURCE_DIR) + "/data/toy/copy_sort.cfg");
  c.detail << "full-scale BLEU needs TED-scale data and GPU training and is not reproduced here; toy dev BLEU after 600 steps:";
  for (auto s : {Strategy::kFull, Strategy::kKqBoth}) {
    config.strategy = s;
    auto p = cli::prepare(config, "", nullptr);
    Trainer t(p.model, p.plan, config.train, p.vocab, p.bpe, p.train, p.dev);
    t.run();
    const auto eval = t.evaluate();
    c.detail << ' ' << strategy_name(s);
    for (const auto& [lang, b] : eval.bleu) {
      c.detail << ' ' << lang << '=' << fmt("%.2f", b);
      c.require(std::isfinite(b), "finite BLEU");
    }
  }
  c.detail << " (no ordering asserted)";
  return c;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Check()>>> criteria = {
      {"1 parameter accounting", parameter_accounting},
      {"2 gradient correctness", gradient_correctness},
      {"3 sharing semantics", sharing_semantics},
      {"4 schedule and loss formulas", formulas},
      {"5 desk-scale toy training", toy_training_check},
      {"6 evaluation oracles", evaluation_oracles},
      {"7 non-reproducibility demo (non-gating)", divergent_demo},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Check c;
    try {
      c = run();
    } catch (const std::exception& e) {
      c.ok = false;
      c.detail << " [error: " << e.what() << "]";
    }
    std::cout << (c.ok ? "PASS" : "FAIL") << "  criterion " << name << ": " << c.detail.str() << std::endl;
    if (!c.ok && name.find("non-gating") == std::string::npos) ++failed;
  }
  return failed == 0 ? 0 : 1;
}

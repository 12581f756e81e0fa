#include "run_config.hpp"

#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include "parshare/decode.hpp"
#include "parshare/errors.hpp"

namespace parshare::cli {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v.front() == '-') throw std::invalid_argument("negative");
    const auto x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return static_cast<std::size_t>(x);
  } catch (const std::logic_error&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

int to_int(const std::string& key, const std::string& v) {
  const auto x = to_size(key, v);
  if (x > 1u << 30) throw ConfigError(key + ": value " + v + " is too large");
  return static_cast<int>(x);
}

double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::logic_error&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

std::string real(double x) {
  std::ostringstream s;
  s.precision(17);
  s << x;
  return s.str();
}

std::string batch_mode_name(BatchMode m) { return m == BatchMode::kBalanced ? "balanced" : "bilingual"; }

}  // namespace

RunConfig RunConfig::parse(const std::string& text, const fs::path& base_dir) {
  RunConfig c;
  c.base_dir = base_dir;
  std::istringstream in(text);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    auto t = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": malformed section header");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    if (section.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": key outside any section");
    try {
      c.set(section, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return parse(s.str(), fs::path(path).parent_path());
}

void RunConfig::override_with(const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' must look like section.key=value");
  }
  set(trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)), trim(assignment.substr(eq + 1)));
}

void RunConfig::set(const std::string& section, const std::string& key, const std::string& v) {
  const std::string full = section + "." + key;
  if (section == "data") {
    const auto dot = key.find('.');
    if (dot != std::string::npos) {
      const auto field = key.substr(0, dot);
      const auto lang = key.substr(dot + 1);
      auto& f = files[lang];
      if (field == "train_source") {
        f.train_source = v;
      } else if (field == "train_target") {
        f.train_target = v;
      } else if (field == "dev_source") {
        f.dev_source = v;
      } else if (field == "dev_target") {
        f.dev_target = v;
      } else {
        throw ConfigError("unknown key " + full);
      }
      return;
    }
    if (key == "languages") {
      languages.clear();
      for (const auto& l : split_tokens(v)) languages.push_back(l);
    } else if (key == "bpe_model") {
      bpe_model = v;
    } else if (key == "bpe_merges") {
      bpe_merges = to_size(full, v);
    } else if (key == "vocab") {
      vocab = v;
    } else if (key == "max_subwords") {
      max_subwords = to_size(full, v);
    } else {
      throw ConfigError("unknown key " + full);
    }
  } else if (section == "model") {
    if (key == "layers") {
      model.num_layers = to_int(full, v);
    } else if (key == "d_model") {
      model.d_model = to_int(full, v);
    } else if (key == "d_ff") {
      model.d_ff = to_int(full, v);
    } else if (key == "heads") {
      model.heads = to_int(full, v);
    } else if (key == "dropout") {
      model.dropout = to_real(full, v);
    } else if (key == "max_position") {
      model.max_position = to_int(full, v);
    } else if (key == "norm") {
      model.norm = parse_norm_placement(v);
    } else if (key == "scaling") {
      model.scaling = parse_score_scaling(v);
    } else if (key == "vocab_size") {
      model.vocab_size = to_int(full, v);
    } else {
      throw ConfigError("unknown key " + full);
    }
  } else if (section == "sharing") {
    if (key == "strategy") {
      strategy = parse_strategy(v);
    } else if (key == "plan") {
      plan_file = v;
    } else {
      throw ConfigError("unknown key " + full);
    }
  } else if (section == "training") {
    auto& t = train;
    if (key == "seed") {
      t.seed = to_size(full, v);
    } else if (key == "warmup") {
      t.warmup = to_int(full, v);
    } else if (key == "lr_scale") {
      t.lr_scale = to_real(full, v);
    } else if (key == "beta1") {
      t.beta1 = to_real(full, v);
    } else if (key == "beta2") {
      t.beta2 = to_real(full, v);
    } else if (key == "adam_eps") {
      t.adam_eps = to_real(full, v);
    } else if (key == "label_smoothing") {
      t.label_smoothing = to_real(full, v);
    } else if (key == "token_budget") {
      t.token_budget = to_size(full, v);
    } else if (key == "batch_mode") {
      if (v == "balanced") {
        t.batch_mode = BatchMode::kBalanced;
      } else if (v == "bilingual") {
        t.batch_mode = BatchMode::kBilingual;
      } else {
        throw ConfigError(full + ": expected balanced or bilingual, got '" + v + "'");
      }
    } else if (key == "loss_weighting") {
      t.weighting = parse_loss_weighting(v);
    } else if (key == "max_steps") {
      t.max_steps = to_size(full, v);
    } else if (key == "eval_interval") {
      t.eval_interval = to_size(full, v);
    } else if (key == "patience") {
      t.patience = to_size(full, v);
    } else if (key == "target_train_accuracy") {
      t.target_train_accuracy = to_real(full, v);
    } else if (key == "dev_beam") {
      t.dev_beam.width = to_size(full, v);
    } else if (key == "dev_alpha") {
      t.dev_beam.alpha = to_real(full, v);
    } else {
      throw ConfigError("unknown key " + full);
    }
  } else if (section == "output") {
    if (key == "dir") {
      out_dir = v;
    } else {
      throw ConfigError("unknown key " + full);
    }
  } else {
    throw ConfigError("unknown section [" + section + "]");
  }
}

void RunConfig::validate() const {
  if (languages.empty()) throw ConfigError("data.languages is empty");
  std::set<std::string> seen;
  for (const auto& l : languages) {
    if (!seen.insert(l).second) throw ConfigError("language '" + l + "' listed twice");
    auto it = files.find(l);
    if (it == files.end() || it->second.train_source.empty() || it->second.train_target.empty()) {
      throw ConfigError("language '" + l + "' needs data.train_source." + l + " and data.train_target." + l);
    }
    if (it->second.dev_source.empty() != it->second.dev_target.empty()) {
      throw ConfigError("language '" + l + "' needs both dev_source and dev_target, or neither");
    }
  }
  for (const auto& [lang, f] : files) {
    if (!seen.count(lang)) throw ConfigError("data files given for '" + lang + "', which is not in data.languages");
  }
  if (strategy == Strategy::kExplicit && plan_file.empty()) throw ConfigError("strategy EXPLICIT needs sharing.plan");
  if (strategy != Strategy::kExplicit && !plan_file.empty()) {
    throw ConfigError("sharing.plan is only read for strategy EXPLICIT");
  }
  if (max_subwords == 0) throw ConfigError("data.max_subwords must be positive");
  if (train.eval_interval == 0) throw ConfigError("training.eval_interval must be positive");
  if (train.warmup < 1) throw ConfigError("training.warmup must be positive");
  if (train.dev_beam.width < 1) throw ConfigError("training.dev_beam must be at least 1");
  if (!(train.label_smoothing >= 0 && train.label_smoothing < 1)) {
    throw ConfigError("training.label_smoothing must be in [0, 1)");
  }
  // vocab_size is filled in from the vocabulary; validate the rest now.
  auto m = model;
  if (m.vocab_size == 0) m.vocab_size = 1;
  m.validate();
}

std::string RunConfig::path(const std::string& p) const {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return fs::absolute(base_dir / p).lexically_normal().string();
}

std::string RunConfig::resolved() const {
  std::ostringstream o;
  o << "[data]\nlanguages =";
  for (const auto& l : languages) o << ' ' << l;
  o << '\n';
  for (const auto& l : languages) {
    const auto& f = files.at(l);
    o << "train_source." << l << " = " << path(f.train_source) << '\n';
    o << "train_target." << l << " = " << path(f.train_target) << '\n';
    if (!f.dev_source.empty()) {
      o << "dev_source." << l << " = " << path(f.dev_source) << '\n';
      o << "dev_target." << l << " = " << path(f.dev_target) << '\n';
    }
  }
  if (!bpe_model.empty()) o << "bpe_model = " << path(bpe_model) << '\n';
  o << "bpe_merges = " << bpe_merges << '\n';
  if (!vocab.empty()) o << "vocab = " << path(vocab) << '\n';
  o << "max_subwords = " << max_subwords << '\n';
  o << "\n[model]\n"
    << "layers = " << model.num_layers << '\n'
    << "d_model = " << model.d_model << '\n'
    << "d_ff = " << model.d_ff << '\n'
    << "heads = " << model.heads << '\n'
    << "dropout = " << real(model.dropout) << '\n'
    << "max_position = " << model.max_position << '\n'
    << "norm = " << to_string(model.norm) << '\n'
    << "scaling = " << to_string(model.scaling) << '\n';
  if (model.vocab_size > 0) o << "vocab_size = " << model.vocab_size << '\n';
  o << "\n[sharing]\nstrategy = " << strategy_name(strategy) << '\n';
  if (!plan_file.empty()) o << "plan = " << path(plan_file) << '\n';
  const auto& t = train;
  o << "\n[training]\n"
    << "seed = " << t.seed << '\n'
    << "warmup = " << t.warmup << '\n'
    << "lr_scale = " << real(t.lr_scale) << '\n'
    << "beta1 = " << real(t.beta1) << '\n'
    << "beta2 = " << real(t.beta2) << '\n'
    << "adam_eps = " << real(t.adam_eps) << '\n'
    << "label_smoothing = " << real(t.label_smoothing) << '\n'
    << "token_budget = " << t.token_budget << '\n'
    << "batch_mode = " << batch_mode_name(t.batch_mode) << '\n'
    << "loss_weighting = " << to_string(t.weighting) << '\n'
    << "max_steps = " << t.max_steps << '\n'
    << "eval_interval = " << t.eval_interval << '\n'
    << "patience = " << t.patience << '\n'
    << "target_train_accuracy = " << real(t.target_train_accuracy) << '\n'
    << "dev_beam = " << t.dev_beam.width << '\n'
    << "dev_alpha = " << real(t.dev_beam.alpha) << '\n';
  o << "\n[output]\ndir = " << fs::absolute(out_dir).lexically_normal().string() << '\n';
  return o.str();
}

DevSet prepare_references(const std::vector<ParallelText>& texts, const BpeModel& bpe, const Vocabulary& vocab,
                          std::size_t max_subwords) {
  DevSet out;
  for (const auto& text : texts) {
    for (std::size_t i = 0; i < text.source.size(); ++i) {
      auto ex = prepare_example(bpe.encode(text.source[i]), bpe.encode(text.target[i]), text.language, vocab,
                                max_subwords);
      if (!ex) continue;
      ex->index = out.examples.size();
      out.examples.push_back(std::move(*ex));
      out.references.push_back(split_tokens(text.target[i]));
    }
  }
  return out;
}

Prepared prepare(const RunConfig& config, const std::string& out_dir, std::ostream* log) {
  config.validate();
  Prepared p;
  std::vector<ParallelText> train, dev;
  std::vector<std::string> all;
  for (const auto& l : config.languages) {
    const auto& f = config.files.at(l);
    train.push_back(read_parallel(l, config.path(f.train_source), config.path(f.train_target)));
    all.insert(all.end(), train.back().source.begin(), train.back().source.end());
    all.insert(all.end(), train.back().target.begin(), train.back().target.end());
    if (!f.dev_source.empty()) dev.push_back(read_parallel(l, config.path(f.dev_source), config.path(f.dev_target)));
  }
  if (!config.bpe_model.empty()) {
    p.bpe = BpeModel::load(config.path(config.bpe_model));
  } else {
    p.bpe = bpe_learn(count_words(all), config.bpe_merges);
  }
  if (!config.vocab.empty()) {
    p.vocab = Vocabulary::load(config.path(config.vocab));
    for (const auto& l : config.languages) p.vocab.language_id(l);
  } else {
    p.vocab = build_vocab(all, p.bpe, config.languages);
  }
  p.model = config.model;
  if (p.model.vocab_size != 0 && static_cast<std::size_t>(p.model.vocab_size) != p.vocab.size()) {
    throw ConfigError("model.vocab_size = " + std::to_string(p.model.vocab_size) + " but the vocabulary has " +
                      std::to_string(p.vocab.size()) + " tokens");
  }
  p.model.vocab_size = static_cast<int>(p.vocab.size());
  if (config.strategy == Strategy::kExplicit) {
    std::ifstream in(config.path(config.plan_file));
    if (!in) throw ConfigError("cannot open plan " + config.path(config.plan_file));
    std::ostringstream s;
    s << in.rdbuf();
    p.plan = SharingPlan::parse(s.str(), p.model);
    if (p.plan.targets != config.languages) throw PlanError("plan targets differ from data.languages");
  } else {
    p.plan = plan_from_strategy(config.strategy, config.languages, p.model);
  }
  auto corpus = prepare_corpus(train, p.bpe, p.vocab, config.max_subwords);
  p.train = std::move(corpus.examples);
  p.dropped = corpus.dropped;
  p.dev = prepare_references(dev, p.bpe, p.vocab, config.max_subwords);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    p.bpe.save((fs::path(out_dir) / "model.bpe").string());
    p.vocab.save((fs::path(out_dir) / "vocab.txt").string());
  }
  if (log) {
    *log << "bpe merges " << p.bpe.merges().size() << ", vocabulary " << p.vocab.size() << ", train "
         << p.train.size() << " (dropped " << p.dropped << "), dev " << p.dev.examples.size() << '\n';
  }
  return p;
}

}  // namespace parshare::cli

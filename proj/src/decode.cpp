#include "parshare/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "parshare/errors.hpp"
#include "parshare/model.hpp"

namespace parshare {

namespace {

struct Candidate {
  double log_prob;
  std::size_t parent;
  int token;
};

bool better(const Candidate& a, const Candidate& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  if (a.parent != b.parent) return a.parent < b.parent;
  return a.token < b.token;
}

double normalizer(std::size_t length, const BeamConfig& config) {
  if (config.norm == LengthNorm::kPlain) return std::pow(static_cast<double>(std::max<std::size_t>(length, 1)), config.alpha);
  return length_penalty(std::max<std::size_t>(length, 1), config.alpha);
}

std::vector<double> log_softmax(std::span<const float> row) {
  double peak = -std::numeric_limits<double>::infinity();
  for (float x : row) peak = std::max(peak, static_cast<double>(x));
  double total = 0.0;
  for (float x : row) total += std::exp(static_cast<double>(x) - peak);
  const double log_z = peak + std::log(total);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(row[i]) - log_z;
  return out;
}

using Ngrams = std::map<std::vector<std::string>, std::int64_t>;

Ngrams ngrams(const std::vector<std::string>& words, std::size_t n) {
  Ngrams out;
  for (std::size_t i = 0; i + n <= words.size(); ++i) ++out[std::vector<std::string>(words.begin() + i, words.begin() + i + n)];
  return out;
}

}  // namespace

double length_penalty(std::size_t length, double alpha) {
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

BeamResult beam_search(const StepScorer& scorer, std::size_t max_length, int eos, const BeamConfig& config) {
  if (config.width < 1) throw ConfigError("beam width must be at least 1");
  if (config.alpha < 0) throw ConfigError("length-normalization alpha must be non-negative");
  std::vector<Hypothesis> live = {Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 0; step < max_length && !live.empty() && finished.size() < config.width; ++step) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& h : live) prefixes.push_back(h.tokens);
    const auto scores = scorer(prefixes);
    std::vector<Candidate> candidates;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto& row = scores[h];
      std::vector<Candidate> local;
      for (std::size_t v = 0; v < row.size(); ++v) {
        local.push_back({live[h].log_prob + row[v], h, static_cast<int>(v)});
      }
      const std::size_t keep = std::min(config.width, local.size());
      std::partial_sort(local.begin(), local.begin() + static_cast<std::ptrdiff_t>(keep), local.end(), better);
      candidates.insert(candidates.end(), local.begin(), local.begin() + static_cast<std::ptrdiff_t>(keep));
    }
    const std::size_t keep = std::min(config.width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& c = candidates[i];
      Hypothesis h = live[c.parent];
      h.tokens.push_back(c.token);
      h.log_prob = c.log_prob;
      if (c.token == eos) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }
  const auto& pool = finished.empty() ? live : finished;
  BeamResult result;
  bool first = true;
  for (const auto& h : pool) {
    const double score = h.log_prob / normalizer(h.tokens.size(), config);
    if (first || score > result.score) {
      result.best = h;
      result.score = score;
      first = false;
    }
  }
  return result;
}

Hypothesis greedy(const StepScorer& scorer, std::size_t max_length, int eos) {
  Hypothesis h;
  for (std::size_t step = 0; step < max_length; ++step) {
    const auto row = scorer({h.tokens}).front();
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    h.tokens.push_back(static_cast<int>(best));
    h.log_prob += row[best];
    if (static_cast<int>(best) == eos) {
      h.finished = true;
      break;
    }
  }
  return h;
}

StepScorer model_scorer(const ParameterTable<float>& table, const std::string& language, const std::vector<int>& src) {
  auto model = std::make_shared<Transformer<float>>(table, language);
  auto src_batch = TokenBatch::from_sequences({src}, Vocabulary::kPad);
  Graph<float> g({.training = false, .record = false});
  auto enc = std::make_shared<Tensor<float>>(model->encode(g, src_batch));
  return [model, enc, src](const std::vector<std::vector<int>>& prefixes) {
    const std::size_t n = prefixes.size();
    std::vector<std::vector<int>> tgt, srcs(n, src);
    for (const auto& p : prefixes) {
      std::vector<int> seq = {Vocabulary::kBos};
      seq.insert(seq.end(), p.begin(), p.end());
      tgt.push_back(std::move(seq));
    }
    auto tgt_batch = TokenBatch::from_sequences(tgt, Vocabulary::kPad);
    auto src_batch = TokenBatch::from_sequences(srcs, Vocabulary::kPad);
    std::vector<float> tiled;
    tiled.reserve(n * enc->size());
    for (std::size_t i = 0; i < n; ++i) tiled.insert(tiled.end(), enc->data().begin(), enc->data().end());
    Graph<float> g({.training = false, .record = false});
    auto dec = model->decode(g, tgt_batch, Tensor<float>({n * src.size(), enc->cols()}, std::move(tiled)), src_batch);
    std::vector<int> last(n);
    for (std::size_t b = 0; b < n; ++b) last[b] = static_cast<int>(b * tgt_batch.time + tgt_batch.lengths[b] - 1);
    auto logits = model->logits(g, g.gather_rows(dec, last));
    std::vector<std::vector<double>> out;
    for (std::size_t b = 0; b < n; ++b) {
      out.push_back(log_softmax(logits.data().subspan(b * logits.cols(), logits.cols())));
    }
    return out;
  };
}

std::vector<int> translate_ids(const ParameterTable<float>& table, const std::string& language,
                               const std::vector<int>& src, const BeamConfig& config) {
  auto result = beam_search(model_scorer(table, language, src), src.size() + config.extra_length, Vocabulary::kEos,
                            config);
  auto tokens = result.best.tokens;
  if (!tokens.empty() && tokens.back() == Vocabulary::kEos) tokens.pop_back();
  return tokens;
}

std::vector<std::string> ids_to_words(const std::vector<int>& ids, const Vocabulary& vocab, const BpeModel& bpe) {
  std::vector<std::string> pieces;
  for (int id : ids) {
    if (id == Vocabulary::kPad || id == Vocabulary::kBos || id == Vocabulary::kEos) continue;
    pieces.push_back(vocab.token(id));
  }
  return split_tokens(bpe.decode(pieces));
}

std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

BleuResult bleu(const std::vector<std::vector<std::string>>& hypotheses,
                const std::vector<std::vector<std::string>>& references, int max_n) {
  if (hypotheses.empty()) throw DataError("BLEU needs at least one hypothesis");
  if (hypotheses.size() != references.size()) {
    throw DataError("BLEU corpus mismatch: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                    std::to_string(references.size()) + " references");
  }
  if (max_n < 1 || max_n > 4) throw ConfigError("BLEU order must be within 1..4");
  BleuResult r;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    r.hyp_length += static_cast<std::int64_t>(hypotheses[s].size());
    r.ref_length += static_cast<std::int64_t>(references[s].size());
    for (int n = 1; n <= max_n; ++n) {
      auto hyp = ngrams(hypotheses[s], static_cast<std::size_t>(n));
      auto ref = ngrams(references[s], static_cast<std::size_t>(n));
      for (const auto& [gram, count] : hyp) {
        auto it = ref.find(gram);
        r.matches[n - 1] += std::min(count, it == ref.end() ? std::int64_t{0} : it->second);
        r.totals[n - 1] += count;
      }
    }
  }
  if (r.hyp_length == 0) return r;
  r.brevity_penalty =
      std::exp(std::min(0.0, 1.0 - static_cast<double>(r.ref_length) / static_cast<double>(r.hyp_length)));
  double log_sum = 0.0;
  int orders = 0;
  for (int n = 0; n < max_n; ++n) {
    if (r.totals[n] == 0) continue;
    r.precisions[n] = static_cast<double>(r.matches[n]) / static_cast<double>(r.totals[n]);
    if (r.matches[n] == 0) return r;
    log_sum += std::log(r.precisions[n]);
    ++orders;
  }
  r.score = 100.0 * r.brevity_penalty * std::exp(log_sum / orders);
  return r;
}

std::vector<std::pair<std::int64_t, std::int64_t>> default_buckets() {
  return {{0, 0}, {1, 4}, {5, 9}, {10, 99}, {100, 999}, {1000, std::numeric_limits<std::int64_t>::max()}};
}

std::vector<FBucket> fmeasure_buckets(const std::vector<std::vector<std::string>>& hypotheses,
                                      const std::vector<std::vector<std::string>>& references,
                                      const std::map<std::string, std::int64_t>& train_frequency,
                                      const std::vector<std::pair<std::int64_t, std::int64_t>>& bounds) {
  if (hypotheses.size() != references.size()) throw DataError("F-measure corpus mismatch");
  for (std::size_t i = 0; i < bounds.size(); ++i) {
    if (bounds[i].first > bounds[i].second || (i > 0 && bounds[i].first <= bounds[i - 1].second)) {
      throw ConfigError("F-measure bucket bounds must be ascending and disjoint");
    }
  }
  struct Counts {
    std::int64_t match = 0, hyp = 0, ref = 0;
  };
  std::map<std::string, Counts> per_type;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    std::map<std::string, std::int64_t> h, r;
    for (const auto& w : hypotheses[s]) ++h[w];
    for (const auto& w : references[s]) ++r[w];
    for (const auto& [w, n] : h) {
      auto& c = per_type[w];
      c.hyp += n;
      auto it = r.find(w);
      if (it != r.end()) c.match += std::min(n, it->second);
    }
    for (const auto& [w, n] : r) per_type[w].ref += n;
  }
  std::vector<FBucket> out;
  for (const auto& [low, high] : bounds) out.push_back(FBucket{low, high});
  for (const auto& [w, c] : per_type) {
    auto it = train_frequency.find(w);
    const std::int64_t freq = it == train_frequency.end() ? 0 : it->second;
    for (auto& b : out) {
      if (freq >= b.low && freq <= b.high) {
        b.match += c.match;
        b.hyp_count += c.hyp;
        b.ref_count += c.ref;
        ++b.types;
        break;
      }
    }
  }
  for (auto& b : out) {
    if (b.match == 0) continue;
    const double p = static_cast<double>(b.match) / static_cast<double>(b.hyp_count);
    const double r = static_cast<double>(b.match) / static_cast<double>(b.ref_count);
    b.f = 2 * p * r / (p + r);
  }
  return out;
}

}  // namespace parshare

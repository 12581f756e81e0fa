#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "parshare/bpe.hpp"
#include "parshare/sharing.hpp"
#include "parshare/vocab.hpp"

namespace parshare {

enum class LengthNorm { kGnmt, kPlain };

struct BeamConfig {
  std::size_t width = 5;
  double alpha = 1.0;
  std::size_t extra_length = 50;  // max output length = source length + this
  LengthNorm norm = LengthNorm::kGnmt;
};

// ((5 + length) / 6)^alpha.
double length_penalty(std::size_t length, double alpha);

// Log-probabilities of the next token for each prefix (one row per prefix).
using StepScorer = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<int>>& prefixes)>;

struct Hypothesis {
  std::vector<int> tokens;  // includes the closing eos when finished
  double log_prob = 0.0;
  bool finished = false;
};

struct BeamResult {
  Hypothesis best;
  double score = 0.0;  // log_prob / normalizer
};

// Width-k beam. Each step keeps the k best expansions of the live
// hypotheses; expansions ending in eos retire. Stops once k hypotheses have
// finished, nothing is live, or max_length tokens were produced; unfinished
// hypotheses compete only when nothing finished. Ties go to the earlier
// hypothesis, then the lower token id.
BeamResult beam_search(const StepScorer& scorer, std::size_t max_length, int eos, const BeamConfig& config);

// Argmax decoding; ties go to the lower token id.
Hypothesis greedy(const StepScorer& scorer, std::size_t max_length, int eos);

// Scorer over one source sentence for a resolved model (dropout off).
StepScorer model_scorer(const ParameterTable<float>& table, const std::string& language, const std::vector<int>& src);

// Beam-decodes one prepared source (language token first) and returns the
// output ids without bos/eos.
std::vector<int> translate_ids(const ParameterTable<float>& table, const std::string& language,
                               const std::vector<int>& src, const BeamConfig& config);

// Ids -> subword strings -> words, dropping specials.
std::vector<std::string> ids_to_words(const std::vector<int>& ids, const Vocabulary& vocab, const BpeModel& bpe);

std::vector<std::string> split_tokens(const std::string& line);

struct BleuResult {
  double score = 0.0;  // 0..100
  std::array<double, 4> precisions{};
  std::array<std::int64_t, 4> matches{};
  std::array<std::int64_t, 4> totals{};
  double brevity_penalty = 0.0;
  std::int64_t hyp_length = 0;
  std::int64_t ref_length = 0;
};

// Corpus BLEU with clipped n-gram precisions and brevity penalty
// exp(min(0, 1 - r/c)). Orders for which the hypotheses contain no n-grams at
// all are left out of the geometric mean. Throws DataError on an empty or
// misaligned corpus.
BleuResult bleu(const std::vector<std::vector<std::string>>& hypotheses,
                const std::vector<std::vector<std::string>>& references, int max_n = 4);

struct FBucket {
  std::int64_t low = 0;
  std::int64_t high = 0;  // inclusive; INT64_MAX for an open bucket
  std::int64_t match = 0;
  std::int64_t hyp_count = 0;
  std::int64_t ref_count = 0;
  std::size_t types = 0;
  double f = 0.0;
};

std::vector<std::pair<std::int64_t, std::int64_t>> default_buckets();

// Word F-measure micro-averaged over the word types whose training frequency
// falls in each bucket. Words missing from the table have frequency 0.
std::vector<FBucket> fmeasure_buckets(const std::vector<std::vector<std::string>>& hypotheses,
                                      const std::vector<std::vector<std::string>>& references,
                                      const std::map<std::string, std::int64_t>& train_frequency,
                                      const std::vector<std::pair<std::int64_t, std::int64_t>>& bounds);

}  // namespace parshare

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "parshare/bpe.hpp"
#include "parshare/token_batch.hpp"
#include "parshare/vocab.hpp"

namespace parshare {

inline constexpr std::size_t kMaxSubwords = 70;

// Source side starts with the target-language token; tgt_in starts with <s>;
// tgt_out ends with </s>.
struct Example {
  std::size_t index = 0;
  std::string language;
  std::vector<int> src;
  std::vector<int> tgt_in;
  std::vector<int> tgt_out;

  std::size_t src_subwords() const { return src.size() - 1; }
  std::size_t tgt_subwords() const { return tgt_out.size() - 1; }
};

// Returns nullopt when either side exceeds max_subwords (counted before the
// specials) or the target is empty. Throws VocabularyError for a language
// without a reserved token.
std::optional<Example> prepare_example(const std::vector<std::string>& src_subwords,
                                       const std::vector<std::string>& tgt_subwords, const std::string& language,
                                       const Vocabulary& vocab, std::size_t max_subwords = kMaxSubwords);

// One source/target line-aligned corpus for one target language.
struct ParallelText {
  std::string language;
  std::vector<std::string> source;
  std::vector<std::string> target;
};

// Reads UTF-8 lines; throws DataError when the file cannot be opened.
std::vector<std::string> read_lines(const std::string& path);
// Throws DataError when the two files differ in line count.
ParallelText read_parallel(const std::string& language, const std::string& source_path,
                           const std::string& target_path);

struct PreparedCorpus {
  std::vector<Example> examples;
  std::size_t dropped = 0;
};

// BPE-encodes and prepares every line pair; Example::index numbers the kept
// examples in order.
PreparedCorpus prepare_corpus(const std::vector<ParallelText>& texts, const BpeModel& bpe, const Vocabulary& vocab,
                              std::size_t max_subwords = kMaxSubwords);

// Sentences of one target language inside a batch.
struct LanguageBatch {
  std::string language;
  std::vector<std::size_t> examples;  // positions in the example list
  TokenBatch src;
  TokenBatch tgt_in;
  std::vector<int> tgt_out;  // [batch x time] like tgt_in, pad-filled
  std::size_t target_tokens = 0;
};

// Parts are ordered by language name.
struct Batch {
  std::vector<LanguageBatch> parts;
  std::size_t src_subwords = 0;
  std::size_t tgt_subwords = 0;

  std::size_t sentences() const;
};

enum class BatchMode { kBilingual, kBalanced };

struct BatchOptions {
  std::size_t token_budget = 3000;
  BatchMode mode = BatchMode::kBalanced;
  std::uint64_t seed = 0;
};

// Groups example positions into a Batch.
Batch assemble_batch(const std::vector<Example>& examples, const std::vector<std::size_t>& positions);

// One epoch of batches. Examples are bucketed by length; a batch closes when
// adding the next sentence would push either side past the token budget
// (subwords before specials), but always holds at least one sentence. Balanced
// mode draws sentences round-robin across languages and cycles smaller
// languages until the largest is exhausted. Order depends only on (seed, epoch).
std::vector<Batch> make_batches(const std::vector<Example>& examples, const BatchOptions& options,
                                std::uint64_t epoch);

}  // namespace parshare

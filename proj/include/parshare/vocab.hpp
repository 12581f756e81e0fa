#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "parshare/bpe.hpp"

namespace parshare {

// Token <-> id bijection. Ids 0..3 are <pad>, <s>, </s>, <unk>; then one
// <2xx> token per target language in the given order; then subwords.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary() = default;
  // Reserved tokens first, then subwords by descending count, ties
  // lexicographic. Zero-count entries are kept (they rank last).
  Vocabulary(const std::vector<std::string>& targets, const std::map<std::string, std::int64_t>& subword_counts);

  std::size_t size() const { return tokens_.size(); }
  // <unk> for tokens outside the vocabulary.
  int id(const std::string& token) const;
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  const std::string& token(int id) const;
  std::vector<int> ids(const std::vector<std::string>& tokens) const;

  const std::vector<std::string>& targets() const { return targets_; }
  static std::string language_token(const std::string& language) { return "<2" + language + ">"; }
  // Throws VocabularyError for a language without a reserved token.
  int language_id(const std::string& language) const;

  // FNV-1a over the token list; identifies the vocabulary in checkpoints.
  std::uint64_t hash() const;

  // One token per line, line number = id.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  explicit Vocabulary(std::vector<std::string> tokens);

  std::vector<std::string> tokens_;
  std::vector<std::string> targets_;
  std::unordered_map<std::string, int> ids_;
};

// Counts subwords over BPE-encoded lines and adds every seen character in
// both its word-final and continued form, so any word over seen characters is
// representable.
std::map<std::string, std::int64_t> subword_inventory(const std::vector<std::string>& lines, const BpeModel& bpe);

Vocabulary build_vocab(const std::vector<std::string>& lines, const BpeModel& bpe,
                       const std::vector<std::string>& targets);

}  // namespace parshare

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace parshare {

using WordCounts = std::map<std::string, std::int64_t>;

// Counts whitespace-separated words over lines of pre-tokenized text.
WordCounts count_words(const std::vector<std::string>& lines);

// Splits a word into UTF-8 code points.
std::vector<std::string> utf8_chars(std::string_view word);

// Merge list learned over characters, where the last character of every word
// carries an end-of-word mark. Subwords other than the last one of a word are
// emitted with the continuation marker appended.
class BpeModel {
 public:
  static constexpr std::string_view kEndOfWord = "</w>";

  BpeModel() = default;
  BpeModel(std::vector<std::pair<std::string, std::string>> merges, std::string marker = "@@");

  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  const std::string& marker() const { return marker_; }

  std::vector<std::string> encode_word(std::string_view word) const;
  // Encodes every whitespace-separated word of a line.
  std::vector<std::string> encode(std::string_view line) const;
  // Joins subwords back into words by removing continuation markers.
  std::string decode(const std::vector<std::string>& subwords) const;

  // Header "#bpe marker=@@ merges=N", then one "left right" pair per line.
  void save(const std::string& path) const;
  static BpeModel load(const std::string& path);

  bool operator==(const BpeModel&) const = default;

 private:
  std::vector<std::pair<std::string, std::string>> merges_;
  std::string marker_ = "@@";
  std::map<std::pair<std::string, std::string>, std::size_t> rank_;
};

// Greedy most-frequent-pair merging, ties broken by the lexicographically
// smallest pair. Stops early if no pair remains. Throws DataError on an empty
// table.
BpeModel bpe_learn(const WordCounts& words, std::size_t n_merges, std::string marker = "@@");

}  // namespace parshare

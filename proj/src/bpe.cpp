#include "parshare/bpe.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "parshare/errors.hpp"

namespace parshare {

namespace {

std::vector<std::string_view> split_words(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

std::vector<std::string> initial_symbols(std::string_view word) {
  auto chars = utf8_chars(word);
  if (!chars.empty()) chars.back() += BpeModel::kEndOfWord;
  return chars;
}

}  // namespace

WordCounts count_words(const std::vector<std::string>& lines) {
  WordCounts counts;
  for (const auto& line : lines) {
    for (auto w : split_words(line)) ++counts[std::string(w)];
  }
  return counts;
}

std::vector<std::string> utf8_chars(std::string_view word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto lead = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (lead >= 0xF0) {
      len = 4;
    } else if (lead >= 0xE0) {
      len = 3;
    } else if (lead >= 0xC0) {
      len = 2;
    }
    len = std::min(len, word.size() - i);
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

BpeModel::BpeModel(std::vector<std::pair<std::string, std::string>> merges, std::string marker)
    : merges_(std::move(merges)), marker_(std::move(marker)) {
  if (marker_.empty()) throw ConfigError("BPE continuation marker must not be empty");
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    if (!rank_.emplace(merges_[i], i).second) {
      throw DataError("duplicate BPE merge '" + merges_[i].first + " " + merges_[i].second + "'");
    }
  }
}

std::vector<std::string> BpeModel::encode_word(std::string_view word) const {
  auto symbols = initial_symbols(word);
  while (symbols.size() > 1) {
    std::size_t best_rank = merges_.size();
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = rank_.find({symbols[i], symbols[i + 1]});
      if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == merges_.size()) break;
    const auto& [left, right] = merges_[best_rank];
    std::vector<std::string> merged;
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
        merged.push_back(left + right);
        ++i;
      } else {
        merged.push_back(symbols[i]);
      }
    }
    symbols = std::move(merged);
  }
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size()) {
      symbols[i] += marker_;
    } else {
      symbols[i].resize(symbols[i].size() - kEndOfWord.size());
    }
  }
  return symbols;
}

std::vector<std::string> BpeModel::encode(std::string_view line) const {
  std::vector<std::string> out;
  for (auto w : split_words(line)) {
    auto pieces = encode_word(w);
    out.insert(out.end(), pieces.begin(), pieces.end());
  }
  return out;
}

std::string BpeModel::decode(const std::vector<std::string>& subwords) const {
  std::string out;
  bool continuing = false;
  for (const auto& s : subwords) {
    if (!out.empty() && !continuing) out += ' ';
    continuing = ends_with(s, marker_);
    out += continuing ? s.substr(0, s.size() - marker_.size()) : s;
  }
  return out;
}

void BpeModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write BPE model to " + path);
  out << "#bpe marker=" << marker_ << " merges=" << merges_.size() << '\n';
  for (const auto& [a, b] : merges_) out << a << ' ' << b << '\n';
  if (!out) throw DataError("failed writing BPE model to " + path);
}

BpeModel BpeModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open BPE model " + path);
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string tag, marker_field, merges_field;
  hs >> tag >> marker_field >> merges_field;
  if (tag != "#bpe" || marker_field.rfind("marker=", 0) != 0 || merges_field.rfind("merges=", 0) != 0) {
    throw DataError(path + ": not a BPE model file (bad header)");
  }
  const std::string marker = marker_field.substr(7);
  std::size_t expected = 0;
  try {
    expected = std::stoul(merges_field.substr(7));
  } catch (const std::exception&) {
    throw DataError(path + ": bad merge count in header");
  }
  std::vector<std::pair<std::string, std::string>> merges;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto words = split_words(line);
    if (words.size() != 2) throw DataError(path + ": line " + std::to_string(merges.size() + 2) + " is not a pair");
    merges.emplace_back(words[0], words[1]);
  }
  if (merges.size() != expected) {
    throw DataError(path + ": header promises " + std::to_string(expected) + " merges, found " +
                    std::to_string(merges.size()));
  }
  return BpeModel(std::move(merges), marker);
}

BpeModel bpe_learn(const WordCounts& words, std::size_t n_merges, std::string marker) {
  if (words.empty()) throw DataError("cannot learn BPE from an empty corpus");

  std::vector<std::string> names;
  std::map<std::string, int> ids;
  auto intern = [&](const std::string& s) {
    auto [it, inserted] = ids.emplace(s, static_cast<int>(names.size()));
    if (inserted) names.push_back(s);
    return it->second;
  };

  std::vector<std::vector<int>> seqs;
  std::vector<std::int64_t> freq;
  for (const auto& [word, count] : words) {
    std::vector<int> seq;
    for (const auto& s : initial_symbols(word)) seq.push_back(intern(s));
    seqs.push_back(std::move(seq));
    freq.push_back(count);
  }

  using Pair = std::pair<int, int>;
  struct Entry {
    std::int64_t count;
    Pair pair;
  };
  auto before = [&names](const Entry& x, const Entry& y) {
    if (x.count != y.count) return x.count > y.count;
    if (names[x.pair.first] != names[y.pair.first]) return names[x.pair.first] < names[y.pair.first];
    return names[x.pair.second] < names[y.pair.second];
  };
  std::set<Entry, decltype(before)> queue(before);
  std::map<Pair, std::int64_t> counts;
  std::map<Pair, std::set<std::size_t>> where;

  auto adjust = [&](Pair p, std::int64_t delta, std::size_t word) {
    auto& c = counts[p];
    if (c > 0) queue.erase(Entry{c, p});
    c += delta;
    if (c > 0) queue.insert(Entry{c, p});
    if (delta > 0) where[p].insert(word);
  };
  auto account = [&](std::size_t w, std::int64_t sign) {
    const auto& s = seqs[w];
    for (std::size_t i = 0; i + 1 < s.size(); ++i) adjust({s[i], s[i + 1]}, sign * freq[w], w);
  };
  for (std::size_t w = 0; w < seqs.size(); ++w) account(w, +1);

  std::vector<std::pair<std::string, std::string>> merges;
  std::set<Pair> learned;
  while (merges.size() < n_merges && !queue.empty()) {
    const Pair best = queue.begin()->pair;
    // A pair can reappear when a later merge rebuilds one of its symbols; it is
    // applied again but listed once.
    if (learned.insert(best).second) merges.emplace_back(names[best.first], names[best.second]);
    const int merged = intern(names[best.first] + names[best.second]);
    const auto affected = where[best];
    for (std::size_t w : affected) {
      auto& s = seqs[w];
      bool present = false;
      for (std::size_t i = 0; i + 1 < s.size() && !present; ++i) present = s[i] == best.first && s[i + 1] == best.second;
      if (!present) continue;
      account(w, -1);
      std::vector<int> next;
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i + 1 < s.size() && s[i] == best.first && s[i + 1] == best.second) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(s[i]);
        }
      }
      s = std::move(next);
      account(w, +1);
    }
  }
  return BpeModel(std::move(merges), std::move(marker));
}

}  // namespace parshare

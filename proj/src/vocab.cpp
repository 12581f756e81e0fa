#include "parshare/vocab.hpp"

#include <algorithm>
#include <fstream>

#include "parshare/errors.hpp"

namespace parshare {

namespace {

const std::vector<std::string> kReserved = {"<pad>", "<s>", "</s>", "<unk>"};

bool is_language_token(const std::string& t) {
  return t.size() > 3 && t.rfind("<2", 0) == 0 && t.back() == '>';
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw VocabularyError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
  if (tokens_.size() < kReserved.size() || !std::equal(kReserved.begin(), kReserved.end(), tokens_.begin())) {
    throw VocabularyError("vocabulary does not start with the reserved tokens <pad> <s> </s> <unk>");
  }
  for (std::size_t i = kReserved.size(); i < tokens_.size() && is_language_token(tokens_[i]); ++i) {
    targets_.push_back(tokens_[i].substr(2, tokens_[i].size() - 3));
  }
}

Vocabulary::Vocabulary(const std::vector<std::string>& targets,
                       const std::map<std::string, std::int64_t>& subword_counts)
    : Vocabulary([&] {
        std::vector<std::string> tokens = kReserved;
        for (const auto& t : targets) tokens.push_back(language_token(t));
        std::vector<std::pair<std::string, std::int64_t>> entries(subword_counts.begin(), subword_counts.end());
        std::stable_sort(entries.begin(), entries.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        const std::size_t reserved = tokens.size();
        for (const auto& [token, count] : entries) {
          // Corpus text that spells a reserved token maps onto the reserved id.
          if (std::find(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(reserved), token) ==
              tokens.begin() + static_cast<std::ptrdiff_t>(reserved)) {
            tokens.push_back(token);
          }
        }
        return tokens;
      }()) {}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::ids(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

int Vocabulary::language_id(const std::string& language) const {
  auto it = ids_.find(language_token(language));
  if (it == ids_.end()) throw VocabularyError("no target-language token for '" + language + "'");
  return it->second;
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& t : tokens_) {
    for (unsigned char c : t) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0x0A;
    h *= 1099511628211ull;
  }
  return h;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary to " + path);
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw DataError("failed writing vocabulary to " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open vocabulary " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

std::map<std::string, std::int64_t> subword_inventory(const std::vector<std::string>& lines, const BpeModel& bpe) {
  std::map<std::string, std::int64_t> counts;
  for (const auto& [word, n] : count_words(lines)) {
    for (const auto& piece : bpe.encode_word(word)) counts[piece] += n;
    for (const auto& c : utf8_chars(word)) {
      counts.try_emplace(c, 0);
      counts.try_emplace(c + bpe.marker(), 0);
    }
  }
  return counts;
}

Vocabulary build_vocab(const std::vector<std::string>& lines, const BpeModel& bpe,
                       const std::vector<std::string>& targets) {
  return Vocabulary(targets, subword_inventory(lines, bpe));
}

}  // namespace parshare

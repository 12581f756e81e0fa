#include "parshare/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>

#include "parshare/errors.hpp"

namespace parshare {

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

// Random order, then a stable sort by length, so equal-length examples keep a
// seed-dependent order.
void bucket(std::vector<std::size_t>& order, const std::vector<Example>& examples, std::mt19937_64& rng) {
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = examples[a];
    const auto& y = examples[b];
    if (x.src_subwords() != y.src_subwords()) return x.src_subwords() < y.src_subwords();
    return x.tgt_subwords() < y.tgt_subwords();
  });
}

std::vector<std::vector<std::size_t>> fill(const std::vector<std::size_t>& stream, const std::vector<Example>& examples,
                                           std::size_t budget) {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t src = 0, tgt = 0;
  for (std::size_t pos : stream) {
    const auto& e = examples[pos];
    if (!current.empty() && (src + e.src_subwords() > budget || tgt + e.tgt_subwords() > budget)) {
      batches.push_back(std::move(current));
      current.clear();
      src = tgt = 0;
    }
    current.push_back(pos);
    src += e.src_subwords();
    tgt += e.tgt_subwords();
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

}  // namespace

std::optional<Example> prepare_example(const std::vector<std::string>& src_subwords,
                                       const std::vector<std::string>& tgt_subwords, const std::string& language,
                                       const Vocabulary& vocab, std::size_t max_subwords) {
  const int lang_id = vocab.language_id(language);
  if (tgt_subwords.empty()) return std::nullopt;
  if (src_subwords.size() > max_subwords || tgt_subwords.size() > max_subwords) return std::nullopt;
  Example e;
  e.language = language;
  e.src.push_back(lang_id);
  for (const auto& s : src_subwords) e.src.push_back(vocab.id(s));
  e.tgt_in.push_back(Vocabulary::kBos);
  for (const auto& t : tgt_subwords) {
    const int id = vocab.id(t);
    e.tgt_in.push_back(id);
    e.tgt_out.push_back(id);
  }
  e.tgt_out.push_back(Vocabulary::kEos);
  return e;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

ParallelText read_parallel(const std::string& language, const std::string& source_path,
                           const std::string& target_path) {
  ParallelText text{language, read_lines(source_path), read_lines(target_path)};
  if (text.source.size() != text.target.size()) {
    throw DataError(source_path + " has " + std::to_string(text.source.size()) + " lines but " + target_path +
                    " has " + std::to_string(text.target.size()));
  }
  return text;
}

PreparedCorpus prepare_corpus(const std::vector<ParallelText>& texts, const BpeModel& bpe, const Vocabulary& vocab,
                              std::size_t max_subwords) {
  PreparedCorpus out;
  for (const auto& text : texts) {
    for (std::size_t i = 0; i < text.source.size(); ++i) {
      auto e = prepare_example(bpe.encode(text.source[i]), bpe.encode(text.target[i]), text.language, vocab,
                               max_subwords);
      if (!e) {
        ++out.dropped;
        continue;
      }
      e->index = out.examples.size();
      out.examples.push_back(std::move(*e));
    }
  }
  return out;
}

std::size_t Batch::sentences() const {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.examples.size();
  return n;
}

Batch assemble_batch(const std::vector<Example>& examples, const std::vector<std::size_t>& positions) {
  std::map<std::string, std::vector<std::size_t>> by_language;
  for (std::size_t pos : positions) by_language[examples[pos].language].push_back(pos);
  Batch batch;
  for (auto& [language, members] : by_language) {
    LanguageBatch part;
    part.language = language;
    part.examples = members;
    std::vector<std::vector<int>> src, tgt_in;
    for (std::size_t pos : members) {
      const auto& e = examples[pos];
      src.push_back(e.src);
      tgt_in.push_back(e.tgt_in);
      batch.src_subwords += e.src_subwords();
      batch.tgt_subwords += e.tgt_subwords();
      part.target_tokens += e.tgt_out.size();
    }
    part.src = TokenBatch::from_sequences(src, Vocabulary::kPad);
    part.tgt_in = TokenBatch::from_sequences(tgt_in, Vocabulary::kPad);
    part.tgt_out.assign(part.tgt_in.ids.size(), Vocabulary::kPad);
    for (std::size_t b = 0; b < members.size(); ++b) {
      const auto& out = examples[members[b]].tgt_out;
      std::copy(out.begin(), out.end(), part.tgt_out.begin() + b * part.tgt_in.time);
    }
    batch.parts.push_back(std::move(part));
  }
  return batch;
}

std::vector<Batch> make_batches(const std::vector<Example>& examples, const BatchOptions& options,
                                std::uint64_t epoch) {
  std::mt19937_64 rng(mix(options.seed, epoch));
  std::vector<std::size_t> stream;
  if (options.mode == BatchMode::kBilingual) {
    stream.resize(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) stream[i] = i;
    bucket(stream, examples, rng);
  } else {
    std::map<std::string, std::vector<std::size_t>> queues;
    for (std::size_t i = 0; i < examples.size(); ++i) queues[examples[i].language].push_back(i);
    std::size_t longest = 0;
    for (auto& [language, q] : queues) {
      bucket(q, examples, rng);
      longest = std::max(longest, q.size());
    }
    for (std::size_t round = 0; round < longest; ++round) {
      for (const auto& [language, q] : queues) stream.push_back(q[round % q.size()]);
    }
  }
  std::vector<Batch> batches;
  for (const auto& positions : fill(stream, examples, std::max<std::size_t>(options.token_budget, 1))) {
    batches.push_back(assemble_batch(examples, positions));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

}  // namespace parshare

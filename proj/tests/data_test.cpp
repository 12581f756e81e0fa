#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "parshare/corpus.hpp"
#include "parshare/errors.hpp"

using namespace parshare;

namespace {

std::string toy(const std::string& name) { return std::string(PARSHARE_SOURCE_DIR) + "/data/toy/" + name; }

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "parshare_data_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// Every adjacent symbol pair counted over the initial character segmentation.
std::map<std::pair<std::string, std::string>, std::int64_t> brute_force_pairs(const WordCounts& words) {
  std::map<std::pair<std::string, std::string>, std::int64_t> counts;
  for (const auto& [w, n] : words) {
    auto chars = utf8_chars(w);
    chars.back() += "</w>";
    for (std::size_t i = 0; i + 1 < chars.size(); ++i) counts[{chars[i], chars[i + 1]}] += n;
  }
  return counts;
}

std::vector<std::string> toy_lines() {
  std::vector<std::string> lines;
  for (auto name : {"train.src", "train.copy", "train.rev"}) {
    auto part = read_lines(toy(name));
    lines.insert(lines.end(), part.begin(), part.end());
  }
  return lines;
}

Example example(const std::string& lang, std::size_t src_len, std::size_t tgt_len, std::size_t index = 0) {
  Example e;
  e.index = index;
  e.language = lang;
  e.src.assign(src_len + 1, 7);
  e.tgt_in.assign(tgt_len + 1, 8);
  e.tgt_out.assign(tgt_len + 1, 8);
  return e;
}

}  // namespace

TEST(BpeLearn, FirstMergeMatchesPairCounting) {
  WordCounts words = {{"low", 5}, {"lower", 2}, {"newest", 6}, {"widest", 3}};
  auto pairs = brute_force_pairs(words);
  std::int64_t best = 0;
  for (const auto& [p, n] : pairs) best = std::max(best, n);
  std::pair<std::string, std::string> first;
  for (const auto& [p, n] : pairs) {
    if (n == best) {
      first = p;
      break;
    }
  }
  EXPECT_EQ(best, 9);
  auto model = bpe_learn(words, 1);
  ASSERT_EQ(model.merges().size(), 1u);
  EXPECT_EQ(model.merges()[0], first);
  EXPECT_EQ(model.merges()[0], (std::pair<std::string, std::string>{"e", "s"}));
}

TEST(BpeLearn, ZeroMergesIsCharacterLevel) {
  auto model = bpe_learn({{"hello", 1}}, 0);
  EXPECT_TRUE(model.merges().empty());
  EXPECT_EQ(model.encode_word("hello"), (std::vector<std::string>{"h@@", "e@@", "l@@", "l@@", "o"}));
}

TEST(BpeLearn, SingleWordCollapsesAfterLengthMinusOneMerges) {
  // Each merge shortens the word by at least one symbol; repeated pairs merge
  // together, so words like "zzzzzz" need fewer than k - 1.
  for (std::string w : {"ab", "abcdefg", "abcabc", "mississippi", "zzzzzz"}) {
    auto k = utf8_chars(w).size();
    auto model = bpe_learn({{w, 3}}, k - 1);
    EXPECT_LE(model.merges().size(), k - 1) << w;
    EXPECT_EQ(model.encode_word(w), std::vector<std::string>{w});
    auto more = bpe_learn({{w, 3}}, k + 10);
    EXPECT_EQ(more.merges(), model.merges()) << "learning stops when no pair remains";
  }
  EXPECT_EQ(bpe_learn({{"abcdefg", 1}}, 6).merges().size(), 6u);
  EXPECT_THROW(bpe_learn({}, 5), DataError);
}

TEST(BpeLearn, Deterministic) {
  auto words = count_words(toy_lines());
  EXPECT_EQ(bpe_learn(words, 200), bpe_learn(words, 200));
}

TEST(BpeEncode, FallbackAndRoundTrip) {
  auto lines = toy_lines();
  auto words = count_words(lines);
  auto model = bpe_learn(words, 40);
  EXPECT_EQ(model.encode_word("zulu").size(), model.encode_word("zulu").size());
  auto unseen = model.encode_word("zzqq");
  EXPECT_GE(unseen.size(), 2u);
  EXPECT_EQ(model.decode(unseen), "zzqq");

  auto full = bpe_learn(words, 5000);
  EXPECT_EQ(full.encode_word("november"), std::vector<std::string>{"november"});

  std::vector<std::string> word_list;
  for (const auto& [w, n] : words) word_list.push_back(w);
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> pick(0, word_list.size() - 1);
  for (int i = 0; i < 1000; ++i) {
    const auto& w = word_list[pick(rng)];
    EXPECT_EQ(model.decode(model.encode_word(w)), w);
  }
  EXPECT_EQ(model.decode(model.encode("alfa bravo  charlie")), "alfa bravo charlie");
}

TEST(BpeModel, FileRoundTrip) {
  auto model = bpe_learn(count_words(toy_lines()), 60);
  auto path = scratch("codes.bpe").string();
  model.save(path);
  EXPECT_EQ(BpeModel::load(path), model);
  std::ofstream(path) << "#bpe marker=@@ merges=3\na b\n";
  EXPECT_THROW(BpeModel::load(path), DataError);
}

TEST(Vocabulary, ReservedLayoutAndCount) {
  auto lines = toy_lines();
  auto bpe = bpe_learn(count_words(lines), 40);
  auto vocab = build_vocab(lines, bpe, {"copy", "rev"});
  EXPECT_EQ(vocab.token(0), "<pad>");
  EXPECT_EQ(vocab.token(1), "<s>");
  EXPECT_EQ(vocab.token(2), "</s>");
  EXPECT_EQ(vocab.token(3), "<unk>");
  EXPECT_EQ(vocab.language_id("copy"), 4);
  EXPECT_EQ(vocab.language_id("rev"), 5);
  EXPECT_THROW(vocab.language_id("sort"), VocabularyError);
  EXPECT_EQ(vocab.size(), 4 + 2 + subword_inventory(lines, bpe).size());
  EXPECT_EQ(vocab, build_vocab(lines, bpe, {"copy", "rev"}));
  EXPECT_EQ(vocab.targets(), (std::vector<std::string>{"copy", "rev"}));

  // Seen characters are always representable; unseen ones map to <unk>.
  for (const auto& piece : bpe.encode_word("zzqq")) EXPECT_NE(vocab.id(piece), Vocabulary::kUnk) << piece;
  EXPECT_EQ(vocab.id("\xc3\xa9"), Vocabulary::kUnk);
}

TEST(Vocabulary, FrequencyThenLexicographicOrder) {
  Vocabulary v({"de"}, {{"b", 3}, {"a", 3}, {"c", 9}, {"d", 0}});
  EXPECT_EQ(v.token(5), "c");
  EXPECT_EQ(v.token(6), "a");
  EXPECT_EQ(v.token(7), "b");
  EXPECT_EQ(v.token(8), "d");
}

TEST(Vocabulary, FileRoundTripKeepsIdsAndHash) {
  auto lines = toy_lines();
  auto vocab = build_vocab(lines, bpe_learn(count_words(lines), 30), {"copy", "rev"});
  auto path = scratch("vocab.txt").string();
  vocab.save(path);
  auto loaded = Vocabulary::load(path);
  EXPECT_EQ(loaded, vocab);
  EXPECT_EQ(loaded.hash(), vocab.hash());
  EXPECT_EQ(loaded.targets(), vocab.targets());
  Vocabulary other({"copy"}, {{"x", 1}});
  EXPECT_NE(other.hash(), vocab.hash());
}

TEST(PrepareExample, SpecialsAndFilters) {
  Vocabulary v({"de", "nl"}, {{"hello", 2}, {"world", 1}});
  auto e = prepare_example({"hello"}, {"world"}, "de", v);
  ASSERT_TRUE(e);
  EXPECT_EQ(e->src, (std::vector<int>{v.language_id("de"), v.id("hello")}));
  EXPECT_EQ(e->tgt_in, (std::vector<int>{Vocabulary::kBos, v.id("world")}));
  EXPECT_EQ(e->tgt_out, (std::vector<int>{v.id("world"), Vocabulary::kEos}));

  std::vector<std::string> seventy(70, "hello"), seventy_one(71, "hello");
  EXPECT_TRUE(prepare_example(seventy, seventy, "nl", v));
  EXPECT_FALSE(prepare_example({"hello"}, seventy_one, "nl", v));
  EXPECT_FALSE(prepare_example(seventy_one, {"hello"}, "nl", v));
  EXPECT_FALSE(prepare_example({"hello"}, {}, "nl", v));
  EXPECT_THROW(prepare_example({"hello"}, {"world"}, "fr", v), VocabularyError);
}

TEST(MakeBatches, BudgetArithmetic) {
  std::vector<Example> examples;
  for (std::size_t i = 0; i < 250; ++i) examples.push_back(example("de", 30, 30, i));
  auto batches = make_batches(examples, {3000, BatchMode::kBilingual, 1}, 0);
  ASSERT_EQ(batches.size(), 3u);
  std::multiset<std::size_t> sizes;
  for (const auto& b : batches) sizes.insert(b.sentences());
  EXPECT_EQ(sizes, (std::multiset<std::size_t>{100, 100, 50}));

  auto singles = make_batches(examples, {1, BatchMode::kBilingual, 1}, 0);
  EXPECT_EQ(singles.size(), examples.size());
  for (const auto& b : singles) EXPECT_EQ(b.sentences(), 1u);
}

TEST(MakeBatches, BalancedSplitsEvenly) {
  std::vector<Example> examples;
  for (std::size_t i = 0; i < 120; ++i) examples.push_back(example(i < 80 ? "de" : "nl", 30, 30, i));
  auto batches = make_batches(examples, {3000, BatchMode::kBalanced, 3}, 0);
  std::map<std::string, std::size_t> totals;
  for (const auto& b : batches) {
    ASSERT_EQ(b.parts.size(), 2u);
    const auto a = b.parts[0].examples.size(), c = b.parts[1].examples.size();
    EXPECT_LE(std::max(a, c) - std::min(a, c), 1u);
    if (b.sentences() == 100) EXPECT_EQ(a, 50u);
    for (const auto& p : b.parts) totals[p.language] += p.examples.size();
  }
  EXPECT_LE(std::max(totals["de"], totals["nl"]) - std::min(totals["de"], totals["nl"]), batches.size());
  EXPECT_EQ(totals["de"], 80u);
  EXPECT_EQ(totals["nl"], 80u);
}

TEST(MakeBatches, PaddingLengthCapAndDeterminism) {
  auto lines = toy_lines();
  auto bpe = bpe_learn(count_words(lines), 50);
  auto vocab = build_vocab(lines, bpe, {"copy", "rev"});
  auto corpus = prepare_corpus({read_parallel("copy", toy("train.src"), toy("train.copy")),
                                read_parallel("rev", toy("train.src"), toy("train.rev"))},
                               bpe, vocab, 12);
  EXPECT_EQ(corpus.examples.size() + corpus.dropped, 128u);
  BatchOptions options{60, BatchMode::kBalanced, 9};
  auto batches = make_batches(corpus.examples, options, 2);
  for (const auto& b : batches) {
    for (const auto& p : b.parts) {
      for (std::size_t r = 0; r < p.src.batch; ++r) {
        const auto& e = corpus.examples[p.examples[r]];
        EXPECT_LE(e.src_subwords(), 12u);
        EXPECT_LE(e.tgt_subwords(), 12u);
        EXPECT_EQ(p.src.lengths[r], e.src.size());
        for (std::size_t t = 0; t < p.src.time; ++t) {
          EXPECT_EQ(p.src.is_pad(r, t), t >= e.src.size());
          EXPECT_EQ(p.src.at(r, t), t < e.src.size() ? e.src[t] : Vocabulary::kPad);
        }
        for (std::size_t t = 0; t < p.tgt_in.time; ++t) {
          const int out = p.tgt_out[r * p.tgt_in.time + t];
          EXPECT_EQ(out, t < e.tgt_out.size() ? e.tgt_out[t] : Vocabulary::kPad);
        }
      }
    }
  }
  auto again = make_batches(corpus.examples, options, 2);
  auto other_epoch = make_batches(corpus.examples, options, 3);
  auto order = [](const std::vector<Batch>& bs) {
    std::vector<std::size_t> out;
    for (const auto& b : bs) {
      for (const auto& p : b.parts) out.insert(out.end(), p.examples.begin(), p.examples.end());
    }
    return out;
  };
  EXPECT_EQ(order(batches), order(again));
  EXPECT_NE(order(batches), order(other_epoch));
}

TEST(ReadParallel, RejectsMisalignedFiles) {
  EXPECT_THROW(read_parallel("x", toy("train.src"), toy("dev.src")), DataError);
  EXPECT_THROW(read_lines(toy("missing.src")), DataError);
}

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "parshare/errors.hpp"
#include "parshare/model.hpp"

using namespace parshare;

namespace {

ModelConfig tiny_config(NormPlacement norm = NormPlacement::kPre) {
  ModelConfig c;
  c.num_layers = 2;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 16;
  c.vocab_size = 17;
  c.dropout = 0.0;
  c.norm = norm;
  return c;
}

const std::vector<std::string> kPair = {"de", "nl"};

// Gains near 1, everything else small and uniform.
template <typename T>
void fill_random(ParameterTable<T>& table, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-0.5, 0.5);
  for (std::size_t c = 0; c < table.cell_count(); ++c) {
    const bool gain = table.cell_slots(c).front().role == Role::kGain;
    for (auto& x : table.cells()[c].mutable_data()) x = static_cast<T>(gain ? 1.0 + 0.2 * dist(rng) : dist(rng));
  }
}

template <typename T = double>
ParameterTable<T> random_table(Strategy s, const ModelConfig& c, std::uint64_t seed = 1) {
  auto t = ParameterTable<T>::resolve(c, plan_from_strategy(s, kPair, c));
  fill_random(t, seed);
  return t;
}

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

std::vector<double> row(const Tensor<double>& t, std::size_t r) {
  return {t.data().begin() + r * t.cols(), t.data().begin() + (r + 1) * t.cols()};
}

ModelConfig one_layer_attention(int d, int heads) {
  ModelConfig c;
  c.num_layers = 0;
  c.d_model = d;
  c.heads = heads;
  c.vocab_size = 5;
  c.dropout = 0.0;
  return c;
}

}  // namespace

TEST(Positions, ClosedFormValues) {
  auto pe = sinusoidal_positions<double>(2, 512);
  for (std::size_t c = 0; c < 512; ++c) EXPECT_EQ(pe.at(0, c), c % 2 == 0 ? 0.0 : 1.0);
  EXPECT_NEAR(pe.at(1, 0), 0.8415, 1e-4);
  EXPECT_NEAR(pe.at(1, 1), 0.5403, 1e-4);
  EXPECT_NEAR(pe.at(1, 510), std::sin(std::pow(10000.0, -510.0 / 512.0)), 1e-15);
  EXPECT_NEAR(pe.at(1, 510), 1.0366e-4, 1e-8);
  EXPECT_NO_THROW(sinusoidal_positions<float>(1024, 4));
  EXPECT_THROW(sinusoidal_positions<float>(1025, 4), LengthError);
}

TEST(Embed, ScalesAndAddsPositions) {
  auto c = one_layer_attention(4, 1);
  auto w_e = Tensor<double>({5, 4}, std::vector<double>(20, 0.0));
  w_e.mutable_data()[4] = 1.0;  // row 1 = [1,0,0,0]
  Graph<double> g;
  auto x = embed(g, TokenBatch::from_sequences({{1}}, 0), w_e, c);
  EXPECT_EQ(values(x), (std::vector<double>{2, 1, 0, 1}));

  auto z = embed(g, TokenBatch::from_sequences({{0, 0, 0}}, 0), w_e, c);
  auto pe = sinusoidal_positions<double>(3, 4);
  EXPECT_EQ(values(z), values(pe));
  EXPECT_THROW(embed(g, TokenBatch::from_sequences({{5}}, 0), w_e, c), VocabularyError);
}

TEST(Attention, SingleKeyIsValueProjection) {
  auto c = one_layer_attention(3, 1);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(-1, 1);
  auto rnd = [&](Shape s) {
    std::vector<double> v(shape_size(s));
    for (auto& x : v) x = dist(rng);
    return Tensor<double>(s, v);
  };
  AttentionParams<double> p{rnd({3, 3}), rnd({3, 3}), rnd({3, 3}), rnd({3, 3})};
  auto q_in = rnd({2, 3});
  auto kv_in = rnd({1, 3});
  Graph<double> g;
  auto mask = Tensor<double>({1, 2, 1}, {0, 0});
  auto out = multi_head_attention(g, q_in, kv_in, p, mask, 1, c);
  auto expected = g.matmul(g.matmul(kv_in, p.v), p.f);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.at(r, j), expected.at(0, j), 1e-12);
  }
}

TEST(Attention, ZeroQueryGivesMeanOfValues) {
  auto c = one_layer_attention(4, 2);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> dist(-1, 1);
  auto rnd = [&](Shape s) {
    std::vector<double> v(shape_size(s));
    for (auto& x : v) x = dist(rng);
    return Tensor<double>(s, v);
  };
  AttentionParams<double> p{rnd({4, 4}), Tensor<double>::zeros({4, 4}), rnd({4, 4}), rnd({4, 4})};
  auto kv_in = rnd({3, 4});
  Graph<double> g;
  auto out = multi_head_attention(g, rnd({2, 4}), kv_in, p, Tensor<double>::zeros({1, 2, 3}), 1, c);
  auto v = g.matmul(kv_in, p.v);
  std::vector<double> mean(4, 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < 4; ++j) mean[j] += v.at(r, j) / 3.0;
  }
  auto expected = g.matmul(Tensor<double>({1, 4}, mean), p.f);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.at(r, j), expected.at(0, j), 1e-12);
  }
}

TEST(Attention, CausalRowZeroIgnoresLaterKeys) {
  auto c = one_layer_attention(4, 2);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> dist(-1, 1);
  auto rnd = [&](Shape s) {
    std::vector<double> v(shape_size(s));
    for (auto& x : v) x = dist(rng);
    return Tensor<double>(s, v);
  };
  AttentionParams<double> p{rnd({4, 4}), rnd({4, 4}), rnd({4, 4}), rnd({4, 4})};
  auto x = rnd({4, 4});
  auto mask = causal_mask<double>(4);
  auto batched = Tensor<double>({1, 4, 4}, values(mask));
  Graph<double> g;
  auto base = multi_head_attention(g, x, x, p, batched, 1, c);
  auto y = x.clone();
  for (std::size_t i = 4; i < 16; ++i) y.mutable_data()[i] += 3.0;
  auto perturbed = multi_head_attention(g, y, y, p, batched, 1, c);
  EXPECT_EQ(row(base, 0), row(perturbed, 0));
  EXPECT_NE(row(base, 1), row(perturbed, 1));

  auto all_masked = Tensor<double>({1, 4, 4}, std::vector<double>(16, masked_value<double>()));
  EXPECT_THROW(multi_head_attention(g, x, x, p, all_masked, 1, c), DegenerateRowError);
}

TEST(FeedForward, HandExamples) {
  Graph<double> g;
  FfnParams<double> scalar{Tensor<double>({1, 1}, {2}), Tensor<double>({1}, {0}), Tensor<double>({1, 1}, {3}),
                           Tensor<double>({1}, {1})};
  EXPECT_EQ(feed_forward(g, Tensor<double>({1, 1}, {2}), scalar, 0.0)[0], 13.0);

  FfnParams<double> p{Tensor<double>::filled({2, 3}, 0.7), Tensor<double>::filled({3}, -100.0),
                      Tensor<double>::filled({3, 2}, 0.4), Tensor<double>({2}, {0.25, -1.5})};
  auto dead = feed_forward(g, Tensor<double>({2, 2}, {1, -2, 0.5, 3}), p, 0.0);
  EXPECT_EQ(values(dead), (std::vector<double>{0.25, -1.5, 0.25, -1.5}));
  p.b1 = Tensor<double>::zeros({3});
  auto zero_in = feed_forward(g, Tensor<double>::zeros({1, 2}), p, 0.0);
  EXPECT_EQ(values(zero_in), (std::vector<double>{0.25, -1.5}));
}

TEST(CausalMask, Structure) {
  auto one = causal_mask<double>(1);
  EXPECT_EQ(one[0], 0.0);
  for (std::size_t t = 1; t <= 64; ++t) {
    auto m = causal_mask<double>(t);
    for (std::size_t i = 0; i < t; ++i) {
      std::size_t open = 0;
      for (std::size_t j = 0; j < t; ++j) {
        if (m.at(i, j) == 0.0) {
          ++open;
          EXPECT_LE(j, i);
        } else {
          EXPECT_EQ(m.at(i, j), masked_value<double>());
        }
      }
      EXPECT_EQ(open, i + 1);
    }
  }
}

TEST(Encoder, ZeroLayersIsNormOfEmbedding) {
  auto c = tiny_config();
  c.num_layers = 0;
  auto table = random_table(Strategy::kNone, c);
  auto src = TokenBatch::from_sequences({{4, 5, 6}}, 0);
  Graph<double> g;
  auto out = encoder_forward(g, src, table, "de");
  auto e = embed(g, src, table.slot(SlotId::parse("embedding.E@de")), c);
  auto expected = g.layer_norm(e, table.slot(SlotId::parse("encoder.norm_final.gain@de")),
                               table.slot(SlotId::parse("encoder.norm_final.bias@de")));
  EXPECT_EQ(values(out), values(expected));
}

TEST(Encoder, ShapeContractAndIdenticalRows) {
  auto c = tiny_config();
  auto table = random_table(Strategy::kFull, c);
  for (std::size_t t = 1; t <= 70; t += 3) {
    std::vector<int> ids(t);
    for (std::size_t i = 0; i < t; ++i) ids[i] = 4 + static_cast<int>(i % 13);
    Graph<double> g({.record = false});
    auto out = encoder_forward(g, TokenBatch::from_sequences({ids, ids}, 0), table, "nl");
    ASSERT_EQ(out.shape(), (Shape{2 * t, 8}));
    for (std::size_t r = 0; r < t; ++r) EXPECT_EQ(row(out, r), row(out, t + r));
  }
}

TEST(Decoder, CausalityAndEncoderDependence) {
  auto c = tiny_config();
  auto table = random_table(Strategy::kKqBoth, c, 7);
  Transformer<double> model(table, "de");
  auto src = TokenBatch::from_sequences({{5, 6, 7, 8}}, 0);
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> tok(4, 16);
  std::vector<int> tgt(8);
  for (auto& t : tgt) t = tok(rng);
  tgt[0] = 1;
  Graph<double> g({.record = false});
  auto enc = model.encode(g, src);
  auto base = model.decode(g, TokenBatch::from_sequences({tgt}, 0), enc, src);

  std::uniform_int_distribution<std::size_t> pos(1, tgt.size() - 1);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t p = pos(rng);
    auto changed = tgt;
    changed[p] = changed[p] == 4 ? 5 : 4;
    auto out = model.decode(g, TokenBatch::from_sequences({changed}, 0), enc, src);
    for (std::size_t r = 0; r < p; ++r) EXPECT_EQ(row(base, r), row(out, r)) << "position " << p;
    EXPECT_NE(row(base, p), row(out, p));
  }

  auto enc2 = enc.clone();
  enc2.mutable_data()[0] += 1.0;
  auto moved = model.decode(g, TokenBatch::from_sequences({tgt}, 0), enc2, src);
  EXPECT_NE(row(base, 0), row(moved, 0));

  auto single = model.decode(g, TokenBatch::from_sequences({{1}}, 0), enc, src);
  ASSERT_EQ(single.shape(), (Shape{1, 8}));
  EXPECT_EQ(row(single, 0), row(base, 0));
}

TEST(Decoder, FullPlanIsLanguageIndependent) {
  auto c = tiny_config();
  auto table = random_table(Strategy::kFull, c, 9);
  auto src = TokenBatch::from_sequences({{5, 6, 7}, {8, 9}}, 0);
  auto tgt = TokenBatch::from_sequences({{1, 10, 11}, {1, 12}}, 0);
  Graph<double> g({.record = false});
  auto enc_de = encoder_forward(g, src, table, "de");
  auto enc_nl = encoder_forward(g, src, table, "nl");
  EXPECT_EQ(values(enc_de), values(enc_nl));
  auto de = decoder_forward(g, tgt, enc_de, src, table, "de");
  auto nl = decoder_forward(g, tgt, enc_nl, src, table, "nl");
  EXPECT_EQ(values(de), values(nl));

  auto none = random_table(Strategy::kNone, c, 9);
  auto d1 = decoder_forward(g, tgt, enc_de, src, none, "de");
  auto d2 = decoder_forward(g, tgt, enc_de, src, none, "nl");
  EXPECT_NE(values(d1), values(d2));
  EXPECT_THROW(decoder_forward(g, tgt, enc_de, src, table, "fr"), PlanError);
}

TEST(Model, PadContentNeverLeaksIntoRealPositions) {
  for (auto norm : {NormPlacement::kPre, NormPlacement::kPost}) {
    auto c = tiny_config(norm);
    auto table = random_table(Strategy::kEmbedEnc, c, 13);
    Transformer<double> model(table, "nl");
    auto run = [&](int src_pad, int tgt_pad) {
      auto src = TokenBatch::from_sequences({{5, 6, 7, 8, 9}, {10, 11}}, src_pad);
      auto tgt = TokenBatch::from_sequences({{1, 4, 5}, {1, 6, 7, 8, 9, 10}}, tgt_pad);
      Graph<double> g({.record = false});
      auto enc = model.encode(g, src);
      return std::pair{model.encode(g, src), model.decode(g, tgt, enc, src)};
    };
    auto [enc_a, dec_a] = run(0, 0);
    auto [enc_b, dec_b] = run(14, 3);
    for (std::size_t r : {0, 1, 2, 3, 4, 5, 6}) EXPECT_EQ(row(enc_a, r), row(enc_b, r));
    for (std::size_t r : {0, 1, 2, 6, 7, 8, 9, 10, 11}) EXPECT_EQ(row(dec_a, r), row(dec_b, r));
  }
}

TEST(OutputLogits, TiedProjection) {
  auto w_e = Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Graph<double> g;
  auto logits = output_logits(g, Tensor<double>({2, 3}, {0, 1, 0, 0, 0, 0}), w_e);
  ASSERT_EQ(logits.shape(), (Shape{2, 3}));
  EXPECT_EQ(row(logits, 0), (std::vector<double>{0, 1, 0}));
  auto probs = g.softmax_rows(logits);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(probs.at(1, j), 1.0 / 3.0, 1e-15);

  auto c = tiny_config();
  auto table = random_table(Strategy::kKvBoth, c, 21);
  auto embed_slots = 0;
  for (std::size_t cell = 0; cell < table.cell_count(); ++cell) {
    if (table.cell_slots(cell).front().role == Role::kE) ++embed_slots;
  }
  EXPECT_EQ(embed_slots, 1);
  Transformer<double> model(table, "de");
  EXPECT_TRUE(model.embedding().same_storage(table.slot(SlotId::parse("embedding.E@nl"))));
}

TEST(Model, DeterministicWithoutDropout) {
  auto c = tiny_config();
  auto run = [&] {
    auto table = random_table<float>(Strategy::kKqBoth, c, 17);
    Transformer<float> model(table, "nl");
    auto src = TokenBatch::from_sequences({{5, 6, 7}, {8, 9, 10, 11}}, 0);
    auto tgt = TokenBatch::from_sequences({{1, 4}, {1, 5, 6}}, 0);
    Graph<float> g;
    auto out = model.logits(g, model.decode(g, tgt, model.encode(g, src), src));
    return std::vector<float>(out.data().begin(), out.data().end());
  };
  EXPECT_EQ(run(), run());
}

namespace {

double tiny_model_grad_check(NormPlacement norm, Strategy strategy, const std::string& lang) {
  auto c = tiny_config(norm);
  auto table = random_table(strategy, c, 23);
  auto src = TokenBatch::from_sequences({{5, 6, 7, 8, 9}, {10, 11, 12}}, 0);
  auto tgt_in = TokenBatch::from_sequences({{1, 13, 14, 15, 16}, {1, 4, 5}}, 0);
  std::vector<int> tgt_out = {13, 14, 15, 16, 2, 4, 5, 2, 0, 0};
  LossBuilder loss = [&](Graph<double>& g) {
    Transformer<double> model(table, lang);
    auto logits = model.logits(g, model.decode(g, tgt_in, model.encode(g, src), src));
    return g.smoothed_cross_entropy(logits, tgt_out, 0.1, 0);
  };
  std::vector<Tensor<double>> params;
  for (const auto& cell : table.cells()) params.push_back(cell);
  auto report = grad_check(loss, params, 1e-5);
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_LT(report.max_relative_error[i], 1e-4) << table.cell_name(i);
  }
  return report.worst();
}

}  // namespace

TEST(GradCheck, TinyModelEverySlotPreNorm) {
  EXPECT_LT(tiny_model_grad_check(NormPlacement::kPre, Strategy::kNone, "de"), 1e-4);
}

TEST(GradCheck, TinyModelEverySlotPostNorm) {
  EXPECT_LT(tiny_model_grad_check(NormPlacement::kPost, Strategy::kNone, "nl"), 1e-4);
}

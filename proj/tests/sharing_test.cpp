#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "parshare/errors.hpp"
#include "parshare/graph.hpp"
#include "parshare/sharing.hpp"

using namespace parshare;

namespace {

ModelConfig base_config() {
  ModelConfig c;
  c.vocab_size = 33200;
  return c;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 16;
  c.vocab_size = 17;
  return c;
}

const std::vector<std::string> kPair = {"de", "nl"};

std::uint64_t weights(Strategy s, const ModelConfig& c = base_config()) {
  return count_parameters(c, plan_from_strategy(s, kPair, c)).weights_only;
}

long rounded_millions(std::uint64_t n) { return std::lround(static_cast<double>(n) / 1e6); }

// Independent arithmetic for one bilingual pre-norm model, written out per
// tensor rather than derived from the slot list.
std::uint64_t one_model_total(const ModelConfig& c) {
  const std::uint64_t d = c.d_model, h = c.d_ff, v = c.vocab_size, l = c.num_layers;
  const std::uint64_t norm = 2 * d;
  const std::uint64_t attn = 4 * d * d + norm;
  const std::uint64_t ffn = d * h + h + h * d + d + norm;
  return v * d + l * (attn + ffn) + norm + l * (2 * attn + ffn) + norm;
}

}  // namespace

TEST(SlotId, RoundTripsThroughText) {
  const std::vector<std::string> names = {"decoder.L3.self_attn.K@de", "embedding.E@nl", "encoder.norm_final.gain@de",
                                          "decoder.L1.ffn.b2@*", "encoder.L6.ffn.L1@ja"};
  for (const auto& n : names) EXPECT_EQ(SlotId::parse(n).to_string(), n);
  EXPECT_THROW(SlotId::parse("decoder.L3.self_attn.K"), PlanError);
  EXPECT_THROW(SlotId::parse("decoder.L3.attn.K@de"), PlanError);
  EXPECT_THROW(SlotId::parse("decoder.L0.ffn.L1@de"), PlanError);
  EXPECT_THROW(SlotId::parse("decoder.L3.self_attn.W@de"), PlanError);
}

TEST(SlotId, EveryModelSlotIsUniqueAndParseable) {
  for (auto norm : {NormPlacement::kPre, NormPlacement::kPost}) {
    auto c = tiny_config();
    c.norm = norm;
    auto slots = enumerate_slots(c, kPair);
    std::set<SlotId> unique(slots.begin(), slots.end());
    EXPECT_EQ(unique.size(), slots.size());
    for (const auto& s : slots) EXPECT_EQ(SlotId::parse(s.to_string()), s);
  }
}

TEST(CountParameters, EncoderFfnAndAttentionDeltas) {
  EXPECT_EQ(weights(Strategy::kEmbed) - weights(Strategy::kEmbedEnc), 18874368u);
  EXPECT_EQ(weights(Strategy::kEmbedEnc) - weights(Strategy::kFfn), 12582912u);
  for (auto s : {Strategy::kSelfAttn, Strategy::kEncDecAttn, Strategy::kKqBoth, Strategy::kKvBoth}) {
    EXPECT_EQ(weights(Strategy::kEmbedEnc) - weights(s), 6291456u) << strategy_name(s);
  }
}

TEST(CountParameters, RoundedTotalsMatchPublishedColumns) {
  EXPECT_EQ(rounded_millions(weights(Strategy::kEmbed)), 105);
  EXPECT_EQ(rounded_millions(weights(Strategy::kEmbedEnc)), 86);
  EXPECT_EQ(rounded_millions(weights(Strategy::kFfn)), 74);
  for (auto s : {Strategy::kSelfAttn, Strategy::kEncDecAttn, Strategy::kKqBoth, Strategy::kKvBoth}) {
    EXPECT_EQ(rounded_millions(weights(s)), 80) << strategy_name(s);
  }
  EXPECT_EQ(rounded_millions(weights(Strategy::kFull)), 61);
  EXPECT_EQ(rounded_millions(weights(Strategy::kNone)), 122);
}

TEST(CountParameters, NoneIsTwiceFull) {
  auto c = base_config();
  auto none = count_parameters(c, plan_from_strategy(Strategy::kNone, kPair, c));
  auto full = count_parameters(c, plan_from_strategy(Strategy::kFull, kPair, c));
  EXPECT_EQ(none.total, 2 * full.total);
  EXPECT_EQ(none.weights_only, 2 * full.weights_only);
}

TEST(CountParameters, TinyConfigMatchesHandArithmetic) {
  auto c = tiny_config();
  auto full = count_parameters(c, plan_from_strategy(Strategy::kFull, kPair, c));
  EXPECT_EQ(full.total, one_model_total(c));
  auto none = count_parameters(c, plan_from_strategy(Strategy::kNone, kPair, c));
  EXPECT_EQ(none.total, 2 * one_model_total(c));
  auto single = count_parameters(c, plan_from_strategy(Strategy::kNone, {"de"}, c));
  EXPECT_EQ(single.total, one_model_total(c));
}

TEST(CountParameters, IndependentOfNamesAndRepeatable) {
  auto c = base_config();
  for (auto s : builtin_strategies()) {
    auto a = count_parameters(c, plan_from_strategy(s, kPair, c));
    auto b = count_parameters(c, plan_from_strategy(s, {"xx", "yy"}, c));
    auto again = count_parameters(c, plan_from_strategy(s, kPair, c));
    EXPECT_EQ(a.total, b.total);
    EXPECT_EQ(a.weights_only, b.weights_only);
    EXPECT_EQ(a.total, again.total);
  }
}

TEST(CountParameters, MonotoneUnderInclusion) {
  // Each pair (smaller sharing set, larger sharing set).
  const std::vector<std::pair<Strategy, Strategy>> chain = {
      {Strategy::kNone, Strategy::kEmbed},         {Strategy::kEmbed, Strategy::kEmbedEnc},
      {Strategy::kEmbedEnc, Strategy::kFfn},       {Strategy::kEmbedEnc, Strategy::kSelfAttn},
      {Strategy::kEmbedEnc, Strategy::kEncDecAttn}, {Strategy::kEmbedEnc, Strategy::kKvBoth},
      {Strategy::kEmbedEnc, Strategy::kKqBoth},    {Strategy::kSelfAttn, Strategy::kAttnBoth},
      {Strategy::kEncDecAttn, Strategy::kAttnBoth}, {Strategy::kKvBoth, Strategy::kAttnBoth},
      {Strategy::kKqBoth, Strategy::kAttnBoth},    {Strategy::kAttnBoth, Strategy::kFull},
      {Strategy::kFfn, Strategy::kFull}};
  for (const auto& cfg : {base_config(), tiny_config()}) {
    for (auto [small, large] : chain) {
      auto a = count_parameters(cfg, plan_from_strategy(small, kPair, cfg));
      auto b = count_parameters(cfg, plan_from_strategy(large, kPair, cfg));
      EXPECT_LE(b.total, a.total) << strategy_name(small) << " vs " << strategy_name(large);
      EXPECT_LE(b.weights_only, a.weights_only);
    }
  }
}

TEST(PlanFromStrategy, KqBothSharesExactlyKeyAndQueryInEveryLayer) {
  auto c = base_config();
  auto plan = plan_from_strategy(Strategy::kKqBoth, kPair, c);
  int shared_decoder = 0;
  for (const auto& g : plan.groups) {
    if (g.front().component != Component::kDecoder) continue;
    if (g.size() == 1) {
      EXPECT_FALSE(g.front().role == Role::kK || g.front().role == Role::kQ) << g.front().to_string();
      continue;
    }
    ++shared_decoder;
    ASSERT_EQ(g.size(), 2u);
    EXPECT_TRUE(g[0].role == Role::kK || g[0].role == Role::kQ);
    EXPECT_EQ(g[0].retarget(""), g[1].retarget(""));
    EXPECT_NE(g[0].target, g[1].target);
  }
  EXPECT_EQ(shared_decoder, 24);
}

TEST(PlanFromStrategy, FullHasBilingualCellCountAndNoneHasNoAliasing) {
  auto c = tiny_config();
  const auto bilingual = model_slots(c, "de").size();
  auto full = ParameterTable<double>::resolve(c, plan_from_strategy(Strategy::kFull, kPair, c));
  EXPECT_EQ(full.cell_count(), bilingual);
  EXPECT_EQ(full.slot_count(), 2 * bilingual);
  auto none = ParameterTable<double>::resolve(c, plan_from_strategy(Strategy::kNone, kPair, c));
  EXPECT_EQ(none.cell_count(), 2 * bilingual);
  EXPECT_EQ(none.slot_count(), none.cell_count());
}

TEST(PlanFromStrategy, EncoderAndEmbeddingFollowTheStrategy) {
  auto c = tiny_config();
  auto e = SlotId::parse("embedding.E@de");
  auto enc = SlotId::parse("encoder.L1.ffn.L1@de");
  for (auto s : builtin_strategies()) {
    auto t = ParameterTable<float>::resolve(c, plan_from_strategy(s, kPair, c));
    bool embed_shared = t.cell_of(e) == t.cell_of(e.retarget("nl"));
    bool enc_shared = t.cell_of(enc) == t.cell_of(enc.retarget("nl"));
    EXPECT_EQ(embed_shared, s != Strategy::kNone) << strategy_name(s);
    EXPECT_EQ(enc_shared, s != Strategy::kNone && s != Strategy::kEmbed) << strategy_name(s);
  }
}

TEST(PlanFromStrategy, NormsAndBiasesFollowTheirSublayer) {
  auto c = tiny_config();
  auto shared = [&](Strategy s, const std::string& slot) {
    auto t = ParameterTable<float>::resolve(c, plan_from_strategy(s, kPair, c));
    auto id = SlotId::parse(slot + "@de");
    return t.cell_of(id) == t.cell_of(id.retarget("nl"));
  };
  EXPECT_TRUE(shared(Strategy::kFfn, "decoder.L2.ffn.b1"));
  EXPECT_TRUE(shared(Strategy::kFfn, "decoder.L2.ffn.gain"));
  EXPECT_FALSE(shared(Strategy::kKqBoth, "decoder.L2.self_attn.gain"));
  EXPECT_TRUE(shared(Strategy::kSelfAttn, "decoder.L2.self_attn.bias"));
  EXPECT_FALSE(shared(Strategy::kAttnBoth, "decoder.norm_final.gain"));
  EXPECT_TRUE(shared(Strategy::kFull, "decoder.norm_final.gain"));
}

TEST(SharingPlan, SerializeParseRoundTrip) {
  auto c = tiny_config();
  for (auto s : builtin_strategies()) {
    auto plan = plan_from_strategy(s, kPair, c);
    EXPECT_EQ(SharingPlan::parse(plan.serialize(), c), plan) << strategy_name(s);
  }
  auto k = SlotId::parse("decoder.L2.self_attn.K@de");
  auto ex = explicit_plan(kPair, {{k, k.retarget("nl")}}, c);
  auto text = ex.serialize();
  EXPECT_NE(text.find("group = decoder.L2.self_attn.K@de decoder.L2.self_attn.K@nl"), std::string::npos);
  EXPECT_EQ(SharingPlan::parse(text, c), ex);
  EXPECT_THROW(SharingPlan::parse("strategy = KQ_ONLY\ntargets = de\n", c), ConfigError);
  EXPECT_THROW(SharingPlan::parse("strategy = FULL\ntarget = de\n", c), ConfigError);
}

TEST(SharingPlan, RoutesLanguages) {
  auto c = tiny_config();
  auto plan = plan_from_strategy(Strategy::kFull, kPair, c);
  EXPECT_EQ(plan.route("nl"), "nl");
  EXPECT_THROW(plan.route("fr"), PlanError);
  auto unified = plan_from_strategy(Strategy::kNone, {std::string(kUnifiedTarget)}, c);
  EXPECT_EQ(unified.route("fr"), kUnifiedTarget);
  EXPECT_TRUE(unified.serves("anything"));
}

TEST(ParameterTable, WritesAliasOnlyWithinGroups) {
  auto c = tiny_config();
  auto k_de = SlotId::parse("decoder.L1.self_attn.K@de");
  auto k_nl = k_de.retarget("nl");
  auto full = ParameterTable<double>::resolve(c, plan_from_strategy(Strategy::kFull, kPair, c));
  Tensor<double>(full.slot(k_de)).mutable_data()[3] = 7.5;
  EXPECT_EQ(full.slot(k_nl)[3], 7.5);
  EXPECT_TRUE(verify_table(full).empty());

  auto none = ParameterTable<double>::resolve(c, plan_from_strategy(Strategy::kNone, kPair, c));
  Tensor<double>(none.slot(k_de)).mutable_data()[3] = 7.5;
  for (const auto& s : enumerate_slots(c, kPair)) {
    if (s == k_de) continue;
    for (double x : none.slot(s).data()) EXPECT_EQ(x, 0.0) << s.to_string();
  }
}

TEST(ParameterTable, SharedGradientIsSumOfPerDecoderGradients) {
  auto c = tiny_config();
  auto k_de = SlotId::parse("decoder.L1.self_attn.K@de");
  auto k_nl = k_de.retarget("nl");
  std::vector<double> init(64), x_de(16), x_nl(16);
  for (std::size_t i = 0; i < init.size(); ++i) init[i] = std::sin(0.3 * i);
  for (std::size_t i = 0; i < 16; ++i) {
    x_de[i] = std::cos(0.7 * i);
    x_nl[i] = std::sin(1.1 * i + 0.2);
  }
  auto loss_through = [](Graph<double>& g, const Tensor<double>& w, const std::vector<double>& x) {
    auto in = Tensor<double>({2, 8}, x);
    auto y = g.matmul(in, w);
    return g.sum(g.matmul(y, y, true));
  };

  auto shared = ParameterTable<double>::resolve(c, plan_from_strategy(Strategy::kKqBoth, kPair, c));
  std::copy(init.begin(), init.end(), Tensor<double>(shared.slot(k_de)).mutable_data().begin());
  for (auto& [slot, x] : {std::pair{k_de, x_de}, std::pair{k_nl, x_nl}}) {
    Graph<double> g;
    g.backward(loss_through(g, shared.slot(slot), x));
  }

  std::vector<double> expected(64, 0.0);
  for (const auto& x : {x_de, x_nl}) {
    auto w = Tensor<double>({8, 8}, init, true);
    Graph<double> g;
    g.backward(loss_through(g, w, x));
    for (std::size_t i = 0; i < 64; ++i) expected[i] += w.grad()[i];
  }
  for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(shared.slot(k_nl).grad()[i], expected[i], 1e-6);
}

TEST(VerifyPlan, FreshTablesAreClean) {
  auto c = tiny_config();
  for (auto s : builtin_strategies()) {
    auto t = ParameterTable<float>::resolve(c, plan_from_strategy(s, kPair, c));
    EXPECT_TRUE(verify_table(t).empty()) << strategy_name(s);
  }
}

TEST(VerifyPlan, ExplicitShapeConflictIsReported) {
  auto c = tiny_config();
  auto k = SlotId::parse("decoder.L1.self_attn.K@de");
  auto l1 = SlotId::parse("decoder.L1.ffn.L1@nl");
  auto plan = explicit_plan(kPair, {{k, l1}}, c);
  auto findings = verify_plan(plan, c);
  ASSERT_EQ(findings.size(), 1u);
  EXPECT_EQ(findings[0].kind, PlanFinding::Kind::kShapeConflict);
  EXPECT_THROW(ParameterTable<float>::resolve(c, plan), PlanError);
}

TEST(VerifyPlan, PartitionErrorsAreReported) {
  auto c = tiny_config();
  auto plan = plan_from_strategy(Strategy::kNone, kPair, c);
  plan.groups.pop_back();
  plan.groups.front().push_back(plan.groups[1].front());
  auto findings = verify_plan(plan, c);
  std::set<PlanFinding::Kind> kinds;
  for (const auto& f : findings) kinds.insert(f.kind);
  EXPECT_TRUE(kinds.count(PlanFinding::Kind::kMissingSlot));
  EXPECT_TRUE(kinds.count(PlanFinding::Kind::kDuplicateSlot));
  EXPECT_THROW(explicit_plan(kPair, {{SlotId::parse("decoder.L9.ffn.L1@de")}}, c), PlanError);
}

#include <gtest/gtest.h>

#include "ftn/analysis.hpp"
#include "test_util.hpp"

using namespace ftn;
using ftn::testing::random_tensor;

namespace {

std::uint64_t instantiated(const PGTConfig& cfg) {
  Rng rng(0);
  auto enc = PGTEncoder<float>::create(cfg, rng);
  return parameter_count<float>(enc);
}

std::uint64_t row_macs(const CostReport& r, const std::string& name) {
  for (const auto& row : r.rows)
    if (row.name == name) return row.macs;
  ADD_FAILURE() << "no row " << name;
  return 0;
}

}  // namespace

TEST(CountParams, SingleLinearLayer) {
  EXPECT_EQ(cost::linear_params(4, 8), 40u);
  Rng rng(1);
  auto lin = Linear<float>::create(4, 8, rng);
  EXPECT_EQ(parameter_count<float>(lin), 40u);
}

TEST(CountParams, AnalyticEqualsInstantiatedAcrossConfigs) {
  std::vector<PGTConfig> matrix;
  for (std::size_t c1 : {8u, 16u})
    for (PGTConfig::PerStage depths : {PGTConfig::PerStage{1, 1, 1, 1}, {2, 1, 3, 1}})
      for (std::size_t classes : {0u, 10u}) {
        matrix.push_back(PGTConfig::from_width(c1, depths, 4, {64, 16, 1, 1}, 4, classes));
        matrix.push_back(PGTConfig::from_width(c1, depths, 8, {16, 4, 4, 1}, 2, classes));
      }
  matrix.push_back(variant("T"));
  for (const auto& cfg : matrix) {
    const auto report = count_params(cfg);
    EXPECT_EQ(report.total_params(), instantiated(cfg)) << "C1=" << cfg.dims[0];
  }
}

TEST(CountParams, WholeMicroModelIncludingAuxHeads) {
  const auto cfg = micro_config(3);
  auto model = FTNModel<float>::create(cfg);
  std::uint64_t all = 0, inference = 0;
  model.visit("", [&](const std::string&, Tensor& t) { all += t.numel(); });
  model.visit_inference("", [&](const std::string&, Tensor& t) { inference += t.numel(); });
  const auto enc = count_params(cfg.encoder).total_params();
  const auto dec = count_params(cfg.decoder, cfg.encoder).total_params();
  EXPECT_EQ(inference, enc + dec);
  EXPECT_EQ(all, enc + dec + aux_head_cost(cfg.decoder).total_params());
}

TEST(CountParams, TotalsAreRowSums) {
  const auto r = estimate_flops(variant("B"));
  std::uint64_t p = 0, m = 0;
  for (const auto& row : r.rows) {
    p += row.params;
    m += row.macs;
  }
  EXPECT_EQ(r.total_params(), p);
  EXPECT_EQ(r.total_macs(), m);
  EXPECT_EQ(r.total_params(), count_params(variant("B")).total_params());
}

TEST(CountParams, PublishedBudgets) {
  const double budget[] = {13e6, 28e6, 50e6, 88e6};
  for (std::size_t i = 0; i < 4; ++i) {
    const double n = static_cast<double>(count_params(variant(variant_names()[i])).total_params());
    EXPECT_NEAR(n, budget[i], 0.05 * budget[i]) << variant_names()[i];
  }
}

TEST(CountParams, InvalidConfigIsRejected) {
  auto cfg = variant("T");
  cfg.dims[1] = 100;
  EXPECT_THROW(count_params(cfg), ConfigError);
}

TEST(EstimateFlops, PublishedGflops) {
  const double budget[] = {2.1, 4.6, 9.1, 15.9};
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_NEAR(estimate_flops(variant(variant_names()[i])).gflops(), budget[i], 0.15 * budget[i]);
}

TEST(EstimateFlops, MatchesInstrumentedForwardExactly) {
  for (std::size_t side : {32u, 64u, 96u}) {
    auto cfg = micro_config();
    cfg.decoder.fusion = side == 64 ? Fusion::Concat : Fusion::Sum;
    cfg.decoder.sr_ratios = {2, 4, 2};
    auto model = FTNModel<float>::create(cfg);
    Rng rng(side);
    auto img = random_tensor({1, side, side, 3}, rng, 0, 1);
    NoGradGuard guard;
    MacCounter counter;
    forward(model, img);
    const auto want =
        encoder_cost(cfg.encoder, side, side).total_macs() + decoder_cost(cfg.decoder, cfg.encoder, side, side).total_macs();
    EXPECT_EQ(counter.total(), want) << side;
  }
}

TEST(EstimateFlops, EncoderWithHeadMatchesInstrumentedRun) {
  const auto cfg = PGTConfig::from_width(8, {1, 2, 1, 1}, 4, {64, 16, 1, 1}, 4, 10);
  Rng rng(3);
  auto enc = PGTEncoder<float>::create(cfg, rng);
  auto img = random_tensor({1, 64, 64, 3}, rng);
  NoGradGuard guard;
  MacCounter counter;
  classification_head(run_encoder(img, enc)[3], enc.head);
  EXPECT_EQ(counter.total(), estimate_flops(cfg, 64, 64).total_macs());
}

TEST(EstimateFlops, LinearInDepth) {
  for (std::size_t stage = 0; stage < 4; ++stage) {
    std::vector<std::uint64_t> m;
    for (std::size_t n = 1; n <= 4; ++n) {
      auto depths = variant("T").depths;
      depths[stage] = n;
      m.push_back(estimate_flops(PGTConfig::from_width(64, depths)).total_macs());
    }
    EXPECT_GT(m[1], m[0]);
    EXPECT_EQ(m[1] - m[0], m[2] - m[1]);
    EXPECT_EQ(m[2] - m[1], m[3] - m[2]);
  }
}

TEST(EstimateFlops, ScoresQuadraticOtherTermsLinearInTokens) {
  const auto cfg = variant("S");
  const auto small = estimate_flops(cfg, 224, 224), big = estimate_flops(cfg, 448, 448);  // 4x tokens
  for (std::size_t i = 0; i < small.rows.size(); ++i) {
    const auto& name = small.rows[i].name;
    const auto a = small.rows[i].macs, b = big.rows[i].macs;
    if (name == "head")
      EXPECT_EQ(b, a);
    else if (name.find("scores") != std::string::npos || name.find("context") != std::string::npos)
      EXPECT_EQ(b, 16 * a) << name;
    else
      EXPECT_EQ(b, 4 * a) << name;
  }
}

TEST(EstimateFlops, GroupingCutsStageOneScoresBy64) {
  auto grouped = variant("T");
  auto global = grouped;
  global.groups = {1, 1, 1, 1};
  const auto g = row_macs(estimate_flops(grouped), "stage1.attn.scores");
  const auto f = row_macs(estimate_flops(global), "stage1.attn.scores");
  EXPECT_EQ(g * 64, f);
  EXPECT_EQ(f, 3136ull * 3136 * 64);
}

TEST(EstimateFlops, RejectsIllegalGeometry) {
  EXPECT_THROW(estimate_flops(variant("T"), 200, 200), LayoutError);
  EXPECT_THROW(estimate_flops(variant("T"), 0, 224), ParameterError);
}

TEST(DeriveVariants, ReproducesFrozenConfigsWithinBudget) {
  const auto found = derive_variants();
  const auto& budgets = published_budgets();
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& v = found[i];
    EXPECT_EQ(v.config, variant(v.name)) << v.name;
    EXPECT_TRUE(v.config.follows_published_rules());
    EXPECT_EQ(v.params, count_params(v.config).total_params());
    EXPECT_GE(static_cast<double>(v.params), 0.95 * budgets[i].params);
    EXPECT_LE(static_cast<double>(v.params), 1.05 * budgets[i].params);
    EXPECT_LE(v.flop_miss, kFlopTolerance);
  }
  EXPECT_EQ(found[0].config.depths, found[1].config.depths);
  EXPECT_EQ(found[1].config.dims, found[2].config.dims);
}

TEST(DeriveVariants, CountGrowsStrictlyWithDepth) {
  for (std::size_t c1 : {64u, 96u, 128u}) {
    std::uint64_t prev = 0;
    for (std::size_t n3 = 2; n3 <= 18; ++n3) {
      const auto n = count_params(PGTConfig::from_width(c1, {1, 1, n3, 1})).total_params();
      EXPECT_GT(n, prev);
      prev = n;
    }
  }
}

TEST(DeriveVariants, UnreachableBudgetListsNearestCandidate) {
  auto budgets = published_budgets();
  budgets[0].params = 1e6;
  try {
    derive_variants(budgets);
    FAIL();
  } catch (const DerivationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("nearest"), std::string::npos) << msg;
    EXPECT_NE(msg.find("C1=64"), std::string::npos) << msg;
  }
}

TEST(StageShapes, TokenCountsFollowStrides) {
  for (std::size_t side : {224u, 256u, 512u}) {
    const auto s = stage_shapes(variant("L"), side, side);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_EQ(s[i].tokens, side * side >> (2 * i + 4));
      EXPECT_EQ(s[i].dim, 128u << i);
    }
  }
}

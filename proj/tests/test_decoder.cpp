#include <gtest/gtest.h>

#include "ftn/analysis.hpp"
#include "ftn/decoder.hpp"
#include "test_util.hpp"

using namespace ftn;
using ftn::testing::max_abs_diff;
using ftn::testing::random_tensor;
using DTensor = BasicTensor<double>;

namespace {

const PGTConfig::PerStage kEncoderDims{8, 16, 32, 64};

FPTConfig small_config(std::size_t k = 3) {
  FPTConfig c;
  c.embed_dim = 8;
  c.head_dim = 4;
  c.num_classes = k;
  return c;
}

template <class T>
FeaturePyramid<T> random_pyramid(std::size_t batch, std::size_t h, std::size_t w, Rng& rng) {
  FeaturePyramid<T> p;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t s = std::size_t{4} << i;
    p.levels[i] = random_tensor<T>({batch, h / s, w / s, kEncoderDims[i]}, rng);
  }
  return p;
}

template <class T>
std::size_t instantiated_count(const FPTConfig& cfg) {
  Rng rng(0);
  auto dec = FPTDecoder<T>::create(cfg, kEncoderDims, rng);
  return parameter_count<T>(dec);
}

}  // namespace

TEST(FptConfig, DefaultsAreTheSelectedDesign) {
  const FPTConfig c;
  EXPECT_EQ(c.embed_dim, 512u);
  EXPECT_EQ(c.depths, (std::array<std::size_t, 3>{1, 1, 1}));
  EXPECT_EQ(c.sr_ratios, (std::array<std::size_t, 3>{2, 2, 2}));
  EXPECT_EQ(c.fusion, Fusion::Sum);
  EXPECT_EQ(parse_fusion("concat"), Fusion::Concat);
  EXPECT_THROW(parse_fusion("max"), ConfigError);
  auto bad = c;
  bad.head_dim = 30;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Decoder, BranchLayout) {
  Rng rng(1);
  auto dec = FPTDecoder<float>::create(small_config(), kEncoderDims, rng);
  const std::size_t blocks[] = {0, 1, 2, 3};
  for (std::size_t i = 0; i < 4; ++i) {
    std::size_t n = 0;
    for (const auto& step : dec.branches[i].steps) n += step.size();
    EXPECT_EQ(n, blocks[i]) << "branch " << i + 1;
    EXPECT_EQ(dec.branches[i].upsample_steps(), i);
  }
}

TEST(Decoder, OutputShapes) {
  Rng rng(2);
  auto dec = FPTDecoder<float>::create(small_config(5), kEncoderDims, rng);
  auto out = run_decoder(random_pyramid<float>(2, 64, 96, rng), dec, true);
  EXPECT_EQ(out.logits.shape(), (Shape{2, 64, 96, 5}));
  for (const auto& b : out.branches) EXPECT_EQ(b.shape(), (Shape{2, 16, 24, 8}));
  ASSERT_EQ(out.aux_logits.size(), 4u);
  for (const auto& a : out.aux_logits) EXPECT_EQ(a.shape(), out.logits.shape());
  EXPECT_TRUE(run_decoder(random_pyramid<float>(1, 64, 64, rng), dec).aux_logits.empty());
}

TEST(Decoder, TopDownMergeIsUpsamplePlusLateral) {
  Rng rng(3);
  auto coarse = random_tensor({1, 2, 3, 4}, rng), fine = random_tensor({1, 4, 6, 4}, rng);
  auto merged = top_down_merge(coarse, fine);
  auto want = add(bilinear_upsample(coarse, 2), fine);
  EXPECT_EQ(merged.to_vector(), want.to_vector());
  EXPECT_THROW(top_down_merge(coarse, random_tensor({1, 4, 5, 4}, rng)), LayoutError);
}

TEST(Decoder, FinestStageFeedsOnlyTheFirstBranch) {
  Rng rng(4);
  auto dec = FPTDecoder<float>::create(small_config(), kEncoderDims, rng);
  auto pyr = random_pyramid<float>(1, 64, 64, rng);
  NoGradGuard guard;
  auto base = run_decoder(pyr, dec);
  auto moved = pyr;
  moved.levels[0] = add(pyr.levels[0], Tensor::full(pyr.levels[0].shape(), 0.3f));
  auto out = run_decoder(moved, dec);
  EXPECT_NE(out.branches[0].to_vector(), base.branches[0].to_vector());
  for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(out.branches[i].to_vector(), base.branches[i].to_vector());

  // The coarsest stage reaches every branch through the top-down path.
  moved = pyr;
  moved.levels[3] = add(pyr.levels[3], Tensor::full(pyr.levels[3].shape(), 0.3f));
  out = run_decoder(moved, dec);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NE(out.branches[i].to_vector(), base.branches[i].to_vector());
}

TEST(Decoder, FusionModes) {
  Rng rng(5);
  std::array<DTensor, 4> br;
  for (auto& b : br) b = random_tensor<double>({1, 2, 2, 3}, rng);
  auto summed = fuse_branches(br, Fusion::Sum);
  for (std::size_t i = 0; i < summed.numel(); ++i)
    EXPECT_DOUBLE_EQ(summed.data()[i], br[0].data()[i] + br[1].data()[i] + br[2].data()[i] + br[3].data()[i]);

  auto lin = Linear<double>::create(12, 3, rng);
  auto cat = fuse_branches(br, Fusion::Concat, &lin);
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t o = 0; o < 3; ++o) {
      double acc = lin.bias.data()[o];
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t c = 0; c < 3; ++c) acc += br[j].data()[p * 3 + c] * lin.weight.data()[(j * 3 + c) * 3 + o];
      EXPECT_NEAR(cat.data()[p * 3 + o], acc, 1e-12);
    }
  EXPECT_THROW(fuse_branches(br, Fusion::Concat), UsageError);
  br[2] = random_tensor<double>({1, 2, 3, 3}, rng);
  EXPECT_THROW(fuse_branches(br, Fusion::Sum), LayoutError);
}

TEST(Decoder, ArgmaxPrefersLowestIndexOnTies) {
  Tensor logits({1, 1, 3, 3}, {0, 1, 1, 2, 2, 0, 5, 5, 5});
  EXPECT_EQ(argmax_labels(logits), (std::vector<int>{1, 0, 0}));
}

TEST(SrBlock, ZeroParametersGiveIdentity) {
  Rng rng(6);
  auto block = SRBlock<float>::create(small_config(), 2, rng);
  zero_parameters<float>(block);
  auto x = random_tensor({1, 4, 4, 8}, rng);
  EXPECT_EQ(sr_block(x, block).to_vector(), x.to_vector());
}

TEST(Decoder, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  auto cfg = small_config(2);
  cfg.fusion = Fusion::Concat;
  auto dec = FPTDecoder<double>::create(cfg, kEncoderDims, rng);
  auto pyr = random_pyramid<double>(1, 32, 32, rng);
  auto x = random_tensor<double>(pyr.levels[2].shape(), rng, -1, 1, true);
  auto weights = random_tensor<double>({1, 32, 32, 2}, rng);
  auto f = [&](const DTensor& in) {
    auto p = pyr;
    p.levels[2] = in;
    return sum(mul(run_decoder(p, dec).logits, weights));
  };
  EXPECT_LT(ftn::testing::worst_input_gradient_error(f, x), 1e-4);
}

TEST(DecoderCost, AnalyticCountMatchesInstantiation) {
  const auto enc = PGTConfig::from_width(8, {1, 1, 1, 1}, 4, {64, 16, 1, 1}, 4, 0);
  for (auto fusion : {Fusion::Sum, Fusion::Concat})
    for (std::array<std::size_t, 3> depths : {std::array<std::size_t, 3>{1, 1, 1}, {1, 2, 1}, {2, 0, 3}})
      for (std::array<std::size_t, 3> ratios : {std::array<std::size_t, 3>{2, 2, 2}, {1, 4, 2}}) {
        auto cfg = small_config();
        cfg.fusion = fusion;
        cfg.depths = depths;
        cfg.sr_ratios = ratios;
        EXPECT_EQ(instantiated_count<float>(cfg), count_params(cfg, enc).total_params());
      }
}

TEST(DecoderCost, DesignSwitchesChangeCountByExpectedDelta) {
  const auto enc = variant("T");
  const FPTConfig base;
  const auto d = base.embed_dim;
  const auto base_count = count_params(base, enc).total_params();

  auto concat = base;
  concat.fusion = Fusion::Concat;
  EXPECT_EQ(count_params(concat, enc).total_params() - base_count, 4 * d * d + d);

  auto deeper = base;
  deeper.depths = {1, 2, 1};
  // The stride-16 stage is visited by branches 3 and 4, so two blocks are added.
  EXPECT_EQ(count_params(deeper, enc).total_params() - base_count, 2 * cost::sr_block_params(d, 2, 4));

  auto small = small_config();
  auto small_concat = small;
  small_concat.fusion = Fusion::Concat;
  EXPECT_EQ(instantiated_count<float>(small_concat) - instantiated_count<float>(small), 4u * 8 * 8 + 8);
  auto small_deeper = small;
  small_deeper.depths = {1, 2, 1};
  EXPECT_EQ(instantiated_count<float>(small_deeper) - instantiated_count<float>(small),
            2 * cost::sr_block_params(8, 2, 4));
}

TEST(DecoderCost, AuxHeadsAreReportedSeparately) {
  Rng rng(8);
  auto cfg = small_config(4);
  auto dec = FPTDecoder<float>::create(cfg, kEncoderDims, rng);
  std::size_t aux = 0;
  dec.visit_aux("", [&](const std::string&, Tensor& t) { aux += t.numel(); });
  EXPECT_EQ(aux, aux_head_cost(cfg).total_params());
  EXPECT_EQ(aux, 4u * (8 * 4 + 4));
}

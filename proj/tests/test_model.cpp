#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "ftn/checkpoint.hpp"
#include "ftn/diagnostics.hpp"
#include "ftn/model.hpp"
#include "test_util.hpp"

using namespace ftn;
using ftn::testing::random_tensor;

namespace {

FTNModel<float> micro(std::uint64_t seed = 0, std::size_t k = 2) {
  auto cfg = micro_config(k);
  cfg.seed = seed;
  return FTNModel<float>::create(cfg);
}

std::string checkpoint_bytes(FTNModel<float>& m) {
  std::ostringstream os;
  write_checkpoint(os, m);
  return os.str();
}

}  // namespace

TEST(Model, MicroConfigStaysUnderGradcheckBudget) {
  auto m = micro();
  std::size_t total = 0;
  m.visit("", [&](const std::string&, Tensor& t) { total += t.numel(); });
  EXPECT_LT(total, 100000u);
  EXPECT_EQ(m.config.encoder.dims, (PGTConfig::PerStage{8, 16, 32, 64}));
}

TEST(Model, ForwardShapeAndDeterminism) {
  auto m = micro();
  Rng rng(1);
  auto img = random_tensor({2, 64, 64, 3}, rng, 0, 1);
  auto a = forward(m, img), b = forward(m, img);
  EXPECT_EQ(a.shape(), (Shape{2, 64, 64, 2}));
  EXPECT_EQ(a.to_vector(), b.to_vector());
  EXPECT_THROW(forward(m, random_tensor({1, 48, 64, 3}, rng)), LayoutError);
  EXPECT_THROW(forward(m, random_tensor({1, 64, 64, 4}, rng)), DimensionError);
}

TEST(Model, OnePixelReachesTheFarCorner) {
  auto m = micro(3);
  Rng rng(2);
  auto img = random_tensor({1, 64, 64, 3}, rng, 0, 1);
  auto moved = img.to_vector();
  moved[0] += 0.5f;  // top-left pixel
  NoGradGuard guard;
  auto a = forward(m, img), b = forward(m, Tensor(img.shape(), moved));
  EXPECT_NE(a.at({0, 63, 63, 0}), b.at({0, 63, 63, 0}));
}

TEST(Loss, UniformLogitsGiveLogK) {
  for (std::size_t k : {2u, 5u}) {
    auto logits = Tensor::zeros({1, 4, 4, k});
    std::vector<int> labels(16);
    for (std::size_t i = 0; i < 16; ++i) labels[i] = static_cast<int>(i % k);
    const double lnk = std::log(static_cast<double>(k));
    EXPECT_NEAR(segmentation_loss(logits, labels).item(), lnk, 1e-6);
    std::vector<Tensor> aux(4, logits);
    EXPECT_NEAR(segmentation_loss(logits, labels, aux).item(), lnk * (1 + 4 * kAuxLossWeight), 1e-6);
  }
}

TEST(Loss, MatchesPerPixelHandComputation) {
  Rng rng(4);
  auto logits = random_tensor<double>({1, 4, 4, 3}, rng, -2, 2);
  std::vector<int> labels(16);
  for (auto& l : labels) l = static_cast<int>(rng.index(3));
  double want = 0;
  for (std::size_t p = 0; p < 16; ++p) {
    double z = 0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits.data()[p * 3 + c]);
    want += std::log(z) - logits.data()[p * 3 + labels[p]];
  }
  EXPECT_NEAR(segmentation_loss(logits, labels).item(), want / 16, 1e-12);
  labels[3] = 3;
  EXPECT_THROW(segmentation_loss(logits, labels), DataError);
}

TEST(Loss, DecreasesAsOneHotLogitsSharpen) {
  std::vector<int> labels{0, 1, 1, 0};
  double prev = 1e9;
  for (double s : {1.0, 10.0, 100.0}) {
    std::vector<double> v;
    for (int l : labels) {
      v.push_back(l == 0 ? s : 0.0);
      v.push_back(l == 1 ? s : 0.0);
    }
    const double loss = segmentation_loss(BasicTensor<double>({1, 2, 2, 2}, v), labels).item();
    EXPECT_LT(loss, prev);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-40);
}

TEST(Loss, NearLogKAtInitialization) {
  auto m = micro(5);
  Rng rng(6);
  auto img = random_tensor({2, 64, 64, 3}, rng, 0, 1);
  std::vector<int> labels(2 * 64 * 64);
  for (auto& l : labels) l = static_cast<int>(rng.index(2));
  NoGradGuard guard;
  const double loss = segmentation_loss(forward(m, img), labels).item();
  EXPECT_NEAR(loss, std::log(2.0), 0.1 * std::log(2.0));
}

TEST(Optimizer, FirstAdamStepMatchesClosedForm) {
  BasicTensor<double> p({2}, {1.0, -2.0}, true);
  backward(sum(mul(p, BasicTensor<double>({2}, {0.5, -3.0}))));  // grad = (0.5, -3)
  AdamW<double> opt({p}, {0.9, 0.999, 1e-8, 0.0});
  opt.step(0.01);
  // m = 0.1 g, v = 0.001 g^2, bias-corrected m/sqrt(v) = sign(g) (up to eps).
  EXPECT_NEAR(p.data()[0], 1.0 - 0.01 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(p.data()[1], -2.0 + 0.01 * 3.0 / (3.0 + 1e-8), 1e-15);
}

TEST(Optimizer, WeightDecayIsDecoupled) {
  BasicTensor<double> p({1}, {2.0}, true);
  backward(sum(scale(p, 0.0)));  // zero gradient
  AdamW<double> opt({p}, {0.9, 0.999, 1e-8, 0.1});
  opt.step(0.5);
  EXPECT_DOUBLE_EQ(p.data()[0], 2.0 - 0.5 * 0.1 * 2.0);
}

TEST(Optimizer, PolynomialSchedule) {
  EXPECT_DOUBLE_EQ(poly_lr(1e-3, 0, 10), 1e-3);
  EXPECT_DOUBLE_EQ(poly_lr(1e-3, 10, 10), 0.0);
  EXPECT_DOUBLE_EQ(poly_lr(2.0, 5, 10), 2.0 * std::pow(0.5, 0.9));
}

TEST(Training, ZeroLearningRateKeepsLossConstant) {
  auto m = micro(7);
  const auto before = checkpoint_bytes(m);
  ToyTrainOptions opt;
  opt.steps = 4;
  opt.lr = 0.0;
  opt.batch = 2;
  opt.image_size = 32;
  opt.fixed_batch = true;
  auto trace = train_toy(m, opt);
  ASSERT_EQ(trace.rows.size(), 4u);
  for (const auto& r : trace.rows) EXPECT_EQ(r.loss, trace.rows[0].loss);
  EXPECT_EQ(checkpoint_bytes(m), before);
}

TEST(Training, TraceIsReproducibleAndCsvShaped) {
  ToyTrainOptions opt;
  opt.steps = 3;
  opt.batch = 2;
  opt.image_size = 32;
  opt.seed = 9;
  auto a = micro(1), b = micro(1);
  auto ta = train_toy(a, opt), tb = train_toy(b, opt);
  std::ostringstream ca, cb;
  ta.write_csv(ca);
  tb.write_csv(cb);
  EXPECT_EQ(ca.str(), cb.str());
  EXPECT_EQ(ca.str().substr(0, 13), "step,loss,lr\n");
  EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
}

TEST(Training, DivergenceReportsTheStep) {
  auto m = micro(2);
  ToyTrainOptions opt;
  opt.steps = 5;
  opt.batch = 1;
  opt.image_size = 32;
  opt.lr = 1e30;
  try {
    train_toy(m, opt);
    FAIL() << "expected divergence";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
  }
}

TEST(ToyData, LabelsAreInRangeAndColourCoded) {
  auto s = make_toy_sample(32, 48, 4, 11);
  ASSERT_EQ(s.labels.size(), 32u * 48);
  for (std::size_t p = 0; p < s.labels.size(); ++p) {
    ASSERT_GE(s.labels[p], 0);
    ASSERT_LT(s.labels[p], 4);
    const auto base = class_colour(s.labels[p]);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_LE(std::abs(s.image[p * 3 + c] - base[c]), 0.0801f);
  }
  auto again = make_toy_sample(32, 48, 4, 11);
  EXPECT_EQ(again.image, s.image);
  EXPECT_THROW(make_toy_sample(8, 8, 1, 0), ParameterError);
}

TEST(Metrics, MeanIouMatchesConfusionOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 2 + rng.index(4);
    std::vector<int> pred(200), gt(200);
    for (auto& v : pred) v = static_cast<int>(rng.index(k));
    for (auto& v : gt) v = static_cast<int>(rng.index(k - 1));  // class k-1 never in ground truth
    double sum_iou = 0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < k; ++c) {
      std::size_t inter = 0, uni = 0;
      for (std::size_t i = 0; i < 200; ++i) {
        const bool p = pred[i] == static_cast<int>(c), g = gt[i] == static_cast<int>(c);
        inter += p && g;
        uni += p || g;
      }
      if (uni == 0) continue;
      sum_iou += static_cast<double>(inter) / static_cast<double>(uni);
      ++present;
    }
    EXPECT_DOUBLE_EQ(mean_iou(pred, gt, k), sum_iou / static_cast<double>(present));
  }
  const std::vector<int> same{0, 1, 1, 0};
  EXPECT_DOUBLE_EQ(mean_iou(same, same, 3), 1.0);
  const std::vector<int> bad{0, 4};
  const std::vector<int> two{0, 1};
  EXPECT_THROW(mean_iou(bad, two, 3), DataError);
}

TEST(Gradcheck, MicroModelPassesAtFewCoordinates) {
  auto r = model_gradcheck(micro_config(), 3, 40);
  EXPECT_EQ(r.coordinates, 40u);
  EXPECT_LT(r.max_relative_error, 1e-3) << r.worst_parameter << "[" << r.worst_index << "]";
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto m = micro(21, 3);
  std::stringstream ss;
  write_checkpoint(ss, m);
  auto loaded = read_checkpoint<float>(ss);
  EXPECT_EQ(loaded.config, m.config);
  auto a = named_parameters<float>(m), b = named_parameters<float>(loaded);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(a[i].second.to_vector(), b[i].second.to_vector()) << a[i].first;
  }
  Rng rng(22);
  auto img = random_tensor({1, 32, 32, 3}, rng, 0, 1);
  EXPECT_EQ(forward(m, img).to_vector(), forward(loaded, img).to_vector());
}

TEST(Checkpoint, FileSizeMatchesLayoutArithmetic) {
  auto m = micro(4);
  const auto bytes = checkpoint_bytes(m);
  std::uint64_t want = checkpoint_header_bytes(to_text(m.config));
  for (const auto& [name, t] : named_parameters<float>(m)) want += checkpoint_record_bytes(name, t.shape());
  EXPECT_EQ(bytes.size(), want);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  auto m = micro(5);
  const auto bytes = checkpoint_bytes(m);

  std::istringstream truncated(bytes.substr(0, bytes.size() - 7));
  try {
    read_checkpoint<float>(truncated);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos) << e.what();
  }

  auto bad_version = bytes;
  bad_version[4] = 9;
  std::istringstream v(bad_version);
  EXPECT_THROW(read_checkpoint<float>(v), FormatError);

  // Same records, but a config that implies different shapes.
  const auto text = to_text(m.config);
  auto other = m.config;
  other.decoder.num_classes = 3;
  const auto other_text = to_text(other);
  ASSERT_EQ(other_text.size(), text.size());
  auto swapped = bytes;
  swapped.replace(10, text.size(), other_text);
  std::istringstream s(swapped);
  try {
    read_checkpoint<float>(s);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos) << e.what();
  }
}

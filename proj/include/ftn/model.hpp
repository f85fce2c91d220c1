#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "ftn/decoder.hpp"

namespace ftn {

struct ModelConfig {
  PGTConfig encoder;
  FPTConfig decoder;
  std::uint64_t seed = 0;  // parameter initialization

  void validate() const {
    encoder.validate();
    decoder.validate();
  }
  bool operator==(const ModelConfig&) const = default;
};

// A desk-scale FTN: 8-wide stage 1 with 4-wide heads and a 8-wide decoder,
// small enough for exhaustive gradient checks (< 100k parameters).
inline ModelConfig micro_config(std::size_t num_classes = 2) {
  ModelConfig c;
  c.encoder = PGTConfig::from_width(8, {1, 1, 1, 1}, 4, {64, 16, 1, 1}, 4, 0);
  c.decoder.embed_dim = 8;
  c.decoder.head_dim = 4;
  c.decoder.num_classes = num_classes;
  return c;
}

enum class Mode { Train, Infer };

template <class T>
struct FTNModel {
  ModelConfig config;
  PGTEncoder<T> encoder;
  FPTDecoder<T> decoder;
  Mode mode = Mode::Infer;

  static FTNModel create(const ModelConfig& config) {
    config.validate();
    Rng rng(config.seed);
    FTNModel m;
    m.config = config;
    m.encoder = PGTEncoder<T>::create(config.encoder, rng);
    m.decoder = FPTDecoder<T>::create(config.decoder, config.encoder.dims, rng);
    return m;
  }

  // Every parameter, auxiliary heads last.
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    encoder.visit(scoped(prefix, "encoder"), f);
    decoder.visit(scoped(prefix, "decoder"), f);
    decoder.visit_aux(scoped(prefix, "decoder"), f);
  }
  template <class F>
  void visit_inference(const std::string& prefix, F&& f) {
    encoder.visit(scoped(prefix, "encoder"), f);
    decoder.visit(scoped(prefix, "decoder"), f);
  }
};

// Image [B,H,W,3] -> logits [B,H,W,K].
template <class T>
BasicTensor<T> forward(const FTNModel<T>& model, const BasicTensor<T>& img) {
  return run_decoder(run_encoder(img, model.encoder), model.decoder).logits;
}

template <class T>
DecoderOutput<T> forward_train(const FTNModel<T>& model, const BasicTensor<T>& img, Rng* rng = nullptr) {
  ForwardContext ctx{model.mode == Mode::Train, rng};
  return run_decoder(run_encoder(img, model.encoder, ctx), model.decoder, true);
}

inline constexpr double kAuxLossWeight = 0.1;

// Mean per-pixel cross-entropy plus the weighted auxiliary branch losses.
template <class T>
BasicTensor<T> segmentation_loss(const BasicTensor<T>& logits, std::span<const int> labels,
                                 const std::vector<BasicTensor<T>>& aux_logits = {},
                                 double aux_weight = kAuxLossWeight) {
  auto total = cross_entropy(logits, labels);
  for (const auto& a : aux_logits) {
    if (a.shape() != logits.shape())
      throw DimensionError("aux logits " + shape_str(a.shape()) + " vs main " + shape_str(logits.shape()));
    total = add(total, scale(cross_entropy(a, labels), static_cast<T>(aux_weight)));
  }
  return total;
}

// ---------------------------------------------------------------------------
// Synthetic segmentation data: disks and rectangles on a background, with
// each class drawn in its own colour family.

struct ToySegSample {
  std::size_t height = 0, width = 0;
  std::vector<float> image;  // [H,W,3] in [0,1]
  std::vector<int> labels;   // [H,W] in [0,K)
  std::uint64_t seed = 0;
};

inline std::array<float, 3> class_colour(int k) {
  static const std::array<std::array<float, 3>, 8> palette{{{0.15f, 0.2f, 0.35f},
                                                             {0.85f, 0.25f, 0.2f},
                                                             {0.25f, 0.8f, 0.3f},
                                                             {0.9f, 0.85f, 0.2f},
                                                             {0.6f, 0.3f, 0.85f},
                                                             {0.2f, 0.8f, 0.85f},
                                                             {0.95f, 0.6f, 0.2f},
                                                             {0.9f, 0.9f, 0.9f}}};
  return palette[static_cast<std::size_t>(k) % palette.size()];
}

// Draws one shape per foreground class (1..K-1). With `disks_only` every
// shape is a disk.
inline ToySegSample make_toy_sample(std::size_t h, std::size_t w, std::size_t num_classes, std::uint64_t seed,
                                    bool disks_only = false) {
  if (num_classes < 2 || num_classes > 8) throw ParameterError("toy data supports 2..8 classes");
  ToySegSample s;
  s.height = h;
  s.width = w;
  s.seed = seed;
  s.labels.assign(h * w, 0);
  Rng rng(seed);
  const double side = static_cast<double>(std::min(h, w));
  for (std::size_t k = 1; k < num_classes; ++k) {
    const bool disk = disks_only || rng.uniform() < 0.5;
    const double cy = rng.uniform(0.2, 0.8) * static_cast<double>(h);
    const double cx = rng.uniform(0.2, 0.8) * static_cast<double>(w);
    const double r = rng.uniform(0.15, 0.3) * side;
    const double ry = rng.uniform(0.1, 0.25) * side, rx = rng.uniform(0.1, 0.25) * side;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
        const bool inside = disk ? dy * dy + dx * dx <= r * r : std::abs(dy) <= ry && std::abs(dx) <= rx;
        if (inside) s.labels[y * w + x] = static_cast<int>(k);
      }
  }
  s.image.resize(h * w * 3);
  for (std::size_t p = 0; p < h * w; ++p) {
    const auto base = class_colour(s.labels[p]);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = base[ch] + rng.uniform(-0.08, 0.08);
      s.image[p * 3 + ch] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return s;
}

template <class T>
struct Batch {
  BasicTensor<T> images;  // [B,H,W,3]
  std::vector<int> labels;
};

template <class T>
Batch<T> make_batch(const std::vector<ToySegSample>& samples) {
  if (samples.empty()) throw ParameterError("empty batch");
  const std::size_t h = samples[0].height, w = samples[0].width;
  std::vector<T> pixels;
  Batch<T> b;
  for (const auto& s : samples) {
    if (s.height != h || s.width != w) throw DimensionError("batch samples differ in size");
    pixels.insert(pixels.end(), s.image.begin(), s.image.end());
    b.labels.insert(b.labels.end(), s.labels.begin(), s.labels.end());
  }
  b.images = BasicTensor<T>({samples.size(), h, w, 3}, std::move(pixels));
  return b;
}

// ---------------------------------------------------------------------------
// Evaluation

// confusion[gt * K + pred]
inline std::vector<std::uint64_t> confusion_matrix(std::span<const int> pred, std::span<const int> gt, std::size_t k) {
  if (pred.size() != gt.size()) throw DimensionError("prediction/label size mismatch");
  std::vector<std::uint64_t> m(k * k, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt[i] < 0 || static_cast<std::size_t>(gt[i]) >= k || pred[i] < 0 || static_cast<std::size_t>(pred[i]) >= k)
      throw DataError("class id outside [0," + std::to_string(k) + ") at pixel " + std::to_string(i));
    ++m[static_cast<std::size_t>(gt[i]) * k + static_cast<std::size_t>(pred[i])];
  }
  return m;
}

// Mean over classes of TP / (TP + FP + FN); classes absent from both
// prediction and ground truth are skipped.
inline double mean_iou(std::span<const int> pred, std::span<const int> gt, std::size_t k) {
  auto m = confusion_matrix(pred, gt, k);
  double total = 0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t tp = m[c * k + c], fp = 0, fn = 0;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += m[o * k + c];
      fn += m[c * k + o];
    }
    const std::uint64_t uni = tp + fp + fn;
    if (uni == 0) continue;
    total += static_cast<double>(tp) / static_cast<double>(uni);
    ++counted;
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

// ---------------------------------------------------------------------------
// Optimization

// Adam with decoupled weight decay.
template <class T>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW(std::vector<BasicTensor<T>> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto data = p.mutable_data();
      auto grad = p.grad();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = grad[i];
        m_[k][i] = opt_.beta1 * m_[k][i] + (1 - opt_.beta1) * g;
        v_[k][i] = opt_.beta2 * v_[k][i] + (1 - opt_.beta2) * g * g;
        const double mhat = m_[k][i] / bc1, vhat = v_[k][i] / bc2;
        double value = data[i];
        value -= lr * opt_.weight_decay * value;
        value -= lr * mhat / (std::sqrt(vhat) + opt_.eps);
        data[i] = static_cast<T>(value);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<BasicTensor<T>> params_;
  Options opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// lr * (1 - step/total)^power
inline double poly_lr(double base, std::size_t step, std::size_t total, double power = 0.9) {
  if (total == 0) return base;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total);
  return base * std::pow(std::max(frac, 0.0), power);
}

struct ToyTrainOptions {
  std::size_t steps = 300;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::size_t batch = 4;
  std::size_t image_size = 64;
  bool disks_only = true;
  bool fixed_batch = false;  // reuse the first batch at every step
};

struct TraceRow {
  std::size_t step;
  double loss;       // main + weighted auxiliary terms
  double lr;
  double main_loss;  // main head cross-entropy alone
};

struct TrainingTrace {
  std::vector<TraceRow> rows;

  void write_csv(std::ostream& os) const {
    os << "step,loss,lr\n";
    os.precision(9);
    for (const auto& r : rows) os << r.step << ',' << r.loss << ',' << r.lr << '\n';
  }
};

// Trains on freshly generated toy batches. Sample seeds derive from the
// training seed, so the trace is reproducible bit for bit.
template <class T>
TrainingTrace train_toy(FTNModel<T>& model, const ToyTrainOptions& opt) {
  const std::size_t k = model.config.decoder.num_classes;
  std::vector<BasicTensor<T>> params;
  model.visit("", [&](const std::string&, BasicTensor<T>& p) { params.push_back(p); });
  AdamW<T> optimizer(params, {0.9, 0.999, 1e-8, opt.weight_decay});
  Rng data_rng(opt.seed);
  Rng drop_rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  model.mode = Mode::Train;
  TrainingTrace trace;
  Batch<T> batch;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    if (step == 0 || !opt.fixed_batch) {
      std::vector<ToySegSample> samples;
      for (std::size_t i = 0; i < opt.batch; ++i)
        samples.push_back(make_toy_sample(opt.image_size, opt.image_size, k, data_rng.next(), opt.disks_only));
      batch = make_batch<T>(samples);
    }
    const double lr = poly_lr(opt.lr, step, opt.steps);
    double loss_value = 0, main_value = 0;
    try {
      auto out = forward_train(model, batch.images, &drop_rng);
      {
        NoGradGuard no_grad;
        main_value = static_cast<double>(cross_entropy(out.logits, batch.labels).item());
      }
      auto loss = segmentation_loss(out.logits, batch.labels, out.aux_logits);
      loss_value = static_cast<double>(loss.item());
      optimizer.zero_grad();
      backward(loss);
    } catch (const NumericError& e) {
      throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss_value)) throw TrainingError("training diverged at step " + std::to_string(step));
    optimizer.step(lr);
    trace.rows.push_back({step, loss_value, lr, main_value});
  }
  model.mode = Mode::Infer;
  return trace;
}

// Mean IoU of the model's argmax predictions on freshly generated samples.
template <class T>
double evaluate_toy(const FTNModel<T>& model, std::size_t count, std::size_t image_size, std::uint64_t seed,
                    bool disks_only = true) {
  const std::size_t k = model.config.decoder.num_classes;
  Rng rng(seed);
  std::vector<int> pred, gt;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < count; ++i) {
    auto s = make_toy_sample(image_size, image_size, k, rng.next(), disks_only);
    auto b = make_batch<T>({s});
    auto labels = argmax_labels(forward(model, b.images));
    pred.insert(pred.end(), labels.begin(), labels.end());
    gt.insert(gt.end(), s.labels.begin(), s.labels.end());
  }
  return mean_iou(pred, gt, k);
}

}  // namespace ftn

#pragma once

#include <string>
#include <vector>

#include "ftn/gradcheck.hpp"
#include "ftn/model.hpp"

namespace ftn {

struct GradcheckReport {
  std::size_t parameters = 0;   // total trainable scalars
  std::size_t coordinates = 0;  // how many were checked
  double max_relative_error = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0, worst_numeric = 0;
};

// Checks reverse-mode parameter gradients of the full training loss (main
// plus auxiliary cross-entropy) of a double-precision FTN against central
// differences at randomly sampled parameter coordinates.
inline GradcheckReport model_gradcheck(const ModelConfig& config, std::uint64_t seed, std::size_t coordinates = 200,
                                       std::size_t image_size = 32, double h = kFiniteDiffStep) {
  auto model = FTNModel<double>::create(config);
  const std::size_t k = config.decoder.num_classes;
  Rng rng(seed);
  std::vector<double> pixels(image_size * image_size * 3);
  for (auto& p : pixels) p = rng.uniform();
  std::vector<int> labels(image_size * image_size);
  for (auto& l : labels) l = static_cast<int>(rng.index(k));
  const BasicTensor<double> img({1, image_size, image_size, 3}, std::move(pixels));

  auto loss_of = [&] {
    auto out = forward_train(model, img);
    return segmentation_loss(out.logits, labels, out.aux_logits);
  };

  auto params = named_parameters<double>(model);
  auto loss = loss_of();
  backward(loss);

  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& [_, t] : params) {
    offsets.push_back(total);
    total += t.numel();
  }
  GradcheckReport report;
  report.parameters = total;
  const auto picks = sample_coordinates(total, coordinates, rng);
  report.coordinates = picks.size();

  NoGradGuard no_grad;
  std::size_t p = 0;
  for (std::size_t flat : picks) {
    while (p + 1 < params.size() && offsets[p + 1] <= flat) ++p;
    auto& [name, t] = params[p];
    const std::size_t i = flat - offsets[p];
    const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
    auto data = t.mutable_data();
    const double saved = data[i];
    data[i] = saved + h;
    const double up = loss_of().item();
    data[i] = saved - h;
    const double down = loss_of().item();
    data[i] = saved;
    const double numeric = (up - down) / (2 * h);
    const double err = relative_error(analytic, numeric);
    if (err >= report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_parameter = name;
      report.worst_index = i;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

}  // namespace ftn

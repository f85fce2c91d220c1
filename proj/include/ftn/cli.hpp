#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include "ftn/analysis.hpp"
#include "ftn/checkpoint.hpp"
#include "ftn/config_io.hpp"
#include "ftn/diagnostics.hpp"
#include "ftn/image_io.hpp"
#include "ftn/tensor_io.hpp"

namespace ftn {

namespace cli_detail {

inline std::string millions(std::uint64_t n) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << static_cast<double>(n) / 1e6 << "M";
  return os.str();
}

inline std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline void print_stages(std::ostream& out, const PGTConfig& cfg, std::size_t h, std::size_t w) {
  const auto shapes = stage_shapes(cfg, h, w);
  out << "input " << h << "x" << w << '\n';
  out << "stage  stride  map      tokens  dim   heads  groups  tokens/group  blocks\n";
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& s = shapes[i];
    std::ostringstream map;
    map << s.height << "x" << s.width;
    out << std::left << std::setw(7) << i + 1 << std::setw(8) << cfg.stride(i) << std::setw(9) << map.str()
        << std::setw(8) << s.tokens << std::setw(6) << s.dim << std::setw(7) << cfg.heads[i] << std::setw(8)
        << cfg.groups[i] << std::setw(14) << s.tokens / cfg.groups[i] << cfg.depths[i] << '\n';
  }
}

inline void train_summary(std::ostream& out, const TrainingTrace& trace) {
  out << std::setprecision(6) << "initial loss " << trace.rows.front().loss << '\n'
      << "final loss " << trace.rows.back().loss << '\n';
}

}  // namespace cli_detail

// Entry point of the ftn_cli tool. Returns 0 on success, 2 on bad usage and
// 1 on runtime failures; diagnostics go to `err` as one line
// "error[<kind>]: <message>".
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Pyramid Group Transformer / Fully Transformer Network toolkit"};
  app.footer(
      "Cost convention: one multiply-accumulate counts as one FLOP. Reported GFLOPs cover\n"
      "linear projections, attention products, MLPs, patch transforms and the positional\n"
      "convolution; softmax, normalization, GELU and resampling are excluded.");
  app.require_subcommand(1);

  const std::vector<std::string> variant_choices{"T", "S", "B", "L"};

  std::string variant_name;
  auto* describe = app.add_subcommand("describe", "Print a variant's config and per-stage shapes");
  std::vector<std::size_t> describe_size{224, 224};
  describe->add_option("variant", variant_name, "T, S, B or L")->required()->check(CLI::IsMember(variant_choices));
  describe->add_option("--size", describe_size, "Input height and width")->expected(2);

  bool with_decoder = false, with_rows = false;
  auto* params = app.add_subcommand("params", "Analytic parameter count of a variant");
  params->add_option("variant", variant_name, "T, S, B or L")->required()->check(CLI::IsMember(variant_choices));
  params->add_flag("--with-decoder", with_decoder, "Also count the default FPT decoder");
  params->add_flag("--rows", with_rows, "Print the per-layer table");

  std::vector<std::size_t> flops_size{224, 224};
  auto* flops = app.add_subcommand("flops", "Analytic multiply-accumulate count of a variant encoder");
  flops->add_option("variant", variant_name, "T, S, B or L")->required()->check(CLI::IsMember(variant_choices));
  flops->add_option("--size", flops_size, "Input height and width")->expected(2);
  flops->add_flag("--rows", with_rows, "Print the per-layer table");

  std::string config_path, input_path, output_path, checkpoint_path;
  auto* fwd = app.add_subcommand("forward", "Run a model on an FTNT tensor [B,H,W,3] and write logits");
  fwd->add_option("--config", config_path, "Model config file")->check(CLI::ExistingFile);
  fwd->add_option("--checkpoint", checkpoint_path, "Checkpoint (overrides --config)")->check(CLI::ExistingFile);
  fwd->add_option("--input", input_path, "Input tensor file")->required()->check(CLI::ExistingFile);
  fwd->add_option("--output", output_path, "Output tensor file")->required();

  std::string image_path;
  auto* segment = app.add_subcommand("segment", "Label a PPM image with a checkpointed model");
  segment->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
  segment->add_option("--image", image_path, "Binary PPM (P6) input")->required()->check(CLI::ExistingFile);
  segment->add_option("--out", output_path, "Binary PGM (P5) label map")->required();

  std::uint64_t seed = 0;
  std::size_t coordinates = 200;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the micro FTN in double precision");
  gradcheck->add_option("--seed", seed, "Seed for input, labels and coordinate sampling")->required();
  gradcheck->add_option("--coords", coordinates, "Number of parameter coordinates")->check(CLI::PositiveNumber);

  ToyTrainOptions train_opt;
  std::string trace_path, save_path;
  std::size_t eval_count = 20;
  auto* train = app.add_subcommand("train-toy", "Train the micro FTN on synthetic two-class shapes");
  train->add_option("--steps", train_opt.steps, "Optimizer steps")->required();
  train->add_option("--seed", train_opt.seed, "Training seed")->required();
  train->add_option("--out", trace_path, "CSV trace (step,loss,lr)")->required();
  train->add_option("--lr", train_opt.lr, "Peak learning rate")->check(CLI::NonNegativeNumber);
  train->add_option("--weight-decay", train_opt.weight_decay, "Decoupled weight decay")->check(CLI::NonNegativeNumber);
  train->add_option("--size", train_opt.image_size, "Square image side");
  train->add_option("--batch", train_opt.batch, "Batch size")->check(CLI::PositiveNumber);
  train->add_option("--eval", eval_count, "Held-out samples for mIoU (0 skips)");
  train->add_option("--save", save_path, "Write a checkpoint after training");

  auto* derive = app.add_subcommand("derive-variants", "Search widths and depths matching the T/S/B/L budgets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    std::string msg = e.what();
    if (auto nl = msg.find('\n'); nl != std::string::npos) msg.erase(nl);
    err << "error[usage]: " << msg << '\n';
    return 2;
  }

  try {
    if (*describe) {
      const auto cfg = variant(variant_name);
      out << "PGT-" << variant_name << '\n' << to_text(cfg);
      cli_detail::print_stages(out, cfg, describe_size[0], describe_size[1]);
    } else if (*params) {
      const auto cfg = variant(variant_name);
      const auto enc = count_params(cfg);
      if (with_rows) enc.print(out, false);
      out << "encoder params " << enc.total_params() << " (" << cli_detail::millions(enc.total_params()) << ")\n";
      if (with_decoder) {
        const FPTConfig dcfg;
        const auto dec = count_params(dcfg, cfg);
        const auto aux = aux_head_cost(dcfg);
        if (with_rows) dec.print(out, false);
        out << "decoder params " << dec.total_params() << " (" << cli_detail::millions(dec.total_params()) << ")\n"
            << "auxiliary head params " << aux.total_params() << " (training only)\n"
            << "total params " << enc.total_params() + dec.total_params() << " ("
            << cli_detail::millions(enc.total_params() + dec.total_params()) << ")\n";
      }
    } else if (*flops) {
      const auto cfg = variant(variant_name);
      const auto r = estimate_flops(cfg, flops_size[0], flops_size[1]);
      if (with_rows) r.print(out, true);
      out << "input " << flops_size[0] << "x" << flops_size[1] << '\n'
          << "MACs " << r.total_macs() << '\n'
          << "GFLOPs " << cli_detail::fixed(r.gflops(), 3) << " (1 FLOP = 1 MAC)\n"
          << "note: softmax, normalization, GELU and resampling are not counted\n";
    } else if (*fwd) {
      if (config_path.empty() && checkpoint_path.empty())
        throw UsageError("forward needs --config or --checkpoint");
      auto model = checkpoint_path.empty() ? FTNModel<float>::create(load_model_config(config_path))
                                           : load_checkpoint<float>(checkpoint_path);
      auto input = load_tensor(input_path);
      if (input.rank() == 3) input = reshape(input, {1, input.dim(0), input.dim(1), input.dim(2)});
      NoGradGuard no_grad;
      const auto logits = forward(model, input);
      save_tensor(output_path, logits);
      out << "logits " << shape_str(logits.shape()) << " -> " << output_path << '\n';
    } else if (*segment) {
      auto model = load_checkpoint<float>(checkpoint_path);
      const auto img = load_ppm(image_path);
      NoGradGuard no_grad;
      const auto labels = argmax_labels(forward(model, img));
      save_label_pgm(output_path, labels, img.dim(1), img.dim(2));
      out << "labels " << img.dim(1) << "x" << img.dim(2) << " -> " << output_path << '\n';
    } else if (*gradcheck) {
      const auto r = model_gradcheck(micro_config(), seed, coordinates);
      out << "parameters " << r.parameters << '\n'
          << "coordinates " << r.coordinates << '\n'
          << std::setprecision(6) << "max relative error " << r.max_relative_error << '\n'
          << "worst " << r.worst_parameter << "[" << r.worst_index << "] analytic " << r.worst_analytic
          << " numeric " << r.worst_numeric << '\n';
      if (r.max_relative_error >= 1e-3) throw NumericError("gradient check failed: max relative error above 1e-3");
    } else if (*train) {
      auto model = FTNModel<float>::create(micro_config());
      const auto trace = train_toy(model, train_opt);
      std::ofstream csv(trace_path);
      if (!csv) throw UsageError("cannot open " + trace_path + " for writing");
      trace.write_csv(csv);
      if (trace.rows.empty()) {
        out << "no steps taken\n";
      } else {
        cli_detail::train_summary(out, trace);
      }
      if (eval_count > 0)
        out << "toy mIoU " << std::setprecision(4)
            << evaluate_toy(model, eval_count, train_opt.image_size, train_opt.seed + 1) << '\n';
      if (!save_path.empty()) {
        save_checkpoint(save_path, model);
        out << "checkpoint -> " << save_path << '\n';
      }
    } else if (*derive) {
      const auto found = derive_variants();
      out << "variant  C1   depths     params     GFLOPs  params miss  GFLOPs miss\n";
      for (const auto& v : found) {
        std::ostringstream depths;
        depths << v.config.depths[0] << "-" << v.config.depths[1] << "-" << v.config.depths[2] << "-"
               << v.config.depths[3];
        out << std::left << std::setw(9) << v.name << std::setw(5) << v.config.dims[0] << std::setw(11) << depths.str()
            << std::setw(11) << cli_detail::millions(v.params) << std::setw(8) << cli_detail::fixed(v.gflops, 2)
            << std::setw(13) << cli_detail::fixed(100 * v.param_miss, 1) + "%" << cli_detail::fixed(100 * v.flop_miss, 1)
            << "%\n";
      }
    }
  } catch (const UsageError& e) {
    err << "error[usage]: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error[" << e.kind() << "]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace ftn

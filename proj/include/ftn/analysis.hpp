#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ftn/model.hpp"

namespace ftn {

// Analytic parameter and multiply-accumulate (MAC) accounting. Reported
// GFLOPs follow the 1 FLOP = 1 MAC convention; softmax, normalization, GELU,
// residual additions and resampling are not counted.
struct CostReport {
  struct Row {
    std::string name;
    std::uint64_t params = 0;
    std::uint64_t macs = 0;
  };

  std::vector<Row> rows;
  std::size_t input_h = 0, input_w = 0;

  void add(std::string name, std::uint64_t params, std::uint64_t macs) {
    rows.push_back({std::move(name), params, macs});
  }
  std::uint64_t total_params() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.params;
    return t;
  }
  std::uint64_t total_macs() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.macs;
    return t;
  }
  double gflops() const { return static_cast<double>(total_macs()) / 1e9; }

  void print(std::ostream& os, bool with_macs) const {
    os << std::left << std::setw(28) << "layer" << std::right << std::setw(14) << "params";
    if (with_macs) os << std::setw(18) << "MACs";
    os << '\n';
    for (const auto& r : rows) {
      os << std::left << std::setw(28) << r.name << std::right << std::setw(14) << r.params;
      if (with_macs) os << std::setw(18) << r.macs;
      os << '\n';
    }
    os << std::left << std::setw(28) << "total" << std::right << std::setw(14) << total_params();
    if (with_macs) os << std::setw(18) << total_macs();
    os << '\n';
  }
};

namespace cost {

using u64 = std::uint64_t;

inline u64 linear_params(u64 in, u64 out, bool bias = true) { return in * out + (bias ? out : 0); }
inline u64 norm_params(u64 c) { return 2 * c; }

inline u64 attention_params(u64 c) { return 4 * linear_params(c, c); }

inline u64 mlp_params(u64 c, u64 ratio) { return linear_params(c, ratio * c) + linear_params(ratio * c, c); }

inline u64 pgt_block_params(u64 c, u64 ratio) { return 2 * norm_params(c) + attention_params(c) + mlp_params(c, ratio); }

inline u64 cpe_params(u64 c) { return 9 * c + c; }

// Grouped attention over n tokens split into g groups: projections, the
// score matrix and the weighted sum of values.
struct AttentionMacs {
  u64 projections, scores, context;
};

inline AttentionMacs pg_msa_macs(u64 n, u64 c, u64 g) {
  return {4 * n * c * c, n * n * c / g, n * n * c / g};
}

inline u64 sr_block_params(u64 d, u64 ratio, u64 mlp_ratio) {
  u64 p = 2 * norm_params(d) + attention_params(d) + mlp_params(d, mlp_ratio);
  if (ratio > 1) p += linear_params(ratio * ratio * d, d) + norm_params(d);
  return p;
}

inline u64 sr_block_macs(u64 h, u64 w, u64 d, u64 ratio, u64 mlp_ratio) {
  const u64 n = h * w;
  const u64 m = ratio > 1 ? reduced_extent(h, ratio) * reduced_extent(w, ratio) : n;
  u64 macs = n * d * d + 2 * m * d * d + n * d * d;  // q, k/v, output projection
  if (ratio > 1) macs += m * ratio * ratio * d * d;
  macs += 2 * n * m * d;                 // scores + context
  macs += 2 * n * d * mlp_ratio * d;     // MLP
  return macs;
}

}  // namespace cost

// Encoder rows for an H x W input (MACs left at zero when h == w == 0).
inline CostReport encoder_cost(const PGTConfig& cfg, std::size_t h = 0, std::size_t w = 0) {
  cfg.validate();
  using cost::u64;
  const bool macs = h > 0 && w > 0;
  if (macs) cfg.check_geometry(h, w);
  CostReport r;
  r.input_h = h;
  r.input_w = w;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string stage = "stage" + std::to_string(i + 1);
    const u64 c = cfg.dims[i], e = cfg.mlp_ratios[i], g = cfg.groups[i];
    const u64 n = macs ? static_cast<u64>(h / cfg.stride(i)) * (w / cfg.stride(i)) : 0;
    if (i == 0) {
      const u64 in = static_cast<u64>(cfg.patch[0]) * cfg.patch[0] * cfg.in_channels;
      r.add(stage + ".patch_embed", cost::linear_params(in, c) + cost::norm_params(c), n * in * c);
    } else {
      const u64 prev = cfg.dims[i - 1];
      r.add(stage + ".patch_merge", cost::norm_params(4 * prev) + cost::linear_params(4 * prev, c), n * 4 * prev * c);
    }
    const auto attn = cost::pg_msa_macs(n, c, g);
    const u64 blocks = cfg.depths[i];
    r.add(stage + ".attn.proj", blocks * cost::attention_params(c), blocks * attn.projections);
    r.add(stage + ".attn.scores", 0, blocks * attn.scores);
    r.add(stage + ".attn.context", 0, blocks * attn.context);
    r.add(stage + ".mlp", blocks * cost::mlp_params(c, e), blocks * 2 * n * c * e * c);
    r.add(stage + ".norms", blocks * 2 * cost::norm_params(c), 0);
    r.add(stage + ".cpe", cost::cpe_params(c), 9 * n * c);
  }
  if (cfg.num_classes > 0)
    r.add("head", cost::linear_params(cfg.dims[3], cfg.num_classes), macs ? u64{cfg.dims[3]} * cfg.num_classes : 0);
  return r;
}

inline CostReport count_params(const PGTConfig& cfg) { return encoder_cost(cfg); }

inline CostReport estimate_flops(const PGTConfig& cfg, std::size_t h = 224, std::size_t w = 224) {
  if (h == 0 || w == 0) throw ParameterError("estimate_flops needs a positive input size");
  return encoder_cost(cfg, h, w);
}

// Decoder rows (inference path; auxiliary heads reported separately by
// aux_head_cost).
inline CostReport decoder_cost(const FPTConfig& cfg, const PGTConfig& enc, std::size_t h = 0, std::size_t w = 0) {
  cfg.validate();
  enc.validate();
  using cost::u64;
  const bool macs = h > 0 && w > 0;
  if (macs) enc.check_geometry(h, w);
  CostReport r;
  r.input_h = h;
  r.input_w = w;
  const u64 d = cfg.embed_dim;
  auto extent = [&](std::size_t stride) -> std::pair<u64, u64> {
    return macs ? std::pair<u64, u64>{h / stride, w / stride} : std::pair<u64, u64>{0, 0};
  };
  for (std::size_t i = 0; i < 4; ++i) {
    auto [eh, ew] = extent(enc.stride(i));
    r.add("lateral" + std::to_string(i + 1), cost::linear_params(enc.dims[i], d) + cost::norm_params(d),
          eh * ew * enc.dims[i] * d);
  }
  for (std::size_t stage = 1; stage <= 4; ++stage) {
    u64 params = 0, m = 0;
    for (std::size_t stride = std::size_t{2} << stage; stride >= 8; stride /= 2) {
      const std::size_t slot = FPTConfig::stride_slot(stride);
      auto [eh, ew] = extent(stride);
      params += cfg.depths[slot] * cost::sr_block_params(d, cfg.sr_ratios[slot], cfg.mlp_ratio);
      if (macs) m += cfg.depths[slot] * cost::sr_block_macs(eh, ew, d, cfg.sr_ratios[slot], cfg.mlp_ratio);
    }
    r.add("branch" + std::to_string(stage), params, m);
  }
  auto [h4, w4] = extent(4);
  if (cfg.fusion == Fusion::Concat) r.add("fuse", cost::linear_params(4 * d, d), h4 * w4 * 4 * d * d);
  r.add("seg_head", cost::linear_params(d, cfg.num_classes), h4 * w4 * d * cfg.num_classes);
  return r;
}

inline CostReport aux_head_cost(const FPTConfig& cfg, std::size_t h = 0, std::size_t w = 0) {
  CostReport r;
  const cost::u64 n = (h / 4) * (w / 4);
  for (std::size_t i = 0; i < 4; ++i)
    r.add("aux" + std::to_string(i + 1), cost::linear_params(cfg.embed_dim, cfg.num_classes),
          n * cfg.embed_dim * cfg.num_classes);
  return r;
}

inline CostReport count_params(const FPTConfig& cfg, const PGTConfig& enc) { return decoder_cost(cfg, enc); }

// ---------------------------------------------------------------------------
// Variant derivation

struct VariantBudget {
  std::string name;
  double params;  // absolute count
  double gflops;  // at 224 x 224
};

inline const std::array<VariantBudget, 4>& published_budgets() {
  static const std::array<VariantBudget, 4> b{{{"T", 13e6, 2.1}, {"S", 28e6, 4.6}, {"B", 50e6, 9.1}, {"L", 88e6, 15.9}}};
  return b;
}

inline constexpr double kParamTolerance = 0.05;
inline constexpr double kFlopTolerance = 0.15;

struct DerivedVariant {
  std::string name;
  PGTConfig config;
  std::uint64_t params = 0;
  double gflops = 0;
  double param_miss = 0;  // relative
  double flop_miss = 0;   // relative
};

struct DerivationSpace {
  std::vector<std::size_t> widths{64, 96, 128};
  std::size_t min_deep = 2, max_deep = 18;    // N_3
  std::size_t min_shallow = 1, max_shallow = 3;  // N_1, N_2, N_4
};

namespace detail {

struct Candidate {
  PGTConfig config;
  std::uint64_t params;
  double gflops;
  double param_miss, flop_miss;
  double cost() const { return param_miss + flop_miss; }
};

inline bool dominates_depths(const PGTConfig::PerStage& a, const PGTConfig::PerStage& b) {
  for (std::size_t i = 0; i < 4; ++i)
    if (a[i] < b[i]) return false;
  return true;
}

inline std::size_t total_depth(const PGTConfig::PerStage& d) { return d[0] + d[1] + d[2] + d[3]; }

}  // namespace detail

// Searches widths and depths under the published rules (head width 32, MLP
// ratio 4, groups 64-16-1-1, channel doubling) for the four variants jointly.
// Each variant must land within 5% of its parameter budget and 15% of its
// GFLOPs; among feasible assignments the one minimising the summed relative
// misses wins, subject to the sizing relations between variants: S widens T
// at equal depth, B deepens S at equal width, and L is at least as wide and
// as deep as B.
inline std::array<DerivedVariant, 4> derive_variants(const std::array<VariantBudget, 4>& budgets = published_budgets(),
                                                     const DerivationSpace& space = {}) {
  std::array<std::vector<detail::Candidate>, 4> feasible;
  std::array<detail::Candidate, 4> nearest{};
  std::array<double, 4> nearest_cost;
  nearest_cost.fill(std::numeric_limits<double>::infinity());
  for (std::size_t c1 : space.widths)
    for (std::size_t n3 = space.min_deep; n3 <= space.max_deep; ++n3)
      for (std::size_t n1 = space.min_shallow; n1 <= space.max_shallow; ++n1)
        for (std::size_t n2 = space.min_shallow; n2 <= space.max_shallow; ++n2)
          for (std::size_t n4 = space.min_shallow; n4 <= space.max_shallow; ++n4) {
            auto cfg = PGTConfig::from_width(c1, {n1, n2, n3, n4});
            const auto params = count_params(cfg).total_params();
            const double gf = estimate_flops(cfg).gflops();
            for (std::size_t v = 0; v < 4; ++v) {
              detail::Candidate cand{cfg, params, gf,
                                     std::abs(static_cast<double>(params) - budgets[v].params) / budgets[v].params,
                                     std::abs(gf - budgets[v].gflops) / budgets[v].gflops};
              if (cand.param_miss < nearest_cost[v]) {
                nearest_cost[v] = cand.param_miss;
                nearest[v] = cand;
              }
              if (cand.param_miss <= kParamTolerance && cand.flop_miss <= kFlopTolerance) feasible[v].push_back(cand);
            }
          }

  auto describe = [](const detail::Candidate& c) {
    std::ostringstream os;
    os << "C1=" << c.config.dims[0] << " N=" << c.config.depths[0] << ',' << c.config.depths[1] << ','
       << c.config.depths[2] << ',' << c.config.depths[3] << " params=" << c.params << " GFLOPs=" << c.gflops;
    return os.str();
  };
  for (std::size_t v = 0; v < 4; ++v)
    if (feasible[v].empty())
      throw DerivationError("no config within tolerance of budget " + budgets[v].name + "; nearest: " +
                            describe(nearest[v]));

  double best = std::numeric_limits<double>::infinity();
  std::array<const detail::Candidate*, 4> pick{};
  for (const auto& t : feasible[0])
    for (const auto& s : feasible[1]) {
      if (s.config.depths != t.config.depths || s.config.dims[0] <= t.config.dims[0]) continue;
      const double ts = t.cost() + s.cost();
      if (ts >= best) continue;
      for (const auto& b : feasible[2]) {
        if (b.config.dims[0] != s.config.dims[0] || !detail::dominates_depths(b.config.depths, s.config.depths) ||
            detail::total_depth(b.config.depths) <= detail::total_depth(s.config.depths))
          continue;
        const double tsb = ts + b.cost();
        if (tsb >= best) continue;
        for (const auto& l : feasible[3]) {
          if (l.config.dims[0] < b.config.dims[0] || !detail::dominates_depths(l.config.depths, b.config.depths))
            continue;
          const double total = tsb + l.cost();
          if (total < best) {
            best = total;
            pick = {&t, &s, &b, &l};
          }
        }
      }
    }
  if (!pick[0]) {
    std::string msg = "no joint assignment satisfies the variant sizing relations; nearest per budget:";
    for (std::size_t v = 0; v < 4; ++v) msg += " [" + budgets[v].name + ": " + describe(nearest[v]) + "]";
    throw DerivationError(msg);
  }
  std::array<DerivedVariant, 4> out;
  for (std::size_t v = 0; v < 4; ++v)
    out[v] = {budgets[v].name, pick[v]->config, pick[v]->params, pick[v]->gflops, pick[v]->param_miss,
              pick[v]->flop_miss};
  return out;
}

// Stage token counts and dims for an input size, without running a model.
struct StageShape {
  std::size_t height, width, tokens, dim;
};

inline std::array<StageShape, 4> stage_shapes(const PGTConfig& cfg, std::size_t h, std::size_t w) {
  cfg.check_geometry(h, w);
  std::array<StageShape, 4> out;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t s = cfg.stride(i);
    out[i] = {h / s, w / s, (h / s) * (w / s), cfg.dims[i]};
  }
  return out;
}

}  // namespace ftn

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cmt/rng.hpp"
#include "cmt/tensor.hpp"

namespace cmt::ffa {

struct BetaParams {
  double a = 0.4;
  double b = 0.4;

  // Throws ParameterError unless a > 0 and b > 0.
  void validate() const;
};

// Beta(a, b) via the ratio X / (X + Y) of Gamma(a) and Gamma(b) variates.
double sample_beta(const BetaParams& params, Rng& rng);

// Source of mixing weights; tests substitute a constant.
using Sampler = std::function<double()>;
Sampler beta_sampler(const BetaParams& params, Rng& rng);

// strict: m*h/p < i < (m+1)*h/p as printed. halfopen: m*h/p <= i < (m+1)*h/p.
enum class Region { strict, halfopen };
std::string to_string(Region region);
Region parse_region(const std::string& name);

struct FfaConfig {
  std::size_t patch = 2;            // p
  double alpha = 0.4;               // Beta(alpha, alpha)
  std::optional<std::size_t> row;   // m; drawn from [0,p) when empty
  std::optional<std::size_t> col;   // n; drawn from [0,p) when empty
  Region region = Region::strict;

  // p >= 1, alpha in (0,1), m and n in [0,p) when set.
  void validate() const;
  // validate() plus p | h and p | w.
  void validate_for(std::size_t h, std::size_t w) const;
};

struct WeightMask {
  Tensor m;    // [h,w]
  Tensor m_d;  // [h,w], 1 - m
  std::size_t row = 0, col = 0;  // selected cell (m, n)
  double fixed = 0.0;            // z'
};

bool in_region(std::size_t i, std::size_t j, std::size_t h, std::size_t w, std::size_t p, std::size_t row,
               std::size_t col, Region region);

// One draw for z', then one per region position in row-major order.
WeightMask build_masks(std::size_t h, std::size_t w, std::size_t p, std::size_t row, std::size_t col, Region region,
                       const Sampler& draw);
// Resolves (m, n) from cfg or uniformly from rng, then samples Beta(alpha, alpha) from rng.
WeightMask build_masks(std::size_t h, std::size_t w, const FfaConfig& cfg, Rng& rng);

// i1 * m + i2 * m_d, the spatial mask shared across channels of [c,h,w] inputs.
Tensor fuse(const Tensor& i1, const Tensor& i2, const WeightMask& mask);

struct ManifestEntry {
  std::string output, source_a, source_b;
  std::uint64_t seed = 0;
  std::size_t p = 0;
  double alpha = 0.0;
  std::size_t m = 0, n = 0;
};

std::string to_json_line(const ManifestEntry& entry);

// Writes `count` fused images (ffa_00000.png, ...) into out_dir and
// out_dir/manifest.jsonl. Output k uses seed base_seed + k, a uniformly drawn
// pair of distinct source images and its own masks.
std::vector<ManifestEntry> augment_dataset(const std::filesystem::path& class_dir,
                                           const std::filesystem::path& out_dir, std::size_t count,
                                           const FfaConfig& cfg, std::uint64_t base_seed);

}  // namespace cmt::ffa

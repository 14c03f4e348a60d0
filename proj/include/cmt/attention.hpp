#pragma once

#include <cstdint>
#include <string>

#include "cmt/autodiff.hpp"
#include "cmt/rng.hpp"
#include "cmt/tensor.hpp"

namespace cmt::attn {

// Shape and pooling parameters shared by MHSA and MMSA.
struct AttentionConfig {
  std::size_t channels = 64;
  std::size_t heads = 1;
  std::size_t grid = 2;        // level-1 window side g
  std::size_t downsample = 2;  // level-2 pooling factor g'
  double pool_alpha = 0.3;     // weight of the max-pooled map
  double pool_beta = 0.7;      // weight of the average-pooled map
  bool pool_half = true;       // keep the leading 1/2 of the pooled mix

  // heads | channels, alpha, beta > 0 and alpha + beta == 1, grid and downsample >= 1.
  void validate() const;
  // validate() plus divisibility of h and w by grid and downsample.
  void validate_for(std::size_t h, std::size_t w) const;

  std::size_t head_width() const { return channels / heads; }
};

struct MhsaWeights {
  Tensor wq, wk, wv, wp;
};

struct MmsaWeights {
  Tensor wq1, wk1, wv1;
  Tensor wq2, wk2, wv2;
  Tensor wm, wn;
};

struct MhsaVars {
  Var wq, wk, wv, wp;
};

struct MmsaVars {
  Var wq1, wk1, wv1;
  Var wq2, wk2, wv2;
  Var wm, wn;
};

// Uniform in +-sqrt(1/c).
MhsaWeights init_mhsa_weights(std::size_t channels, Rng& rng);
MmsaWeights init_mmsa_weights(std::size_t channels, Rng& rng);

MhsaVars bind(Tape& tape, const MhsaWeights& w, bool trainable);
MmsaVars bind(Tape& tape, const MmsaWeights& w, bool trainable);

// Multi-head scaled dot-product self-attention over tokens [B, n, c] with
// c x c projections; heads split the channel axis. Returns [B, n, c].
Var multi_head_attention(Var tokens, Var wq, Var wk, Var wv, std::size_t heads);

// [c,h,w] <-> [h*w, c] token matrix (spatial positions are tokens).
Var to_tokens(Var x);
Var from_tokens(Var tokens, std::size_t h, std::size_t w);

// [c,h,w] -> [(h/g)*(w/g), g*g, c] window tokens, and back.
Var partition_windows(Var x, std::size_t g);
Var merge_windows(Var windows, std::size_t c, std::size_t h, std::size_t w, std::size_t g);

// ---- MHSA ------------------------------------------------------------------------
// Concatenated head outputs A, before projection and residual, as [c,h,w].
Var mhsa_attention(Var x, const MhsaVars& w, const AttentionConfig& cfg);
// A * Wp + x.
Var mhsa_forward(Var x, const MhsaVars& w, const AttentionConfig& cfg);

// ---- MMSA ------------------------------------------------------------------------
// Window attention inside g x g cells, without the residual.
Var mmsa_window_attention(Var x, const MmsaVars& w, const AttentionConfig& cfg);
// Window attention plus residual: Att1 = attention + x.
Var mmsa_level1(Var x, const MmsaVars& w, const AttentionConfig& cfg);
// scale * (alpha * maxpool + beta * avgpool), scale = 1/2 when pool_half.
Var mmsa_pool(Var att1, const AttentionConfig& cfg);
// Global attention over the pooled map, nearest-upsampled back to [c,h,w].
Var mmsa_level2(Var att1, const MmsaVars& w, const AttentionConfig& cfg);
// (Att1 + Att2) * Wm * Wn + x.
Var mmsa_forward(Var x, const MmsaVars& w, const AttentionConfig& cfg);

// Tape-free convenience wrappers.
Tensor mhsa_forward(const Tensor& x, const MhsaWeights& w, const AttentionConfig& cfg);
Tensor mmsa_level1(const Tensor& x, const MmsaWeights& w, const AttentionConfig& cfg);
Tensor mmsa_level2(const Tensor& att1, const MmsaWeights& w, const AttentionConfig& cfg);
Tensor mmsa_forward(const Tensor& x, const MmsaWeights& w, const AttentionConfig& cfg);

// ---- cost model ----------------------------------------------------------------------
// 2*c*h^2*w^2 + 3*h*w*c^2
std::uint64_t mhsa_analytic_cost(std::uint64_t c, std::uint64_t h, std::uint64_t w);
// c*h*w*(2*g'^2 + 4c) + (2*c*h*w / g'^2)*(c + h*w), as printed (g unused).
// Throws ConfigError when the second term is not an integer.
std::uint64_t mmsa_analytic_cost(std::uint64_t c, std::uint64_t h, std::uint64_t w, std::uint64_t g,
                                 std::uint64_t g_prime);
// Same with the level-1 window term written with g instead of g'.
std::uint64_t mmsa_analytic_cost_window_form(std::uint64_t c, std::uint64_t h, std::uint64_t w, std::uint64_t g,
                                             std::uint64_t g_prime);

enum class AttentionKind { mhsa, mmsa };
std::string to_string(AttentionKind kind);

struct CostReport {
  AttentionKind kind = AttentionKind::mmsa;
  std::size_t c = 0, h = 0, w = 0;
  AttentionConfig config;
  std::uint64_t analytic_macs = 0;
  std::uint64_t measured_macs = 0;
  std::uint64_t wall_clock_ns = 0;  // median over trials
  std::size_t trials = 0;
  bool with_backward = false;
};

// Runs `trials` forward passes (optionally with backward) on seeded random
// input and weights; MACs come from the tape counter, time from a monotonic clock.
CostReport measure_cost(AttentionKind kind, std::size_t c, std::size_t h, std::size_t w, const AttentionConfig& cfg,
                        std::size_t trials, bool with_backward = false, std::uint64_t seed = 0);

// One JSON line: {kind, c, h, w, g, g_prime, heads, analytic_macs, measured_macs, wall_ns_median, trials}.
std::string to_json_line(const CostReport& report);

}  // namespace cmt::attn

#include "cmt/attention.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <json.hpp>

#include "cmt/errors.hpp"

namespace cmt::attn {
namespace {

Tensor uniform_square(std::size_t c, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(c));
  Tensor t(Shape{c, c}, 0.0);
  for (double& v : t.data()) v = uniform(rng, -bound, bound);
  return t;
}

Var bind_one(Tape& tape, const Tensor& t, bool trainable) {
  return trainable ? tape.variable(t) : tape.constant(t);
}

void require_square(const Var& w, std::size_t c, const char* name) {
  if (w.shape() != Shape{c, c}) {
    throw DimensionError(std::string(name) + " must be " + shape_string(Shape{c, c}) + ", got " +
                         shape_string(w.shape()));
  }
}

void require_map(const Var& x, const AttentionConfig& cfg) {
  if (x.shape().size() != 3 || x.shape()[0] != cfg.channels) {
    throw DimensionError("attention input must be [" + std::to_string(cfg.channels) + ",h,w], got " +
                         shape_string(x.shape()));
  }
}

// [B*H, n, d] <-> [B, n, c]
Var split_heads(Var flat, std::size_t batch, std::size_t n, std::size_t heads, std::size_t d) {
  if (heads == 1) return reshape(flat, Shape{batch, n, d});
  Var t = reshape(flat, Shape{batch, n, heads, d});
  t = permute(t, {0, 2, 1, 3});
  return reshape(t, Shape{batch * heads, n, d});
}

Var merge_heads(Var per_head, std::size_t batch, std::size_t n, std::size_t heads, std::size_t d) {
  if (heads == 1) return reshape(per_head, Shape{batch, n, d});
  Var t = reshape(per_head, Shape{batch, heads, n, d});
  t = permute(t, {0, 2, 1, 3});
  return reshape(t, Shape{batch, n, heads * d});
}

}  // namespace

void AttentionConfig::validate() const {
  if (channels == 0) throw ConfigError("attention: channels must be positive");
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("attention: heads (" + std::to_string(heads) + ") must divide channels (" +
                      std::to_string(channels) + ")");
  }
  if (grid == 0 || downsample == 0) throw ConfigError("attention: grid sizes must be positive");
  if (!(pool_alpha > 0.0) || !(pool_beta > 0.0) || std::abs(pool_alpha + pool_beta - 1.0) > 1e-12) {
    throw ConfigError("attention: pool alpha and beta must be positive and sum to 1");
  }
}

void AttentionConfig::validate_for(std::size_t h, std::size_t w) const {
  validate();
  if (h % grid != 0 || w % grid != 0) {
    throw ConfigError("attention: grid g=" + std::to_string(grid) + " does not divide " + std::to_string(h) + "x" +
                      std::to_string(w));
  }
  if (h % downsample != 0 || w % downsample != 0) {
    throw ConfigError("attention: downsample g'=" + std::to_string(downsample) + " does not divide " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
}

MhsaWeights init_mhsa_weights(std::size_t channels, Rng& rng) {
  MhsaWeights w;
  w.wq = uniform_square(channels, rng);
  w.wk = uniform_square(channels, rng);
  w.wv = uniform_square(channels, rng);
  w.wp = uniform_square(channels, rng);
  return w;
}

MmsaWeights init_mmsa_weights(std::size_t channels, Rng& rng) {
  MmsaWeights w;
  w.wq1 = uniform_square(channels, rng);
  w.wk1 = uniform_square(channels, rng);
  w.wv1 = uniform_square(channels, rng);
  w.wq2 = uniform_square(channels, rng);
  w.wk2 = uniform_square(channels, rng);
  w.wv2 = uniform_square(channels, rng);
  w.wm = uniform_square(channels, rng);
  w.wn = uniform_square(channels, rng);
  return w;
}

MhsaVars bind(Tape& tape, const MhsaWeights& w, bool trainable) {
  return {bind_one(tape, w.wq, trainable), bind_one(tape, w.wk, trainable), bind_one(tape, w.wv, trainable),
          bind_one(tape, w.wp, trainable)};
}

MmsaVars bind(Tape& tape, const MmsaWeights& w, bool trainable) {
  return {bind_one(tape, w.wq1, trainable), bind_one(tape, w.wk1, trainable), bind_one(tape, w.wv1, trainable),
          bind_one(tape, w.wq2, trainable), bind_one(tape, w.wk2, trainable), bind_one(tape, w.wv2, trainable),
          bind_one(tape, w.wm, trainable),  bind_one(tape, w.wn, trainable)};
}

Var multi_head_attention(Var tokens, Var wq, Var wk, Var wv, std::size_t heads) {
  const Shape& ts = tokens.shape();
  if (ts.size() != 3) throw DimensionError("attention tokens must be [B,n,c], got " + shape_string(ts));
  const std::size_t batch = ts[0], n = ts[1], c = ts[2];
  if (heads == 0 || c % heads != 0) throw ConfigError("attention: heads must divide channels");
  require_square(wq, c, "W^q");
  require_square(wk, c, "W^k");
  require_square(wv, c, "W^v");
  const std::size_t d = c / heads;

  Var flat = reshape(tokens, Shape{batch * n, c});
  Var q = split_heads(matmul(flat, wq), batch, n, heads, d);
  Var k = split_heads(matmul(flat, wk), batch, n, heads, d);
  Var v = split_heads(matmul(flat, wv), batch, n, heads, d);

  Var scores = scale(matmul(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(d)));
  Var att = softmax(scores, 2);
  Var out = matmul(att, v);
  return merge_heads(out, batch, n, heads, d);
}

Var to_tokens(Var x) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("to_tokens: expected [c,h,w], got " + shape_string(s));
  return permute(reshape(x, Shape{s[0], s[1] * s[2]}), {1, 0});
}

Var from_tokens(Var tokens, std::size_t h, std::size_t w) {
  const Shape& s = tokens.shape();
  if (s.size() != 2 || s[0] != h * w) {
    throw DimensionError("from_tokens: expected [" + std::to_string(h * w) + ",c], got " + shape_string(s));
  }
  return reshape(permute(tokens, {1, 0}), Shape{s[1], h, w});
}

Var partition_windows(Var x, std::size_t g) {
  const Shape& s = x.shape();
  if (s.size() != 3 || g == 0 || s[1] % g != 0 || s[2] % g != 0) {
    throw ConfigError("partition_windows: g=" + std::to_string(g) + " does not tile " + shape_string(s));
  }
  const std::size_t c = s[0], hb = s[1] / g, wb = s[2] / g;
  Var t = reshape(x, Shape{c, hb, g, wb, g});
  t = permute(t, {1, 3, 2, 4, 0});  // [hb, wb, g, g, c]
  return reshape(t, Shape{hb * wb, g * g, c});
}

Var merge_windows(Var windows, std::size_t c, std::size_t h, std::size_t w, std::size_t g) {
  const std::size_t hb = h / g, wb = w / g;
  Var t = reshape(windows, Shape{hb, wb, g, g, c});
  t = permute(t, {4, 0, 2, 1, 3});  // [c, hb, g, wb, g]
  return reshape(t, Shape{c, h, w});
}

Var mhsa_attention(Var x, const MhsaVars& w, const AttentionConfig& cfg) {
  cfg.validate();
  require_map(x, cfg);
  const std::size_t c = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  Var tokens = reshape(to_tokens(x), Shape{1, h * wd, c});
  Var a = multi_head_attention(tokens, w.wq, w.wk, w.wv, cfg.heads);
  return from_tokens(reshape(a, Shape{h * wd, c}), h, wd);
}

Var mhsa_forward(Var x, const MhsaVars& w, const AttentionConfig& cfg) {
  cfg.validate();
  require_map(x, cfg);
  require_square(w.wp, cfg.channels, "W^p");
  const std::size_t c = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  Var tokens = reshape(to_tokens(x), Shape{1, h * wd, c});
  Var a = reshape(multi_head_attention(tokens, w.wq, w.wk, w.wv, cfg.heads), Shape{h * wd, c});
  Var projected = matmul(a, w.wp);
  return add(from_tokens(projected, h, wd), x);
}

Var mmsa_window_attention(Var x, const MmsaVars& w, const AttentionConfig& cfg) {
  require_map(x, cfg);
  cfg.validate_for(x.shape()[1], x.shape()[2]);
  const std::size_t c = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  Var windows = partition_windows(x, cfg.grid);
  Var att = multi_head_attention(windows, w.wq1, w.wk1, w.wv1, cfg.heads);
  return merge_windows(att, c, h, wd, cfg.grid);
}

Var mmsa_level1(Var x, const MmsaVars& w, const AttentionConfig& cfg) {
  return add(mmsa_window_attention(x, w, cfg), x);
}

Var mmsa_pool(Var att1, const AttentionConfig& cfg) {
  require_map(att1, cfg);
  cfg.validate_for(att1.shape()[1], att1.shape()[2]);
  const std::size_t gp = cfg.downsample;
  Var mx = pool2d(att1, gp, gp, PoolMode::max);
  Var av = pool2d(att1, gp, gp, PoolMode::average);
  Var mixed = add(scale(mx, cfg.pool_alpha), scale(av, cfg.pool_beta));
  return cfg.pool_half ? scale(mixed, 0.5) : mixed;
}

Var mmsa_level2(Var att1, const MmsaVars& w, const AttentionConfig& cfg) {
  Var pooled = mmsa_pool(att1, cfg);
  const std::size_t c = pooled.shape()[0], hp = pooled.shape()[1], wp = pooled.shape()[2];
  Var tokens = reshape(to_tokens(pooled), Shape{1, hp * wp, c});
  Var att = multi_head_attention(tokens, w.wq2, w.wk2, w.wv2, cfg.heads);
  Var small = from_tokens(reshape(att, Shape{hp * wp, c}), hp, wp);
  return nearest_upsample(small, cfg.downsample);
}

Var mmsa_forward(Var x, const MmsaVars& w, const AttentionConfig& cfg) {
  require_map(x, cfg);
  require_square(w.wm, cfg.channels, "W^m");
  require_square(w.wn, cfg.channels, "W^n");
  const std::size_t h = x.shape()[1], wd = x.shape()[2];
  Var att1 = mmsa_level1(x, w, cfg);
  Var att2 = mmsa_level2(att1, w, cfg);
  Var fused = to_tokens(add(att1, att2));
  Var projected = matmul(matmul(fused, w.wm), w.wn);
  return add(from_tokens(projected, h, wd), x);
}

Tensor mhsa_forward(const Tensor& x, const MhsaWeights& w, const AttentionConfig& cfg) {
  Tape tape;
  return mhsa_forward(tape.constant(x), bind(tape, w, false), cfg).value();
}

Tensor mmsa_level1(const Tensor& x, const MmsaWeights& w, const AttentionConfig& cfg) {
  Tape tape;
  return mmsa_level1(tape.constant(x), bind(tape, w, false), cfg).value();
}

Tensor mmsa_level2(const Tensor& att1, const MmsaWeights& w, const AttentionConfig& cfg) {
  Tape tape;
  return mmsa_level2(tape.constant(att1), bind(tape, w, false), cfg).value();
}

Tensor mmsa_forward(const Tensor& x, const MmsaWeights& w, const AttentionConfig& cfg) {
  Tape tape;
  return mmsa_forward(tape.constant(x), bind(tape, w, false), cfg).value();
}

std::uint64_t mhsa_analytic_cost(std::uint64_t c, std::uint64_t h, std::uint64_t w) {
  return 2 * c * h * h * w * w + 3 * h * w * c * c;
}

namespace {

std::uint64_t mmsa_cost(std::uint64_t c, std::uint64_t h, std::uint64_t w, std::uint64_t window,
                        std::uint64_t g_prime) {
  if (g_prime == 0) throw ConfigError("mmsa cost: g' must be positive");
  const std::uint64_t first = c * h * w * (2 * window * window + 4 * c);
  const std::uint64_t numer = 2 * c * h * w * (c + h * w);
  const std::uint64_t denom = g_prime * g_prime;
  if (numer % denom != 0) {
    throw ConfigError("mmsa cost: 2chw(c+hw) is not divisible by g'^2 for c=" + std::to_string(c) +
                      " h=" + std::to_string(h) + " w=" + std::to_string(w) + " g'=" + std::to_string(g_prime));
  }
  return first + numer / denom;
}

}  // namespace

std::uint64_t mmsa_analytic_cost(std::uint64_t c, std::uint64_t h, std::uint64_t w, std::uint64_t /*g*/,
                                 std::uint64_t g_prime) {
  return mmsa_cost(c, h, w, g_prime, g_prime);
}

std::uint64_t mmsa_analytic_cost_window_form(std::uint64_t c, std::uint64_t h, std::uint64_t w, std::uint64_t g,
                                             std::uint64_t g_prime) {
  return mmsa_cost(c, h, w, g, g_prime);
}

std::string to_string(AttentionKind kind) { return kind == AttentionKind::mhsa ? "mhsa" : "mmsa"; }

CostReport measure_cost(AttentionKind kind, std::size_t c, std::size_t h, std::size_t w, const AttentionConfig& cfg,
                        std::size_t trials, bool with_backward, std::uint64_t seed) {
  if (trials == 0) throw ConfigError("measure_cost: trials must be >= 1");
  AttentionConfig run_cfg = cfg;
  run_cfg.channels = c;
  if (kind == AttentionKind::mmsa) {
    run_cfg.validate_for(h, w);
  } else {
    run_cfg.validate();
  }

  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(kind), c, h, w}));
  Tensor input(Shape{c, h, w}, 0.0);
  for (double& v : input.data()) v = uniform(rng, -1.0, 1.0);
  const MhsaWeights mhsa_w = kind == AttentionKind::mhsa ? init_mhsa_weights(c, rng) : MhsaWeights{};
  const MmsaWeights mmsa_w = kind == AttentionKind::mmsa ? init_mmsa_weights(c, rng) : MmsaWeights{};

  CostReport report;
  report.kind = kind;
  report.c = c;
  report.h = h;
  report.w = w;
  report.config = run_cfg;
  report.trials = trials;
  report.with_backward = with_backward;
  report.analytic_macs = kind == AttentionKind::mhsa ? mhsa_analytic_cost(c, h, w)
                                                     : mmsa_analytic_cost(c, h, w, run_cfg.grid, run_cfg.downsample);

  std::vector<std::uint64_t> times;
  times.reserve(trials);
  for (std::size_t t = 0; t < trials; ++t) {
    const auto start = std::chrono::steady_clock::now();
    Tape tape;
    MacScope scope(tape.macs());
    Var x = with_backward ? tape.variable(input) : tape.constant(input);
    Var out;
    if (kind == AttentionKind::mhsa) {
      out = mhsa_forward(x, bind(tape, mhsa_w, with_backward), run_cfg);
    } else {
      out = mmsa_forward(x, bind(tape, mmsa_w, with_backward), run_cfg);
    }
    if (with_backward) tape.backward(sum(out));
    const auto stop = std::chrono::steady_clock::now();
    times.push_back(static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count()));
    report.measured_macs = scope.total();
  }
  std::sort(times.begin(), times.end());
  const std::size_t mid = times.size() / 2;
  report.wall_clock_ns = times.size() % 2 == 1 ? times[mid] : (times[mid - 1] + times[mid]) / 2;
  return report;
}

std::string to_json_line(const CostReport& report) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(report.kind);
  j["c"] = report.c;
  j["h"] = report.h;
  j["w"] = report.w;
  j["g"] = report.config.grid;
  j["g_prime"] = report.config.downsample;
  j["heads"] = report.config.heads;
  j["analytic_macs"] = report.analytic_macs;
  j["measured_macs"] = report.measured_macs;
  j["wall_ns_median"] = report.wall_clock_ns;
  j["trials"] = report.trials;
  return j.dump();
}

}  // namespace cmt::attn

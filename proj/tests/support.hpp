#pragma once

// Test-only oracles: straightforward loop implementations that share no code
// with the library kernels, plus a central finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cmt/autodiff.hpp"
#include "cmt/rng.hpp"
#include "cmt/tensor.hpp"

namespace cmt::test {

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const std::filesystem::path dir = std::filesystem::temp_directory_path() / ("cmt_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

// ---- loop oracles ----------------------------------------------------------------

inline Tensor loop_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at({i, p}) * b.at({p, j});
      out.at({i, j}) = s;
    }
  return out;
}

inline Tensor loop_conv2d(const Tensor& x, const Tensor& kern, std::size_t stride, std::size_t pad) {
  const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t co = kern.dim(0), k = kern.dim(2);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  Tensor out(Shape{co, ho, wo}, 0.0);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b) {
              const long yi = static_cast<long>(i * stride + a) - static_cast<long>(pad);
              const long xj = static_cast<long>(j * stride + b) - static_cast<long>(pad);
              if (yi < 0 || xj < 0 || yi >= static_cast<long>(h) || xj >= static_cast<long>(w)) continue;
              s += x.at({c, static_cast<std::size_t>(yi), static_cast<std::size_t>(xj)}) * kern.at({o, c, a, b});
            }
        out.at({o, i, j}) = s;
      }
  return out;
}

inline Tensor loop_pool(const Tensor& x, std::size_t size, std::size_t stride, bool max_mode) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t ho = (h - size) / stride + 1, wo = (w - size) / stride + 1;
  Tensor out(Shape{c, ho, wo}, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        double acc = max_mode ? -1e300 : 0.0;
        for (std::size_t a = 0; a < size; ++a)
          for (std::size_t b = 0; b < size; ++b) {
            const double v = x.at({ch, i * stride + a, j * stride + b});
            acc = max_mode ? std::max(acc, v) : acc + v;
          }
        out.at({ch, i, j}) = max_mode ? acc : acc / static_cast<double>(size * size);
      }
  return out;
}

// Dense self-attention over an explicit token list. tokens[t][ch] is token t,
// channel ch. Heads split channels into contiguous groups of width c/heads.
// Returns the concatenated head outputs, same layout as tokens.
inline std::vector<std::vector<double>> loop_attention(const std::vector<std::vector<double>>& tokens,
                                                       const Tensor& wq, const Tensor& wk, const Tensor& wv,
                                                       std::size_t heads) {
  const std::size_t n = tokens.size(), c = tokens.front().size(), d = c / heads;
  auto project = [&](const Tensor& wt) {
    std::vector<std::vector<double>> out(n, std::vector<double>(c, 0.0));
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t i = 0; i < c; ++i) out[t][j] += tokens[t][i] * wt.at({i, j});
    return out;
  };
  const auto q = project(wq), k = project(wk), v = project(wv);
  std::vector<std::vector<double>> out(n, std::vector<double>(c, 0.0));
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<double> score(n);
      for (std::size_t u = 0; u < n; ++u) {
        double s = 0.0;
        for (std::size_t j = hd * d; j < (hd + 1) * d; ++j) s += q[t][j] * k[u][j];
        score[u] = s / std::sqrt(static_cast<double>(d));
      }
      const double mx = *std::max_element(score.begin(), score.end());
      double z = 0.0;
      for (double& s : score) {
        s = std::exp(s - mx);
        z += s;
      }
      for (std::size_t u = 0; u < n; ++u)
        for (std::size_t j = hd * d; j < (hd + 1) * d; ++j) out[t][j] += score[u] / z * v[u][j];
    }
  }
  return out;
}

// Right-multiplies every token by a c x c matrix.
inline std::vector<std::vector<double>> loop_project(const std::vector<std::vector<double>>& tokens,
                                                     const Tensor& wt) {
  const std::size_t c = tokens.front().size();
  std::vector<std::vector<double>> out(tokens.size(), std::vector<double>(c, 0.0));
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t i = 0; i < c; ++i) out[t][j] += tokens[t][i] * wt.at({i, j});
  return out;
}

// ---- finite differences ---------------------------------------------------------

using ScalarGraph = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::vector<double> per_input;
};

// ||a - n|| / max(||a||, ||n||, floor) over the checked coordinates.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                             double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

// Central differences (step h) against the tape gradient of a scalar graph.
// When max_coords is non-zero, only that many seeded random coordinates per
// input are perturbed.
inline GradCheck gradcheck(const ScalarGraph& graph, const std::vector<Tensor>& inputs, double step = 1e-5,
                           std::size_t max_coords = 0, std::uint64_t seed = 1) {
  auto evaluate = [&](const std::vector<Tensor>& values) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : values) vars.push_back(tape.constant(t));
    return graph(tape, vars).value().item();
  };

  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.variable(t));
  Var root = graph(tape, vars);
  tape.backward(root);

  GradCheck result;
  Rng rng(seed);
  std::vector<Tensor> work = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = tape.grad(vars[i]);
    std::vector<std::size_t> coords(inputs[i].size());
    for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
    if (max_coords != 0 && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    std::vector<double> a, n;
    for (std::size_t k : coords) {
      const double orig = work[i][k];
      work[i][k] = orig + step;
      const double fp = evaluate(work);
      work[i][k] = orig - step;
      const double fm = evaluate(work);
      work[i][k] = orig;
      a.push_back(analytic[k]);
      n.push_back((fp - fm) / (2.0 * step));
    }
    const double err = relative_error(a, n);
    result.per_input.push_back(err);
    result.max_rel_error = std::max(result.max_rel_error, err);
  }
  return result;
}

}  // namespace cmt::test

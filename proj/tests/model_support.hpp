#pragma once

// Finite-difference check of a full model forward w.r.t. the image and every parameter.

#include <chrono>
#include <string>
#include <vector>

#include "cmt/model.hpp"
#include "support.hpp"

namespace cmt::test {

struct ModelGradCheck {
  double max_rel_error = 0.0;
  std::string worst;  // input with the largest error
  double seconds = 0.0;
};

inline ModelGradCheck model_gradcheck(const model::CmtConfig& cfg, std::size_t hw, std::uint64_t seed,
                                      std::size_t max_coords) {
  const auto start = std::chrono::steady_clock::now();
  const model::ParamMap params = model::init_params(cfg, seed);
  Rng rng(seed + 1);
  std::vector<std::string> names{"image"};
  std::vector<Tensor> inputs{random_tensor(Shape{cfg.cife.in_channels, hw, hw}, rng, 0.0, 1.0)};
  for (const auto& [name, value] : params) {
    names.push_back(name);
    // Perturb the deterministic initial values so no parameter sits at a special point.
    Tensor v = value;
    for (double& x : v.data()) x += uniform(rng, -0.1, 0.1);
    inputs.push_back(v);
  }
  const Tensor probe = random_tensor(Shape{cfg.classes}, rng);
  auto graph = [&](Tape& tape, std::span<const Var> in) {
    model::BoundParams p;
    for (std::size_t i = 1; i < in.size(); ++i) p.emplace(names[i], in[i]);
    const auto f = model::cmt_forward(in[0], p, cfg, model::Mode::eval, nullptr);
    return sum(mul(f.probs, tape.constant(probe)));
  };
  const GradCheck res = gradcheck(graph, inputs, 1e-6, max_coords, seed);
  ModelGradCheck out;
  out.max_rel_error = res.max_rel_error;
  for (std::size_t i = 0; i < res.per_input.size(); ++i)
    if (res.per_input[i] == res.max_rel_error) out.worst = names[i];
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace cmt::test

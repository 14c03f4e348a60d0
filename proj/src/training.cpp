#include "cmt/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>

#include "cmt/errors.hpp"
#include "cmt/metrics.hpp"

namespace cmt::train {

namespace {

enum Stream : std::uint64_t { kOrder = 0, kFuse = 1, kDropout = 2 };

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_min >= 0.0 && lr_min <= lr_max)) throw ConfigError("train: need 0 <= lr_min <= lr_max");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("train: warmup_fraction must be in [0,1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must be in [0,1)");
  if (!(epsilon > 0.0)) throw ConfigError("train: epsilon must be positive");
  if (batch == 0) throw ConfigError("train: batch must be positive");
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
  if (!(ffa_ratio >= 0.0)) throw ConfigError("train: ffa_ratio must be non-negative");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("train: threshold must be in [0,1]");
  if (warmup_steps && total_steps && *warmup_steps >= *total_steps)
    throw ConfigError("train: warmup_steps must be below total_steps");
}

TrainConfig toy_train_config() {
  TrainConfig cfg;
  cfg.lr_max = 1e-2;
  return cfg;
}

Schedule make_schedule(const TrainConfig& cfg, std::size_t steps_per_epoch) {
  cfg.validate();
  Schedule s;
  s.lr_max = cfg.lr_max;
  s.lr_min = cfg.lr_min;
  s.total = cfg.total_steps ? *cfg.total_steps : cfg.epochs * steps_per_epoch;
  if (s.total == 0) throw ConfigError("train: schedule needs at least one step");
  s.warmup = cfg.warmup_steps ? *cfg.warmup_steps
                              : static_cast<std::size_t>(std::floor(cfg.warmup_fraction * static_cast<double>(s.total)));
  if (s.warmup >= s.total) throw ConfigError("train: warmup_steps must be below total_steps");
  return s;
}

double lr_at(std::size_t step, const Schedule& s) {
  if (step > s.total) {
    throw ScheduleError("lr_at: step " + std::to_string(step) + " beyond total " + std::to_string(s.total));
  }
  if (step < s.warmup) return s.lr_max * static_cast<double>(step) / static_cast<double>(s.warmup);
  const double t_cur = static_cast<double>(step - s.warmup);
  const double t = static_cast<double>(s.total - s.warmup);
  return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + std::cos(std::numbers::pi * t_cur / t));
}

Var bce_loss(Var o, Var t) {
  if (o.shape() != t.shape()) {
    throw DimensionError("bce_loss: outputs " + shape_string(o.shape()) + " vs targets " + shape_string(t.shape()));
  }
  const Tensor& ov = o.value();
  const Tensor& tv = t.value();
  const std::size_t n = ov.size();
  if (n == 0) throw DimensionError("bce_loss: empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(ov[i], kBceClamp, 1.0 - kBceClamp);
    acc += tv[i] * std::log(p) + (1.0 - tv[i]) * std::log(1.0 - p);
  }
  Tensor out = Tensor::scalar(-acc / static_cast<double>(n));
  return o.tape().record("bce_loss", std::move(out), {o, t}, [n](const Tensor& g, BackwardContext& ctx) {
    const Tensor& ov = ctx.input(0);
    const Tensor& tv = ctx.input(1);
    const double scale = g[0] / static_cast<double>(n);
    if (ctx.needs_grad(0)) {
      auto d = ctx.grad(0).data();
      for (std::size_t i = 0; i < n; ++i) {
        // Flat outside the clamp.
        if (ov[i] < kBceClamp || ov[i] > 1.0 - kBceClamp) continue;
        d[i] += scale * (-tv[i] / ov[i] + (1.0 - tv[i]) / (1.0 - ov[i]));
      }
    }
    if (ctx.needs_grad(1)) {
      auto d = ctx.grad(1).data();
      for (std::size_t i = 0; i < n; ++i) {
        const double p = std::clamp(ov[i], kBceClamp, 1.0 - kBceClamp);
        d[i] += scale * (std::log(1.0 - p) - std::log(p));
      }
    }
  });
}

void adam_step(model::ParamMap& params, const std::map<std::string, Tensor>& grads, AdamState& state, double lr,
               double beta1, double beta2, double epsilon) {
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [name, value] : params) {
    const auto it = grads.find(name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    if (g.shape() != value.shape()) throw DimensionError("adam_step: gradient shape mismatch for " + name);
    Tensor& m = state.m.try_emplace(name, value.shape(), 0.0).first->second;
    Tensor& v = state.v.try_emplace(name, value.shape(), 0.0).first->second;
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      value[i] -= lr * m_hat / (std::sqrt(v_hat) + epsilon);
    }
  }
}

Dataset toy_dataset(std::size_t per_class, std::uint64_t seed, std::size_t hw) {
  if (hw < 8) throw ConfigError("toy_dataset: hw must be at least 8");
  Dataset d;
  d.class_names = {"hstripes", "vstripes", "checker", "blob"};
  Rng rng(derive_seed(seed, {0x70ULL}));
  std::normal_distribution<double> noise(0.0, 0.05);
  const double two_pi = 2.0 * std::numbers::pi;
  const double size = static_cast<double>(hw);
  for (std::size_t idx = 0; idx < per_class; ++idx) {
    for (std::size_t k = 0; k < 4; ++k) {
      const double amp = uniform(rng, 0.25, 0.45);
      const double period = uniform(rng, 4.0, 8.0);
      const double phase_a = uniform(rng, 0.0, period), phase_b = uniform(rng, 0.0, period);
      const double cy = uniform(rng, 0.3, 0.7) * size, cx = uniform(rng, 0.3, 0.7) * size;
      const double sigma = uniform(rng, 0.1, 0.2) * size;
      Tensor img(Shape{3, hw, hw});
      for (std::size_t i = 0; i < hw; ++i) {
        for (std::size_t j = 0; j < hw; ++j) {
          const double y = static_cast<double>(i), x = static_cast<double>(j);
          double v = 0.5;
          switch (k) {
            case 0: v += amp * std::sin(two_pi * (y + phase_a) / period); break;
            case 1: v += amp * std::sin(two_pi * (x + phase_a) / period); break;
            case 2:
              v += amp * (std::sin(two_pi * (y + phase_a) / period) * std::sin(two_pi * (x + phase_b) / period) >= 0.0
                              ? 1.0 : -1.0);
              break;
            default: {
              const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
              v += amp * (2.0 * std::exp(-r2 / (2.0 * sigma * sigma)) - 1.0);
            }
          }
          for (std::size_t c = 0; c < 3; ++c) img.at({c, i, j}) = std::clamp(v + noise(rng), 0.0, 1.0);
        }
      }
      d.samples.push_back({std::move(img), k});
    }
  }
  return d;
}

std::vector<Batch> epoch_batches(const Dataset& data, const TrainConfig& cfg, const std::optional<ffa::FfaConfig>& ffa,
                                 std::uint64_t seed, std::size_t epoch) {
  if (data.samples.empty()) throw DatasetError("train: empty dataset");
  const std::size_t n = data.samples.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng order_rng(derive_seed(seed, {epoch, kOrder}));
  std::shuffle(order.begin(), order.end(), order_rng);

  const bool fusing = ffa.has_value() && cfg.ffa_ratio > 0.0;
  std::vector<std::vector<std::size_t>> by_class(data.classes());
  if (fusing) {
    for (std::size_t i = 0; i < n; ++i) by_class.at(data.samples[i].label).push_back(i);
  }
  Rng fuse_rng(derive_seed(seed, {epoch, kFuse}));

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < n; start += cfg.batch) {
    Batch b;
    const std::size_t end = std::min(n, start + cfg.batch);
    for (std::size_t i = start; i < end; ++i) {
      b.images.push_back(data.samples[order[i]].image);
      b.labels.push_back(data.samples[order[i]].label);
    }
    b.real = b.images.size();
    if (fusing) {
      const auto extra = static_cast<std::size_t>(std::llround(cfg.ffa_ratio * static_cast<double>(b.real)));
      for (std::size_t e = 0; e < extra; ++e) {
        const std::size_t anchor = order[start + uniform_index(fuse_rng, b.real)];
        const auto& pool = by_class[data.samples[anchor].label];
        if (pool.size() < 2) continue;
        std::size_t partner = pool[uniform_index(fuse_rng, pool.size() - 1)];
        if (partner == anchor) partner = pool.back();
        const Tensor& a = data.samples[anchor].image;
        ffa->validate_for(a.dim(1), a.dim(2));
        const ffa::WeightMask mask = ffa::build_masks(a.dim(1), a.dim(2), *ffa, fuse_rng);
        b.images.push_back(ffa::fuse(a, data.samples[partner].image, mask));
        b.labels.push_back(data.samples[anchor].label);
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

nlohmann::ordered_json to_json(const EpochLog& log) {
  nlohmann::ordered_json j;
  j["epoch"] = log.epoch;
  j["mean_loss"] = log.mean_loss;
  j["lr"] = log.lr;
  j["of1"] = log.of1;
  j["cf1"] = log.cf1;
  j["wall_ms"] = log.wall_ms;
  return j;
}

std::vector<std::vector<double>> predict_all(const Dataset& data, const model::ParamMap& params,
                                             const model::CmtConfig& cfg) {
  std::vector<std::vector<double>> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    const Tensor p = model::predict(s.image, params, cfg);
    out.emplace_back(p.values());
  }
  return out;
}

std::pair<double, double> f1_scores(const Dataset& data, const model::ParamMap& params, const model::CmtConfig& cfg,
                                    double threshold) {
  const auto probs = predict_all(data, params, cfg);
  metrics::LabelMatrix preds, targets;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    preds.push_back(metrics::binarize(probs[i], threshold));
    std::vector<int> t(data.classes(), 0);
    t.at(data.samples[i].label) = 1;
    targets.push_back(std::move(t));
  }
  const auto r = metrics::report(metrics::confusion(preds, targets, data.classes()));
  return {r.of1, r.cf1};
}

TrainResult train_loop(const Dataset& data, const model::CmtConfig& model_cfg, model::ParamMap params,
                       const TrainConfig& cfg, const std::optional<ffa::FfaConfig>& ffa, std::uint64_t seed,
                       const EpochCallback& on_epoch) {
  if (data.samples.empty()) throw DatasetError("train: empty dataset");
  if (data.classes() != model_cfg.classes) {
    throw ConfigError("train: dataset has " + std::to_string(data.classes()) + " classes, model expects " +
                      std::to_string(model_cfg.classes));
  }
  for (const auto& s : data.samples) {
    if (s.label >= data.classes()) throw DatasetError("train: label out of range");
  }
  const Tensor& first = data.samples.front().image;
  model_cfg.validate_for(first.dim(1), first.dim(2));
  if (ffa) ffa->validate_for(first.dim(1), first.dim(2));

  const std::size_t steps_per_epoch = (data.samples.size() + cfg.batch - 1) / cfg.batch;
  const Schedule sched = make_schedule(cfg, steps_per_epoch);
  const std::size_t k = model_cfg.classes;

  TrainResult result;
  AdamState adam;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    Rng dropout_rng(derive_seed(seed, {epoch, kDropout}));
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    double lr = 0.0;
    for (const Batch& b : epoch_batches(data, cfg, ffa, seed, epoch)) {
      if (step >= sched.total) break;
      Tape tape;
      const model::BoundParams bound = model::bind(tape, params, true);
      std::vector<Var> probs;
      Tensor targets(Shape{b.images.size(), k}, 0.0);
      for (std::size_t i = 0; i < b.images.size(); ++i) {
        const Var img = tape.constant(b.images[i]);
        probs.push_back(model::cmt_forward(img, bound, model_cfg, model::Mode::train, &dropout_rng).probs);
        targets.at({i, b.labels[i]}) = 1.0;
      }
      const Var loss = bce_loss(stack(probs), tape.constant(targets));
      tape.backward(loss);
      std::map<std::string, Tensor> grads;
      for (const auto& [name, var] : bound) grads.emplace(name, tape.grad(var));
      lr = lr_at(step + 1, sched);
      adam_step(params, grads, adam, lr, cfg.beta1, cfg.beta2, cfg.epsilon);
      ++step;
      loss_sum += loss.value().item() * static_cast<double>(b.images.size());
      loss_count += b.images.size();
    }
    EpochLog log;
    log.epoch = epoch + 1;
    log.mean_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    log.lr = lr;
    std::tie(log.of1, log.cf1) = f1_scores(data, params, model_cfg, cfg.threshold);
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace cmt::train

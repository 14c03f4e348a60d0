#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmt/autodiff.hpp"
#include "cmt/ffa.hpp"
#include "cmt/model.hpp"
#include "cmt/tensor.hpp"

namespace cmt::train {

struct TrainConfig {
  double lr_max = 1e-5;
  double lr_min = 0.0;
  std::optional<std::size_t> warmup_steps;  // default: warmup_fraction of total
  double warmup_fraction = 0.05;
  std::optional<std::size_t> total_steps;   // default: epochs * batches per epoch
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch = 16;
  std::size_t epochs = 20;
  double ffa_ratio = 1.0;  // fused samples per real sample in a batch
  double threshold = 0.5;  // binarization for metric snapshots

  void validate() const;
};

// Desk-scale settings for the synthetic set: larger peak rate, same schedule shape.
TrainConfig toy_train_config();

// Resolved schedule lengths.
struct Schedule {
  double lr_max = 0.0, lr_min = 0.0;
  std::size_t warmup = 0;
  std::size_t total = 0;
};

Schedule make_schedule(const TrainConfig& cfg, std::size_t steps_per_epoch);

// Linear ramp 0 -> lr_max over the warmup, then cosine annealing to lr_min at `total`.
// ScheduleError when step > total.
double lr_at(std::size_t step, const Schedule& s);

// -(1/n) sum [t log o + (1-t) log(1-o)] over every element, o clamped to [1e-12, 1-1e-12].
Var bce_loss(Var o, Var t);
inline constexpr double kBceClamp = 1e-12;

struct AdamState {
  std::map<std::string, Tensor> m, v;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update of every parameter that has a gradient.
void adam_step(model::ParamMap& params, const std::map<std::string, Tensor>& grads, AdamState& state, double lr,
               double beta1, double beta2, double epsilon);

struct Sample {
  Tensor image;  // [c,h,w] in [0,1]
  std::size_t label = 0;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;
  std::size_t classes() const { return class_names.size(); }
};

// Four separable pattern classes (horizontal stripes, vertical stripes,
// checkerboard, blob) with random phase, contrast and noise; 3 x hw x hw.
Dataset toy_dataset(std::size_t per_class, std::uint64_t seed, std::size_t hw = 32);

struct Batch {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::size_t real = 0;  // leading entries taken from the dataset; the rest are fused

  friend bool operator==(const Batch&, const Batch&) = default;
};

// Shuffled mini-batches of one epoch. The order comes from stream (seed, epoch, 0);
// fused samples from stream (seed, epoch, 1), so a zero ratio leaves the batches
// untouched. Each fused sample mixes a uniformly chosen batch member with another
// training image of the same class.
std::vector<Batch> epoch_batches(const Dataset& data, const TrainConfig& cfg, const std::optional<ffa::FfaConfig>& ffa,
                                 std::uint64_t seed, std::size_t epoch);

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;  // rate of the last step in the epoch
  double of1 = 0.0, cf1 = 0.0;
  double wall_ms = 0.0;
};

nlohmann::ordered_json to_json(const EpochLog& log);

struct TrainResult {
  model::ParamMap params;
  std::vector<EpochLog> log;
};

// Eval-mode probabilities for every sample.
std::vector<std::vector<double>> predict_all(const Dataset& data, const model::ParamMap& params,
                                             const model::CmtConfig& cfg);

// OF1/CF1 snapshot of `params` on `data`.
std::pair<double, double> f1_scores(const Dataset& data, const model::ParamMap& params, const model::CmtConfig& cfg,
                                    double threshold);

using EpochCallback = std::function<void(const EpochLog&)>;

// Mini-batch training with BCE and Adam. Dropout draws come from stream
// (seed, epoch, 2). Metric snapshots use the real training images.
TrainResult train_loop(const Dataset& data, const model::CmtConfig& model_cfg, model::ParamMap params,
                       const TrainConfig& cfg, const std::optional<ffa::FfaConfig>& ffa, std::uint64_t seed,
                       const EpochCallback& on_epoch = {});

}  // namespace cmt::train

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace cmt::metrics {

// One row per image, one 0/1 entry per class.
using LabelMatrix = std::vector<std::vector<int>>;

// p >= threshold -> 1.
std::vector<int> binarize(std::span<const double> probs, double threshold = 0.5);

struct ClassCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::uint64_t total() const { return tp + fp + fn + tn; }
  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

struct ConfusionCounts {
  std::vector<ClassCounts> per_class;
  std::uint64_t images = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& other);
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

ConfusionCounts confusion(const LabelMatrix& preds, const LabelMatrix& targets, std::size_t classes);

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  bool precision_undefined = false;  // tp + fp == 0, reported as 0
  bool recall_undefined = false;     // tp + fn == 0, reported as 0
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double cp = 0.0, cr = 0.0, cf1 = 0.0;  // macro
  double op = 0.0, or_ = 0.0, of1 = 0.0;  // micro
  std::vector<std::string> warnings;
};

// 2ab/(a+b), 0 when both are 0.
double harmonic(double a, double b);

MetricsReport report(const ConfusionCounts& counts);

// The printed formulas taken at face value. CP and CR sum per-class P and R over
// N*K terms (so equal the macro means). OR divides the number of label agreements
// f(p, p_hat), true negatives included, by the actual positives; OP divides the
// agreements by N*K. OR can exceed 1.
struct LiteralReport {
  double cp = 0.0, cr = 0.0, cf1 = 0.0;
  double op = 0.0, or_ = 0.0, of1 = 0.0;
};

LiteralReport literal_report(const LabelMatrix& preds, const LabelMatrix& targets, std::size_t classes);

// Per-class precision on a 0..1 scale, aggregates scaled by 100.
nlohmann::ordered_json to_json(const MetricsReport& r, const std::vector<std::string>& class_names);
nlohmann::ordered_json to_json(const LiteralReport& r);

}  // namespace cmt::metrics

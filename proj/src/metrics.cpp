#include "cmt/metrics.hpp"

#include <string>

#include "cmt/errors.hpp"

namespace cmt::metrics {

namespace {

void check_matrix(const LabelMatrix& m, std::size_t classes, const char* what) {
  for (std::size_t n = 0; n < m.size(); ++n) {
    if (m[n].size() != classes) {
      throw DimensionError(std::string(what) + " row " + std::to_string(n) + " has " + std::to_string(m[n].size()) +
                           " entries, expected " + std::to_string(classes));
    }
    for (int v : m[n]) {
      if (v != 0 && v != 1) throw DimensionError(std::string(what) + " entries must be 0 or 1");
    }
  }
}

double ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

std::vector<int> binarize(std::span<const double> probs, double threshold) {
  std::vector<int> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= threshold ? 1 : 0;
  return out;
}

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& other) {
  if (per_class.empty()) per_class.resize(other.per_class.size());
  if (per_class.size() != other.per_class.size()) throw DimensionError("confusion: class counts differ");
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    per_class[k].tp += other.per_class[k].tp;
    per_class[k].fp += other.per_class[k].fp;
    per_class[k].fn += other.per_class[k].fn;
    per_class[k].tn += other.per_class[k].tn;
  }
  images += other.images;
  return *this;
}

ConfusionCounts confusion(const LabelMatrix& preds, const LabelMatrix& targets, std::size_t classes) {
  if (preds.size() != targets.size()) {
    throw DimensionError("confusion: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(targets.size()) + " targets");
  }
  check_matrix(preds, classes, "predictions");
  check_matrix(targets, classes, "targets");
  ConfusionCounts c;
  c.per_class.resize(classes);
  c.images = preds.size();
  for (std::size_t n = 0; n < preds.size(); ++n) {
    for (std::size_t k = 0; k < classes; ++k) {
      const int p = preds[n][k], t = targets[n][k];
      auto& cc = c.per_class[k];
      if (p && t) ++cc.tp;
      else if (p) ++cc.fp;
      else if (t) ++cc.fn;
      else ++cc.tn;
    }
  }
  return c;
}

double harmonic(double a, double b) { return a + b == 0.0 ? 0.0 : 2.0 * a * b / (a + b); }

MetricsReport report(const ConfusionCounts& counts) {
  MetricsReport r;
  const std::size_t k_count = counts.per_class.size();
  std::uint64_t tp = 0, pred_pos = 0, true_pos = 0;
  for (std::size_t k = 0; k < k_count; ++k) {
    const auto& c = counts.per_class[k];
    ClassMetrics m;
    m.precision = ratio(c.tp, c.tp + c.fp);
    m.recall = ratio(c.tp, c.tp + c.fn);
    m.precision_undefined = c.tp + c.fp == 0;
    m.recall_undefined = c.tp + c.fn == 0;
    if (m.precision_undefined) r.warnings.push_back("class " + std::to_string(k) + ": no positive predictions, precision set to 0");
    if (m.recall_undefined) r.warnings.push_back("class " + std::to_string(k) + ": no positive targets, recall set to 0");
    r.cp += m.precision;
    r.cr += m.recall;
    r.per_class.push_back(m);
    tp += c.tp;
    pred_pos += c.tp + c.fp;
    true_pos += c.tp + c.fn;
  }
  if (k_count > 0) {
    r.cp /= static_cast<double>(k_count);
    r.cr /= static_cast<double>(k_count);
  }
  r.cf1 = harmonic(r.cp, r.cr);
  r.op = ratio(tp, pred_pos);
  r.or_ = ratio(tp, true_pos);
  r.of1 = harmonic(r.op, r.or_);
  return r;
}

LiteralReport literal_report(const LabelMatrix& preds, const LabelMatrix& targets, std::size_t classes) {
  const MetricsReport macro = report(confusion(preds, targets, classes));
  LiteralReport r;
  r.cp = macro.cp;
  r.cr = macro.cr;
  r.cf1 = harmonic(r.cp, r.cr);
  std::uint64_t agree = 0, positives = 0;
  for (std::size_t n = 0; n < preds.size(); ++n) {
    for (std::size_t k = 0; k < classes; ++k) {
      agree += preds[n][k] == targets[n][k] ? 1 : 0;
      positives += static_cast<std::uint64_t>(targets[n][k]);
    }
  }
  r.or_ = ratio(agree, positives);
  r.op = ratio(agree, static_cast<std::uint64_t>(preds.size() * classes));
  r.of1 = harmonic(r.op, r.or_);
  return r;
}

nlohmann::ordered_json to_json(const MetricsReport& r, const std::vector<std::string>& class_names) {
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    const std::string name = k < class_names.size() ? class_names[k] : "class" + std::to_string(k);
    per[name] = r.per_class[k].precision;
  }
  nlohmann::ordered_json j;
  j["per_class_precision"] = per;
  j["CP"] = 100.0 * r.cp;
  j["CR"] = 100.0 * r.cr;
  j["CF1"] = 100.0 * r.cf1;
  j["OP"] = 100.0 * r.op;
  j["OR"] = 100.0 * r.or_;
  j["OF1"] = 100.0 * r.of1;
  j["warnings"] = r.warnings;
  return j;
}

nlohmann::ordered_json to_json(const LiteralReport& r) {
  nlohmann::ordered_json j;
  j["CP"] = 100.0 * r.cp;
  j["CR"] = 100.0 * r.cr;
  j["CF1"] = 100.0 * r.cf1;
  j["OP"] = 100.0 * r.op;
  j["OR"] = 100.0 * r.or_;
  j["OF1"] = 100.0 * r.of1;
  return j;
}

}  // namespace cmt::metrics

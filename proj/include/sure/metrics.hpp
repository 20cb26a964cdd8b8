#pragma once

// Failure-prediction metrics. Correct predictions are the positive class and
// the confidence score is the detector output.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sure/autodiff.hpp"
#include "sure/error.hpp"
#include "sure/tensor.hpp"

namespace sure {

struct EvalRecord {
  double confidence = 0.0;
  std::size_t predicted = 0;
  std::size_t true_label = 0;
  bool correct = false;

  static EvalRecord make(double confidence, std::size_t predicted, std::size_t true_label) {
    if (!(confidence >= 0.0 && confidence <= 1.0))
      throw ValidationError("confidence must lie in [0, 1], got " + std::to_string(confidence));
    return {confidence, predicted, true_label, predicted == true_label};
  }
};

struct RiskCoveragePoint {
  double coverage = 0.0;
  double risk = 0.0;
};

struct RiskCoverageCurve {
  std::vector<RiskCoveragePoint> points;
};

struct MetricReport {
  double accuracy = 0.0;
  double aurc = 0.0;  // raw; multiply by 1000 for display
  double auroc = std::numeric_limits<double>::quiet_NaN();
  double fpr95 = std::numeric_limits<double>::quiet_NaN();

  double aurc_x1000() const { return aurc * 1000.0; }
};

/// Maximum softmax probability.
inline double msp_confidence(const Tensor& logits) {
  if (logits.rank() != 1 || logits.size() < 2) throw ShapeError("msp_confidence expects logits of shape [K], K >= 2");
  const Tensor p = softmax(logits);
  return *std::max_element(p.values().begin(), p.values().end());
}

/// One record per row of `logits` ([N, K]) scored by MSP.
inline std::vector<EvalRecord> records_from_logits(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const auto [rows, cols] = as_rows(logits, "records_from_logits");
  if (rows != labels.size()) throw ShapeError("records_from_logits: one label per row required");
  if (cols < 2) throw ShapeError("records_from_logits: need at least 2 classes");
  const Tensor p = softmax(logits);
  std::vector<EvalRecord> out;
  out.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = p.row(r);
    const auto it = std::max_element(row.begin(), row.end());
    const double conf = std::clamp(*it, 0.0, 1.0);
    out.push_back(EvalRecord::make(conf, static_cast<std::size_t>(it - row.begin()), labels[r]));
  }
  return out;
}

/// Indices sorted by confidence, highest first; ties keep their original order.
inline std::vector<std::size_t> confidence_order(const std::vector<EvalRecord>& records) {
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return records[a].confidence > records[b].confidence; });
  return idx;
}

inline RiskCoverageCurve risk_coverage_curve(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw ValidationError("risk_coverage_curve of no records");
  const auto order = confidence_order(records);
  const double n = static_cast<double>(records.size());
  RiskCoverageCurve curve;
  curve.points.reserve(records.size());
  std::size_t wrong = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (!records[order[k]].correct) ++wrong;
    const double kk = static_cast<double>(k + 1);
    curve.points.push_back({kk / n, static_cast<double>(wrong) / kk});
  }
  return curve;
}

/// Mean selective risk over the n coverage points.
inline double aurc(const RiskCoverageCurve& curve) {
  if (curve.points.empty()) throw ValidationError("aurc of an empty curve");
  double s = 0.0;
  for (const auto& p : curve.points) s += p.risk;
  return s / static_cast<double>(curve.points.size());
}

inline double aurc(const std::vector<EvalRecord>& records) { return aurc(risk_coverage_curve(records)); }

namespace detail {

inline void require_both_classes(const std::vector<EvalRecord>& records, const char* what) {
  bool pos = false, neg = false;
  for (const auto& r : records) (r.correct ? pos : neg) = true;
  if (!pos || !neg)
    throw UndefinedMetricError(std::string(what) + " needs at least one correct and one incorrect prediction");
}

}  // namespace detail

/// P(conf of a random correct > conf of a random incorrect) + 1/2 P(tie).
inline double auroc(const std::vector<EvalRecord>& records) {
  detail::require_both_classes(records, "auroc");
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return records[a].confidence < records[b].confidence; });
  double pos_total = 0.0, neg_total = 0.0;
  for (const auto& r : records) (r.correct ? pos_total : neg_total) += 1.0;
  // Twice the Mann-Whitney U statistic, kept integral until the final division.
  double twice_u = 0.0;
  double neg_below = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    double pos = 0.0, neg = 0.0;
    while (j < idx.size() && records[idx[j]].confidence == records[idx[i]].confidence) {
      (records[idx[j]].correct ? pos : neg) += 1.0;
      ++j;
    }
    twice_u += pos * (2.0 * neg_below + neg);
    neg_below += neg;
    i = j;
  }
  return twice_u / (2.0 * pos_total * neg_total);
}

/// FPR at the largest threshold whose TPR reaches 0.95 (accept when conf >= threshold).
inline double fpr_at_95_tpr(const std::vector<EvalRecord>& records) {
  detail::require_both_classes(records, "fpr_at_95_tpr");
  const auto order = confidence_order(records);
  double pos_total = 0.0, neg_total = 0.0;
  for (const auto& r : records) (r.correct ? pos_total : neg_total) += 1.0;
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && records[order[j]].confidence == records[order[i]].confidence) {
      (records[order[j]].correct ? tp : fp) += 1.0;
      ++j;
    }
    if (tp / pos_total >= 0.95) return fp / neg_total;
    i = j;
  }
  return fp / neg_total;
}

inline double accuracy(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw ValidationError("accuracy of no records");
  std::size_t c = 0;
  for (const auto& r : records) c += r.correct ? 1 : 0;
  return static_cast<double>(c) / static_cast<double>(records.size());
}

/// All four metrics; AUROC and FPR95 are NaN when only one class is present.
inline MetricReport evaluate_records(const std::vector<EvalRecord>& records) {
  MetricReport r;
  r.accuracy = accuracy(records);
  r.aurc = aurc(records);
  try {
    r.auroc = auroc(records);
    r.fpr95 = fpr_at_95_tpr(records);
  } catch (const UndefinedMetricError&) {
  }
  return r;
}

/// Counts of correct and misclassified records per confidence bin over [0, 1].
struct ConfidenceHistogram {
  std::vector<double> edges;  // bins + 1 entries
  std::vector<std::size_t> correct;
  std::vector<std::size_t> incorrect;
};

inline ConfidenceHistogram confidence_histogram(const std::vector<EvalRecord>& records, std::size_t bins = 20) {
  if (bins == 0) throw ValidationError("histogram needs at least one bin");
  ConfidenceHistogram h;
  h.edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) h.edges[b] = static_cast<double>(b) / static_cast<double>(bins);
  h.correct.assign(bins, 0);
  h.incorrect.assign(bins, 0);
  for (const auto& r : records) {
    auto b = static_cast<std::size_t>(r.confidence * static_cast<double>(bins));
    b = std::min(b, bins - 1);
    (r.correct ? h.correct : h.incorrect)[b] += 1;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Prediction dump: one `confidence,predicted,true_label` record per line. A
// leading header line and blank lines are skipped.

inline std::vector<EvalRecord> read_prediction_dump(std::istream& is) {
  std::vector<EvalRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string a, b, c;
    if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c)) {
      throw IoError("prediction dump line " + std::to_string(lineno) + ": expected 3 comma-separated fields");
    }
    try {
      std::size_t pos = 0;
      const double conf = std::stod(a, &pos);
      const long pred = std::stol(b);
      const long label = std::stol(c);
      if (pred < 0 || label < 0) throw IoError("negative class index");
      out.push_back(EvalRecord::make(conf, static_cast<std::size_t>(pred), static_cast<std::size_t>(label)));
    } catch (const std::invalid_argument&) {
      if (lineno == 1) continue;  // header
      throw IoError("prediction dump line " + std::to_string(lineno) + ": not numeric");
    } catch (const std::out_of_range&) {
      throw IoError("prediction dump line " + std::to_string(lineno) + ": value out of range");
    } catch (const ValidationError& e) {
      throw IoError("prediction dump line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<EvalRecord> read_prediction_dump(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open prediction dump '" + path + "'");
  return read_prediction_dump(is);
}

inline void write_prediction_dump(std::ostream& os, const std::vector<EvalRecord>& records) {
  os.precision(17);
  for (const auto& r : records) os << r.confidence << ',' << r.predicted << ',' << r.true_label << '\n';
}

}  // namespace sure

#include "vdf/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace vdf {

ConfusionCounts confusion(const MaskVolume& predicted, const MaskVolume& truth) {
  require_same_dims(predicted, truth.dims, "confusion");
  ConfusionCounts c;
  for (Index i = 0; i < truth.data.size(); ++i) {
    const bool p = predicted.data[i] == 0;
    const bool t = truth.data[i] == 0;
    if (p && t)
      ++c.tp;
    else if (p)
      ++c.fp;
    else if (t)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

double dice(const ConfusionCounts& c) {
  const std::int64_t denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double dice(const MaskVolume& x, const MaskVolume& y) { return dice(confusion(x, y)); }

PrecisionRecall precision_recall(const ConfusionCounts& c) {
  PrecisionRecall r;
  if (c.tp + c.fp > 0) r.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn > 0) r.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  return r;
}

PrecisionRecall precision_recall(const MaskVolume& predicted, const MaskVolume& truth) {
  return precision_recall(confusion(predicted, truth));
}

MaskVolume binarize_baseline_output(const Volume<float>& original, const Volume<float>& predicted_defaced,
                                    double tau_eq) {
  require_same_dims(predicted_defaced, original.dims, "binarize_baseline_output");
  MaskVolume m = original.like<std::uint8_t>();
  for (Index i = 0; i < original.data.size(); ++i)
    m.data[i] = std::abs(static_cast<double>(original.data[i]) - predicted_defaced.data[i]) <= tau_eq ? 1 : 0;
  return m;
}

void EvalReport::finalize() {
  mean_dice = mean_precision = mean_recall = 0.0;
  if (rows.empty()) return;
  for (const auto& r : rows) {
    mean_dice += r.dice;
    mean_precision += r.precision;
    mean_recall += r.recall;
  }
  const double n = static_cast<double>(rows.size());
  mean_dice /= n;
  mean_precision /= n;
  mean_recall /= n;
}

std::string EvalReport::to_jsonl() const {
  std::ostringstream os;
  for (const auto& r : rows) {
    nlohmann::json j = {{"type", "image"},     {"id", r.id},         {"protocol", r.protocol},
                        {"dice", r.dice},      {"precision", r.precision}, {"recall", r.recall}};
    os << j.dump() << "\n";
  }
  nlohmann::json s = {{"type", "summary"},
                      {"model", model},
                      {"aggregation", "per-image mean"},
                      {"images", rows.size()},
                      {"skipped", skipped},
                      {"mean_dice", mean_dice},
                      {"mean_precision", mean_precision},
                      {"mean_recall", mean_recall}};
  os << s.dump() << "\n";
  return os.str();
}

std::string EvalReport::to_table(std::int64_t parameter_count) const {
  std::ostringstream os;
  os << "metrics: per-image scores averaged over " << rows.size() << " image(s)";
  if (skipped) os << ", " << skipped << " skipped (missing ground truth)";
  os << "\n";
  os << std::left << std::setw(26) << "Model" << std::right << std::setw(8) << "Dice" << std::setw(11)
     << "Precision" << std::setw(9) << "Recall" << std::setw(14) << "Parameters" << "\n";
  os << std::fixed << std::setprecision(3);
  os << std::left << std::setw(26) << (model + " (measured)") << std::right << std::setw(8) << mean_dice
     << std::setw(11) << mean_precision << std::setw(9) << mean_recall << std::setw(14) << parameter_count << "\n";
  for (const ReferenceRow& r : {kReferenceDeepDefacer, kReferenceBaseline})
    os << std::left << std::setw(26) << (std::string(r.model) + " (reference)") << std::right << std::setw(8)
       << r.dice << std::setw(11) << r.precision << std::setw(9) << r.recall << std::setw(14) << r.parameters
       << "\n";
  return os.str();
}

}  // namespace vdf

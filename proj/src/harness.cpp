#include "setr/harness.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace setr {

namespace {

enum StreamTag : uint64_t { kFoldStream = 21 };

}  // namespace

FoldPlan kfold_split(const std::vector<SampleRecord>& dataset, int folds, bool stratified,
                     uint64_t seed) {
  if (folds < 1) throw ConfigError("kfold_split: folds must be >= 1");

  // Patient -> label multiset, in sorted patient order for determinism.
  std::map<std::string, std::string> stratum_of_patient;
  for (const SampleRecord& rec : dataset) {
    stratum_of_patient.emplace(rec.patient_id, std::string());
  }
  if (static_cast<size_t>(folds) > stratum_of_patient.size()) {
    throw ConfigError("kfold_split: " + std::to_string(folds) + " folds for " +
                      std::to_string(stratum_of_patient.size()) + " patients");
  }
  if (stratified) {
    std::map<std::string, std::vector<int>> labels;
    for (const SampleRecord& rec : dataset) labels[rec.patient_id].push_back(rec.label);
    for (auto& [patient, ls] : labels) {
      std::sort(ls.begin(), ls.end());
      std::string key;
      for (int l : ls) key += std::to_string(l) + ",";
      stratum_of_patient[patient] = key;
    }
  }

  // Group patients per stratum, shuffle within, deal round-robin with a
  // global counter so fold sizes stay within one patient of each other.
  std::map<std::string, std::vector<std::string>> strata;
  for (const auto& [patient, key] : stratum_of_patient) strata[key].push_back(patient);

  Rng rng(mix_seed(seed, {kFoldStream}));
  FoldPlan plan;
  plan.folds = folds;
  plan.stratified = stratified;
  size_t deal = 0;
  for (auto& [key, patients] : strata) {
    shuffle(patients, rng);
    for (const std::string& p : patients) {
      plan.fold_of_patient[p] = static_cast<int>(deal % static_cast<size_t>(folds));
      ++deal;
    }
  }
  return plan;
}

Metrics metrics_from_confusion(long tp, long fp, long fn, long tn) {
  Metrics m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.tn = tn;
  m.precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
                                        : 0.0;
  const long total = tp + fp + fn + tn;
  m.accuracy = total > 0 ? static_cast<double>(tp + tn) / static_cast<double>(total) : 0.0;
  return m;
}

int fraction_to_level(double fraction, int k) {
  const double exact = fraction * k;
  const auto level = static_cast<int>(std::lround(exact)) - 1;
  if (level < 0 || level >= k || std::abs(exact - std::lround(exact)) > 1e-9) {
    throw ConfigError("fraction " + fmt_double(fraction) + " is not representable as (j+1)/" +
                      std::to_string(k));
  }
  return level;
}

std::vector<FractionMetrics> evaluate_with_predictor(
    const std::vector<const SampleRecord*>& test_set, const std::vector<double>& fractions, int k,
    const std::function<int(const SampleRecord&, int level)>& predictor) {
  std::vector<FractionMetrics> out;
  out.reserve(fractions.size());
  for (double fraction : fractions) {
    const int level = fraction_to_level(fraction, k);
    long tp = 0, fp = 0, fn = 0, tn = 0;
    for (const SampleRecord* rec : test_set) {
      const int got = predictor(*rec, level);
      if (rec->label == 1) {
        (got == 1 ? tp : fn) += 1;
      } else {
        (got == 1 ? fp : tn) += 1;
      }
    }
    out.push_back(FractionMetrics{fraction, metrics_from_confusion(tp, fp, fn, tn)});
  }
  return out;
}

std::vector<FractionMetrics> evaluate(const SetrParams& model,
                                      const std::vector<const SampleRecord*>& test_set,
                                      const std::vector<double>& fractions, int k) {
  return evaluate_with_predictor(
      test_set, fractions, k, [&model, k](const SampleRecord& rec, int level) {
        const SegmentSpec spec{k, level};
        const Index prefix = prefix_frame_count(rec.frame_count(), spec);
        const Mat feats = gather_sampled_features(rec, prefix, model.config.tokens);
        return predict(eval_forward(model, feats).logits);
      });
}

}  // namespace setr

// Synthetic dataset generation, patient-level cross-validation folds,
// classification metrics, and fraction-based evaluation.
#pragma once

#include "setr/distill.hpp"
#include "setr/features.hpp"
#include "setr/flow.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace setr {

// Two motion archetypes: both classes share a slow low-amplitude drift;
// the positive class adds rhythmic bursts whose amplitude ramps up with
// progression through the sample, so class evidence accumulates over time.
// The burst direction also rotates through feature space with progression:
// consecutive segments look alike while distant segments differ, which is
// the regime early-detection distillation is built for.
struct SyntheticSpec {
  int patients = 40;
  int samples_per_patient = 2;  // alternating labels; 2 gives one per class
  int classes = 2;
  int frames_min = 96;
  int frames_max = 160;
  double fps = 1.0;
  double noise = 0.1;           // iid feature noise per frame

  double drift_amp_min = 0.5;
  double drift_amp_max = 1.0;
  double normal_burst_min = 0.0;
  double normal_burst_max = 0.25;
  double tcs_burst_min = 0.8;
  double tcs_burst_max = 1.6;
  double burst_freq_min = 2.0;  // cycles per sample
  double burst_freq_max = 5.0;
  double ramp_power = 1.0;      // burst growth exponent over progression
  double burst_base = 0.25;     // burst floor: envelope = base + (1-base) * s^power
  double burst_rotation_deg = 120.0;  // direction swept from start to end of sample

  uint64_t seed = 7;

  bool flow_mode = false;       // synthesize raw flow fields, then featurize
  int flow_width = 32;
  int flow_height = 32;

  void validate() const;
};

struct SyntheticSample {
  SampleRecord record;
  std::vector<FlowField> flows;  // only in flow mode
};

std::vector<SyntheticSample> generate_synthetic_samples(const SyntheticSpec& spec);
std::vector<SampleRecord> generate_synthetic_dataset(const SyntheticSpec& spec);

// Patient-level fold assignment; all samples of one patient share a fold.
// Stratified assignment groups patients by their label multiset before
// dealing, keeping per-fold class proportions within one sample of global.
struct FoldPlan {
  int folds = 5;
  bool stratified = true;
  std::map<std::string, int> fold_of_patient;
};

FoldPlan kfold_split(const std::vector<SampleRecord>& dataset, int folds, bool stratified,
                     uint64_t seed);

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  long tp = 0, fp = 0, fn = 0, tn = 0;
};

// Positive class is label 1.
Metrics metrics_from_confusion(long tp, long fp, long fn, long tn);

struct FractionMetrics {
  double fraction = 0.0;
  Metrics metrics;
};

// Maps a fraction onto its segment level; rejects fractions that are not
// (j+1)/k for an integer level j.
int fraction_to_level(double fraction, int k);

// Evaluates a predictor at each fraction: every test sample is truncated
// to the fraction's prefix, the predictor is run in eval mode, and
// confusion counts are aggregated.
std::vector<FractionMetrics> evaluate_with_predictor(
    const std::vector<const SampleRecord*>& test_set, const std::vector<double>& fractions, int k,
    const std::function<int(const SampleRecord&, int level)>& predictor);

// Single-model evaluation across fractions.
std::vector<FractionMetrics> evaluate(const SetrParams& model,
                                      const std::vector<const SampleRecord*>& test_set,
                                      const std::vector<double>& fractions, int k);

}  // namespace setr

// Prefix segmentation, the three-term distillation objective, and the
// progressive / direct distillation chains.
//
// A sample is split into k nested prefixes; the model at level j sees the
// first (j+1)/k of the sample. Knowledge moves down the chain: the model
// trained on the full sample teaches the next-shorter prefix, which
// teaches the one below it, until the shortest-prefix student. Each
// student is trained with cross-entropy plus a temperature-scaled KL term
// on class probabilities and a mean-squared error term on patch tokens,
// with the teacher reading its own longer prefix.
#pragma once

#include "setr/features.hpp"
#include "setr/model.hpp"
#include "setr/optim.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

namespace setr {

struct SegmentSpec {
  int k = 8;      // segment count
  int level = 0;  // j in [0, k); level k-1 is the full sample

  double fraction() const { return static_cast<double>(level + 1) / k; }
  void validate() const;
};

struct DistillConfig {
  double tau = 10.0;   // softmax temperature for the KL term
  double alpha = 0.2;  // KL weight
  double beta = 0.5;   // MSE weight
  int epochs = 50;
  int batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  bool warm_start = false;  // start students from the teacher's weights
  std::vector<double> class_weights;  // optional CE weights

  void validate() const;
};

struct LossBreakdown {
  double ce = 0.0;
  double kl = 0.0;
  double mse = 0.0;
  double total = 0.0;  // always ce + alpha * kl + beta * mse
};

// Truncates a record to its level-(j) prefix: the first
// round((j+1)/k * frames) frames, duration scaled to (j+1) * T / k.
SampleRecord split_prefix(const SampleRecord& record, const SegmentSpec& spec);
Index prefix_frame_count(Index frames, const SegmentSpec& spec);

struct KdLossValues {
  Value total;
  LossBreakdown parts;
};

// Distillation losses for one sample. The teacher side is detached: no
// gradient reaches it. KL uses softmax(logits / tau) on both sides and is
// scaled by tau^2; MSE is the mean over patch tokens of the squared
// Euclidean distance; CE is the plain classification loss at tau = 1.
KdLossValues kd_losses(const DetachedOutput& teacher, const SetrOutput& student, int label,
                       const DistillConfig& cfg);

struct EpochStats {
  int epoch = 0;
  LossBreakdown train_loss;   // means over training batches
  double train_accuracy = 0.0;
  LossBreakdown val_loss;     // means over validation samples
  double val_accuracy = 0.0;
  bool has_val = false;
};

struct StageResult {
  SetrParams params;  // best-validation snapshot (final epoch when no val)
  SegmentSpec spec;
  std::vector<EpochStats> log;
  int best_epoch = 0;
};

struct StageDataset {
  std::vector<const SampleRecord*> train;
  std::vector<const SampleRecord*> val;
};

// Trains one chain stage. teacher == nullptr means plain supervised
// training on cross-entropy (the top-level model). With a teacher, the
// student minimizes the full three-term objective; the teacher is frozen
// and evaluated in eval mode on its own (longer) prefix. Returns the
// parameters with the best validation total loss across epochs.
StageResult train_stage(const SetrParams* teacher, const SegmentSpec& teacher_spec,
                        const SegmentSpec& student_spec, const StageDataset& data,
                        const SetrConfig& model_cfg, const DistillConfig& cfg, uint64_t seed);

// Full progressive chain: stage k-1 (plain) down to stage 0, each stage
// taught by the one above. Returns k results ordered level k-1 .. 0.
std::vector<StageResult> run_pkd_chain(const StageDataset& data, int k,
                                       const SetrConfig& model_cfg, const DistillConfig& cfg,
                                       uint64_t seed,
                                       const std::function<void(const StageResult&)>& on_stage = {});

// Ablation baseline: train the full-sample teacher, then distill in one
// hop to target_level. A pre-trained teacher may be supplied to avoid
// retraining; it must be the level-(k-1) model.
struct DirectKdResult {
  StageResult teacher;
  StageResult student;
};
DirectKdResult run_direct_kd(const StageDataset& data, int k, int target_level,
                             const SetrConfig& model_cfg, const DistillConfig& cfg, uint64_t seed,
                             const SetrParams* pretrained_teacher = nullptr);

// Per-stage training log as comma-separated rows.
void write_stage_log(const std::string& path, const std::string& stage_name,
                     const std::vector<EpochStats>& log);

}  // namespace setr

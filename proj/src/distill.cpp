#include "setr/distill.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace setr {

namespace {

enum StreamTag : uint64_t { kInitStream = 1, kTrainStream = 2 };

struct PreparedSample {
  const SampleRecord* record;
  Mat student_features;             // tokens x 512, student prefix
  std::optional<DetachedOutput> teacher_out;  // teacher on its own prefix
};

std::vector<PreparedSample> prepare(const std::vector<const SampleRecord*>& records,
                                    const SetrParams* teacher, const SegmentSpec& teacher_spec,
                                    const SegmentSpec& student_spec, const SetrConfig& model_cfg) {
  std::vector<PreparedSample> out;
  out.reserve(records.size());
  for (const SampleRecord* rec : records) {
    PreparedSample ps;
    ps.record = rec;
    const Index student_prefix = prefix_frame_count(rec->frame_count(), student_spec);
    ps.student_features = gather_sampled_features(*rec, student_prefix, model_cfg.tokens);
    if (teacher) {
      const Index teacher_prefix = prefix_frame_count(rec->frame_count(), teacher_spec);
      Mat teacher_features = gather_sampled_features(*rec, teacher_prefix, model_cfg.tokens);
      ps.teacher_out = eval_forward(*teacher, teacher_features);
    }
    out.push_back(std::move(ps));
  }
  return out;
}

}  // namespace

void SegmentSpec::validate() const {
  if (k < 1) throw std::invalid_argument("segment: k must be >= 1");
  if (level < 0 || level >= k) {
    throw std::invalid_argument("segment: level " + std::to_string(level) + " outside [0, " +
                                std::to_string(k) + ")");
  }
}

void DistillConfig::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("distill: tau must be positive");
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("distill: alpha and beta must be >= 0");
  if (epochs < 1) throw std::invalid_argument("distill: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("distill: batch size must be >= 1");
}

Index prefix_frame_count(Index frames, const SegmentSpec& spec) {
  spec.validate();
  if (frames < spec.k) {
    throw std::invalid_argument("split_prefix: record has " + std::to_string(frames) +
                                " frames, fewer than k = " + std::to_string(spec.k));
  }
  if (spec.level == spec.k - 1) return frames;
  const double exact = static_cast<double>(spec.level + 1) / spec.k * static_cast<double>(frames);
  return static_cast<Index>(std::lround(exact));
}

SampleRecord split_prefix(const SampleRecord& record, const SegmentSpec& spec) {
  const Index keep = prefix_frame_count(record.frame_count(), spec);
  if (spec.level == spec.k - 1) return record;
  SampleRecord out;
  out.sample_id = record.sample_id;
  out.patient_id = record.patient_id;
  out.label = record.label;
  out.duration_s = static_cast<double>(spec.level + 1) * record.duration_s / spec.k;
  out.features = record.features.topRows(keep);
  return out;
}

KdLossValues kd_losses(const DetachedOutput& teacher, const SetrOutput& student, int label,
                       const DistillConfig& cfg) {
  cfg.validate();
  if (teacher.logits.rows() != student.logits.rows() ||
      teacher.logits.cols() != student.logits.cols()) {
    throw std::invalid_argument("kd_losses: logit shapes differ, " +
                                shape_str(teacher.logits.rows(), teacher.logits.cols()) + " vs " +
                                shape_str(student.logits.rows(), student.logits.cols()));
  }
  if (teacher.patch_tokens.rows() != student.patch_tokens.rows() ||
      teacher.patch_tokens.cols() != student.patch_tokens.cols()) {
    throw std::invalid_argument("kd_losses: patch token shapes differ, " +
                                shape_str(teacher.patch_tokens.rows(), teacher.patch_tokens.cols()) +
                                " vs " +
                                shape_str(student.patch_tokens.rows(), student.patch_tokens.cols()));
  }
  Tape& tape = *student.logits.tape;
  const double tau = cfg.tau;
  const double tau2 = tau * tau;

  // Teacher soft targets; same log-softmax arithmetic as the taped route so
  // identical logits give an exact zero.
  const Mat t_log_probs = log_softmax_rows_plain(teacher.logits / tau);
  const Mat t_probs = t_log_probs.array().exp().matrix();
  const double t_self = t_probs.cwiseProduct(t_log_probs).sum();  // sum q^T log q^T

  Value s_log_probs = log_softmax_rows(scale(student.logits, 1.0 / tau));
  Value cross = sum_all(mul(tape.leaf(t_probs), s_log_probs));    // sum q^T log q^S
  Value kl = add(scale(cross, -tau2), tape.leaf(Mat::Constant(1, 1, tau2 * t_self)));

  const Index n_patches = student.patch_tokens.rows();
  Value diff = sub(student.patch_tokens, tape.leaf(teacher.patch_tokens));
  Value mse = scale(sum_all(mul(diff, diff)), 1.0 / static_cast<double>(n_patches));

  Value ce = cross_entropy(student.logits, label, cfg.class_weights);

  Value total = add(ce, add(scale(kl, cfg.alpha), scale(mse, cfg.beta)));

  KdLossValues out{total, {}};
  out.parts.ce = ce.data()(0, 0);
  out.parts.kl = kl.data()(0, 0);
  out.parts.mse = mse.data()(0, 0);
  out.parts.total = out.parts.ce + cfg.alpha * out.parts.kl + cfg.beta * out.parts.mse;
  return out;
}

StageResult train_stage(const SetrParams* teacher, const SegmentSpec& teacher_spec,
                        const SegmentSpec& student_spec, const StageDataset& data,
                        const SetrConfig& model_cfg, const DistillConfig& cfg, uint64_t seed) {
  student_spec.validate();
  cfg.validate();
  model_cfg.validate();
  if (teacher) {
    teacher_spec.validate();
    if (teacher_spec.level <= student_spec.level) {
      throw std::invalid_argument("train_stage: teacher level " +
                                  std::to_string(teacher_spec.level) +
                                  " must exceed student level " +
                                  std::to_string(student_spec.level));
    }
  }
  if (data.train.empty()) throw std::invalid_argument("train_stage: empty training set");

  const std::string stage_tag = "level " + std::to_string(student_spec.level);

  Rng init_rng(mix_seed(seed, {static_cast<uint64_t>(student_spec.level), kInitStream}));
  SetrParams student =
      (cfg.warm_start && teacher) ? *teacher : SetrParams::init(model_cfg, init_rng);

  std::vector<PreparedSample> train_set =
      prepare(data.train, teacher, teacher_spec, student_spec, model_cfg);
  std::vector<PreparedSample> val_set =
      prepare(data.val, teacher, teacher_spec, student_spec, model_cfg);

  std::vector<Mat*> param_ptrs;
  for (auto& [name, mat] : student.named_arrays()) param_ptrs.push_back(mat);
  OptState opt = OptState::create(param_ptrs, cfg.lr, cfg.weight_decay);

  Rng train_rng(mix_seed(seed, {static_cast<uint64_t>(student_spec.level), kTrainStream}));

  // A stage smaller than one batch is padded by repetition.
  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  const size_t effective = std::max(order.size(), static_cast<size_t>(cfg.batch_size));

  StageResult result;
  result.spec = student_spec;
  double best_val = std::numeric_limits<double>::infinity();
  bool have_best = false;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order, train_rng);

    double ce_sum = 0.0, kl_sum = 0.0, mse_sum = 0.0;
    int batches = 0;
    long correct = 0, seen = 0;

    auto run_batch = [&](size_t start, size_t count) {
      Tape tape;
      BoundParams bound = bind(tape, student);
      Value batch_total{};
      double batch_ce = 0.0, batch_kl = 0.0, batch_mse = 0.0;
      bool first = true;
      for (size_t b = 0; b < count; ++b) {
        const PreparedSample& ps = train_set[order[(start + b) % order.size()]];
        Value tokens = tokenize(tape, ps.student_features, bound, model_cfg);
        SetrOutput out = setr_forward(tokens, bound, model_cfg, RunMode::kTrain, &train_rng);
        Value sample_loss{};
        if (teacher) {
          KdLossValues kd = kd_losses(*ps.teacher_out, out, ps.record->label, cfg);
          if (kd.parts.kl < -1e-12) {
            throw std::runtime_error("negative KL " + fmt_double(kd.parts.kl));
          }
          batch_ce += kd.parts.ce;
          batch_kl += kd.parts.kl;
          batch_mse += kd.parts.mse;
          sample_loss = kd.total;
        } else {
          sample_loss = cross_entropy(out.logits, ps.record->label, cfg.class_weights);
          batch_ce += sample_loss.data()(0, 0);
        }
        if (predict(out.logits.data()) == ps.record->label) ++correct;
        ++seen;
        batch_total = first ? sample_loss : add(batch_total, sample_loss);
        first = false;
      }
      Value batch_loss = scale(batch_total, 1.0 / static_cast<double>(count));
      const double loss_val = batch_loss.data()(0, 0);
      if (!std::isfinite(loss_val)) {
        throw std::runtime_error("non-finite loss " + fmt_double(loss_val));
      }
      tape.backward(batch_loss);
      std::vector<Mat> grads = collect_grads(bound);
      std::vector<const Mat*> grad_ptrs;
      grad_ptrs.reserve(grads.size());
      for (const Mat& g : grads) grad_ptrs.push_back(&g);
      adamw_step(param_ptrs, grad_ptrs, opt);

      ce_sum += batch_ce / static_cast<double>(count);
      kl_sum += batch_kl / static_cast<double>(count);
      mse_sum += batch_mse / static_cast<double>(count);
      ++batches;
    };

    for (size_t start = 0; start < effective; start += static_cast<size_t>(cfg.batch_size)) {
      const size_t count = std::min(static_cast<size_t>(cfg.batch_size), effective - start);
      try {
        run_batch(start, count);
      } catch (const std::exception& e) {
        throw std::runtime_error("train_stage: aborted at " + stage_tag + ", epoch " +
                                 std::to_string(epoch) + ", batch " + std::to_string(batches) +
                                 ": " + e.what());
      }
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss.ce = ce_sum / batches;
    stats.train_loss.kl = kl_sum / batches;
    stats.train_loss.mse = mse_sum / batches;
    stats.train_loss.total =
        stats.train_loss.ce + cfg.alpha * stats.train_loss.kl + cfg.beta * stats.train_loss.mse;
    stats.train_accuracy = seen > 0 ? static_cast<double>(correct) / seen : 0.0;

    if (!val_set.empty()) {
      stats.has_val = true;
      double val_ce = 0.0, val_kl = 0.0, val_mse = 0.0;
      long val_correct = 0;
      for (const PreparedSample& ps : val_set) {
        Tape tape;
        BoundParams bound = bind(tape, student);
        Value tokens = tokenize(tape, ps.student_features, bound, model_cfg);
        SetrOutput out = setr_forward(tokens, bound, model_cfg, RunMode::kEval);
        if (teacher) {
          const LossBreakdown parts = kd_losses(*ps.teacher_out, out, ps.record->label, cfg).parts;
          val_ce += parts.ce;
          val_kl += parts.kl;
          val_mse += parts.mse;
        } else {
          val_ce += cross_entropy(out.logits, ps.record->label, cfg.class_weights).data()(0, 0);
        }
        if (predict(out.logits.data()) == ps.record->label) ++val_correct;
      }
      const double n_val = static_cast<double>(val_set.size());
      stats.val_loss.ce = val_ce / n_val;
      stats.val_loss.kl = val_kl / n_val;
      stats.val_loss.mse = val_mse / n_val;
      stats.val_loss.total =
          stats.val_loss.ce + cfg.alpha * stats.val_loss.kl + cfg.beta * stats.val_loss.mse;
      stats.val_accuracy = static_cast<double>(val_correct) / n_val;
      if (!have_best || stats.val_loss.total < best_val) {
        best_val = stats.val_loss.total;
        result.params = student;
        result.best_epoch = epoch;
        have_best = true;
      }
    }
    result.log.push_back(stats);
  }

  if (!have_best) {
    result.params = student;
    result.best_epoch = cfg.epochs;
  }
  return result;
}

std::vector<StageResult> run_pkd_chain(const StageDataset& data, int k,
                                       const SetrConfig& model_cfg, const DistillConfig& cfg,
                                       uint64_t seed,
                                       const std::function<void(const StageResult&)>& on_stage) {
  if (k < 1) throw std::invalid_argument("run_pkd_chain: k must be >= 1");
  std::vector<StageResult> results;
  results.reserve(static_cast<size_t>(k));
  for (int level = k - 1; level >= 0; --level) {
    const SegmentSpec student_spec{k, level};
    if (level == k - 1) {
      results.push_back(train_stage(nullptr, SegmentSpec{k, k - 1}, student_spec, data, model_cfg,
                                    cfg, seed));
    } else {
      const SegmentSpec teacher_spec{k, level + 1};
      results.push_back(train_stage(&results.back().params, teacher_spec, student_spec, data,
                                    model_cfg, cfg, seed));
    }
    if (on_stage) on_stage(results.back());
  }
  return results;
}

DirectKdResult run_direct_kd(const StageDataset& data, int k, int target_level,
                             const SetrConfig& model_cfg, const DistillConfig& cfg, uint64_t seed,
                             const SetrParams* pretrained_teacher) {
  if (target_level < 0 || target_level >= k - 1) {
    throw std::invalid_argument("run_direct_kd: target level " + std::to_string(target_level) +
                                " must be in [0, k-1)");
  }
  DirectKdResult out;
  const SegmentSpec teacher_spec{k, k - 1};
  if (pretrained_teacher) {
    out.teacher.params = *pretrained_teacher;
    out.teacher.spec = teacher_spec;
  } else {
    out.teacher = train_stage(nullptr, teacher_spec, teacher_spec, data, model_cfg, cfg, seed);
  }
  out.student = train_stage(&out.teacher.params, teacher_spec, SegmentSpec{k, target_level}, data,
                            model_cfg, cfg, seed);
  return out;
}

void write_stage_log(const std::string& path, const std::string& stage_name,
                     const std::vector<EpochStats>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("write_stage_log: cannot open " + path);
  out << "stage,epoch,ce,kl,mse,total,val-accuracy\n";
  for (const EpochStats& e : log) {
    out << stage_name << ',' << e.epoch << ',' << fmt_double(e.train_loss.ce) << ','
        << fmt_double(e.train_loss.kl) << ',' << fmt_double(e.train_loss.mse) << ','
        << fmt_double(e.train_loss.total) << ','
        << fmt_double(e.has_val ? e.val_accuracy : std::nan("")) << "\n";
  }
}

}  // namespace setr

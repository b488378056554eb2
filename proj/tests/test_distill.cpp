#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "setr/distill.hpp"
#include "setr/harness.hpp"

#include <cmath>
#include <fstream>

using namespace setr;

namespace {

SetrConfig tiny_model() {
  SetrConfig cfg;
  cfg.tokens = 8;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.dropout = 0.1;
  return cfg;
}

DistillConfig quick_distill(int epochs) {
  DistillConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 8;
  return cfg;
}

SyntheticSpec quick_data(uint64_t seed, double noise) {
  SyntheticSpec spec;
  spec.patients = 12;
  spec.samples_per_patient = 2;
  spec.frames_min = 24;
  spec.frames_max = 40;
  spec.noise = noise;
  spec.seed = seed;
  return spec;
}

StageDataset as_stage_dataset(const std::vector<SampleRecord>& records, size_t val_count) {
  StageDataset data;
  for (size_t i = 0; i < records.size(); ++i) {
    (i < records.size() - val_count ? data.train : data.val).push_back(&records[i]);
  }
  return data;
}

SampleRecord make_record(Index frames, double duration) {
  SampleRecord rec;
  rec.sample_id = "s";
  rec.patient_id = "p";
  rec.label = 0;
  rec.duration_s = duration;
  rec.features = Mat::Zero(frames, kFeatureDim);
  for (Index r = 0; r < frames; ++r) rec.features(r, 0) = static_cast<double>(r);
  return rec;
}

DetachedOutput fake_teacher_output(const Mat& logits, const Mat& patches) {
  return DetachedOutput{logits, Mat::Zero(1, patches.cols()), patches};
}

// Student output built directly from leaves, for loss-only tests.
SetrOutput fake_student_output(Tape& tape, const Mat& logits, const Mat& patches) {
  SetrOutput out;
  out.logits = tape.leaf(logits);
  out.patch_tokens = tape.leaf(patches);
  out.class_token = tape.leaf(Mat::Zero(1, patches.cols()));
  return out;
}

}  // namespace

TEST_CASE("prefix durations follow the segment formula exactly") {
  SampleRecord rec = make_record(100, 114.0);
  const std::vector<double> expected{28.5, 57.0, 85.5, 114.0};
  for (int j = 0; j < 4; ++j) {
    const SampleRecord prefix = split_prefix(rec, SegmentSpec{4, j});
    CHECK(prefix.duration_s == expected[static_cast<size_t>(j)]);
  }
}

TEST_CASE("full-sample level returns the record unchanged") {
  SampleRecord rec = make_record(37, 52.0);
  const SampleRecord same = split_prefix(rec, SegmentSpec{8, 7});
  CHECK(same.frame_count() == 37);
  CHECK(same.duration_s == 52.0);
  CHECK(same.features == rec.features);
}

TEST_CASE("prefix frame counts round half up") {
  SampleRecord rec = make_record(100, 10.0);
  CHECK(split_prefix(rec, SegmentSpec{8, 2}).frame_count() == 38);  // round(3/8 * 100)
}

TEST_CASE("prefixes are nested for k in {4, 8, 16}") {
  Rng rng(1);
  for (int k : {4, 8, 16}) {
    for (int trial = 0; trial < 40; ++trial) {
      const Index frames = rng.uniform_int(k, 300);
      Index prev = 0;
      for (int j = 0; j < k; ++j) {
        const Index count = prefix_frame_count(frames, SegmentSpec{k, j});
        CHECK(count >= prev);
        CHECK(count >= 1);
        CHECK(count <= frames);
        prev = count;
      }
      CHECK(prev == frames);  // level k-1 keeps everything
    }
  }
}

TEST_CASE("records with fewer than k frames are rejected") {
  SampleRecord rec = make_record(6, 10.0);
  CHECK_THROWS_AS(split_prefix(rec, SegmentSpec{8, 3}), std::invalid_argument);
}

TEST_CASE("segment spec validation") {
  CHECK_THROWS_AS((SegmentSpec{4, 4}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((SegmentSpec{4, -1}.validate()), std::invalid_argument);
  CHECK_NOTHROW((SegmentSpec{4, 3}.validate()));
  CHECK(SegmentSpec{8, 1}.fraction() == 0.25);
}

TEST_CASE("identical teacher and student give zero KL and MSE") {
  Rng rng(2);
  Mat logits(1, 2);
  logits << 0.8, -0.4;
  Mat patches(8, 16);
  for (Index i = 0; i < patches.size(); ++i) patches.data()[i] = rng.uniform(-1, 1);

  Tape tape;
  const SetrOutput student = fake_student_output(tape, logits, patches);
  const DetachedOutput teacher = fake_teacher_output(logits, patches);
  DistillConfig cfg;
  const KdLossValues kd = kd_losses(teacher, student, 0, cfg);
  CHECK(std::abs(kd.parts.kl) <= 1e-12);
  CHECK(kd.parts.mse == 0.0);
  CHECK(kd.parts.total == kd.parts.ce);
}

TEST_CASE("KL matches the hand-computed value at tau 1") {
  // teacher [0.75, 0.25], student [0.5, 0.5]:
  // KL = 0.75 ln 1.5 + 0.25 ln 0.5 = 0.13081...
  Mat t_logits(1, 2);
  t_logits << std::log(0.75), std::log(0.25);
  Mat s_logits(1, 2);
  s_logits << 0.0, 0.0;
  Tape tape;
  const SetrOutput student = fake_student_output(tape, s_logits, Mat::Zero(4, 8));
  const DetachedOutput teacher = fake_teacher_output(t_logits, Mat::Zero(4, 8));
  DistillConfig cfg;
  cfg.tau = 1.0;
  const KdLossValues kd = kd_losses(teacher, student, 0, cfg);
  const double expected = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  CHECK(kd.parts.kl == doctest::Approx(expected).epsilon(1e-9));
  CHECK(kd.parts.kl == doctest::Approx(0.13081).epsilon(1e-4));
}

TEST_CASE("zero weights reduce the total to cross entropy exactly") {
  Rng rng(3);
  Mat t_logits(1, 2), s_logits(1, 2);
  t_logits << rng.uniform(-1, 1), rng.uniform(-1, 1);
  s_logits << rng.uniform(-1, 1), rng.uniform(-1, 1);
  Tape tape;
  const SetrOutput student = fake_student_output(tape, s_logits, Mat::Ones(4, 8));
  const DetachedOutput teacher = fake_teacher_output(t_logits, Mat::Zero(4, 8));
  DistillConfig cfg;
  cfg.alpha = 0.0;
  cfg.beta = 0.0;
  const KdLossValues kd = kd_losses(teacher, student, 1, cfg);
  CHECK(kd.parts.total == kd.parts.ce);
  Tape t2;
  CHECK(kd.parts.ce == cross_entropy(t2.leaf(s_logits), 1).data()(0, 0));
}

TEST_CASE("the loss identity holds exactly and KL is nonnegative") {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    Mat t_logits(1, 2), s_logits(1, 2);
    for (Index i = 0; i < 2; ++i) {
      t_logits(0, i) = rng.uniform(-5, 5);
      s_logits(0, i) = rng.uniform(-5, 5);
    }
    Mat t_patches(4, 8), s_patches(4, 8);
    for (Index i = 0; i < t_patches.size(); ++i) {
      t_patches.data()[i] = rng.uniform(-2, 2);
      s_patches.data()[i] = rng.uniform(-2, 2);
    }
    Tape tape;
    const SetrOutput student = fake_student_output(tape, s_logits, s_patches);
    const DetachedOutput teacher = fake_teacher_output(t_logits, t_patches);
    DistillConfig cfg;
    cfg.tau = trial % 2 == 0 ? 10.0 : 1.0;
    const KdLossValues kd = kd_losses(teacher, student, trial % 2, cfg);
    CHECK(kd.parts.kl >= -1e-12);
    CHECK(kd.parts.total == kd.parts.ce + cfg.alpha * kd.parts.kl + cfg.beta * kd.parts.mse);
    CHECK(kd.total.data()(0, 0) == doctest::Approx(kd.parts.total).epsilon(1e-12));
  }
}

TEST_CASE("MSE averages squared distance over patch tokens") {
  Mat t_patches = Mat::Zero(4, 8);
  Mat s_patches = Mat::Ones(4, 8);
  Tape tape;
  const SetrOutput student = fake_student_output(tape, Mat::Zero(1, 2), s_patches);
  const DetachedOutput teacher = fake_teacher_output(Mat::Zero(1, 2), t_patches);
  DistillConfig cfg;
  const KdLossValues kd = kd_losses(teacher, student, 0, cfg);
  // each of 4 tokens differs by a vector of 8 ones: ||.||^2 = 8, mean = 8
  CHECK(kd.parts.mse == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("shape mismatches are rejected") {
  Tape tape;
  const SetrOutput student = fake_student_output(tape, Mat::Zero(1, 2), Mat::Zero(4, 8));
  DistillConfig cfg;
  CHECK_THROWS_AS(kd_losses(fake_teacher_output(Mat::Zero(1, 3), Mat::Zero(4, 8)), student, 0, cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS(kd_losses(fake_teacher_output(Mat::Zero(1, 2), Mat::Zero(5, 8)), student, 0, cfg),
                  std::invalid_argument);
}

TEST_CASE("lr zero training changes nothing and still logs every epoch") {
  const std::vector<SampleRecord> records = generate_synthetic_dataset(quick_data(5, 0.05));
  const StageDataset data = as_stage_dataset(records, 4);
  const SetrConfig model_cfg = tiny_model();
  DistillConfig cfg = quick_distill(3);
  cfg.lr = 0.0;

  Rng init_check(mix_seed(77, {0, 1}));  // level 0 init stream
  const StageResult result = train_stage(nullptr, SegmentSpec{4, 0}, SegmentSpec{4, 0}, data,
                                         model_cfg, cfg, 77);
  CHECK(result.log.size() == 3);
  const SetrParams fresh = SetrParams::init(model_cfg, init_check);
  const auto got = result.params.named_arrays();
  const auto want = fresh.named_arrays();
  for (size_t i = 0; i < got.size(); ++i) {
    CHECK(*got[i].second == *want[i].second);
  }
}

TEST_CASE("teachers train to full accuracy on separable data") {
  SyntheticSpec spec = quick_data(6, 0.0);
  spec.drift_amp_min = 0.6;  // fixed drift; only the burst separates classes
  spec.drift_amp_max = 0.6;
  spec.normal_burst_min = 0.0;
  spec.normal_burst_max = 0.05;
  spec.tcs_burst_min = 1.5;
  spec.tcs_burst_max = 2.0;
  const std::vector<SampleRecord> records = generate_synthetic_dataset(spec);

  // margin check: mean feature magnitude separates classes before training
  double max_normal = 0.0, min_tcs = 1e9;
  for (const SampleRecord& rec : records) {
    const double mean_mag = rec.features.rowwise().norm().mean();
    if (rec.label == 0) max_normal = std::max(max_normal, mean_mag);
    if (rec.label == 1) min_tcs = std::min(min_tcs, mean_mag);
  }
  CHECK(max_normal < min_tcs);

  const StageDataset data = as_stage_dataset(records, 0);
  const StageResult result = train_stage(nullptr, SegmentSpec{4, 3}, SegmentSpec{4, 3}, data,
                                         tiny_model(), quick_distill(50), 3);
  double best_acc = 0.0;
  for (const EpochStats& e : result.log) best_acc = std::max(best_acc, e.train_accuracy);
  CHECK(best_acc == 1.0);
}

TEST_CASE("teacher parameters are bitwise unchanged by a student stage") {
  const std::vector<SampleRecord> records = generate_synthetic_dataset(quick_data(7, 0.05));
  const StageDataset data = as_stage_dataset(records, 4);
  const SetrConfig model_cfg = tiny_model();
  const DistillConfig cfg = quick_distill(2);

  const StageResult teacher = train_stage(nullptr, SegmentSpec{4, 3}, SegmentSpec{4, 3}, data,
                                          model_cfg, cfg, 11);
  std::vector<Mat> snapshot;
  for (const auto& [name, mat] : teacher.params.named_arrays()) snapshot.push_back(*mat);

  const StageResult student = train_stage(&teacher.params, SegmentSpec{4, 3}, SegmentSpec{4, 2},
                                          data, model_cfg, cfg, 11);
  const auto after = teacher.params.named_arrays();
  for (size_t i = 0; i < after.size(); ++i) {
    CHECK(*after[i].second == snapshot[i]);
  }
  CHECK(student.log.size() == 2);
}

TEST_CASE("teacher level must exceed student level") {
  const std::vector<SampleRecord> records = generate_synthetic_dataset(quick_data(8, 0.05));
  const StageDataset data = as_stage_dataset(records, 0);
  Rng rng(1);
  const SetrParams teacher = SetrParams::init(tiny_model(), rng);
  CHECK_THROWS_AS(train_stage(&teacher, SegmentSpec{4, 1}, SegmentSpec{4, 1}, data, tiny_model(),
                              quick_distill(1), 1),
                  std::invalid_argument);
}

TEST_CASE("non-finite inputs abort the stage with stage diagnostics") {
  std::vector<SampleRecord> records = generate_synthetic_dataset(quick_data(9, 0.05));
  records[0].features(0, 0) = std::numeric_limits<double>::infinity();
  const StageDataset data = as_stage_dataset(records, 0);
  try {
    train_stage(nullptr, SegmentSpec{4, 3}, SegmentSpec{4, 3}, data, tiny_model(),
                quick_distill(1), 13);
    FAIL("expected an abort");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("level 3") != std::string::npos);
    CHECK(msg.find("epoch 1") != std::string::npos);
  }
}

TEST_CASE("pkd chain produces k models from full sample down to level zero") {
  const std::vector<SampleRecord> records = generate_synthetic_dataset(quick_data(10, 0.05));
  const StageDataset data = as_stage_dataset(records, 4);
  const std::vector<StageResult> chain =
      run_pkd_chain(data, 4, tiny_model(), quick_distill(2), 17);
  REQUIRE(chain.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(chain[static_cast<size_t>(i)].spec.level == 3 - i);
    CHECK(chain[static_cast<size_t>(i)].spec.k == 4);
  }
}

TEST_CASE("k equal to one degenerates to plain supervised training") {
  const std::vector<SampleRecord> records = generate_synthetic_dataset(quick_data(11, 0.05));
  const StageDataset data = as_stage_dataset(records, 0);
  const std::vector<StageResult> chain =
      run_pkd_chain(data, 1, tiny_model(), quick_distill(2), 19);
  REQUIRE(chain.size() == 1);
  CHECK(chain[0].spec.level == 0);
  // a plain stage logs zero KL and MSE
  for (const EpochStats& e : chain[0].log) {
    CHECK(e.train_loss.kl == 0.0);
    CHECK(e.train_loss.mse == 0.0);
  }
}

TEST_CASE("validation KL starts finite and decreases over training") {
  for (uint64_t seed : {101ull, 102ull, 103ull}) {
    SyntheticSpec spec = quick_data(seed, 0.05);
    spec.patients = 16;
    const std::vector<SampleRecord> records = generate_synthetic_dataset(spec);
    const StageDataset data = as_stage_dataset(records, 8);
    DistillConfig cfg = quick_distill(10);
    const std::vector<StageResult> chain = run_pkd_chain(data, 4, tiny_model(), cfg, seed);
    for (size_t s = 1; s < chain.size(); ++s) {  // stages with a teacher
      const auto& log = chain[s].log;
      REQUIRE(!log.empty());
      CHECK(std::isfinite(log.front().val_loss.kl));
      double best_kl = 1e300;
      for (const EpochStats& e : log) best_kl = std::min(best_kl, e.val_loss.kl);
      CHECK(best_kl < log.front().val_loss.kl);
    }
  }
}

TEST_CASE("direct distillation to level k-2 equals the first pkd hop bitwise") {
  const std::vector<SampleRecord> records = generate_synthetic_dataset(quick_data(12, 0.05));
  const StageDataset data = as_stage_dataset(records, 4);
  const SetrConfig model_cfg = tiny_model();
  const DistillConfig cfg = quick_distill(2);
  const uint64_t seed = 23;

  const std::vector<StageResult> chain = run_pkd_chain(data, 4, model_cfg, cfg, seed);
  const DirectKdResult direct = run_direct_kd(data, 4, 2, model_cfg, cfg, seed);

  const auto a = chain[1].params.named_arrays();  // level 2 via pkd
  const auto b = direct.student.params.named_arrays();
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(*a[i].second == *b[i].second);
  }
  // and both teachers are the same model
  const auto ta = chain[0].params.named_arrays();
  const auto tb = direct.teacher.params.named_arrays();
  for (size_t i = 0; i < ta.size(); ++i) {
    CHECK(*ta[i].second == *tb[i].second);
  }
}

TEST_CASE("direct distillation rejects the top level as a target") {
  const std::vector<SampleRecord> records = generate_synthetic_dataset(quick_data(13, 0.05));
  const StageDataset data = as_stage_dataset(records, 0);
  CHECK_THROWS_AS(run_direct_kd(data, 4, 3, tiny_model(), quick_distill(1), 1),
                  std::invalid_argument);
}

TEST_CASE("warm start copies the teacher weights as the student init") {
  const std::vector<SampleRecord> records = generate_synthetic_dataset(quick_data(14, 0.05));
  const StageDataset data = as_stage_dataset(records, 0);
  const SetrConfig model_cfg = tiny_model();
  DistillConfig cfg = quick_distill(1);
  cfg.lr = 0.0;
  cfg.warm_start = true;

  const StageResult teacher = train_stage(nullptr, SegmentSpec{4, 3}, SegmentSpec{4, 3}, data,
                                          model_cfg, cfg, 29);
  const StageResult student = train_stage(&teacher.params, SegmentSpec{4, 3}, SegmentSpec{4, 1},
                                          data, model_cfg, cfg, 29);
  const auto a = teacher.params.named_arrays();
  const auto b = student.params.named_arrays();
  for (size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
}

TEST_CASE("stage log files carry the documented columns") {
  const std::vector<SampleRecord> records = generate_synthetic_dataset(quick_data(15, 0.05));
  const StageDataset data = as_stage_dataset(records, 4);
  const StageResult result = train_stage(nullptr, SegmentSpec{4, 3}, SegmentSpec{4, 3}, data,
                                         tiny_model(), quick_distill(2), 31);
  const std::string path = "/tmp/setr_stage_log_test.csv";
  write_stage_log(path, "stage3", result.log);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "stage,epoch,ce,kl,mse,total,val-accuracy");
  int lines = 0;
  std::string line;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 2);
}

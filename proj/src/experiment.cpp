#include "setr/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace setr {

namespace {

enum StreamTag : uint64_t { kValStream = 31 };

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: " + key + " must be true or false, got " + v);
}

std::vector<double> parse_double_list(const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

std::vector<uint64_t> parse_u64_list(const std::string& v) {
  std::vector<uint64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(std::stoull(item));
  }
  return out;
}

struct TaskOutput {
  std::vector<MetricRow> rows;
  std::vector<std::string> failures;
};

struct SplitSets {
  std::vector<const SampleRecord*> train;
  std::vector<const SampleRecord*> val;
  std::vector<const SampleRecord*> test;
  std::set<std::string> train_patients, val_patients, test_patients;
};

SplitSets make_split(const std::vector<SampleRecord>& dataset, const FoldPlan& plan, int fold,
                     double val_fraction, uint64_t seed) {
  SplitSets split;
  std::vector<std::string> train_patients;
  for (const auto& [patient, f] : plan.fold_of_patient) {
    if (f == fold) {
      split.test_patients.insert(patient);
    } else {
      train_patients.push_back(patient);
    }
  }
  Rng rng(mix_seed(seed, {static_cast<uint64_t>(fold), kValStream}));
  shuffle(train_patients, rng);
  const size_t val_count =
      std::min(train_patients.size() > 1 ? train_patients.size() - 1 : size_t{0},
               static_cast<size_t>(std::lround(val_fraction * static_cast<double>(train_patients.size()))));
  for (size_t i = 0; i < train_patients.size(); ++i) {
    (i < val_count ? split.val_patients : split.train_patients).insert(train_patients[i]);
  }
  for (const SampleRecord& rec : dataset) {
    if (split.test_patients.count(rec.patient_id)) {
      split.test.push_back(&rec);
    } else if (split.val_patients.count(rec.patient_id)) {
      split.val.push_back(&rec);
    } else {
      split.train.push_back(&rec);
    }
  }
  // Patient-level isolation is the whole point of the split; fail loudly if
  // any id ended up on both sides.
  for (const SampleRecord* rec : split.test) {
    if (split.train_patients.count(rec->patient_id) || split.val_patients.count(rec->patient_id)) {
      throw std::runtime_error("split: patient " + rec->patient_id + " leaks into training");
    }
  }
  return split;
}

void write_split_file(const std::string& path, const SplitSets& split) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path);
  out << "patient,role\n";
  for (const auto& p : split.train_patients) out << p << ",train\n";
  for (const auto& p : split.val_patients) out << p << ",val\n";
  for (const auto& p : split.test_patients) out << p << ",test\n";
}

void save_stage(const std::string& dir, const std::string& stage_name, const StageResult& stage,
                const SetrConfig& model_cfg, int k) {
  fs::create_directories(dir);
  const std::string ckpt = stage_name + ".ckpt";
  stage.params.save((fs::path(dir) / ckpt).string());
  save_manifest((fs::path(dir) / (stage_name + ".manifest")).string(), model_cfg, ckpt,
                stage.spec.level, k);
  if (!stage.log.empty()) {
    write_stage_log((fs::path(dir) / (stage_name + "_log.csv")).string(), stage_name, stage.log);
  }
}

// One (seed, fold, arm) unit of work.
TaskOutput run_arm_task(const ExperimentConfig& cfg, const std::vector<SampleRecord>& dataset,
                        const std::string& arm, uint64_t seed, int fold,
                        const std::string& out_dir) {
  TaskOutput out;
  const FoldPlan plan = kfold_split(dataset, cfg.folds, cfg.stratified, seed);
  const SplitSets split = make_split(dataset, plan, fold, cfg.val_fraction, seed);

  const std::string task_dir =
      (fs::path(out_dir) / arm / ("seed" + std::to_string(seed)) / ("fold" + std::to_string(fold)))
          .string();
  fs::create_directories(task_dir);
  write_split_file((fs::path(task_dir) / "split.csv").string(), split);

  StageDataset stage_data{split.train, split.val};

  std::vector<int> levels;
  for (double f : cfg.fractions) levels.push_back(fraction_to_level(f, cfg.k));

  // level -> trained model for that fraction
  std::map<int, const SetrParams*> model_at_level;
  std::vector<StageResult> chain;        // pkd
  StageResult plain_stage;               // plain
  StageResult direct_teacher;            // direct
  std::vector<StageResult> direct_students;

  if (arm == "plain") {
    plain_stage = train_stage(nullptr, SegmentSpec{cfg.k, cfg.k - 1}, SegmentSpec{cfg.k, cfg.k - 1},
                              stage_data, cfg.model, cfg.distill, seed);
    save_stage(task_dir, "stage" + std::to_string(cfg.k - 1), plain_stage, cfg.model, cfg.k);
    for (int level : levels) model_at_level[level] = &plain_stage.params;
  } else if (arm == "pkd") {
    chain = run_pkd_chain(stage_data, cfg.k, cfg.model, cfg.distill, seed);
    for (const StageResult& stage : chain) {
      save_stage(task_dir, "stage" + std::to_string(stage.spec.level), stage, cfg.model, cfg.k);
      model_at_level[stage.spec.level] = &stage.params;
    }
  } else if (arm == "direct") {
    direct_teacher = train_stage(nullptr, SegmentSpec{cfg.k, cfg.k - 1},
                                 SegmentSpec{cfg.k, cfg.k - 1}, stage_data, cfg.model, cfg.distill,
                                 seed);
    save_stage(task_dir, "stage" + std::to_string(cfg.k - 1), direct_teacher, cfg.model, cfg.k);
    model_at_level[cfg.k - 1] = &direct_teacher.params;
    std::set<int> target_levels(levels.begin(), levels.end());
    target_levels.erase(cfg.k - 1);
    direct_students.reserve(target_levels.size());
    for (int level : target_levels) {
      DirectKdResult res = run_direct_kd(stage_data, cfg.k, level, cfg.model, cfg.distill, seed,
                                         &direct_teacher.params);
      direct_students.push_back(std::move(res.student));
      save_stage(task_dir, "stage" + std::to_string(level), direct_students.back(), cfg.model,
                 cfg.k);
      model_at_level[level] = &direct_students.back().params;
    }
  } else {
    throw ConfigError("unknown arm: " + arm);
  }

  // Each fraction is scored by the arm's model for that prefix level.
  for (double fraction : cfg.fractions) {
    const int level = fraction_to_level(fraction, cfg.k);
    const SetrParams* model = model_at_level.at(level);
    const std::vector<FractionMetrics> fm = evaluate(*model, split.test, {fraction}, cfg.k);
    MetricRow row;
    row.arm = arm;
    row.seed = seed;
    row.fold = fold;
    row.fraction = fraction;
    row.metrics = fm.front().metrics;
    out.rows.push_back(row);
  }
  return out;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path);
  out << "arm,seed,fold,fraction,precision,recall,f1,accuracy,tp,fp,fn,tn\n";
  for (const MetricRow& r : rows) {
    out << r.arm << ',' << r.seed << ',' << r.fold << ',' << fmt_double(r.fraction) << ','
        << fmt_double(r.metrics.precision) << ',' << fmt_double(r.metrics.recall) << ','
        << fmt_double(r.metrics.f1) << ',' << fmt_double(r.metrics.accuracy) << ','
        << r.metrics.tp << ',' << r.metrics.fp << ',' << r.metrics.fn << ',' << r.metrics.tn
        << "\n";
  }
}

struct Agg {
  std::vector<double> precision, recall, f1, accuracy;
};

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

// Fold means and stds per (arm, seed, fraction); std is an extension over
// the plain fold mean and is labeled as such by its column name.
void write_summary_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::map<std::tuple<std::string, uint64_t, double>, Agg> groups;
  for (const MetricRow& r : rows) {
    Agg& a = groups[{r.arm, r.seed, r.fraction}];
    a.precision.push_back(r.metrics.precision);
    a.recall.push_back(r.metrics.recall);
    a.f1.push_back(r.metrics.f1);
    a.accuracy.push_back(r.metrics.accuracy);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path);
  out << "arm,seed,fraction,folds,precision_mean,precision_std,recall_mean,recall_std,"
         "f1_mean,f1_std,accuracy_mean,accuracy_std\n";
  for (const auto& [key, a] : groups) {
    out << std::get<0>(key) << ',' << std::get<1>(key) << ',' << fmt_double(std::get<2>(key))
        << ',' << a.precision.size() << ',' << fmt_double(mean_of(a.precision)) << ','
        << fmt_double(std_of(a.precision)) << ',' << fmt_double(mean_of(a.recall)) << ','
        << fmt_double(std_of(a.recall)) << ',' << fmt_double(mean_of(a.f1)) << ','
        << fmt_double(std_of(a.f1)) << ',' << fmt_double(mean_of(a.accuracy)) << ','
        << fmt_double(std_of(a.accuracy)) << "\n";
  }
}

void write_plot_files(const std::string& out_dir, const std::vector<MetricRow>& rows) {
  std::map<std::string, std::map<double, std::vector<double>>> per_arm;
  for (const MetricRow& r : rows) per_arm[r.arm][r.fraction].push_back(r.metrics.accuracy);
  for (const auto& [arm, by_fraction] : per_arm) {
    std::ofstream out((fs::path(out_dir) / ("plot_" + arm + ".csv")).string(), std::ios::trunc);
    if (!out) throw FormatError("cannot open plot file for arm " + arm);
    out << "fraction,accuracy\n";
    for (const auto& [fraction, accs] : by_fraction) {
      out << fmt_double(fraction) << ',' << fmt_double(mean_of(accs)) << "\n";
    }
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (mode != "pkd" && mode != "direct" && mode != "plain") {
    throw ConfigError("config: mode must be pkd, direct, or plain, got " + mode);
  }
  if (k < 1) throw ConfigError("config: k must be >= 1");
  if (folds < 1) throw ConfigError("config: folds must be >= 1");
  if (max_folds < 0) throw ConfigError("config: max-folds must be >= 0");
  if (val_fraction < 0.0 || val_fraction >= 1.0) {
    throw ConfigError("config: val-fraction must be in [0, 1)");
  }
  if (seeds.empty()) throw ConfigError("config: at least one seed required");
  if (fractions.empty()) throw ConfigError("config: at least one fraction required");
  for (double f : fractions) fraction_to_level(f, k);  // throws when unrepresentable
  model.validate();
  distill.validate();
  if (data == "synthetic") synth.validate();
}

ExperimentConfig parse_experiment_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::stringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    try {
      if (key == "mode") cfg.mode = val;
      else if (key == "data") cfg.data = val;
      else if (key == "k") cfg.k = std::stoi(val);
      else if (key == "fractions") cfg.fractions = parse_double_list(val);
      else if (key == "seeds") cfg.seeds = parse_u64_list(val);
      else if (key == "folds") cfg.folds = std::stoi(val);
      else if (key == "max-folds") cfg.max_folds = std::stoi(val);
      else if (key == "stratified") cfg.stratified = parse_bool(val, key);
      else if (key == "val-fraction") cfg.val_fraction = std::stod(val);
      else if (key == "tau") cfg.distill.tau = std::stod(val);
      else if (key == "alpha") cfg.distill.alpha = std::stod(val);
      else if (key == "beta") cfg.distill.beta = std::stod(val);
      else if (key == "epochs") cfg.distill.epochs = std::stoi(val);
      else if (key == "batch-size") cfg.distill.batch_size = std::stoi(val);
      else if (key == "lr") cfg.distill.lr = std::stod(val);
      else if (key == "weight-decay") cfg.distill.weight_decay = std::stod(val);
      else if (key == "warm-start") cfg.distill.warm_start = parse_bool(val, key);
      else if (key == "tokens") cfg.model.tokens = std::stoi(val);
      else if (key == "dim") cfg.model.dim = std::stoi(val);
      else if (key == "heads") cfg.model.heads = std::stoi(val);
      else if (key == "layers") cfg.model.layers = std::stoi(val);
      else if (key == "mlp-hidden") cfg.model.mlp_hidden = std::stoi(val);
      else if (key == "dropout") cfg.model.dropout = std::stod(val);
      else if (key == "classes") cfg.model.classes = std::stoi(val);
      else if (key == "unscaled-attention") cfg.model.unscaled_attention = parse_bool(val, key);
      else if (key == "patients") cfg.synth.patients = std::stoi(val);
      else if (key == "samples-per-patient") cfg.synth.samples_per_patient = std::stoi(val);
      else if (key == "frames-min") cfg.synth.frames_min = std::stoi(val);
      else if (key == "frames-max") cfg.synth.frames_max = std::stoi(val);
      else if (key == "fps") cfg.synth.fps = std::stod(val);
      else if (key == "noise") cfg.synth.noise = std::stod(val);
      else if (key == "drift-amp-min") cfg.synth.drift_amp_min = std::stod(val);
      else if (key == "drift-amp-max") cfg.synth.drift_amp_max = std::stod(val);
      else if (key == "normal-burst-min") cfg.synth.normal_burst_min = std::stod(val);
      else if (key == "normal-burst-max") cfg.synth.normal_burst_max = std::stod(val);
      else if (key == "tcs-burst-min") cfg.synth.tcs_burst_min = std::stod(val);
      else if (key == "tcs-burst-max") cfg.synth.tcs_burst_max = std::stod(val);
      else if (key == "burst-freq-min") cfg.synth.burst_freq_min = std::stod(val);
      else if (key == "burst-freq-max") cfg.synth.burst_freq_max = std::stod(val);
      else if (key == "ramp-power") cfg.synth.ramp_power = std::stod(val);
      else if (key == "burst-base") cfg.synth.burst_base = std::stod(val);
      else if (key == "burst-rotation-deg") cfg.synth.burst_rotation_deg = std::stod(val);
      else if (key == "data-seed") cfg.synth.seed = std::stoull(val);
      else if (key == "flow-mode") cfg.synth.flow_mode = parse_bool(val, key);
      else if (key == "flow-width") cfg.synth.flow_width = std::stoi(val);
      else if (key == "flow-height") cfg.synth.flow_height = std::stoi(val);
      else throw ConfigError("config line " + std::to_string(line_no) + ": unknown key " + key);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": bad value for " + key +
                        " (" + e.what() + ")");
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config_text(buf.str());
}

ExperimentResult run_experiment(const ExperimentConfig& config,
                                const std::vector<std::string>& arms, const std::string& out_dir,
                                int jobs) {
  config.validate();
  if (arms.empty()) throw ConfigError("run_experiment: no arms requested");
  if (jobs < 1) throw ConfigError("run_experiment: jobs must be >= 1");
  if (config.folds < 2) {
    throw ConfigError("run_experiment: evaluation needs >= 2 folds (got " +
                      std::to_string(config.folds) + ")");
  }
  fs::create_directories(out_dir);

  const std::vector<SampleRecord> dataset =
      config.data == "synthetic" ? generate_synthetic_dataset(config.synth)
                                 : load_dataset(config.data);

  const int folds_to_run =
      config.max_folds > 0 ? std::min(config.max_folds, config.folds) : config.folds;

  struct Task {
    std::string arm;
    uint64_t seed;
    int fold;
  };
  std::vector<Task> tasks;
  for (const std::string& arm : arms) {
    for (uint64_t seed : config.seeds) {
      for (int fold = 0; fold < folds_to_run; ++fold) tasks.push_back({arm, seed, fold});
    }
  }

  std::vector<TaskOutput> outputs(tasks.size());
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const Task& t = tasks[i];
      try {
        outputs[i] = run_arm_task(config, dataset, t.arm, t.seed, t.fold, out_dir);
      } catch (const std::exception& e) {
        outputs[i].failures.push_back(t.arm + "," + std::to_string(t.seed) + "," +
                                      std::to_string(t.fold) + ": " + e.what());
      }
    }
  };

  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    const size_t n = std::min(static_cast<size_t>(jobs), tasks.size());
    pool.reserve(n);
    for (size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }

  ExperimentResult result;
  for (TaskOutput& o : outputs) {
    result.rows.insert(result.rows.end(), o.rows.begin(), o.rows.end());
    result.failures.insert(result.failures.end(), o.failures.begin(), o.failures.end());
  }
  std::sort(result.rows.begin(), result.rows.end(), [](const MetricRow& a, const MetricRow& b) {
    return std::tie(a.arm, a.seed, a.fold, a.fraction) <
           std::tie(b.arm, b.seed, b.fold, b.fraction);
  });
  std::sort(result.failures.begin(), result.failures.end());

  write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(), result.rows);
  write_summary_csv((fs::path(out_dir) / "summary.csv").string(), result.rows);
  write_plot_files(out_dir, result.rows);
  if (!result.failures.empty()) {
    std::ofstream fail((fs::path(out_dir) / "failures.csv").string(), std::ios::trunc);
    fail << "arm,seed,fold,message\n";
    for (const std::string& f : result.failures) fail << f << "\n";
  }
  return result;
}

}  // namespace setr

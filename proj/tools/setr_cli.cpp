// Command-line front end for the pipeline: flow extraction, featurization,
// synthetic data generation, training, distillation, evaluation, and the
// full experiment report.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include "setr/experiment.hpp"
#include "setr/flow_io.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace setr;

namespace {

TvL1Params parse_flow_params(const std::string& path) {
  TvL1Params p;
  std::ifstream in(path);
  if (!in) throw ConfigError("flow params: cannot open " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("flow params line " + std::to_string(line_no));
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "lambda") p.lambda = std::stod(val);
    else if (key == "theta") p.theta = std::stod(val);
    else if (key == "tau") p.tau = std::stod(val);
    else if (key == "warps") p.warps_per_level = std::stoi(val);
    else if (key == "iterations") p.iterations_per_warp = std::stoi(val);
    else if (key == "levels") p.pyramid_levels = std::stoi(val);
    else if (key == "scale") p.pyramid_scale = std::stod(val);
    else if (key == "stop-epsilon") p.stop_epsilon = std::stod(val);
    else if (key == "median-filter") p.median_filter = (val == "true" || val == "1");
    else throw ConfigError("flow params: unknown key " + key);
  }
  p.validate();
  return p;
}

int cmd_extract_flow(const std::string& input, const std::string& output, double clip,
                     const std::string& params_path) {
  TvL1Params params;
  if (!params_path.empty()) params = parse_flow_params(params_path);
  const std::vector<Frame> frames =
      fs::is_directory(input) ? load_frame_dir(input) : load_video(input).frames;
  if (frames.size() < 2) throw std::runtime_error("extract-flow: need at least 2 frames");
  FlowFile flows;
  flows.clip = clip;
  flows.width = frames[0].width();
  flows.height = frames[0].height();
  flows.pairs.reserve(frames.size() - 1);
  for (size_t i = 0; i + 1 < frames.size(); ++i) {
    const FlowField f = tv_l1_flow(frames[i], frames[i + 1], params);
    flows.pairs.push_back(flow_to_export(f, clip));
  }
  save_flow_file(output, flows);
  std::cout << "wrote " << flows.pairs.size() << " flow pairs to " << output << "\n";
  return 0;
}

int cmd_featurize(const std::string& input, const std::string& output,
                  const std::string& sample_id, const std::string& patient_id, int label,
                  double duration) {
  const FlowFile flows = load_flow_file(input);
  if (flows.pairs.empty()) throw std::runtime_error("featurize: no flow pairs in " + input);
  std::vector<FlowField> fields;
  fields.reserve(flows.pairs.size());
  for (const QuantizedFlow& q : flows.pairs) fields.push_back(dequantize_flow(q));
  SampleRecord rec;
  rec.sample_id = sample_id;
  rec.patient_id = patient_id;
  rec.label = label;
  rec.duration_s = duration;
  rec.features = extract_spatial_features(fields);
  save_features(output, rec);
  std::cout << "wrote " << rec.frame_count() << " feature frames to " << output << "\n";
  return 0;
}

int cmd_gen_synthetic(const std::string& config_path, const std::string& out_dir,
                      uint64_t seed_override, bool has_seed) {
  SyntheticSpec spec;
  if (!config_path.empty()) spec = parse_experiment_config(config_path).synth;
  if (has_seed) spec.seed = seed_override;
  const std::vector<SyntheticSample> samples = generate_synthetic_samples(spec);
  fs::create_directories(out_dir);
  std::ofstream index((fs::path(out_dir) / "index.txt").string(), std::ios::trunc);
  for (const SyntheticSample& s : samples) {
    const std::string feat_name = s.record.sample_id + ".sfeat";
    save_features((fs::path(out_dir) / feat_name).string(), s.record);
    index << feat_name << "\n";
    if (!s.flows.empty()) {
      FlowFile ff;
      ff.clip = 16.0;
      ff.width = s.flows[0].width();
      ff.height = s.flows[0].height();
      for (const FlowField& f : s.flows) ff.pairs.push_back(flow_to_export(f, ff.clip));
      save_flow_file((fs::path(out_dir) / (s.record.sample_id + ".sflw")).string(), ff);
    }
  }
  std::cout << "wrote " << samples.size() << " samples to " << out_dir << "\n";
  return 0;
}

int run_arms(const std::string& config_path, const std::vector<std::string>& arms,
             const std::string& out_dir, uint64_t seed_override, bool has_seed, int jobs) {
  ExperimentConfig cfg = parse_experiment_config(config_path);
  if (has_seed) cfg.seeds = {seed_override};
  const ExperimentResult result = run_experiment(cfg, arms, out_dir, jobs);
  std::cout << "metrics rows: " << result.rows.size() << "\n";
  for (const std::string& f : result.failures) std::cerr << "stage failure: " << f << "\n";
  if (!result.failures.empty()) return 2;
  std::cout << "report written to " << out_dir << "\n";
  return 0;
}

int cmd_evaluate(const std::string& manifest_path, const std::string& data_dir,
                 const std::vector<double>& fractions, int k, const std::string& out_dir) {
  const Manifest manifest = load_manifest(manifest_path);
  const fs::path ckpt = fs::path(manifest_path).parent_path() / manifest.checkpoint_file;
  const SetrParams model = SetrParams::load(ckpt.string(), manifest.config);
  const std::vector<SampleRecord> dataset = load_dataset(data_dir);
  std::vector<const SampleRecord*> ptrs;
  ptrs.reserve(dataset.size());
  for (const SampleRecord& r : dataset) ptrs.push_back(&r);
  const int eff_k = k > 0 ? k : (manifest.k > 0 ? manifest.k : 8);
  const std::vector<FractionMetrics> results = evaluate(model, ptrs, fractions, eff_k);
  std::ostringstream table;
  table << "fraction,precision,recall,f1,accuracy,tp,fp,fn,tn\n";
  for (const FractionMetrics& fm : results) {
    table << fmt_double(fm.fraction) << ',' << fmt_double(fm.metrics.precision) << ','
          << fmt_double(fm.metrics.recall) << ',' << fmt_double(fm.metrics.f1) << ','
          << fmt_double(fm.metrics.accuracy) << ',' << fm.metrics.tp << ',' << fm.metrics.fp
          << ',' << fm.metrics.fn << ',' << fm.metrics.tn << "\n";
  }
  std::cout << table.str();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream out((fs::path(out_dir) / "eval.csv").string(), std::ios::trunc);
    out << table.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"setr: privacy-preserving early seizure detection pipeline"};
  app.require_subcommand(1);

  // extract-flow
  std::string ef_input, ef_output, ef_params;
  double ef_clip = 16.0;
  auto* extract = app.add_subcommand("extract-flow", "TV-L1 optical flow from a frame sequence");
  extract->add_option("--input", ef_input, "input .svid frame sequence or directory of .pgm frames")->required();
  extract->add_option("--output", ef_output, "output .sflw flow file")->required();
  extract->add_option("--clip", ef_clip, "flow clipping magnitude (pixels)");
  extract->add_option("--params", ef_params, "TV-L1 parameter file");

  // featurize
  std::string fz_input, fz_output, fz_sample = "sample", fz_patient = "patient";
  int fz_label = 0;
  double fz_duration = 0.0;
  auto* featurize = app.add_subcommand("featurize", "flow file to per-frame feature file");
  featurize->add_option("--input", fz_input, "input .sflw flow file")->required();
  featurize->add_option("--output", fz_output, "output .sfeat feature file")->required();
  featurize->add_option("--sample-id", fz_sample, "sample identifier");
  featurize->add_option("--patient-id", fz_patient, "patient identifier");
  featurize->add_option("--label", fz_label, "class label")->required();
  featurize->add_option("--duration", fz_duration, "sample duration in seconds")->required();

  // gen-synthetic
  std::string gs_config, gs_out;
  uint64_t gs_seed = 0;
  auto* gen = app.add_subcommand("gen-synthetic", "generate a synthetic dataset");
  gen->add_option("--config", gs_config, "experiment config supplying synthetic keys");
  gen->add_option("--out", gs_out, "output dataset directory")->required();
  auto* gs_seed_opt = gen->add_option("--seed", gs_seed, "dataset seed override");

  // train / distill / report
  std::string tr_config, tr_out, distill_mode;
  uint64_t tr_seed = 0;
  int tr_jobs = 1;
  auto* train = app.add_subcommand("train", "plain supervised training over folds");
  auto* distill = app.add_subcommand("distill", "knowledge-distillation training over folds");
  auto* report = app.add_subcommand("report", "run all arms and write the full report");
  std::string rp_arms = "plain,pkd,direct";
  CLI::Option* tr_seed_opt = nullptr;
  for (CLI::App* cmd : {train, distill, report}) {
    cmd->add_option("--config", tr_config, "experiment config file")->required();
    cmd->add_option("--out", tr_out, "output directory")->required();
    tr_seed_opt = cmd->add_option("--seed", tr_seed, "single-seed override");
    cmd->add_option("--jobs", tr_jobs, "parallel workers over (seed, fold) tasks");
  }
  distill->add_option("--mode", distill_mode, "pkd or direct (defaults to the config's mode)")
      ->check(CLI::IsMember({"pkd", "direct"}));
  report->add_option("--arms", rp_arms, "comma-separated arms to run");

  // evaluate
  std::string ev_model, ev_data, ev_out;
  std::vector<double> ev_fractions{0.25, 0.5, 0.75, 1.0};
  int ev_k = 0;
  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint across fractions");
  eval_cmd->add_option("--model", ev_model, "model manifest path")->required();
  eval_cmd->add_option("--data", ev_data, "dataset directory")->required();
  eval_cmd->add_option("--fractions", ev_fractions, "fractions to evaluate")->delimiter(',');
  eval_cmd->add_option("--k", ev_k, "segment count (defaults to the manifest's)");
  eval_cmd->add_option("--out", ev_out, "optional output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (extract->parsed()) return cmd_extract_flow(ef_input, ef_output, ef_clip, ef_params);
    if (featurize->parsed()) {
      return cmd_featurize(fz_input, fz_output, fz_sample, fz_patient, fz_label, fz_duration);
    }
    if (gen->parsed()) return cmd_gen_synthetic(gs_config, gs_out, gs_seed, gs_seed_opt->count() > 0);
    if (train->parsed()) {
      return run_arms(tr_config, {"plain"}, tr_out, tr_seed, tr_seed_opt->count() > 0, tr_jobs);
    }
    if (distill->parsed()) {
      std::string mode = distill_mode;
      if (mode.empty()) {
        mode = parse_experiment_config(tr_config).mode;
        if (mode == "plain") {
          throw ConfigError("distill: config mode is plain; use the train subcommand or --mode");
        }
      }
      return run_arms(tr_config, {mode}, tr_out, tr_seed, tr_seed_opt->count() > 0, tr_jobs);
    }
    if (report->parsed()) {
      std::vector<std::string> arms;
      std::stringstream ss(rp_arms);
      std::string arm;
      while (std::getline(ss, arm, ',')) {
        if (!arm.empty()) arms.push_back(arm);
      }
      return run_arms(tr_config, arms, tr_out, tr_seed, tr_seed_opt->count() > 0, tr_jobs);
    }
    if (eval_cmd->parsed()) return cmd_evaluate(ev_model, ev_data, ev_fractions, ev_k, ev_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

#include "setr/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

namespace setr {

namespace {

Mat uniform_init(Index rows, Index cols, Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-bound, bound);
  return m;
}

}  // namespace

void SetrConfig::validate() const {
  if (tokens < 1) throw ConfigError("model: tokens must be >= 1");
  if (dim < 2) throw ConfigError("model: dim must be >= 2");
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError("model: dim (" + std::to_string(dim) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  }
  if (layers < 1) throw ConfigError("model: layers must be >= 1");
  if (classes < 2) throw ConfigError("model: classes must be >= 2");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0, 1)");
}

SetrParams SetrParams::init(const SetrConfig& config, Rng& rng) {
  config.validate();
  const Index d = config.dim;
  const Index mlp = config.resolved_mlp_hidden();
  SetrParams p;
  p.config = config;
  p.w_embed = uniform_init(kFeatureDim, d, kFeatureDim, rng);
  p.b_embed = Mat::Zero(1, d);
  p.class_embed = uniform_init(1, d, d, rng);
  p.pos_embed = uniform_init(config.tokens + 1, d, d, rng);
  p.layers.resize(static_cast<size_t>(config.layers));
  for (auto& l : p.layers) {
    l.wq = uniform_init(d, d, d, rng);
    l.wk = uniform_init(d, d, d, rng);
    l.wv = uniform_init(d, d, d, rng);
    l.wo = uniform_init(d, d, d, rng);
    l.ln1_gamma = Mat::Ones(1, d);
    l.ln1_beta = Mat::Zero(1, d);
    l.ln2_gamma = Mat::Ones(1, d);
    l.ln2_beta = Mat::Zero(1, d);
    l.mlp_w1 = uniform_init(d, mlp, d, rng);
    l.mlp_b1 = Mat::Zero(1, mlp);
    l.mlp_w2 = uniform_init(mlp, d, mlp, rng);
    l.mlp_b2 = Mat::Zero(1, d);
  }
  p.head_w = uniform_init(d, config.classes, d, rng);
  p.head_b = Mat::Zero(1, config.classes);
  return p;
}

template <typename Self, typename MatPtr>
static std::vector<std::pair<std::string, MatPtr>> enumerate_arrays(Self& self) {
  std::vector<std::pair<std::string, MatPtr>> out;
  out.emplace_back("embed.w", &self.w_embed);
  out.emplace_back("embed.b", &self.b_embed);
  out.emplace_back("class_embed", &self.class_embed);
  out.emplace_back("pos_embed", &self.pos_embed);
  for (size_t i = 0; i < self.layers.size(); ++i) {
    auto& l = self.layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    out.emplace_back(p + "wq", &l.wq);
    out.emplace_back(p + "wk", &l.wk);
    out.emplace_back(p + "wv", &l.wv);
    out.emplace_back(p + "wo", &l.wo);
    out.emplace_back(p + "ln1.gamma", &l.ln1_gamma);
    out.emplace_back(p + "ln1.beta", &l.ln1_beta);
    out.emplace_back(p + "ln2.gamma", &l.ln2_gamma);
    out.emplace_back(p + "ln2.beta", &l.ln2_beta);
    out.emplace_back(p + "mlp.w1", &l.mlp_w1);
    out.emplace_back(p + "mlp.b1", &l.mlp_b1);
    out.emplace_back(p + "mlp.w2", &l.mlp_w2);
    out.emplace_back(p + "mlp.b2", &l.mlp_b2);
  }
  out.emplace_back("head.w", &self.head_w);
  out.emplace_back("head.b", &self.head_b);
  return out;
}

std::vector<std::pair<std::string, Mat*>> SetrParams::named_arrays() {
  return enumerate_arrays<SetrParams, Mat*>(*this);
}

std::vector<std::pair<std::string, const Mat*>> SetrParams::named_arrays() const {
  return enumerate_arrays<const SetrParams, const Mat*>(*this);
}

void SetrParams::save(const std::string& checkpoint_path) const {
  save_checkpoint(checkpoint_path, named_arrays());
}

SetrParams SetrParams::load(const std::string& checkpoint_path, const SetrConfig& config) {
  Rng dummy(0);
  SetrParams p = SetrParams::init(config, dummy);
  std::map<std::string, Mat> arrays = load_checkpoint(checkpoint_path);
  for (auto& [name, mat] : p.named_arrays()) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw FormatError("checkpoint missing array: " + name);
    if (it->second.rows() != mat->rows() || it->second.cols() != mat->cols()) {
      throw FormatError("checkpoint array " + name + " has shape " +
                        shape_str(it->second.rows(), it->second.cols()) + ", expected " +
                        shape_str(mat->rows(), mat->cols()));
    }
    *mat = it->second;
  }
  return p;
}

BoundParams bind(Tape& tape, const SetrParams& params) {
  BoundParams b;
  b.w_embed = tape.leaf(params.w_embed);
  b.b_embed = tape.leaf(params.b_embed);
  b.class_embed = tape.leaf(params.class_embed);
  b.pos_embed = tape.leaf(params.pos_embed);
  for (const auto& l : params.layers) {
    BoundLayer bl;
    bl.wq = tape.leaf(l.wq);
    bl.wk = tape.leaf(l.wk);
    bl.wv = tape.leaf(l.wv);
    bl.wo = tape.leaf(l.wo);
    bl.ln1_gamma = tape.leaf(l.ln1_gamma);
    bl.ln1_beta = tape.leaf(l.ln1_beta);
    bl.ln2_gamma = tape.leaf(l.ln2_gamma);
    bl.ln2_beta = tape.leaf(l.ln2_beta);
    bl.mlp_w1 = tape.leaf(l.mlp_w1);
    bl.mlp_b1 = tape.leaf(l.mlp_b1);
    bl.mlp_w2 = tape.leaf(l.mlp_w2);
    bl.mlp_b2 = tape.leaf(l.mlp_b2);
    b.layers.push_back(bl);
  }
  b.head_w = tape.leaf(params.head_w);
  b.head_b = tape.leaf(params.head_b);
  return b;
}

std::vector<Value> BoundParams::ordered() const {
  std::vector<Value> out{w_embed, b_embed, class_embed, pos_embed};
  for (const auto& l : layers) {
    out.insert(out.end(), {l.wq, l.wk, l.wv, l.wo, l.ln1_gamma, l.ln1_beta, l.ln2_gamma,
                           l.ln2_beta, l.mlp_w1, l.mlp_b1, l.mlp_w2, l.mlp_b2});
  }
  out.push_back(head_w);
  out.push_back(head_b);
  return out;
}

std::vector<Mat> collect_grads(const BoundParams& bound) {
  std::vector<Mat> grads;
  for (const Value& v : bound.ordered()) {
    grads.push_back(v.has_grad() ? v.grad() : Mat::Zero(v.rows(), v.cols()));
  }
  return grads;
}

DetachedOutput detach(const SetrOutput& out) {
  return DetachedOutput{out.logits.data(), out.class_token.data(), out.patch_tokens.data()};
}

Value tokenize(Tape& tape, const Mat& features, const BoundParams& params,
               const SetrConfig& config) {
  if (features.rows() != config.tokens || features.cols() != kFeatureDim) {
    throw std::invalid_argument("tokenize: features must be " + std::to_string(config.tokens) +
                                "x" + std::to_string(kFeatureDim) + ", got " +
                                shape_str(features.rows(), features.cols()));
  }
  Value feats = tape.leaf(features);
  Value motion_tokens = add_rowvec(matmul(feats, params.w_embed), params.b_embed);
  Value with_class = concat_rows(motion_tokens, params.class_embed);
  return add(with_class, params.pos_embed);
}

Value mhsa(Value x, const BoundLayer& layer, const SetrConfig& config, RunMode mode,
           Rng* rng, std::vector<Mat>* attention_out) {
  const int head_dim = config.head_dim();
  const double att_scale =
      config.unscaled_attention ? 1.0 : 1.0 / std::sqrt(static_cast<double>(head_dim));
  Value q = matmul(x, layer.wq);
  Value k = matmul(x, layer.wk);
  Value v = matmul(x, layer.wv);
  std::vector<Value> heads;
  heads.reserve(static_cast<size_t>(config.heads));
  for (int h = 0; h < config.heads; ++h) {
    const Index off = static_cast<Index>(h) * head_dim;
    Value qh = slice_cols(q, off, head_dim);
    Value kh = slice_cols(k, off, head_dim);
    Value vh = slice_cols(v, off, head_dim);
    Value att = softmax_rows(scale(matmul(qh, transpose(kh)), att_scale));
    if (attention_out) attention_out->push_back(att.data());
    if (mode == RunMode::kTrain && config.dropout > 0.0) {
      if (!rng) throw std::invalid_argument("mhsa: training mode requires an rng");
      att = dropout(att, config.dropout, *rng);
    }
    heads.push_back(matmul(att, vh));
  }
  return matmul(concat_cols(heads), layer.wo);
}

Value encoder_layer(Value x, const BoundLayer& layer, const SetrConfig& config,
                    RunMode mode, Rng* rng, std::vector<Mat>* attention_out) {
  constexpr double kLnEps = 1e-5;
  Value normed = layer_norm_rows(x, layer.ln1_gamma, layer.ln1_beta, kLnEps);
  Value attended = add(mhsa(normed, layer, config, mode, rng, attention_out), x);
  Value normed2 = layer_norm_rows(attended, layer.ln2_gamma, layer.ln2_beta, kLnEps);
  Value hidden = gelu(add_rowvec(matmul(normed2, layer.mlp_w1), layer.mlp_b1));
  Value mlp_out = add_rowvec(matmul(hidden, layer.mlp_w2), layer.mlp_b2);
  if (mode == RunMode::kTrain && config.dropout > 0.0) {
    if (!rng) throw std::invalid_argument("encoder_layer: training mode requires an rng");
    mlp_out = dropout(mlp_out, config.dropout, *rng);
  }
  return add(mlp_out, attended);
}

SetrOutput setr_forward(Value tokens, const BoundParams& params,
                        const SetrConfig& config, RunMode mode, Rng* rng, bool keep_attention) {
  if (tokens.rows() != config.tokens + 1 || tokens.cols() != config.dim) {
    throw std::invalid_argument("setr_forward: token sequence must be " +
                                std::to_string(config.tokens + 1) + "x" +
                                std::to_string(config.dim) + ", got " +
                                shape_str(tokens.rows(), tokens.cols()));
  }
  SetrOutput out;
  Value x = tokens;
  for (int l = 0; l < config.layers; ++l) {
    std::vector<Mat>* att = nullptr;
    if (keep_attention) {
      out.attention.emplace_back();
      att = &out.attention.back();
    }
    x = encoder_layer(x, params.layers[static_cast<size_t>(l)], config, mode, rng, att);
  }
  out.patch_tokens = slice_rows(x, 0, config.tokens);
  out.class_token = slice_rows(x, config.tokens, 1);
  out.logits = add_rowvec(matmul(out.class_token, params.head_w), params.head_b);
  return out;
}

DetachedOutput eval_forward(const SetrParams& params, const Mat& features) {
  Tape tape;
  BoundParams bound = bind(tape, params);
  Value tokens = tokenize(tape, features, bound, params.config);
  SetrOutput out = setr_forward(tokens, bound, params.config, RunMode::kEval);
  return detach(out);
}

int predict(const Mat& logits) {
  if (logits.size() == 0) throw std::invalid_argument("predict: empty logits");
  int best = 0;
  for (int c = 1; c < logits.size(); ++c) {
    if (logits(c) > logits(best)) best = c;
  }
  return best;
}

void save_manifest(const std::string& path, const SetrConfig& config,
                   const std::string& checkpoint_file, int level, int k) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("save_manifest: cannot open " + path);
  out << "format = setr-manifest-v1\n";
  out << "tokens = " << config.tokens << "\n";
  out << "dim = " << config.dim << "\n";
  out << "heads = " << config.heads << "\n";
  out << "layers = " << config.layers << "\n";
  out << "mlp-hidden = " << config.resolved_mlp_hidden() << "\n";
  out << "dropout = " << fmt_double(config.dropout) << "\n";
  out << "classes = " << config.classes << "\n";
  out << "unscaled-attention = " << (config.unscaled_attention ? "true" : "false") << "\n";
  out << "checkpoint = " << checkpoint_file << "\n";
  if (level >= 0) out << "level = " << level << "\n";
  if (k > 0) out << "k = " << k << "\n";
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("load_manifest: cannot open " + path);
  Manifest m;
  std::string line;
  bool saw_format = false;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "format") {
      if (val != "setr-manifest-v1") throw FormatError("manifest: unknown format " + val);
      saw_format = true;
    } else if (key == "tokens") m.config.tokens = std::stoi(val);
    else if (key == "dim") m.config.dim = std::stoi(val);
    else if (key == "heads") m.config.heads = std::stoi(val);
    else if (key == "layers") m.config.layers = std::stoi(val);
    else if (key == "mlp-hidden") m.config.mlp_hidden = std::stoi(val);
    else if (key == "dropout") m.config.dropout = std::stod(val);
    else if (key == "classes") m.config.classes = std::stoi(val);
    else if (key == "unscaled-attention") m.config.unscaled_attention = (val == "true");
    else if (key == "checkpoint") m.checkpoint_file = val;
    else if (key == "level") m.level = std::stoi(val);
    else if (key == "k") m.k = std::stoi(val);
    else throw FormatError("manifest: unknown key " + key);
  }
  if (!saw_format) throw FormatError("manifest: missing format line in " + path);
  m.config.validate();
  return m;
}

}  // namespace setr

// Transformer sequence classifier over motion tokens plus a class token.
//
// Pre-norm encoder: per layer, x is layer-normalized, passed through
// multi-head self-attention, and added back residually; the result is
// layer-normalized again, passed through a two-layer GELU MLP, and added
// back residually. A one-layer head maps the final class-token row to
// logits.
#pragma once

#include "setr/checkpoint.hpp"
#include "setr/core.hpp"
#include "setr/tape.hpp"

#include <optional>
#include <string>
#include <vector>

namespace setr {

struct SetrConfig {
  int tokens = 64;      // motion tokens per sequence (class token is extra)
  int dim = 256;        // hidden width
  int heads = 8;
  int layers = 3;
  int mlp_hidden = 0;   // 0 resolves to 4 * dim
  double dropout = 0.1;
  int classes = 2;
  // Drops the 1/sqrt(head_dim) factor on attention logits. Off by default;
  // unscaled logits saturate the softmax at realistic widths.
  bool unscaled_attention = false;

  int resolved_mlp_hidden() const { return mlp_hidden > 0 ? mlp_hidden : 4 * dim; }
  int head_dim() const { return dim / heads; }
  void validate() const;
};

struct LayerParams {
  Mat wq, wk, wv, wo;          // dim x dim
  Mat ln1_gamma, ln1_beta;     // 1 x dim
  Mat ln2_gamma, ln2_beta;     // 1 x dim
  Mat mlp_w1, mlp_b1;          // dim x mlp, 1 x mlp
  Mat mlp_w2, mlp_b2;          // mlp x dim, 1 x dim
};

struct SetrParams {
  SetrConfig config;
  Mat w_embed, b_embed;        // 512 x dim, 1 x dim
  Mat class_embed;             // 1 x dim
  Mat pos_embed;               // (tokens + 1) x dim
  std::vector<LayerParams> layers;
  Mat head_w, head_b;          // dim x classes, 1 x classes

  // Fresh parameters: projections uniform(+-1/sqrt(fan_in)), biases zero,
  // layer-norm gains one.
  static SetrParams init(const SetrConfig& config, Rng& rng);

  // Stable name -> array enumeration; fixes optimizer and checkpoint order.
  std::vector<std::pair<std::string, Mat*>> named_arrays();
  std::vector<std::pair<std::string, const Mat*>> named_arrays() const;

  void save(const std::string& checkpoint_path) const;
  static SetrParams load(const std::string& checkpoint_path, const SetrConfig& config);
};

// Tape-bound mirror of SetrParams for one forward/backward pass.
struct BoundLayer {
  Value wq, wk, wv, wo;
  Value ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Value mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct BoundParams {
  Value w_embed, b_embed, class_embed, pos_embed;
  std::vector<BoundLayer> layers;
  Value head_w, head_b;

  std::vector<Value> ordered() const;  // same order as SetrParams::named_arrays
};

BoundParams bind(Tape& tape, const SetrParams& params);

// Gradients of the bound parameters after backward(), in named_arrays order.
std::vector<Mat> collect_grads(const BoundParams& bound);

enum class RunMode { kTrain, kEval };

struct SetrOutput {
  Value logits;        // 1 x classes
  Value class_token;   // 1 x dim, final row of the encoder output
  Value patch_tokens;  // tokens x dim, rows 0..tokens-1
  // [layer][head] attention maps, (tokens+1) x (tokens+1), pre-dropout.
  std::vector<std::vector<Mat>> attention;
};

// Teacher-side snapshot with no tape attached.
struct DetachedOutput {
  Mat logits;
  Mat class_token;
  Mat patch_tokens;
};

DetachedOutput detach(const SetrOutput& out);

// features (tokens x 512) -> (tokens+1) x dim token sequence: linear
// embedding, class embedding appended as the final row, positional
// encoding added elementwise.
Value tokenize(Tape& tape, const Mat& features, const BoundParams& params,
               const SetrConfig& config);

Value mhsa(Value x, const BoundLayer& layer, const SetrConfig& config, RunMode mode,
           Rng* rng, std::vector<Mat>* attention_out);

Value encoder_layer(Value x, const BoundLayer& layer, const SetrConfig& config,
                    RunMode mode, Rng* rng, std::vector<Mat>* attention_out);

// rng may be null in eval mode; keep_attention controls whether attention
// maps are copied out.
SetrOutput setr_forward(Value tokens, const BoundParams& params,
                        const SetrConfig& config, RunMode mode, Rng* rng = nullptr,
                        bool keep_attention = false);

// Convenience: bind + tokenize + forward on a scratch tape, eval mode.
DetachedOutput eval_forward(const SetrParams& params, const Mat& features);

// Argmax with ties broken toward the lower index.
int predict(const Mat& logits);

// Human-readable key-value manifest recording the architecture next to a
// checkpoint.
void save_manifest(const std::string& path, const SetrConfig& config,
                   const std::string& checkpoint_file, int level = -1, int k = 0);
struct Manifest {
  SetrConfig config;
  std::string checkpoint_file;
  int level = -1;
  int k = 0;
};
Manifest load_manifest(const std::string& path);

}  // namespace setr

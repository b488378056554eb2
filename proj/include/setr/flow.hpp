// Dense TV-L1 optical flow, coarse-to-fine primal-dual solver.
//
// Duality-based scheme: alternate a pointwise thresholding step on the data
// term with a fixed number of dual ascent iterations on the total-variation
// term, warping the target image toward the source a few times per pyramid
// level. Flow fields computed here replace appearance with motion, which is
// the privacy property the rest of the pipeline relies on.
#pragma once

#include "setr/core.hpp"

#include <cstdint>
#include <vector>

namespace setr {

// Grayscale image, intensities in [0, 1], rows = height.
struct Frame {
  Grid intensity;

  Index width() const { return intensity.cols(); }
  Index height() const { return intensity.rows(); }
};

// Per-pixel displacement in pixels; u horizontal, v vertical.
struct FlowField {
  Grid u;
  Grid v;

  Index width() const { return u.cols(); }
  Index height() const { return u.rows(); }
};

struct TvL1Params {
  double lambda = 0.15;        // data attachment weight
  double theta = 0.3;          // coupling between data and TV variables
  double tau = 0.125;          // dual ascent step, stability requires <= 0.125
  int warps_per_level = 5;
  int iterations_per_warp = 30;
  int pyramid_levels = 5;
  double pyramid_scale = 0.5;  // in (0, 1)
  double stop_epsilon = 0.01;  // inner loop stops when mean update falls below this
  bool median_filter = true;   // 3x3 median on the flow after each warp

  void validate() const;
};

// Optional per-warp trace of the finest-level solve. Energies are evaluated
// on the solver's internal [0, 255] intensity scale.
struct TvL1Trace {
  std::vector<double> finest_level_energy;  // TV-L1 objective after each warp
};

// Gaussian-smoothed geometric pyramid. Element 0 is the input unchanged.
// Levels that would drop below 8x8 are discarded; the actual count may be
// smaller than requested (a note goes to stderr).
std::vector<Frame> build_pyramid(const Frame& frame, int levels, double scale);

// Bilinear backward warp: out(x, y) = frame(x + u, y + v), clamped at borders.
Frame warp(const Frame& frame, const FlowField& flow);

// TV-L1 objective: sum over pixels of lambda * |I1(x+u) - I0(x)| plus the
// Euclidean norms of the forward-difference gradients of u and v.
double tv_l1_energy(const Frame& prev, const Frame& next, const FlowField& flow, double lambda);

FlowField tv_l1_flow(const Frame& prev, const Frame& next, const TvL1Params& params,
                     TvL1Trace* trace = nullptr);

// 8-bit flow quantization. u and v are clipped to [-clip, clip] and mapped
// linearly onto [0, 255] with half-up rounding; nothing else is stored, so
// the export carries motion only.
struct QuantizedFlow {
  Index width = 0;
  Index height = 0;
  double clip = 0.0;
  std::vector<uint8_t> u;
  std::vector<uint8_t> v;
};

QuantizedFlow flow_to_export(const FlowField& flow, double clip);
FlowField dequantize_flow(const QuantizedFlow& q);

// Internals reused by tests and the synthetic generator.
Grid gaussian_smooth(const Grid& img, double sigma);
Grid resample_bilinear(const Grid& img, Index new_height, Index new_width);
Grid median_filter_3x3(const Grid& img);

}  // namespace setr

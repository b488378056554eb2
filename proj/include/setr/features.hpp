// Per-frame spatial features from flow fields, frame sampling, and the
// feature-file format used for data interchange.
//
// The descriptor is a 4x4 spatial grid of 16-bin orientation histograms
// with two statistics per bin (pixel-count weighted and magnitude
// weighted): 4*4*16*2 = 512 values, L2-normalized per frame.
#pragma once

#include "setr/core.hpp"
#include "setr/flow.hpp"

#include <string>
#include <vector>

namespace setr {

struct SampleRecord {
  std::string sample_id;
  std::string patient_id;
  int label = 0;
  double duration_s = 0.0;
  Mat features;  // frames x 512

  Index frame_count() const { return features.rows(); }
};

inline constexpr int kGridCells = 4;
inline constexpr int kOrientationBins = 16;

// 512-float descriptor of one flow field. An all-zero field maps to the
// zero vector rather than an error.
Eigen::RowVectorXd flow_descriptor(const FlowField& flow);

// One descriptor row per flow field.
Mat extract_spatial_features(const std::vector<FlowField>& flows);

// Uniform temporal sampling: index_i = floor(i * prefix_frames / n) for
// i in [0, n). Indices repeat when prefix_frames < n and are always
// monotone non-decreasing.
std::vector<Index> sample_frames(Index prefix_frames, Index n);

// Gathers the sampled rows of a record's prefix into an n x 512 matrix.
Mat gather_sampled_features(const SampleRecord& record, Index prefix_frames, Index n);

// Feature file: magic "SETRFEAT", u32 version, length-prefixed sample and
// patient ids, u8 label, f64 duration, u32 frame count, u32 feature dim
// (512), then row-major little-endian 32-bit floats.
void save_features(const std::string& path, const SampleRecord& record);
SampleRecord load_features(const std::string& path);

// All *.sfeat files under dir, ordered by sample id.
std::vector<SampleRecord> load_dataset(const std::string& dir);
void save_dataset(const std::string& dir, const std::vector<SampleRecord>& records);

}  // namespace setr

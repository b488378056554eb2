// On-disk formats for raw frame sequences and quantized flow.
//
// Frame sequence: magic "SETRVID0", u32 width/height/frame-count, f64
// frames-per-second, then row-major 8-bit grayscale frames.
// Flow export: magic "SETRFLW0", u32 width/height/pair-count, f64 clip,
// then per pair two row-major 8-bit planes (u, v).
#pragma once

#include "setr/flow.hpp"

#include <string>
#include <vector>

namespace setr {

struct VideoFile {
  double fps = 30.0;
  std::vector<Frame> frames;
};

void save_video(const std::string& path, const VideoFile& video);
VideoFile load_video(const std::string& path);

// Binary 8-bit PGM (P5), for frame directories.
Frame load_pgm(const std::string& path);
void save_pgm(const std::string& path, const Frame& frame);

// All *.pgm files under dir in name order, as one frame sequence.
std::vector<Frame> load_frame_dir(const std::string& dir);

struct FlowFile {
  double clip = 16.0;
  Index width = 0;
  Index height = 0;
  std::vector<QuantizedFlow> pairs;
};

void save_flow_file(const std::string& path, const FlowFile& flows);
FlowFile load_flow_file(const std::string& path);

}  // namespace setr

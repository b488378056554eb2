#include "setr/flow_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

namespace setr {

namespace {

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(std::string("truncated while reading ") + what);
  return v;
}

void check_magic(std::istream& in, const char* magic, const std::string& path) {
  char buf[8];
  in.read(buf, 8);
  if (!in || std::memcmp(buf, magic, 8) != 0) {
    throw FormatError(std::string("bad magic, expected ") + magic + " in " + path);
  }
}

}  // namespace

void save_video(const std::string& path, const VideoFile& video) {
  if (video.frames.empty()) throw std::invalid_argument("save_video: no frames");
  const Index w = video.frames[0].width(), h = video.frames[0].height();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("save_video: cannot open " + path);
  out.write("SETRVID0", 8);
  write_pod<uint32_t>(out, static_cast<uint32_t>(w));
  write_pod<uint32_t>(out, static_cast<uint32_t>(h));
  write_pod<uint32_t>(out, static_cast<uint32_t>(video.frames.size()));
  write_pod<double>(out, video.fps);
  std::vector<uint8_t> row(static_cast<size_t>(w));
  for (const Frame& f : video.frames) {
    if (f.width() != w || f.height() != h) {
      throw std::invalid_argument("save_video: frame size varies");
    }
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const double v = std::clamp(f.intensity(y, x), 0.0, 1.0);
        row[static_cast<size_t>(x)] = static_cast<uint8_t>(std::lround(v * 255.0));
      }
      out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
  }
  if (!out) throw FormatError("save_video: write failed on " + path);
}

VideoFile load_video(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_video: cannot open " + path);
  check_magic(in, "SETRVID0", path);
  const auto w = read_pod<uint32_t>(in, "width");
  const auto h = read_pod<uint32_t>(in, "height");
  const auto count = read_pod<uint32_t>(in, "frame count");
  VideoFile video;
  video.fps = read_pod<double>(in, "fps");
  if (w == 0 || h == 0) throw FormatError("load_video: zero dimensions in " + path);
  std::vector<uint8_t> row(w);
  video.frames.reserve(count);
  for (uint32_t f = 0; f < count; ++f) {
    Frame frame;
    frame.intensity.resize(h, w);
    for (uint32_t y = 0; y < h; ++y) {
      in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
      if (!in) throw FormatError("load_video: truncated frame data in " + path);
      for (uint32_t x = 0; x < w; ++x) {
        frame.intensity(y, x) = static_cast<double>(row[x]) / 255.0;
      }
    }
    video.frames.push_back(std::move(frame));
  }
  return video;
}

Frame load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_pgm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw FormatError("load_pgm: not a binary PGM: " + path);
  auto next_token = [&in, &path]() {
    std::string tok;
    for (;;) {
      if (!(in >> tok)) throw FormatError("load_pgm: truncated header in " + path);
      if (tok[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return tok;
    }
  };
  const long w = std::stol(next_token());
  const long h = std::stol(next_token());
  const long maxval = std::stol(next_token());
  if (w <= 0 || h <= 0) throw FormatError("load_pgm: bad dimensions in " + path);
  if (maxval != 255) throw FormatError("load_pgm: only 8-bit PGM supported: " + path);
  in.get();  // single whitespace after maxval
  std::vector<uint8_t> row(static_cast<size_t>(w));
  Frame frame;
  frame.intensity.resize(h, w);
  for (long y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()), w);
    if (!in) throw FormatError("load_pgm: truncated pixel data in " + path);
    for (long x = 0; x < w; ++x) frame.intensity(y, x) = static_cast<double>(row[static_cast<size_t>(x)]) / 255.0;
  }
  return frame;
}

void save_pgm(const std::string& path, const Frame& frame) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("save_pgm: cannot open " + path);
  out << "P5\n" << frame.width() << " " << frame.height() << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(frame.width()));
  for (Index y = 0; y < frame.height(); ++y) {
    for (Index x = 0; x < frame.width(); ++x) {
      row[static_cast<size_t>(x)] =
          static_cast<uint8_t>(std::lround(std::clamp(frame.intensity(y, x), 0.0, 1.0) * 255.0));
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

std::vector<Frame> load_frame_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw FormatError("load_frame_dir: not a directory: " + dir);
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".pgm") {
      paths.push_back(entry.path().string());
    }
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw FormatError("load_frame_dir: no .pgm files in " + dir);
  std::vector<Frame> frames;
  frames.reserve(paths.size());
  for (const std::string& p : paths) frames.push_back(load_pgm(p));
  for (const Frame& f : frames) {
    if (f.width() != frames[0].width() || f.height() != frames[0].height()) {
      throw FormatError("load_frame_dir: frame sizes vary in " + dir);
    }
  }
  return frames;
}

void save_flow_file(const std::string& path, const FlowFile& flows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("save_flow_file: cannot open " + path);
  out.write("SETRFLW0", 8);
  write_pod<uint32_t>(out, static_cast<uint32_t>(flows.width));
  write_pod<uint32_t>(out, static_cast<uint32_t>(flows.height));
  write_pod<uint32_t>(out, static_cast<uint32_t>(flows.pairs.size()));
  write_pod<double>(out, flows.clip);
  for (const QuantizedFlow& q : flows.pairs) {
    if (q.width != flows.width || q.height != flows.height) {
      throw std::invalid_argument("save_flow_file: pair size varies");
    }
    out.write(reinterpret_cast<const char*>(q.u.data()), static_cast<std::streamsize>(q.u.size()));
    out.write(reinterpret_cast<const char*>(q.v.data()), static_cast<std::streamsize>(q.v.size()));
  }
  if (!out) throw FormatError("save_flow_file: write failed on " + path);
}

FlowFile load_flow_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_flow_file: cannot open " + path);
  check_magic(in, "SETRFLW0", path);
  FlowFile flows;
  flows.width = static_cast<Index>(read_pod<uint32_t>(in, "width"));
  flows.height = static_cast<Index>(read_pod<uint32_t>(in, "height"));
  const auto count = read_pod<uint32_t>(in, "pair count");
  flows.clip = read_pod<double>(in, "clip");
  if (flows.width == 0 || flows.height == 0) throw FormatError("load_flow_file: zero dimensions");
  if (!(flows.clip > 0.0)) throw FormatError("load_flow_file: clip must be positive");
  const size_t plane = static_cast<size_t>(flows.width * flows.height);
  flows.pairs.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    QuantizedFlow q;
    q.width = flows.width;
    q.height = flows.height;
    q.clip = flows.clip;
    q.u.resize(plane);
    q.v.resize(plane);
    in.read(reinterpret_cast<char*>(q.u.data()), static_cast<std::streamsize>(plane));
    in.read(reinterpret_cast<char*>(q.v.data()), static_cast<std::streamsize>(plane));
    if (!in) throw FormatError("load_flow_file: truncated plane data in " + path);
    flows.pairs.push_back(std::move(q));
  }
  return flows;
}

}  // namespace setr

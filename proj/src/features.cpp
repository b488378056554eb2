#include "setr/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace setr {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kMagnitudeFloor = 1e-12;

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(std::string("feature file: truncated while reading ") + what);
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in, const char* what) {
  const auto len = read_pod<uint32_t>(in, what);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw FormatError(std::string("feature file: truncated while reading ") + what);
  return s;
}

}  // namespace

Eigen::RowVectorXd flow_descriptor(const FlowField& flow) {
  const Index w = flow.width(), h = flow.height();
  if (w == 0 || h == 0) throw std::invalid_argument("flow_descriptor: empty flow field");

  // [cell][bin][stat]: stat 0 = pixel-count fraction, stat 1 = mean magnitude.
  Eigen::RowVectorXd desc = Eigen::RowVectorXd::Zero(kFeatureDim);
  Eigen::ArrayXd cell_pixels = Eigen::ArrayXd::Zero(kGridCells * kGridCells);

  for (Index y = 0; y < h; ++y) {
    const Index cy = std::min<Index>(y * kGridCells / h, kGridCells - 1);
    for (Index x = 0; x < w; ++x) {
      const Index cx = std::min<Index>(x * kGridCells / w, kGridCells - 1);
      const Index cell = cy * kGridCells + cx;
      cell_pixels(cell) += 1.0;
      const double du = flow.u(y, x), dv = flow.v(y, x);
      const double mag = std::sqrt(du * du + dv * dv);
      if (mag < kMagnitudeFloor) continue;
      const double angle = std::atan2(dv, du);  // [-pi, pi]
      int bin = static_cast<int>(std::floor((angle + M_PI) / kTwoPi * kOrientationBins));
      bin = std::clamp(bin, 0, kOrientationBins - 1);  // angle == +pi folds into the top bin
      const Index base = (cell * kOrientationBins + bin) * 2;
      desc(base) += 1.0;
      desc(base + 1) += mag;
    }
  }

  // Per-cell normalization keeps cells comparable regardless of pixel count.
  for (Index cell = 0; cell < kGridCells * kGridCells; ++cell) {
    const double n = cell_pixels(cell);
    if (n <= 0.0) continue;
    for (int bin = 0; bin < kOrientationBins; ++bin) {
      const Index base = (cell * kOrientationBins + bin) * 2;
      desc(base) /= n;
      desc(base + 1) /= n;
    }
  }

  const double norm = desc.norm();
  if (norm > 0.0) desc /= norm;
  return desc;
}

Mat extract_spatial_features(const std::vector<FlowField>& flows) {
  if (flows.empty()) throw std::invalid_argument("extract_spatial_features: no flow fields");
  Mat out(static_cast<Index>(flows.size()), kFeatureDim);
  for (size_t i = 0; i < flows.size(); ++i) {
    out.row(static_cast<Index>(i)) = flow_descriptor(flows[i]);
  }
  return out;
}

std::vector<Index> sample_frames(Index prefix_frames, Index n) {
  if (prefix_frames < 1) throw std::invalid_argument("sample_frames: prefix must have >= 1 frame");
  if (n < 1) throw std::invalid_argument("sample_frames: n must be >= 1");
  std::vector<Index> idx(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) {
    idx[static_cast<size_t>(i)] = i * prefix_frames / n;  // floor for nonnegative operands
  }
  return idx;
}

Mat gather_sampled_features(const SampleRecord& record, Index prefix_frames, Index n) {
  if (prefix_frames > record.frame_count()) {
    throw std::invalid_argument("gather_sampled_features: prefix " + std::to_string(prefix_frames) +
                                " exceeds record frames " + std::to_string(record.frame_count()));
  }
  const std::vector<Index> idx = sample_frames(prefix_frames, n);
  Mat out(n, record.features.cols());
  for (Index i = 0; i < n; ++i) out.row(i) = record.features.row(idx[static_cast<size_t>(i)]);
  return out;
}

void save_features(const std::string& path, const SampleRecord& record) {
  if (record.features.cols() != kFeatureDim) {
    throw std::invalid_argument("save_features: feature dim must be 512, got " +
                                std::to_string(record.features.cols()));
  }
  if (record.frame_count() < 1) throw std::invalid_argument("save_features: no frames");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("save_features: cannot open " + path);
  out.write("SETRFEAT", 8);
  write_pod<uint32_t>(out, 1);
  write_string(out, record.sample_id);
  write_string(out, record.patient_id);
  write_pod<uint8_t>(out, static_cast<uint8_t>(record.label));
  write_pod<double>(out, record.duration_s);
  write_pod<uint32_t>(out, static_cast<uint32_t>(record.frame_count()));
  write_pod<uint32_t>(out, kFeatureDim);
  std::vector<float> row(kFeatureDim);
  for (Index r = 0; r < record.frame_count(); ++r) {
    for (Index c = 0; c < kFeatureDim; ++c) row[static_cast<size_t>(c)] = static_cast<float>(record.features(r, c));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw FormatError("save_features: write failed on " + path);
}

SampleRecord load_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_features: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "SETRFEAT", 8) != 0) {
    throw FormatError("load_features: bad magic in " + path);
  }
  const auto version = read_pod<uint32_t>(in, "version");
  if (version != 1) throw FormatError("load_features: unsupported version " + std::to_string(version));
  SampleRecord rec;
  rec.sample_id = read_string(in, "sample id");
  rec.patient_id = read_string(in, "patient id");
  rec.label = static_cast<int>(read_pod<uint8_t>(in, "label"));
  rec.duration_s = read_pod<double>(in, "duration");
  const auto frames = read_pod<uint32_t>(in, "frame count");
  const auto dim = read_pod<uint32_t>(in, "feature dim");
  if (dim != kFeatureDim) {
    throw FormatError("load_features: feature dim must be 512, got " + std::to_string(dim));
  }
  if (frames < 1) throw FormatError("load_features: zero frames in " + path);
  rec.features.resize(static_cast<Index>(frames), kFeatureDim);
  std::vector<float> row(kFeatureDim);
  for (uint32_t r = 0; r < frames; ++r) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!in) throw FormatError("load_features: truncated feature data in " + path);
    for (Index c = 0; c < kFeatureDim; ++c) {
      rec.features(static_cast<Index>(r), c) = static_cast<double>(row[static_cast<size_t>(c)]);
    }
  }
  if (!rec.features.allFinite()) throw FormatError("load_features: non-finite features in " + path);
  return rec;
}

std::vector<SampleRecord> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw FormatError("load_dataset: not a directory: " + dir);
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".sfeat") {
      paths.push_back(entry.path().string());
    }
  }
  std::sort(paths.begin(), paths.end());
  std::vector<SampleRecord> records;
  records.reserve(paths.size());
  for (const std::string& p : paths) records.push_back(load_features(p));
  std::sort(records.begin(), records.end(),
            [](const SampleRecord& a, const SampleRecord& b) { return a.sample_id < b.sample_id; });
  return records;
}

void save_dataset(const std::string& dir, const std::vector<SampleRecord>& records) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (const SampleRecord& rec : records) {
    save_features((fs::path(dir) / (rec.sample_id + ".sfeat")).string(), rec);
  }
}

}  // namespace setr

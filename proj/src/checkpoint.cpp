#include "setr/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace setr {

namespace {

constexpr char kMagic[8] = {'S', 'E', 'T', 'R', 'C', 'K', 'P', 'T'};

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(std::string("checkpoint: truncated while reading ") + what);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Mat*>>& arrays) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("checkpoint: cannot open for write: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod<uint32_t>(out, kCheckpointVersion);
  write_pod<uint32_t>(out, static_cast<uint32_t>(arrays.size()));
  for (const auto& [name, mat] : arrays) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint32_t>(out, 2);
    write_pod<uint64_t>(out, static_cast<uint64_t>(mat->rows()));
    write_pod<uint64_t>(out, static_cast<uint64_t>(mat->cols()));
    out.write(reinterpret_cast<const char*>(mat->data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(mat->size())));
  }
  if (!out) throw FormatError("checkpoint: write failed: " + path);
}

std::map<std::string, Mat> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint: bad magic in " + path);
  }
  const auto version = read_pod<uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = read_pod<uint32_t>(in, "array count");
  std::map<std::string, Mat> out;
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<uint32_t>(in, "name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw FormatError("checkpoint: truncated name");
    const auto rank = read_pod<uint32_t>(in, "rank");
    if (rank != 2) throw FormatError("checkpoint: only rank-2 arrays supported, got rank " +
                                     std::to_string(rank));
    const auto rows = read_pod<uint64_t>(in, "rows");
    const auto cols = read_pod<uint64_t>(in, "cols");
    Mat m(static_cast<Index>(rows), static_cast<Index>(cols));
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * rows * cols));
    if (!in) throw FormatError("checkpoint: truncated data for array " + name);
    if (out.count(name)) throw FormatError("checkpoint: duplicate array name " + name);
    out.emplace(std::move(name), std::move(m));
  }
  return out;
}

}  // namespace setr

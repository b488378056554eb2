// Binary checkpoint container for named dense arrays.
//
// Layout: magic "SETRCKPT", u32 format version, u32 array count, then per
// array: u32 name length, UTF-8 name, u32 rank, u64 dims, row-major
// little-endian 64-bit floats. Write -> read -> write is bit-exact.
#pragma once

#include "setr/core.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace setr {

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Mat*>>& arrays);

std::map<std::string, Mat> load_checkpoint(const std::string& path);

}  // namespace setr

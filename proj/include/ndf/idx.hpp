#pragma once

#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "ndf/common.hpp"

namespace ndf {

// IDX container (the MNIST file format): magic [0x00, 0x00, dtype, rank],
// rank big-endian u32 extents, then the raw payload. Only dtype 0x08
// (unsigned byte) is supported.
struct IdxTensor {
  uint8_t dtype = 0;
  std::vector<int64_t> dims;
  std::vector<uint8_t> payload;

  uint32_t magic_word() const {
    return (static_cast<uint32_t>(dtype) << 8) | static_cast<uint32_t>(dims.size());
  }

  int64_t count() const { return dims.empty() ? 0 : dims[0]; }
};

inline IdxTensor parse_idx(std::span<const uint8_t> bytes) {
  if (bytes.size() < 4)
    throw data_error("idx: truncated header, need 4 bytes, got " + std::to_string(bytes.size()) +
                     " (offset 0)");
  if (bytes[0] != 0 || bytes[1] != 0)
    throw data_error("idx: bad magic bytes at offset 0");
  IdxTensor t;
  t.dtype = bytes[2];
  if (t.dtype != 0x08)
    throw data_error("idx: unsupported dtype 0x" + std::to_string(t.dtype) + " at offset 2");
  const size_t rank = bytes[3];
  if (rank == 0) throw data_error("idx: zero rank at offset 3");
  const size_t header = 4 + 4 * rank;
  if (bytes.size() < header)
    throw data_error("idx: truncated dimension table, need " + std::to_string(header) +
                     " bytes, got " + std::to_string(bytes.size()) + " (offset 4)");
  int64_t total = 1;
  for (size_t d = 0; d < rank; ++d) {
    const size_t o = 4 + 4 * d;
    const uint32_t e = (static_cast<uint32_t>(bytes[o]) << 24) |
                       (static_cast<uint32_t>(bytes[o + 1]) << 16) |
                       (static_cast<uint32_t>(bytes[o + 2]) << 8) |
                       static_cast<uint32_t>(bytes[o + 3]);
    t.dims.push_back(static_cast<int64_t>(e));
    total *= static_cast<int64_t>(e);
  }
  const int64_t available = static_cast<int64_t>(bytes.size()) - static_cast<int64_t>(header);
  if (available != total)
    throw data_error("idx: payload length mismatch: expected " + std::to_string(total) +
                     " bytes, got " + std::to_string(available) + " (payload offset " +
                     std::to_string(header) + ")");
  t.payload.assign(bytes.begin() + static_cast<int64_t>(header), bytes.end());
  return t;
}

inline IdxTensor load_idx_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("idx: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  try {
    return parse_idx(bytes);
  } catch (const data_error& e) {
    throw data_error(path + ": " + e.what());
  }
}

}  // namespace ndf

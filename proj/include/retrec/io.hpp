#pragma once

#include <string>
#include <utility>
#include <vector>

#include "retrec/matrix.hpp"

namespace retrec::io {

// Tensor container format shared by encoder and fusion checkpoints:
// a versioned header, a directory of (name, shape, offset) entries and a
// little-endian float32 data block.
//
//   magic "RTF1" | u32 version | u32 tensor_count
//   per tensor:  u32 name_len | name bytes | u32 rows | u32 cols | u64 offset
//   u64 data_bytes | f32 data...
//
// Offsets are in bytes from the start of the data block.
void save_tensor_file(
    const std::string& path,
    const std::vector<std::pair<std::string, const Matrix*>>& tensors);

// Loads into pre-shaped destination matrices; names and shapes must match
// the file directory exactly.
void load_tensor_file(
    const std::string& path,
    const std::vector<std::pair<std::string, Matrix*>>& tensors);

// Directory listing (name, rows, cols) without loading data.
std::vector<std::pair<std::string, std::pair<int, int>>> list_tensor_file(
    const std::string& path);

}  // namespace retrec::io

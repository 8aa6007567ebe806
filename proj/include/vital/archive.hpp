// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace vital {

struct NamedArray {
  std::vector<std::int64_t> dims;
  std::vector<double> data;
};

/// Entries are kept sorted by name so serialization is byte-stable.
using ArrayArchive = std::map<std::string, NamedArray>;

// Layout (little-endian): "VARC0001", u64 entry count, then per entry
// u32 name length, name bytes, u32 rank, i64 dims[rank], f64 data[prod(dims)].
std::string serialize_archive(const ArrayArchive& archive);
ArrayArchive parse_archive(std::string_view bytes);

/// Writes through a temporary file and an atomic rename.
void write_archive(const std::filesystem::path& path, const ArrayArchive& archive);
ArrayArchive read_archive(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
/// Writes `bytes` to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace vital

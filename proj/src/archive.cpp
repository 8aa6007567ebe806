// SPDX-License-Identifier: Apache-2.0
#include "vital/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "vital/errors.hpp"

namespace vital {

static_assert(std::endian::native == std::endian::little, "archive format assumes little-endian");

namespace {

constexpr std::string_view kMagic = "VARC0001";

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("archive truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_archive(const ArrayArchive& archive) {
  std::string out(kMagic);
  put<std::uint64_t>(out, archive.size());
  for (const auto& [name, array] : archive) {
    std::size_t count = 1;
    for (auto d : array.dims) count *= static_cast<std::size_t>(d);
    if (count != array.data.size()) {
      throw ValidationError("archive entry '" + name + "' dims disagree with data length");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(array.dims.size()));
    for (auto d : array.dims) put<std::int64_t>(out, d);
    out.append(reinterpret_cast<const char*>(array.data.data()), array.data.size() * sizeof(double));
  }
  return out;
}

ArrayArchive parse_archive(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(kMagic.size()) != kMagic) throw IoError("not an array archive (bad magic)");
  const auto count = in.get<std::uint64_t>();
  ArrayArchive archive;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = in.get<std::uint32_t>();
    std::string name(in.take(name_len));
    NamedArray array;
    const auto rank = in.get<std::uint32_t>();
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = in.get<std::int64_t>();
      if (d < 0) throw IoError("negative dimension in archive entry '" + name + "'");
      array.dims.push_back(d);
      n *= static_cast<std::size_t>(d);
    }
    const auto raw = in.take(n * sizeof(double));
    array.data.resize(n);
    std::memcpy(array.data.data(), raw.data(), raw.size());
    archive.emplace(std::move(name), std::move(array));
  }
  if (!in.done()) throw IoError("trailing bytes after archive entries");
  return archive;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::random_device rd;
  const auto tmp = fs::path(path.string() + ".tmp" + std::to_string(rd()));
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot rename into " + path.string() + ": " + ec.message());
  }
}

void write_archive(const std::filesystem::path& path, const ArrayArchive& archive) {
  write_file_atomic(path, serialize_archive(archive));
}

ArrayArchive read_archive(const std::filesystem::path& path) {
  return parse_archive(read_file(path));
}

}  // namespace vital

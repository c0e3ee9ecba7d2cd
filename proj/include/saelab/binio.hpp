#pragma once

#include "saelab/common.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace saelab::binio {

// All multi-byte values are little-endian regardless of host order.
void put_u32(std::ostream& out, std::uint32_t v);
void put_i32(std::ostream& out, std::int32_t v);
void put_f32(std::ostream& out, float v);
void put_f32s(std::ostream& out, std::span<const float> values);
void put_u32s(std::ostream& out, std::span<const std::uint32_t> values);

// Readers throw FormatError naming the byte offset where input ran out.
class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  std::uint32_t u32();
  std::int32_t i32();
  float f32();
  void f32s(std::span<float> out);
  void u32s(std::span<std::uint32_t> out);
  void bytes(std::span<char> out);
  std::uint64_t offset() const { return offset_; }
  /// True when the stream is positioned exactly at end of file.
  bool at_eof();

 private:
  void read_exact(char* dst, std::size_t n);

  std::istream& in_;
  std::uint64_t offset_ = 0;
};

using Magic = std::array<char, 8>;

/// Named tensor container: magic, version, entry count, then entries of
/// float32 tensors or UTF-8 text blobs. Layout is documented in README.
struct TensorEntry {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

struct TensorArchive {
  std::map<std::string, TensorEntry> tensors;
  std::map<std::string, std::string> texts;

  void put(const std::string& name, const RowMatrixF& m);
  void put(const std::string& name, const VectorF& v);
  RowMatrixF matrix(const std::string& name) const;
  VectorF vector(const std::string& name) const;
  const std::string& text(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const Magic& magic, std::uint32_t version,
                   const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path, const Magic& magic,
                           std::uint32_t version);

}  // namespace saelab::binio

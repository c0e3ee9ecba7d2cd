#include "saelab/binio.hpp"

#include <bit>
#include <cstring>

namespace saelab::binio {
namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return __builtin_bswap32(v);
  }
}

constexpr std::uint32_t kTensorEntry = 0;
constexpr std::uint32_t kTextEntry = 1;

}  // namespace

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::uint32_t le = to_le(v);
  out.write(reinterpret_cast<const char*>(&le), sizeof(le));
}

void put_i32(std::ostream& out, std::int32_t v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

void put_f32s(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float v : values) put_f32(out, v);
  }
}

void put_u32s(std::ostream& out, std::span<const std::uint32_t> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (auto v : values) put_u32(out, v);
  }
}

void Reader::read_exact(char* dst, std::size_t n) {
  in_.read(dst, static_cast<std::streamsize>(n));
  const auto got = static_cast<std::size_t>(in_.gcount());
  if (got != n) {
    throw FormatError("truncated input at byte offset " + std::to_string(offset_ + got) +
                      " (needed " + std::to_string(n) + " bytes from offset " +
                      std::to_string(offset_) + ")");
  }
  offset_ += n;
}

std::uint32_t Reader::u32() {
  std::uint32_t v = 0;
  read_exact(reinterpret_cast<char*>(&v), sizeof(v));
  return to_le(v);
}

std::int32_t Reader::i32() { return std::bit_cast<std::int32_t>(u32()); }

float Reader::f32() { return std::bit_cast<float>(u32()); }

void Reader::f32s(std::span<float> out) {
  read_exact(reinterpret_cast<char*>(out.data()), out.size_bytes());
  if constexpr (std::endian::native != std::endian::little) {
    for (float& v : out) v = std::bit_cast<float>(to_le(std::bit_cast<std::uint32_t>(v)));
  }
}

void Reader::u32s(std::span<std::uint32_t> out) {
  read_exact(reinterpret_cast<char*>(out.data()), out.size_bytes());
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : out) v = to_le(v);
  }
}

void Reader::bytes(std::span<char> out) { read_exact(out.data(), out.size()); }

bool Reader::at_eof() { return in_.peek() == std::char_traits<char>::eof(); }

void TensorArchive::put(const std::string& name, const RowMatrixF& m) {
  TensorEntry e;
  e.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  e.data.assign(m.data(), m.data() + m.size());
  tensors[name] = std::move(e);
}

void TensorArchive::put(const std::string& name, const VectorF& v) {
  TensorEntry e;
  e.dims = {static_cast<std::uint32_t>(v.size())};
  e.data.assign(v.data(), v.data() + v.size());
  tensors[name] = std::move(e);
}

RowMatrixF TensorArchive::matrix(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end() || it->second.dims.size() != 2) {
    throw FormatError("archive has no 2-d tensor named '" + name + "'");
  }
  const auto& e = it->second;
  RowMatrixF m(e.dims[0], e.dims[1]);
  std::memcpy(m.data(), e.data.data(), e.data.size() * sizeof(float));
  return m;
}

VectorF TensorArchive::vector(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end() || it->second.dims.size() != 1) {
    throw FormatError("archive has no 1-d tensor named '" + name + "'");
  }
  const auto& e = it->second;
  VectorF v(e.dims[0]);
  std::memcpy(v.data(), e.data.data(), e.data.size() * sizeof(float));
  return v;
}

const std::string& TensorArchive::text(const std::string& name) const {
  auto it = texts.find(name);
  if (it == texts.end()) throw FormatError("archive has no text entry named '" + name + "'");
  return it->second;
}

void write_archive(const std::filesystem::path& path, const Magic& magic, std::uint32_t version,
                   const TensorArchive& archive) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(magic.data(), magic.size());
  put_u32(out, version);
  put_u32(out, static_cast<std::uint32_t>(archive.texts.size() + archive.tensors.size()));
  for (const auto& [name, body] : archive.texts) {
    put_u32(out, kTextEntry);
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(body.size()));
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
  }
  for (const auto& [name, e] : archive.tensors) {
    put_u32(out, kTensorEntry);
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(e.dims.size()));
    put_u32s(out, e.dims);
    put_f32s(out, e.data);
  }
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

TensorArchive read_archive(const std::filesystem::path& path, const Magic& magic,
                           std::uint32_t version) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingPrerequisite("cannot open '" + path.string() + "'");
  Reader r(in);
  Magic got{};
  r.bytes(got);
  if (got != magic) throw FormatError("bad magic in '" + path.string() + "'");
  const auto file_version = r.u32();
  if (file_version != version) {
    throw FormatError("version mismatch in '" + path.string() + "': file has " +
                      std::to_string(file_version) + ", expected " + std::to_string(version));
  }
  const auto n = r.u32();
  TensorArchive archive;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto kind = r.u32();
    std::string name(r.u32(), '\0');
    r.bytes(name);
    if (kind == kTextEntry) {
      std::string body(r.u32(), '\0');
      r.bytes(body);
      archive.texts[name] = std::move(body);
    } else if (kind == kTensorEntry) {
      TensorEntry e;
      e.dims.resize(r.u32());
      r.u32s(e.dims);
      std::size_t count = 1;
      for (auto d : e.dims) count *= d;
      e.data.resize(count);
      r.f32s(e.data);
      archive.tensors[name] = std::move(e);
    } else {
      throw FormatError("unknown entry kind " + std::to_string(kind) + " at byte offset " +
                        std::to_string(r.offset()));
    }
  }
  return archive;
}

}  // namespace saelab::binio

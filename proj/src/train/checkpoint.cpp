#include "unitoken/train/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

namespace unitoken {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'U', 'T', 'K', 'C'};

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::u8: return 1;
    case DType::u64: return 8;
  }
  throw ParseError(0, "unknown dtype code");
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw ParseError(pos_, "checkpoint truncated");
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in pieces.
  while (size > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint64_t CheckpointEntry::elements() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

const CheckpointEntry& Checkpoint::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw UsageError("checkpoint has no entry '" + name + "'");
  return it->second;
}

void Checkpoint::put_f32(const std::string& name, const Matrix<float>& m) {
  CheckpointEntry e;
  e.dtype = DType::f32;
  e.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  e.bytes.resize(static_cast<std::size_t>(m.size()) * 4);
  if (m.size() > 0) std::memcpy(e.bytes.data(), m.data(), e.bytes.size());
  entries_[name] = std::move(e);
}

void Checkpoint::put_u64(const std::string& name, const std::vector<std::uint64_t>& values) {
  CheckpointEntry e;
  e.dtype = DType::u64;
  e.dims = {values.size()};
  e.bytes.resize(values.size() * 8);
  if (!values.empty()) std::memcpy(e.bytes.data(), values.data(), e.bytes.size());
  entries_[name] = std::move(e);
}

void Checkpoint::put_text(const std::string& name, const std::string& text) {
  CheckpointEntry e;
  e.dtype = DType::u8;
  e.dims = {text.size()};
  e.bytes.assign(text.begin(), text.end());
  entries_[name] = std::move(e);
}

Matrix<float> Checkpoint::get_f32(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != DType::f32 || e.dims.empty() || e.dims.size() > 2) {
    throw UsageError("checkpoint entry '" + name + "' is not an fp32 matrix");
  }
  const Index rows = e.dims.size() == 2 ? static_cast<Index>(e.dims[0]) : 1;
  const Index cols = static_cast<Index>(e.dims.back());
  Matrix<float> m(rows, cols);
  if (m.size() > 0) std::memcpy(m.data(), e.bytes.data(), e.bytes.size());
  return m;
}

std::vector<std::uint64_t> Checkpoint::get_u64(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != DType::u64) throw UsageError("checkpoint entry '" + name + "' is not u64");
  std::vector<std::uint64_t> v(e.bytes.size() / 8);
  if (!v.empty()) std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
  return v;
}

std::string Checkpoint::get_text(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != DType::u8) throw UsageError("checkpoint entry '" + name + "' is not text");
  return std::string(e.bytes.begin(), e.bytes.end());
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, e] : entries_) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) put<std::uint64_t>(out, d);
    put<std::uint64_t>(out, offset);
    put<std::uint64_t>(out, e.bytes.size());
    offset += e.bytes.size();
  }
  for (const auto& [_, e] : entries_) out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  put<std::uint32_t>(out, crc32_of(out.data(), out.size()));
  return out;
}

Checkpoint Checkpoint::deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw ParseError(0, "not a UTKC checkpoint");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + body, 4);
  if (crc32_of(bytes.data(), body) != stored_crc) throw ParseError(body, "checkpoint CRC mismatch");

  Reader r(bytes, body);
  r.get_string(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw ParseError(4, "unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();

  struct Pending {
    std::string name;
    CheckpointEntry entry;
    std::uint64_t offset, length;
  };
  std::vector<Pending> pending;
  for (std::uint32_t i = 0; i < count; ++i) {
    Pending p;
    p.name = r.get_string(r.get<std::uint32_t>());
    p.entry.dtype = static_cast<DType>(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw ParseError(r.pos(), "implausible tensor rank");
    for (std::uint32_t k = 0; k < rank; ++k) p.entry.dims.push_back(r.get<std::uint64_t>());
    p.offset = r.get<std::uint64_t>();
    p.length = r.get<std::uint64_t>();
    if (p.length != p.entry.elements() * dtype_size(p.entry.dtype)) {
      throw ParseError(r.pos(), "entry '" + p.name + "' length does not match its shape");
    }
    pending.push_back(std::move(p));
  }
  const std::size_t payload = r.pos();
  Checkpoint ckpt;
  for (auto& p : pending) {
    if (p.offset > body - payload || p.length > body - payload - p.offset) {
      throw ParseError(payload, "entry '" + p.name + "' points outside the payload");
    }
    const auto* begin = bytes.data() + payload + p.offset;
    p.entry.bytes.assign(begin, begin + p.length);
    if (!ckpt.entries_.emplace(p.name, std::move(p.entry)).second) {
      throw ParseError(payload, "duplicate entry '" + p.name + "'");
    }
  }
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UsageError("write failed for " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace unitoken

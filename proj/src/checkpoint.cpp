#include "slmt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace slmt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else return DType::u8;
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  throw CheckpointError("checkpoint: unknown dtype tag");
}

template <typename U>
void append(std::vector<std::uint8_t>& out, U value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return value;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated file");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
std::vector<T> CheckpointEntry::values() const {
  if (dtype != dtype_of<T>()) throw CheckpointError("checkpoint: entry '" + name + "' has a different dtype");
  std::vector<T> out(bytes.size() / sizeof(T));
  std::memcpy(out.data(), bytes.data(), out.size() * sizeof(T));
  return out;
}

template <typename T>
void Checkpoint::put(const std::string& name, ad::Shape shape, std::span<const T> values) {
  if (find(name)) throw CheckpointError("checkpoint: duplicate entry '" + name + "'");
  if (ad::numel(shape) != values.size()) throw CheckpointError("checkpoint: shape/size mismatch for '" + name + "'");
  CheckpointEntry e;
  e.name = name;
  e.dtype = dtype_of<T>();
  e.shape = std::move(shape);
  e.bytes.resize(values.size() * sizeof(T));
  std::memcpy(e.bytes.data(), values.data(), e.bytes.size());
  entries.push_back(std::move(e));
}

void Checkpoint::put_text(const std::string& name, const std::string& text) {
  std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
  put<std::uint8_t>(name, {text.size()}, bytes);
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
  if (const auto* e = find(name)) return *e;
  throw CheckpointError("checkpoint: missing entry '" + name + "'");
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out{'S', 'L', 'M', 'T'};
  append<std::uint32_t>(out, version);
  append<std::uint64_t>(out, config_digest);
  append<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    append<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    append<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    append<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) append<std::uint64_t>(out, d);
    out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  }
  return out;
}

Checkpoint Checkpoint::parse(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), "SLMT", 4) != 0) throw CheckpointError("checkpoint: bad magic");
  Checkpoint c;
  c.version = r.get<std::uint32_t>();
  if (c.version != kVersion) {
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(c.version));
  }
  c.config_digest = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name_len = r.get<std::uint32_t>();
    auto name = r.take(name_len);
    e.name.assign(name.begin(), name.end());
    e.dtype = static_cast<DType>(r.get<std::uint8_t>());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.get<std::uint64_t>());
    auto payload = r.take(ad::numel(e.shape) * dtype_size(e.dtype));
    e.bytes.assign(payload.begin(), payload.end());
    c.entries.push_back(std::move(e));
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes");
  return c;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  // Write-then-rename so an interrupted run never leaves a torn checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return parse(read_file_bytes(path)); }

template std::vector<float> CheckpointEntry::values<float>() const;
template std::vector<double> CheckpointEntry::values<double>() const;
template std::vector<std::uint8_t> CheckpointEntry::values<std::uint8_t>() const;
template void Checkpoint::put<float>(const std::string&, ad::Shape, std::span<const float>);
template void Checkpoint::put<double>(const std::string&, ad::Shape, std::span<const double>);
template void Checkpoint::put<std::uint8_t>(const std::string&, ad::Shape, std::span<const std::uint8_t>);

}  // namespace slmt

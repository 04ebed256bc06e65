#include "numerics/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace mingtok::nn {

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint16_t u16() {
    need(2);
    auto v = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes_[pos_]) |
                                        (static_cast<unsigned char>(bytes_[pos_ + 1]) << 8));
    pos_ += 2;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("container: truncated data");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_container(const std::vector<NamedArray>& entries) {
  std::string out = "MTOK";
  put_u32(out, kContainerVersion);
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw ValidationError("container: name too long: " + e.name.substr(0, 32));
    if (shape_numel(e.shape) != e.data.size()) {
      throw ValidationError("container: '" + e.name + "' shape " + shape_str(e.shape) + " does not match data size");
    }
    put_u16(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : e.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

std::vector<NamedArray> decode_container(const std::string& bytes) {
  Reader r(bytes);
  if (r.str(4) != "MTOK") throw IoError("container: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kContainerVersion) throw IoError("container: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<NamedArray> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray e;
    e.name = r.str(r.u16());
    const std::uint32_t ndim = r.u32();
    for (std::uint32_t d = 0; d < ndim; ++d) e.shape.push_back(r.u32());
    const std::size_t n = shape_numel(e.shape);
    e.data.resize(n);
    for (std::size_t j = 0; j < n; ++j) e.data[j] = std::bit_cast<float>(r.u32());
    out.push_back(std::move(e));
  }
  if (!r.done()) throw IoError("container: trailing bytes");
  return out;
}

void write_container(const std::filesystem::path& path, const std::vector<NamedArray>& entries) {
  const std::string bytes = encode_container(entries);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

std::vector<NamedArray> read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return decode_container(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

const NamedArray& find_entry(const std::vector<NamedArray>& entries, const std::string& name) {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw IoError("container: missing entry '" + name + "'");
}

}  // namespace mingtok::nn

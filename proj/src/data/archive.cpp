#include "sona/data/archive.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "sona/core/error.hpp"

namespace sona::data {

namespace {

constexpr char kMagic[4] = {'S', 'O', 'N', 'A'};

void check_name(const std::string& name) {
  if (name.empty() || name.size() > 255) throw ArgumentError("archive entry name must be 1..255 bytes");
  for (unsigned char c : name) {
    if (c < 0x20 || c > 0x7e) throw ArgumentError("archive entry name must be printable ASCII: " + name);
  }
}

class Writer {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}

  void need(std::size_t n, const char* what) const {
    if (buf.size() - pos < n) {
      throw FormatError("archive truncated at offset " + std::to_string(pos) + " while reading " + what);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return buf[pos++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return s;
  }
  [[noreturn]] void fail(std::size_t at, const std::string& msg) const {
    throw FormatError("archive format error at offset " + std::to_string(at) + ": " + msg);
  }

  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
};

}  // namespace

void Archive::add(std::string name, Tensor tensor) {
  check_name(name);
  if (contains(name)) throw ArgumentError("duplicate archive entry: " + name);
  if (tensor.ndim() == 0 || tensor.ndim() > 255) throw ArgumentError("archive tensors need 1..255 dimensions: " + name);
  entries_.push_back({std::move(name), std::move(tensor)});
}

void Archive::add(std::string name, std::string text) {
  check_name(name);
  if (contains(name)) throw ArgumentError("duplicate archive entry: " + name);
  entries_.push_back({std::move(name), std::move(text)});
}

const Archive::Entry* Archive::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

bool Archive::contains(const std::string& name) const { return find(name) != nullptr; }

const Tensor& Archive::tensor(const std::string& name) const {
  const Entry* e = find(name);
  if (!e) throw FormatError("archive has no entry '" + name + "'");
  if (const auto* t = std::get_if<Tensor>(&e->value)) return *t;
  throw FormatError("archive entry '" + name + "' is text, not a tensor");
}

const std::string& Archive::text(const std::string& name) const {
  const Entry* e = find(name);
  if (!e) throw FormatError("archive has no entry '" + name + "'");
  if (const auto* s = std::get_if<std::string>(&e->value)) return *s;
  throw FormatError("archive entry '" + name + "' is a tensor, not text");
}

std::vector<std::uint8_t> encode_archive(const Archive& archive) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kArchiveVersion);
  w.u32(static_cast<std::uint32_t>(archive.size()));
  for (const auto& e : archive.entries()) {
    w.u8(static_cast<std::uint8_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    if (const auto* t = std::get_if<Tensor>(&e.value)) {
      w.u8(0);
      w.u8(static_cast<std::uint8_t>(t->ndim()));
      for (auto d : t->shape()) w.u32(static_cast<std::uint32_t>(d));
      for (real v : t->data()) w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      const auto& s = std::get<std::string>(e.value);
      w.u8(1);
      w.u8(0);
      w.u32(static_cast<std::uint32_t>(s.size()));
      w.bytes(s.data(), s.size());
    }
  }
  return std::move(w.out);
}

Archive decode_archive(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::string magic = r.str(4, "magic");
  if (magic != std::string(kMagic, 4)) r.fail(0, "bad magic");
  const std::size_t version_at = r.pos;
  const std::uint32_t version = r.u32("version");
  if (version != kArchiveVersion) r.fail(version_at, "unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32("entry count");
  Archive out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_at = r.pos;
    const std::uint8_t name_len = r.u8("name length");
    if (name_len == 0) r.fail(entry_at, "empty entry name");
    std::string name = r.str(name_len, "entry name");
    const std::size_t kind_at = r.pos;
    const std::uint8_t kind = r.u8("entry kind");
    const std::size_t ndim_at = r.pos;
    const std::uint8_t ndim = r.u8("ndim");
    try {
      if (kind == 0) {
        if (ndim == 0) r.fail(ndim_at, "tensor with zero dimensions");
        Shape shape(ndim);
        std::uint64_t numel = 1;
        for (auto& d : shape) {
          const std::size_t dim_at = r.pos;
          d = r.u32("dimension");
          if (d == 0) r.fail(dim_at, "zero-sized dimension");
          numel *= d;
          if (numel > (bytes.size() - r.pos) / 4 + 1) r.fail(dim_at, "dimensions exceed remaining payload");
        }
        r.need(numel * 4, "tensor payload");
        std::vector<real> data(numel);
        for (auto& v : data) {
          v = static_cast<real>(std::bit_cast<float>(r.u32("tensor payload")));
        }
        out.add(std::move(name), Tensor(std::move(shape), std::move(data)));
      } else if (kind == 1) {
        if (ndim != 0) r.fail(ndim_at, "text entry with non-zero ndim");
        const std::uint32_t len = r.u32("text length");
        out.add(std::move(name), r.str(len, "text payload"));
      } else {
        r.fail(kind_at, "unknown entry kind " + std::to_string(kind));
      }
    } catch (const ArgumentError& e) {
      r.fail(entry_at, e.what());
    }
  }
  if (r.pos != bytes.size()) r.fail(r.pos, "trailing bytes after last entry");
  return out;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    f.flush();
    if (!f) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_archive(const Archive& archive, const std::filesystem::path& path) {
  const auto bytes = encode_archive(archive);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open archive " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_archive(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Tensor ints_to_tensor(const std::vector<std::int32_t>& values) {
  if (values.empty()) throw ArgumentError("cannot store an empty integer list as a tensor");
  std::vector<real> data(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (std::abs(values[i]) > (1 << 24)) throw ArgumentError("integer not exactly representable in f32");
    data[i] = static_cast<real>(values[i]);
  }
  return Tensor(Shape{values.size()}, std::move(data));
}

std::vector<std::int32_t> tensor_to_ints(const Tensor& t) {
  std::vector<std::int32_t> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const real v = t[i];
    if (v != std::floor(v)) throw FormatError("non-integer value in integer tensor");
    out[i] = static_cast<std::int32_t>(v);
  }
  return out;
}

}  // namespace sona::data

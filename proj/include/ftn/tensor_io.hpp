#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "ftn/tensor.hpp"

namespace ftn {

// Little-endian primitive writers/readers shared by the tensor and checkpoint
// formats. Readers report the byte offset at which input ran out.
namespace binio {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
void put(std::ostream& os, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  template <class U>
  U get(const char* what) {
    unsigned char buf[sizeof(U)];
    read_bytes(buf, sizeof(U), what);
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
  }

  void read_bytes(void* dst, std::size_t n, const char* what) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw FormatError(std::string("truncated input while reading ") + what + " at byte offset " +
                        std::to_string(offset_));
    offset_ += n;
  }

  std::size_t offset() const { return offset_; }
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& is_;
  std::size_t offset_ = 0;
};

}  // namespace binio

inline constexpr char kTensorMagic[4] = {'F', 'T', 'N', 'T'};
inline constexpr std::uint8_t kTensorFormatVersion = 1;

template <class T>
void write_tensor(std::ostream& os, const BasicTensor<T>& t) {
  if (t.rank() > 255) throw FormatError("tensor rank exceeds 255");
  os.write(kTensorMagic, 4);
  binio::put<std::uint8_t>(os, kTensorFormatVersion);
  binio::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) binio::put<std::uint64_t>(os, e);
  for (T v : t.data()) binio::put<float>(os, static_cast<float>(v));
}

inline Tensor read_tensor(std::istream& is) {
  binio::Reader r(is);
  char magic[4];
  r.read_bytes(magic, 4, "magic");
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic at byte offset 0");
  const auto version = r.get<std::uint8_t>("version");
  if (version != kTensorFormatVersion)
    throw FormatError("unsupported tensor format version " + std::to_string(version) + " at byte offset 4");
  const auto rank = r.get<std::uint8_t>("rank");
  Shape shape(rank);
  for (auto& e : shape) {
    e = r.get<std::uint64_t>("extent");
    if (e == 0) throw FormatError("zero extent at byte offset " + std::to_string(r.offset() - 8));
  }
  std::vector<float> data(numel_of(shape));
  for (auto& v : data) v = r.get<float>("payload");
  if (!r.at_end()) throw FormatError("trailing bytes after tensor payload at byte offset " + std::to_string(r.offset()));
  return Tensor(std::move(shape), std::move(data));
}

template <class T>
void save_tensor(const std::string& path, const BasicTensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_tensor(os, t);
  if (!os) throw FormatError("write failed for " + path);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_tensor(is);
}

}  // namespace ftn

#pragma once

#include <cctype>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "ftn/tensor.hpp"

namespace ftn {

// Binary PPM (P6, 8-bit) to a [1,H,W,3] tensor in [0,1].
inline Tensor read_ppm(std::istream& is, const std::string& source = "image") {
  auto token = [&]() {
    std::string t;
    int c = is.get();
    while (c != EOF) {
      if (c == '#') {
        while (c != EOF && c != '\n') c = is.get();
      } else if (!std::isspace(c)) {
        break;
      }
      c = is.get();
    }
    while (c != EOF && !std::isspace(c)) {
      t.push_back(static_cast<char>(c));
      c = is.get();
    }
    return t;
  };
  if (token() != "P6") throw FormatError(source + ": not a binary PPM (P6) file");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw FormatError(source + ": malformed PPM header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw FormatError(source + ": unsupported PPM geometry or depth");
  std::vector<unsigned char> bytes(w * h * 3);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(is.gcount()) != bytes.size())
    throw FormatError(source + ": PPM pixel data truncated (" + std::to_string(is.gcount()) + " of " +
                      std::to_string(bytes.size()) + " bytes)");
  std::vector<float> data(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) data[i] = static_cast<float>(bytes[i]) / static_cast<float>(maxval);
  return Tensor({1, h, w, 3}, std::move(data));
}

inline Tensor load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open image " + path);
  return read_ppm(is, path);
}

template <class T>
void save_ppm(const std::string& path, const BasicTensor<T>& img) {
  if (img.rank() != 4 || img.dim(0) != 1 || img.dim(3) != 3)
    throw DimensionError("save_ppm expects [1,H,W,3], got " + shape_str(img.shape()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << "P6\n" << img.dim(2) << ' ' << img.dim(1) << "\n255\n";
  for (T v : img.data()) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    os.put(static_cast<char>(static_cast<unsigned char>(c * 255.0 + 0.5)));
  }
}

// Label map as binary PGM (P5); class ids must fit in a byte.
inline void save_label_pgm(const std::string& path, std::span<const int> labels, std::size_t h, std::size_t w) {
  if (labels.size() != h * w) throw DimensionError("label map size does not match " + std::to_string(h) + "x" +
                                                   std::to_string(w));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << "P5\n" << w << ' ' << h << "\n255\n";
  for (int v : labels) {
    if (v < 0 || v > 255) throw DataError("class id " + std::to_string(v) + " does not fit in a PGM byte");
    os.put(static_cast<char>(static_cast<unsigned char>(v)));
  }
}

}  // namespace ftn

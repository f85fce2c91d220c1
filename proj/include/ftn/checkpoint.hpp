#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include "ftn/config_io.hpp"
#include "ftn/tensor_io.hpp"

namespace ftn {

// Checkpoint layout (little endian):
//   "FTNC" | u16 version | u32 config bytes | config text | u32 records |
//   records: u16 name bytes | name | u8 rank | u64 extents... | f32 payload
// Records appear in the model's visit order, auxiliary heads last.
inline constexpr char kCheckpointMagic[4] = {'F', 'T', 'N', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::uint64_t checkpoint_header_bytes(const std::string& config_text) {
  return 4 + 2 + 4 + config_text.size() + 4;
}

inline std::uint64_t checkpoint_record_bytes(const std::string& name, const Shape& shape) {
  return 2 + name.size() + 1 + 8 * shape.size() + 4 * numel_of(shape);
}

template <class T>
void write_checkpoint(std::ostream& os, FTNModel<T>& model) {
  const auto config = to_text(model.config);
  os.write(kCheckpointMagic, 4);
  binio::put<std::uint16_t>(os, kCheckpointVersion);
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(config.size()));
  os.write(config.data(), static_cast<std::streamsize>(config.size()));
  auto params = named_parameters<T>(model);
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    binio::put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    binio::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) binio::put<std::uint64_t>(os, e);
    for (T v : t.data()) binio::put<float>(os, static_cast<float>(v));
  }
}

template <class T = float>
FTNModel<T> read_checkpoint(std::istream& is) {
  binio::Reader r(is);
  char magic[4];
  r.read_bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("bad checkpoint magic at byte offset 0");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " at byte offset 4 (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto config_len = r.get<std::uint32_t>("config length");
  std::string text(config_len, '\0');
  r.read_bytes(text.data(), config_len, "config text");
  ModelConfig config;
  try {
    config = parse_model_config(text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("embedded config is invalid: ") + e.what());
  }
  auto model = FTNModel<T>::create(config);
  auto params = named_parameters<T>(model);
  const auto count_offset = r.offset();
  const auto count = r.get<std::uint32_t>("record count");
  if (count != params.size())
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors but its config needs " +
                      std::to_string(params.size()) + " (byte offset " + std::to_string(count_offset) + ")");
  for (auto& [expected_name, t] : params) {
    const auto record_offset = r.offset();
    const auto name_len = r.get<std::uint16_t>("name length");
    std::string name(name_len, '\0');
    r.read_bytes(name.data(), name_len, "tensor name");
    if (name != expected_name)
      throw FormatError("record at byte offset " + std::to_string(record_offset) + " is '" + name + "', expected '" +
                        expected_name + "'");
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.get<std::uint64_t>("extent");
    if (shape != t.shape())
      throw FormatError("shape mismatch for '" + name + "': file has " + shape_str(shape) + ", config implies " +
                        shape_str(t.shape()));
    auto dst = t.mutable_data();
    for (auto& v : dst) v = static_cast<T>(r.get<float>("tensor payload"));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last record at byte offset " + std::to_string(r.offset()));
  return model;
}

template <class T>
void save_checkpoint(const std::string& path, FTNModel<T>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_checkpoint(os, model);
  if (!os) throw FormatError("write failed for " + path);
}

template <class T = float>
FTNModel<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path);
  return read_checkpoint<T>(is);
}

}  // namespace ftn

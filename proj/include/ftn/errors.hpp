#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ftn {

// Every failure surfaced by the library carries a short class name ("layout",
// "dimension", ...) so the CLI can report a one-line diagnostic.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define FTN_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(tag, what) {}      \
  };

FTN_DEFINE_ERROR(DimensionError, "dimension")
FTN_DEFINE_ERROR(LayoutError, "layout")
FTN_DEFINE_ERROR(ParameterError, "parameter")
FTN_DEFINE_ERROR(UsageError, "usage")
FTN_DEFINE_ERROR(NumericError, "numeric")
FTN_DEFINE_ERROR(DataError, "data")
FTN_DEFINE_ERROR(ConfigError, "config")
FTN_DEFINE_ERROR(FormatError, "format")
FTN_DEFINE_ERROR(TrainingError, "training")
FTN_DEFINE_ERROR(DerivationError, "derivation")

#undef FTN_DEFINE_ERROR

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace ftn

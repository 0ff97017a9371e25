#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dpw {

// Every failure raised by the library carries one of these codes so callers
// (and the CLI exit-code mapping) can tell malformed input from misuse.
enum class Errc {
  invalid_argument,
  shape_mismatch,
  out_of_range,
  bad_magic,
  unsupported_version,
  truncated,
  malformed_header,
  shape_chain,
  missing_tensor,
  count_mismatch,
  missing_record,
  io,
};

constexpr std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::out_of_range: return "out_of_range";
    case Errc::bad_magic: return "bad_magic";
    case Errc::unsupported_version: return "unsupported_version";
    case Errc::truncated: return "truncated";
    case Errc::malformed_header: return "malformed_header";
    case Errc::shape_chain: return "shape_chain";
    case Errc::missing_tensor: return "missing_tensor";
    case Errc::count_mismatch: return "count_mismatch";
    case Errc::missing_record: return "missing_record";
    case Errc::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace dpw

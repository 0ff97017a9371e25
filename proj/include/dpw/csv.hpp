#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dpw/error.hpp"

namespace dpw {

/// Shortest round-trip decimal form of v.
inline std::string format_real(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    require(static_cast<bool>(out_), Errc::io, "cannot open '" + path + "' for writing");
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << fields[i];
    }
    out_ << '\n';
    require(static_cast<bool>(out_), Errc::io, "write to '" + path_ + "' failed");
  }

  // Leading text fields followed by reals.
  void row(std::vector<std::string> head, const std::vector<double>& values) {
    for (double v : values) head.push_back(format_real(v));
    row(head);
  }

 private:
  std::ofstream out_;
  std::string path_;
};

}  // namespace dpw

#include "metaseg/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "metaseg/common.hpp"

namespace metaseg {

std::string fmt_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

std::string CsvTable::serialize() const {
  std::string out;
  auto emit_row = [&out](const std::vector<std::string>& row) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += row[i];
    }
    out += '\n';
  };
  emit_row(header);
  for (const auto& r : rows) emit_row(r);
  return out;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  require<FormatError>(f.good(), "cannot open for writing: " + path);
  f << content;
  require<FormatError>(f.good(), "write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require<FormatError>(f.good(), "cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace metaseg

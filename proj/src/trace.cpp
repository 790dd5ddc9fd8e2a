#include "prunekit/trace.hpp"

#include <charconv>
#include <sstream>

#include "prunekit/errors.hpp"

namespace prunekit {

namespace fs = std::filesystem;

std::string format_double(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

std::string join(std::span<const double> values, char sep) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += sep;
    out += format_double(values[i]);
  }
  return out;
}

std::string join(std::span<const std::string> values, char sep) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += sep;
    out += values[i];
  }
  return out;
}

namespace {

std::string header_line(const std::vector<std::string>& header) {
  std::string line;
  for (std::size_t i = 0; i < header.size(); ++i) line += (i ? "," : "") + header[i];
  return line;
}

}  // namespace

CsvTrace::CsvTrace(const fs::path& path, std::vector<std::string> header)
    : path_(path), columns_(header.size()) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) throw Error("cannot open trace " + path.string());
  out_ << header_line(header) << '\n';
  out_.flush();
}

CsvTrace CsvTrace::resume(const fs::path& path, std::vector<std::string> header, std::size_t keep_rows) {
  std::vector<std::string> lines;
  {
    std::ifstream in(path);
    if (!in) throw LoadError(LoadErrorKind::missing_file, path.string());
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
  }
  if (lines.empty() || lines.front() != header_line(header))
    throw LoadError(LoadErrorKind::corrupt, path.string() + ": trace header does not match");
  if (lines.size() < keep_rows + 1)
    throw LoadError(LoadErrorKind::corrupt, path.string() + ": trace shorter than checkpoint");
  CsvTrace t;
  t.path_ = path;
  t.columns_ = header.size();
  t.out_.open(path, std::ios::trunc);
  if (!t.out_) throw Error("cannot open trace " + path.string());
  for (std::size_t i = 0; i <= keep_rows; ++i) t.out_ << lines[i] << '\n';
  t.out_.flush();
  return t;
}

void CsvTrace::row(const std::vector<std::string>& fields) {
  if (fields.size() != columns_) throw ContractError("trace row has wrong column count");
  for (const auto& f : fields)
    if (f.find_first_of(",\n\"") != std::string::npos) throw ContractError("trace field needs quoting: " + f);
  for (std::size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << fields[i];
  out_ << '\n';
  out_.flush();
}

}  // namespace prunekit

#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace prunekit {

/// Shortest decimal text that round-trips to the same double.
std::string format_double(double value);

/// Joins values with `sep`, formatting doubles with format_double().
std::string join(std::span<const double> values, char sep = ';');
std::string join(std::span<const std::string> values, char sep = '+');

/// Append-only CSV log with a fixed header.
class CsvTrace {
 public:
  /// Starts a fresh file holding only the header.
  CsvTrace(const std::filesystem::path& path, std::vector<std::string> header);

  /// Reopens an existing log for a resumed run, keeping the header and the
  /// first `keep_rows` data rows; anything after them is discarded.
  static CsvTrace resume(const std::filesystem::path& path, std::vector<std::string> header,
                         std::size_t keep_rows);

  void row(const std::vector<std::string>& fields);
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  CsvTrace() = default;
  std::filesystem::path path_;
  std::size_t columns_ = 0;
  std::ofstream out_;
};

}  // namespace prunekit

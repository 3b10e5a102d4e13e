#pragma once

#include <functional>
#include <string>
#include <vector>

#include "evseq/common.hpp"

namespace evseq::csv {

// RFC 4180: quoted fields may contain commas, quotes ("" escape) and newlines.
// Header row is required. Rows are streamed to the callback; the file is never
// held in memory whole.
struct Reader {
  std::vector<std::string> header;
  // row callback receives fields plus the 1-based data row number (header = row 1).
  static void for_each_row(const std::string& path,
                           std::vector<std::string>& header_out,
                           const std::function<void(const std::vector<std::string>&, size_t)>& on_row);
};

class Writer {
 public:
  explicit Writer(const std::string& path);
  ~Writer();
  Writer(const Writer&) = delete;
  Writer& operator=(const Writer&) = delete;

  void write_row(const std::vector<std::string>& fields);
  void close();

 private:
  struct Impl;
  Impl* impl_;
};

std::string escape_field(const std::string& field);

}  // namespace evseq::csv

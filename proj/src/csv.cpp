#include "evseq/csv.hpp"

#include <fstream>

namespace evseq::csv {

namespace {

// Pulls one logical CSV record (handles quoted newlines). Returns false at EOF
// with no data consumed.
bool read_record(std::istream& in, std::vector<std::string>& fields) {
  fields.clear();
  std::string field;
  bool in_quotes = false;
  bool any = false;
  int c;
  while ((c = in.get()) != EOF) {
    any = true;
    char ch = static_cast<char>(c);
    if (in_quotes) {
      if (ch == '"') {
        if (in.peek() == '"') {
          in.get();
          field.push_back('"');
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(ch);
      }
    } else {
      if (ch == '"') {
        in_quotes = true;
      } else if (ch == ',') {
        fields.push_back(std::move(field));
        field.clear();
      } else if (ch == '\n') {
        if (!field.empty() && field.back() == '\r') field.pop_back();
        fields.push_back(std::move(field));
        return true;
      } else {
        field.push_back(ch);
      }
    }
  }
  if (!any) return false;
  if (!field.empty() && field.back() == '\r') field.pop_back();
  fields.push_back(std::move(field));
  return true;
}

}  // namespace

void Reader::for_each_row(const std::string& path, std::vector<std::string>& header_out,
                          const std::function<void(const std::vector<std::string>&, size_t)>& on_row) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrKind::Io, "cannot open CSV file '" + path + "'");
  std::vector<std::string> fields;
  if (!read_record(in, fields)) fail(ErrKind::Format, "CSV file '" + path + "' is empty (header row required)");
  header_out = fields;
  size_t row_no = 1;
  while (read_record(in, fields)) {
    ++row_no;
    if (fields.size() == 1 && fields[0].empty()) continue;  // trailing blank line
    if (fields.size() != header_out.size()) {
      fail(ErrKind::Format, "CSV file '" + path + "' row " + std::to_string(row_no) + ": expected " +
                                std::to_string(header_out.size()) + " fields, got " +
                                std::to_string(fields.size()));
    }
    on_row(fields, row_no);
  }
}

std::string escape_field(const std::string& f) {
  bool needs_quote = f.find_first_of(",\"\n\r") != std::string::npos;
  if (!needs_quote) return f;
  std::string out = "\"";
  for (char c : f) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

struct Writer::Impl {
  std::ofstream out;
  std::string path;
};

Writer::Writer(const std::string& path) : impl_(new Impl{std::ofstream(path, std::ios::binary), path}) {
  if (!impl_->out) {
    std::string p = impl_->path;
    delete impl_;
    impl_ = nullptr;
    fail(ErrKind::Io, "cannot open CSV file for writing '" + p + "'");
  }
}

Writer::~Writer() { delete impl_; }

void Writer::write_row(const std::vector<std::string>& fields) {
  std::string line;
  for (size_t i = 0; i < fields.size(); ++i) {
    if (i) line.push_back(',');
    line += escape_field(fields[i]);
  }
  line.push_back('\n');
  impl_->out.write(line.data(), static_cast<std::streamsize>(line.size()));
}

void Writer::close() {
  impl_->out.close();
  if (!impl_->out) fail(ErrKind::Io, "error writing CSV file '" + impl_->path + "'");
}

}  // namespace evseq::csv

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evseq/common.hpp"

namespace evseq::parquet {

// Minimal self-contained Parquet subset: PLAIN encoding, uncompressed, data
// page v1, single row group. Supports flat required/optional columns of
// INT64 / DOUBLE / BYTE_ARRAY and one- or two-level LIST nesting with
// required elements. The reader handles exactly what the writer emits.

enum class PhysType { Int64, Double, ByteArray };

struct Column {
  std::string name;
  PhysType type = PhysType::Int64;
  int list_depth = 0;  // 0 flat, 1 list<T>, 2 list<list<T>>
  bool optional = false;  // flat columns only

  // Leaf storage; exactly one of these is populated according to `type`.
  std::vector<int64_t> i64;
  std::vector<double> f64;
  std::vector<std::string> str;

  // For optional flat columns: one entry per row, 1 = defined.
  std::vector<uint8_t> valid;

  // Nesting offsets. depth>=1: offsets1.size() == num_rows + 1 and maps rows
  // to inner ranges. depth==2: offsets2.size() == offsets1.back() + 1 and maps
  // inner lists to leaf ranges.
  std::vector<int64_t> offsets1;
  std::vector<int64_t> offsets2;

  size_t leaf_count() const {
    switch (type) {
      case PhysType::Int64: return i64.size();
      case PhysType::Double: return f64.size();
      case PhysType::ByteArray: return str.size();
    }
    return 0;
  }
};

struct TableData {
  int64_t num_rows = 0;
  std::vector<Column> columns;

  const Column& col(const std::string& name) const;
  const Column* find(const std::string& name) const;
};

void write_file(const std::string& path, const TableData& table);
TableData read_file(const std::string& path);

// Convenience builders.
Column make_i64(std::string name, std::vector<int64_t> values);
Column make_f64(std::string name, std::vector<double> values);
Column make_str(std::string name, std::vector<std::string> values);

}  // namespace evseq::parquet

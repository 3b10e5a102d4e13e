#include "evseq/parquet.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace evseq::parquet {

namespace {

// ---------------------------------------------------------------------------
// Thrift compact protocol (just enough for parquet metadata).

enum TType : uint8_t {
  T_STOP = 0,
  T_TRUE = 1,
  T_FALSE = 2,
  T_BYTE = 3,
  T_I16 = 4,
  T_I32 = 5,
  T_I64 = 6,
  T_DOUBLE = 7,
  T_BINARY = 8,
  T_LIST = 9,
  T_SET = 10,
  T_MAP = 11,
  T_STRUCT = 12,
};

class CompactWriter {
 public:
  std::string buf;

  void varint(uint64_t v) {
    while (v >= 0x80) {
      buf.push_back(static_cast<char>((v & 0x7f) | 0x80));
      v >>= 7;
    }
    buf.push_back(static_cast<char>(v));
  }
  void zigzag(int64_t v) { varint((static_cast<uint64_t>(v) << 1) ^ static_cast<uint64_t>(v >> 63)); }

  void struct_begin() { fid_stack_.push_back(last_fid_); last_fid_ = 0; }
  void struct_end() {
    buf.push_back(0);
    last_fid_ = fid_stack_.back();
    fid_stack_.pop_back();
  }

  void field(int16_t id, TType type) {
    int16_t delta = static_cast<int16_t>(id - last_fid_);
    if (delta >= 1 && delta <= 15) {
      buf.push_back(static_cast<char>((delta << 4) | type));
    } else {
      buf.push_back(static_cast<char>(type));
      zigzag(id);
    }
    last_fid_ = id;
  }

  void i32_field(int16_t id, int32_t v) { field(id, T_I32); zigzag(v); }
  void i64_field(int16_t id, int64_t v) { field(id, T_I64); zigzag(v); }
  void string_field(int16_t id, const std::string& s) {
    field(id, T_BINARY);
    varint(s.size());
    buf += s;
  }
  void list_field(int16_t id, TType elem, size_t n) {
    field(id, T_LIST);
    list_header(elem, n);
  }
  void list_header(TType elem, size_t n) {
    if (n < 15) {
      buf.push_back(static_cast<char>((n << 4) | elem));
    } else {
      buf.push_back(static_cast<char>(0xF0 | elem));
      varint(n);
    }
  }

 private:
  std::vector<int16_t> fid_stack_;
  int16_t last_fid_ = 0;
};

class CompactReader {
 public:
  CompactReader(const uint8_t* p, const uint8_t* end) : p_(p), end_(end) {}

  uint64_t varint() {
    uint64_t v = 0;
    int shift = 0;
    while (true) {
      if (p_ >= end_) fail(ErrKind::Format, "parquet metadata truncated (varint)");
      uint8_t b = *p_++;
      v |= static_cast<uint64_t>(b & 0x7f) << shift;
      if (!(b & 0x80)) break;
      shift += 7;
    }
    return v;
  }
  int64_t zigzag() {
    uint64_t v = varint();
    return static_cast<int64_t>(v >> 1) ^ -static_cast<int64_t>(v & 1);
  }

  // Returns false at struct end; otherwise sets type/id.
  bool field_header(TType& type, int16_t& id) {
    if (p_ >= end_) fail(ErrKind::Format, "parquet metadata truncated (field)");
    uint8_t b = *p_++;
    if (b == 0) return false;
    uint8_t delta = b >> 4;
    type = static_cast<TType>(b & 0x0f);
    if (delta == 0) {
      id = static_cast<int16_t>(zigzag());
    } else {
      id = static_cast<int16_t>(last_fid_ + delta);
    }
    last_fid_ = id;
    return true;
  }

  void list_header(TType& elem, uint64_t& n) {
    if (p_ >= end_) fail(ErrKind::Format, "parquet metadata truncated (list)");
    uint8_t b = *p_++;
    elem = static_cast<TType>(b & 0x0f);
    n = b >> 4;
    if (n == 15) n = varint();
  }

  std::string binary() {
    uint64_t n = varint();
    if (p_ + n > end_) fail(ErrKind::Format, "parquet metadata truncated (binary)");
    std::string s(reinterpret_cast<const char*>(p_), n);
    p_ += n;
    return s;
  }

  void skip(TType type) {
    switch (type) {
      case T_TRUE:
      case T_FALSE:
        break;
      case T_BYTE: ++p_; break;
      case T_I16:
      case T_I32:
      case T_I64: zigzag(); break;
      case T_DOUBLE: p_ += 8; break;
      case T_BINARY: binary(); break;
      case T_LIST:
      case T_SET: {
        TType elem;
        uint64_t n;
        list_header(elem, n);
        for (uint64_t i = 0; i < n; ++i) skip(elem);
        break;
      }
      case T_STRUCT: {
        int16_t saved = last_fid_;
        last_fid_ = 0;
        TType t;
        int16_t id;
        while (field_header(t, id)) skip(t);
        last_fid_ = saved;
        break;
      }
      default: fail(ErrKind::Format, "parquet metadata: unsupported thrift type");
    }
  }

  // Enter/leave nested struct fields.
  int16_t push_struct() {
    int16_t saved = last_fid_;
    last_fid_ = 0;
    return saved;
  }
  void pop_struct(int16_t saved) { last_fid_ = saved; }

  const uint8_t* pos() const { return p_; }

 private:
  const uint8_t* p_;
  const uint8_t* end_;
  int16_t last_fid_ = 0;
};

// ---------------------------------------------------------------------------
// Parquet enums (file format values).

constexpr int32_t PQ_BOOLEAN = 0, PQ_INT64 = 2, PQ_DOUBLE = 5, PQ_BYTE_ARRAY = 6;
constexpr int32_t REP_REQUIRED = 0, REP_OPTIONAL = 1, REP_REPEATED = 2;
constexpr int32_t ENC_PLAIN = 0, ENC_RLE = 3;
constexpr int32_t CODEC_UNCOMPRESSED = 0;
constexpr int32_t CT_UTF8 = 0, CT_LIST = 3;
constexpr int32_t PAGE_DATA = 0;

int32_t phys_code(PhysType t) {
  switch (t) {
    case PhysType::Int64: return PQ_INT64;
    case PhysType::Double: return PQ_DOUBLE;
    case PhysType::ByteArray: return PQ_BYTE_ARRAY;
  }
  return PQ_INT64;
}

struct LevelInfo {
  int max_def = 0;
  int max_rep = 0;
};

LevelInfo level_info(const Column& c) {
  if (c.list_depth == 0) return {c.optional ? 1 : 0, 0};
  return {c.list_depth, c.list_depth};
}

int bit_width(int max_level) {
  int w = 0;
  while ((1 << w) <= max_level) ++w;
  return w;
}

// RLE runs only (a legal rle/bit-packed hybrid stream).
std::string rle_encode(const std::vector<int>& levels, int bw) {
  std::string out;
  size_t i = 0;
  int byte_len = (bw + 7) / 8;
  while (i < levels.size()) {
    size_t j = i;
    while (j < levels.size() && levels[j] == levels[i]) ++j;
    uint64_t run = j - i;
    uint64_t header = run << 1;
    while (header >= 0x80) {
      out.push_back(static_cast<char>((header & 0x7f) | 0x80));
      header >>= 7;
    }
    out.push_back(static_cast<char>(header));
    uint32_t v = static_cast<uint32_t>(levels[i]);
    for (int b = 0; b < byte_len; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
    i = j;
  }
  return out;
}

std::vector<int> rle_decode(const uint8_t* p, const uint8_t* end, int bw, size_t count) {
  std::vector<int> out;
  out.reserve(count);
  int byte_len = (bw + 7) / 8;
  while (out.size() < count) {
    if (p >= end) fail(ErrKind::Format, "parquet levels truncated");
    uint64_t header = 0;
    int shift = 0;
    while (true) {
      if (p >= end) fail(ErrKind::Format, "parquet levels truncated");
      uint8_t b = *p++;
      header |= static_cast<uint64_t>(b & 0x7f) << shift;
      if (!(b & 0x80)) break;
      shift += 7;
    }
    if (header & 1) {
      // bit-packed groups of 8 values
      uint64_t groups = header >> 1;
      uint64_t nvals = groups * 8;
      uint64_t bitpos = 0;
      const uint8_t* base = p;
      for (uint64_t k = 0; k < nvals && out.size() < count; ++k) {
        uint32_t v = 0;
        for (int b = 0; b < bw; ++b) {
          uint64_t bit = bitpos + b;
          if (base + (bit >> 3) >= end) fail(ErrKind::Format, "parquet levels truncated");
          v |= ((base[bit >> 3] >> (bit & 7)) & 1u) << b;
        }
        bitpos += bw;
        out.push_back(static_cast<int>(v));
      }
      p = base + (groups * bw);  // groups*8 values * bw bits / 8
    } else {
      uint64_t run = header >> 1;
      uint32_t v = 0;
      for (int b = 0; b < byte_len; ++b) {
        if (p >= end) fail(ErrKind::Format, "parquet levels truncated");
        v |= static_cast<uint32_t>(*p++) << (8 * b);
      }
      for (uint64_t k = 0; k < run && out.size() < count; ++k) out.push_back(static_cast<int>(v));
    }
  }
  if (out.size() != count) fail(ErrKind::Format, "parquet level count mismatch");
  return out;
}

void append_u32(std::string& s, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  s.append(b, 4);
}

// Builds (rep, def) level streams from column offsets.
void build_levels(const Column& c, int64_t num_rows, std::vector<int>& rep, std::vector<int>& def,
                  std::vector<uint8_t>& present) {
  rep.clear();
  def.clear();
  present.clear();
  if (c.list_depth == 0) {
    if (!c.optional) return;  // no levels needed
    def.reserve(num_rows);
    for (int64_t r = 0; r < num_rows; ++r) {
      int d = c.valid.empty() ? 1 : (c.valid[static_cast<size_t>(r)] ? 1 : 0);
      def.push_back(d);
      present.push_back(static_cast<uint8_t>(d));
    }
    return;
  }
  if (c.list_depth == 1) {
    for (int64_t r = 0; r < num_rows; ++r) {
      int64_t a = c.offsets1[static_cast<size_t>(r)];
      int64_t b = c.offsets1[static_cast<size_t>(r) + 1];
      if (a == b) {
        rep.push_back(0);
        def.push_back(0);
        present.push_back(0);
      } else {
        for (int64_t k = a; k < b; ++k) {
          rep.push_back(k == a ? 0 : 1);
          def.push_back(1);
          present.push_back(1);
        }
      }
    }
    return;
  }
  // depth 2
  for (int64_t r = 0; r < num_rows; ++r) {
    int64_t a = c.offsets1[static_cast<size_t>(r)];
    int64_t b = c.offsets1[static_cast<size_t>(r) + 1];
    if (a == b) {
      rep.push_back(0);
      def.push_back(0);
      present.push_back(0);
      continue;
    }
    for (int64_t inner = a; inner < b; ++inner) {
      int base_rep = (inner == a) ? 0 : 1;
      int64_t va = c.offsets2[static_cast<size_t>(inner)];
      int64_t vb = c.offsets2[static_cast<size_t>(inner) + 1];
      if (va == vb) {
        rep.push_back(base_rep);
        def.push_back(1);
        present.push_back(0);
      } else {
        for (int64_t k = va; k < vb; ++k) {
          rep.push_back(k == va ? base_rep : 2);
          def.push_back(2);
          present.push_back(1);
        }
      }
    }
  }
}

std::string encode_values(const Column& c, const std::vector<uint8_t>& present, size_t level_count) {
  std::string out;
  auto emit = [&](size_t leaf_idx) {
    switch (c.type) {
      case PhysType::Int64: {
        int64_t v = c.i64[leaf_idx];
        char b[8];
        std::memcpy(b, &v, 8);
        out.append(b, 8);
        break;
      }
      case PhysType::Double: {
        double v = c.f64[leaf_idx];
        char b[8];
        std::memcpy(b, &v, 8);
        out.append(b, 8);
        break;
      }
      case PhysType::ByteArray: {
        const std::string& s = c.str[leaf_idx];
        append_u32(out, static_cast<uint32_t>(s.size()));
        out += s;
        break;
      }
    }
  };
  if (present.empty()) {
    // flat required: one value per row
    for (size_t i = 0; i < c.leaf_count(); ++i) emit(i);
  } else {
    size_t leaf = 0;
    for (size_t i = 0; i < level_count; ++i) {
      if (present[i]) emit(leaf++);
    }
  }
  return out;
}

std::string thrift_page_header(int32_t num_values, int32_t page_bytes) {
  CompactWriter w;
  w.struct_begin();
  w.i32_field(1, PAGE_DATA);
  w.i32_field(2, page_bytes);
  w.i32_field(3, page_bytes);
  w.field(5, T_STRUCT);
  w.struct_begin();
  w.i32_field(1, num_values);
  w.i32_field(2, ENC_PLAIN);
  w.i32_field(3, ENC_RLE);
  w.i32_field(4, ENC_RLE);
  w.struct_end();
  w.struct_end();
  return w.buf;
}

struct SchemaNode {
  std::string name;
  int32_t type = -1;  // -1 = group
  int32_t repetition = REP_REQUIRED;
  int32_t converted = -1;
  int32_t num_children = 0;
};

void append_schema(const Column& c, std::vector<SchemaNode>& nodes, std::vector<std::string>& leaf_path,
                   int depth_left, const std::string& name) {
  if (depth_left == 0) {
    SchemaNode leaf;
    leaf.name = name;
    leaf.type = phys_code(c.type);
    leaf.repetition = (c.list_depth == 0 && c.optional) ? REP_OPTIONAL : REP_REQUIRED;
    if (c.type == PhysType::ByteArray) leaf.converted = CT_UTF8;
    nodes.push_back(leaf);
    leaf_path.push_back(name);
    return;
  }
  SchemaNode group;
  group.name = name;
  group.converted = CT_LIST;
  group.num_children = 1;
  nodes.push_back(group);
  leaf_path.push_back(name);

  SchemaNode rep;
  rep.name = "list";
  rep.repetition = REP_REPEATED;
  rep.num_children = 1;
  nodes.push_back(rep);
  leaf_path.push_back("list");

  append_schema(c, nodes, leaf_path, depth_left - 1, "element");
}

}  // namespace

const Column& TableData::col(const std::string& name) const {
  const Column* c = find(name);
  if (!c) fail(ErrKind::Format, "parquet table has no column '" + name + "'");
  return *c;
}

const Column* TableData::find(const std::string& name) const {
  for (const auto& c : columns)
    if (c.name == name) return &c;
  return nullptr;
}

Column make_i64(std::string name, std::vector<int64_t> values) {
  Column c;
  c.name = std::move(name);
  c.type = PhysType::Int64;
  c.i64 = std::move(values);
  return c;
}

Column make_f64(std::string name, std::vector<double> values) {
  Column c;
  c.name = std::move(name);
  c.type = PhysType::Double;
  c.f64 = std::move(values);
  return c;
}

Column make_str(std::string name, std::vector<std::string> values) {
  Column c;
  c.name = std::move(name);
  c.type = PhysType::ByteArray;
  c.str = std::move(values);
  return c;
}

void write_file(const std::string& path, const TableData& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrKind::Io, "cannot open parquet file for writing '" + path + "'");

  std::string body = "PAR1";

  struct ChunkInfo {
    int64_t offset = 0;
    int64_t size = 0;
    int64_t num_values = 0;
    std::vector<std::string> path;
  };
  std::vector<ChunkInfo> chunks;

  for (const auto& c : table.columns) {
    if (c.list_depth >= 1 && static_cast<int64_t>(c.offsets1.size()) != table.num_rows + 1)
      fail(ErrKind::ShapeMismatch, "column '" + c.name + "': offsets1 size mismatch");
    if (c.list_depth == 2 && static_cast<int64_t>(c.offsets2.size()) != c.offsets1.back() + 1)
      fail(ErrKind::ShapeMismatch, "column '" + c.name + "': offsets2 size mismatch");
    if (c.list_depth == 0 && !c.optional && static_cast<int64_t>(c.leaf_count()) != table.num_rows)
      fail(ErrKind::ShapeMismatch, "column '" + c.name + "': row count mismatch");

    LevelInfo li = level_info(c);
    std::vector<int> rep, def;
    std::vector<uint8_t> present;
    build_levels(c, table.num_rows, rep, def, present);
    size_t level_count = c.list_depth > 0 ? rep.size() : (c.optional ? def.size() : c.leaf_count());

    std::string data;
    if (li.max_rep > 0) {
      std::string enc = rle_encode(rep, bit_width(li.max_rep));
      append_u32(data, static_cast<uint32_t>(enc.size()));
      data += enc;
    }
    if (li.max_def > 0) {
      std::string enc = rle_encode(def, bit_width(li.max_def));
      append_u32(data, static_cast<uint32_t>(enc.size()));
      data += enc;
    }
    data += encode_values(c, present, level_count);

    std::string header = thrift_page_header(static_cast<int32_t>(level_count),
                                            static_cast<int32_t>(data.size()));

    ChunkInfo info;
    info.offset = static_cast<int64_t>(body.size());
    info.size = static_cast<int64_t>(header.size() + data.size());
    info.num_values = static_cast<int64_t>(level_count);

    std::vector<SchemaNode> dummy;
    append_schema(c, dummy, info.path, c.list_depth, c.name);
    // keep only the path strings; nodes rebuilt for footer below
    chunks.push_back(info);

    body += header;
    body += data;
  }

  // footer
  CompactWriter w;
  w.struct_begin();
  w.i32_field(1, 1);  // version

  std::vector<SchemaNode> nodes;
  {
    SchemaNode root;
    root.name = "schema";
    root.num_children = static_cast<int32_t>(table.columns.size());
    nodes.push_back(root);
    for (const auto& c : table.columns) {
      std::vector<std::string> unused;
      append_schema(c, nodes, unused, c.list_depth, c.name);
    }
  }
  w.list_field(2, T_STRUCT, nodes.size());
  for (const auto& n : nodes) {
    w.struct_begin();
    if (n.type >= 0) w.i32_field(1, n.type);
    if (!(n.name == "schema" && n.num_children > 0)) w.i32_field(3, n.repetition);
    w.string_field(4, n.name);
    if (n.num_children > 0) w.i32_field(5, n.num_children);
    if (n.converted >= 0) w.i32_field(6, n.converted);
    w.struct_end();
  }

  w.i64_field(3, table.num_rows);

  // single row group
  w.list_field(4, T_STRUCT, 1);
  w.struct_begin();
  {
    w.list_field(1, T_STRUCT, chunks.size());
    int64_t total = 0;
    for (size_t i = 0; i < chunks.size(); ++i) {
      const auto& info = chunks[i];
      const auto& c = table.columns[i];
      total += info.size;
      w.struct_begin();
      w.i64_field(2, info.offset);
      w.field(3, T_STRUCT);
      w.struct_begin();
      w.i32_field(1, phys_code(c.type));
      w.list_field(2, T_I32, 2);
      w.zigzag(ENC_PLAIN);
      w.zigzag(ENC_RLE);
      w.list_field(3, T_BINARY, info.path.size());
      for (const auto& part : info.path) {
        w.varint(part.size());
        w.buf += part;
      }
      w.i32_field(4, CODEC_UNCOMPRESSED);
      w.i64_field(5, info.num_values);
      w.i64_field(6, info.size);
      w.i64_field(7, info.size);
      w.i64_field(9, info.offset);
      w.struct_end();
      w.struct_end();
    }
    w.i64_field(2, total);
    w.i64_field(3, table.num_rows);
  }
  w.struct_end();

  w.string_field(6, "evseq parquet writer");
  w.struct_end();

  body += w.buf;
  append_u32(body, static_cast<uint32_t>(w.buf.size()));
  body += "PAR1";

  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  out.close();
  if (!out) fail(ErrKind::Io, "error writing parquet file '" + path + "'");
}

// ---------------------------------------------------------------------------
// Reader

namespace {

struct FileSchemaLeaf {
  std::vector<std::string> path;
  int32_t type = -1;
  int list_depth = 0;
  bool optional = false;
};

struct FileChunk {
  std::vector<std::string> path;
  int32_t type = -1;
  int64_t data_offset = 0;
  int64_t num_values = 0;
};

struct ParsedSchema {
  std::vector<FileSchemaLeaf> leaves;
};

struct RawSchemaElem {
  int32_t type = -1;
  int32_t repetition = REP_REQUIRED;
  std::string name;
  int32_t num_children = 0;
};

void collect_leaves(const std::vector<RawSchemaElem>& elems, size_t& idx, std::vector<std::string>& path,
                    int depth, int optional_seen, std::vector<FileSchemaLeaf>& out) {
  const RawSchemaElem& e = elems[idx++];
  path.push_back(e.name);
  int d = depth + (e.repetition == REP_REPEATED ? 1 : 0);
  int opt = optional_seen + (e.repetition == REP_OPTIONAL ? 1 : 0);
  if (e.num_children == 0) {
    FileSchemaLeaf leaf;
    leaf.path = path;
    leaf.type = e.type;
    leaf.list_depth = d;
    leaf.optional = opt > 0;
    out.push_back(leaf);
  } else {
    for (int32_t i = 0; i < e.num_children; ++i) collect_leaves(elems, idx, path, d, opt, out);
  }
  path.pop_back();
}

}  // namespace

TableData read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrKind::Io, "cannot open parquet file '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (data.size() < 12 || data.compare(0, 4, "PAR1") != 0 || data.compare(data.size() - 4, 4, "PAR1") != 0)
    fail(ErrKind::Format, "'" + path + "' is not a parquet file");

  uint32_t footer_len;
  std::memcpy(&footer_len, data.data() + data.size() - 8, 4);
  if (footer_len + 12 > data.size()) fail(ErrKind::Format, "parquet footer length out of range");
  const uint8_t* fbegin = reinterpret_cast<const uint8_t*>(data.data() + data.size() - 8 - footer_len);
  CompactReader r(fbegin, fbegin + footer_len);

  std::vector<RawSchemaElem> elems;
  int64_t num_rows = 0;
  std::vector<FileChunk> chunks;

  TType t;
  int16_t id;
  while (r.field_header(t, id)) {
    if (id == 2 && t == T_LIST) {
      TType elem;
      uint64_t n;
      r.list_header(elem, n);
      for (uint64_t i = 0; i < n; ++i) {
        RawSchemaElem e;
        int16_t saved = r.push_struct();
        TType ft;
        int16_t fid;
        while (r.field_header(ft, fid)) {
          switch (fid) {
            case 1: e.type = static_cast<int32_t>(r.zigzag()); break;
            case 3: e.repetition = static_cast<int32_t>(r.zigzag()); break;
            case 4: e.name = r.binary(); break;
            case 5: e.num_children = static_cast<int32_t>(r.zigzag()); break;
            default: r.skip(ft);
          }
        }
        r.pop_struct(saved);
        elems.push_back(e);
      }
    } else if (id == 3 && (t == T_I64 || t == T_I32)) {
      num_rows = r.zigzag();
    } else if (id == 4 && t == T_LIST) {
      TType elem;
      uint64_t ngroups;
      r.list_header(elem, ngroups);
      for (uint64_t g = 0; g < ngroups; ++g) {
        int16_t saved = r.push_struct();
        TType ft;
        int16_t fid;
        while (r.field_header(ft, fid)) {
          if (fid == 1 && ft == T_LIST) {
            TType celem;
            uint64_t nc;
            r.list_header(celem, nc);
            for (uint64_t ci = 0; ci < nc; ++ci) {
              FileChunk chunk;
              int16_t s2 = r.push_struct();
              TType cft;
              int16_t cfid;
              while (r.field_header(cft, cfid)) {
                if (cfid == 3 && cft == T_STRUCT) {
                  int16_t s3 = r.push_struct();
                  TType mft;
                  int16_t mfid;
                  while (r.field_header(mft, mfid)) {
                    switch (mfid) {
                      case 1: chunk.type = static_cast<int32_t>(r.zigzag()); break;
                      case 3: {
                        TType pe;
                        uint64_t np;
                        r.list_header(pe, np);
                        for (uint64_t pi = 0; pi < np; ++pi) chunk.path.push_back(r.binary());
                        break;
                      }
                      case 5: chunk.num_values = r.zigzag(); break;
                      case 9: chunk.data_offset = r.zigzag(); break;
                      default: r.skip(mft);
                    }
                  }
                  r.pop_struct(s3);
                } else {
                  r.skip(cft);
                }
              }
              r.pop_struct(s2);
              chunks.push_back(chunk);
            }
          } else {
            r.skip(ft);
          }
        }
        r.pop_struct(saved);
      }
    } else {
      r.skip(t);
    }
  }

  std::vector<FileSchemaLeaf> leaves;
  if (!elems.empty()) {
    size_t idx = 1;  // skip root
    std::vector<std::string> p;
    while (idx < elems.size()) collect_leaves(elems, idx, p, 0, 0, leaves);
  }

  TableData table;
  table.num_rows = num_rows;

  for (const auto& chunk : chunks) {
    const FileSchemaLeaf* leaf = nullptr;
    for (const auto& l : leaves) {
      if (l.path == chunk.path) {
        leaf = &l;
        break;
      }
    }
    if (!leaf) fail(ErrKind::Format, "parquet column chunk with unknown schema path");

    Column c;
    c.name = chunk.path.front();
    c.list_depth = leaf->list_depth;
    c.optional = leaf->optional;
    switch (leaf->type) {
      case PQ_INT64: c.type = PhysType::Int64; break;
      case PQ_DOUBLE: c.type = PhysType::Double; break;
      case PQ_BYTE_ARRAY: c.type = PhysType::ByteArray; break;
      default: fail(ErrKind::Format, "parquet column '" + c.name + "': unsupported physical type");
    }
    if (c.list_depth > 2) fail(ErrKind::Format, "parquet column '" + c.name + "': nesting too deep");

    // Read pages until num_values levels consumed.
    int max_rep = c.list_depth;
    int max_def = c.list_depth > 0 ? c.list_depth : (c.optional ? 1 : 0);
    std::vector<int> rep, def;
    int64_t values_read = 0;
    const uint8_t* base = reinterpret_cast<const uint8_t*>(data.data());
    const uint8_t* fend = base + data.size();
    const uint8_t* pp = base + chunk.data_offset;
    while (values_read < chunk.num_values) {
      CompactReader ph(pp, fend);
      int32_t page_type = -1, page_bytes = 0, nvals = 0;
      TType ft;
      int16_t fid;
      while (ph.field_header(ft, fid)) {
        switch (fid) {
          case 1: page_type = static_cast<int32_t>(ph.zigzag()); break;
          case 2: page_bytes = static_cast<int32_t>(ph.zigzag()); break;
          case 3: ph.zigzag(); break;
          case 5: {
            int16_t s = ph.push_struct();
            TType dft;
            int16_t dfid;
            while (ph.field_header(dft, dfid)) {
              if (dfid == 1) nvals = static_cast<int32_t>(ph.zigzag());
              else ph.skip(dft);
            }
            ph.pop_struct(s);
            break;
          }
          default: ph.skip(ft);
        }
      }
      const uint8_t* pdata = ph.pos();
      if (page_type != PAGE_DATA) fail(ErrKind::Format, "parquet: unsupported page type");
      const uint8_t* pend = pdata + page_bytes;
      if (pend > fend) fail(ErrKind::Format, "parquet page out of range");

      const uint8_t* cur = pdata;
      if (max_rep > 0) {
        uint32_t len;
        std::memcpy(&len, cur, 4);
        cur += 4;
        auto lv = rle_decode(cur, cur + len, bit_width(max_rep), nvals);
        rep.insert(rep.end(), lv.begin(), lv.end());
        cur += len;
      }
      if (max_def > 0) {
        uint32_t len;
        std::memcpy(&len, cur, 4);
        cur += 4;
        auto lv = rle_decode(cur, cur + len, bit_width(max_def), nvals);
        def.insert(def.end(), lv.begin(), lv.end());
        cur += len;
      }
      // values
      size_t present = 0;
      if (max_def > 0) {
        for (int64_t k = values_read; k < values_read + nvals; ++k)
          if (def[static_cast<size_t>(k)] == max_def) ++present;
      } else {
        present = static_cast<size_t>(nvals);
      }
      for (size_t k = 0; k < present; ++k) {
        switch (c.type) {
          case PhysType::Int64: {
            int64_t v;
            std::memcpy(&v, cur, 8);
            cur += 8;
            c.i64.push_back(v);
            break;
          }
          case PhysType::Double: {
            double v;
            std::memcpy(&v, cur, 8);
            cur += 8;
            c.f64.push_back(v);
            break;
          }
          case PhysType::ByteArray: {
            uint32_t len;
            std::memcpy(&len, cur, 4);
            cur += 4;
            c.str.emplace_back(reinterpret_cast<const char*>(cur), len);
            cur += len;
            break;
          }
        }
        if (cur > pend) fail(ErrKind::Format, "parquet values truncated");
      }
      values_read += nvals;
      pp = pend;
    }

    // Reassemble nesting.
    if (c.list_depth == 0) {
      if (c.optional) {
        // leaf storage stays compact; validity marks which rows hold a value
        for (int64_t rix = 0; rix < num_rows; ++rix)
          c.valid.push_back(def[static_cast<size_t>(rix)] == 1 ? 1 : 0);
      }
    } else if (c.list_depth == 1) {
      c.offsets1.assign(1, 0);
      int64_t count = 0;
      for (size_t k = 0; k < rep.size(); ++k) {
        if (rep[k] == 0 && k > 0) c.offsets1.push_back(count);
        if (def[k] == 1) ++count;
      }
      c.offsets1.push_back(count);
    } else {
      std::vector<int64_t> o1{0}, o2{0};
      int64_t inner = 0, vals = 0;
      size_t k = 0;
      while (k < rep.size()) {
        // start of a row
        if (def[k] == 0) {
          o1.push_back(inner);
          ++k;
          continue;
        }
        // row with at least one inner list
        while (true) {
          // start of inner list
          if (def[k] >= 2) {
            do {
              ++vals;
              ++k;
            } while (k < rep.size() && rep[k] == 2);
          } else {
            ++k;  // empty inner list (def==1)
          }
          o2.push_back(vals);
          ++inner;
          if (k >= rep.size() || rep[k] != 1) break;
        }
        o1.push_back(inner);
      }
      c.offsets1 = std::move(o1);
      c.offsets2 = std::move(o2);
    }

    table.columns.push_back(std::move(c));
  }

  return table;
}

}  // namespace evseq::parquet

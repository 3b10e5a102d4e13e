#include "evseq/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <cstdio>
#include <cstdlib>
#include <tuple>

#include <json.hpp>

#include "evseq/csv.hpp"
#include "evseq/parquet.hpp"

namespace evseq {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string resolve_path(const std::string& path, const std::string& base_dir) {
  fs::path p(path);
  if (p.is_absolute() || base_dir.empty()) return path;
  return (fs::path(base_dir) / p).string();
}

// Needed-column plan for one source.
struct SourcePlan {
  const SourceConfig* source = nullptr;
  std::vector<std::string> columns;  // key/value columns referenced by measurements

  void need(const std::string& col) {
    if (!col.empty() && std::find(columns.begin(), columns.end(), col) == columns.end())
      columns.push_back(col);
  }
};

// Intermediate per-source storage with subject ids still in raw text form.
struct PendingTable {
  RawTable table;
  std::vector<std::string> raw_subject;
};

std::string format_numeric_cell(double v) {
  if (v == static_cast<double>(static_cast<int64_t>(v)) && std::abs(v) < 1e15)
    return std::to_string(static_cast<int64_t>(v));
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (strtod(buf, nullptr) == v) break;
  }
  return buf;
}

double parse_source_timestamp(const std::string& text, const std::string& source, size_t row) {
  double minutes;
  if (!try_parse_timestamp(text, minutes))
    fail(ErrKind::Format,
         "source '" + source + "' row " + std::to_string(row) + ": bad timestamp '" + text + "'");
  return minutes;
}

PendingTable read_csv_source(const SourceConfig& src, const SourcePlan& plan,
                             const std::string& path) {
  PendingTable out;
  out.table.source = src.name;
  out.table.is_static = src.is_static();
  for (const auto& col : plan.columns) {
    RawTable::Col c;
    c.numeric = false;
    out.table.cells[col] = std::move(c);
  }

  std::vector<std::string> header;
  int sid_idx = -1, ts_idx = -1, et_idx = -1;
  std::vector<int> cell_idx(plan.columns.size(), -1);
  bool header_seen = false;

  csv::Reader::for_each_row(path, header, [&](const std::vector<std::string>& fields, size_t row) {
    if (!header_seen) {
      header_seen = true;
      auto locate = [&](const std::string& name) {
        for (size_t i = 0; i < header.size(); ++i)
          if (header[i] == name) return static_cast<int>(i);
        fail(ErrKind::Format, "source '" + src.name + "': column '" + name + "' not found");
      };
      sid_idx = locate(src.subject_id_column);
      if (!src.is_static()) ts_idx = locate(src.timestamp_column);
      if (!src.event_type_column.empty()) et_idx = locate(src.event_type_column);
      for (size_t i = 0; i < plan.columns.size(); ++i)
        cell_idx[i] = locate(plan.columns[i]);
    }
    out.raw_subject.push_back(trim(fields[static_cast<size_t>(sid_idx)]));
    if (out.raw_subject.back().empty())
      fail(ErrKind::Format,
           "source '" + src.name + "' row " + std::to_string(row) + ": empty subject id");
    if (ts_idx >= 0)
      out.table.timestamp.push_back(
          parse_source_timestamp(fields[static_cast<size_t>(ts_idx)], src.name, row));
    if (!src.is_static()) {
      std::string type = et_idx >= 0 ? trim(fields[static_cast<size_t>(et_idx)]) : src.event_type;
      if (type.empty())
        fail(ErrKind::Format,
             "source '" + src.name + "' row " + std::to_string(row) + ": empty event type");
      out.table.event_type.push_back(std::move(type));
    }
    for (size_t i = 0; i < plan.columns.size(); ++i) {
      auto& col = out.table.cells[plan.columns[i]];
      const std::string& cell = fields[static_cast<size_t>(cell_idx[i])];
      col.s.push_back(cell);
      col.present.push_back(cell.empty() ? 0 : 1);
    }
    ++out.table.num_rows;
  });

  // header-only files never invoke the callback; column checks still apply
  if (!header_seen && !header.empty()) {
    auto locate = [&](const std::string& name) {
      if (std::find(header.begin(), header.end(), name) == header.end())
        fail(ErrKind::Format, "source '" + src.name + "': column '" + name + "' not found");
    };
    locate(src.subject_id_column);
    if (!src.is_static()) locate(src.timestamp_column);
    if (!src.event_type_column.empty()) locate(src.event_type_column);
    for (const auto& c : plan.columns) locate(c);
  }
  return out;
}

PendingTable read_parquet_source(const SourceConfig& src, const SourcePlan& plan,
                                 const std::string& path) {
  parquet::TableData t = parquet::read_file(path);
  PendingTable out;
  out.table.source = src.name;
  out.table.is_static = src.is_static();
  out.table.num_rows = static_cast<size_t>(t.num_rows);

  auto locate = [&](const std::string& name) -> const parquet::Column& {
    const parquet::Column* c = t.find(name);
    if (!c) fail(ErrKind::Format, "source '" + src.name + "': column '" + name + "' not found");
    if (c->list_depth != 0)
      fail(ErrKind::Format, "source '" + src.name + "': column '" + name + "' must be flat");
    return *c;
  };
  auto require_cell = [&](const parquet::Column& c, size_t row, const char* what) {
    if (c.optional && !c.valid[row])
      fail(ErrKind::Format, "source '" + src.name + "' row " + std::to_string(row + 2) +
                                ": missing " + what);
  };

  const parquet::Column& sid = locate(src.subject_id_column);
  size_t sid_cursor = 0;
  for (size_t r = 0; r < out.table.num_rows; ++r) {
    require_cell(sid, r, "subject id");
    switch (sid.type) {
      case parquet::PhysType::Int64:
        out.raw_subject.push_back(std::to_string(sid.i64[sid_cursor++]));
        break;
      case parquet::PhysType::ByteArray:
        out.raw_subject.push_back(trim(sid.str[sid_cursor++]));
        break;
      case parquet::PhysType::Double:
        fail(ErrKind::Format,
             "source '" + src.name + "': subject id column must be integer or text");
    }
    if (out.raw_subject.back().empty())
      fail(ErrKind::Format,
           "source '" + src.name + "' row " + std::to_string(r + 2) + ": empty subject id");
  }

  if (!src.is_static()) {
    const parquet::Column& ts = locate(src.timestamp_column);
    size_t cursor = 0;
    for (size_t r = 0; r < out.table.num_rows; ++r) {
      require_cell(ts, r, "timestamp");
      switch (ts.type) {
        case parquet::PhysType::Double: out.table.timestamp.push_back(ts.f64[cursor++]); break;
        case parquet::PhysType::Int64:
          out.table.timestamp.push_back(static_cast<double>(ts.i64[cursor++]));
          break;
        case parquet::PhysType::ByteArray:
          out.table.timestamp.push_back(parse_source_timestamp(ts.str[cursor++], src.name, r + 2));
          break;
      }
    }
    if (!src.event_type_column.empty()) {
      const parquet::Column& et = locate(src.event_type_column);
      if (et.type != parquet::PhysType::ByteArray)
        fail(ErrKind::Format, "source '" + src.name + "': event type column must be text");
      size_t cursor = 0;
      for (size_t r = 0; r < out.table.num_rows; ++r) {
        require_cell(et, r, "event type");
        std::string type = trim(et.str[cursor++]);
        if (type.empty())
          fail(ErrKind::Format,
               "source '" + src.name + "' row " + std::to_string(r + 2) + ": empty event type");
        out.table.event_type.push_back(std::move(type));
      }
    } else {
      out.table.event_type.assign(out.table.num_rows, src.event_type);
    }
  }

  for (const auto& name : plan.columns) {
    const parquet::Column& c = locate(name);
    RawTable::Col col;
    if (c.type == parquet::PhysType::ByteArray) {
      col.numeric = false;
      size_t cursor = 0;
      for (size_t r = 0; r < out.table.num_rows; ++r) {
        bool ok = !c.optional || c.valid[r];
        col.s.push_back(ok ? c.str[cursor] : std::string());
        if (ok) ++cursor;
        col.present.push_back(ok && !col.s.back().empty() ? 1 : 0);
      }
    } else {
      col.numeric = true;
      size_t cursor = 0;
      for (size_t r = 0; r < out.table.num_rows; ++r) {
        bool ok = !c.optional || c.valid[r];
        double v = 0;
        if (ok) v = c.type == parquet::PhysType::Double ? c.f64[cursor] : static_cast<double>(c.i64[cursor]);
        if (ok) ++cursor;
        col.d.push_back(ok ? v : kAbsent);
        col.present.push_back(ok ? 1 : 0);
      }
    }
    out.table.cells[name] = std::move(col);
  }
  return out;
}

std::string cell_as_key(const RawTable::Col& col, size_t row) {
  if (!col.present[row]) return "";
  return col.numeric ? format_numeric_cell(col.d[row]) : trim(col.s[row]);
}

bool cell_as_number(const RawTable::Col& col, size_t row, double& out) {
  if (!col.present[row]) return false;
  if (col.numeric) {
    out = col.d[row];
    return true;
  }
  std::string s = trim(col.s[row]);
  if (s.empty()) return false;
  if (try_parse_double(s, out)) return true;
  if (try_parse_timestamp(s, out)) return true;  // date-valued statics such as dob
  return false;
}

}  // namespace

const Subject* InternalDataModel::find_subject(uint64_t id) const {
  auto it = std::lower_bound(subjects.begin(), subjects.end(), id,
                             [](const Subject& s, uint64_t v) { return s.id < v; });
  return it != subjects.end() && it->id == id ? &*it : nullptr;
}

bool operator==(const StaticObs& a, const StaticObs& b) {
  bool values_equal = (std::isnan(a.value) && std::isnan(b.value)) || a.value == b.value;
  return a.measurement == b.measurement && a.key == b.key && a.key_index == b.key_index &&
         a.has_value == b.has_value && values_equal;
}

bool operator==(const Subject& a, const Subject& b) {
  return a.id == b.id && a.raw_id == b.raw_id && a.statics == b.statics;
}

bool operator==(const Event& a, const Event& b) {
  return a.id == b.id && a.subject_id == b.subject_id && a.time == b.time && a.type == b.type &&
         a.type_index == b.type_index;
}

bool operator==(const MeasurementRow& a, const MeasurementRow& b) {
  bool values_equal = (std::isnan(a.value) && std::isnan(b.value)) || a.value == b.value;
  return a.id == b.id && a.event_id == b.event_id && a.measurement == b.measurement &&
         a.key == b.key && a.key_index == b.key_index && a.has_value == b.has_value && values_equal;
}

bool InternalDataModel::operator==(const InternalDataModel& o) const {
  return subjects == o.subjects && events == o.events && measurements == o.measurements &&
         measurement_names == o.measurement_names && transformed == o.transformed;
}

ExtractResult extract_sources(const DatasetConfig& config, const std::string& base_dir) {
  std::map<std::string, SourcePlan> plans;
  for (const auto& src : config.sources) plans[src.name].source = &src;
  for (const auto& m : config.measurements) {
    if (m.temporality == Temporality::FunctionalTimeDependent || m.implicit) continue;
    SourcePlan& plan = plans.at(m.source_table);
    plan.need(m.key_column);
    plan.need(m.value_column);
  }

  std::vector<PendingTable> pending;
  bool any_static = false;
  for (const auto& src : config.sources) {
    const SourcePlan& plan = plans.at(src.name);
    std::string path = resolve_path(src.path, base_dir);
    if (!fs::exists(path)) fail(ErrKind::Io, "source '" + src.name + "': missing file " + path);
    pending.push_back(src.format == SourceFormat::Csv ? read_csv_source(src, plan, path)
                                                      : read_parquet_source(src, plan, path));
    any_static = any_static || src.is_static();
  }

  // Canonical ids: numeric identity when every id parses as an unsigned
  // integer, else dense codes over the sorted distinct raw ids.
  std::set<std::string> distinct;
  bool numeric = true;
  for (const auto& p : pending) {
    for (const auto& raw : p.raw_subject) {
      distinct.insert(raw);
      uint64_t v;
      numeric = numeric && try_parse_u64(raw, v);
    }
  }
  std::map<std::string, uint64_t> to_canonical;
  ExtractResult out;
  out.numeric_ids = numeric;
  if (numeric) {
    for (const auto& raw : distinct) {
      uint64_t v;
      try_parse_u64(raw, v);
      to_canonical[raw] = v;
    }
  } else {
    uint64_t next = 0;
    for (const auto& raw : distinct) {
      to_canonical[raw] = next;
      out.id_mapping.emplace_back(next, raw);
      ++next;
    }
  }

  std::set<uint64_t> universe;
  for (auto& p : pending) {
    p.table.subject.reserve(p.raw_subject.size());
    for (const auto& raw : p.raw_subject) {
      uint64_t id = to_canonical.at(raw);
      p.table.subject.push_back(id);
      if (p.table.is_static || !any_static) universe.insert(id);
    }
    out.tables[p.table.source] = std::move(p.table);
  }
  out.universe.assign(universe.begin(), universe.end());
  return out;
}

InternalDataModel compile_internal_model(const ExtractResult& extracted,
                                         const DatasetConfig& config) {
  InternalDataModel model;
  for (const auto& m : config.measurements) model.measurement_names.push_back(m.name);

  std::set<uint64_t> universe(extracted.universe.begin(), extracted.universe.end());
  std::map<uint64_t, std::string> raw_of;
  for (const auto& [canonical, raw] : extracted.id_mapping) raw_of[canonical] = raw;
  auto raw_name = [&](uint64_t id) {
    auto it = raw_of.find(id);
    return it != raw_of.end() ? it->second : std::to_string(id);
  };

  // Event identity is (subject, time, type); every timestamped row defines its
  // event, so rows matching no existing event create one.
  std::map<std::tuple<uint64_t, double, std::string>, int64_t> event_ids;
  for (const auto& src : config.sources) {
    const RawTable& t = extracted.tables.at(src.name);
    if (t.is_static) continue;
    for (size_t r = 0; r < t.num_rows; ++r) {
      if (!universe.count(t.subject[r]))
        fail(ErrKind::OrphanSubject, "source '" + src.name + "' row " + std::to_string(r + 2) +
                                         ": subject '" + raw_name(t.subject[r]) +
                                         "' has no static record");
      event_ids[{t.subject[r], t.timestamp[r], t.event_type[r]}] = -1;
    }
  }
  int64_t next_event = 0;
  for (auto& [key, id] : event_ids) {
    id = next_event++;
    Event e;
    e.id = id;
    e.subject_id = std::get<0>(key);
    e.time = std::get<1>(key);
    e.type = std::get<2>(key);
    model.events.push_back(std::move(e));
  }

  struct PendingMeasurement {
    int64_t event_id;
    size_t source_idx;
    size_t row;
    int32_t measurement;
    MeasurementRow data;
  };
  std::vector<PendingMeasurement> rows;
  for (size_t si = 0; si < config.sources.size(); ++si) {
    const SourceConfig& src = config.sources[si];
    const RawTable& t = extracted.tables.at(src.name);
    if (t.is_static) continue;
    for (int32_t mi = 0; mi < static_cast<int32_t>(config.measurements.size()); ++mi) {
      const MeasurementConfig& m = config.measurements[static_cast<size_t>(mi)];
      if (m.implicit || m.temporality != Temporality::Dynamic || m.source_table != src.name)
        continue;
      const RawTable::Col& key_col = t.cells.at(m.key_column);
      const RawTable::Col* value_col =
          m.value_column.empty() ? nullptr : &t.cells.at(m.value_column);
      for (size_t r = 0; r < t.num_rows; ++r) {
        MeasurementRow row;
        row.measurement = mi;
        switch (m.value_kind) {
          case ValueKind::Categorical: {
            row.key = cell_as_key(key_col, r);
            if (row.key.empty()) continue;
            break;
          }
          case ValueKind::UnivariateRegression: {
            double v;
            if (!key_col.present[r]) continue;
            if (!cell_as_number(key_col, r, v))
              fail(ErrKind::Format, "source '" + src.name + "' row " + std::to_string(r + 2) +
                                        ": bad numeric value for '" + m.name + "'");
            row.value = v;
            row.has_value = true;
            break;
          }
          case ValueKind::MultivariateRegression: {
            row.key = cell_as_key(key_col, r);
            if (row.key.empty()) continue;
            double v;
            if (value_col && value_col->present[r]) {
              if (!cell_as_number(*value_col, r, v))
                fail(ErrKind::Format, "source '" + src.name + "' row " + std::to_string(r + 2) +
                                          ": bad numeric value for '" + m.name + "'");
              row.value = v;
              row.has_value = true;
            }
            break;
          }
        }
        int64_t event_id = event_ids.at({t.subject[r], t.timestamp[r], t.event_type[r]});
        rows.push_back({event_id, si, r, mi, std::move(row)});
      }
    }
  }
  std::sort(rows.begin(), rows.end(), [](const PendingMeasurement& a, const PendingMeasurement& b) {
    return std::tie(a.event_id, a.source_idx, a.row, a.measurement) <
           std::tie(b.event_id, b.source_idx, b.row, b.measurement);
  });
  int64_t next_measurement = 0;
  for (auto& r : rows) {
    r.data.id = next_measurement++;
    r.data.event_id = r.event_id;
    model.measurements.push_back(std::move(r.data));
  }

  std::map<uint64_t, std::vector<StaticObs>> statics;
  std::set<std::pair<uint64_t, int32_t>> seen_static;
  for (const auto& src : config.sources) {
    const RawTable& t = extracted.tables.at(src.name);
    if (!t.is_static) continue;
    for (int32_t mi = 0; mi < static_cast<int32_t>(config.measurements.size()); ++mi) {
      const MeasurementConfig& m = config.measurements[static_cast<size_t>(mi)];
      if (m.temporality != Temporality::Static || m.source_table != src.name) continue;
      const RawTable::Col& key_col = t.cells.at(m.key_column);
      for (size_t r = 0; r < t.num_rows; ++r) {
        StaticObs obs;
        obs.measurement = mi;
        if (m.value_kind == ValueKind::Categorical) {
          obs.key = cell_as_key(key_col, r);
          if (obs.key.empty()) continue;
        } else {
          double v;
          if (!key_col.present[r]) continue;
          if (!cell_as_number(key_col, r, v))
            fail(ErrKind::Format, "source '" + src.name + "' row " + std::to_string(r + 2) +
                                      ": bad numeric value for '" + m.name + "'");
          obs.value = v;
          obs.has_value = true;
        }
        if (!seen_static.insert({t.subject[r], mi}).second)
          fail(ErrKind::Format, "source '" + src.name + "' row " + std::to_string(r + 2) +
                                    ": duplicate static observation of '" + m.name +
                                    "' for subject '" + raw_name(t.subject[r]) + "'");
        statics[t.subject[r]].push_back(std::move(obs));
      }
    }
  }
  for (auto& [id, obs_list] : statics)
    std::sort(obs_list.begin(), obs_list.end(),
              [](const StaticObs& a, const StaticObs& b) { return a.measurement < b.measurement; });

  for (uint64_t id : universe) {
    Subject s;
    s.id = id;
    s.raw_id = raw_name(id);
    if (auto it = statics.find(id); it != statics.end()) s.statics = std::move(it->second);
    model.subjects.push_back(std::move(s));
  }
  return model;
}

namespace {

int64_t checked_i64(uint64_t v, const char* what) {
  if (v > static_cast<uint64_t>(std::numeric_limits<int64_t>::max()))
    fail(ErrKind::Format, std::string(what) + " too large for storage");
  return static_cast<int64_t>(v);
}

}  // namespace

void write_internal_model(const std::string& dir, const InternalDataModel& model,
                          const DatasetConfig& config) {
  fs::create_directories(dir);

  {
    parquet::TableData t;
    t.num_rows = static_cast<int64_t>(model.subjects.size());
    std::vector<int64_t> ids;
    std::vector<std::string> raw;
    for (const auto& s : model.subjects) {
      ids.push_back(checked_i64(s.id, "subject id"));
      raw.push_back(s.raw_id);
    }
    t.columns.push_back(parquet::make_i64("subject_id", std::move(ids)));
    t.columns.push_back(parquet::make_str("raw_id", std::move(raw)));
    for (int32_t mi = 0; mi < static_cast<int32_t>(config.measurements.size()); ++mi) {
      const MeasurementConfig& m = config.measurements[static_cast<size_t>(mi)];
      if (m.temporality != Temporality::Static) continue;
      parquet::Column col;
      col.optional = true;
      bool categorical = m.value_kind == ValueKind::Categorical;
      if (categorical && model.transformed) {
        col.name = m.name + "_index";
        col.type = parquet::PhysType::Int64;
      } else if (categorical) {
        col.name = m.name;
        col.type = parquet::PhysType::ByteArray;
      } else {
        col.name = m.name;
        col.type = parquet::PhysType::Double;
      }
      for (const auto& s : model.subjects) {
        const StaticObs* found = nullptr;
        for (const auto& o : s.statics)
          if (o.measurement == mi) found = &o;
        col.valid.push_back(found ? 1 : 0);
        if (!found) continue;
        if (categorical && model.transformed) col.i64.push_back(found->key_index);
        else if (categorical) col.str.push_back(found->key);
        else col.f64.push_back(found->value);
      }
      t.columns.push_back(std::move(col));
    }
    parquet::write_file((fs::path(dir) / "subjects.parquet").string(), t);
  }

  {
    parquet::TableData t;
    t.num_rows = static_cast<int64_t>(model.events.size());
    std::vector<int64_t> eid, sid, tix;
    std::vector<double> ts;
    std::vector<std::string> type;
    for (const auto& e : model.events) {
      eid.push_back(e.id);
      sid.push_back(checked_i64(e.subject_id, "subject id"));
      ts.push_back(e.time);
      type.push_back(e.type);
      tix.push_back(e.type_index);
    }
    t.columns.push_back(parquet::make_i64("event_id", std::move(eid)));
    t.columns.push_back(parquet::make_i64("subject_id", std::move(sid)));
    t.columns.push_back(parquet::make_f64("timestamp", std::move(ts)));
    t.columns.push_back(parquet::make_str("event_type", std::move(type)));
    if (model.transformed)
      t.columns.push_back(parquet::make_i64("event_type_index", std::move(tix)));
    parquet::write_file((fs::path(dir) / "events.parquet").string(), t);
  }

  {
    parquet::TableData t;
    t.num_rows = static_cast<int64_t>(model.measurements.size());
    std::vector<int64_t> mid, eid;
    std::vector<std::string> name;
    parquet::Column key;
    key.optional = true;
    if (model.transformed) {
      key.name = "key_index";
      key.type = parquet::PhysType::Int64;
    } else {
      key.name = "key";
      key.type = parquet::PhysType::ByteArray;
    }
    parquet::Column value;
    value.name = "numeric_value";
    value.type = parquet::PhysType::Double;
    value.optional = true;
    for (const auto& r : model.measurements) {
      mid.push_back(r.id);
      eid.push_back(r.event_id);
      name.push_back(model.measurement_names[static_cast<size_t>(r.measurement)]);
      bool has_key = model.transformed ? r.key_index >= 0 : !r.key.empty();
      key.valid.push_back(has_key ? 1 : 0);
      if (has_key) {
        if (model.transformed) key.i64.push_back(r.key_index);
        else key.str.push_back(r.key);
      }
      value.valid.push_back(r.has_value ? 1 : 0);
      if (r.has_value) value.f64.push_back(r.value);
    }
    t.columns.push_back(parquet::make_i64("measurement_id", std::move(mid)));
    t.columns.push_back(parquet::make_i64("event_id", std::move(eid)));
    t.columns.push_back(parquet::make_str("measurement_name", std::move(name)));
    t.columns.push_back(std::move(key));
    t.columns.push_back(std::move(value));
    parquet::write_file((fs::path(dir) / "measurements.parquet").string(), t);
  }

  json sidecar;
  sidecar["schema_version"] = 1;
  sidecar["epoch"] = "1970-01-01T00:00";
  sidecar["time_unit"] = "minutes";
  sidecar["stage"] = model.transformed ? "transformed" : "raw";
  sidecar["config_hash"] = hex64(config_hash(config));
  sidecar["counts"] = {{"subjects", model.subjects.size()},
                       {"events", model.events.size()},
                       {"measurements", model.measurements.size()}};
  std::ofstream out(fs::path(dir) / "sidecar.json");
  out << sidecar.dump(2) << "\n";
  if (!out) fail(ErrKind::Io, "cannot write sidecar in " + dir);
}

InternalDataModel read_internal_model(const std::string& dir, const DatasetConfig& config) {
  std::ifstream in(fs::path(dir) / "sidecar.json");
  if (!in) fail(ErrKind::Io, "missing sidecar.json in " + dir);
  json sidecar = json::parse(in, nullptr, false);
  if (sidecar.is_discarded()) fail(ErrKind::Format, "unreadable sidecar.json in " + dir);
  if (sidecar.value("schema_version", 0) != 1)
    fail(ErrKind::Format, "unsupported sidecar schema version in " + dir);

  InternalDataModel model;
  model.transformed = sidecar.value("stage", "raw") == std::string("transformed");
  for (const auto& m : config.measurements) model.measurement_names.push_back(m.name);

  {
    parquet::TableData t = parquet::read_file((fs::path(dir) / "subjects.parquet").string());
    const auto& ids = t.col("subject_id");
    const auto& raw = t.col("raw_id");
    for (int64_t r = 0; r < t.num_rows; ++r) {
      Subject s;
      s.id = static_cast<uint64_t>(ids.i64[static_cast<size_t>(r)]);
      s.raw_id = raw.str[static_cast<size_t>(r)];
      model.subjects.push_back(std::move(s));
    }
    for (int32_t mi = 0; mi < static_cast<int32_t>(config.measurements.size()); ++mi) {
      const MeasurementConfig& m = config.measurements[static_cast<size_t>(mi)];
      if (m.temporality != Temporality::Static) continue;
      bool categorical = m.value_kind == ValueKind::Categorical;
      std::string col_name = categorical && model.transformed ? m.name + "_index" : m.name;
      const parquet::Column& col = t.col(col_name);
      size_t cursor = 0;
      for (size_t r = 0; r < model.subjects.size(); ++r) {
        if (col.optional && !col.valid[r]) continue;
        StaticObs obs;
        obs.measurement = mi;
        if (categorical && model.transformed) obs.key_index = col.i64[cursor];
        else if (categorical) obs.key = col.str[cursor];
        else {
          obs.value = col.f64[cursor];
          obs.has_value = true;
        }
        ++cursor;
        model.subjects[r].statics.push_back(std::move(obs));
      }
    }
    for (auto& s : model.subjects)
      std::sort(s.statics.begin(), s.statics.end(),
                [](const StaticObs& a, const StaticObs& b) { return a.measurement < b.measurement; });
  }

  {
    parquet::TableData t = parquet::read_file((fs::path(dir) / "events.parquet").string());
    const auto& eid = t.col("event_id");
    const auto& sid = t.col("subject_id");
    const auto& ts = t.col("timestamp");
    const auto& type = t.col("event_type");
    const parquet::Column* tix = model.transformed ? &t.col("event_type_index") : nullptr;
    for (size_t r = 0; r < static_cast<size_t>(t.num_rows); ++r) {
      Event e;
      e.id = eid.i64[r];
      e.subject_id = static_cast<uint64_t>(sid.i64[r]);
      e.time = ts.f64[r];
      e.type = type.str[r];
      if (tix) e.type_index = tix->i64[r];
      model.events.push_back(std::move(e));
    }
  }

  {
    std::map<std::string, int32_t> name_to_idx;
    for (int32_t i = 0; i < static_cast<int32_t>(model.measurement_names.size()); ++i)
      name_to_idx[model.measurement_names[static_cast<size_t>(i)]] = i;
    parquet::TableData t = parquet::read_file((fs::path(dir) / "measurements.parquet").string());
    const auto& mid = t.col("measurement_id");
    const auto& eid = t.col("event_id");
    const auto& name = t.col("measurement_name");
    const parquet::Column& key = t.col(model.transformed ? "key_index" : "key");
    const auto& value = t.col("numeric_value");
    size_t key_cursor = 0, value_cursor = 0;
    for (size_t r = 0; r < static_cast<size_t>(t.num_rows); ++r) {
      MeasurementRow row;
      row.id = mid.i64[r];
      row.event_id = eid.i64[r];
      auto it = name_to_idx.find(name.str[r]);
      if (it == name_to_idx.end())
        fail(ErrKind::Format, "measurements file names unknown measurement '" + name.str[r] + "'");
      row.measurement = it->second;
      if (key.valid[r]) {
        if (model.transformed) row.key_index = key.i64[key_cursor];
        else row.key = key.str[key_cursor];
        ++key_cursor;
      }
      if (value.valid[r]) {
        row.value = value.f64[value_cursor++];
        row.has_value = true;
      }
      model.measurements.push_back(std::move(row));
    }
  }
  return model;
}

}  // namespace evseq

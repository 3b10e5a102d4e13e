#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "evseq/config.hpp"

namespace evseq {

// One extracted source table. Only the columns a measurement references are
// retained. Subject ids are canonical unsigned integers and timestamps are
// minutes since 1970-01-01T00:00 by the time a table leaves extract_sources.
struct RawTable {
  struct Col {
    bool numeric = false;
    std::vector<std::string> s;     // when !numeric
    std::vector<double> d;          // when numeric
    std::vector<uint8_t> present;   // per row, 1 = cell holds a value
  };

  std::string source;
  bool is_static = false;
  size_t num_rows = 0;
  std::vector<uint64_t> subject;
  std::vector<double> timestamp;        // empty for static tables
  std::vector<std::string> event_type;  // empty for static tables
  std::map<std::string, Col> cells;     // keyed by column name
};

struct ExtractResult {
  std::map<std::string, RawTable> tables;
  // canonical id → original id text; identity for all-numeric id spaces
  std::vector<std::pair<uint64_t, std::string>> id_mapping;
  bool numeric_ids = true;
  // subject universe: rows of static sources when any exist, else everyone seen
  std::vector<uint64_t> universe;
};

constexpr double kAbsent = std::numeric_limits<double>::quiet_NaN();

struct StaticObs {
  int32_t measurement = -1;   // index into DatasetConfig::measurements
  std::string key;            // categorical raw value; empty for univariate
  int64_t key_index = -1;     // filled by preprocess
  double value = kAbsent;     // univariate value (dob values are minutes)
  bool has_value = false;
};

struct Subject {
  uint64_t id = 0;
  std::string raw_id;
  std::vector<StaticObs> statics;
};

struct Event {
  int64_t id = -1;
  uint64_t subject_id = 0;
  double time = 0;
  std::string type;
  int64_t type_index = -1;    // filled by preprocess
};

struct MeasurementRow {
  int64_t id = -1;
  int64_t event_id = -1;
  int32_t measurement = -1;
  std::string key;            // categorical value or multivariate key
  int64_t key_index = -1;     // filled by preprocess
  double value = kAbsent;
  bool has_value = false;
};

// Three-table event stream: subjects with static observations, events ordered
// per subject by (time, id), and per-event measurement rows.
struct InternalDataModel {
  std::vector<Subject> subjects;          // ascending id
  std::vector<Event> events;              // (subject_id, time, id) ascending
  std::vector<MeasurementRow> measurements;  // (event_id, id) ascending
  std::vector<std::string> measurement_names;
  bool transformed = false;

  const Subject* find_subject(uint64_t id) const;
  bool operator==(const InternalDataModel&) const;
};

bool operator==(const Subject& a, const Subject& b);
bool operator==(const Event& a, const Event& b);
bool operator==(const MeasurementRow& a, const MeasurementRow& b);

// Reads every configured source. Paths resolve relative to base_dir when they
// are not absolute. Row provenance (source name, row number) is attached to
// parse failures.
ExtractResult extract_sources(const DatasetConfig& config, const std::string& base_dir = "");

// Joins the extracted tables: events deduplicated on (subject, time, type) and
// measurements attached to their event. No measurement rows are dropped here.
InternalDataModel compile_internal_model(const ExtractResult& extracted,
                                         const DatasetConfig& config);

// subjects/events/measurements Parquet files plus a JSON sidecar.
void write_internal_model(const std::string& dir, const InternalDataModel& model,
                          const DatasetConfig& config);
InternalDataModel read_internal_model(const std::string& dir, const DatasetConfig& config);

}  // namespace evseq

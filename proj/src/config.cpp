#include "evseq/config.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace evseq {

namespace {

[[noreturn]] void schema_fail(const std::string& where, const std::string& msg) {
  fail(ErrKind::Schema, where.empty() ? msg : where + ": " + msg);
}

template <typename T>
T parse_enum(const std::string& text, const std::string& where,
             std::initializer_list<std::pair<const char*, T>> table) {
  for (const auto& [name, value] : table)
    if (text == name) return value;
  std::string options;
  for (const auto& [name, value] : table) {
    if (!options.empty()) options += ", ";
    options += name;
  }
  schema_fail(where, "invalid value '" + text + "' (expected one of: " + options + ")");
}

Temporality parse_temporality(const std::string& s, const std::string& where) {
  return parse_enum<Temporality>(s, where,
                                 {{"static", Temporality::Static},
                                  {"dynamic", Temporality::Dynamic},
                                  {"functional_time_dependent", Temporality::FunctionalTimeDependent}});
}

ValueKind parse_value_kind(const std::string& s, const std::string& where) {
  return parse_enum<ValueKind>(s, where,
                               {{"categorical", ValueKind::Categorical},
                                {"univariate_regression", ValueKind::UnivariateRegression},
                                {"multivariate_regression", ValueKind::MultivariateRegression}});
}

SourceFormat parse_format(const std::string& s, const std::string& where) {
  return parse_enum<SourceFormat>(s, where,
                                  {{"csv", SourceFormat::Csv}, {"parquet", SourceFormat::Parquet}});
}

PartSelector parse_part(const std::string& s, const std::string& where) {
  return parse_enum<PartSelector>(s, where,
                                  {{"whole", PartSelector::Whole},
                                   {"categorical_only", PartSelector::CategoricalOnly},
                                   {"numerical_only", PartSelector::NumericalOnly}});
}

EventMode parse_mode(const std::string& s, const std::string& where) {
  return parse_enum<EventMode>(s, where,
                               {{"conditionally_independent", EventMode::ConditionallyIndependent},
                                {"nested_attention", EventMode::NestedAttention}});
}

void check_keys(const YAML::Node& map, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (const auto& kv : map) {
    std::string key = kv.first.Scalar();
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) schema_fail(where, "unknown field '" + key + "'");
  }
}

const YAML::Node require_map(const YAML::Node& n, const std::string& where) {
  if (!n.IsMap()) schema_fail(where, "expected a mapping");
  return n;
}

std::string scalar_at(const YAML::Node& map, const char* key, const std::string& where,
                      bool required) {
  YAML::Node n = map[key];
  if (!n.IsDefined() || n.IsNull()) {
    if (required) schema_fail(where, std::string("missing required field '") + key + "'");
    return "";
  }
  if (!n.IsScalar()) schema_fail(where, std::string("field '") + key + "' must be a scalar");
  return n.Scalar();
}

uint64_t u64_at(const YAML::Node& map, const char* key, const std::string& where,
                uint64_t fallback) {
  std::string s = scalar_at(map, key, where, false);
  if (s.empty() && !map[key].IsDefined()) return fallback;
  uint64_t v;
  if (!try_parse_u64(s, v))
    schema_fail(where, std::string("field '") + key + "' must be a non-negative integer, got '" + s + "'");
  return v;
}

double double_at(const YAML::Node& map, const char* key, const std::string& where,
                 double fallback, bool required = false) {
  std::string s = scalar_at(map, key, where, required);
  if (s.empty() && !map[key].IsDefined()) return fallback;
  double v;
  if (!try_parse_double(s, v) || !std::isfinite(v))
    schema_fail(where, std::string("field '") + key + "' must be a finite number, got '" + s + "'");
  return v;
}

double scalar_double(const YAML::Node& n, const std::string& where) {
  if (!n.IsScalar()) schema_fail(where, "expected a number");
  double v;
  if (!try_parse_double(n.Scalar(), v) || !std::isfinite(v))
    schema_fail(where, "expected a finite number, got '" + n.Scalar() + "'");
  return v;
}

MeasurementConfig implicit_event_type() {
  MeasurementConfig m;
  m.name = kEventTypeMeasurement;
  m.temporality = Temporality::Dynamic;
  m.value_kind = ValueKind::Categorical;
  m.implicit = true;
  return m;
}

SourceConfig parse_source(const YAML::Node& node, const std::string& where) {
  require_map(node, where);
  check_keys(node,
             {"name", "path", "format", "subject_id_column", "timestamp_column", "event_type",
              "event_type_column"},
             where);
  SourceConfig s;
  s.name = scalar_at(node, "name", where, true);
  s.path = scalar_at(node, "path", where, true);
  s.format = parse_format(scalar_at(node, "format", where, true), where + ".format");
  s.subject_id_column = scalar_at(node, "subject_id_column", where, true);
  s.timestamp_column = scalar_at(node, "timestamp_column", where, false);
  s.event_type = scalar_at(node, "event_type", where, false);
  s.event_type_column = scalar_at(node, "event_type_column", where, false);

  if (!s.event_type.empty() && !s.event_type_column.empty())
    schema_fail(where, "event_type and event_type_column are mutually exclusive");
  if (s.is_static()) {
    if (!s.event_type.empty() || !s.event_type_column.empty())
      schema_fail(where, "static sources (no timestamp_column) cannot declare an event type");
  } else if (s.event_type.empty() && s.event_type_column.empty()) {
    s.event_type = s.name;
  }
  return s;
}

MeasurementConfig parse_measurement(const YAML::Node& node, const std::string& where) {
  require_map(node, where);
  check_keys(node,
             {"name", "temporality", "value_kind", "min_frequency", "censor_bounds",
              "source_table", "key_column", "value_column"},
             where);
  MeasurementConfig m;
  m.name = scalar_at(node, "name", where, true);
  if (m.name == kEventTypeMeasurement)
    schema_fail(where, "'event_type' is reserved for the implicit per-event type measurement");
  m.temporality = parse_temporality(scalar_at(node, "temporality", where, true), where + ".temporality");
  m.value_kind = parse_value_kind(scalar_at(node, "value_kind", where, true), where + ".value_kind");
  m.min_frequency = u64_at(node, "min_frequency", where, 0);
  m.source_table = scalar_at(node, "source_table", where, false);
  m.key_column = scalar_at(node, "key_column", where, false);
  m.value_column = scalar_at(node, "value_column", where, false);

  if (YAML::Node cb = node["censor_bounds"]; cb.IsDefined()) {
    if (!cb.IsSequence() || cb.size() != 2)
      schema_fail(where, "censor_bounds must be a [lower, upper] pair");
    double lo = scalar_double(cb[0], where + ".censor_bounds");
    double hi = scalar_double(cb[1], where + ".censor_bounds");
    if (lo > hi) schema_fail(where, "censor_bounds lower exceeds upper");
    m.censor_bounds = {lo, hi};
  }

  if (m.temporality == Temporality::FunctionalTimeDependent) {
    const auto& known = functional_feature_names();
    if (std::find(known.begin(), known.end(), m.name) == known.end()) {
      std::string names;
      for (const auto& n : known) names += (names.empty() ? "" : ", ") + n;
      schema_fail(where, "unknown feature function '" + m.name + "' (available: " + names + ")");
    }
    if (!m.source_table.empty() || !m.key_column.empty() || !m.value_column.empty())
      schema_fail(where, "functional_time_dependent measurements are computed, not extracted; "
                         "source_table/key_column/value_column do not apply");
    if (m.censor_bounds) schema_fail(where, "censor_bounds do not apply to computed features");
    if (m.name == "age" && m.value_kind != ValueKind::UnivariateRegression)
      schema_fail(where, "'age' is univariate_regression");
    if (m.name == "time_of_day" && m.value_kind != ValueKind::Categorical)
      schema_fail(where, "'time_of_day' is categorical");
  } else {
    if (m.source_table.empty()) schema_fail(where, "missing required field 'source_table'");
    if (m.key_column.empty()) schema_fail(where, "missing required field 'key_column'");
    if (m.value_kind == ValueKind::MultivariateRegression) {
      if (m.value_column.empty())
        schema_fail(where, "multivariate_regression requires value_column");
      if (m.temporality == Temporality::Static)
        schema_fail(where, "multivariate_regression measurements must be dynamic");
    } else if (!m.value_column.empty()) {
      schema_fail(where, "value_column applies only to multivariate_regression");
    }
    if (m.censor_bounds && m.value_kind == ValueKind::Categorical)
      schema_fail(where, "censor_bounds do not apply to categorical measurements");
  }
  return m;
}

DependencyGraph parse_dep_graph(const YAML::Node& node, const std::string& where) {
  if (!node.IsSequence()) schema_fail(where, "expected a list of stages");
  DependencyGraph g;
  for (size_t i = 0; i < node.size(); ++i) {
    std::string stage_where = where + "[" + std::to_string(i) + "]";
    const YAML::Node& stage = node[i];
    if (!stage.IsSequence()) schema_fail(stage_where, "expected a list of targets");
    std::vector<DepTarget> targets;
    for (size_t j = 0; j < stage.size(); ++j) {
      const YAML::Node& t = stage[j];
      DepTarget target;
      if (t.IsScalar()) {
        target.measurement = t.Scalar();
      } else if (t.IsSequence() && t.size() == 2 && t[0].IsScalar() && t[1].IsScalar()) {
        target.measurement = t[0].Scalar();
        target.part = parse_part(t[1].Scalar(), stage_where);
      } else {
        schema_fail(stage_where, "target must be a name or a [name, part] pair");
      }
      targets.push_back(std::move(target));
    }
    g.stages.push_back(std::move(targets));
  }
  return g;
}

ModelConfig parse_model_node(const YAML::Node& node, const std::string& where) {
  require_map(node, where);
  check_keys(node,
             {"structured_event_processing_mode", "measurements_per_dep_graph_level", "hidden_dim",
              "num_layers", "num_heads", "max_seq_len", "tte_mixture_components", "learning_rate",
              "measurement_vocab_sizes"},
             where);
  ModelConfig m;
  m.mode = parse_mode(scalar_at(node, "structured_event_processing_mode", where, true),
                      where + ".structured_event_processing_mode");
  YAML::Node graph = node["measurements_per_dep_graph_level"];
  if (m.mode == EventMode::NestedAttention) {
    if (!graph.IsDefined())
      schema_fail(where, "nested_attention requires measurements_per_dep_graph_level");
    m.dependency_graph = parse_dep_graph(graph, where + ".measurements_per_dep_graph_level");
  } else if (graph.IsDefined()) {
    schema_fail(where, "measurements_per_dep_graph_level applies only to nested_attention");
  }
  auto positive = [&](const char* key, uint64_t fallback) {
    uint64_t v = u64_at(node, key, where, fallback);
    if (v == 0) schema_fail(where, std::string("field '") + key + "' must be positive");
    return static_cast<int64_t>(v);
  };
  m.hidden_dim = positive("hidden_dim", 64);
  m.num_layers = positive("num_layers", 2);
  m.num_heads = positive("num_heads", 4);
  m.max_seq_len = positive("max_seq_len", 128);
  m.tte_mixture_components = positive("tte_mixture_components", 4);
  m.learning_rate = double_at(node, "learning_rate", where, 1e-3);
  if (m.learning_rate <= 0) schema_fail(where, "learning_rate must be positive");

  if (YAML::Node vs = node["measurement_vocab_sizes"]; vs.IsDefined()) {
    require_map(vs, where + ".measurement_vocab_sizes");
    for (const auto& kv : vs) {
      std::string name = kv.first.Scalar();
      uint64_t count;
      if (!kv.second.IsScalar() || !try_parse_u64(kv.second.Scalar(), count) || count == 0)
        schema_fail(where + ".measurement_vocab_sizes",
                    "vocabulary size for '" + name + "' must be a positive integer");
      m.measurement_vocab_sizes[name] = static_cast<int64_t>(count);
    }
  }
  return m;
}

YAML::Node load_yaml(const std::string& text) {
  try {
    return YAML::Load(text);
  } catch (const YAML::Exception& e) {
    fail(ErrKind::Schema, std::string("invalid YAML: ") + e.what());
  }
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrKind::Io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void emit_double(YAML::Emitter& out, double v) {
  // Shortest decimal form that parses back exactly.
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (strtod(buf, nullptr) == v) break;
  }
  std::string s(buf);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  out << s;
}

void emit_dep_graph(YAML::Emitter& out, const DependencyGraph& g) {
  out << YAML::BeginSeq;
  for (const auto& stage : g.stages) {
    out << YAML::Flow << YAML::BeginSeq;
    for (const auto& t : stage) {
      if (t.part == PartSelector::Whole) {
        out << t.measurement;
      } else {
        out << YAML::Flow << YAML::BeginSeq << t.measurement << to_string(t.part) << YAML::EndSeq;
      }
    }
    out << YAML::EndSeq;
  }
  out << YAML::EndSeq;
}

void emit_model(YAML::Emitter& out, const ModelConfig& m) {
  out << YAML::BeginMap;
  out << YAML::Key << "structured_event_processing_mode" << YAML::Value << to_string(m.mode);
  if (m.mode == EventMode::NestedAttention) {
    out << YAML::Key << "measurements_per_dep_graph_level" << YAML::Value;
    emit_dep_graph(out, m.dependency_graph);
  }
  out << YAML::Key << "hidden_dim" << YAML::Value << m.hidden_dim;
  out << YAML::Key << "num_layers" << YAML::Value << m.num_layers;
  out << YAML::Key << "num_heads" << YAML::Value << m.num_heads;
  out << YAML::Key << "max_seq_len" << YAML::Value << m.max_seq_len;
  out << YAML::Key << "tte_mixture_components" << YAML::Value << m.tte_mixture_components;
  out << YAML::Key << "learning_rate" << YAML::Value;
  emit_double(out, m.learning_rate);
  if (!m.measurement_vocab_sizes.empty()) {
    out << YAML::Key << "measurement_vocab_sizes" << YAML::Value << YAML::BeginMap;
    for (const auto& [name, count] : m.measurement_vocab_sizes)
      out << YAML::Key << name << YAML::Value << count;
    out << YAML::EndMap;
  }
  out << YAML::EndMap;
}

}  // namespace

const char* to_string(Temporality t) {
  switch (t) {
    case Temporality::Static: return "static";
    case Temporality::Dynamic: return "dynamic";
    case Temporality::FunctionalTimeDependent: return "functional_time_dependent";
  }
  return "?";
}

const char* to_string(ValueKind k) {
  switch (k) {
    case ValueKind::Categorical: return "categorical";
    case ValueKind::UnivariateRegression: return "univariate_regression";
    case ValueKind::MultivariateRegression: return "multivariate_regression";
  }
  return "?";
}

const char* to_string(SourceFormat f) {
  return f == SourceFormat::Csv ? "csv" : "parquet";
}

const char* to_string(PartSelector p) {
  switch (p) {
    case PartSelector::Whole: return "whole";
    case PartSelector::CategoricalOnly: return "categorical_only";
    case PartSelector::NumericalOnly: return "numerical_only";
  }
  return "?";
}

const char* to_string(EventMode m) {
  return m == EventMode::ConditionallyIndependent ? "conditionally_independent" : "nested_attention";
}

const std::vector<std::string>& functional_feature_names() {
  static const std::vector<std::string> names = {"age", "time_of_day"};
  return names;
}

const SourceConfig* DatasetConfig::find_source(const std::string& name) const {
  for (const auto& s : sources)
    if (s.name == name) return &s;
  return nullptr;
}

const MeasurementConfig* DatasetConfig::find_measurement(const std::string& name) const {
  for (const auto& m : measurements)
    if (m.name == name) return &m;
  return nullptr;
}

DatasetConfig parse_dataset_config(const std::string& text) {
  YAML::Node root = load_yaml(text);
  require_map(root, "config");
  check_keys(root,
             {"sources", "measurements", "split_fractions", "seed", "outlier_stddev_cutoff",
              "time_unit", "model"},
             "config");

  DatasetConfig c;

  YAML::Node sources = root["sources"];
  if (!sources.IsDefined() || !sources.IsSequence() || sources.size() == 0)
    schema_fail("config", "'sources' must be a non-empty list");
  std::set<std::string> source_names;
  for (size_t i = 0; i < sources.size(); ++i) {
    SourceConfig s = parse_source(sources[i], "sources[" + std::to_string(i) + "]");
    if (!source_names.insert(s.name).second)
      schema_fail("config", "duplicate source name '" + s.name + "'");
    c.sources.push_back(std::move(s));
  }

  c.measurements.push_back(implicit_event_type());
  if (YAML::Node ms = root["measurements"]; ms.IsDefined()) {
    if (!ms.IsSequence()) schema_fail("config", "'measurements' must be a list");
    std::set<std::string> names;
    for (size_t i = 0; i < ms.size(); ++i) {
      MeasurementConfig m = parse_measurement(ms[i], "measurements[" + std::to_string(i) + "]");
      if (!names.insert(m.name).second)
        schema_fail("config", "duplicate measurement name '" + m.name + "'");
      c.measurements.push_back(std::move(m));
    }
  }

  for (const auto& m : c.measurements) {
    if (m.temporality == Temporality::FunctionalTimeDependent || m.implicit) continue;
    const SourceConfig* src = c.find_source(m.source_table);
    if (!src)
      fail(ErrKind::Reference,
           "measurement '" + m.name + "' references unknown source '" + m.source_table + "'");
    if (m.temporality == Temporality::Static && !src->is_static())
      schema_fail("measurement '" + m.name + "'",
                  "static measurements must come from a static source, but '" + src->name +
                      "' has a timestamp_column");
    if (m.temporality == Temporality::Dynamic && src->is_static())
      schema_fail("measurement '" + m.name + "'",
                  "dynamic measurements need a timestamped source, but '" + src->name +
                      "' is static");
  }

  if (YAML::Node sf = root["split_fractions"]; sf.IsDefined()) {
    if (!sf.IsSequence() || sf.size() != 3)
      schema_fail("config", "'split_fractions' must be a list of three numbers");
    double sum = 0;
    for (int i = 0; i < 3; ++i) {
      double v = scalar_double(sf[i], "split_fractions");
      if (v < 0) fail(ErrKind::Split, "split fractions must be non-negative");
      c.split_fractions[static_cast<size_t>(i)] = v;
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      fail(ErrKind::Split,
           "split fractions must sum to 1, got " + std::to_string(sum));
  }

  c.seed = u64_at(root, "seed", "config", 1);
  c.outlier_stddev_cutoff = double_at(root, "outlier_stddev_cutoff", "config", 5.0);
  if (c.outlier_stddev_cutoff <= 0)
    schema_fail("config", "outlier_stddev_cutoff must be positive");

  std::string unit = scalar_at(root, "time_unit", "config", false);
  if (!unit.empty() && unit != "minutes")
    schema_fail("config", "time_unit is fixed to 'minutes', got '" + unit + "'");

  if (YAML::Node model = root["model"]; model.IsDefined()) {
    c.model = parse_model_node(model, "model");
    validate_model_config(*c.model, c.measurements);
  }
  return c;
}

DatasetConfig load_dataset_config(const std::string& path) {
  return parse_dataset_config(read_text_file(path));
}

std::string serialize_dataset_config(const DatasetConfig& config) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "sources" << YAML::Value << YAML::BeginSeq;
  for (const auto& s : config.sources) {
    out << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << s.name;
    out << YAML::Key << "path" << YAML::Value << s.path;
    out << YAML::Key << "format" << YAML::Value << to_string(s.format);
    out << YAML::Key << "subject_id_column" << YAML::Value << s.subject_id_column;
    if (!s.is_static()) {
      out << YAML::Key << "timestamp_column" << YAML::Value << s.timestamp_column;
      if (!s.event_type_column.empty())
        out << YAML::Key << "event_type_column" << YAML::Value << s.event_type_column;
      else
        out << YAML::Key << "event_type" << YAML::Value << s.event_type;
    }
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;

  out << YAML::Key << "measurements" << YAML::Value << YAML::BeginSeq;
  for (const auto& m : config.measurements) {
    if (m.implicit) continue;
    out << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << m.name;
    out << YAML::Key << "temporality" << YAML::Value << to_string(m.temporality);
    out << YAML::Key << "value_kind" << YAML::Value << to_string(m.value_kind);
    if (m.temporality != Temporality::FunctionalTimeDependent) {
      out << YAML::Key << "source_table" << YAML::Value << m.source_table;
      out << YAML::Key << "key_column" << YAML::Value << m.key_column;
      if (!m.value_column.empty())
        out << YAML::Key << "value_column" << YAML::Value << m.value_column;
      out << YAML::Key << "min_frequency" << YAML::Value << m.min_frequency;
      if (m.censor_bounds) {
        out << YAML::Key << "censor_bounds" << YAML::Value << YAML::Flow << YAML::BeginSeq;
        emit_double(out, m.censor_bounds->first);
        emit_double(out, m.censor_bounds->second);
        out << YAML::EndSeq;
      }
    }
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;

  out << YAML::Key << "split_fractions" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (double f : config.split_fractions) emit_double(out, f);
  out << YAML::EndSeq;
  out << YAML::Key << "seed" << YAML::Value << config.seed;
  out << YAML::Key << "outlier_stddev_cutoff" << YAML::Value;
  emit_double(out, config.outlier_stddev_cutoff);
  out << YAML::Key << "time_unit" << YAML::Value << "minutes";
  if (config.model) {
    out << YAML::Key << "model" << YAML::Value;
    emit_model(out, *config.model);
  }
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

ModelConfig parse_model_config(const std::string& text) {
  YAML::Node root = load_yaml(text);
  ModelConfig m = parse_model_node(root, "model");
  validate_model_config(m, {});
  return m;
}

ModelConfig load_model_config(const std::string& path) {
  return parse_model_config(read_text_file(path));
}

std::string serialize_model_config(const ModelConfig& config) {
  YAML::Emitter out;
  emit_model(out, config);
  return std::string(out.c_str()) + "\n";
}

DependencyGraph validate_dependency_graph(const DependencyGraph& graph,
                                          const std::vector<MeasurementConfig>& measurements) {
  std::map<std::string, const MeasurementConfig*> by_name;
  for (const auto& m : measurements) by_name[m.name] = &m;

  struct Coverage {
    int cat_stage = -1;  // key side (or the whole of a non-split measurement)
    int num_stage = -1;  // value side of multivariate_regression
  };
  std::map<std::string, Coverage> coverage;

  for (size_t g = 0; g < graph.stages.size(); ++g) {
    for (const auto& t : graph.stages[g]) {
      auto it = by_name.find(t.measurement);
      if (it == by_name.end())
        fail(ErrKind::UnknownMeasurement,
             "dependency graph names unknown measurement '" + t.measurement + "'");
      const MeasurementConfig& m = *it->second;

      bool functional = m.temporality == Temporality::FunctionalTimeDependent;
      if (g == 0 && !functional)
        fail(ErrKind::StageZeroViolation,
             "stage 0 is reserved for functional time-dependent features; '" + t.measurement +
                 "' is " + to_string(m.temporality));
      if (g > 0 && functional)
        fail(ErrKind::StageZeroViolation,
             "functional feature '" + t.measurement + "' must be in stage 0, found in stage " +
                 std::to_string(g));

      bool splittable = m.value_kind == ValueKind::MultivariateRegression;
      if (t.part != PartSelector::Whole && !splittable)
        fail(ErrKind::UnknownMeasurement,
             "measurement '" + t.measurement + "' has no '" + to_string(t.part) +
                 "' part (only multivariate_regression splits)");

      Coverage& cov = coverage[t.measurement];
      auto claim = [&](int& slot, const char* what) {
        if (slot >= 0)
          fail(ErrKind::DuplicateTarget,
               "dependency graph lists " + std::string(what) + " of '" + t.measurement +
                   "' more than once");
        slot = static_cast<int>(g);
      };
      switch (t.part) {
        case PartSelector::Whole:
          claim(cov.cat_stage, splittable ? "the categorical part" : "the measurement");
          if (splittable) claim(cov.num_stage, "the numerical part");
          break;
        case PartSelector::CategoricalOnly: claim(cov.cat_stage, "the categorical part"); break;
        case PartSelector::NumericalOnly: claim(cov.num_stage, "the numerical part"); break;
      }
    }
  }

  for (const auto& m : measurements) {
    auto it = coverage.find(m.name);
    bool cat_done = it != coverage.end() && it->second.cat_stage >= 0;
    bool num_done = it != coverage.end() && it->second.num_stage >= 0;
    if (m.temporality == Temporality::FunctionalTimeDependent) {
      if (!cat_done)
        fail(ErrKind::IncompleteGraph,
             "functional feature '" + m.name + "' missing from stage 0");
      continue;
    }
    bool needs_num = m.value_kind == ValueKind::MultivariateRegression;
    if (!cat_done || (needs_num && !num_done))
      fail(ErrKind::IncompleteGraph,
           "measurement '" + m.name + "' is not fully covered by the dependency graph");
    if (needs_num && it->second.num_stage < it->second.cat_stage)
      fail(ErrKind::PartOrderViolation,
           "numerical part of '" + m.name + "' (stage " + std::to_string(it->second.num_stage) +
               ") precedes its categorical part (stage " + std::to_string(it->second.cat_stage) +
               ")");
  }
  return graph;
}

void validate_model_config(const ModelConfig& config,
                           const std::vector<MeasurementConfig>& measurements) {
  if (config.hidden_dim % config.num_heads != 0)
    fail(ErrKind::Schema, "hidden_dim (" + std::to_string(config.hidden_dim) +
                              ") must be divisible by num_heads (" +
                              std::to_string(config.num_heads) + ")");
  if (!measurements.empty()) {
    if (config.mode == EventMode::NestedAttention)
      validate_dependency_graph(config.dependency_graph, measurements);
    for (const auto& [name, count] : config.measurement_vocab_sizes) {
      bool known = false;
      for (const auto& m : measurements) known = known || m.name == name;
      if (!known)
        fail(ErrKind::UnknownMeasurement,
             "measurement_vocab_sizes names unknown measurement '" + name + "'");
    }
  }
}

uint64_t config_hash(const DatasetConfig& config) {
  return fnv1a64(serialize_dataset_config(config));
}

uint64_t config_hash(const ModelConfig& config) {
  return fnv1a64(serialize_model_config(config));
}

}  // namespace evseq

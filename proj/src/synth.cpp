#include "evseq/synth.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>

#include <json.hpp>

#include "evseq/csv.hpp"
#include "evseq/metrics.hpp"

namespace evseq {

namespace {

using json = nlohmann::ordered_json;

[[noreturn]] void schema_fail(const std::string& where, const std::string& msg) {
  fail(ErrKind::Schema, where.empty() ? msg : where + ": " + msg);
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

// Ordered name -> weight mapping; yaml-cpp iterates maps in document order.
std::vector<std::pair<std::string, double>> weighted_at(const YAML::Node& map, const char* key,
                                                        const std::string& where, bool required) {
  YAML::Node n = map[key];
  std::vector<std::pair<std::string, double>> out;
  if (!n.IsDefined() || n.IsNull()) {
    if (required) schema_fail(where, std::string("missing required field '") + key + "'");
    return out;
  }
  if (!n.IsMap()) schema_fail(where, std::string("field '") + key + "' must be a mapping");
  for (const auto& kv : n) {
    std::string name = kv.first.Scalar();
    double w;
    if (!kv.second.IsScalar() || !try_parse_double(kv.second.Scalar(), w) || !std::isfinite(w) ||
        w < 0)
      schema_fail(where + "." + key, "weight for '" + name + "' must be a non-negative number");
    for (const auto& [seen, unused] : out)
      if (seen == name) schema_fail(where + "." + key, "duplicate entry '" + name + "'");
    out.emplace_back(name, w);
  }
  if (out.empty()) schema_fail(where, std::string("field '") + key + "' must be non-empty");
  return out;
}

double weight_sum(const std::vector<std::pair<std::string, double>>& w) {
  double s = 0;
  for (const auto& [name, v] : w) s += v;
  return s;
}

ValueParams parse_value_params(const YAML::Node& n, const std::string& where) {
  require_map(n, where);
  check_keys(n, {"mean", "stddev"}, where);
  ValueParams p;
  p.mean = double_at(n, "mean", where, 0.0, true);
  p.stddev = double_at(n, "stddev", where, 1.0);
  if (p.stddev < 0) schema_fail(where, "stddev must be non-negative");
  return p;
}

TteSpec parse_tte(const YAML::Node& n, const std::string& where) {
  require_map(n, where);
  TteSpec t;
  std::string kind = scalar_at(n, "kind", where, true);
  if (kind == "exponential") {
    check_keys(n, {"kind", "mean_minutes"}, where);
    t.kind = TteSpec::Kind::Exponential;
    t.mean_minutes = double_at(n, "mean_minutes", where, 0.0, true);
    if (t.mean_minutes <= 0) schema_fail(where, "mean_minutes must be positive");
  } else if (kind == "lognormal_mixture") {
    check_keys(n, {"kind", "components"}, where);
    t.kind = TteSpec::Kind::LognormalMixture;
    YAML::Node comps = n["components"];
    if (!comps.IsSequence() || comps.size() == 0)
      schema_fail(where, "components must be a non-empty sequence");
    for (size_t i = 0; i < comps.size(); ++i) {
      std::string cw = where + ".components[" + std::to_string(i) + "]";
      require_map(comps[i], cw);
      check_keys(comps[i], {"weight", "mu", "sigma"}, cw);
      TteSpec::Component c;
      c.weight = double_at(comps[i], "weight", cw, 1.0);
      c.mu = double_at(comps[i], "mu", cw, 0.0, true);
      c.sigma = double_at(comps[i], "sigma", cw, 0.0, true);
      if (c.weight <= 0) schema_fail(cw, "weight must be positive");
      if (c.sigma <= 0) schema_fail(cw, "sigma must be positive");
      t.components.push_back(c);
    }
  } else {
    schema_fail(where, "kind must be 'exponential' or 'lognormal_mixture'");
  }
  return t;
}

// Shortest representation that parses back to exactly the same double.
std::string fmt_double(double v) {
  if (!std::isfinite(v)) fail(ErrKind::NonFinite, "cannot format non-finite value");
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

CategoricalDist dist_of(const std::vector<std::pair<std::string, double>>& w) {
  std::vector<double> weights;
  weights.reserve(w.size());
  for (const auto& [name, v] : w) weights.push_back(v);
  return CategoricalDist(weights);
}

double snap_to_ms(double minutes) { return std::round(minutes * 60000.0) / 60000.0; }

// Observation drawn for one event, before serialization.
struct Obs {
  const OracleMeasurement* m;
  std::string key;
  double value = 0;
  bool has_value = false;
};

struct SimEvent {
  double time;
  size_t type_idx;
};

}  // namespace

double TteSpec::mean() const {
  if (kind == Kind::Exponential) return mean_minutes;
  double total_w = 0, total = 0;
  for (const auto& c : components) {
    total_w += c.weight;
    total += c.weight * std::exp(c.mu + 0.5 * c.sigma * c.sigma);
  }
  return total / total_w;
}

double TteSpec::sample(Rng& rng) const {
  if (kind == Kind::Exponential) return rng.exponential(1.0 / mean_minutes);
  std::vector<double> w;
  w.reserve(components.size());
  for (const auto& c : components) w.push_back(c.weight);
  const auto& c = components[rng.categorical(w)];
  return std::exp(c.mu + c.sigma * rng.normal());
}

double TteSpec::nll(double delta_minutes) const {
  if (!(delta_minutes > 0)) fail(ErrKind::NegativeDelta, "inter-event time must be positive");
  if (kind == Kind::Exponential) return delta_minutes / mean_minutes + std::log(mean_minutes);
  double total_w = 0;
  for (const auto& c : components) total_w += c.weight;
  double x = std::log(delta_minutes);
  // log-sum-exp over component log densities
  double best = -INFINITY;
  std::vector<double> terms;
  terms.reserve(components.size());
  for (const auto& c : components) {
    double z = (x - c.mu) / c.sigma;
    double logpdf = -0.5 * z * z - std::log(c.sigma) - 0.918938533204672742 - x +
                    std::log(c.weight / total_w);
    terms.push_back(logpdf);
    best = std::max(best, logpdf);
  }
  double acc = 0;
  for (double t : terms) acc += std::exp(t - best);
  return -(best + std::log(acc));
}

const OracleMeasurement* OracleSpec::find_measurement(const std::string& name) const {
  for (const auto& m : measurements)
    if (m.name == name) return &m;
  return nullptr;
}

const EventTypeSpec* OracleSpec::find_type(const std::string& name) const {
  for (const auto& t : event_types)
    if (t.name == name) return &t;
  return nullptr;
}

const TteSpec& OracleSpec::tte_of(const EventTypeSpec& t) const {
  static thread_local TteSpec fallback;
  if (t.tte) return *t.tte;
  fallback.kind = TteSpec::Kind::Exponential;
  fallback.mean_minutes = kMinutesPerDay / base_rate;
  return fallback;
}

namespace {

OracleMeasurement parse_oracle_measurement(const YAML::Node& node, const std::string& where) {
  require_map(node, where);
  check_keys(node, {"name", "kind", "static", "keys", "values", "value"}, where);
  OracleMeasurement m;
  m.name = scalar_at(node, "name", where, true);
  std::string kind = scalar_at(node, "kind", where, true);
  if (kind == "categorical")
    m.kind = ValueKind::Categorical;
  else if (kind == "univariate")
    m.kind = ValueKind::UnivariateRegression;
  else if (kind == "multivariate")
    m.kind = ValueKind::MultivariateRegression;
  else
    schema_fail(where, "kind must be one of: categorical, univariate, multivariate");
  std::string st = scalar_at(node, "static", where, false);
  m.is_static = st == "true" || st == "1";
  if (!st.empty() && !m.is_static && st != "false" && st != "0")
    schema_fail(where, "static must be a boolean");

  if (m.is_static) {
    if (m.kind == ValueKind::MultivariateRegression)
      schema_fail(where, "static measurements cannot be multivariate");
    if (m.kind == ValueKind::Categorical) {
      m.keys = weighted_at(node, "keys", where, true);
      if (weight_sum(m.keys) <= 0) schema_fail(where, "key weights must not all be zero");
    } else {
      if (node["keys"].IsDefined()) schema_fail(where, "keys only apply to categorical");
      m.value = parse_value_params(node["value"].IsDefined() ? node["value"] : YAML::Node(YAML::NodeType::Map),
                                   where + ".value");
    }
    if (node["values"].IsDefined()) schema_fail(where, "values only apply to multivariate");
    return m;
  }

  if (node["keys"].IsDefined())
    schema_fail(where, "dynamic key weights belong in event type menus, not the registry");
  if (m.kind == ValueKind::UnivariateRegression) {
    m.value = parse_value_params(node["value"].IsDefined() ? node["value"] : YAML::Node(YAML::NodeType::Map),
                                 where + ".value");
    if (node["values"].IsDefined()) schema_fail(where, "values only apply to multivariate");
  } else if (m.kind == ValueKind::MultivariateRegression) {
    YAML::Node values = node["values"];
    if (!values.IsDefined() || !values.IsMap() || values.size() == 0)
      schema_fail(where, "multivariate measurements need a non-empty 'values' mapping");
    for (const auto& kv : values)
      m.key_values[kv.first.Scalar()] =
          parse_value_params(kv.second, where + ".values." + kv.first.Scalar());
    if (node["value"].IsDefined()) schema_fail(where, "value only applies to univariate");
  } else {
    if (node["value"].IsDefined() || node["values"].IsDefined())
      schema_fail(where, "categorical measurements carry no value distribution");
  }
  return m;
}

MenuSpec parse_menu_item(const YAML::Node& node, const std::string& where, const OracleSpec& spec) {
  require_map(node, where);
  check_keys(node, {"measurement", "n_per_event", "keys"}, where);
  MenuSpec item;
  item.measurement = scalar_at(node, "measurement", where, true);
  item.n_per_event = static_cast<int64_t>(u64_at(node, "n_per_event", where, 1));
  const OracleMeasurement* m = spec.find_measurement(item.measurement);
  if (!m) schema_fail(where, "unknown measurement '" + item.measurement + "'");
  if (m->is_static) schema_fail(where, "static measurement '" + item.measurement + "' cannot appear in a menu");
  if (m->kind == ValueKind::UnivariateRegression) {
    if (node["keys"].IsDefined()) schema_fail(where, "univariate menu entries take no keys");
  } else {
    item.keys = weighted_at(node, "keys", where, true);
    if (weight_sum(item.keys) <= 0) schema_fail(where, "key weights must not all be zero");
    if (m->kind == ValueKind::MultivariateRegression)
      for (const auto& [key, w] : item.keys)
        if (!m->key_values.count(key))
          schema_fail(where, "key '" + key + "' has no value distribution in measurement '" +
                                 item.measurement + "'");
  }
  return item;
}

RuleSpec parse_rule(const YAML::Node& node, const std::string& where, const OracleSpec& spec) {
  require_map(node, where);
  check_keys(node, {"trigger", "emit_key", "emit_value", "scale_value"}, where);
  RuleSpec r;
  YAML::Node trig = node["trigger"];
  if (!trig.IsDefined()) schema_fail(where, "missing required field 'trigger'");
  require_map(trig, where + ".trigger");
  check_keys(trig, {"measurement", "key"}, where + ".trigger");
  r.trigger_measurement = scalar_at(trig, "measurement", where + ".trigger", true);
  r.trigger_key = scalar_at(trig, "key", where + ".trigger", true);
  const OracleMeasurement* tm = spec.find_measurement(r.trigger_measurement);
  if (!tm) schema_fail(where + ".trigger", "unknown measurement '" + r.trigger_measurement + "'");
  if (tm->is_static || tm->kind == ValueKind::UnivariateRegression)
    schema_fail(where + ".trigger", "trigger must be a dynamic keyed measurement");

  int effects = node["emit_key"].IsDefined() + node["emit_value"].IsDefined() +
                node["scale_value"].IsDefined();
  if (effects != 1)
    schema_fail(where, "exactly one of emit_key, emit_value, scale_value is required");

  auto target_of = [&](const YAML::Node& eff, const std::string& ew,
                       std::initializer_list<const char*> allowed) -> const OracleMeasurement* {
    require_map(eff, ew);
    check_keys(eff, allowed, ew);
    r.target_measurement = scalar_at(eff, "measurement", ew, true);
    r.target_key = scalar_at(eff, "key", ew, false);
    const OracleMeasurement* m = spec.find_measurement(r.target_measurement);
    if (!m) schema_fail(ew, "unknown measurement '" + r.target_measurement + "'");
    if (m->is_static) schema_fail(ew, "rule targets must be dynamic");
    return m;
  };

  if (node["emit_key"].IsDefined()) {
    r.effect = RuleSpec::Effect::EmitKey;
    const OracleMeasurement* m =
        target_of(node["emit_key"], where + ".emit_key", {"measurement", "key"});
    if (m->kind != ValueKind::Categorical)
      schema_fail(where + ".emit_key", "emit_key targets must be categorical");
    if (r.target_key.empty()) schema_fail(where + ".emit_key", "missing required field 'key'");
  } else if (node["emit_value"].IsDefined()) {
    r.effect = RuleSpec::Effect::EmitValue;
    const YAML::Node eff = node["emit_value"];
    const OracleMeasurement* m =
        target_of(eff, where + ".emit_value", {"measurement", "key", "mean", "noise_stddev"});
    r.value_mean = double_at(eff, "mean", where + ".emit_value", 0.0, true);
    r.noise_stddev = double_at(eff, "noise_stddev", where + ".emit_value", 0.0);
    if (r.noise_stddev < 0) schema_fail(where + ".emit_value", "noise_stddev must be non-negative");
    if (m->kind == ValueKind::Categorical)
      schema_fail(where + ".emit_value", "emit_value targets must carry a numeric value");
    if (m->kind == ValueKind::MultivariateRegression && r.target_key.empty())
      schema_fail(where + ".emit_value", "multivariate targets need a key");
    if (m->kind == ValueKind::UnivariateRegression && !r.target_key.empty())
      schema_fail(where + ".emit_value", "univariate targets take no key");
  } else {
    r.effect = RuleSpec::Effect::ScaleValue;
    const YAML::Node eff = node["scale_value"];
    const OracleMeasurement* m =
        target_of(eff, where + ".scale_value", {"measurement", "key", "factor"});
    r.factor = double_at(eff, "factor", where + ".scale_value", 1.0, true);
    if (m->kind == ValueKind::Categorical)
      schema_fail(where + ".scale_value", "scale_value targets must carry a numeric value");
    if (m->kind == ValueKind::MultivariateRegression && r.target_key.empty())
      schema_fail(where + ".scale_value", "multivariate targets need a key");
    if (m->kind == ValueKind::UnivariateRegression && !r.target_key.empty())
      schema_fail(where + ".scale_value", "univariate targets take no key");
  }
  return r;
}

OracleTask parse_task(const YAML::Node& node, const std::string& where, const OracleSpec& spec) {
  require_map(node, where);
  OracleTask t;
  t.name = scalar_at(node, "name", where, true);
  std::string kind = scalar_at(node, "kind", where, true);
  if (kind == "event_within_horizon") {
    check_keys(node, {"name", "kind", "anchor_types", "target_type", "horizon_minutes"}, where);
    t.kind = OracleTask::Kind::EventWithinHorizon;
    t.target_type = scalar_at(node, "target_type", where, true);
    if (!spec.find_type(t.target_type))
      schema_fail(where, "unknown event type '" + t.target_type + "'");
    t.horizon_minutes = double_at(node, "horizon_minutes", where, 0.0, true);
    if (t.horizon_minutes <= 0) schema_fail(where, "horizon_minutes must be positive");
    YAML::Node anchors = node["anchor_types"];
    if (anchors.IsDefined()) {
      if (!anchors.IsSequence()) schema_fail(where, "anchor_types must be a sequence");
      for (const auto& a : anchors) {
        t.anchor_types.push_back(a.Scalar());
        if (!spec.find_type(t.anchor_types.back()))
          schema_fail(where, "unknown event type '" + t.anchor_types.back() + "'");
      }
    }
  } else if (kind == "static_key_equals") {
    check_keys(node, {"name", "kind", "measurement", "key"}, where);
    t.kind = OracleTask::Kind::StaticKeyEquals;
    t.static_measurement = scalar_at(node, "measurement", where, true);
    t.static_key = scalar_at(node, "key", where, true);
    const OracleMeasurement* m = spec.find_measurement(t.static_measurement);
    if (!m || !m->is_static || m->kind != ValueKind::Categorical)
      schema_fail(where, "'" + t.static_measurement + "' is not a static categorical measurement");
  } else {
    schema_fail(where, "kind must be 'event_within_horizon' or 'static_key_equals'");
  }
  return t;
}

}  // namespace

OracleSpec parse_oracle_spec(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    fail(ErrKind::Format, std::string("invalid yaml: ") + e.what());
  }
  require_map(root, "");
  check_keys(root,
             {"n_subjects", "seed", "events_per_day", "events_per_subject", "horizon_days",
              "start", "dob", "measurements", "event_types", "rules", "tasks", "dataset"},
             "");
  OracleSpec spec;
  spec.n_subjects = u64_at(root, "n_subjects", "", 10);
  if (spec.n_subjects == 0) schema_fail("", "n_subjects must be positive");
  spec.seed = u64_at(root, "seed", "", 1);
  spec.base_rate = double_at(root, "events_per_day", "", 24.0);
  if (spec.base_rate <= 0) schema_fail("", "events_per_day must be positive");

  bool has_count = root["events_per_subject"].IsDefined();
  bool has_window = root["horizon_days"].IsDefined();
  if (has_count == has_window)
    schema_fail("", "exactly one of events_per_subject and horizon_days is required");
  if (has_count) {
    spec.events_per_subject = static_cast<int64_t>(u64_at(root, "events_per_subject", "", 0));
    if (spec.events_per_subject <= 0) schema_fail("", "events_per_subject must be positive");
  } else {
    spec.horizon_days = double_at(root, "horizon_days", "", 0.0, true);
    if (spec.horizon_days <= 0) schema_fail("", "horizon_days must be positive");
  }

  std::string start = scalar_at(root, "start", "", false);
  if (!start.empty()) spec.start_minutes = parse_timestamp(start, "field 'start'");

  YAML::Node dob = root["dob"];
  if (dob.IsDefined()) {
    if (dob.IsScalar()) {
      std::string s = dob.Scalar();
      if (s == "false" || s == "0")
        spec.emit_dob = false;
      else if (s != "true" && s != "1")
        schema_fail("dob", "expected a boolean or a mapping");
    } else {
      require_map(dob, "dob");
      check_keys(dob, {"mean_age_years", "stddev_years"}, "dob");
      spec.dob_mean_age_years = double_at(dob, "mean_age_years", "dob", 40.0);
      spec.dob_stddev_years = double_at(dob, "stddev_years", "dob", 10.0);
      if (spec.dob_mean_age_years <= 0 || spec.dob_stddev_years < 0)
        schema_fail("dob", "ages must be positive");
    }
  }

  YAML::Node meas = root["measurements"];
  if (meas.IsDefined()) {
    if (!meas.IsSequence()) schema_fail("", "measurements must be a sequence");
    for (size_t i = 0; i < meas.size(); ++i) {
      OracleMeasurement m =
          parse_oracle_measurement(meas[i], "measurements[" + std::to_string(i) + "]");
      if (m.name == kEventTypeMeasurement || m.name == "dob")
        schema_fail("measurements[" + std::to_string(i) + "]",
                    "name '" + m.name + "' is reserved");
      if (spec.find_measurement(m.name))
        schema_fail("measurements[" + std::to_string(i) + "]",
                    "duplicate measurement '" + m.name + "'");
      spec.measurements.push_back(std::move(m));
    }
  }

  YAML::Node types = root["event_types"];
  if (!types.IsDefined() || !types.IsSequence() || types.size() == 0)
    schema_fail("", "event_types must be a non-empty sequence");
  for (size_t i = 0; i < types.size(); ++i) {
    std::string where = "event_types[" + std::to_string(i) + "]";
    require_map(types[i], where);
    check_keys(types[i], {"name", "weight", "transitions", "tte", "menu"}, where);
    EventTypeSpec t;
    t.name = scalar_at(types[i], "name", where, true);
    if (spec.find_type(t.name)) schema_fail(where, "duplicate event type '" + t.name + "'");
    t.weight = double_at(types[i], "weight", where, 1.0);
    if (t.weight < 0) schema_fail(where, "weight must be non-negative");
    t.transitions = weighted_at(types[i], "transitions", where, true);
    double sum = weight_sum(t.transitions);
    if (std::abs(sum - 1.0) > 1e-9)
      schema_fail(where, "transition probabilities must sum to 1, got " + fmt_double(sum));
    if (types[i]["tte"].IsDefined()) t.tte = parse_tte(types[i]["tte"], where + ".tte");
    YAML::Node menu = types[i]["menu"];
    if (menu.IsDefined()) {
      if (!menu.IsSequence()) schema_fail(where, "menu must be a sequence");
      for (size_t j = 0; j < menu.size(); ++j)
        t.menu.push_back(
            parse_menu_item(menu[j], where + ".menu[" + std::to_string(j) + "]", spec));
    }
    spec.event_types.push_back(std::move(t));
  }
  double init_sum = 0;
  for (const auto& t : spec.event_types) {
    init_sum += t.weight;
    for (const auto& [target, w] : t.transitions)
      if (!spec.find_type(target))
        schema_fail("event_types", "transition target '" + target + "' is not an event type");
  }
  if (init_sum <= 0) schema_fail("event_types", "initial weights must not all be zero");

  YAML::Node rules = root["rules"];
  if (rules.IsDefined()) {
    if (!rules.IsSequence()) schema_fail("", "rules must be a sequence");
    for (size_t i = 0; i < rules.size(); ++i)
      spec.rules.push_back(parse_rule(rules[i], "rules[" + std::to_string(i) + "]", spec));
  }

  YAML::Node tasks = root["tasks"];
  if (tasks.IsDefined()) {
    if (!tasks.IsSequence()) schema_fail("", "tasks must be a sequence");
    for (size_t i = 0; i < tasks.size(); ++i) {
      OracleTask t = parse_task(tasks[i], "tasks[" + std::to_string(i) + "]", spec);
      for (const auto& seen : spec.tasks)
        if (seen.name == t.name)
          schema_fail("tasks[" + std::to_string(i) + "]", "duplicate task '" + t.name + "'");
      spec.tasks.push_back(std::move(t));
    }
  }

  YAML::Node ds = root["dataset"];
  if (ds.IsDefined()) {
    require_map(ds, "dataset");
    check_keys(ds, {"functional_features", "split_fractions", "min_frequency"}, "dataset");
    YAML::Node ff = ds["functional_features"];
    if (ff.IsDefined()) {
      if (!ff.IsSequence()) schema_fail("dataset", "functional_features must be a sequence");
      for (const auto& f : ff) {
        std::string name = f.Scalar();
        const auto& known = functional_feature_names();
        if (std::find(known.begin(), known.end(), name) == known.end())
          schema_fail("dataset", "unknown functional feature '" + name + "'");
        spec.functional_features.push_back(name);
      }
    }
    YAML::Node sf = ds["split_fractions"];
    if (sf.IsDefined()) {
      if (!sf.IsSequence() || sf.size() != 3)
        schema_fail("dataset", "split_fractions must be a sequence of 3 numbers");
      for (size_t i = 0; i < 3; ++i) {
        double v;
        if (!try_parse_double(sf[i].Scalar(), v)) schema_fail("dataset", "invalid split fraction");
        spec.split_fractions[i] = v;
      }
    }
    spec.min_frequency = u64_at(ds, "min_frequency", "dataset", 0);
  }

  return spec;
}

OracleSpec load_oracle_spec(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrKind::Io, "cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_oracle_spec(text);
  } catch (const Error& e) {
    throw Error(e.kind(), path + ": " + e.what());
  }
}

DatasetConfig paired_dataset_config(const OracleSpec& spec) {
  DatasetConfig c;
  c.seed = spec.seed;
  c.split_fractions = spec.split_fractions;

  bool any_static = spec.emit_dob;
  for (const auto& m : spec.measurements) any_static = any_static || m.is_static;
  if (any_static) {
    SourceConfig s;
    s.name = "subjects";
    s.path = "subjects.csv";
    s.subject_id_column = "subject_id";
    c.sources.push_back(s);
  }
  {
    SourceConfig s;
    s.name = "events";
    s.path = "events.csv";
    s.subject_id_column = "subject_id";
    s.timestamp_column = "timestamp";
    s.event_type_column = "event_type";
    c.sources.push_back(s);
  }
  for (const auto& m : spec.measurements) {
    if (m.is_static) continue;
    SourceConfig s;
    s.name = "obs_" + m.name;
    s.path = "obs_" + m.name + ".csv";
    s.subject_id_column = "subject_id";
    s.timestamp_column = "timestamp";
    s.event_type_column = "event_type";
    c.sources.push_back(s);
  }

  for (const auto& f : spec.functional_features) {
    MeasurementConfig m;
    m.name = f;
    m.temporality = Temporality::FunctionalTimeDependent;
    m.value_kind = f == "age" ? ValueKind::UnivariateRegression : ValueKind::Categorical;
    c.measurements.push_back(m);
  }
  if (spec.emit_dob) {
    MeasurementConfig m;
    m.name = "dob";
    m.temporality = Temporality::Static;
    m.value_kind = ValueKind::UnivariateRegression;
    m.source_table = "subjects";
    m.key_column = "dob";
    c.measurements.push_back(m);
  }
  for (const auto& om : spec.measurements) {
    MeasurementConfig m;
    m.name = om.name;
    m.temporality = om.is_static ? Temporality::Static : Temporality::Dynamic;
    m.value_kind = om.kind;
    if (om.is_static) {
      m.source_table = "subjects";
      m.key_column = om.name;
    } else {
      m.source_table = "obs_" + om.name;
      if (om.kind == ValueKind::UnivariateRegression) {
        m.key_column = "value";
      } else {
        m.key_column = "key";
        if (om.kind == ValueKind::MultivariateRegression) m.value_column = "value";
        m.min_frequency = spec.min_frequency;
      }
    }
    c.measurements.push_back(m);
  }
  // Round-trip through the canonical form so the result is validated and has
  // the implicit event_type measurement injected, identical to a later load.
  return parse_dataset_config(serialize_dataset_config(c));
}

namespace {

void apply_rules(const OracleSpec& spec, std::vector<Obs>& obs, Rng& rng) {
  size_t drawn = obs.size();  // appended observations never retrigger
  for (const auto& r : spec.rules) {
    for (size_t i = 0; i < drawn; ++i) {
      if (obs[i].m->name != r.trigger_measurement || obs[i].key != r.trigger_key) continue;
      if (r.effect == RuleSpec::Effect::EmitKey) {
        Obs o;
        o.m = spec.find_measurement(r.target_measurement);
        o.key = r.target_key;
        obs.push_back(o);
      } else if (r.effect == RuleSpec::Effect::EmitValue) {
        Obs o;
        o.m = spec.find_measurement(r.target_measurement);
        o.key = r.target_key;
        o.value = r.value_mean + r.noise_stddev * rng.normal();
        o.has_value = true;
        obs.push_back(o);
      } else {
        for (auto& target : obs)
          if (target.m->name == r.target_measurement && target.has_value &&
              (r.target_key.empty() || target.key == r.target_key))
            target.value *= r.factor;
      }
    }
  }
}

}  // namespace

OracleSummary sample_dataset(const OracleSpec& spec, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  auto path_of = [&](const std::string& name) { return (fs::path(out_dir) / name).string(); };

  OracleSummary summary;
  summary.n_subjects = spec.n_subjects;

  std::vector<const OracleMeasurement*> statics, dynamics;
  for (const auto& m : spec.measurements)
    (m.is_static ? statics : dynamics).push_back(&m);
  std::vector<CategoricalDist> static_dist;
  for (const auto* m : statics)
    static_dist.push_back(m->kind == ValueKind::Categorical ? dist_of(m->keys)
                                                            : CategoricalDist());

  std::vector<double> init_weights;
  for (const auto& t : spec.event_types) init_weights.push_back(t.weight);
  CategoricalDist init_dist(init_weights);
  // transition targets and distributions per type, resolved once
  std::vector<std::vector<size_t>> trans(spec.event_types.size());
  std::vector<CategoricalDist> trans_dist(spec.event_types.size());
  for (size_t i = 0; i < spec.event_types.size(); ++i) {
    std::vector<double> w;
    for (const auto& [name, wt] : spec.event_types[i].transitions) {
      trans[i].push_back(static_cast<size_t>(spec.find_type(name) - spec.event_types.data()));
      w.push_back(wt);
    }
    trans_dist[i] = CategoricalDist(w);
  }
  std::vector<std::vector<CategoricalDist>> menu_dist(spec.event_types.size());
  for (size_t i = 0; i < spec.event_types.size(); ++i)
    for (const auto& item : spec.event_types[i].menu)
      menu_dist[i].push_back(item.keys.empty() ? CategoricalDist() : dist_of(item.keys));
  auto step = [&](Rng& rng, size_t cur, bool first) {
    size_t next = first ? init_dist.sample(rng) : trans[cur][trans_dist[cur].sample(rng)];
    double delta = std::max(spec.tte_of(spec.event_types[next]).sample(rng), 1e-3);
    return std::make_pair(next, delta);
  };

  csv::Writer subjects_out(path_of("subjects.csv"));
  {
    std::vector<std::string> header = {"subject_id"};
    if (spec.emit_dob) header.push_back("dob");
    for (const auto* m : statics) header.push_back(m->name);
    subjects_out.write_row(header);
  }
  csv::Writer events_out(path_of("events.csv"));
  events_out.write_row({"subject_id", "timestamp", "event_type"});
  std::vector<std::unique_ptr<csv::Writer>> obs_out;
  for (const auto* m : dynamics) {
    obs_out.push_back(std::make_unique<csv::Writer>(path_of("obs_" + m->name + ".csv")));
    std::vector<std::string> header = {"subject_id", "timestamp", "event_type"};
    if (m->kind == ValueKind::UnivariateRegression) {
      header.push_back("value");
    } else {
      header.push_back("key");
      if (m->kind == ValueKind::MultivariateRegression) header.push_back("value");
    }
    obs_out.back()->write_row(header);
  }

  struct TaskRow {
    std::string subject_id;
    double prompt_end;
    int label;
  };
  std::vector<std::vector<TaskRow>> task_rows(spec.tasks.size());

  double window_end = spec.start_minutes + spec.horizon_days * kMinutesPerDay;

  for (uint64_t si = 0; si < spec.n_subjects; ++si) {
    Rng rng = Rng::derive(spec.seed, si);
    std::string subject_id = std::to_string(si + 1);

    std::map<std::string, std::string> static_keys;
    {
      std::vector<std::string> row = {subject_id};
      if (spec.emit_dob) {
        double age_years =
            std::clamp(spec.dob_mean_age_years + spec.dob_stddev_years * rng.normal(), 1.0, 119.0);
        double dob = snap_to_ms(spec.start_minutes - age_years * kMinutesPerYear);
        row.push_back(format_timestamp(dob));
      }
      for (size_t mi = 0; mi < statics.size(); ++mi) {
        const OracleMeasurement* m = statics[mi];
        if (m->kind == ValueKind::Categorical) {
          const std::string& key = m->keys[static_dist[mi].sample(rng)].first;
          static_keys[m->name] = key;
          row.push_back(key);
        } else {
          row.push_back(fmt_double(m->value.mean + m->value.stddev * rng.normal()));
        }
        summary.n_static_rows++;
      }
      subjects_out.write_row(row);
    }

    std::vector<SimEvent> events;
    double t = spec.start_minutes;
    size_t cur = 0;
    while (true) {
      if (spec.events_per_subject > 0 &&
          static_cast<int64_t>(events.size()) >= spec.events_per_subject)
        break;
      auto [next, delta] = step(rng, cur, events.empty());
      t = snap_to_ms(t + delta);
      if (spec.events_per_subject == 0 && t > window_end) break;
      events.push_back({t, next});
      cur = next;

      const EventTypeSpec& type = spec.event_types[next];
      std::string ts = format_timestamp(t);
      events_out.write_row({subject_id, ts, type.name});
      summary.n_events++;
      summary.events_per_type[type.name]++;

      std::vector<Obs> obs;
      for (size_t item_idx = 0; item_idx < type.menu.size(); ++item_idx) {
        const MenuSpec& item = type.menu[item_idx];
        const OracleMeasurement* m = spec.find_measurement(item.measurement);
        for (int64_t k = 0; k < item.n_per_event; ++k) {
          Obs o;
          o.m = m;
          if (m->kind == ValueKind::UnivariateRegression) {
            o.value = m->value.mean + m->value.stddev * rng.normal();
            o.has_value = true;
          } else {
            o.key = item.keys[menu_dist[next][item_idx].sample(rng)].first;
            if (m->kind == ValueKind::MultivariateRegression) {
              const ValueParams& p = m->key_values.at(o.key);
              o.value = p.mean + p.stddev * rng.normal();
              o.has_value = true;
            }
          }
          obs.push_back(o);
        }
      }
      apply_rules(spec, obs, rng);

      for (const auto& o : obs) {
        size_t mi = std::find(dynamics.begin(), dynamics.end(), o.m) - dynamics.begin();
        std::vector<std::string> row = {subject_id, ts, type.name};
        if (o.m->kind == ValueKind::UnivariateRegression) {
          row.push_back(fmt_double(o.value));
        } else {
          row.push_back(o.key);
          if (o.m->kind == ValueKind::MultivariateRegression)
            row.push_back(o.has_value ? fmt_double(o.value) : "");
        }
        obs_out[mi]->write_row(row);
        summary.n_obs_rows++;
        summary.obs_rows_per_measurement[o.m->name]++;
      }
    }

    // Task labels. Event-horizon labels come from the realized continuation,
    // extended privately past the recorded window when the horizon outruns it;
    // the extension is a fresh draw of the same chain so labels match the
    // dynamics a reference predictor conditions on.
    for (size_t ti = 0; ti < spec.tasks.size(); ++ti) {
      const OracleTask& task = spec.tasks[ti];
      if (events.empty()) continue;
      if (task.kind == OracleTask::Kind::StaticKeyEquals) {
        auto it = static_keys.find(task.static_measurement);
        if (it == static_keys.end()) continue;
        task_rows[ti].push_back(
            {subject_id, events.back().time, it->second == task.static_key ? 1 : 0});
        continue;
      }
      int anchor = -1;
      for (int i = static_cast<int>(events.size()) - 1; i >= 0; --i) {
        const std::string& tname = spec.event_types[events[i].type_idx].name;
        if (task.anchor_types.empty() ||
            std::find(task.anchor_types.begin(), task.anchor_types.end(), tname) !=
                task.anchor_types.end()) {
          anchor = i;
          break;
        }
      }
      if (anchor < 0) continue;
      double t_a = events[anchor].time;
      double deadline = t_a + task.horizon_minutes;
      size_t target_idx = spec.find_type(task.target_type) - spec.event_types.data();
      int label = 0;
      for (size_t i = anchor + 1; i < events.size(); ++i) {
        if (events[i].time > deadline) {
          label = -1;  // horizon fully covered by recorded events
          break;
        }
        if (events[i].type_idx == target_idx) {
          label = 1;
          break;
        }
      }
      if (label == -1) label = 0;
      if (label == 0 && events.back().time <= deadline) {
        double et = events.back().time;
        size_t ec = events.back().type_idx;
        while (true) {
          auto [next, delta] = step(rng, ec, false);
          et = snap_to_ms(et + delta);
          if (et > deadline) break;
          if (next == target_idx) {
            label = 1;
            break;
          }
          ec = next;
        }
      }
      task_rows[ti].push_back({subject_id, t_a, label});
    }
  }

  subjects_out.close();
  events_out.close();
  for (auto& w : obs_out) w->close();

  DatasetConfig paired = paired_dataset_config(spec);
  {
    std::ofstream out(path_of("dataset_config.yaml"), std::ios::binary);
    out << serialize_dataset_config(paired);
  }

  for (size_t ti = 0; ti < spec.tasks.size(); ++ti) {
    const OracleTask& task = spec.tasks[ti];
    csv::Writer out(path_of(task.name + ".task.csv"));
    out.write_row({"subject_id", "prompt_end_time", "label"});
    uint64_t positives = 0;
    for (const auto& row : task_rows[ti]) {
      // same formatting as events.csv so prompt ends join timestamps exactly
      out.write_row({row.subject_id, format_timestamp(row.prompt_end), std::to_string(row.label)});
      positives += row.label;
    }
    out.close();
    summary.task_rows[task.name] = {task_rows[ti].size(), positives};

    json header;
    header["name"] = task.name;
    header["kind"] = task.kind == OracleTask::Kind::EventWithinHorizon ? "event_within_horizon"
                                                                       : "static_key_equals";
    if (task.kind == OracleTask::Kind::EventWithinHorizon) {
      header["target_type"] = task.target_type;
      header["horizon_minutes"] = task.horizon_minutes;
      header["anchor_types"] = task.anchor_types;
    } else {
      header["measurement"] = task.static_measurement;
      header["key"] = task.static_key;
    }
    header["n_rows"] = task_rows[ti].size();
    header["n_positive"] = positives;
    std::ofstream out_json(path_of(task.name + ".task.json"), std::ios::binary);
    out_json << header.dump(2) << "\n";
  }

  json sidecar;
  sidecar["generator"] = "synthetic_oracle";
  sidecar["seed"] = spec.seed;
  sidecar["n_subjects"] = summary.n_subjects;
  sidecar["n_events"] = summary.n_events;
  sidecar["n_obs_rows"] = summary.n_obs_rows;
  sidecar["n_static_rows"] = summary.n_static_rows;
  sidecar["events_per_type"] = summary.events_per_type;
  sidecar["obs_rows_per_measurement"] = summary.obs_rows_per_measurement;
  json dynamics_json = json::object();
  for (const auto& t : spec.event_types) {
    json tj;
    tj["initial_weight"] = t.weight;
    json trans_row = json::object();
    for (const auto& [name, w] : t.transitions) trans_row[name] = w;
    tj["transitions"] = trans_row;
    const TteSpec& tte = spec.tte_of(t);
    json tte_json;
    if (tte.kind == TteSpec::Kind::Exponential) {
      tte_json["kind"] = "exponential";
      tte_json["mean_minutes"] = tte.mean_minutes;
    } else {
      tte_json["kind"] = "lognormal_mixture";
      json comps = json::array();
      for (const auto& c : tte.components)
        comps.push_back({{"weight", c.weight}, {"mu", c.mu}, {"sigma", c.sigma}});
      tte_json["components"] = comps;
    }
    tj["tte"] = tte_json;
    dynamics_json[t.name] = tj;
  }
  sidecar["event_types"] = dynamics_json;
  sidecar["n_rules"] = spec.rules.size();
  json tasks_json = json::object();
  for (const auto& [name, rows] : summary.task_rows)
    tasks_json[name] = {{"n_rows", rows.first}, {"n_positive", rows.second}};
  sidecar["tasks"] = tasks_json;
  std::ofstream side(path_of("sidecar.json"), std::ios::binary);
  side << sidecar.dump(2) << "\n";

  return summary;
}

BayesReference bayes_reference(const OracleSpec& spec, const std::string& out_dir,
                               const std::string& task_name, int n_samples, uint64_t seed) {
  namespace fs = std::filesystem;
  const OracleTask* task = nullptr;
  for (const auto& t : spec.tasks)
    if (t.name == task_name) task = &t;
  if (!task) fail(ErrKind::Reference, "unknown task '" + task_name + "'");
  if (task->kind != OracleTask::Kind::EventWithinHorizon)
    fail(ErrKind::Schema, "reference probabilities only exist for event horizon tasks");
  if (n_samples <= 0) fail(ErrKind::Schema, "n_samples must be positive");

  // events per subject, sorted by construction (generation emits in time order)
  std::map<std::string, std::vector<SimEvent>> events;
  {
    std::vector<std::string> header;
    std::string path = (fs::path(out_dir) / "events.csv").string();
    csv::Reader::for_each_row(path, header, [&](const std::vector<std::string>& row, size_t rno) {
      if (row.size() != 3) fail(ErrKind::Format, "events.csv row " + std::to_string(rno));
      const EventTypeSpec* t = spec.find_type(row[2]);
      if (!t) fail(ErrKind::Reference, "event type '" + row[2] + "' not in the generator spec");
      events[row[0]].push_back(
          {parse_timestamp(row[1], "events.csv"),
           static_cast<size_t>(t - spec.event_types.data())});
    });
  }

  size_t target_idx = spec.find_type(task->target_type) - spec.event_types.data();
  std::vector<std::vector<size_t>> trans(spec.event_types.size());
  std::vector<CategoricalDist> trans_dist(spec.event_types.size());
  for (size_t i = 0; i < spec.event_types.size(); ++i) {
    std::vector<double> w;
    for (const auto& [name, wt] : spec.event_types[i].transitions) {
      trans[i].push_back(static_cast<size_t>(spec.find_type(name) - spec.event_types.data()));
      w.push_back(wt);
    }
    trans_dist[i] = CategoricalDist(w);
  }

  std::vector<double> scores;
  std::vector<int> labels;
  {
    std::vector<std::string> header;
    std::string path = (fs::path(out_dir) / (task_name + ".task.csv")).string();
    size_t row_index = 0;
    csv::Reader::for_each_row(path, header, [&](const std::vector<std::string>& row, size_t rno) {
      if (row.size() != 3) fail(ErrKind::Format, "task file row " + std::to_string(rno));
      double prompt_end = parse_timestamp(row[1], "task file");
      auto it = events.find(row[0]);
      if (it == events.end())
        fail(ErrKind::Reference, "task subject '" + row[0] + "' has no events");
      const auto& seq = it->second;
      int anchor = -1;
      for (int i = static_cast<int>(seq.size()) - 1; i >= 0; --i)
        if (seq[i].time <= prompt_end + 1e-9) {
          anchor = i;
          break;
        }
      if (anchor < 0) fail(ErrKind::Reference, "no anchor event for task row " + std::to_string(rno));

      Rng rng = Rng::derive(mix64(seed, fnv1a64(task_name)), row_index++);
      double deadline = seq[anchor].time + task->horizon_minutes;
      int hits = 0;
      for (int s = 0; s < n_samples; ++s) {
        double t = seq[anchor].time;
        size_t cur = seq[anchor].type_idx;
        while (true) {
          size_t next = trans[cur][trans_dist[cur].sample(rng)];
          t += std::max(spec.tte_of(spec.event_types[next]).sample(rng), 1e-3);
          if (t > deadline) break;
          if (next == target_idx) {
            hits++;
            break;
          }
          cur = next;
        }
      }
      scores.push_back(static_cast<double>(hits) / n_samples);
      int label;
      uint64_t lv;
      if (!try_parse_u64(row[2], lv) || lv > 1)
        fail(ErrKind::Format, "bad label in task file row " + std::to_string(rno));
      label = static_cast<int>(lv);
      labels.push_back(label);
    });
  }

  BayesReference out;
  out.n_rows = scores.size();
  double acc = 0;
  for (double p : scores) acc += p;
  out.mean_probability = scores.empty() ? 0 : acc / scores.size();
  out.auroc = auroc(scores, labels);
  return out;
}

}  // namespace evseq

#include "evseq/common.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>

namespace evseq {

const char* err_kind_name(ErrKind k) {
  switch (k) {
    case ErrKind::Io: return "IoError";
    case ErrKind::Format: return "FormatError";
    case ErrKind::Schema: return "SchemaError";
    case ErrKind::Reference: return "ReferenceError";
    case ErrKind::Split: return "SplitError";
    case ErrKind::UnknownMeasurement: return "UnknownMeasurement";
    case ErrKind::StageZeroViolation: return "StageZeroViolation";
    case ErrKind::DuplicateTarget: return "DuplicateTarget";
    case ErrKind::PartOrderViolation: return "PartOrderViolation";
    case ErrKind::IncompleteGraph: return "IncompleteGraph";
    case ErrKind::OrphanSubject: return "OrphanSubject";
    case ErrKind::MissingFitArtifact: return "MissingFitArtifact";
    case ErrKind::EmptySubject: return "EmptySubject";
    case ErrKind::ShapeMismatch: return "ShapeMismatch";
    case ErrKind::GraphMismatch: return "GraphMismatch";
    case ErrKind::NonFinite: return "NonFinite";
    case ErrKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrKind::NegativeDelta: return "NegativeDelta";
    case ErrKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrKind::MissingStatic: return "MissingStatic";
    case ErrKind::NonFiniteEmission: return "NonFiniteEmission";
    case ErrKind::DegenerateLabels: return "DegenerateLabels";
    case ErrKind::AllAbstain: return "AllAbstain";
    case ErrKind::EmptySplit: return "EmptySplit";
  }
  return "Error";
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

size_t Rng::categorical(const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) fail(ErrKind::NonFinite, "categorical weights must have positive sum");
  double r = uniform() * total;
  double acc = 0.0;
  for (size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (r < acc) return i;
  }
  return weights.size() - 1;
}

CategoricalDist::CategoricalDist(const std::vector<double>& weights) {
  cum_.reserve(weights.size());
  double acc = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w))
      fail(ErrKind::NonFinite, "categorical weights must be non-negative");
    acc += w;
    cum_.push_back(acc);
  }
  if (!(acc > 0.0)) fail(ErrKind::NonFinite, "categorical weights must have positive sum");
}

size_t CategoricalDist::sample(Rng& rng) const {
  double r = rng.uniform() * cum_.back();
  size_t i = static_cast<size_t>(std::upper_bound(cum_.begin(), cum_.end(), r) - cum_.begin());
  return i < cum_.size() ? i : cum_.size() - 1;
}

// Howard Hinnant's algorithms; proleptic Gregorian calendar.
int64_t days_from_civil(int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<int64_t>(doe) - 719468;
}

void civil_from_days(int64_t z, int64_t& y, unsigned& m, unsigned& d) {
  z += 719468;
  const int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = static_cast<int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp + (mp < 10 ? 3 : -9);
  y += m <= 2;
}

namespace {

bool parse_uint_field(std::string_view s, size_t& pos, int width, long& out) {
  if (pos + width > s.size()) return false;
  long v = 0;
  for (int i = 0; i < width; ++i) {
    char c = s[pos + i];
    if (c < '0' || c > '9') return false;
    v = v * 10 + (c - '0');
  }
  pos += width;
  out = v;
  return true;
}

}  // namespace

bool try_parse_timestamp(std::string_view text, double& out_minutes) {
  std::string_view s = text;
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;

  size_t pos = 0;
  long year, month, day;
  if (!parse_uint_field(s, pos, 4, year)) return false;
  if (pos >= s.size() || s[pos] != '-') return false;
  ++pos;
  if (!parse_uint_field(s, pos, 2, month)) return false;
  if (pos >= s.size() || s[pos] != '-') return false;
  ++pos;
  if (!parse_uint_field(s, pos, 2, day)) return false;
  if (month < 1 || month > 12 || day < 1) return false;
  static const int month_days[12] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  bool leap = year % 4 == 0 && (year % 100 != 0 || year % 400 == 0);
  long last = month_days[month - 1] + (month == 2 && leap ? 1 : 0);
  if (day > last) return false;

  long hour = 0, minute = 0, second = 0;
  double frac = 0.0;
  if (pos < s.size()) {
    if (s[pos] != 'T' && s[pos] != ' ') return false;
    ++pos;
    if (!parse_uint_field(s, pos, 2, hour)) return false;
    if (pos >= s.size() || s[pos] != ':') return false;
    ++pos;
    if (!parse_uint_field(s, pos, 2, minute)) return false;
    if (pos < s.size() && s[pos] == ':') {
      ++pos;
      if (!parse_uint_field(s, pos, 2, second)) return false;
      if (pos < s.size() && s[pos] == '.') {
        ++pos;
        double scale = 0.1;
        if (pos >= s.size()) return false;
        while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
          frac += (s[pos] - '0') * scale;
          scale *= 0.1;
          ++pos;
        }
      }
    }
    if (hour > 23 || minute > 59 || second > 60) return false;
  }
  if (pos != s.size()) return false;

  int64_t days = days_from_civil(year, static_cast<unsigned>(month), static_cast<unsigned>(day));
  out_minutes = static_cast<double>(days) * kMinutesPerDay + hour * 60.0 + minute +
                (static_cast<double>(second) + frac) / 60.0;
  return true;
}

double parse_timestamp(std::string_view text, std::string_view context) {
  double v;
  if (!try_parse_timestamp(text, v)) {
    std::string where = context.empty() ? "" : " (" + std::string(context) + ")";
    fail(ErrKind::Format, "unparseable timestamp '" + std::string(text) + "'" + where);
  }
  return v;
}

std::string format_timestamp(double minutes) {
  // Round to milliseconds, then decompose; avoids carry bugs at field edges.
  long long total_ms = llround(minutes * 60000.0);
  const long long ms_per_day = 86400000LL;
  long long day = total_ms / ms_per_day;
  if (total_ms < 0 && day * ms_per_day != total_ms) --day;
  long long rem = total_ms - day * ms_per_day;
  int64_t y;
  unsigned mo, d;
  civil_from_days(day, y, mo, d);
  int h = static_cast<int>(rem / 3600000LL);
  rem -= static_cast<long long>(h) * 3600000LL;
  int mi = static_cast<int>(rem / 60000LL);
  rem -= static_cast<long long>(mi) * 60000LL;
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%04lld-%02u-%02uT%02d:%02d:%06.3f",
                static_cast<long long>(y), mo, d, h, mi, static_cast<double>(rem) / 1000.0);
  return std::string(buf);
}

std::vector<std::string> split_string(std::string_view s, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t p = s.find(sep, start);
    if (p == std::string_view::npos) {
      out.emplace_back(s.substr(start));
      break;
    }
    out.emplace_back(s.substr(start, p - start));
    start = p + 1;
  }
  return out;
}

std::string trim(std::string_view s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

bool try_parse_double(std::string_view s, double& out) {
  std::string t = trim(s);
  if (t.empty()) return false;
  const char* begin = t.data();
  const char* end = begin + t.size();
  auto res = std::from_chars(begin, end, out);
  return res.ec == std::errc() && res.ptr == end;
}

bool try_parse_u64(std::string_view s, uint64_t& out) {
  std::string t = trim(s);
  if (t.empty()) return false;
  const char* begin = t.data();
  const char* end = begin + t.size();
  auto res = std::from_chars(begin, end, out);
  return res.ec == std::errc() && res.ptr == end;
}

}  // namespace evseq

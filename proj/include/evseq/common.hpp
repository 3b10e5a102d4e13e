#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace evseq {

// Minutes are the universal time unit; timestamps are minutes since
// 1970-01-01T00:00 UTC stored as double.
inline constexpr double kMinutesPerHour = 60.0;
inline constexpr double kMinutesPerDay = 1440.0;
inline constexpr double kMinutesPerYear = 525960.0;  // 365.25 days

enum class ErrKind {
  Io,
  Format,
  Schema,
  Reference,
  Split,
  UnknownMeasurement,
  StageZeroViolation,
  DuplicateTarget,
  PartOrderViolation,
  IncompleteGraph,
  OrphanSubject,
  MissingFitArtifact,
  EmptySubject,
  ShapeMismatch,
  GraphMismatch,
  NonFinite,
  NonFiniteGradient,
  NegativeDelta,
  IndexOutOfRange,
  MissingStatic,
  NonFiniteEmission,
  DegenerateLabels,
  AllAbstain,
  EmptySplit,
};

const char* err_kind_name(ErrKind k);

class Error : public std::runtime_error {
 public:
  Error(ErrKind kind, const std::string& msg)
      : std::runtime_error(std::string(err_kind_name(kind)) + ": " + msg), kind_(kind) {}
  ErrKind kind() const { return kind_; }

 private:
  ErrKind kind_;
};

[[noreturn]] inline void fail(ErrKind kind, const std::string& msg) { throw Error(kind, msg); }

// ---------------------------------------------------------------------------
// Hashing

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Mix two words into one; used for derived rng streams and split hashing.
inline uint64_t mix64(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

std::string hex64(uint64_t v);

// ---------------------------------------------------------------------------
// Deterministic RNG. All sampling in the project goes through this type so
// results are reproducible across platforms; std::random distributions are
// implementation-defined and deliberately avoided.

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc908ULL)) {}
  static Rng derive(uint64_t seed, uint64_t stream) { return Rng(mix64(seed, stream)); }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  // Uniform in [0, 1) with 53 bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform_open() {  // (0, 1)
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return u;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform_open();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double exponential(double rate) { return -std::log(uniform_open()) / rate; }

  // Index drawn proportionally to non-negative weights.
  size_t categorical(const std::vector<double>& weights);

  uint64_t uniform_below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Reusable categorical distribution: prefix sums built once, each draw is a
// binary search. Draws the same index stream as Rng::categorical.
class CategoricalDist {
 public:
  CategoricalDist() = default;
  explicit CategoricalDist(const std::vector<double>& weights);
  size_t sample(Rng& rng) const;
  size_t size() const { return cum_.size(); }

 private:
  std::vector<double> cum_;
};

// ---------------------------------------------------------------------------
// Civil time. Timestamps parse from ISO-8601-style strings
// ("2020-01-31", "2020-01-31T07:45", optional seconds/fraction, 'T' or ' ').

int64_t days_from_civil(int64_t y, unsigned m, unsigned d);
void civil_from_days(int64_t z, int64_t& y, unsigned& m, unsigned& d);

// Minutes since epoch, or throws Error(Format) mentioning `context`.
double parse_timestamp(std::string_view text, std::string_view context = "");
bool try_parse_timestamp(std::string_view text, double& out_minutes);
std::string format_timestamp(double minutes);

// ---------------------------------------------------------------------------
// Small string helpers.

std::vector<std::string> split_string(std::string_view s, char sep);
std::string trim(std::string_view s);
bool try_parse_double(std::string_view s, double& out);
bool try_parse_u64(std::string_view s, uint64_t& out);

}  // namespace evseq

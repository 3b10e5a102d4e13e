#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "evseq/data.hpp"

namespace evseq {

enum class Split { Train, Tune, HeldOut };
const char* to_string(Split s);

struct SplitAssignment {
  uint64_t seed = 0;
  std::map<uint64_t, Split> by_subject;

  Split of(uint64_t subject) const;  // throws Reference for unknown subjects
  std::array<size_t, 3> counts() const;
  bool operator==(const SplitAssignment&) const = default;
};

// Hash-ordered assignment: subjects are ranked by mix64(seed, id) so the
// result is independent of input order, and fractions are realized by largest
// remainder, so realized counts are within one subject of the targets.
SplitAssignment split_subjects(const std::vector<uint64_t>& subjects,
                               const std::array<double, 3>& fractions, uint64_t seed);

struct Vocabulary {
  std::string measurement;
  std::vector<std::string> entries;  // entries[0] is the UNK slot
  std::vector<uint64_t> counts;      // training occurrences, counts[0] == 0
  std::map<std::string, int64_t> lookup;

  int64_t index_of(const std::string& key) const;  // 0 when absent
  int64_t size() const { return static_cast<int64_t>(entries.size()); }
};

Vocabulary fit_vocabulary(const std::string& measurement,
                          const std::map<std::string, uint64_t>& key_counts,
                          uint64_t min_frequency);

struct NumericStats {
  std::string measurement;
  std::string key;  // multivariate streams are fit per key
  double mean = 0;
  double stddev = 0;  // population
  double outlier_lo = 0;
  double outlier_hi = 0;
  std::optional<std::pair<double, double>> censor;
  uint64_t n = 0;            // training values the moments were computed on
  uint64_t n_censored = 0;   // training values outside censor bounds
  uint64_t n_nonfinite = 0;  // training values dropped before censoring

  double normalize(double v) const;    // constant streams map to 0
  double denormalize(double z) const;
  bool in_bounds(double v) const;      // inside censor and outlier bounds
};

NumericStats fit_numeric_stats(const std::string& measurement, const std::string& key,
                               const std::vector<double>& values,
                               std::optional<std::pair<double, double>> censor_bounds,
                               double stddev_cutoff);

// Names of the fixed time-of-day buckets, in bucket order (six-hour bins).
const std::vector<std::string>& time_of_day_keys();
int64_t time_of_day_bucket(double minutes);
double age_years(double time_minutes, double dob_minutes);

// Name of the static measurement the age feature reads its birth time from.
inline const char* kDobMeasurement = "dob";

struct FitArtifacts {
  SplitAssignment split;
  std::vector<Vocabulary> vocabularies;    // config measurement order
  std::vector<NumericStats> numeric_stats;
  uint64_t dataset_hash = 0;

  const Vocabulary* vocabulary(const std::string& measurement) const;
  const NumericStats* stats(const std::string& measurement, const std::string& key = "") const;
};

// Fits everything on the training split of a raw model: one vocabulary per
// keyed measurement (event_type and time_of_day included), numeric stats per
// value stream (multivariate per key; age derived from event times and dob).
FitArtifacts fit_preprocessing(const InternalDataModel& model, const DatasetConfig& config);

struct DropReport {
  struct Row {
    std::string measurement, key, reason;
    uint64_t count = 0;
  };
  std::vector<Row> rows;

  void bump(const std::string& measurement, const std::string& key, const std::string& reason);
  uint64_t total() const;
};

// Applies train-fit artifacts to every split: keys become vocabulary indices
// (UNK for unseen or infrequent), values outside censor or outlier bounds are
// dropped and counted, survivors standardized. The input model stays raw.
InternalDataModel transform(const InternalDataModel& model, const DatasetConfig& config,
                            const FitArtifacts& artifacts, DropReport& report);

std::string serialize_artifacts(const FitArtifacts& artifacts);
FitArtifacts parse_artifacts(const std::string& text);
void save_artifacts(const std::string& path, const FitArtifacts& artifacts);
FitArtifacts load_artifacts(const std::string& path);

void write_drop_report(const std::string& path, const DropReport& report);

}  // namespace evseq

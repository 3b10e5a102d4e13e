#include "evseq/represent.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "evseq/parquet.hpp"

namespace evseq {

namespace {

using json = nlohmann::ordered_json;

bool keyed_kind(const MeasurementConfig& m) {
  return m.value_kind == ValueKind::Categorical ||
         m.value_kind == ValueKind::MultivariateRegression;
}

}  // namespace

const FeatureBlock* FeatureManifest::block(const std::string& measurement) const {
  for (const auto& b : blocks)
    if (b.measurement == measurement) return &b;
  return nullptr;
}

int64_t FeatureManifest::index_of(const std::string& measurement, int64_t key_index) const {
  const FeatureBlock* b = block(measurement);
  if (!b) fail(ErrKind::UnknownMeasurement, "no feature block for '" + measurement + "'");
  if (key_index < 0 || key_index >= b->size)
    fail(ErrKind::IndexOutOfRange, measurement + " key index " + std::to_string(key_index) +
                                       " outside block of size " + std::to_string(b->size));
  return b->offset + key_index;
}

std::pair<const FeatureBlock*, int64_t> FeatureManifest::locate(int64_t global_index) const {
  for (const auto& b : blocks)
    if (global_index >= b.offset && global_index < b.offset + b.size)
      return {&b, global_index - b.offset};
  fail(ErrKind::IndexOutOfRange, "feature index " + std::to_string(global_index) +
                                     " outside the manifest (V = " + std::to_string(total) + ")");
}

FeatureManifest build_manifest(const DatasetConfig& config, const FitArtifacts& artifacts) {
  FeatureManifest m;
  int64_t cursor = 1;  // 0 is the padding sentinel
  for (const auto& mc : config.measurements) {
    FeatureBlock b;
    b.measurement = mc.name;
    b.keyed = keyed_kind(mc);
    b.offset = cursor;
    if (b.keyed) {
      const Vocabulary* v = artifacts.vocabulary(mc.name);
      if (!v) fail(ErrKind::MissingFitArtifact, "no vocabulary for '" + mc.name + "'");
      b.size = v->size();
    } else {
      b.size = 1;
    }
    cursor += b.size;
    m.blocks.push_back(std::move(b));
  }
  m.total = cursor;
  return m;
}

std::string serialize_manifest(const FeatureManifest& manifest) {
  json doc;
  doc["schema_version"] = 1;
  doc["total"] = manifest.total;
  doc["max_events"] = manifest.max_events;
  doc["max_obs"] = manifest.max_obs;
  json blocks = json::array();
  for (const auto& b : manifest.blocks) {
    json bj;
    bj["measurement"] = b.measurement;
    bj["keyed"] = b.keyed;
    bj["offset"] = b.offset;
    bj["size"] = b.size;
    blocks.push_back(bj);
  }
  doc["blocks"] = blocks;
  return doc.dump(2) + "\n";
}

FeatureManifest parse_manifest(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrKind::Format, std::string("invalid manifest json: ") + e.what());
  }
  FeatureManifest m;
  try {
    if (doc.at("schema_version").get<int>() != 1)
      fail(ErrKind::Schema, "unsupported manifest schema version");
    m.total = doc.at("total").get<int64_t>();
    m.max_events = doc.at("max_events").get<int64_t>();
    m.max_obs = doc.at("max_obs").get<int64_t>();
    for (const auto& bj : doc.at("blocks")) {
      FeatureBlock b;
      b.measurement = bj.at("measurement").get<std::string>();
      b.keyed = bj.at("keyed").get<bool>();
      b.offset = bj.at("offset").get<int64_t>();
      b.size = bj.at("size").get<int64_t>();
      m.blocks.push_back(std::move(b));
    }
  } catch (const json::exception& e) {
    fail(ErrKind::Format, std::string("invalid manifest json: ") + e.what());
  }
  int64_t cursor = 1;
  for (const auto& b : m.blocks) {
    if (b.offset != cursor || b.size < 1)
      fail(ErrKind::Format, "manifest blocks are not contiguous at '" + b.measurement + "'");
    cursor += b.size;
  }
  if (cursor != m.total) fail(ErrKind::Format, "manifest total disagrees with its blocks");
  return m;
}

uint64_t manifest_hash(const FeatureManifest& manifest) {
  return fnv1a64(serialize_manifest(manifest));
}

size_t SubjectSequence::n_obs() const {
  size_t n = 0;
  for (const auto& e : obs_indices) n += e.size();
  return n;
}

std::vector<SubjectSequence> serialize_subjects(const InternalDataModel& model,
                                                const DatasetConfig& config,
                                                const FitArtifacts& artifacts,
                                                const FeatureManifest& manifest,
                                                DropReport& report) {
  if (!model.transformed) fail(ErrKind::Schema, "sequences are built from a transformed model");

  int age_idx = -1, tod_idx = -1, dob_idx = -1;
  for (size_t i = 0; i < config.measurements.size(); ++i) {
    const std::string& name = config.measurements[i].name;
    if (name == "age") age_idx = static_cast<int>(i);
    if (name == "time_of_day") tod_idx = static_cast<int>(i);
    if (name == kDobMeasurement) dob_idx = static_cast<int>(i);
  }
  const int64_t et_offset = manifest.index_of(kEventTypeMeasurement, 0);
  const NumericStats* age_stats = age_idx >= 0 ? artifacts.stats("age") : nullptr;
  const NumericStats* dob_stats = dob_idx >= 0 ? artifacts.stats(kDobMeasurement) : nullptr;
  const Vocabulary* tod_vocab = tod_idx >= 0 ? artifacts.vocabulary("time_of_day") : nullptr;
  if (age_idx >= 0 && !age_stats) fail(ErrKind::MissingFitArtifact, "no stats for 'age'");
  if (tod_idx >= 0 && !tod_vocab) fail(ErrKind::MissingFitArtifact, "no 'time_of_day' vocabulary");

  // raw birth minutes come back through the inverse of the dob standardization
  auto dob_of = [&](const Subject& s) -> double {
    if (dob_idx < 0) return kAbsent;
    for (const auto& o : s.statics)
      if (o.measurement == dob_idx && o.has_value) return dob_stats->denormalize(o.value);
    return kAbsent;
  };

  std::vector<SubjectSequence> out;
  std::unordered_map<int64_t, std::pair<size_t, size_t>> slot_of_event;  // seq, position

  size_t event_cursor = 0;
  for (const auto& subj : model.subjects) {
    size_t begin = event_cursor;
    while (event_cursor < model.events.size() &&
           model.events[event_cursor].subject_id == subj.id)
      event_cursor++;
    if (begin == event_cursor) {
      report.bump("subject", subj.raw_id.empty() ? std::to_string(subj.id) : subj.raw_id,
                  "empty_subject");
      continue;
    }

    SubjectSequence seq;
    seq.subject_id = subj.id;
    seq.dob_minutes = dob_of(subj);
    if (age_idx >= 0 && !std::isfinite(seq.dob_minutes))
      fail(ErrKind::MissingStatic, "subject " + std::to_string(subj.id) + " has no '" +
                                       kDobMeasurement + "' value, required by the age feature");

    for (const auto& o : subj.statics) {
      const MeasurementConfig& mc = config.measurements[static_cast<size_t>(o.measurement)];
      seq.static_indices.push_back(
          manifest.index_of(mc.name, keyed_kind(mc) ? o.key_index : 0));
    }

    for (size_t i = begin; i < event_cursor; ++i) {
      const Event& e = model.events[i];
      if (e.type_index < 0) fail(ErrKind::Schema, "event " + std::to_string(e.id) + " has no type index");
      slot_of_event[e.id] = {out.size(), seq.event_times.size()};
      seq.event_times.push_back(e.time);

      std::vector<int64_t> idx = {et_offset + e.type_index};
      std::vector<double> val = {kAbsent};
      std::vector<uint8_t> msk = {0};
      if (age_idx >= 0) {
        idx.push_back(manifest.index_of("age", 0));
        val.push_back(age_stats->normalize(age_years(e.time, seq.dob_minutes)));
        msk.push_back(1);
      }
      if (tod_idx >= 0) {
        const std::string& bucket =
            time_of_day_keys()[static_cast<size_t>(time_of_day_bucket(e.time))];
        idx.push_back(manifest.index_of("time_of_day", tod_vocab->index_of(bucket)));
        val.push_back(kAbsent);
        msk.push_back(0);
      }
      seq.obs_indices.push_back(std::move(idx));
      seq.obs_values.push_back(std::move(val));
      seq.obs_mask.push_back(std::move(msk));
    }
    out.push_back(std::move(seq));
  }

  for (const auto& r : model.measurements) {
    auto it = slot_of_event.find(r.event_id);
    if (it == slot_of_event.end())
      fail(ErrKind::Reference, "measurement row " + std::to_string(r.id) + " has no event");
    const MeasurementConfig& mc = config.measurements[static_cast<size_t>(r.measurement)];
    SubjectSequence& seq = out[it->second.first];
    const size_t pos = it->second.second;
    seq.obs_indices[pos].push_back(
        manifest.index_of(mc.name, keyed_kind(mc) ? r.key_index : 0));
    seq.obs_values[pos].push_back(r.has_value ? r.value : kAbsent);
    seq.obs_mask[pos].push_back(r.has_value ? 1 : 0);
  }
  return out;
}

SparseBatch collate(const std::vector<const SubjectSequence*>& sequences, size_t max_seq_len,
                    CollateMode mode, Rng* rng) {
  if (max_seq_len == 0) fail(ErrKind::Schema, "max_seq_len must be positive");
  if (mode == CollateMode::Train && !rng)
    fail(ErrKind::Schema, "training collate needs an rng for window sampling");

  SparseBatch batch;
  batch.B = sequences.size();

  std::vector<size_t> start(batch.B), len(batch.B);
  for (size_t b = 0; b < batch.B; ++b) {
    const SubjectSequence& seq = *sequences[b];
    if (seq.n_events() == 0)
      fail(ErrKind::EmptySubject, "subject " + std::to_string(seq.subject_id) + " has no events");
    len[b] = std::min(seq.n_events(), max_seq_len);
    size_t slack = seq.n_events() - len[b];
    start[b] = mode == CollateMode::Train
                   ? static_cast<size_t>(rng->uniform_below(slack + 1))
                   : slack;  // most recent window
    batch.S = std::max(batch.S, len[b]);
    for (size_t s = 0; s < len[b]; ++s)
      batch.M = std::max(batch.M, seq.obs_indices[start[b] + s].size());
  }

  batch.time_deltas.assign(batch.B * batch.S, 0.0);
  batch.event_mask.assign(batch.B * batch.S, 0);
  batch.obs_indices.assign(batch.B * batch.S * batch.M, 0);
  batch.obs_values.assign(batch.B * batch.S * batch.M, 0.0);
  batch.obs_value_mask.assign(batch.B * batch.S * batch.M, 0);

  for (size_t b = 0; b < batch.B; ++b) {
    const SubjectSequence& seq = *sequences[b];
    batch.subject_ids.push_back(seq.subject_id);
    batch.static_indices.push_back(seq.static_indices);
    for (size_t s = 0; s < len[b]; ++s) {
      const size_t p = start[b] + s;
      batch.event_mask[batch.at(b, s)] = 1;
      batch.time_deltas[batch.at(b, s)] =
          s == 0 ? 0.0 : seq.event_times[p] - seq.event_times[p - 1];
      const auto& idx = seq.obs_indices[p];
      for (size_t m = 0; m < idx.size(); ++m) {
        batch.obs_indices[batch.cell(b, s, m)] = idx[m];
        batch.obs_values[batch.cell(b, s, m)] = seq.obs_values[p][m];
        batch.obs_value_mask[batch.cell(b, s, m)] = seq.obs_mask[p][m];
      }
    }
  }
  return batch;
}

Eigen::MatrixXd embed_batch(const SparseBatch& batch, const Eigen::MatrixXd& table,
                            const Eigen::MatrixXd& static_table) {
  if (table.cols() != static_table.cols())
    fail(ErrKind::ShapeMismatch, "embedding tables disagree on width");
  const int64_t v_rows = table.rows(), s_rows = static_table.rows();

  Eigen::MatrixXd out =
      Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(batch.B * batch.S), table.cols());
  for (size_t b = 0; b < batch.B; ++b) {
    for (size_t s = 0; s < batch.S; ++s) {
      if (!batch.live(b, s)) continue;
      auto row = out.row(static_cast<Eigen::Index>(batch.at(b, s)));
      for (size_t m = 0; m < batch.M; ++m) {
        const int64_t idx = batch.obs_indices[batch.cell(b, s, m)];
        if (idx == 0) continue;  // padding cell
        if (idx < 0 || idx >= v_rows)
          fail(ErrKind::IndexOutOfRange, "feature index " + std::to_string(idx) +
                                             " outside embedding table of " +
                                             std::to_string(v_rows) + " rows");
        const double w =
            batch.obs_value_mask[batch.cell(b, s, m)] ? batch.obs_values[batch.cell(b, s, m)] : 1.0;
        row += table.row(static_cast<Eigen::Index>(idx)) * w;
      }
      for (int64_t si : batch.static_indices[b]) {
        if (si < 0 || si >= s_rows)
          fail(ErrKind::IndexOutOfRange, "static index " + std::to_string(si) +
                                             " outside static table of " + std::to_string(s_rows) +
                                             " rows");
        row += static_table.row(static_cast<Eigen::Index>(si));
      }
    }
  }
  return out;
}

SequenceDataset build_sequences(const InternalDataModel& model, const DatasetConfig& config,
                                const FitArtifacts& artifacts, DropReport& report) {
  SequenceDataset ds;
  ds.manifest = build_manifest(config, artifacts);
  std::vector<SubjectSequence> all =
      serialize_subjects(model, config, artifacts, ds.manifest, report);
  for (auto& seq : all) {
    ds.manifest.max_events =
        std::max<int64_t>(ds.manifest.max_events, static_cast<int64_t>(seq.n_events()));
    for (const auto& e : seq.obs_indices)
      ds.manifest.max_obs = std::max<int64_t>(ds.manifest.max_obs, static_cast<int64_t>(e.size()));
    ds.splits[static_cast<size_t>(artifacts.split.of(seq.subject_id))].push_back(std::move(seq));
  }
  return ds;
}

namespace {

parquet::TableData sequences_table(const std::vector<SubjectSequence>& sequences) {
  parquet::TableData t;
  t.num_rows = static_cast<int64_t>(sequences.size());

  parquet::Column subject{"subject_id", parquet::PhysType::Int64, 0, false, {}, {}, {}, {}, {}, {}};
  parquet::Column dob{"dob", parquet::PhysType::Double, 0, true, {}, {}, {}, {}, {}, {}};
  parquet::Column statics{"static_indices", parquet::PhysType::Int64, 1, false, {}, {}, {}, {}, {}, {}};
  parquet::Column times{"event_times", parquet::PhysType::Double, 1, false, {}, {}, {}, {}, {}, {}};
  parquet::Column oi{"obs_index", parquet::PhysType::Int64, 2, false, {}, {}, {}, {}, {}, {}};
  parquet::Column ov{"obs_value", parquet::PhysType::Double, 2, false, {}, {}, {}, {}, {}, {}};
  parquet::Column om{"obs_mask", parquet::PhysType::Int64, 2, false, {}, {}, {}, {}, {}, {}};
  statics.offsets1.push_back(0);
  times.offsets1.push_back(0);
  for (parquet::Column* c : {&oi, &ov, &om}) {
    c->offsets1.push_back(0);
    c->offsets2.push_back(0);
  }

  for (const auto& seq : sequences) {
    subject.i64.push_back(static_cast<int64_t>(seq.subject_id));
    bool has_dob = std::isfinite(seq.dob_minutes);
    dob.valid.push_back(has_dob ? 1 : 0);
    if (has_dob) dob.f64.push_back(seq.dob_minutes);

    statics.i64.insert(statics.i64.end(), seq.static_indices.begin(), seq.static_indices.end());
    statics.offsets1.push_back(static_cast<int64_t>(statics.i64.size()));
    times.f64.insert(times.f64.end(), seq.event_times.begin(), seq.event_times.end());
    times.offsets1.push_back(static_cast<int64_t>(times.f64.size()));

    for (size_t e = 0; e < seq.n_events(); ++e) {
      oi.i64.insert(oi.i64.end(), seq.obs_indices[e].begin(), seq.obs_indices[e].end());
      ov.f64.insert(ov.f64.end(), seq.obs_values[e].begin(), seq.obs_values[e].end());
      for (uint8_t m : seq.obs_mask[e]) om.i64.push_back(m);
      oi.offsets2.push_back(static_cast<int64_t>(oi.i64.size()));
      ov.offsets2.push_back(static_cast<int64_t>(ov.f64.size()));
      om.offsets2.push_back(static_cast<int64_t>(om.i64.size()));
    }
    for (parquet::Column* c : {&oi, &ov, &om})
      c->offsets1.push_back(static_cast<int64_t>(c->offsets2.size()) - 1);
  }

  t.columns = {std::move(subject), std::move(dob),   std::move(statics), std::move(times),
               std::move(oi),      std::move(ov),    std::move(om)};
  return t;
}

std::vector<SubjectSequence> sequences_from_table(const parquet::TableData& t,
                                                  const std::string& where) {
  const parquet::Column& subject = t.col("subject_id");
  const parquet::Column& dob = t.col("dob");
  const parquet::Column& statics = t.col("static_indices");
  const parquet::Column& times = t.col("event_times");
  const parquet::Column& oi = t.col("obs_index");
  const parquet::Column& ov = t.col("obs_value");
  const parquet::Column& om = t.col("obs_mask");

  std::vector<SubjectSequence> out;
  size_t dob_cursor = 0;
  for (int64_t r = 0; r < t.num_rows; ++r) {
    SubjectSequence seq;
    seq.subject_id = static_cast<uint64_t>(subject.i64[static_cast<size_t>(r)]);
    seq.dob_minutes = dob.valid[static_cast<size_t>(r)] ? dob.f64[dob_cursor++] : kAbsent;

    for (int64_t i = statics.offsets1[r]; i < statics.offsets1[r + 1]; ++i)
      seq.static_indices.push_back(statics.i64[static_cast<size_t>(i)]);
    for (int64_t i = times.offsets1[r]; i < times.offsets1[r + 1]; ++i)
      seq.event_times.push_back(times.f64[static_cast<size_t>(i)]);

    if (oi.offsets1[r + 1] - oi.offsets1[r] != static_cast<int64_t>(seq.event_times.size()))
      fail(ErrKind::Format, where + ": row " + std::to_string(r) + " event counts disagree");
    for (int64_t e = oi.offsets1[r]; e < oi.offsets1[r + 1]; ++e) {
      std::vector<int64_t> idx;
      std::vector<double> val;
      std::vector<uint8_t> msk;
      for (int64_t i = oi.offsets2[e]; i < oi.offsets2[e + 1]; ++i) {
        idx.push_back(oi.i64[static_cast<size_t>(i)]);
        val.push_back(ov.f64[static_cast<size_t>(i)]);
        msk.push_back(om.i64[static_cast<size_t>(i)] ? 1 : 0);
      }
      seq.obs_indices.push_back(std::move(idx));
      seq.obs_values.push_back(std::move(val));
      seq.obs_mask.push_back(std::move(msk));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace

void write_sequence_dataset(const std::string& dir, const SequenceDataset& dataset) {
  std::filesystem::create_directories(dir);
  std::ofstream mf(dir + "/manifest.json", std::ios::binary);
  if (!mf) fail(ErrKind::Io, "cannot write " + dir + "/manifest.json");
  mf << serialize_manifest(dataset.manifest);
  mf.close();
  for (int s = 0; s < 3; ++s)
    parquet::write_file(dir + "/" + to_string(static_cast<Split>(s)) + ".parquet",
                        sequences_table(dataset.splits[static_cast<size_t>(s)]));
}

SequenceDataset read_sequence_dataset(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json", std::ios::binary);
  if (!mf) fail(ErrKind::Io, "cannot open " + dir + "/manifest.json");
  std::string text((std::istreambuf_iterator<char>(mf)), std::istreambuf_iterator<char>());
  SequenceDataset ds;
  ds.manifest = parse_manifest(text);
  for (int s = 0; s < 3; ++s) {
    std::string path = dir + "/" + to_string(static_cast<Split>(s)) + ".parquet";
    ds.splits[static_cast<size_t>(s)] = sequences_from_table(parquet::read_file(path), path);
  }
  return ds;
}

}  // namespace evseq

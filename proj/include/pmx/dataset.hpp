#pragma once

// Patient data model, file ingestion, WHO labelling, stratified splitting,
// standardization and the synthetic cohort generator.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pmx/error.hpp"

namespace pmx {

inline constexpr std::size_t kEmbeddingDim = 1151;
inline constexpr std::size_t kClinicalDim = 11;
inline constexpr std::size_t kNumClasses = 3;

enum class Label : int { Normal = 0, Osteopenia = 1, Osteoporosis = 2 };

inline constexpr std::array<std::string_view, kNumClasses> kLabelNames = {
    "normal", "osteopenia", "osteoporosis"};

inline std::string_view label_name(Label l) { return kLabelNames[static_cast<int>(l)]; }

inline Label label_from_index(int i) {
  if (i < 0 || i >= static_cast<int>(kNumClasses))
    throw DataError("class index out of range: " + std::to_string(i));
  return static_cast<Label>(i);
}

inline Label parse_label(std::string_view s) {
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    if (s == kLabelNames[i]) return static_cast<Label>(i);
  }
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    if (lower == kLabelNames[i]) return static_cast<Label>(i);
  }
  if (lower.size() == 1 && lower[0] >= '0' && lower[0] <= '2') return static_cast<Label>(lower[0] - '0');
  throw DataError("unknown label '" + std::string(s) + "'");
}

/// WHO diagnostic category. Both thresholds belong to Osteopenia.
inline Label who_label(double t_score) {
  if (!std::isfinite(t_score)) throw DataError("T-score is not finite");
  if (t_score > -1.0) return Label::Normal;
  if (t_score < -2.5) return Label::Osteoporosis;
  return Label::Osteopenia;
}

// ---------------------------------------------------------------------------
// Clinical features

enum ClinicalIndex : std::size_t {
  kAge = 0,
  kSex,
  kWeight,
  kHeight,
  kPreviousFracture,
  kParentFracturedHip,
  kCurrentSmoker,
  kGlucocorticoids,
  kRheumatoidArthritis,
  kSecondaryOsteoporosis,
  kAlcohol3PlusUnits,
};

inline constexpr std::array<std::string_view, kClinicalDim> kClinicalNames = {
    "age",
    "sex",
    "weight",
    "height",
    "previous_fracture",
    "parent_fractured_hip",
    "current_smoker",
    "glucocorticoids",
    "rheumatoid_arthritis",
    "secondary_osteoporosis",
    "alcohol_3plus_units"};

/// Age, weight and height are z-scored; everything else is binary and left as is.
inline constexpr std::array<std::size_t, 3> kContinuousClinical = {kAge, kWeight, kHeight};

inline constexpr bool is_binary_feature(std::size_t j) {
  return j != kAge && j != kWeight && j != kHeight;
}

struct ClinicalFeatures {
  std::array<double, kClinicalDim> values{};

  double& operator[](std::size_t j) { return values[j]; }
  double operator[](std::size_t j) const { return values[j]; }
  bool operator==(const ClinicalFeatures&) const = default;

  void validate() const {
    for (std::size_t j = 0; j < kClinicalDim; ++j) {
      if (!std::isfinite(values[j]))
        throw DataError("clinical feature '" + std::string(kClinicalNames[j]) + "' is not finite");
      if (is_binary_feature(j) && values[j] != 0.0 && values[j] != 1.0)
        throw DataError("clinical feature '" + std::string(kClinicalNames[j]) + "' must be 0 or 1");
    }
    if (values[kAge] <= 0 || values[kWeight] <= 0 || values[kHeight] <= 0)
      throw DataError("age, weight and height must be positive");
  }
};

struct PatientCase {
  std::string patient_id;
  std::vector<double> embedding;
  ClinicalFeatures clinical;
  double t_score = 0.0;
  Label label = Label::Normal;
};

// ---------------------------------------------------------------------------
// Number formatting and parsing

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_float(float v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline bool read_line(std::istream& in, std::string& line) {
  if (!std::getline(in, line)) return false;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return true;
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f32(std::ostream& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline void put_f64(std::ostream& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

/// Little-endian cursor over an in-memory byte buffer; failures report the offset.
class ByteReader {
public:
  ByteReader(std::span<const char> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::span<const char> take(std::size_t n) {
    if (remaining() < n) {
      throw DataError(what_ + ": truncated at byte offset " + std::to_string(pos_) + " (needed " +
                      std::to_string(n) + " bytes, " + std::to_string(remaining()) + " available)");
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[i]);
    return v;
  }

  std::uint64_t u64() {
    std::uint64_t lo = u32();
    std::uint64_t hi = u32();
    return lo | (hi << 32);
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

private:
  std::span<const char> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

} // namespace detail

// ---------------------------------------------------------------------------
// File formats

inline constexpr std::string_view kClinicalHeader =
    "patient_id,age,sex,weight,height,previous_fracture,parent_fractured_hip,current_smoker,"
    "glucocorticoids,rheumatoid_arthritis,secondary_osteoporosis,alcohol_3plus_units,t_score";

inline constexpr char kEmbeddingMagic[4] = {'P', 'M', 'X', 'E'};
inline constexpr std::uint32_t kEmbeddingFormatVersion = 1;

enum class EmbeddingFormat { Csv, Binary };

inline void write_clinical_csv(const std::string& path, std::span<const PatientCase> cases) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << kClinicalHeader << '\n';
  for (const auto& c : cases) {
    out << c.patient_id;
    for (double v : c.clinical.values) out << ',' << detail::format_double(v);
    out << ',' << detail::format_double(c.t_score) << '\n';
  }
}

/// Embeddings are persisted at 32-bit precision in both encodings.
inline void write_embeddings(const std::string& path, std::span<const PatientCase> cases,
                             EmbeddingFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  const std::size_t dim = cases.empty() ? kEmbeddingDim : cases.front().embedding.size();
  if (format == EmbeddingFormat::Csv) {
    out << "patient_id";
    for (std::size_t d = 0; d < dim; ++d) out << ",e" << d;
    out << '\n';
    for (const auto& c : cases) {
      out << c.patient_id;
      for (double v : c.embedding) out << ',' << detail::format_float(static_cast<float>(v));
      out << '\n';
    }
    return;
  }
  out.write(kEmbeddingMagic, 4);
  detail::put_u32(out, kEmbeddingFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(cases.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(dim));
  for (const auto& c : cases) {
    if (c.embedding.size() != dim) throw DataError("ragged embeddings for '" + c.patient_id + "'");
    detail::put_u32(out, static_cast<std::uint32_t>(c.patient_id.size()));
    out.write(c.patient_id.data(), static_cast<std::streamsize>(c.patient_id.size()));
    for (double v : c.embedding) detail::put_f32(out, static_cast<float>(v));
  }
}

struct ClinicalRow {
  std::string patient_id;
  ClinicalFeatures clinical;
  double t_score = 0.0;
};

inline std::vector<ClinicalRow> read_clinical_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open clinical file '" + path + "'");
  std::string line;
  if (!detail::read_line(in, line)) throw DataError(path + ": empty clinical file");
  auto header = detail::split_csv(line);
  auto expected = detail::split_csv(kClinicalHeader);
  // A trailing label column is tolerated and ignored; labels are always recomputed.
  if (header.size() < expected.size() || !std::equal(expected.begin(), expected.end(), header.begin()))
    throw DataError(path + ": unexpected clinical header; expected '" + std::string(kClinicalHeader) + "'");

  std::vector<ClinicalRow> rows;
  std::size_t line_no = 1;
  while (detail::read_line(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = detail::split_csv(line);
    if (fields.size() != header.size())
      throw DataError(path + ": row " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                      " fields, expected " + std::to_string(header.size()));
    ClinicalRow row;
    row.patient_id = std::string(fields[0]);
    if (row.patient_id.empty()) throw DataError(path + ": row " + std::to_string(line_no) + " has empty patient_id");
    for (std::size_t j = 0; j <= kClinicalDim; ++j) {
      auto v = detail::parse_double(fields[j + 1]);
      if (!v) throw DataError(path + ": row " + std::to_string(line_no) + ": cannot parse '" + std::string(fields[j + 1]) + "'");
      if (!std::isfinite(*v))
        throw DataError(path + ": row " + std::to_string(line_no) + ": non-finite value in column '" +
                        std::string(header[j + 1]) + "'");
      if (j < kClinicalDim) row.clinical[j] = *v;
      else row.t_score = *v;
    }
    try {
      row.clinical.validate();
    } catch (const DataError& e) {
      throw DataError(path + ": row " + std::to_string(line_no) + ": " + e.what());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

struct EmbeddingTable {
  std::size_t dim = 0;
  std::vector<std::string> ids;
  std::vector<std::vector<double>> rows;
};

inline EmbeddingTable read_embeddings(const std::string& path) {
  auto bytes = detail::read_file_bytes(path);
  EmbeddingTable table;
  if (bytes.size() >= 4 && std::equal(kEmbeddingMagic, kEmbeddingMagic + 4, bytes.begin())) {
    detail::ByteReader r(bytes, path);
    r.take(4);
    auto version = r.u32();
    if (version != kEmbeddingFormatVersion)
      throw DataError(path + ": embedding container version " + std::to_string(version) + ", expected " +
                      std::to_string(kEmbeddingFormatVersion));
    auto count = r.u32();
    table.dim = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      auto len = r.u32();
      auto id = r.take(len);
      table.ids.emplace_back(id.begin(), id.end());
      std::vector<double> row(table.dim);
      for (auto& v : row) {
        float f = r.f32();
        if (!std::isfinite(f))
          throw DataError(path + ": record " + std::to_string(i + 1) + " ('" + table.ids.back() + "') contains a non-finite value");
        v = f;
      }
      table.rows.push_back(std::move(row));
    }
    if (r.remaining() != 0)
      throw DataError(path + ": " + std::to_string(r.remaining()) + " trailing bytes at offset " + std::to_string(r.offset()));
    return table;
  }

  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line;
  if (!detail::read_line(in, line)) throw DataError(path + ": empty embedding file");
  auto header = detail::split_csv(line);
  if (header.empty() || header[0] != "patient_id") throw DataError(path + ": embedding header must start with patient_id");
  table.dim = header.size() - 1;
  std::size_t line_no = 1;
  while (detail::read_line(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = detail::split_csv(line);
    if (fields.size() != header.size())
      throw DataError(path + ": row " + std::to_string(line_no) + " has embedding width " +
                      std::to_string(fields.size() - 1) + ", header declares " + std::to_string(table.dim));
    table.ids.emplace_back(fields[0]);
    std::vector<double> row(table.dim);
    for (std::size_t d = 0; d < table.dim; ++d) {
      auto v = detail::parse_double(fields[d + 1]);
      if (!v) throw DataError(path + ": row " + std::to_string(line_no) + ": cannot parse '" + std::string(fields[d + 1]) + "'");
      if (!std::isfinite(*v)) throw DataError(path + ": row " + std::to_string(line_no) + ": non-finite embedding value");
      row[d] = *v;
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

/// Joins clinical rows with embeddings by patient_id. Labels are recomputed from the T-score.
/// An `expected_dim` of 0 accepts any width.
inline std::vector<PatientCase> load_dataset(const std::string& clinical_path, const std::string& embeddings_path,
                                             std::size_t expected_dim = kEmbeddingDim) {
  auto clinical = read_clinical_csv(clinical_path);
  auto emb = read_embeddings(embeddings_path);
  if (expected_dim != 0 && emb.dim != expected_dim)
    throw DataError(embeddings_path + ": embedding width " + std::to_string(emb.dim) + " does not match expected " +
                    std::to_string(expected_dim));

  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < emb.ids.size(); ++i) {
    if (!index.emplace(emb.ids[i], i).second)
      throw DataError(embeddings_path + ": duplicate embedding row for '" + emb.ids[i] + "'");
  }

  std::vector<std::string> unmatched;
  std::set<std::string> seen;
  std::vector<PatientCase> cases;
  cases.reserve(clinical.size());
  for (auto& row : clinical) {
    if (!seen.insert(row.patient_id).second)
      throw DataError(clinical_path + ": duplicate patient_id '" + row.patient_id + "'");
    auto it = index.find(row.patient_id);
    if (it == index.end()) {
      unmatched.push_back(row.patient_id);
      continue;
    }
    PatientCase c;
    c.patient_id = row.patient_id;
    c.embedding = emb.rows[it->second];
    c.clinical = row.clinical;
    c.t_score = row.t_score;
    c.label = who_label(row.t_score);
    cases.push_back(std::move(c));
  }
  if (!unmatched.empty()) {
    std::string msg = "no embedding row for patient_id(s):";
    for (std::size_t i = 0; i < unmatched.size() && i < 20; ++i) msg += " " + unmatched[i];
    if (unmatched.size() > 20) msg += " ... (" + std::to_string(unmatched.size()) + " total)";
    throw DataError(msg);
  }
  return cases;
}

// ---------------------------------------------------------------------------
// Standardization

/// Per-feature z-scoring fitted on the training partition. Constant features map to 0.
struct Standardizer {
  std::vector<double> embedding_mean;
  std::vector<double> embedding_std;
  std::array<double, kClinicalDim> clinical_mean{};
  std::array<double, kClinicalDim> clinical_std{};

  static Standardizer fit(std::span<const PatientCase> train) {
    if (train.empty()) throw DataError("cannot fit standardizer on an empty partition");
    const std::size_t dim = train.front().embedding.size();
    Standardizer s;
    s.embedding_mean.assign(dim, 0.0);
    s.embedding_std.assign(dim, 0.0);
    const double n = static_cast<double>(train.size());
    for (const auto& c : train)
      for (std::size_t d = 0; d < dim; ++d) s.embedding_mean[d] += c.embedding[d];
    for (auto& m : s.embedding_mean) m /= n;
    for (const auto& c : train)
      for (std::size_t d = 0; d < dim; ++d) {
        double e = c.embedding[d] - s.embedding_mean[d];
        s.embedding_std[d] += e * e;
      }
    for (auto& v : s.embedding_std) v = std::sqrt(v / n);

    // Binary features pass through: mean 0, std 1.
    for (std::size_t j = 0; j < kClinicalDim; ++j) {
      s.clinical_mean[j] = 0.0;
      s.clinical_std[j] = 1.0;
    }
    for (std::size_t j : kContinuousClinical) {
      double m = 0.0;
      for (const auto& c : train) m += c.clinical[j];
      m /= n;
      double v = 0.0;
      for (const auto& c : train) v += (c.clinical[j] - m) * (c.clinical[j] - m);
      s.clinical_mean[j] = m;
      s.clinical_std[j] = std::sqrt(v / n);
    }
    return s;
  }

  static double scale(double x, double mean, double sd) {
    return sd > 1e-12 ? (x - mean) / sd : 0.0;
  }

  std::vector<double> embedding(std::span<const double> raw) const {
    if (raw.size() != embedding_mean.size())
      throw ShapeError("embedding width " + std::to_string(raw.size()) + " does not match standardizer width " +
                       std::to_string(embedding_mean.size()));
    std::vector<double> out(raw.size());
    for (std::size_t d = 0; d < raw.size(); ++d) out[d] = scale(raw[d], embedding_mean[d], embedding_std[d]);
    return out;
  }

  std::array<double, kClinicalDim> clinical(const ClinicalFeatures& raw) const {
    std::array<double, kClinicalDim> out{};
    for (std::size_t j = 0; j < kClinicalDim; ++j) out[j] = scale(raw[j], clinical_mean[j], clinical_std[j]);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Splitting

struct DatasetSplit {
  std::vector<PatientCase> train;
  std::vector<PatientCase> val;
  std::vector<PatientCase> test;
  Standardizer standardizer;
};

inline constexpr double kTestFraction = 0.20;
inline constexpr double kValFraction = 0.08;

namespace detail {

/// Largest-remainder apportionment of round(fraction * total) across strata.
inline std::vector<std::size_t> apportion(const std::vector<std::size_t>& counts, double fraction) {
  const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total)));
  std::vector<std::size_t> out(counts.size());
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    double q = fraction * static_cast<double>(counts[c]);
    out[c] = static_cast<std::size_t>(std::floor(q));
    assigned += out[c];
    rema.emplace_back(q - std::floor(q), c);
  }
  std::stable_sort(rema.begin(), rema.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < target && i < rema.size(); ++i) {
    if (out[rema[i].second] < counts[rema[i].second]) {
      ++out[rema[i].second];
      ++assigned;
    }
  }
  return out;
}

} // namespace detail

/// Stratified 72/8/20 train/val/test split, deterministic under seed.
inline DatasetSplit split_dataset(std::span<const PatientCase> cases, std::uint64_t seed) {
  if (cases.size() < 10) throw DataError("split_dataset needs at least 10 cases, got " + std::to_string(cases.size()));
  std::set<std::string> ids;
  for (const auto& c : cases)
    if (!ids.insert(c.patient_id).second) throw DataError("duplicate patient_id '" + c.patient_id + "'");

  std::vector<std::vector<std::size_t>> by_class(kNumClasses);
  for (std::size_t i = 0; i < cases.size(); ++i) by_class[static_cast<int>(cases[i].label)].push_back(i);
  std::vector<std::size_t> counts;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (by_class[c].empty())
      throw DataError("class '" + std::string(kLabelNames[c]) + "' has no cases; every class must be present");
    counts.push_back(by_class[c].size());
  }

  auto n_test = detail::apportion(counts, kTestFraction);
  std::vector<std::size_t> rest(kNumClasses);
  for (std::size_t c = 0; c < kNumClasses; ++c) rest[c] = counts[c] - n_test[c];
  // Validation size is a fraction of the whole input, drawn from what remains.
  auto n_val = detail::apportion(counts, kValFraction);
  for (std::size_t c = 0; c < kNumClasses; ++c) n_val[c] = std::min(n_val[c], rest[c] > 0 ? rest[c] - 1 : 0);

  std::mt19937_64 rng(seed);
  std::vector<int> part(cases.size(), 0); // 0 train, 1 val, 2 test
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    auto idx = by_class[c];
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (i < n_test[c]) part[idx[i]] = 2;
      else if (i < n_test[c] + n_val[c]) part[idx[i]] = 1;
    }
  }

  DatasetSplit split;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (part[i] == 0) split.train.push_back(cases[i]);
    else if (part[i] == 1) split.val.push_back(cases[i]);
    else split.test.push_back(cases[i]);
  }
  split.standardizer = Standardizer::fit(split.train);
  return split;
}

// ---------------------------------------------------------------------------
// Synthetic cohort

struct SynthConfig {
  std::size_t n_cases = 4160;
  std::array<double, kNumClasses> class_fractions = {0.45, 0.38, 0.17};
  double embedding_separation = 4.0;
  double tabular_signal = 0.5;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;
  std::size_t embedding_dim = kEmbeddingDim;
  // Modality complementarity (all off by default). A fraction of images keeps its signal but with
  // noise scale `image_noise_scale`; a fraction of the remaining cases gets a clinical record drawn for
  // an independently sampled class, so each modality is sometimes the reliable one.
  double image_noise_fraction = 0.0;
  double image_noise_scale = 3.0;
  double clinical_decoy_fraction = 0.0;
  bool clinical_by_class = false; // risk factors track the class midpoint instead of the exact T-score
  double clinical_noise = 1.0;    // multiplier on the age/weight/height spread

  void validate() const {
    double sum = 0.0;
    for (double f : class_fractions) {
      if (!(f >= 0.0)) throw ConfigError("class fractions must be non-negative");
      sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("class fractions must sum to 1 (got " + detail::format_double(sum) + ")");
    if (!(embedding_separation >= 0.0)) throw ConfigError("embedding_separation must be >= 0");
    if (!(tabular_signal >= 0.0 && tabular_signal <= 1.0)) throw ConfigError("tabular_signal must lie in [0, 1]");
    if (!(noise_sigma > 0.0)) throw ConfigError("noise_sigma must be > 0");
    if (embedding_dim < kNumClasses + 1) throw ConfigError("embedding_dim must be at least 4");
    if (n_cases == 0) throw ConfigError("n_cases must be positive");
    if (!(image_noise_fraction >= 0.0 && image_noise_fraction <= 1.0))
      throw ConfigError("image_noise_fraction must lie in [0, 1]");
    if (!(image_noise_scale >= noise_sigma)) throw ConfigError("image_noise_scale must be >= noise_sigma");
    if (!(clinical_decoy_fraction >= 0.0 && clinical_decoy_fraction <= 1.0))
      throw ConfigError("clinical_decoy_fraction must lie in [0, 1]");
    if (!(clinical_noise > 0.0)) throw ConfigError("clinical_noise must be > 0");
  }

  bool complementary() const { return image_noise_fraction > 0.0 || clinical_decoy_fraction > 0.0 || clinical_by_class || clinical_noise != 1.0; }
};

/// Cohort in which neither modality is reliable for every case: 30% of images are degraded,
/// and 20% of the clean-image cases carry a clinical record typical of another class.
inline SynthConfig complementary_synth_config() {
  SynthConfig c;
  c.n_cases = 4000;
  c.embedding_dim = 64;
  c.embedding_separation = 8.0;
  c.tabular_signal = 1.0;
  c.image_noise_fraction = 0.3;
  c.image_noise_scale = 3.0;
  c.clinical_decoy_fraction = 0.2;
  c.clinical_by_class = true;
  c.clinical_noise = 0.05;
  return c;
}

namespace detail {

// T-score ranges per class: Normal (-1, 2], Osteopenia [-2.5, -1], Osteoporosis [-4.5, -2.5).
inline double draw_t_score(Label label, double u) {
  switch (label) {
  case Label::Normal: return -1.0 + 3.0 * (1.0 - u);
  case Label::Osteopenia: return -2.5 + 1.5 * u;
  case Label::Osteoporosis: return -2.5 - 2.0 * (1.0 - u);
  }
  return 0.0;
}

inline constexpr std::array<double, kNumClasses> kClassMidT = {0.5, -1.75, -3.5};

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace detail

/// Synthetic cohort with class-conditional embeddings and T-score-correlated clinical risk factors.
///
/// Embedding mean for a case of class c with T-score t is
///   (sep / sqrt 2) * u_c + (sep / 2) * (t - mid_c) * v
/// where u_0..u_2, v are orthonormal directions drawn from the seed, so class means sit `sep` apart
/// and the within-class position along v tracks the T-score. Isotropic Gaussian noise is added.
inline std::vector<PatientCase> generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const std::size_t dim = cfg.embedding_dim;

  // Orthonormal signal directions by Gram-Schmidt.
  std::vector<std::vector<double>> dirs;
  while (dirs.size() < kNumClasses + 1) {
    std::vector<double> d(dim);
    for (auto& x : d) x = normal(rng);
    for (const auto& prev : dirs) {
      double dot = std::inner_product(d.begin(), d.end(), prev.begin(), 0.0);
      for (std::size_t i = 0; i < dim; ++i) d[i] -= dot * prev[i];
    }
    double norm = std::sqrt(std::inner_product(d.begin(), d.end(), d.begin(), 0.0));
    if (norm < 1e-9) continue;
    for (auto& x : d) x /= norm;
    dirs.push_back(std::move(d));
  }
  const auto& t_dir = dirs[kNumClasses];

  // Per-feature strength of the binary risk factors.
  constexpr std::array<double, 7> risk_strength = {0.9, 0.6, 0.5, 0.8, 0.6, 0.9, 0.5};

  std::discrete_distribution<int> pick_class(cfg.class_fractions.begin(), cfg.class_fractions.end());
  const double sep = cfg.embedding_separation;
  const double s = cfg.tabular_signal;
  const int width = std::max<int>(6, static_cast<int>(std::to_string(cfg.n_cases).size()));

  std::vector<PatientCase> cases;
  cases.reserve(cfg.n_cases);
  for (std::size_t i = 0; i < cfg.n_cases; ++i) {
    PatientCase c;
    std::string num = std::to_string(i + 1);
    c.patient_id = "P" + std::string(static_cast<std::size_t>(width) - num.size(), '0') + num;
    const auto cls = static_cast<Label>(pick_class(rng));
    c.t_score = detail::draw_t_score(cls, unif(rng));
    c.label = who_label(c.t_score);

    // Complementarity draws come first and only when enabled, so default cohorts are unchanged.
    bool degraded = false, decoy = false;
    double clinical_t = c.t_score;
    if (cfg.complementary()) {
      degraded = unif(rng) < cfg.image_noise_fraction;
      decoy = unif(rng) < cfg.clinical_decoy_fraction && !degraded;
      const auto other = static_cast<Label>(pick_class(rng));
      const double u_other = unif(rng);
      if (decoy) clinical_t = detail::draw_t_score(other, u_other);
      if (cfg.clinical_by_class) clinical_t = detail::kClassMidT[static_cast<int>(who_label(clinical_t))];
    }

    const double shift_t = 0.5 * sep * (c.t_score - detail::kClassMidT[static_cast<int>(c.label)]);
    const auto& u = dirs[static_cast<int>(c.label)];
    const double sigma = degraded ? cfg.image_noise_scale : cfg.noise_sigma;
    c.embedding.resize(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      double mean = sep / std::sqrt(2.0) * u[d] + shift_t * t_dir[d];
      c.embedding[d] = static_cast<float>(mean + sigma * normal(rng));
    }

    // Risk grows as the T-score falls; tabular_signal scales the dependence.
    const double risk = detail::logistic(-2.0 * (clinical_t + 1.75));
    const double cn = cfg.clinical_noise;
    auto round1 = [](double x) { return std::round(x * 10.0) / 10.0; };
    c.clinical[kAge] = round1(std::clamp(62.0 - 6.0 * s * (clinical_t + 1.0) + 10.0 * cn * normal(rng), 20.0, 100.0));
    c.clinical[kSex] = unif(rng) < 0.6 ? 1.0 : 0.0;
    c.clinical[kWeight] = round1(std::clamp(75.0 + 6.0 * s * (clinical_t + 1.0) + 12.0 * cn * normal(rng), 40.0, 120.0));
    c.clinical[kHeight] = round1(std::clamp(168.0 + 9.0 * cn * normal(rng), 145.0, 195.0));
    for (std::size_t j = kPreviousFracture; j < kClinicalDim; ++j) {
      double p = 0.05 + 0.85 * s * risk_strength[j - kPreviousFracture] * risk;
      c.clinical[j] = unif(rng) < p ? 1.0 : 0.0;
    }
    cases.push_back(std::move(c));
  }
  return cases;
}

} // namespace pmx

#pragma once

// Binary checkpoint container:
//   "PMXC" | u32 format version | u64 manifest length | UTF-8 JSON manifest | tensor payloads
// Payloads are little-endian, row-major, in manifest order. Network tensors are 32-bit floats;
// prototype vectors are 64-bit so projected prototypes stay identical to their source cases.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "pmx/training.hpp"

namespace pmx {

inline constexpr char kCheckpointMagic[4] = {'P', 'M', 'X', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Lowercase hex SHA-256 of a byte buffer.
inline std::string sha256_hex(std::span<const char> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 computation failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

inline std::string sha256_file(const std::string& path) { return sha256_hex(detail::read_file_bytes(path)); }

namespace detail {

inline nlohmann::json clinical_json(const ClinicalFeatures& c) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t k = 0; k < kClinicalDim; ++k) j[std::string(kClinicalNames[k])] = c[k];
  return j;
}

inline ClinicalFeatures clinical_from_json(const nlohmann::json& j) {
  ClinicalFeatures c;
  for (std::size_t k = 0; k < kClinicalDim; ++k) c[k] = j.at(std::string(kClinicalNames[k])).get<double>();
  return c;
}

inline nlohmann::json history_json(const TrainHistory& h) {
  nlohmann::json j;
  j["epochs"] = h.epochs;
  j["best_epoch"] = h.best_epoch;
  j["best_val_accuracy"] = h.best_val_accuracy;
  j["early_stopped"] = h.early_stopped;
  j["test_accuracy_before_projection"] =
      h.test_accuracy_before_projection ? nlohmann::json(*h.test_accuracy_before_projection) : nlohmann::json();
  j["test_accuracy"] = h.test_accuracy ? nlohmann::json(*h.test_accuracy) : nlohmann::json();
  return j;
}

inline TrainHistory history_from_json(const nlohmann::json& j) {
  TrainHistory h;
  j.at("epochs").get_to(h.epochs);
  j.at("best_epoch").get_to(h.best_epoch);
  j.at("best_val_accuracy").get_to(h.best_val_accuracy);
  j.at("early_stopped").get_to(h.early_stopped);
  if (!j.at("test_accuracy_before_projection").is_null())
    h.test_accuracy_before_projection = j["test_accuracy_before_projection"].get<double>();
  if (!j.at("test_accuracy").is_null()) h.test_accuracy = j["test_accuracy"].get<double>();
  return h;
}

inline nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

} // namespace detail

/// Serializes a trained model to bytes. Wall-clock time is deliberately absent so identical runs
/// produce identical files.
inline std::vector<char> serialize_checkpoint(TrainedModel& tm) {
  nlohmann::json m;
  m["format_version"] = kCheckpointVersion;
  m["config"] = tm.config;
  m["standardizer"] = {{"embedding_mean", tm.standardizer.embedding_mean},
                       {"embedding_std", tm.standardizer.embedding_std},
                       {"clinical_mean", tm.standardizer.clinical_mean},
                       {"clinical_std", tm.standardizer.clinical_std}};
  nlohmann::json norms = nlohmann::json::object();
  for (std::size_t c = 0; c < kNumClasses; ++c) norms[std::string(kLabelNames[c])] = detail::clinical_json(tm.class_norms[c]);
  m["class_norms"] = norms;
  m["history"] = detail::history_json(tm.history);
  m["reference_confidence"] = {{"correct", detail::optional_json(tm.reference_confidence_correct)},
                               {"incorrect", detail::optional_json(tm.reference_confidence_incorrect)}};
  m["rng_state"] = tm.rng_state;

  auto& bank = tm.model.bank();
  m["prototypes_initialized"] = bank.initialized;
  nlohmann::json sources = nlohmann::json::array();
  for (const auto& s : bank.sources) {
    if (!s) {
      sources.push_back(nullptr);
      continue;
    }
    sources.push_back({{"patient_id", s->patient_id}, {"t_score", s->t_score}, {"clinical", detail::clinical_json(s->clinical)}});
  }
  m["prototype_sources"] = sources;

  std::ostringstream payload(std::ios::binary);
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (auto& t : tm.model.state()) {
    const bool wide = t.prototype;
    const auto count = static_cast<std::uint64_t>(t.value->size());
    tensors.push_back({{"name", t.name}, {"rows", t.value->rows()}, {"cols", t.value->cols()},
                       {"dtype", wide ? "f64" : "f32"}, {"offset", offset}});
    for (Eigen::Index i = 0; i < t.value->size(); ++i) {
      if (wide) detail::put_f64(payload, t.value->data()[i]);
      else detail::put_f32(payload, static_cast<float>(t.value->data()[i]));
    }
    offset += count * (wide ? 8u : 4u);
  }
  m["tensors"] = tensors;
  m["payload_bytes"] = offset;

  const std::string manifest = m.dump();
  std::ostringstream out(std::ios::binary);
  out.write(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, manifest.size());
  out << manifest << payload.str();
  const std::string s = out.str();
  return {s.begin(), s.end()};
}

inline void save_checkpoint(TrainedModel& tm, const std::string& path) {
  auto bytes = serialize_checkpoint(tm);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

/// Short identifier: the first 16 hex digits of the checkpoint's SHA-256.
inline std::string checkpoint_id(std::span<const char> bytes) { return sha256_hex(bytes).substr(0, 16); }

struct LoadedCheckpoint {
  TrainedModel trained;
  std::string id;
};

inline LoadedCheckpoint deserialize_checkpoint(std::span<const char> bytes, const std::string& what = "checkpoint") {
  detail::ByteReader r(bytes, what);
  try {
    auto magic = r.take(4);
    if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic))
      throw CheckpointError(what + ": not a checkpoint (bad magic at byte offset 0)");
    const auto version = r.u32();
    if (version != kCheckpointVersion)
      throw CheckpointError(what + ": checkpoint format version " + std::to_string(version) +
                            " is not supported; this build reads version " + std::to_string(kCheckpointVersion));
    const auto manifest_len = r.u64();
    const std::size_t manifest_at = r.offset();
    if (manifest_len > r.remaining())
      throw CheckpointError(what + ": truncated at byte offset " + std::to_string(r.remaining() + manifest_at) +
                            " (manifest declares " + std::to_string(manifest_len) + " bytes at offset " +
                            std::to_string(manifest_at) + ")");
    auto ms = r.take(manifest_len);
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(ms.begin(), ms.end());
    } catch (const nlohmann::json::parse_error& e) {
      throw CheckpointError(what + ": corrupt manifest near byte offset " + std::to_string(manifest_at + (e.byte ? e.byte - 1 : 0)) + ": " +
                            e.what());
    }

    LoadedCheckpoint out;
    TrainedModel& tm = out.trained;
    m.at("config").get_to(tm.config);
    tm.config.validate();
    tm.model = Model(tm.config.model_config(), tm.config.seed);

    const auto& sj = m.at("standardizer");
    sj.at("embedding_mean").get_to(tm.standardizer.embedding_mean);
    sj.at("embedding_std").get_to(tm.standardizer.embedding_std);
    sj.at("clinical_mean").get_to(tm.standardizer.clinical_mean);
    sj.at("clinical_std").get_to(tm.standardizer.clinical_std);
    for (std::size_t c = 0; c < kNumClasses; ++c)
      tm.class_norms[c] = detail::clinical_from_json(m.at("class_norms").at(std::string(kLabelNames[c])));
    tm.history = detail::history_from_json(m.at("history"));
    const auto& rc = m.at("reference_confidence");
    if (!rc.at("correct").is_null()) tm.reference_confidence_correct = rc["correct"].get<double>();
    if (!rc.at("incorrect").is_null()) tm.reference_confidence_incorrect = rc["incorrect"].get<double>();
    tm.rng_state = m.at("rng_state").get<std::string>();

    auto state = tm.model.state();
    const auto& tensors = m.at("tensors");
    if (tensors.size() != state.size())
      throw CheckpointError(what + ": manifest lists " + std::to_string(tensors.size()) + " tensors, model expects " +
                            std::to_string(state.size()));
    const std::size_t payload_at = r.offset();
    const auto payload_bytes = m.at("payload_bytes").get<std::uint64_t>();
    if (payload_bytes != r.remaining())
      throw CheckpointError(what + ": payload at byte offset " + std::to_string(payload_at) + " holds " +
                            std::to_string(r.remaining()) + " bytes, manifest declares " + std::to_string(payload_bytes));
    for (std::size_t i = 0; i < state.size(); ++i) {
      const auto& tj = tensors[i];
      auto& t = state[i];
      const auto rows = tj.at("rows").get<Eigen::Index>(), cols = tj.at("cols").get<Eigen::Index>();
      if (tj.at("name").get<std::string>() != t.name || rows != t.value->rows() || cols != t.value->cols())
        throw CheckpointError(what + ": tensor " + std::to_string(i) + " is '" + tj.at("name").get<std::string>() + "' " +
                              std::to_string(rows) + "x" + std::to_string(cols) + ", expected '" + t.name + "' " +
                              std::to_string(t.value->rows()) + "x" + std::to_string(t.value->cols()));
      const bool wide = tj.at("dtype").get<std::string>() == "f64";
      for (Eigen::Index k = 0; k < t.value->size(); ++k) {
        const double v = wide ? r.f64() : static_cast<double>(r.f32());
        if (!std::isfinite(v))
          throw CheckpointError(what + ": non-finite value in tensor '" + t.name + "' before byte offset " +
                                std::to_string(r.offset()));
        t.value->data()[k] = v;
      }
    }

    auto& bank = tm.model.bank();
    bank.initialized = m.at("prototypes_initialized").get<bool>();
    const auto& sources = m.at("prototype_sources");
    if (sources.size() != bank.size()) throw CheckpointError(what + ": prototype source count does not match the bank");
    for (std::size_t i = 0; i < bank.size(); ++i) {
      if (sources[i].is_null()) continue;
      bank.sources[i] = PrototypeSource{sources[i].at("patient_id").get<std::string>(),
                                        sources[i].at("t_score").get<double>(),
                                        detail::clinical_from_json(sources[i].at("clinical"))};
    }
    out.id = checkpoint_id(bytes);
    return out;
  } catch (const DataError& e) {
    throw CheckpointError(e.what()); // truncation reported by the reader, with its offset
  } catch (const ConfigError& e) {
    throw CheckpointError(what + ": invalid stored config: " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(what + ": malformed manifest: " + e.what());
  }
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::vector<char> bytes;
  try {
    bytes = detail::read_file_bytes(path);
  } catch (const DataError&) {
    throw CheckpointError("cannot open checkpoint '" + path + "'");
  }
  return deserialize_checkpoint(bytes, path);
}

} // namespace pmx

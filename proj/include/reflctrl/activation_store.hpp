#pragma once

// On-disk activation store: `<base>.bin` holds raw little-endian float32
// vectors back to back, `<base>.json` is the index
//   {schema_version, dtype, d_model, endianness, entries: [{trace_id,
//    token_index, layer, site, offset}, ...]}
// with entries sorted by (trace_id, token_index, layer, site). The sidecar is
// rewritten atomically on flush, so readers only ever see records whose bytes
// are already in the payload.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "reflctrl/errors.hpp"
#include "reflctrl/io.hpp"
#include "reflctrl/model/activation_record.hpp"

namespace reflctrl {

inline constexpr int kActivationStoreSchema = 1;

struct StorePaths {
  std::filesystem::path payload;
  std::filesystem::path sidecar;

  static StorePaths of(const std::filesystem::path& base) {
    auto p = base, s = base;
    p += ".bin";
    s += ".json";
    return {p, s};
  }
};

namespace detail {

inline std::map<ActivationKey, std::uint64_t> parse_store_sidecar(const nlohmann::json& j, int expected_d_model,
                                                                  int& d_model_out) {
  try {
    if (j.at("schema_version").get<int>() != kActivationStoreSchema) throw CorruptionError("unsupported schema_version");
    if (j.at("dtype").get<std::string>() != "float32") throw CorruptionError("dtype is not float32");
    if (j.at("endianness").get<std::string>() != "little") throw CorruptionError("payload is not little-endian");
    d_model_out = j.at("d_model").get<int>();
    if (d_model_out <= 0) throw CorruptionError("d_model must be positive");
    if (expected_d_model > 0 && d_model_out != expected_d_model) {
      throw CorruptionError("d_model mismatch: store has " + std::to_string(d_model_out) + ", expected " +
                            std::to_string(expected_d_model));
    }
    std::map<ActivationKey, std::uint64_t> index;
    for (const auto& e : j.at("entries")) {
      ActivationKey k{e.at("trace_id").get<std::string>(), e.at("token_index").get<std::int64_t>(),
                      e.at("layer").get<int>(), site_from_string(e.at("site").get<std::string>())};
      if (!index.emplace(std::move(k), e.at("offset").get<std::uint64_t>()).second) {
        throw CorruptionError("duplicate index entry");
      }
    }
    return index;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("malformed store sidecar: ") + e.what());
  } catch (const ValidationError& e) {
    throw CorruptionError(std::string("malformed store sidecar: ") + e.what());
  }
}

}  // namespace detail

class ActivationStoreWriter {
 public:
  // Opens `base` for appending; an existing store must have the same d_model.
  ActivationStoreWriter(std::filesystem::path base, int d_model) : paths_(StorePaths::of(base)), d_model_(d_model) {
    if (d_model <= 0) throw ConfigError("d_model must be positive");
    if (std::filesystem::exists(paths_.sidecar)) {
      int d = 0;
      auto sidecar = nlohmann::json::parse(io::read_file(paths_.sidecar), nullptr, false);
      if (sidecar.is_discarded()) throw CorruptionError("sidecar is not valid JSON: " + paths_.sidecar.string());
      index_ = detail::parse_store_sidecar(sidecar, d_model, d);
      std::uint64_t used = 0;
      for (const auto& [k, off] : index_) used = std::max(used, off + static_cast<std::uint64_t>(d_model) * 4);
      if (std::filesystem::exists(paths_.payload) && std::filesystem::file_size(paths_.payload) > used) {
        std::filesystem::resize_file(paths_.payload, used);  // drop bytes written after the last flush
      }
    } else if (std::filesystem::exists(paths_.payload)) {
      std::filesystem::remove(paths_.payload);  // bytes never indexed
    }
    if (paths_.payload.has_parent_path()) std::filesystem::create_directories(paths_.payload.parent_path());
    out_.open(paths_.payload, std::ios::binary | std::ios::app);
    if (!out_) throw Error("cannot open " + paths_.payload.string());
    out_.seekp(0, std::ios::end);
    end_ = static_cast<std::uint64_t>(out_.tellp());
  }

  ~ActivationStoreWriter() {
    try {
      flush();
    } catch (...) {
    }
  }

  ActivationStoreWriter(const ActivationStoreWriter&) = delete;
  ActivationStoreWriter& operator=(const ActivationStoreWriter&) = delete;

  void write(const ActivationRecord& r) {
    if (r.vector.size() != static_cast<std::size_t>(d_model_)) {
      throw CorruptionError("record length " + std::to_string(r.vector.size()) + " does not match d_model " +
                            std::to_string(d_model_));
    }
    auto key = key_of(r);
    if (index_.contains(key)) {
      throw ValidationError("key", "record already stored for " + r.trace_id + " token " + std::to_string(r.token_index));
    }
    io::write_f32_le(out_, r.vector);
    if (!out_) throw Error("write failed for " + paths_.payload.string());
    index_.emplace(std::move(key), end_);
    end_ += static_cast<std::uint64_t>(d_model_) * 4;
    dirty_ = true;
  }

  void write(const std::vector<ActivationRecord>& records) {
    for (const auto& r : records) write(r);
  }

  bool contains(const ActivationKey& k) const { return index_.contains(k); }

  void flush() {
    if (!dirty_) return;
    out_.flush();
    if (!out_) throw Error("flush failed for " + paths_.payload.string());
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [k, off] : index_) {
      entries.push_back({{"trace_id", k.trace_id},
                         {"token_index", k.token_index},
                         {"layer", k.layer},
                         {"site", to_string(k.site)},
                         {"offset", off}});
    }
    nlohmann::json j = {{"schema_version", kActivationStoreSchema},
                        {"dtype", "float32"},
                        {"d_model", d_model_},
                        {"endianness", "little"},
                        {"entries", std::move(entries)}};
    io::atomic_write(paths_.sidecar, j.dump());
    dirty_ = false;
  }

 private:
  StorePaths paths_;
  int d_model_;
  std::ofstream out_;
  std::uint64_t end_ = 0;
  std::map<ActivationKey, std::uint64_t> index_;
  bool dirty_ = false;
};

class ActivationStoreReader {
 public:
  // expected_d_model <= 0 accepts whatever the sidecar declares.
  explicit ActivationStoreReader(const std::filesystem::path& base, int expected_d_model = 0)
      : paths_(StorePaths::of(base)) {
    if (!std::filesystem::exists(paths_.sidecar)) throw NotFoundError("no activation store at " + base.string());
    auto sidecar = nlohmann::json::parse(io::read_file(paths_.sidecar), nullptr, false);
    if (sidecar.is_discarded()) throw CorruptionError("sidecar is not valid JSON: " + paths_.sidecar.string());
    index_ = detail::parse_store_sidecar(sidecar, expected_d_model, d_model_);
    const auto size = std::filesystem::exists(paths_.payload) ? std::filesystem::file_size(paths_.payload) : 0;
    const std::uint64_t rec = static_cast<std::uint64_t>(d_model_) * 4;
    for (const auto& [k, off] : index_) {
      if (off % rec != 0 || off + rec > size) {
        throw CorruptionError("index entry for " + k.trace_id + " token " + std::to_string(k.token_index) +
                              " points outside the payload");
      }
    }
    in_.open(paths_.payload, std::ios::binary);
    if (!in_ && !index_.empty()) throw NotFoundError("cannot open " + paths_.payload.string());
  }

  int d_model() const noexcept { return d_model_; }
  std::size_t size() const noexcept { return index_.size(); }
  bool contains(const ActivationKey& k) const { return index_.contains(k); }

  std::vector<ActivationKey> keys() const {
    std::vector<ActivationKey> out;
    out.reserve(index_.size());
    for (const auto& [k, _] : index_) out.push_back(k);
    return out;
  }

  ActivationRecord read(const ActivationKey& k) {
    auto it = index_.find(k);
    if (it == index_.end()) {
      throw NotFoundError("no record for (" + k.trace_id + ", " + std::to_string(k.token_index) + ", " +
                          std::to_string(k.layer) + ", " + std::string(to_string(k.site)) + ")");
    }
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(it->second));
    return {k.trace_id, k.token_index, k.layer, k.site, io::read_f32_le(in_, static_cast<std::size_t>(d_model_))};
  }

  std::vector<ActivationRecord> read_all() {
    std::vector<ActivationRecord> out;
    out.reserve(index_.size());
    for (const auto& [k, _] : index_) out.push_back(read(k));
    return out;
  }

 private:
  StorePaths paths_;
  int d_model_ = 0;
  std::map<ActivationKey, std::uint64_t> index_;
  std::ifstream in_;
};

inline void write_activation_store(const std::filesystem::path& base, int d_model,
                                   const std::vector<ActivationRecord>& records) {
  ActivationStoreWriter w(base, d_model);
  w.write(records);
  w.flush();
}

}  // namespace reflctrl

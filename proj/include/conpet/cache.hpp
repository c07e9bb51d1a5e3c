#pragma once

// Logit cache keyed by (example id, module id), only for frozen modules.
//
// Storage is one append-only log with an in-memory index rebuilt on open:
//
//   header  "CPETLC01"
//   record  u8 kind | u32 key_len | key bytes | i64 module_id |
//           u32 n | n x f64 | u32 crc32(kind .. last f64)
//
// All integers and doubles are little-endian. kind 1 stores a vector, kind 2
// drops every entry of module_id (key_len = n = 0). A torn final record is
// discarded and truncated away on open; a bad record followed by more data is
// corruption.

#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "conpet/errors.hpp"
#include "conpet/pet.hpp"

namespace conpet {

struct CacheEntry {
  std::string example_id;
  int module_id = 0;
  std::vector<double> logits;
};

class LogitCache {
 public:
  static constexpr char kMagic[8] = {'C', 'P', 'E', 'T', 'L', 'C', '0', '1'};

  /// In-memory cache with no backing file.
  LogitCache() = default;

  /// Opens (or creates) the log at `path` and replays it into the index.
  explicit LogitCache(std::filesystem::path path) : path_(std::move(path)) {
    if (std::filesystem::exists(path_)) replay();
    out_.open(path_, std::ios::binary | std::ios::app);
    if (!out_) throw InvalidArgument("cannot open cache log " + path_.string());
    if (std::filesystem::file_size(path_) == 0) {
      out_.write(kMagic, sizeof(kMagic));
      out_.flush();
    }
  }

  LogitCache(const LogitCache&) = delete;
  LogitCache& operator=(const LogitCache&) = delete;

  std::optional<std::vector<double>> get(std::string_view example_id, int module_id) const {
    std::shared_lock lock(mutex_);
    const auto module = index_.find(module_id);
    if (module != index_.end()) {
      const auto entry = module->second.find(std::string(example_id));
      if (entry != module->second.end()) {
        hits_.fetch_add(1, std::memory_order_relaxed);
        return entry->second;
      }
    }
    misses_.fetch_add(1, std::memory_order_relaxed);
    return std::nullopt;
  }

  /// Stores logits produced by `module`, which must be frozen.
  void put(std::string_view example_id, const PetModule& module, std::span<const double> logits) {
    if (!module.frozen()) {
      throw ContractViolation("cache put for module " + std::to_string(module.module_id()) +
                              " which is still training");
    }
    put_unchecked(example_id, module.module_id(), logits);
  }

  /// Drops every entry of `module_id`, e.g. after the selector head grows.
  void invalidate_module(int module_id) {
    std::unique_lock lock(mutex_);
    index_.erase(module_id);
    if (out_.is_open()) append_record(2, {}, module_id, {});
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    std::size_t n = 0;
    for (const auto& [id, entries] : index_) n += entries.size();
    return n;
  }

  std::uint64_t hits() const noexcept { return hits_.load(std::memory_order_relaxed); }
  std::uint64_t misses() const noexcept { return misses_.load(std::memory_order_relaxed); }
  const std::filesystem::path& path() const noexcept { return path_; }
  bool persistent() const noexcept { return !path_.empty(); }

 private:
  void put_unchecked(std::string_view example_id, int module_id, std::span<const double> logits) {
    std::unique_lock lock(mutex_);
    auto& entries = index_[module_id];
    const auto existing = entries.find(std::string(example_id));
    if (existing != entries.end()) {
      if (existing->second.size() == logits.size() &&
          std::memcmp(existing->second.data(), logits.data(), logits.size() * sizeof(double)) == 0) {
        return;
      }
      throw IntegrityError("conflicting cache entry for (" + std::string(example_id) + ", " +
                           std::to_string(module_id) + ")");
    }
    entries.emplace(std::string(example_id), std::vector<double>(logits.begin(), logits.end()));
    if (out_.is_open()) append_record(1, example_id, module_id, logits);
  }

  template <typename T>
  static void put_le(std::string& buf, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    buf.append(reinterpret_cast<const char*>(bytes), sizeof(T));
  }

  template <typename T>
  static T get_le(const unsigned char* p) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }

  static std::uint32_t crc(const char* data, std::size_t size) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(size)));
  }

  void append_record(std::uint8_t kind, std::string_view key, int module_id,
                     std::span<const double> logits) {
    std::string buf;
    buf.reserve(1 + 4 + key.size() + 8 + 4 + logits.size() * 8 + 4);
    put_le<std::uint8_t>(buf, kind);
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(key.size()));
    buf.append(key);
    put_le<std::int64_t>(buf, module_id);
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(logits.size()));
    for (double v : logits) put_le<double>(buf, v);
    put_le<std::uint32_t>(buf, crc(buf.data(), buf.size()));
    out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out_.flush();
    if (!out_) throw IntegrityError("failed to append to cache log " + path_.string());
  }

  void replay() {
    std::string bytes;
    {
      std::ifstream in(path_, std::ios::binary);
      if (!in) throw InvalidArgument("cannot read cache log " + path_.string());
      bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    if (bytes.empty()) return;
    if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
      throw IntegrityError("cache log " + path_.string() + " has a bad header");
    }
    const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t total = bytes.size();
    std::size_t pos = sizeof(kMagic);
    std::size_t valid_end = pos;
    while (pos < total) {
      // Running out of bytes mid-record means a torn tail.
      std::size_t cursor = pos;
      const auto need = [&](std::size_t n) { return total - cursor >= n; };
      if (!need(5)) break;
      const auto kind = data[cursor];
      const auto key_len = get_le<std::uint32_t>(data + cursor + 1);
      cursor += 5;
      if (!need(std::size_t{key_len} + 12)) break;
      std::string key(reinterpret_cast<const char*>(data + cursor), key_len);
      cursor += key_len;
      const auto module_id = static_cast<int>(get_le<std::int64_t>(data + cursor));
      const auto n = get_le<std::uint32_t>(data + cursor + 8);
      cursor += 12;
      if (!need(std::size_t{n} * 8 + 4)) break;
      std::vector<double> logits(n);
      for (std::uint32_t i = 0; i < n; ++i) logits[i] = get_le<double>(data + cursor + 8 * i);
      cursor += std::size_t{n} * 8;
      const auto stored = get_le<std::uint32_t>(data + cursor);
      cursor += 4;
      const bool ok = stored == crc(bytes.data() + pos, cursor - 4 - pos) && (kind == 1 || kind == 2);
      if (!ok) {
        if (cursor == total) break;  // torn final record
        throw IntegrityError("cache log " + path_.string() + " is corrupted at byte " +
                             std::to_string(pos));
      }
      if (kind == 1) {
        auto& entries = index_[module_id];
        const auto [it, inserted] = entries.try_emplace(key, logits);
        if (!inserted && it->second != logits) {
          throw IntegrityError("cache log holds conflicting entries for (" + key + ", " +
                               std::to_string(module_id) + ")");
        }
      } else {
        index_.erase(module_id);
      }
      pos = cursor;
      valid_end = pos;
    }
    if (valid_end < total) std::filesystem::resize_file(path_, valid_end);
  }

  std::filesystem::path path_;
  std::ofstream out_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<int, std::unordered_map<std::string, std::vector<double>>> index_;
  mutable std::atomic<std::uint64_t> hits_{0};
  mutable std::atomic<std::uint64_t> misses_{0};
};

}  // namespace conpet

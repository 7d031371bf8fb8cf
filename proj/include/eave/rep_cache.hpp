#pragma once

// On-disk store of heavy-encoder representations, one file per entry named
// hex(fingerprint)-hex(content_hash).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "eave/encoder.hpp"

namespace eave {

struct ProductRecord;
class Vocab;

struct CacheKey {
  std::uint64_t content_hash = 0;
  std::uint64_t fingerprint = 0;

  bool operator==(const CacheKey&) const = default;
};

// Hash of the kind tag followed by the padded token ids.
std::uint64_t content_hash(SequenceKind kind, std::span<const int> tokens);

inline constexpr std::uint32_t kCacheFormatVersion = 1;

void write_reps(std::ostream& os, const HeavyReps<float>& reps, std::uint64_t content_hash);
// Throws IntegrityError prefixed with `what` on bad magic, version or truncation.
HeavyReps<float> read_reps(std::istream& is, const std::string& what, std::uint64_t* content_hash = nullptr);

struct GcStats {
  std::size_t files_removed = 0;
  std::uint64_t bytes_removed = 0;
  std::uint64_t bytes_remaining = 0;
};

class RepCache {
 public:
  explicit RepCache(std::filesystem::path dir);

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path entry_path(const CacheKey& key) const;

  bool contains(const CacheKey& key) const;
  // Absent when no entry exists for this key (including any other
  // fingerprint). Throws IntegrityError naming the file if it is corrupted.
  std::optional<HeavyReps<float>> get(const CacheKey& key) const;
  // Atomic publish via a temporary file and rename. Returns bytes written.
  std::uint64_t put(const CacheKey& key, const HeavyReps<float>& reps) const;

  // Deletes oldest entries (by modification time, then name) until the total
  // size is at most max_bytes.
  GcStats gc(std::uint64_t max_bytes) const;

 private:
  std::filesystem::path dir_;
};

struct PrecomputeStats {
  std::size_t contexts_encoded = 0;
  std::size_t attributes_encoded = 0;
  std::uint64_t bytes_written = 0;
};

// Heavy-encodes every distinct context and attribute sequence not yet cached.
PrecomputeStats precompute_corpus(const std::vector<ProductRecord>& products, const EaveModel<float>& model,
                                  const Vocab& vocab, const RepCache& cache);

}  // namespace eave

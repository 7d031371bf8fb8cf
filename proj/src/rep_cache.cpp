#include "eave/rep_cache.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <system_error>
#include <unistd.h>

#include "eave/binary_io.hpp"
#include "eave/data.hpp"
#include "eave/errors.hpp"
#include "eave/hash.hpp"

namespace eave {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[9] = "EAVECACH";

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::uint64_t content_hash(SequenceKind kind, std::span<const int> tokens) {
  Fnv1a64 h;
  h.update_value(static_cast<std::uint8_t>(kind));
  for (int t : tokens) h.update_value(static_cast<std::int32_t>(t));
  return h.digest();
}

void write_reps(std::ostream& os, const HeavyReps<float>& reps, std::uint64_t hash) {
  io::write_magic(os, kMagic);
  io::write_le<std::uint32_t>(os, kCacheFormatVersion);
  io::write_le<std::uint64_t>(os, reps.fingerprint);
  io::write_le<std::uint64_t>(os, hash);
  io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(reps.kind));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(reps.seq_len));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(reps.per_layer.size()));
  for (const auto& [index, t] : reps.per_layer) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(index));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rows()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.cols()));
    for (float v : t.data()) io::write_le<float>(os, v);
  }
}

HeavyReps<float> read_reps(std::istream& is, const std::string& what, std::uint64_t* hash) {
  io::expect_magic(is, kMagic, what);
  const auto version = io::read_le<std::uint32_t>(is, what);
  if (version != kCacheFormatVersion) {
    throw IntegrityError(what + ": unsupported version " + std::to_string(version));
  }
  HeavyReps<float> reps;
  reps.fingerprint = io::read_le<std::uint64_t>(is, what);
  const auto h = io::read_le<std::uint64_t>(is, what);
  if (hash) *hash = h;
  const auto kind = io::read_le<std::uint8_t>(is, what);
  if (kind > 1) throw IntegrityError(what + ": bad sequence kind");
  reps.kind = static_cast<SequenceKind>(kind);
  reps.seq_len = io::read_le<std::uint32_t>(is, what);
  const auto layers = io::read_le<std::uint32_t>(is, what);
  for (std::uint32_t l = 0; l < layers; ++l) {
    const auto index = io::read_le<std::uint32_t>(is, what);
    const auto rows = io::read_le<std::uint32_t>(is, what);
    const auto cols = io::read_le<std::uint32_t>(is, what);
    if (rows != reps.seq_len || cols == 0 || cols > (1u << 20)) {
      throw IntegrityError(what + ": bad layer shape");
    }
    std::vector<float> data(static_cast<std::size_t>(rows) * cols);
    for (auto& v : data) v = io::read_le<float>(is, what);
    reps.per_layer.emplace(index, Tensor<float>::from({rows, cols}, std::move(data)));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IntegrityError(what + ": trailing bytes");
  return reps;
}

RepCache::RepCache(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

fs::path RepCache::entry_path(const CacheKey& key) const {
  return dir_ / (hex64(key.fingerprint) + "-" + hex64(key.content_hash));
}

bool RepCache::contains(const CacheKey& key) const { return fs::exists(entry_path(key)); }

std::optional<HeavyReps<float>> RepCache::get(const CacheKey& key) const {
  const auto path = entry_path(key);
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::uint64_t hash = 0;
  auto reps = read_reps(in, path.string(), &hash);
  if (hash != key.content_hash || reps.fingerprint != key.fingerprint) {
    throw IntegrityError(path.string() + ": header does not match file name");
  }
  return reps;
}

std::uint64_t RepCache::put(const CacheKey& key, const HeavyReps<float>& reps) const {
  if (reps.fingerprint != key.fingerprint) {
    throw std::invalid_argument("RepCache::put: reps fingerprint differs from key");
  }
  static std::atomic<std::uint64_t> counter{0};
  const auto path = entry_path(key);
  const auto tmp = fs::path(path.string() + ".tmp." + std::to_string(::getpid()) + "." +
                            std::to_string(counter.fetch_add(1)));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cache: cannot write " + tmp.string());
    write_reps(out, reps, key.content_hash);
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw std::runtime_error("cache: write failed for " + tmp.string());
    }
  }
  const auto bytes = fs::file_size(tmp);
  fs::rename(tmp, path);
  return bytes;
}

GcStats RepCache::gc(std::uint64_t max_bytes) const {
  struct Item {
    fs::file_time_type mtime;
    fs::path path;
    std::uint64_t size;
  };
  std::vector<Item> items;
  std::uint64_t total = 0;
  for (const auto& e : fs::directory_iterator(dir_)) {
    if (!e.is_regular_file() || e.path().filename().string().find(".tmp.") != std::string::npos) continue;
    items.push_back({e.last_write_time(), e.path(), e.file_size()});
    total += items.back().size;
  }
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    return a.mtime != b.mtime ? a.mtime < b.mtime : a.path < b.path;
  });
  GcStats stats;
  for (const auto& item : items) {
    if (total <= max_bytes) break;
    std::error_code ec;
    if (fs::remove(item.path, ec)) {
      total -= item.size;
      stats.bytes_removed += item.size;
      ++stats.files_removed;
    }
  }
  stats.bytes_remaining = total;
  return stats;
}

PrecomputeStats precompute_corpus(const std::vector<ProductRecord>& products, const EaveModel<float>& model,
                                  const Vocab& vocab, const RepCache& cache) {
  NoGradGuard no_grad;
  PrecomputeStats stats;
  const auto fp = model.fingerprint();
  std::set<std::uint64_t> seen;
  auto ensure = [&](SequenceKind kind, const std::vector<int>& ids, std::size_t& counter) {
    const CacheKey key{content_hash(kind, ids), fp};
    if (!seen.insert(key.content_hash).second || cache.contains(key)) return;
    stats.bytes_written += cache.put(key, heavy_encode<float>(ids, kind, model));
    ++counter;
  };
  for (const auto& p : products) {
    const auto ctx = encode_context(join_context(p), vocab, model.config.context_len).ids;
    ensure(SequenceKind::Context, ctx, stats.contexts_encoded);
    for (const auto& a : p.attributes) {
      ensure(SequenceKind::Attribute, encode_attribute(a.key, vocab, model.config.attribute_len),
             stats.attributes_encoded);
    }
  }
  return stats;
}

}  // namespace eave

// SPDX-License-Identifier: Apache-2.0
//
// Text preprocessing, synthetic corpora, and the memory-mapped record store.
//
// Store layout (little-endian, packed):
//
//   header   "PSYD" | version u32 | record_count u64 | index_offset u64 |
//            target_count u16 | task_code u8                     (27 bytes)
//   payload  per record: text bytes, then target_count f32
//   index    per record: payload_offset u64 | text_len u32       (12 bytes)
//
// A sidecar "<store>.manifest.json" carries the dataset name, target names and
// record ids. The binary file is self-sufficient for reads; the sidecar is
// optional on open.
#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include "psyche/common.hpp"
#include "psyche/random.hpp"

namespace psyche::corpus {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Cleaning

namespace detail {

inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline bool starts_with_ci(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    char c = s[i];
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    if (c != prefix[i]) return false;
  }
  return true;
}

inline bool is_url_token(std::string_view tok) {
  return starts_with_ci(tok, "http://") || starts_with_ci(tok, "https://") ||
         starts_with_ci(tok, "www.");
}

}  // namespace detail

/// Lowercases, drops URL tokens, maps everything outside [a-z0-9'] to spaces,
/// then collapses and trims whitespace. Non-ASCII bytes count as "outside".
inline std::string clean_text(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  auto emit = [&](char c) {
    if (c == ' ') {
      pending_space = !out.empty();
      return;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  };

  std::size_t i = 0;
  while (i < raw.size()) {
    while (i < raw.size() && detail::is_space(raw[i])) ++i;
    std::size_t start = i;
    while (i < raw.size() && !detail::is_space(raw[i])) ++i;
    std::string_view tok = raw.substr(start, i - start);
    if (tok.empty() || detail::is_url_token(tok)) continue;
    emit(' ');
    for (char c : tok) {
      if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
      bool keep = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '\'';
      emit(keep ? c : ' ');
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records and manifests

enum class Task : std::uint8_t {
  multi_output_regression = 0,
  multi_label_classification = 1,
  multi_class_classification = 2,
};

inline std::string_view task_name(Task t) {
  switch (t) {
    case Task::multi_output_regression: return "multi_output_regression";
    case Task::multi_label_classification: return "multi_label_classification";
    case Task::multi_class_classification: return "multi_class_classification";
  }
  return "unknown";
}

inline Task parse_task(std::string_view name) {
  for (Task t : {Task::multi_output_regression, Task::multi_label_classification,
                 Task::multi_class_classification})
    if (task_name(t) == name) return t;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

inline bool is_classification(Task t) { return t != Task::multi_output_regression; }

/// Classification records carry their label mask as 0/1 targets.
struct RawRecord {
  std::uint64_t id = 0;
  std::string text;
  std::vector<double> targets;
};

struct DatasetManifest {
  std::string name;
  Task task = Task::multi_output_regression;
  std::vector<std::string> target_names;
  std::uint64_t record_count = 0;
  std::uint64_t created_seed = 0;
};

inline json manifest_to_json(const DatasetManifest& m) {
  return {{"name", m.name},
          {"task", task_name(m.task)},
          {"target_names", m.target_names},
          {"record_count", m.record_count},
          {"created_seed", m.created_seed}};
}

inline DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.name = j.at("name").get<std::string>();
  m.task = parse_task(j.at("task").get<std::string>());
  m.target_names = j.at("target_names").get<std::vector<std::string>>();
  m.record_count = j.at("record_count").get<std::uint64_t>();
  m.created_seed = j.value("created_seed", std::uint64_t{0});
  return m;
}

/// One record as read back from a store. Targets are widened from f32.
struct Record {
  std::string text;
  std::vector<double> targets;

  bool operator==(const Record&) const = default;
};

// ---------------------------------------------------------------------------
// Memory mapping

class MappedFile {
 public:
  MappedFile() = default;

  explicit MappedFile(const fs::path& path) {
    int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd < 0) throw IoError("cannot open " + path.string());
    struct stat st {};
    if (::fstat(fd, &st) != 0) {
      ::close(fd);
      throw IoError("cannot stat " + path.string());
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
      void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd, 0);
      if (p == MAP_FAILED) {
        ::close(fd);
        throw IoError("mmap failed on " + path.string());
      }
      data_ = static_cast<const std::byte*>(p);
    }
    ::close(fd);
  }

  ~MappedFile() { reset(); }

  MappedFile(MappedFile&& o) noexcept
      : data_(std::exchange(o.data_, nullptr)), size_(std::exchange(o.size_, 0)) {}
  MappedFile& operator=(MappedFile&& o) noexcept {
    if (this != &o) {
      reset();
      data_ = std::exchange(o.data_, nullptr);
      size_ = std::exchange(o.size_, 0);
    }
    return *this;
  }
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;

  std::span<const std::byte> bytes() const { return {data_, size_}; }
  std::size_t size() const { return size_; }

 private:
  void reset() {
    if (data_) ::munmap(const_cast<std::byte*>(data_), size_);
    data_ = nullptr;
    size_ = 0;
  }

  const std::byte* data_ = nullptr;
  std::size_t size_ = 0;
};

// ---------------------------------------------------------------------------
// Store

inline constexpr char kStoreMagic[4] = {'P', 'S', 'Y', 'D'};
inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr std::size_t kHeaderSize = 27;
inline constexpr std::size_t kIndexEntrySize = 12;

inline fs::path manifest_path_for(const fs::path& store) {
  fs::path p = store;
  p += ".manifest.json";
  return p;
}

/// Read-only view of a store file. Immutable after open; safe to share across
/// reader threads.
class MmapStore {
 public:
  static MmapStore open(const fs::path& path) {
    MmapStore s;
    s.path_ = path;
    s.file_ = MappedFile(path);
    s.validate();
    s.load_manifest();
    return s;
  }

  const fs::path& path() const { return path_; }
  std::uint64_t record_count() const { return record_count_; }
  std::uint16_t target_count() const { return target_count_; }
  Task task() const { return task_; }
  const DatasetManifest& manifest() const { return manifest_; }
  const std::vector<std::uint64_t>& ids() const { return ids_; }

  /// Zero-copy view into the mapping.
  std::string_view text_view(std::uint64_t i) const {
    auto [off, len] = entry(i);
    return {reinterpret_cast<const char*>(file_.bytes().data() + off), len};
  }

  std::vector<double> targets(std::uint64_t i) const {
    auto [off, len] = entry(i);
    const std::byte* p = file_.bytes().data() + off + len;
    std::vector<double> out(target_count_);
    for (std::size_t t = 0; t < target_count_; ++t)
      out[t] = static_cast<double>(load_le<float>(p + 4 * t));
    return out;
  }

  Record read(std::uint64_t i) const { return {std::string(text_view(i)), targets(i)}; }

  std::vector<Record> read_batch(std::span<const std::uint64_t> indices) const {
    std::vector<Record> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(read(i));
    return out;
  }

 private:
  std::pair<std::uint64_t, std::uint32_t> entry(std::uint64_t i) const {
    if (i >= record_count_)
      throw BoundsError("record index " + std::to_string(i) + " out of range (" +
                        std::to_string(record_count_) + " records)");
    const std::byte* e = file_.bytes().data() + index_offset_ + i * kIndexEntrySize;
    return {load_le<std::uint64_t>(e), load_le<std::uint32_t>(e + 8)};
  }

  void validate() {
    auto bytes = file_.bytes();
    auto bad = [&](const std::string& why) {
      return FormatError(path_.string() + ": " + why);
    };
    if (bytes.size() < kHeaderSize) throw bad("file shorter than header");
    if (std::memcmp(bytes.data(), kStoreMagic, 4) != 0) throw bad("bad magic");
    ByteReader r(bytes.subspan(4));
    if (r.get<std::uint32_t>() != kStoreVersion) throw bad("unsupported version");
    record_count_ = r.get<std::uint64_t>();
    index_offset_ = r.get<std::uint64_t>();
    target_count_ = r.get<std::uint16_t>();
    auto code = r.get<std::uint8_t>();
    if (code > 2) throw bad("bad task code");
    task_ = static_cast<Task>(code);

    if (index_offset_ < kHeaderSize || index_offset_ > bytes.size() ||
        (bytes.size() - index_offset_) / kIndexEntrySize < record_count_)
      throw bad("index outside file bounds");
    for (std::uint64_t i = 0; i < record_count_; ++i) {
      auto [off, len] = entry(i);
      std::uint64_t end = off + len + 4ull * target_count_;
      if (off < kHeaderSize || end > index_offset_) throw bad("record " + std::to_string(i) + " outside payload");
    }
  }

  void load_manifest() {
    fs::path mp = manifest_path_for(path_);
    std::error_code ec;
    if (fs::exists(mp, ec)) {
      json j = json::parse(read_text_file(mp));
      manifest_ = manifest_from_json(j);
      if (manifest_.record_count != record_count_)
        throw FormatError(mp.string() + ": record_count disagrees with store");
      ids_ = j.value("ids", std::vector<std::uint64_t>{});
    } else {
      manifest_.name = path_.stem().string();
      manifest_.task = task_;
      manifest_.record_count = record_count_;
      for (std::size_t t = 0; t < target_count_; ++t)
        manifest_.target_names.push_back("t" + std::to_string(t));
    }
    if (ids_.size() != record_count_) ids_ = std::vector<std::uint64_t>();
    if (ids_.empty())
      for (std::uint64_t i = 0; i < record_count_; ++i) ids_.push_back(i);
  }

  fs::path path_;
  MappedFile file_;
  std::uint64_t record_count_ = 0;
  std::uint64_t index_offset_ = 0;
  std::uint16_t target_count_ = 0;
  Task task_ = Task::multi_output_regression;
  DatasetManifest manifest_;
  std::vector<std::uint64_t> ids_;
};

/// Cleans every text, validates targets, and writes the store atomically.
inline MmapStore ingest(std::span<const RawRecord> records, DatasetManifest manifest,
                        const fs::path& path) {
  if (records.empty()) throw ValidationError("ingest requires at least one record");
  if (manifest.target_names.empty()) throw ValidationError("manifest has no target names");
  const std::size_t tc = manifest.target_names.size();
  if (tc > 0xffff) throw ValidationError("too many targets");

  std::unordered_set<std::uint64_t> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.id).second)
      throw ValidationError("duplicate record id " + std::to_string(r.id));
    if (r.targets.size() != tc)
      throw ValidationError("record " + std::to_string(r.id) + " has " +
                            std::to_string(r.targets.size()) + " targets, expected " +
                            std::to_string(tc));
    for (double v : r.targets)
      if (!std::isfinite(v))
        throw ValidationError("record " + std::to_string(r.id) + " has a non-finite target");
  }

  ByteWriter w;
  w.put_bytes(std::string_view(kStoreMagic, 4));
  w.put(kStoreVersion);
  w.put(static_cast<std::uint64_t>(records.size()));
  const std::size_t index_offset_pos = w.size();
  w.put(std::uint64_t{0});
  w.put(static_cast<std::uint16_t>(tc));
  w.put(static_cast<std::uint8_t>(manifest.task));

  std::vector<std::pair<std::uint64_t, std::uint32_t>> index;
  index.reserve(records.size());
  for (const auto& r : records) {
    std::string text = clean_text(r.text);
    if (text.size() > 0xffffffffu) throw ValidationError("text too long");
    index.emplace_back(w.size(), static_cast<std::uint32_t>(text.size()));
    w.put_bytes(text);
    for (double v : r.targets) w.put(static_cast<float>(v));
  }
  const std::uint64_t index_offset = w.size();
  for (auto [off, len] : index) {
    w.put(off);
    w.put(len);
  }
  std::memcpy(w.bytes().data() + index_offset_pos, &index_offset, sizeof index_offset);

  manifest.record_count = records.size();
  json mj = manifest_to_json(manifest);
  std::vector<std::uint64_t> ids;
  for (const auto& r : records) ids.push_back(r.id);
  mj["ids"] = ids;

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  try {
    write_file_atomic(manifest_path_for(path), mj.dump(1));
    write_file_atomic(path, std::span<const std::byte>(w.bytes()));
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError(std::string("ingest failed: ") + e.what());
  }
  return MmapStore::open(path);
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::uint64_t> train, val, test;
};

/// Seeded permutation cut into three contiguous pieces of round(ratio * n).
inline SplitIndices split(std::uint64_t n, const SplitSpec& spec) {
  for (double r : {spec.train, spec.val, spec.test})
    if (!(r > 0.0 && r < 1.0)) throw ConfigError("split ratios must lie in (0, 1)");
  if (std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9)
    throw ConfigError("split ratios must sum to 1");

  std::vector<std::uint64_t> perm(n);
  for (std::uint64_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(perm);

  auto n_train = static_cast<std::uint64_t>(std::llround(spec.train * static_cast<double>(n)));
  auto n_val = static_cast<std::uint64_t>(std::llround(spec.val * static_cast<double>(n)));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);

  SplitIndices out;
  out.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
                 perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
  return out;
}

inline SplitIndices split(const MmapStore& store, const SplitSpec& spec) {
  return split(store.record_count(), spec);
}

// ---------------------------------------------------------------------------
// Synthetic corpora

struct SyntheticConfig {
  Task task = Task::multi_output_regression;
  std::uint64_t n = 1000;
  std::uint32_t vocab_size = 200;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
  std::uint32_t n_targets = 2;
  std::uint32_t min_doc_len = 20;
  std::uint32_t max_doc_len = 60;
  /// Token frequencies follow rank^-zipf_exponent.
  double zipf_exponent = 1.0;
};

struct SyntheticCorpus {
  std::vector<RawRecord> records;
  /// Mean over targets of Var(signal) / (Var(signal) + noise_std^2).
  double oracle_r2 = 1.0;
  /// Noise-free targets, row-major [n, n_targets].
  std::vector<double> signal;
  DatasetManifest manifest;
};

inline std::string synthetic_token(std::uint32_t id) { return "tok" + std::to_string(id); }

namespace detail {

inline double population_variance(std::span<const double> v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return acc / static_cast<double>(v.size());
}

}  // namespace detail

/// Bag-of-tokens documents with targets y = w . counts + noise. Token draws and
/// hidden weights come from one stream, noise from another, so changing
/// noise_std leaves texts and signals untouched for a fixed seed.
inline SyntheticCorpus gen_synthetic(const SyntheticConfig& cfg) {
  if (cfg.n == 0) throw ConfigError("synthetic corpus needs n > 0");
  if (cfg.vocab_size <= 10) throw ConfigError("synthetic corpus needs vocab_size > 10");
  if (cfg.n_targets == 0) throw ConfigError("synthetic corpus needs at least one target");
  if (cfg.min_doc_len == 0 || cfg.min_doc_len > cfg.max_doc_len)
    throw ConfigError("bad document length range");
  if (!(cfg.noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");

  Rng signal_rng(cfg.seed);
  Rng noise_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  const std::size_t V = cfg.vocab_size, T = cfg.n_targets;

  std::vector<double> w(V * T);
  for (auto& x : w) x = signal_rng.normal();

  std::vector<double> cdf(V);
  double total = 0.0;
  for (std::size_t r = 0; r < V; ++r) {
    total += std::pow(static_cast<double>(r + 1), -cfg.zipf_exponent);
    cdf[r] = total;
  }
  for (auto& c : cdf) c /= total;

  SyntheticCorpus out;
  out.signal.resize(cfg.n * T);
  std::vector<double> noise(cfg.n * T);
  std::vector<std::uint32_t> counts(V);
  for (std::uint64_t i = 0; i < cfg.n; ++i) {
    std::fill(counts.begin(), counts.end(), 0);
    auto len = cfg.min_doc_len +
               static_cast<std::uint32_t>(signal_rng.bounded(cfg.max_doc_len - cfg.min_doc_len + 1));
    std::string text;
    for (std::uint32_t k = 0; k < len; ++k) {
      double u = signal_rng.uniform();
      auto tok = static_cast<std::uint32_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
      tok = std::min<std::uint32_t>(tok, cfg.vocab_size - 1);
      ++counts[tok];
      if (k) text.push_back(' ');
      text += synthetic_token(tok);
    }
    for (std::size_t t = 0; t < T; ++t) {
      double s = 0.0;
      for (std::size_t v = 0; v < V; ++v) s += w[v * T + t] * counts[v];
      out.signal[i * T + t] = s;
      noise[i * T + t] = cfg.noise_std > 0.0 ? noise_rng.normal(0.0, cfg.noise_std) : 0.0;
    }
    out.records.push_back({i, std::move(text), {}});
  }

  double r2_sum = 0.0;
  std::vector<double> column(cfg.n);
  std::vector<double> threshold(T);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::uint64_t i = 0; i < cfg.n; ++i) column[i] = out.signal[i * T + t];
    double var = detail::population_variance(column);
    double noise_var = cfg.noise_std * cfg.noise_std;
    r2_sum += (var + noise_var) > 0.0 ? var / (var + noise_var) : 1.0;
    std::vector<double> sorted = column;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(cfg.n / 2), sorted.end());
    threshold[t] = sorted[cfg.n / 2];
  }
  out.oracle_r2 = r2_sum / static_cast<double>(T);

  for (std::uint64_t i = 0; i < cfg.n; ++i) {
    auto& targets = out.records[i].targets;
    targets.resize(T);
    switch (cfg.task) {
      case Task::multi_output_regression:
        for (std::size_t t = 0; t < T; ++t) targets[t] = out.signal[i * T + t] + noise[i * T + t];
        break;
      case Task::multi_label_classification:
        for (std::size_t t = 0; t < T; ++t)
          targets[t] = out.signal[i * T + t] + noise[i * T + t] > threshold[t] ? 1.0 : 0.0;
        break;
      case Task::multi_class_classification: {
        std::size_t best = 0;
        for (std::size_t t = 1; t < T; ++t)
          if (out.signal[i * T + t] + noise[i * T + t] > out.signal[i * T + best] + noise[i * T + best])
            best = t;
        for (std::size_t t = 0; t < T; ++t) targets[t] = t == best ? 1.0 : 0.0;
        break;
      }
    }
  }

  out.manifest.name = "synthetic";
  out.manifest.task = cfg.task;
  out.manifest.record_count = cfg.n;
  out.manifest.created_seed = cfg.seed;
  for (std::size_t t = 0; t < T; ++t) out.manifest.target_names.push_back("t" + std::to_string(t));
  return out;
}

/// Picks noise_std so the generated sample's oracle R^2 equals target_r2.
inline SyntheticCorpus gen_synthetic_with_r2(SyntheticConfig cfg, double target_r2) {
  if (!(target_r2 > 0.0 && target_r2 <= 1.0)) throw ConfigError("target_r2 must lie in (0, 1]");
  cfg.noise_std = 0.0;
  auto clean = gen_synthetic(cfg);
  const std::size_t T = cfg.n_targets;
  double var_sum = 0.0;
  std::vector<double> column(cfg.n);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::uint64_t i = 0; i < cfg.n; ++i) column[i] = clean.signal[i * T + t];
    var_sum += detail::population_variance(column);
  }
  // One noise level for all targets; exact when per-target variances agree,
  // which they do in expectation.
  double mean_var = var_sum / static_cast<double>(T);
  cfg.noise_std = std::sqrt(mean_var * (1.0 / target_r2 - 1.0));
  return gen_synthetic(cfg);
}

// ---------------------------------------------------------------------------
// CSV / JSON-lines loading

namespace detail {

inline std::vector<std::string> parse_csv_row(std::string_view line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  if (quoted) throw FormatError("unterminated quote in CSV row");
  cells.push_back(std::move(cur));
  return cells;
}

/// Splits CSV text into logical rows, honouring newlines inside quotes.
inline std::vector<std::string> csv_rows(std::string_view text) {
  std::vector<std::string> rows;
  std::string cur;
  bool quoted = false;
  for (char c : text) {
    if (c == '"') quoted = !quoted;
    if (c == '\n' && !quoted) {
      if (!cur.empty()) rows.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty() && cur != "\r") rows.push_back(std::move(cur));
  return rows;
}

inline double parse_double(const std::string& s, std::uint64_t id) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    if (s == "nan" || s == "NaN") return std::nan("");
    throw ValidationError("record " + std::to_string(id) + ": bad target value '" + s + "'");
  }
}

}  // namespace detail

struct LoadedRecords {
  std::vector<RawRecord> records;
  std::vector<std::string> target_names;
};

/// Columns: id,text,t0..tk. Header row required.
inline LoadedRecords load_csv(std::string_view text) {
  auto rows = detail::csv_rows(text);
  if (rows.empty()) throw FormatError("empty CSV");
  auto header = detail::parse_csv_row(rows[0]);
  if (header.size() < 3 || header[0] != "id" || header[1] != "text")
    throw FormatError("CSV header must be id,text,<targets...>");
  LoadedRecords out;
  out.target_names.assign(header.begin() + 2, header.end());
  for (std::size_t r = 1; r < rows.size(); ++r) {
    auto cells = detail::parse_csv_row(rows[r]);
    if (cells.size() != header.size())
      throw FormatError("CSV row " + std::to_string(r) + " has " + std::to_string(cells.size()) +
                        " cells, expected " + std::to_string(header.size()));
    RawRecord rec;
    rec.id = std::stoull(cells[0]);
    rec.text = cells[1];
    for (std::size_t c = 2; c < cells.size(); ++c) rec.targets.push_back(detail::parse_double(cells[c], rec.id));
    out.records.push_back(std::move(rec));
  }
  return out;
}

/// One object per line: {"id":..,"text":..,"targets":[..]}.
inline LoadedRecords load_jsonl(std::string_view text) {
  LoadedRecords out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
      RawRecord rec;
      rec.id = j.at("id").get<std::uint64_t>();
      rec.text = j.at("text").get<std::string>();
      for (const auto& v : j.at("targets")) rec.targets.push_back(v.is_null() ? std::nan("") : v.get<double>());
      out.records.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw FormatError("JSON-lines line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!out.records.empty())
    for (std::size_t t = 0; t < out.records.front().targets.size(); ++t)
      out.target_names.push_back("t" + std::to_string(t));
  return out;
}

}  // namespace psyche::corpus

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <unistd.h>

namespace psyche {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define PSYCHE_DEFINE_ERROR(Name) \
  class Name : public Error {     \
   public:                        \
    using Error::Error;           \
  };

PSYCHE_DEFINE_ERROR(ShapeError)
PSYCHE_DEFINE_ERROR(BoundsError)
PSYCHE_DEFINE_ERROR(ConfigError)
PSYCHE_DEFINE_ERROR(ValidationError)
PSYCHE_DEFINE_ERROR(IoError)
PSYCHE_DEFINE_ERROR(FormatError)
PSYCHE_DEFINE_ERROR(FitError)
PSYCHE_DEFINE_ERROR(SolverError)
PSYCHE_DEFINE_ERROR(MetricError)
PSYCHE_DEFINE_ERROR(CheckpointError)
PSYCHE_DEFINE_ERROR(ContractError)

#undef PSYCHE_DEFINE_ERROR

/// Sink for non-fatal diagnostics. Tests swap it out to capture warnings.
using WarningSink = std::function<void(std::string_view)>;

inline WarningSink& warning_sink() {
  static WarningSink sink = [](std::string_view msg) {
    std::cerr << "warning: " << msg << '\n';
  };
  return sink;
}

inline void warn(std::string_view msg) {
  if (warning_sink()) warning_sink()(msg);
}

// ---------------------------------------------------------------------------
// Little-endian byte buffers

class ByteWriter {
 public:
  template <class T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    auto* p = reinterpret_cast<const std::byte*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }

  void put_bytes(std::string_view s) {
    auto* p = reinterpret_cast<const std::byte*>(s.data());
    bytes_.insert(bytes_.end(), p, p + s.size());
  }

  template <class T>
  void put_array(std::span<const T> values) {
    for (const T& v : values) put(v);
  }

  std::size_t size() const { return bytes_.size(); }
  const std::vector<std::byte>& bytes() const { return bytes_; }
  std::vector<std::byte>& bytes() { return bytes_; }

 private:
  std::vector<std::byte> bytes_;
};

template <class T>
T load_le(const std::byte* p) {
  T value;
  std::memcpy(&value, p, sizeof(T));
  return value;
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> data) : data_(data) {}

  template <class T>
  T get() {
    require(sizeof(T));
    T v = load_le<T>(data_.data() + pos_);
    pos_ += sizeof(T);
    return v;
  }

  template <class T>
  std::vector<T> get_array(std::size_t n) {
    std::vector<T> out(n);
    for (auto& v : out) v = get<T>();
    return out;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void require(std::size_t n) const {
    if (pos_ + n > data_.size()) throw FormatError("unexpected end of buffer");
  }

  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Files

namespace fs = std::filesystem;

inline std::vector<std::byte> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path.string());
  auto size = static_cast<std::size_t>(in.tellg());
  std::vector<std::byte> out(size);
  in.seekg(0);
  if (size > 0 && !in.read(reinterpret_cast<char*>(out.data()),
                           static_cast<std::streamsize>(size)))
    throw IoError("short read on " + path.string());
  return out;
}

inline std::string read_text_file(const fs::path& path) {
  auto bytes = read_file(path);
  return {reinterpret_cast<const char*>(bytes.data()), bytes.size()};
}

/// Writes and fsyncs. Does not rename; see write_file_atomic.
inline void write_file_synced(const fs::path& path, std::span<const std::byte> data) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot create " + path.string());
  bool ok = data.empty() || std::fwrite(data.data(), 1, data.size(), f) == data.size();
  ok = ok && std::fflush(f) == 0 && ::fsync(::fileno(f)) == 0;
  ok = (std::fclose(f) == 0) && ok;
  if (!ok) throw IoError("write failed on " + path.string());
}

inline void write_file_synced(const fs::path& path, std::string_view text) {
  write_file_synced(path, std::span(reinterpret_cast<const std::byte*>(text.data()), text.size()));
}

/// Temp file in the destination directory, then rename over the target.
template <class Data>
void write_file_atomic(const fs::path& path, const Data& data) {
  fs::path tmp = path;
  tmp += ".tmp";
  try {
    write_file_synced(tmp, data);
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

// ---------------------------------------------------------------------------
// SHA-256 (OpenSSL EVP)

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
      throw Error("sha256 init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(std::span<const std::byte> data) {
    EVP_DigestUpdate(ctx_, data.data(), data.size());
    return *this;
  }
  Sha256& update(std::string_view s) {
    EVP_DigestUpdate(ctx_, s.data(), s.size());
    return *this;
  }

  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
      out.push_back(digits[md[i] >> 4]);
      out.push_back(digits[md[i] & 0xf]);
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

inline std::string sha256_hex(std::span<const std::byte> data) {
  return Sha256().update(data).hex();
}

inline std::string sha256_hex(std::string_view text) {
  return sha256_hex(std::span(reinterpret_cast<const std::byte*>(text.data()), text.size()));
}

}  // namespace psyche

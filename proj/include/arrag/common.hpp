#pragma once

// Shared plumbing: error type, hashing, deterministic RNG, little-endian
// binary IO and a small static-partition parallel_for.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <type_traits>
#include <vector>

namespace arrag {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written in host order and assume little-endian");

/// Error categories. The CLI maps each to a distinct process exit code.
enum class ErrorCode : int {
  kInvalidArgument = 3,
  kConfig = 4,
  kIo = 5,
  kFormat = 6,
  kHashMismatch = 7,
  kNumeric = 8,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool ok, const std::string& what,
                    ErrorCode code = ErrorCode::kInvalidArgument) {
  if (!ok) throw Error(code, what);
}

// ---------------------------------------------------------------------------
// hashing

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t h = kFnvOffset) {
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= kFnvPrime;
  }
  return h;
}

template <class T>
std::uint64_t fnv1a_of(std::span<const T> values, std::uint64_t h = kFnvOffset) {
  return fnv1a(std::as_bytes(values), h);
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream seed from a master seed and an index.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t s = master ^ (index * 0xd1b54a32d192ed03ULL);
  splitmix64(s);
  return splitmix64(s);
}

/// xoshiro256** seeded through splitmix64. All conversions to floating point
/// are done here so results do not depend on the standard library's
/// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t s = seed;
    for (auto& w : state_) w = splitmix64(s);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = std::rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = std::rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    // Box-Muller, one value per call.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t state_[4];
};

// ---------------------------------------------------------------------------
// binary IO

inline std::size_t align_up(std::size_t n, std::size_t a) { return (n + a - 1) / a * a; }

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw Error(ErrorCode::kIo, "cannot open for writing: " + path);
  }

  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    pos_ += n;
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  template <class T>
  void pod(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    bytes(&v, sizeof(T));
  }
  template <class T>
  void array(std::span<const T> v) {
    static_assert(std::is_trivially_copyable_v<T>);
    bytes(v.data(), v.size_bytes());
  }
  void pad_to(std::size_t alignment) {
    static constexpr char zeros[64] = {};
    std::size_t n = align_up(pos_, alignment) - pos_;
    while (n > 0) {
      const std::size_t chunk = std::min<std::size_t>(n, sizeof(zeros));
      bytes(zeros, chunk);
      n -= chunk;
    }
  }
  void close() {
    out_.flush();
    if (!out_) throw Error(ErrorCode::kIo, "write failed: " + path_);
    out_.close();
  }
  std::size_t position() const { return pos_; }

 private:
  std::string path_;
  std::ofstream out_;
  std::size_t pos_ = 0;
};

/// Reads a whole file into memory and hands out typed fields. Every read
/// names its field so that truncation errors say what was missing.
class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : path_(path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw Error(ErrorCode::kIo, "cannot open for reading: " + path);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    data_.resize(size);
    in.read(reinterpret_cast<char*>(data_.data()), static_cast<std::streamsize>(size));
    if (!in) throw Error(ErrorCode::kIo, "read failed: " + path);
  }

  void expect_magic(std::string_view m, std::string_view what) {
    if (remaining() < m.size() || std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0)
      throw Error(ErrorCode::kFormat,
                  "bad magic in " + std::string(what) + " file (expected \"" + std::string(m) +
                      "\"): " + path_);
    pos_ += m.size();
  }
  template <class T>
  T pod(std::string_view field) {
    static_assert(std::is_trivially_copyable_v<T>);
    T v;
    take(&v, sizeof(T), field);
    return v;
  }
  template <class T>
  void array(std::span<T> out, std::string_view field) {
    static_assert(std::is_trivially_copyable_v<T>);
    take(out.data(), out.size_bytes(), field);
  }
  void skip_to_alignment(std::size_t alignment, std::string_view field) {
    const std::size_t target = align_up(pos_, alignment);
    if (target > data_.size()) truncated(field);
    pos_ = target;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }
  const std::string& path() const { return path_; }

 private:
  void take(void* dst, std::size_t n, std::string_view field) {
    if (remaining() < n) truncated(field);
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }
  [[noreturn]] void truncated(std::string_view field) const {
    throw Error(ErrorCode::kFormat, "truncated " + std::string(field) + ": " + path_);
  }

  std::string path_;
  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// threads

/// Worker count: explicit value if non-zero, else ARRAG_THREADS, else 1.
inline std::size_t resolve_threads(std::size_t requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("ARRAG_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

/// Runs fn(i) for i in [0, n) over contiguous static chunks. Results written
/// by index are therefore independent of the worker count.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  pool.reserve(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, t, &fn, &errors] {
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <class T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace arrag

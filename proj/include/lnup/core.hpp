#pragma once

// Shared primitives: error kinds, strong ids, deterministic hashing/RNG,
// and a small index-parallel helper.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstring>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <string_view>
#include <stdexcept>
#include <thread>
#include <vector>

namespace lnup {

enum class ErrorKind {
  Usage,   // bad flags or config
  Data,    // malformed or inconsistent input data
  Hook,    // external restoration hook failures past tolerance
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error data_error(const std::string& what) { return Error(ErrorKind::Data, what); }
inline Error usage_error(const std::string& what) { return Error(ErrorKind::Usage, what); }

// CLI exit code for an error kind.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return 1;
    case ErrorKind::Data: return 2;
    case ErrorKind::Hook: return 3;
  }
  return 2;
}

// Opaque image identifier. Ordering is byte-wise on the underlying string and
// is the tie-break order used everywhere results are ranked.
class ImageId {
 public:
  ImageId() = default;
  explicit ImageId(std::string v) : value_(std::move(v)) {}

  const std::string& str() const noexcept { return value_; }
  bool empty() const noexcept { return value_.empty(); }

  friend bool operator==(const ImageId&, const ImageId&) = default;
  friend auto operator<=>(const ImageId& a, const ImageId& b) { return a.value_ <=> b.value_; }

 private:
  std::string value_;
};

struct ImageIdHash {
  std::size_t operator()(const ImageId& id) const noexcept {
    return std::hash<std::string>{}(id.str());
  }
};

// 64-bit FNV-1a over raw bytes.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based generator: output i depends only on (key, i), so draws are
// reproducible without carrying mutable state between call sites.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(splitmix64(key)) {}
  CounterRng(std::uint64_t seed, std::string_view stream)
      : key_(splitmix64(splitmix64(seed) ^ fnv1a64(stream))) {}

  std::uint64_t next() { return splitmix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  // Uniform integer in [0, bound) by rejection; bound must be > 0.
  std::uint64_t uniform(std::uint64_t bound) {
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
    std::uint64_t x = next();
    while (x >= limit) x = next();
    return x % bound;
  }

  // Uniform double in [0, 1) with 53 random bits.
  double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Runs body(i) for i in [0, n) on up to `threads` workers. The first exception
// thrown by any worker is rethrown on the caller after all workers join.
template <typename Body>
void parallel_for(std::size_t n, unsigned threads, Body&& body) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mu);
          if (!failure) failure = std::current_exception();
          next.store(n);
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace lnup

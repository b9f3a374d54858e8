#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace posegen {

// Error taxonomy shared by every module. The CLI maps these onto exit codes:
// usage_error -> 2, io_error / divergence_error / unsupported_metric -> 1.
struct io_error : std::runtime_error {
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct usage_error : std::runtime_error {
  explicit usage_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct unsupported_metric : std::runtime_error {
  explicit unsupported_metric(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a loss term leaves the finite / bounded regime during training.
// Carries the offending term name and, when available, the last checkpoint
// that was written before the blow-up.
struct divergence_error : std::runtime_error {
  std::string term;
  std::string last_good_checkpoint;
  divergence_error(const std::string& term_name, const std::string& last_good)
      : std::runtime_error("training diverged on term '" + term_name + "'" +
                           (last_good.empty() ? "" : " (last good checkpoint: " + last_good + ")")),
        term(term_name),
        last_good_checkpoint(last_good) {}
};

inline void check_arg(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// FNV-1a over raw bytes; used for config hashes and content-canonical seeds.
inline std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

}  // namespace posegen

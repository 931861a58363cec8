#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace connloss {

enum class ErrorKind {
  io,
  bad_magic,
  version_mismatch,
  truncated,
  dim_mismatch,
  duplicate_id,
  checksum,
  non_finite,
  invalid_argument,
  out_of_range,
  missing_key,
  numerical,
  diverged,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return "io";
    case ErrorKind::bad_magic: return "bad magic";
    case ErrorKind::version_mismatch: return "version mismatch";
    case ErrorKind::truncated: return "truncated payload";
    case ErrorKind::dim_mismatch: return "dim mismatch";
    case ErrorKind::duplicate_id: return "duplicate id";
    case ErrorKind::checksum: return "checksum mismatch";
    case ErrorKind::non_finite: return "non-finite value";
    case ErrorKind::invalid_argument: return "invalid argument";
    case ErrorKind::out_of_range: return "out of range";
    case ErrorKind::missing_key: return "missing key";
    case ErrorKind::numerical: return "numerical failure";
    case ErrorKind::diverged: return "diverged";
  }
  return "unknown";
}

/// Every failure raised by the toolkit. `kind` lets callers and tests tell
/// distinct failure modes apart without matching on message text; `offset`
/// is set for file-format errors that can point at a byte position.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message,
        std::optional<std::uint64_t> offset = std::nullopt)
      : std::runtime_error(format(message, offset)), kind_(kind), offset_(offset) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::optional<std::uint64_t> offset() const noexcept { return offset_; }

 private:
  static std::string format(const std::string& message, std::optional<std::uint64_t> offset) {
    if (!offset) return message;
    return message + " (at byte " + std::to_string(*offset) + ")";
  }

  ErrorKind kind_;
  std::optional<std::uint64_t> offset_;
};

}  // namespace connloss

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lmrank {

enum class Errc {
  io,
  empty_corpus,
  unknown_token,
  stream_too_short,
  invalid_argument,
  bad_magic,
  version_mismatch,
  truncated,
  invalid_data,
  misalignment,
  oracle_too_large,
  non_finite,
  diverged,
};

std::string_view errc_name(Errc code) noexcept;

/// Every module reports failures through this type; code() identifies the
/// failure class so callers (and tests) never have to parse messages.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace lmrank

#include "lmrank/error.hpp"

namespace lmrank {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::io: return "io error";
    case Errc::empty_corpus: return "empty corpus";
    case Errc::unknown_token: return "unknown token";
    case Errc::stream_too_short: return "stream too short";
    case Errc::invalid_argument: return "invalid argument";
    case Errc::bad_magic: return "bad magic";
    case Errc::version_mismatch: return "version mismatch";
    case Errc::truncated: return "truncated";
    case Errc::invalid_data: return "invalid data";
    case Errc::misalignment: return "misalignment";
    case Errc::oracle_too_large: return "oracle too large";
    case Errc::non_finite: return "non-finite value";
    case Errc::diverged: return "diverged";
  }
  return "error";
}

}  // namespace lmrank

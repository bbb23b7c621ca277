#include "lmrank/rank_ground_truth.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lmrank/error.hpp"

namespace lmrank {

RankGroundTruth::RankGroundTruth(std::size_t positions, std::size_t k_max, std::uint32_t vocab_size)
    : k_max_(k_max),
      vocab_size_(vocab_size),
      lengths_(positions, 0),
      ranks_(positions * k_max, kPadId),
      groups_(positions * k_max, 0) {
  if (k_max == 0 || k_max > 0xFFFF) throw Error(Errc::invalid_argument, "k_max must be in [1, 65535]");
}

std::span<const float> RankGroundTruth::logits(std::size_t t) const {
  if (!logits_) return {};
  return {logits_->data() + t * k_max_, lengths_[t]};
}

std::span<float> RankGroundTruth::logits_row(std::size_t t) {
  if (!logits_) return {};
  return {logits_->data() + t * k_max_, k_max_};
}

bool RankGroundTruth::push(std::size_t t, TokenId id, std::uint16_t group_start) {
  const std::size_t len = lengths_[t];
  if (len >= k_max_) return false;
  ranks_[t * k_max_ + len] = id;
  groups_[t * k_max_ + len] = group_start;
  lengths_[t] = static_cast<std::uint16_t>(len + 1);
  return true;
}

bool RankGroundTruth::contains(std::size_t t, TokenId id) const {
  const auto row = ranks(t);
  return std::find(row.begin(), row.end(), id) != row.end();
}

void RankGroundTruth::enable_logits() {
  if (!logits_) logits_.emplace(ranks_.size(), 0.0f);
}

void RankGroundTruth::validate() const {
  auto fail = [](std::size_t t, const std::string& what) {
    throw Error(Errc::invalid_data, "row " + std::to_string(t) + ": " + what);
  };
  for (std::size_t t = 0; t < positions(); ++t) {
    const std::size_t len = lengths_[t];
    if (len < 1 || len > k_max_) fail(t, "length " + std::to_string(len) + " outside [1, k_max]");
    const auto row = ranks(t);
    const auto grp = groups(t);
    for (std::size_t i = 0; i < len; ++i) {
      if (row[i] >= vocab_size_) fail(t, "id " + std::to_string(row[i]) + " >= vocab_size");
      for (std::size_t j = 0; j < i; ++j)
        if (row[j] == row[i]) fail(t, "duplicate id " + std::to_string(row[i]));
      if (grp[i] > i || grp[grp[i]] != grp[i]) fail(t, "group starts not idempotent");
      if (i > 0 && grp[i] < grp[i - 1]) fail(t, "group starts decrease");
    }
    if (grp[0] != 0) fail(t, "group start of slot 0 must be 0");
    if (logits_) {
      for (float f : logits(t))
        if (!std::isfinite(f)) fail(t, "non-finite teacher logit");
    }
  }
}

void RankGroundTruth::validate_against(const TokenStream& stream) const {
  if (stream.size() != positions())
    throw Error(Errc::misalignment, "ranks have " + std::to_string(positions()) + " rows, stream has " +
                                        std::to_string(stream.size()) + " tokens");
  for (std::size_t t = 0; t < positions(); ++t) {
    if (lengths_[t] == 0 || ranks_[t * k_max_] != stream.ids[t])
      throw Error(Errc::misalignment, "rank row " + std::to_string(t) + " does not start with the stream token");
  }
}

}  // namespace lmrank

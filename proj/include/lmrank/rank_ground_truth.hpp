#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "lmrank/corpus.hpp"

namespace lmrank {

inline constexpr TokenId kPadId = 0xFFFFFFFFu;

/// Per-position top-k rank targets. Row t holds the ground-truth id at slot 0
/// followed by weakly ordered continuations; groups[t][i] is the slot index of
/// the first member of slot i's weak-order group. Rows are padded to k_max
/// with kPadId; lengths are authoritative.
class RankGroundTruth {
 public:
  RankGroundTruth() = default;
  RankGroundTruth(std::size_t positions, std::size_t k_max, std::uint32_t vocab_size);

  std::size_t positions() const noexcept { return lengths_.size(); }
  std::size_t k_max() const noexcept { return k_max_; }
  std::uint32_t vocab_size() const noexcept { return vocab_size_; }
  bool has_logits() const noexcept { return logits_.has_value(); }

  std::size_t length(std::size_t t) const { return lengths_[t]; }
  std::span<const TokenId> ranks(std::size_t t) const { return {ranks_.data() + t * k_max_, lengths_[t]}; }
  std::span<const std::uint16_t> groups(std::size_t t) const {
    return {groups_.data() + t * k_max_, lengths_[t]};
  }
  std::span<const float> logits(std::size_t t) const;

  // Full padded rows, for writers and in-place builders.
  std::span<TokenId> ranks_row(std::size_t t) { return {ranks_.data() + t * k_max_, k_max_}; }
  std::span<std::uint16_t> groups_row(std::size_t t) { return {groups_.data() + t * k_max_, k_max_}; }
  std::span<float> logits_row(std::size_t t);
  void set_length(std::size_t t, std::size_t len) { lengths_[t] = static_cast<std::uint16_t>(len); }

  /// Appends an id at the end of row t. Returns false when the row is full.
  bool push(std::size_t t, TokenId id, std::uint16_t group_start);
  bool contains(std::size_t t, TokenId id) const;

  void enable_logits();
  void drop_logits() { logits_.reset(); }

  const std::vector<std::uint16_t>& raw_lengths() const noexcept { return lengths_; }
  const std::vector<TokenId>& raw_ranks() const noexcept { return ranks_; }
  const std::vector<std::uint16_t>& raw_groups() const noexcept { return groups_; }
  const std::optional<std::vector<float>>& raw_logits() const noexcept { return logits_; }
  std::vector<std::uint16_t>& raw_lengths() noexcept { return lengths_; }
  std::vector<TokenId>& raw_ranks() noexcept { return ranks_; }
  std::vector<std::uint16_t>& raw_groups() noexcept { return groups_; }
  std::optional<std::vector<float>>& raw_logits() noexcept { return logits_; }

  /// Checks every documented invariant except GT alignment (needs a stream);
  /// throws Error(invalid_data) on the first violation.
  void validate() const;
  /// Checks ranks(t)[0] == stream.ids[t] for every t.
  void validate_against(const TokenStream& stream) const;

  friend bool operator==(const RankGroundTruth&, const RankGroundTruth&) = default;

 private:
  std::size_t k_max_ = 0;
  std::uint32_t vocab_size_ = 0;
  std::vector<std::uint16_t> lengths_;
  std::vector<TokenId> ranks_;
  std::vector<std::uint16_t> groups_;
  std::optional<std::vector<float>> logits_;
};

}  // namespace lmrank

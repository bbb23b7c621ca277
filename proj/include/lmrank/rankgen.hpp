#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmrank/corpus.hpp"
#include "lmrank/rank_ground_truth.hpp"

namespace lmrank {

/// A context window: `past` tokens before the target and `future` tokens
/// after it. Written "2p-1f" (or "1p" when future == 0).
struct ContextSchema {
  std::uint32_t past = 1;
  std::uint32_t future = 0;

  std::string label() const;
  friend bool operator==(const ContextSchema&, const ContextSchema&) = default;
};

/// True when a precedes b in consumption order: more past first, then more future.
inline bool schema_before(const ContextSchema& a, const ContextSchema& b) {
  return a.past != b.past ? a.past > b.past : a.future > b.future;
}

enum class OverflowMode {
  discard,  // a context that ever sees cutoff_q distinct continuations contributes nothing
  cap,      // keep the first cutoff_q - 1 distinct continuations
};

OverflowMode parse_overflow_mode(std::string_view name);
std::string_view overflow_mode_name(OverflowMode mode);

struct RankBuildConfig {
  std::vector<ContextSchema> schemas;
  std::uint32_t cutoff_q = 10;
  std::size_t k_max = 10;
  OverflowMode overflow = OverflowMode::discard;
  unsigned jobs = 1;

  void validate() const;
};

struct BranchingSet {
  std::vector<TokenId> members;  // insertion order
  bool overflowed = false;
};

/// All contexts of one schema seen in the stream, mapped to their branching sets.
class ContextTable {
 public:
  using Key = std::u32string;

  explicit ContextTable(ContextSchema schema) : schema_(schema) {}

  const ContextSchema& schema() const noexcept { return schema_; }
  std::size_t size() const noexcept { return sets_.size(); }

  /// Key of the window around position t, or false when the window leaves [0, T).
  static bool window_key(std::span<const TokenId> ids, std::size_t t, ContextSchema schema, Key& key);

  const BranchingSet* find(const Key& key) const;
  BranchingSet& slot(const Key& key) { return sets_[key]; }

  const std::unordered_map<Key, BranchingSet>& sets() const noexcept { return sets_; }

 private:
  ContextSchema schema_;
  std::unordered_map<Key, BranchingSet> sets_;
};

/// Every (p, f) with 1 <= p <= max_past and 0 <= f <= max_future, in
/// consumption order: 5p-4f, 5p-3f, ..., 1p-1f, 1p.
std::vector<ContextSchema> enumerate_schemas(std::uint32_t max_past, std::uint32_t max_future);

/// Pass one: scans the stream once for a single schema.
ContextTable collect_orders(const TokenStream& stream, ContextSchema schema, std::uint32_t cutoff_q,
                            OverflowMode overflow = OverflowMode::discard);

/// Pass two: GT first, then each schema's branching set (minus words already
/// present) as one weak-order group, until k_max slots are filled.
RankGroundTruth merge_orders(const TokenStream& stream, std::span<const ContextTable> tables,
                             std::span<const ContextSchema> schemas, std::size_t k_max);

RankGroundTruth build_ranks(const TokenStream& stream, const RankBuildConfig& config);

/// Independent single-pass reference used to check build_ranks.
inline constexpr std::size_t kOracleMaxTokens = 100000;
RankGroundTruth brute_force_ranks(const TokenStream& stream, const RankBuildConfig& config);

/// Grid view of the rank rows around `position`: one column per stream
/// position, GT on the first line, weak-order groups wrapped in braces.
std::string render_branching_set(const RankGroundTruth& ranks, const Vocabulary& vocab, std::size_t position,
                                 std::size_t context_width);

}  // namespace lmrank

#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include "lmrank/corpus.hpp"
#include "lmrank/rank_ground_truth.hpp"
#include "lmrank/student.hpp"

namespace lmrank {

struct PerplexityReport {
  double perplexity = 0.0;
  double mean_ce = 0.0;
  std::size_t scored = 0;
  std::size_t skipped = 0;  // positions without a full context window
};

/// exp(mean CE) over every position t >= context_len. rows_per_chunk only
/// bounds memory; the result does not depend on it.
template <typename Scalar>
PerplexityReport perplexity(const StudentParams<Scalar>& params, const TokenStream& stream,
                            std::size_t rows_per_chunk = 256);

struct TopKAccuracy {
  std::size_t k = 0;
  double accuracy = 0.0;
};

/// Fraction of scored positions whose GT is among the k largest logits; equal
/// logits are ordered by lower id first. ks must be ascending.
template <typename Scalar>
std::vector<TopKAccuracy> topk_accuracy(const StudentParams<Scalar>& params, const TokenStream& stream,
                                        std::span<const std::size_t> ks, std::size_t rows_per_chunk = 256);

struct FrequencyRankRow {
  std::size_t word_rank = 0;  // 1-based, by GT frequency desc then id asc
  TokenId id = 0;
  double gt_freq = 0.0;
  double topk_freq = 0.0;     // top-k occurrences scaled by 1/k
  double bin_avg = 0.0;       // mean topk_freq within the word's log-rank bin
};

/// The three frequency-rank series: GT frequency per word type, the 1/k
/// scaled top-k occurrence count (k = longest row), and log-spaced binned
/// averages of the latter. Types that occur neither as GT nor in any row are
/// omitted; types that never occur as GT rank after all GT types.
std::vector<FrequencyRankRow> rank_frequency_stats(const RankGroundTruth& ranks, const TokenStream& stream,
                                                   std::size_t n_bins);

/// CSV with header "word_rank,gt_freq,topk_freq,bin_avg".
void write_frequency_csv(std::span<const FrequencyRankRow> rows, std::ostream& out);

}  // namespace lmrank

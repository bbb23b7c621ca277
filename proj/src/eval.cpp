#include "lmrank/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "lmrank/error.hpp"

namespace lmrank {

namespace {

// Runs the student over every scorable position in chunks and hands each
// row's logits (as a span) plus the GT id to fn, in stream order.
template <typename Scalar, typename Fn>
std::size_t for_each_scored(const StudentParams<Scalar>& params, const TokenStream& stream, std::size_t rows_per_chunk,
                            Fn&& fn) {
  const std::size_t n = params.config.context_len;
  if (stream.size() <= n)
    throw Error(Errc::stream_too_short, "no position has a full context window of " + std::to_string(n));
  if (stream.vocab_size > params.config.vocab_size)
    throw Error(Errc::misalignment, "stream vocabulary is larger than the student's");
  rows_per_chunk = std::max<std::size_t>(1, rows_per_chunk);
  std::vector<TokenId> contexts;
  ForwardCache<Scalar> cache;
  std::vector<double> logits(params.config.vocab_size);
  std::size_t scored = 0;
  for (std::size_t start = n; start < stream.size(); start += rows_per_chunk) {
    const std::size_t end = std::min(stream.size(), start + rows_per_chunk);
    contexts.clear();
    for (std::size_t t = start; t < end; ++t)
      contexts.insert(contexts.end(), stream.ids.begin() + static_cast<std::ptrdiff_t>(t - n),
                      stream.ids.begin() + static_cast<std::ptrdiff_t>(t));
    forward(params, contexts, cache);
    for (std::size_t t = start; t < end; ++t) {
      const auto r = static_cast<Eigen::Index>(t - start);
      for (std::size_t v = 0; v < logits.size(); ++v)
        logits[v] = static_cast<double>(cache.logits(r, static_cast<Eigen::Index>(v)));
      fn(std::span<const double>(logits), stream.ids[t]);
      ++scored;
    }
  }
  return scored;
}

}  // namespace

template <typename Scalar>
PerplexityReport perplexity(const StudentParams<Scalar>& params, const TokenStream& stream,
                            std::size_t rows_per_chunk) {
  double total = 0.0;
  PerplexityReport report;
  report.scored = for_each_scored(params, stream, rows_per_chunk, [&](std::span<const double> w, TokenId gt) {
    double mx = *std::max_element(w.begin(), w.end());
    double sum = 0.0;
    for (double x : w) sum += std::exp(x - mx);
    total += std::log(sum) + mx - w[gt];
  });
  report.skipped = stream.size() - report.scored;
  report.mean_ce = total / static_cast<double>(report.scored);
  report.perplexity = std::exp(report.mean_ce);
  return report;
}

template <typename Scalar>
std::vector<TopKAccuracy> topk_accuracy(const StudentParams<Scalar>& params, const TokenStream& stream,
                                        std::span<const std::size_t> ks, std::size_t rows_per_chunk) {
  if (ks.empty()) throw Error(Errc::invalid_argument, "no k values");
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] == 0 || ks[i] > params.config.vocab_size)
      throw Error(Errc::invalid_argument, "k=" + std::to_string(ks[i]) + " outside [1, |V|]");
    if (i > 0 && ks[i] <= ks[i - 1]) throw Error(Errc::invalid_argument, "ks must be strictly ascending");
  }
  std::vector<std::size_t> hits(ks.size(), 0);
  const std::size_t scored = for_each_scored(params, stream, rows_per_chunk, [&](std::span<const double> w, TokenId gt) {
    // 0-based rank of the GT under (logit desc, id asc).
    std::size_t rank = 0;
    const double g = w[gt];
    for (std::size_t v = 0; v < w.size(); ++v)
      if (w[v] > g || (w[v] == g && v < gt)) ++rank;
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (rank < ks[i]) ++hits[i];
  });
  std::vector<TopKAccuracy> out;
  for (std::size_t i = 0; i < ks.size(); ++i)
    out.push_back({ks[i], static_cast<double>(hits[i]) / static_cast<double>(scored)});
  return out;
}

std::vector<FrequencyRankRow> rank_frequency_stats(const RankGroundTruth& ranks, const TokenStream& stream,
                                                   std::size_t n_bins) {
  if (ranks.positions() != stream.size())
    throw Error(Errc::misalignment, "ranks have " + std::to_string(ranks.positions()) + " rows, stream has " +
                                        std::to_string(stream.size()));
  if (n_bins == 0) throw Error(Errc::invalid_argument, "n_bins must be >= 1");
  const std::size_t V = std::max<std::size_t>(stream.vocab_size, ranks.vocab_size());
  std::vector<double> gt(V, 0.0), topk(V, 0.0);
  std::size_t k = 1;
  for (std::size_t t = 0; t < stream.size(); ++t) {
    gt[stream.ids[t]] += 1.0;
    k = std::max(k, ranks.length(t));
    for (TokenId id : ranks.ranks(t)) topk[id] += 1.0;
  }
  for (double& x : topk) x /= static_cast<double>(k);

  std::vector<TokenId> types;
  for (TokenId v = 0; v < V; ++v)
    if (gt[v] > 0.0 || topk[v] > 0.0) types.push_back(v);
  std::sort(types.begin(), types.end(), [&](TokenId a, TokenId b) { return gt[a] != gt[b] ? gt[a] > gt[b] : a < b; });

  std::vector<FrequencyRankRow> rows(types.size());
  for (std::size_t i = 0; i < types.size(); ++i) rows[i] = {i + 1, types[i], gt[types[i]], topk[types[i]], 0.0};

  // Bins are equal-width in log(word_rank) over [1, R].
  const double span = std::log(static_cast<double>(rows.size()) + 1.0);
  auto bin_of = [&](std::size_t rank) {
    const auto b = static_cast<std::size_t>(static_cast<double>(n_bins) * std::log(static_cast<double>(rank)) / span);
    return std::min(b, n_bins - 1);
  };
  std::vector<double> sum(n_bins, 0.0);
  std::vector<std::size_t> count(n_bins, 0);
  for (const auto& r : rows) {
    sum[bin_of(r.word_rank)] += r.topk_freq;
    ++count[bin_of(r.word_rank)];
  }
  for (auto& r : rows) r.bin_avg = sum[bin_of(r.word_rank)] / static_cast<double>(count[bin_of(r.word_rank)]);
  return rows;
}

void write_frequency_csv(std::span<const FrequencyRankRow> rows, std::ostream& out) {
  out << "word_rank,gt_freq,topk_freq,bin_avg\n";
  out << std::setprecision(17);
  for (const auto& r : rows) out << r.word_rank << ',' << r.gt_freq << ',' << r.topk_freq << ',' << r.bin_avg << '\n';
}

template PerplexityReport perplexity<float>(const StudentParamsF&, const TokenStream&, std::size_t);
template PerplexityReport perplexity<double>(const StudentParamsD&, const TokenStream&, std::size_t);
template std::vector<TopKAccuracy> topk_accuracy<float>(const StudentParamsF&, const TokenStream&,
                                                        std::span<const std::size_t>, std::size_t);
template std::vector<TopKAccuracy> topk_accuracy<double>(const StudentParamsD&, const TokenStream&,
                                                         std::span<const std::size_t>, std::size_t);

}  // namespace lmrank

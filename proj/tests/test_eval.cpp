#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "lmrank/error.hpp"
#include "lmrank/eval.hpp"
#include "lmrank/loss.hpp"
#include "lmrank/rankgen.hpp"
#include "lmrank/teacherio.hpp"
#include "test_util.hpp"

using namespace lmrank;
using namespace testutil;

namespace {

StudentConfig small(std::uint32_t V, double scale = 0.3) {
  StudentConfig c;
  c.context_len = 2;
  c.embed_dim = 3;
  c.hidden_dim = 4;
  c.vocab_size = V;
  c.init_scale = scale;
  c.seed = 5;
  return c;
}

TokenStream random_stream(std::mt19937_64& rng, std::size_t T, std::uint32_t V) {
  TokenStream s;
  s.vocab_size = V;
  for (std::size_t i = 0; i < T; ++i) s.ids.push_back(static_cast<TokenId>(uniform(rng, 0, V - 1)));
  return s;
}

}  // namespace

TEST(Perplexity, ZeroParamsGiveVocabularySize) {
  std::mt19937_64 rng(1);
  const TokenStream s = random_stream(rng, 50, 17);
  const PerplexityReport r = perplexity(init_params(small(17, 0.0)), s);
  EXPECT_NEAR(r.perplexity, 17.0, 1e-9);
  EXPECT_EQ(r.scored, 48u);
  EXPECT_EQ(r.skipped, 2u);
}

TEST(Perplexity, LogIsMeanCrossEntropy) {
  std::mt19937_64 rng(2);
  const TokenStream s = random_stream(rng, 40, 9);
  const StudentParamsD p = init_params(small(9, 1.0)).cast<double>();
  double total = 0.0;
  for (std::size_t t = 2; t < s.size(); ++t) {
    const auto out = forward(p, std::span<const TokenId>(s.ids).subspan(t - 2, 2));
    total += naive_ce(out.logits, s.ids[t]);
  }
  const PerplexityReport r = perplexity(p, s, 7);
  EXPECT_NEAR(r.mean_ce, total / 38.0, 1e-12);
  EXPECT_NEAR(std::log(r.perplexity), r.mean_ce, 1e-12);
  EXPECT_EQ(perplexity(p, s, 1).mean_ce, perplexity(p, s, 1000).mean_ce);
}

TEST(Perplexity, UniformShiftOfOutputBiasIsInvisible) {
  std::mt19937_64 rng(3);
  const TokenStream s = random_stream(rng, 30, 12);
  StudentParamsD p = init_params(small(12, 0.8)).cast<double>();
  const double base = perplexity(p, s).perplexity;
  p.b2.array() += 42.0;
  EXPECT_NEAR(perplexity(p, s).perplexity, base, 1e-9 * base);
}

TEST(Perplexity, Errors) {
  const StudentParamsF p = init_params(small(5));
  EXPECT_THROW(perplexity(p, TokenStream{{0, 1}, 5}), Error);
  EXPECT_THROW(perplexity(p, TokenStream{{0, 1, 2}, 6}), Error);
}

TEST(TopK, FullVocabularyIsCertainAndCurveIsMonotone) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 10; ++rep) {
    const TokenStream s = random_stream(rng, 100, 8);
    const StudentParamsF p = init_params(small(8, 0.7));
    const std::vector<std::size_t> ks{1, 2, 3, 5, 8};
    const auto acc = topk_accuracy(p, s, std::span<const std::size_t>(ks));
    ASSERT_EQ(acc.size(), ks.size());
    EXPECT_EQ(acc.back().accuracy, 1.0);
    for (std::size_t i = 1; i < acc.size(); ++i) EXPECT_GE(acc[i].accuracy, acc[i - 1].accuracy);
  }
}

TEST(TopK, TiesGoToTheLowerId) {
  // All-zero logits: only id 0 is in the top 1.
  const TokenStream s{{3, 3, 0, 3, 0, 1}, 4};
  const std::vector<std::size_t> ks{1, 2};
  const auto acc = topk_accuracy(init_params(small(4, 0.0)), s, std::span<const std::size_t>(ks));
  EXPECT_DOUBLE_EQ(acc[0].accuracy, 0.5);
  EXPECT_DOUBLE_EQ(acc[1].accuracy, 0.75);
}

TEST(TopK, Errors) {
  const StudentParamsF p = init_params(small(4));
  const TokenStream s{{0, 1, 2, 3}, 4};
  for (const std::vector<std::size_t>& ks : {std::vector<std::size_t>{2, 1}, {0}, {5}, {2, 2}})
    EXPECT_THROW(topk_accuracy(p, s, std::span<const std::size_t>(ks)), Error);
}

TEST(Stats, GtOnlyRowsReproduceTheGtSeries) {
  const TokenStream s = letters("a b a c a b d a");
  RankBuildConfig cfg;
  cfg.schemas = {};
  const RankGroundTruth r = build_ranks(s, cfg);
  for (const auto& row : rank_frequency_stats(r, s, 3)) EXPECT_EQ(row.topk_freq, row.gt_freq);
}

TEST(Stats, MassAndOrdering) {
  std::mt19937_64 rng(5);
  const TokenStream s = random_stream(rng, 500, 40);
  const RankGroundTruth r = random_teacher(s, 6, 40, 11);
  const auto rows = rank_frequency_stats(r, s, 8);
  double gt = 0.0, topk = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    gt += rows[i].gt_freq;
    topk += rows[i].topk_freq;
    EXPECT_EQ(rows[i].word_rank, i + 1);
    if (i) EXPECT_GE(rows[i - 1].gt_freq, rows[i].gt_freq);
  }
  EXPECT_DOUBLE_EQ(gt, 500.0);
  EXPECT_NEAR(topk, 500.0, 1e-9);  // full rows: k entries each, scaled by 1/k
}

TEST(Stats, BinsAverageWithinLogRankBuckets) {
  std::vector<std::string> toks;
  for (char c = 'a'; c < 'a' + 20; ++c) toks.push_back(std::string(1, c));
  std::string text;
  for (const auto& t : toks) text += t + " ";
  const TokenStream s = letters(text);
  RankBuildConfig cfg;
  cfg.schemas = {};
  const auto rows = rank_frequency_stats(build_ranks(s, cfg), s, 4);
  ASSERT_EQ(rows.size(), 20u);
  for (const auto& row : rows) EXPECT_DOUBLE_EQ(row.bin_avg, 1.0);

  std::ostringstream out;
  write_frequency_csv(rows, out);
  std::istringstream lines(out.str());
  std::string header, first;
  std::getline(lines, header);
  std::getline(lines, first);
  EXPECT_EQ(header, "word_rank,gt_freq,topk_freq,bin_avg");
  EXPECT_EQ(std::count(first.begin(), first.end(), ','), 3);
}

TEST(Stats, Errors) {
  const TokenStream s = letters("a b c");
  RankBuildConfig cfg;
  cfg.schemas = {};
  const RankGroundTruth r = build_ranks(s, cfg);
  EXPECT_THROW(rank_frequency_stats(r, letters("a b"), 3), Error);
  EXPECT_THROW(rank_frequency_stats(r, s, 0), Error);
}

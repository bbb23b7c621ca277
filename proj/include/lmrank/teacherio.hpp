#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

#include "lmrank/corpus.hpp"
#include "lmrank/rank_ground_truth.hpp"

namespace lmrank {

/*
 * RKGT v1 binary layout, all integers and floats little-endian:
 *
 *   header (23 bytes)
 *     char[4]  magic "RKGT"
 *     u32      version (1)
 *     u64      T, number of positions
 *     u16      k_max
 *     u32      vocab_size
 *     u8       flags; bit 0 set when the logits block is present, other bits zero
 *   body
 *     u16[T]          lengths L
 *     u32[T][k_max]   rank ids R, row-major, padded with 0xFFFFFFFF
 *     u16[T][k_max]   group-start indices O
 *     f32[T][k_max]   teacher logits F (only when flags bit 0 is set)
 *
 * JSON-lines interchange: line 1 is a header object
 *   {"format":"rkgt-jsonl","version":1,"T":..,"k_max":..,"vocab_size":..,"comment":".."}
 * followed by one object per position
 *   {"t":0,"ranks":["the","a"],"groups":[0,1],"logits":[3.5,1.25]}
 * where "logits" appears only when the file carries teacher logits.
 */
inline constexpr char kRankMagic[4] = {'R', 'K', 'G', 'T'};
inline constexpr std::uint32_t kRankFormatVersion = 1;
inline constexpr std::string_view kJsonlFormat = "rkgt-jsonl";

void write_ranks(const RankGroundTruth& ranks, std::ostream& out);
void write_ranks(const RankGroundTruth& ranks, const std::filesystem::path& path);
RankGroundTruth read_ranks(std::istream& in);
RankGroundTruth read_ranks(const std::filesystem::path& path);

void write_ranks_jsonl(const RankGroundTruth& ranks, const Vocabulary& vocab, std::ostream& out,
                       std::string_view comment = {});
void write_ranks_jsonl(const RankGroundTruth& ranks, const Vocabulary& vocab, const std::filesystem::path& path,
                       std::string_view comment = {});
/// Ingests externally produced teacher ranks; tokens are mapped through vocab.
RankGroundTruth read_ranks_jsonl(std::istream& in, const Vocabulary& vocab);
RankGroundTruth read_ranks_jsonl(const std::filesystem::path& path, const Vocabulary& vocab);
/// The "comment" field of a JSON-lines header.
std::string read_jsonl_comment(const std::filesystem::path& path);

/// Moves each row's ground truth to rank 1, shifting the ranks above it down
/// by one. A missing ground truth is inserted with the row's maximum logit,
/// dropping the last entry when the row is full. Rows must be strongly ordered.
RankGroundTruth float_gt_to_top(const RankGroundTruth& teacher, const TokenStream& stream);

/// Identifies the sampler so random-teacher files can be regenerated elsewhere:
/// std::mt19937_64 seeded with the user seed, bounded draws by modulo with
/// rejection of the top partial range, duplicates redrawn.
inline constexpr std::string_view kRandomTeacherPrng = "mt19937_64/modreject/v1";

RankGroundTruth random_teacher(const TokenStream& stream, std::size_t k, std::uint32_t vocab_size,
                               std::uint64_t seed);

}  // namespace lmrank

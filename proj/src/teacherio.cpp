#include "lmrank/teacherio.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "lmrank/error.hpp"

namespace lmrank {

namespace {

constexpr std::size_t kHeaderBytes = 4 + 4 + 8 + 2 + 4 + 1;

template <typename U>
void put_le(std::string& buf, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  return v;
}

// Reads exactly n bytes or reports truncation.
void read_exact(std::istream& in, unsigned char* dst, std::size_t n, const char* what) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw Error(Errc::truncated, std::string("short ") + what + " block");
}

}  // namespace

void write_ranks(const RankGroundTruth& ranks, std::ostream& out) {
  const std::size_t T = ranks.positions();
  const std::size_t k = ranks.k_max();
  std::string buf;
  buf.reserve(kHeaderBytes + T * 2 + T * k * (4 + 2 + (ranks.has_logits() ? 4 : 0)));
  buf.append(kRankMagic, 4);
  put_le<std::uint32_t>(buf, kRankFormatVersion);
  put_le<std::uint64_t>(buf, T);
  put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(k));
  put_le<std::uint32_t>(buf, ranks.vocab_size());
  buf.push_back(static_cast<char>(ranks.has_logits() ? 1 : 0));
  for (auto len : ranks.raw_lengths()) put_le<std::uint16_t>(buf, len);
  for (auto id : ranks.raw_ranks()) put_le<std::uint32_t>(buf, id);
  for (auto g : ranks.raw_groups()) put_le<std::uint16_t>(buf, g);
  if (const auto& logits = ranks.raw_logits())
    for (float f : *logits) put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(f));
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error(Errc::io, "rank file write failed");
}

void write_ranks(const RankGroundTruth& ranks, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  write_ranks(ranks, out);
}

RankGroundTruth read_ranks(std::istream& in) {
  std::array<unsigned char, kHeaderBytes> head{};
  in.read(reinterpret_cast<char*>(head.data()), 4);
  if (in.gcount() < 4 || std::memcmp(head.data(), kRankMagic, 4) != 0)
    throw Error(Errc::bad_magic, "not an RKGT file");
  read_exact(in, head.data() + 4, kHeaderBytes - 4, "header");

  const auto version = get_le<std::uint32_t>(head.data() + 4);
  if (version != kRankFormatVersion)
    throw Error(Errc::version_mismatch, "RKGT version " + std::to_string(version) + ", expected " +
                                            std::to_string(kRankFormatVersion));
  const auto T = get_le<std::uint64_t>(head.data() + 8);
  const auto k = get_le<std::uint16_t>(head.data() + 16);
  const auto vocab_size = get_le<std::uint32_t>(head.data() + 18);
  const auto flags = head[22];
  if (k == 0) throw Error(Errc::invalid_data, "k_max is 0");
  if ((flags & ~1u) != 0) throw Error(Errc::invalid_data, "unknown flag bits");
  // Reject absurd sizes before allocating.
  if (T > (std::uint64_t{1} << 40) / k) throw Error(Errc::invalid_data, "implausible T");

  RankGroundTruth ranks(static_cast<std::size_t>(T), k, vocab_size);
  const std::size_t cells = static_cast<std::size_t>(T) * k;
  std::vector<unsigned char> raw;

  raw.resize(static_cast<std::size_t>(T) * 2);
  read_exact(in, raw.data(), raw.size(), "lengths");
  for (std::size_t t = 0; t < T; ++t) {
    const auto len = get_le<std::uint16_t>(raw.data() + 2 * t);
    if (len > k) throw Error(Errc::invalid_data, "row " + std::to_string(t) + " length exceeds k_max");
    ranks.raw_lengths()[t] = len;
  }

  raw.resize(cells * 4);
  read_exact(in, raw.data(), raw.size(), "ranks");
  for (std::size_t i = 0; i < cells; ++i) ranks.raw_ranks()[i] = get_le<std::uint32_t>(raw.data() + 4 * i);

  raw.resize(cells * 2);
  read_exact(in, raw.data(), raw.size(), "groups");
  for (std::size_t i = 0; i < cells; ++i) ranks.raw_groups()[i] = get_le<std::uint16_t>(raw.data() + 2 * i);

  if (flags & 1u) {
    ranks.enable_logits();
    raw.resize(cells * 4);
    read_exact(in, raw.data(), raw.size(), "logits");
    auto& logits = *ranks.raw_logits();
    for (std::size_t i = 0; i < cells; ++i)
      logits[i] = std::bit_cast<float>(get_le<std::uint32_t>(raw.data() + 4 * i));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw Error(Errc::invalid_data, "trailing bytes after body");

  ranks.validate();
  return ranks;
}

RankGroundTruth read_ranks(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  return read_ranks(in);
}

void write_ranks_jsonl(const RankGroundTruth& ranks, const Vocabulary& vocab, std::ostream& out,
                       std::string_view comment) {
  using nlohmann::json;
  json header = {{"format", kJsonlFormat},
                 {"version", kRankFormatVersion},
                 {"T", ranks.positions()},
                 {"k_max", ranks.k_max()},
                 {"vocab_size", ranks.vocab_size()},
                 {"comment", comment}};
  out << header.dump() << '\n';
  for (std::size_t t = 0; t < ranks.positions(); ++t) {
    json row;
    row["t"] = t;
    json words = json::array();
    for (TokenId id : ranks.ranks(t)) words.push_back(vocab.token(id));
    row["ranks"] = std::move(words);
    const auto g = ranks.groups(t);
    row["groups"] = std::vector<int>(g.begin(), g.end());
    if (ranks.has_logits()) {
      const auto f = ranks.logits(t);
      row["logits"] = std::vector<double>(f.begin(), f.end());
    }
    out << row.dump() << '\n';
  }
  if (!out) throw Error(Errc::io, "jsonl write failed");
}

void write_ranks_jsonl(const RankGroundTruth& ranks, const Vocabulary& vocab, const std::filesystem::path& path,
                       std::string_view comment) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  write_ranks_jsonl(ranks, vocab, out, comment);
}

RankGroundTruth read_ranks_jsonl(std::istream& in, const Vocabulary& vocab) {
  using nlohmann::json;
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::truncated, "missing jsonl header");
  try {
    const json header = json::parse(line);
    if (header.value("format", "") != kJsonlFormat) throw Error(Errc::bad_magic, "not an rkgt-jsonl file");
    if (header.at("version").get<std::uint32_t>() != kRankFormatVersion)
      throw Error(Errc::version_mismatch, "unsupported jsonl version");
    const auto T = header.at("T").get<std::size_t>();
    const auto k = header.at("k_max").get<std::size_t>();
    RankGroundTruth ranks(T, k, static_cast<std::uint32_t>(vocab.size()));

    for (std::size_t t = 0; t < T; ++t) {
      if (!std::getline(in, line)) throw Error(Errc::truncated, "jsonl ends at row " + std::to_string(t));
      const json row = json::parse(line);
      if (row.at("t").get<std::size_t>() != t) throw Error(Errc::invalid_data, "rows out of order at " + std::to_string(t));
      const auto& words = row.at("ranks");
      const auto& groups = row.at("groups");
      if (words.size() != groups.size() || words.empty() || words.size() > k)
        throw Error(Errc::invalid_data, "row " + std::to_string(t) + " has bad ranks/groups sizes");
      for (std::size_t i = 0; i < words.size(); ++i) {
        const auto tok = words[i].get<std::string>();
        auto id = vocab.find(tok);
        if (!id) id = vocab.unk_id();
        if (!id) throw Error(Errc::unknown_token, "'" + tok + "' in jsonl row " + std::to_string(t));
        ranks.push(t, *id, groups[i].get<std::uint16_t>());
      }
      if (row.contains("logits")) {
        const auto& logits = row.at("logits");
        if (logits.size() != words.size()) throw Error(Errc::invalid_data, "logits size mismatch");
        ranks.enable_logits();
        auto dst = ranks.logits_row(t);
        for (std::size_t i = 0; i < logits.size(); ++i) dst[i] = static_cast<float>(logits[i].get<double>());
      } else if (ranks.has_logits()) {
        throw Error(Errc::invalid_data, "row " + std::to_string(t) + " lacks logits");
      }
    }
    ranks.validate();
    return ranks;
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_data, std::string("jsonl parse: ") + e.what());
  }
}

RankGroundTruth read_ranks_jsonl(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  return read_ranks_jsonl(in, vocab);
}

std::string read_jsonl_comment(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::string line;
  if (!in || !std::getline(in, line)) throw Error(Errc::io, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(line).value("comment", "");
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_data, e.what());
  }
}

RankGroundTruth float_gt_to_top(const RankGroundTruth& teacher, const TokenStream& stream) {
  if (teacher.positions() != stream.size())
    throw Error(Errc::misalignment, "teacher has " + std::to_string(teacher.positions()) + " rows, stream has " +
                                        std::to_string(stream.size()));
  RankGroundTruth out = teacher;
  const std::size_t k = out.k_max();
  for (std::size_t t = 0; t < out.positions(); ++t) {
    const std::size_t len = out.length(t);
    auto ids = out.ranks_row(t);
    auto groups = out.groups_row(t);
    auto logits = out.logits_row(t);
    for (std::size_t i = 0; i < len; ++i)
      if (groups[i] != i) throw Error(Errc::invalid_data, "teacher row " + std::to_string(t) + " is not strongly ordered");

    const TokenId gt = stream.ids[t];
    const auto pos = static_cast<std::size_t>(std::find(ids.begin(), ids.begin() + len, gt) - ids.begin());
    if (pos == 0) continue;
    if (pos < len) {
      std::rotate(ids.begin(), ids.begin() + pos, ids.begin() + pos + 1);
      if (!logits.empty()) std::rotate(logits.begin(), logits.begin() + pos, logits.begin() + pos + 1);
      continue;
    }
    // Absent: insert at rank 1, keeping the row's best logit for it.
    const std::size_t new_len = std::min(len + 1, k);
    float top = 0.0f;
    if (!logits.empty()) top = *std::max_element(logits.begin(), logits.begin() + len);
    std::copy_backward(ids.begin(), ids.begin() + (new_len - 1), ids.begin() + new_len);
    ids[0] = gt;
    if (!logits.empty()) {
      std::copy_backward(logits.begin(), logits.begin() + (new_len - 1), logits.begin() + new_len);
      logits[0] = top;
    }
    for (std::size_t i = 0; i < new_len; ++i) groups[i] = static_cast<std::uint16_t>(i);
    out.set_length(t, new_len);
  }
  return out;
}

namespace {

std::uint64_t bounded(std::mt19937_64& gen, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = gen();
  } while (x >= limit);
  return x % n;
}

}  // namespace

RankGroundTruth random_teacher(const TokenStream& stream, std::size_t k, std::uint32_t vocab_size,
                               std::uint64_t seed) {
  if (k < 1 || k > vocab_size)
    throw Error(Errc::invalid_argument, "k=" + std::to_string(k) + " must be in [1, vocab_size=" +
                                            std::to_string(vocab_size) + "]");
  std::mt19937_64 gen(seed);
  RankGroundTruth out(stream.size(), k, vocab_size);
  for (std::size_t t = 0; t < stream.size(); ++t) {
    const TokenId gt = stream.ids[t];
    out.push(t, gt, 0);
    while (out.length(t) < k) {
      auto draw = static_cast<TokenId>(bounded(gen, vocab_size - 1));
      if (draw >= gt) ++draw;  // uniform over V \ {gt}
      if (!out.contains(t, draw)) out.push(t, draw, static_cast<std::uint16_t>(out.length(t)));
    }
  }
  return out;
}

}  // namespace lmrank

#include "lmrank/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <sstream>

#include "lmrank/error.hpp"

namespace lmrank {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\v' || c == '\f'; }

// Calls on_token for each whitespace-delimited token and on_eos for each '\n'.
template <typename OnToken, typename OnEos>
void scan_text(std::string_view text, OnToken&& on_token, OnEos&& on_eos) {
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == '\n') {
      on_eos();
      ++i;
    } else if (is_space(c)) {
      ++i;
    } else {
      std::size_t j = i;
      while (j < text.size() && text[j] != '\n' && !is_space(text[j])) ++j;
      on_token(text.substr(i, j - i));
      i = j;
    }
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(Errc::io, "cannot read " + path.string());
  return data;
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
      throw Error(Errc::invalid_data, "duplicate vocabulary token '" + tokens_[i] + "'");
  }
  auto eos = index_.find(std::string(kEosToken));
  if (eos == index_.end()) throw Error(Errc::invalid_data, "vocabulary has no <eos>");
  eos_id_ = eos->second;
  if (auto unk = index_.find(std::string(kUnkToken)); unk != index_.end()) unk_id_ = unk->second;
}

Vocabulary Vocabulary::from_counts(const std::unordered_map<std::string, std::uint64_t>& counts,
                                   std::uint64_t min_count, std::span<const std::string> specials) {
  auto is_special = [&](const std::string& tok) {
    return tok == kEosToken || std::find(specials.begin(), specials.end(), tok) != specials.end();
  };
  const bool has_unk = std::find(specials.begin(), specials.end(), kUnkToken) != specials.end();

  std::unordered_map<std::string, std::uint64_t> kept;
  std::uint64_t dropped = 0;
  for (const auto& [tok, n] : counts) {
    if (n >= min_count || is_special(tok))
      kept[tok] += n;
    else
      dropped += n;
  }
  kept.try_emplace(std::string(kEosToken), 0);
  for (const auto& s : specials) kept.try_emplace(s, 0);
  if (has_unk) kept[std::string(kUnkToken)] += dropped;

  std::vector<std::pair<std::string, std::uint64_t>> order(kept.begin(), kept.end());
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;  // std::string compares bytes as unsigned char
  });
  std::vector<std::string> tokens;
  tokens.reserve(order.size());
  for (auto& entry : order) tokens.push_back(std::move(entry.first));
  return Vocabulary(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.empty()) throw Error(Errc::invalid_data, "empty vocabulary");
  return Vocabulary(std::move(tokens));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open vocab " + path.string());
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  if (tokens.empty()) throw Error(Errc::invalid_data, "empty vocab file " + path.string());
  return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::io, "cannot write vocab " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw Error(Errc::io, "write failed for " + path.string());
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> default_specials() {
  return {std::string(kEosToken), std::string(kUnkToken)};
}

Vocabulary build_vocab(const std::filesystem::path& text_path, std::uint64_t min_count,
                       std::span<const std::string> specials) {
  const std::string text = read_file(text_path);
  std::unordered_map<std::string, std::uint64_t> counts;
  std::uint64_t total = 0;
  scan_text(
      text,
      [&](std::string_view tok) {
        ++counts[std::string(tok)];
        ++total;
      },
      [&] {
        ++counts[std::string(kEosToken)];
        ++total;
      });
  if (total == 0) throw Error(Errc::empty_corpus, text_path.string());
  return Vocabulary::from_counts(counts, min_count, specials);
}

Vocabulary build_vocab(const std::filesystem::path& text_path, std::uint64_t min_count) {
  const auto specials = default_specials();
  return build_vocab(text_path, min_count, specials);
}

TokenStream tokenize_text(std::string_view text, const Vocabulary& vocab) {
  TokenStream stream;
  stream.vocab_size = static_cast<std::uint32_t>(vocab.size());
  scan_text(
      text,
      [&](std::string_view tok) {
        if (auto id = vocab.find(tok)) {
          stream.ids.push_back(*id);
        } else if (auto unk = vocab.unk_id()) {
          stream.ids.push_back(*unk);
        } else {
          throw Error(Errc::unknown_token, "'" + std::string(tok) + "' and vocabulary has no <unk>");
        }
      },
      [&] { stream.ids.push_back(vocab.eos_id()); });
  if (stream.ids.empty()) throw Error(Errc::empty_corpus, "no tokens");
  return stream;
}

TokenStream load_corpus(const std::filesystem::path& text_path, const Vocabulary& vocab) {
  return tokenize_text(read_file(text_path), vocab);
}

std::string detokenize(const TokenStream& stream, const Vocabulary& vocab) {
  std::string out;
  bool line_start = true;
  for (TokenId id : stream.ids) {
    if (id == vocab.eos_id()) {
      out.push_back('\n');
      line_start = true;
      continue;
    }
    if (!line_start) out.push_back(' ');
    out += vocab.token(id);
    line_start = false;
  }
  return out;
}

std::vector<Batch> batchify(const TokenStream& stream, const BatchPlan& plan) {
  if (plan.batch_size == 0 || plan.seq_len == 0)
    throw Error(Errc::invalid_argument, "batch_size and seq_len must be >= 1");
  const std::size_t T = stream.size();
  if (T < plan.batch_size * (plan.seq_len + 1)) {
    std::ostringstream msg;
    msg << "T=" << T << " < batch_size*(seq_len+1)=" << plan.batch_size * (plan.seq_len + 1);
    throw Error(Errc::stream_too_short, msg.str());
  }
  const std::size_t lane = T / plan.batch_size;
  std::vector<Batch> batches;
  for (std::size_t i = 0; i + 1 < lane; i += plan.seq_len) {
    const std::size_t width = std::min(plan.seq_len, lane - 1 - i);
    if (plan.drop_remainder && width < plan.seq_len) break;
    Batch batch;
    batch.batch_size = plan.batch_size;
    batch.width = width;
    batch.inputs.reserve(plan.batch_size * width);
    batch.target_index.reserve(plan.batch_size * width);
    for (std::size_t b = 0; b < plan.batch_size; ++b) {
      const std::size_t base = b * lane + i;
      for (std::size_t j = 0; j < width; ++j) {
        batch.inputs.push_back(stream.ids[base + j]);
        batch.target_index.push_back(base + j + 1);
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace lmrank

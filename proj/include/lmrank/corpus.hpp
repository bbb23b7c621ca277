#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace lmrank {

using TokenId = std::uint32_t;

inline constexpr std::string_view kEosToken = "<eos>";
inline constexpr std::string_view kUnkToken = "<unk>";

/// Frequency-ordered word vocabulary. Ids are dense; id 0 is the most
/// frequent token, ties broken by byte-lexicographic order.
class Vocabulary {
 public:
  Vocabulary() = default;

  /// Builds from tokens with their counts. Tokens below min_count are
  /// dropped (their occurrences are credited to "<unk>" when it is a special);
  /// specials are always kept. "<eos>" is always present.
  static Vocabulary from_counts(const std::unordered_map<std::string, std::uint64_t>& counts,
                                std::uint64_t min_count, std::span<const std::string> specials);

  /// Tokens in id order, as stored in a vocab file.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  /// Reads a one-token-per-line vocab file; line number is the id.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  std::optional<TokenId> find(std::string_view token) const;
  TokenId eos_id() const noexcept { return eos_id_; }
  std::optional<TokenId> unk_id() const noexcept { return unk_id_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  explicit Vocabulary(std::vector<std::string> tokens);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId eos_id_ = 0;
  std::optional<TokenId> unk_id_;
};

/// The corpus as one contiguous id sequence; every newline contributes an
/// end-of-sentence id.
struct TokenStream {
  std::vector<TokenId> ids;
  std::uint32_t vocab_size = 0;

  std::size_t size() const noexcept { return ids.size(); }
  friend bool operator==(const TokenStream&, const TokenStream&) = default;
};

struct BatchPlan {
  std::size_t batch_size = 1;
  std::size_t seq_len = 1;
  bool drop_remainder = false;
};

/// One step of contiguous-lane batching. Row b holds lane b; column j holds
/// the input id and the absolute stream index of its next-token target.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t width = 0;
  std::vector<TokenId> inputs;             // batch_size x width
  std::vector<std::size_t> target_index;   // batch_size x width, absolute positions

  TokenId input(std::size_t b, std::size_t j) const { return inputs[b * width + j]; }
  std::size_t target(std::size_t b, std::size_t j) const { return target_index[b * width + j]; }
};

std::vector<std::string> default_specials();

Vocabulary build_vocab(const std::filesystem::path& text_path, std::uint64_t min_count,
                       std::span<const std::string> specials);
Vocabulary build_vocab(const std::filesystem::path& text_path, std::uint64_t min_count = 1);

TokenStream load_corpus(const std::filesystem::path& text_path, const Vocabulary& vocab);
TokenStream tokenize_text(std::string_view text, const Vocabulary& vocab);

/// Inverse of tokenize_text: ids joined by single spaces, "<eos>" as newline.
std::string detokenize(const TokenStream& stream, const Vocabulary& vocab);

std::vector<Batch> batchify(const TokenStream& stream, const BatchPlan& plan);

}  // namespace lmrank

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmrank/corpus.hpp"

namespace lmrank {

enum class LossVariant { ce, kl, pl, pl_t, pl_s, wpl, wpl_s, pwh };

LossVariant parse_loss_variant(std::string_view name);
std::string_view loss_variant_name(LossVariant v);
/// True for variants that read rank rows (everything but CE).
bool uses_ranks(LossVariant v);
/// True for variants that need teacher logits (KL and PL-t).
bool uses_teacher_logits(LossVariant v);

struct LossConfig {
  LossVariant variant = LossVariant::ce;
  std::size_t k = 10;
  double eta = 0.4;        // stepped weight of rank 1
  double tau = 1.0;        // teacher-only temperature
  double epsilon = 1e-5;   // added to each PL normalizer in max-shifted space
  double alpha_min = 1.0;
  double cycle_epochs = 1.0;
  double margin = 1.0;     // pairwise hinge
  std::size_t n_negatives = 0;
  bool average_group_discounts = false;

  void validate() const;
};

/// Rank targets of one position: ids in rank order, the group-start index of
/// each slot (weak orders share a start), and optional per-slot discounts.
struct RankTargets {
  std::vector<TokenId> ids;
  std::vector<std::uint16_t> groups;
  std::vector<double> discounts;  // empty means all ones

  static RankTargets strong(std::vector<TokenId> ids);
  std::size_t size() const noexcept { return ids.size(); }
  void validate(std::size_t vocab_size) const;
};

/// Student output for one position; the shifted sum keeps Z representable:
/// Z = exp(max_logit) * shifted_sum.
struct ForwardOutput {
  std::vector<double> logits;
  double max_logit = 0.0;
  double shifted_sum = 0.0;

  static ForwardOutput from_logits(std::vector<double> logits);
  double log_partition() const;
  double partition() const;
};

struct LossValue {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d logits
};

LossValue ce_loss(std::span<const double> logits, TokenId gt);

/// Plackett-Luce negative log-likelihood of the target ranking:
///   sum_i d_i * [ log(Z - sum_{j < groups[i]} e^{w_{y_j}} + eps * e^m) - w_{y_i} ]
/// With groups[i] == i this is the strong-order loss; slots sharing a group
/// start share one normalizer, i.e. plain softmax CE within the group.
LossValue pl_loss(std::span<const double> logits, const RankTargets& targets, double epsilon);

/// Row-batched form of the same loss, written as whole-row array operations
/// (scores, gather, shifted cumulative sum, group gather, log, mask).
/// logits: rows x vocab. ids/groups/discounts: rows x k_max, padded; lengths
/// masks the padding. groups and discounts may be empty. Returns per-slot
/// losses (rows x k_max, zero past each row's length).
std::vector<double> pl_loss_batch(std::span<const double> logits, std::size_t rows, std::size_t vocab,
                                  std::span<const TokenId> ids, std::span<const std::uint16_t> lengths,
                                  std::size_t k_max, std::span<const std::uint16_t> groups,
                                  std::span<const double> discounts, double epsilon);

/// eta on rank 1; the remaining 1 - eta spread over ranks 2..k as an
/// arithmetic sequence proportional to k - i.
std::vector<double> stepped_discounts(std::size_t k, double eta);

/// softmax(teacher_logits / tau), renormalized over the given top-k only.
std::vector<double> teacher_prob_discounts(std::span<const double> teacher_logits, double tau);

/// sum_i p_i (log p_i - log q_i) over the teacher's top-k, with p the
/// tempered teacher softmax over the top-k and q the untempered student
/// softmax over the full vocabulary. No tau^2 factor on the gradient.
LossValue topk_kl_loss(std::span<const double> logits, const RankTargets& targets,
                       std::span<const double> teacher_logits, double tau);

/// Mean hinge max(0, margin - (w_i - w_j)) over preference pairs: each
/// weak-order group above the next one, and every target above every negative.
LossValue pairwise_hinge_loss(std::span<const double> logits, const RankTargets& targets,
                              std::span<const TokenId> negatives, double margin);

/// The student's own top-(n + k) predictions with the targets removed, cut to n.
std::vector<TokenId> select_negatives(std::span<const double> logits, std::span<const TokenId> targets,
                                      std::size_t n);

/// Sawtooth: 1 at each cycle start, falling linearly to alpha_min at its end.
double cycle_alpha(double global_epoch, double cycle_epochs, double alpha_min);

struct LossInputs {
  TokenId gt = 0;
  const RankTargets* targets = nullptr;          // rank row truncated to k, slot 0 = gt
  std::span<const double> teacher_logits = {};  // aligned with targets (KL, PL-t)
  std::span<const TokenId> negatives = {};       // PWH
};

/// alpha * CE + (1 - alpha) * aux, aux being the configured variant's loss.
/// The CE variant ignores alpha.
LossValue combined_loss(std::span<const double> logits, const LossInputs& in, const LossConfig& config,
                        double alpha);

/// Per-slot discounts the variant applies to a row of the given length.
std::vector<double> variant_discounts(const LossConfig& config, std::span<const double> teacher_logits,
                                      std::size_t k_used, std::span<const std::uint16_t> groups);

}  // namespace lmrank

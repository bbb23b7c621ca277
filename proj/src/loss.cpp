#include "lmrank/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>

#include "lmrank/error.hpp"

namespace lmrank {

LossVariant parse_loss_variant(std::string_view name) {
  static constexpr std::pair<std::string_view, LossVariant> kNames[] = {
      {"CE", LossVariant::ce},     {"KL", LossVariant::kl},   {"PL", LossVariant::pl},
      {"PL_t", LossVariant::pl_t}, {"PL_s", LossVariant::pl_s}, {"wPL", LossVariant::wpl},
      {"wPL_s", LossVariant::wpl_s}, {"PWH", LossVariant::pwh},
  };
  for (const auto& [n, v] : kNames)
    if (n == name) return v;
  throw Error(Errc::invalid_argument, "unknown loss variant '" + std::string(name) +
                                          "' (expected CE, KL, PL, PL_t, PL_s, wPL, wPL_s or PWH)");
}

std::string_view loss_variant_name(LossVariant v) {
  switch (v) {
    case LossVariant::ce: return "CE";
    case LossVariant::kl: return "KL";
    case LossVariant::pl: return "PL";
    case LossVariant::pl_t: return "PL_t";
    case LossVariant::pl_s: return "PL_s";
    case LossVariant::wpl: return "wPL";
    case LossVariant::wpl_s: return "wPL_s";
    case LossVariant::pwh: return "PWH";
  }
  return "?";
}

bool uses_ranks(LossVariant v) { return v != LossVariant::ce; }
bool uses_teacher_logits(LossVariant v) { return v == LossVariant::kl || v == LossVariant::pl_t; }

void LossConfig::validate() const {
  if (k < 1) throw Error(Errc::invalid_argument, "loss.k must be >= 1");
  if ((variant == LossVariant::pl_s || variant == LossVariant::wpl_s) && !(eta > 0.0 && eta < 1.0))
    throw Error(Errc::invalid_argument, "eta must be in (0, 1)");
  if (uses_teacher_logits(variant) && !(tau > 0.0)) throw Error(Errc::invalid_argument, "tau must be > 0");
  if (!(epsilon >= 0.0)) throw Error(Errc::invalid_argument, "epsilon must be >= 0");
  if (!(alpha_min > 0.0 && alpha_min <= 1.0)) throw Error(Errc::invalid_argument, "alpha_min must be in (0, 1]");
  if (!(cycle_epochs >= 1.0)) throw Error(Errc::invalid_argument, "cycle_epochs must be >= 1");
}

RankTargets RankTargets::strong(std::vector<TokenId> ids) {
  RankTargets t;
  t.groups.resize(ids.size());
  std::iota(t.groups.begin(), t.groups.end(), std::uint16_t{0});
  t.ids = std::move(ids);
  return t;
}

void RankTargets::validate(std::size_t vocab_size) const {
  const std::size_t k = ids.size();
  if (k == 0) throw Error(Errc::invalid_argument, "empty rank targets");
  if (k > vocab_size) throw Error(Errc::invalid_argument, "k_used exceeds vocabulary size");
  if (groups.size() != k) throw Error(Errc::invalid_argument, "groups size differs from ids size");
  if (!discounts.empty() && discounts.size() != k)
    throw Error(Errc::invalid_argument, "discounts size differs from ids size");
  for (std::size_t i = 0; i < k; ++i) {
    if (ids[i] >= vocab_size) throw Error(Errc::invalid_argument, "target id out of range");
    for (std::size_t j = 0; j < i; ++j)
      if (ids[j] == ids[i]) throw Error(Errc::invalid_argument, "duplicate target id");
    if (groups[i] > i || groups[groups[i]] != groups[i])
      throw Error(Errc::invalid_argument, "group starts are not idempotent");
    if (!discounts.empty() && !(discounts[i] >= 0.0))
      throw Error(Errc::invalid_argument, "discounts must be non-negative");
  }
}

namespace {

struct Shifted {
  double max = 0.0;
  std::size_t argmax = 0;
  double sum = 0.0;
  std::vector<double> scores;  // exp(w - max)
};

Shifted shift(std::span<const double> logits) {
  if (logits.empty()) throw Error(Errc::invalid_argument, "empty logits");
  const Eigen::Map<const Eigen::ArrayXd> w(logits.data(), static_cast<Eigen::Index>(logits.size()));
  if (!w.isFinite().all()) {
    for (std::size_t v = 0; v < logits.size(); ++v)
      if (!std::isfinite(logits[v])) throw Error(Errc::non_finite, "logit " + std::to_string(v));
  }
  Shifted s;
  Eigen::Index argmax = 0;
  s.max = w.maxCoeff(&argmax);
  s.argmax = static_cast<std::size_t>(argmax);
  // Owned (aligned) storage: Eigen peels unaligned heads onto the scalar exp
  // path, which would make results depend on the heap address.
  const Eigen::ArrayXd scores = (w - s.max).exp();
  s.sum = scores.sum();
  s.scores.assign(scores.data(), scores.data() + scores.size());
  return s;
}

}  // namespace

ForwardOutput ForwardOutput::from_logits(std::vector<double> logits) {
  ForwardOutput out;
  const Shifted s = shift(logits);
  out.max_logit = s.max;
  out.shifted_sum = s.sum;
  out.logits = std::move(logits);
  return out;
}

double ForwardOutput::log_partition() const { return max_logit + std::log(shifted_sum); }
double ForwardOutput::partition() const { return std::exp(max_logit) * shifted_sum; }

LossValue ce_loss(std::span<const double> logits, TokenId gt) {
  if (gt >= logits.size()) throw Error(Errc::invalid_argument, "gt id out of range");
  Shifted s = shift(logits);
  LossValue out;
  out.loss = std::log(s.sum) + s.max - logits[gt];
  out.grad = std::move(s.scores);
  for (double& g : out.grad) g /= s.sum;
  out.grad[gt] -= 1.0;
  return out;
}

LossValue pl_loss(std::span<const double> logits, const RankTargets& targets, double epsilon) {
  const std::size_t V = logits.size();
  targets.validate(V);
  Shifted s = shift(logits);
  const std::size_t k = targets.size();

  // Mass outside the target list, summed directly so no normalizer is formed
  // by subtraction.
  std::vector<char> is_target(V, 0);
  for (TokenId id : targets.ids) is_target[id] = 1;
  double rest = 0.0;
  for (std::size_t v = 0; v < V; ++v)
    if (!is_target[v]) rest += s.scores[v];

  // suffix[j] = sum of target scores from slot j onward.
  std::vector<double> suffix(k + 1, 0.0);
  for (std::size_t j = k; j-- > 0;) suffix[j] = suffix[j + 1] + s.scores[targets.ids[j]];

  LossValue out;
  std::vector<double> coef(k);
  double coef_sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double d = targets.discounts.empty() ? 1.0 : targets.discounts[i];
    // Group 0 is normalized by the full sum, exactly as ce_loss forms it.
    const std::size_t start = targets.groups[i];
    const double denom = (start == 0 ? s.sum : rest + suffix[start]) + epsilon;
    out.loss += d * (std::log(denom) + s.max - logits[targets.ids[i]]);
    coef[i] = d / denom;
    coef_sum += coef[i];
  }

  out.grad.resize(V);
  for (std::size_t v = 0; v < V; ++v) out.grad[v] = s.scores[v] * coef_sum;
  // The guard is eps * e^max, so it moves with the maximal logit.
  out.grad[s.argmax] += epsilon * coef_sum;
  for (std::size_t j = 0; j < k; ++j) {
    double excluded = 0.0;  // terms whose normalizer already removed slot j
    for (std::size_t i = 0; i < k; ++i)
      if (targets.groups[i] > j) excluded += coef[i];
    const TokenId y = targets.ids[j];
    out.grad[y] -= s.scores[y] * excluded;
    out.grad[y] -= targets.discounts.empty() ? 1.0 : targets.discounts[j];
  }
  return out;
}

std::vector<double> pl_loss_batch(std::span<const double> logits, std::size_t rows, std::size_t vocab,
                                  std::span<const TokenId> ids, std::span<const std::uint16_t> lengths,
                                  std::size_t k_max, std::span<const std::uint16_t> groups,
                                  std::span<const double> discounts, double epsilon) {
  if (logits.size() != rows * vocab || ids.size() != rows * k_max || lengths.size() != rows ||
      (!groups.empty() && groups.size() != rows * k_max) || (!discounts.empty() && discounts.size() != rows * k_max))
    throw Error(Errc::invalid_argument, "pl_loss_batch shape mismatch");

  std::vector<double> m(rows), Z(rows, 0.0);
  std::vector<double> w(rows * k_max), Zi(rows * k_max), out(rows * k_max, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = logits.data() + r * vocab;
    m[r] = *std::max_element(row, row + vocab);
    for (std::size_t v = 0; v < vocab; ++v) Z[r] += std::exp(row[v] - m[r]);
  }
  // Gather target logits; padded slots read the row max and are masked below.
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < k_max; ++i) {
      const TokenId id = ids[r * k_max + i];
      w[r * k_max + i] = (i < lengths[r] && id < vocab) ? logits[r * vocab + id] : m[r];
    }
  // Exclusive cumulative sum: slot 0 is fully normalized.
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < k_max; ++i) {
      Zi[r * k_max + i] = acc;
      acc += std::exp(w[r * k_max + i] - m[r]);
    }
  }
  if (!groups.empty()) {
    std::vector<double> head(k_max);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(Zi.begin() + static_cast<std::ptrdiff_t>(r * k_max), k_max, head.begin());
      for (std::size_t i = 0; i < k_max; ++i) Zi[r * k_max + i] = head[groups[r * k_max + i]];
    }
  }
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < lengths[r] && i < k_max; ++i) {
      const std::size_t c = r * k_max + i;
      double l = std::log(Z[r] - Zi[c] + epsilon) + m[r] - w[c];
      if (!discounts.empty()) l *= discounts[c];
      out[c] = l;
    }
  return out;
}

std::vector<double> stepped_discounts(std::size_t k, double eta) {
  if (!(eta > 0.0 && eta < 1.0)) throw Error(Errc::invalid_argument, "eta must be in (0, 1)");
  if (k == 0) throw Error(Errc::invalid_argument, "k must be >= 1");
  if (k == 1) return {1.0};
  std::vector<double> d(k);
  d[0] = eta;
  const double kd = static_cast<double>(k);
  for (std::size_t i = 1; i < k; ++i) d[i] = (1.0 - eta) * 2.0 * static_cast<double>(k - i) / (kd * (kd - 1.0));
  return d;
}

std::vector<double> teacher_prob_discounts(std::span<const double> teacher_logits, double tau) {
  if (!(tau > 0.0)) throw Error(Errc::invalid_argument, "tau must be > 0");
  if (teacher_logits.empty()) throw Error(Errc::invalid_argument, "no teacher logits");
  std::vector<double> p(teacher_logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double f : teacher_logits) {
    if (!std::isfinite(f)) throw Error(Errc::non_finite, "teacher logit");
    mx = std::max(mx, f / tau);
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += (p[i] = std::exp(teacher_logits[i] / tau - mx));
  for (double& x : p) x /= sum;
  return p;
}

LossValue topk_kl_loss(std::span<const double> logits, const RankTargets& targets,
                       std::span<const double> teacher_logits, double tau) {
  targets.validate(logits.size());
  if (teacher_logits.size() != targets.size())
    throw Error(Errc::invalid_argument, "missing teacher logits for " + std::to_string(targets.size()) + " targets");
  const std::vector<double> p = teacher_prob_discounts(teacher_logits, tau);
  Shifted s = shift(logits);
  const double log_z = std::log(s.sum) + s.max;

  LossValue out;
  double p_sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p_sum += p[i];
    if (p[i] == 0.0) continue;
    const double log_q = logits[targets.ids[i]] - log_z;
    out.loss += p[i] * (std::log(p[i]) - log_q);
  }
  out.grad = std::move(s.scores);
  for (double& g : out.grad) g = g / s.sum * p_sum;
  for (std::size_t i = 0; i < p.size(); ++i) out.grad[targets.ids[i]] -= p[i];
  return out;
}

LossValue pairwise_hinge_loss(std::span<const double> logits, const RankTargets& targets,
                              std::span<const TokenId> negatives, double margin) {
  targets.validate(logits.size());
  for (TokenId n : negatives) {
    if (n >= logits.size()) throw Error(Errc::invalid_argument, "negative id out of range");
    if (std::find(targets.ids.begin(), targets.ids.end(), n) != targets.ids.end())
      throw Error(Errc::invalid_argument, "negative " + std::to_string(n) + " overlaps the targets");
  }
  for (double w : logits)
    if (!std::isfinite(w)) throw Error(Errc::non_finite, "logit");

  std::vector<std::pair<TokenId, TokenId>> pairs;  // (preferred, other)
  const std::size_t k = targets.size();
  // Group boundaries: [starts[g], starts[g+1]).
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i < k; ++i)
    if (targets.groups[i] == i) starts.push_back(i);
  starts.push_back(k);
  for (std::size_t g = 0; g + 2 < starts.size(); ++g)
    for (std::size_t i = starts[g]; i < starts[g + 1]; ++i)
      for (std::size_t j = starts[g + 1]; j < starts[g + 2]; ++j) pairs.emplace_back(targets.ids[i], targets.ids[j]);
  for (TokenId y : targets.ids)
    for (TokenId n : negatives) pairs.emplace_back(y, n);

  LossValue out;
  out.grad.assign(logits.size(), 0.0);
  if (pairs.empty()) return out;
  const double scale = 1.0 / static_cast<double>(pairs.size());
  for (const auto& [hi, lo] : pairs) {
    const double h = margin - (logits[hi] - logits[lo]);
    if (h > 0.0) {
      out.loss += h * scale;
      out.grad[hi] -= scale;
      out.grad[lo] += scale;
    }
  }
  return out;
}

std::vector<TokenId> select_negatives(std::span<const double> logits, std::span<const TokenId> targets,
                                      std::size_t n) {
  const std::size_t take = std::min(logits.size(), n + targets.size());
  std::vector<TokenId> order(logits.size());
  std::iota(order.begin(), order.end(), TokenId{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](TokenId a, TokenId b) { return logits[a] != logits[b] ? logits[a] > logits[b] : a < b; });
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < take && out.size() < n; ++i)
    if (std::find(targets.begin(), targets.end(), order[i]) == targets.end()) out.push_back(order[i]);
  return out;
}

double cycle_alpha(double global_epoch, double cycle_epochs, double alpha_min) {
  if (!(cycle_epochs >= 1.0)) throw Error(Errc::invalid_argument, "cycle_epochs must be >= 1");
  if (!(alpha_min > 0.0 && alpha_min <= 1.0)) throw Error(Errc::invalid_argument, "alpha_min must be in (0, 1]");
  if (!(global_epoch >= 0.0)) throw Error(Errc::invalid_argument, "epoch must be >= 0");
  const double phase = std::fmod(global_epoch, cycle_epochs) / cycle_epochs;
  return 1.0 - (1.0 - alpha_min) * phase;
}

std::vector<double> variant_discounts(const LossConfig& config, std::span<const double> teacher_logits,
                                      std::size_t k_used, std::span<const std::uint16_t> groups) {
  std::vector<double> d;
  switch (config.variant) {
    case LossVariant::pl_t:
      if (teacher_logits.size() != k_used) throw Error(Errc::invalid_argument, "PL_t needs teacher logits");
      d = teacher_prob_discounts(teacher_logits, config.tau);
      break;
    case LossVariant::pl_s:
    case LossVariant::wpl_s:
      d = stepped_discounts(k_used, config.eta);
      break;
    default:
      return {};
  }
  if (config.average_group_discounts && groups.size() == k_used) {
    for (std::size_t i = 0; i < k_used;) {
      std::size_t j = i + 1;
      while (j < k_used && groups[j] == groups[i]) ++j;
      const double mean = std::accumulate(d.begin() + static_cast<std::ptrdiff_t>(i),
                                          d.begin() + static_cast<std::ptrdiff_t>(j), 0.0) /
                          static_cast<double>(j - i);
      std::fill(d.begin() + static_cast<std::ptrdiff_t>(i), d.begin() + static_cast<std::ptrdiff_t>(j), mean);
      i = j;
    }
  }
  return d;
}

LossValue combined_loss(std::span<const double> logits, const LossInputs& in, const LossConfig& config,
                        double alpha) {
  LossValue ce = ce_loss(logits, in.gt);
  if (config.variant == LossVariant::ce) return ce;
  if (in.targets == nullptr) throw Error(Errc::invalid_argument, "rank targets required for this variant");
  const RankTargets& row = *in.targets;

  LossValue aux;
  switch (config.variant) {
    case LossVariant::kl:
      aux = topk_kl_loss(logits, row, in.teacher_logits, config.tau);
      break;
    case LossVariant::pwh:
      aux = pairwise_hinge_loss(logits, row, in.negatives, config.margin);
      break;
    default: {
      const bool weak = config.variant == LossVariant::wpl || config.variant == LossVariant::wpl_s;
      RankTargets t = weak ? row : RankTargets::strong(row.ids);
      t.discounts = variant_discounts(config, in.teacher_logits, t.size(), t.groups);
      aux = pl_loss(logits, t, config.epsilon);
    }
  }

  LossValue out;
  out.loss = alpha * ce.loss + (1.0 - alpha) * aux.loss;
  out.grad.resize(logits.size());
  for (std::size_t v = 0; v < logits.size(); ++v) out.grad[v] = alpha * ce.grad[v] + (1.0 - alpha) * aux.grad[v];
  return out;
}

}  // namespace lmrank

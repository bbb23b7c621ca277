// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
// Exit status is the number of failed criteria (capped at 100).
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "lmrank/error.hpp"
#include "lmrank/eval.hpp"
#include "lmrank/loss.hpp"
#include "lmrank/rankgen.hpp"
#include "lmrank/teacherio.hpp"
#include "lmrank/trainer.hpp"
#include "test_util.hpp"

using namespace lmrank;
using namespace testutil;

namespace {

constexpr double kCollapseRelTol = 1e-12;
constexpr double kBatchAbsTol = 1e-9;
constexpr double kGradTol = 1e-4;
constexpr double kShiftTol = 1e-9;
constexpr double kPermTol = 1e-12;
constexpr double kStepSumTol = 1e-12;
constexpr double kDeskPplFraction = 0.5;

constexpr double kCollapseBudget = 1.0;
constexpr double kBatchBudget = 5.0;
constexpr double kGradBudget = 60.0;
constexpr double kOracleBudget = 60.0;
constexpr double kDeskBudget = 15 * 60.0;

constexpr std::size_t kDeskEpochs = 20;
constexpr std::size_t kKdEpochs = 6;
constexpr std::uint64_t kKdSeeds[] = {1, 2, 3, 4, 5};

int failures = 0;

void report(int id, const char* name, bool ok, const std::string& detail) {
  if (!ok) ++failures;
  std::printf("%s [%2d] %s: %s\n", ok ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
}

class Clock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void collapse() {
  Clock clock;
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (int rep = 0; rep < 1000; ++rep) {
    const auto w = random_logits(rng, uniform(rng, 1, 64), 5.0);
    const auto gt = static_cast<TokenId>(uniform(rng, 0, w.size() - 1));
    // The guard is off for the collapse check; it adds log(1 + eps e^m / Z) to any PL term.
    const double pl = pl_loss(w, RankTargets::strong({gt}), 0.0).loss;
    const double ce = ce_loss(w, gt).loss;
    worst = std::max(worst, std::abs(pl - ce) / std::max(std::abs(ce), 1e-300));
  }
  const double t = clock.seconds();
  report(1, "PL with k=1 equals CE", worst < kCollapseRelTol && t < kCollapseBudget,
         fmt("1000 cases (eps = 0), max rel err %.3g (tol %.0e), %.3f s (budget %.0f s)", worst, kCollapseRelTol, t,
             kCollapseBudget));
}

void batched_vs_naive() {
  Clock clock;
  std::mt19937_64 rng(102);
  const std::size_t rows = 1000, k_max = 12;
  const double eps = 1e-5;
  double worst = 0.0;
  // Rows are grouped by vocabulary size so each batch is a dense matrix.
  for (std::size_t V : {16, 40, 64}) {
    const std::size_t n = rows / 3 + (V == 64 ? rows % 3 : 0);
    std::vector<double> logits, discounts(n * k_max, 0.0);
    std::vector<TokenId> ids(n * k_max, 0xFFFFFFFFu);
    std::vector<std::uint16_t> groups(n * k_max, 0), lengths(n);
    std::vector<RankTargets> per_row;
    for (std::size_t r = 0; r < n; ++r) {
      const auto w = random_logits(rng, V, 3.0);
      logits.insert(logits.end(), w.begin(), w.end());
      RankTargets t = random_targets(rng, V, uniform(rng, 1, k_max), r % 2 ? 0.5 : 0.0);
      if (r % 3 == 0) {
        t.discounts = stepped_discounts(t.size(), 0.4);
      } else if (r % 3 == 1) {
        t.discounts.resize(t.size());
        for (double& d : t.discounts) d = std::uniform_real_distribution<double>(0.0, 2.0)(rng);
      }
      lengths[r] = static_cast<std::uint16_t>(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) {
        ids[r * k_max + i] = t.ids[i];
        groups[r * k_max + i] = t.groups[i];
        discounts[r * k_max + i] = t.discounts.empty() ? 1.0 : t.discounts[i];
      }
      per_row.push_back(std::move(t));
    }
    const auto slots = pl_loss_batch(logits, n, V, ids, lengths, k_max, groups, discounts, eps);
    for (std::size_t r = 0; r < n; ++r) {
      double sum = 0.0;
      for (std::size_t i = 0; i < k_max; ++i) sum += slots[r * k_max + i];
      const std::vector<double> w(logits.begin() + static_cast<std::ptrdiff_t>(r * V),
                                  logits.begin() + static_cast<std::ptrdiff_t>((r + 1) * V));
      worst = std::max(worst, std::abs(sum - naive_pl(w, per_row[r].ids, per_row[r].groups, per_row[r].discounts, eps)));
    }
  }
  const double t = clock.seconds();
  report(2, "batched PL equals term-by-term reference", worst < kBatchAbsTol && t < kBatchBudget,
         fmt("1000 rows (weak orders, stepped and random discounts), max abs err %.3g (tol %.0e), %.3f s (budget %.0f s)",
             worst, kBatchAbsTol, t, kBatchBudget));
}

void gradients() {
  Clock clock;
  GradCheckConfig gc;
  gc.n_cases = 100;
  gc.step = 1e-5;
  gc.tolerance = kGradTol;
  gc.seed = 103;
  const GradCheckReport rep = grad_check(gc);
  const double t = clock.seconds();
  std::string detail;
  bool ok = rep.passed && t < kGradBudget;
  for (const auto& r : rep.results) {
    detail += fmt("%s %.2g, ", std::string(loss_variant_name(r.variant)).c_str(), r.max_rel_error);
    ok = ok && r.cases >= 100 && r.max_rel_error < kGradTol;
  }
  report(3, "gradient check through the student", ok,
         fmt("100 cases each, max rel err: %s(tol %.0e), %.2f s (budget %.0f s)", detail.c_str(), kGradTol, t,
             kGradBudget));
}

void shift_invariance() {
  std::mt19937_64 rng(104);
  double worst = 0.0;
  for (int rep = 0; rep < 500; ++rep) {
    const std::size_t V = uniform(rng, 2, 64);
    const auto w = random_logits(rng, V, 4.0);
    RankTargets t = random_targets(rng, V, uniform(rng, 1, std::min<std::size_t>(V, 10)), 0.3);
    if (rep % 2) t.discounts = stepped_discounts(t.size(), 0.4);
    for (double eps : {0.0, 1e-5}) {
      const double base = pl_loss(w, t, eps).loss;
      for (double c : {-100.0, 7.3, 1000.0}) {
        auto s = w;
        for (double& x : s) x += c;
        worst = std::max(worst, std::abs(pl_loss(s, t, eps).loss - base));
      }
    }
  }
  report(4, "PL shift invariance", worst < kShiftTol,
         fmt("500 cases x c in {-100, 7.3, 1000} x eps in {0, 1e-5}, max |diff| %.3g (tol %.0e)", worst, kShiftTol));
}

void permutation_invariance() {
  std::mt19937_64 rng(105);
  double worst = 0.0;
  for (int rep = 0; rep < 500; ++rep) {
    const std::size_t V = uniform(rng, 4, 64);
    const auto w = random_logits(rng, V, 3.0);
    const RankTargets t = random_targets(rng, V, uniform(rng, 3, std::min<std::size_t>(V, 12)), 0.7);
    RankTargets p = t;
    for (std::size_t i = 0; i < p.size();) {
      std::size_t j = i + 1;
      while (j < p.size() && p.groups[j] == p.groups[i]) ++j;
      std::shuffle(p.ids.begin() + static_cast<std::ptrdiff_t>(i), p.ids.begin() + static_cast<std::ptrdiff_t>(j), rng);
      i = j;
    }
    worst = std::max(worst, std::abs(pl_loss(w, p, 1e-5).loss - pl_loss(w, t, 1e-5).loss));
  }
  report(5, "wPL within-group permutation invariance", worst < kPermTol,
         fmt("500 cases, unit discounts, max |diff| %.3g (tol %.0e)", worst, kPermTol));
}

TokenStream zipf_stream(std::mt19937_64& rng, std::size_t T, std::uint32_t V) {
  std::vector<double> weights(V);
  for (std::uint32_t i = 0; i < V; ++i) weights[i] = 1.0 / (i + 1.0);
  std::discrete_distribution<TokenId> draw(weights.begin(), weights.end());
  TokenStream s;
  s.vocab_size = V;
  for (std::size_t t = 0; t < T; ++t) {
    // Occasional copies of recent spans give repeated long contexts.
    if (t > 8 && uniform(rng, 0, 3) == 0)
      s.ids.push_back(s.ids[t - uniform(rng, 3, 8)]);
    else
      s.ids.push_back(draw(rng));
  }
  return s;
}

void rank_oracle() {
  Clock clock;
  std::mt19937_64 rng(106);
  int mismatches = 0;
  const std::uint32_t qs[] = {2, 5, 10};
  for (int rep = 0; rep < 50; ++rep) {
    const TokenStream s =
        zipf_stream(rng, uniform(rng, 1, 10000), static_cast<std::uint32_t>(uniform(rng, 1, 200)));
    RankBuildConfig cfg;
    cfg.schemas = enumerate_schemas(static_cast<std::uint32_t>(uniform(rng, 1, 3)),
                                    static_cast<std::uint32_t>(uniform(rng, 0, 2)));
    cfg.cutoff_q = qs[rep % 3];
    cfg.k_max = uniform(rng, 1, 12);
    cfg.overflow = rep % 2 ? OverflowMode::cap : OverflowMode::discard;
    const RankGroundTruth oracle = brute_force_ranks(s, cfg);
    for (unsigned jobs : {1u, 4u}) {
      cfg.jobs = jobs;
      if (!(build_ranks(s, cfg) == oracle)) ++mismatches;
    }
  }
  const double t = clock.seconds();
  report(6, "rank builder equals brute-force reference", mismatches == 0 && t < kOracleBudget,
         fmt("50 corpora x {1, 4} workers, schemas up to (3,2), q in {2,5,10}, both overflow modes: %d mismatches, "
             "%.2f s (budget %.0f s)",
             mismatches, t, kOracleBudget));
}

void stepped() {
  bool ok = true;
  double worst_sum = 0.0;
  for (std::size_t k = 2; k <= 20; ++k)
    for (double eta : {0.2, 0.4, 0.6}) {
      const auto d = stepped_discounts(k, eta);
      const double sum = std::accumulate(d.begin(), d.end(), 0.0);
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      ok = ok && d.size() == k && d[0] == eta;
      for (std::size_t i = 1; i < k; ++i) ok = ok && d[i] > 0.0;
      for (std::size_t i = 2; i < k; ++i)
        ok = ok && d[i] < d[i - 1] && std::abs((d[i - 1] - d[i]) - (d[1] - d[2])) < 1e-15;
    }
  report(7, "stepped discounts", ok && worst_sum < kStepSumTol,
         fmt("k in 2..20 x eta in {0.2, 0.4, 0.6}: max |sum - 1| %.3g (tol %.0e), d0 = eta, tail positive, strictly "
             "decreasing, constant step: %s",
             worst_sum, kStepSumTol, ok ? "yes" : "no"));
}

void serialization() {
  std::mt19937_64 rng(107);
  int roundtrip_failures = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const RankGroundTruth r = random_ranks(rng, rep % 2 == 0);
    std::ostringstream out(std::ios::binary);
    write_ranks(r, out);
    std::istringstream in(out.str(), std::ios::binary);
    if (!(read_ranks(in) == r)) ++roundtrip_failures;
  }

  RankGroundTruth small(2, 3, 8);
  small.enable_logits();
  small.push(0, 1, 0);
  small.push(0, 2, 1);
  small.push(1, 0, 0);
  std::ostringstream out(std::ios::binary);
  write_ranks(small, out);
  const std::string good = out.str();
  std::vector<std::string> corrupt;
  auto patched = [&](std::size_t at, char value) {
    std::string b = good;
    b[at] = value;
    return b;
  };
  corrupt.push_back(patched(0, 'X'));          // magic
  corrupt.push_back(patched(4, 9));            // version
  corrupt.push_back(patched(22, 4));           // unknown flag
  corrupt.push_back(patched(23, 7));           // length > k_max
  corrupt.push_back(patched(27, 8));           // id >= vocab_size
  corrupt.push_back(good.substr(0, 12));       // truncated header
  corrupt.push_back(good.substr(0, 23));       // header only
  corrupt.push_back(good.substr(0, good.size() - 1));
  corrupt.push_back(good + '\0');              // trailing bytes
  corrupt.push_back("");
  int accepted = 0;
  for (const auto& bytes : corrupt) {
    try {
      std::istringstream in(bytes, std::ios::binary);
      read_ranks(in);
      ++accepted;
    } catch (const Error&) {
    }
  }
  report(8, "RKGT serialization", roundtrip_failures == 0 && accepted == 0,
         fmt("100 random files (half with logits): %d roundtrip failures; %d of %zu corrupted inputs accepted",
             roundtrip_failures, accepted, corrupt.size()));
}

// ---- desk-scale runs ----

struct Desk {
  TrainData data;
  RankGroundTruth ngram;
};

Desk load_desk() {
  const std::filesystem::path dir = std::filesystem::path(LMRANK_DATA_DIR) / "desk";
  Desk d;
  d.data.vocab = build_vocab(dir / "train.txt", 1);
  d.data.train = load_corpus(dir / "train.txt", d.data.vocab);
  d.data.valid = load_corpus(dir / "valid.txt", d.data.vocab);
  RankBuildConfig cfg;
  cfg.schemas = enumerate_schemas(3, 2);
  cfg.cutoff_q = 10;
  cfg.k_max = 10;
  d.ngram = build_ranks(d.data.train, cfg);
  return d;
}

double mean_row_length(const RankGroundTruth& r) {
  double total = 0.0;
  for (std::size_t t = 0; t < r.positions(); ++t) total += static_cast<double>(r.length(t));
  return total / static_cast<double>(r.positions());
}

TrainConfig desk_config(LossVariant v, std::uint64_t seed, std::size_t epochs) {
  TrainConfig c;
  c.student.seed = seed;
  c.loss.variant = v;
  c.epochs = epochs;
  c.record_wall_time = false;
  if (v == LossVariant::wpl_s) {
    c.loss.eta = 0.4;
    c.loss.k = 10;
    c.loss.alpha_min = 0.5;
    c.loss.cycle_epochs = 2;
  }
  return c;
}

bool monotone_topk(const StudentParamsF& p, const TokenStream& s, std::string* curve) {
  const std::vector<std::size_t> ks{1, 2, 3, 5, 10};
  const auto acc = topk_accuracy(p, s, std::span<const std::size_t>(ks));
  bool ok = true;
  for (std::size_t i = 0; i < acc.size(); ++i) {
    if (curve) *curve += fmt("%sA@%zu=%.3f", i ? " " : "", acc[i].k, acc[i].accuracy);
    if (i) ok = ok && acc[i].accuracy >= acc[i - 1].accuracy;
  }
  return ok;
}

bool all_topk_monotone = true;

void desk_ce(const Desk& d) {
  const std::size_t V = d.data.vocab.size();
  Clock clock;
  const TrainResult r = train(desk_config(LossVariant::ce, 1, kDeskEpochs), d.data);
  const double t = clock.seconds();
  // Determinism: a fresh run with the same seed must replay the first epochs bit for bit.
  const TrainResult replay = train(desk_config(LossVariant::ce, 1, 2), d.data);
  const bool deterministic =
      replay.step_losses.size() <= r.step_losses.size() &&
      std::equal(replay.step_losses.begin(), replay.step_losses.end(), r.step_losses.begin());
  all_topk_monotone = monotone_topk(r.params, d.data.valid, nullptr) && all_topk_monotone;
  const double bound = kDeskPplFraction * static_cast<double>(V);
  report(9, "desk CE smoke", r.final_val_ppl < bound && deterministic && t < kDeskBudget,
         fmt("T=%zu |V|=%zu, %zu epochs: val PPL %.2f (bound %.1f), seed replay %s, %.1f s (budget %.0f s)",
             d.data.train.size(), V, kDeskEpochs, r.final_val_ppl, bound, deterministic ? "identical" : "DIFFERS", t,
             kDeskBudget));
}

void desk_kd(const Desk& d) {
  TrainData with_ranks = d.data;
  with_ranks.ranks = d.ngram;
  std::string ce_list, kd_list;
  double ce_sum = 0.0, kd_sum = 0.0;
  Clock clock;
  for (std::uint64_t seed : kKdSeeds) {
    const TrainResult ce = train(desk_config(LossVariant::ce, seed, kKdEpochs), d.data);
    const TrainResult kd = train(desk_config(LossVariant::wpl_s, seed, kKdEpochs), with_ranks);
    all_topk_monotone = monotone_topk(ce.params, d.data.valid, nullptr) && all_topk_monotone;
    all_topk_monotone = monotone_topk(kd.params, d.data.valid, nullptr) && all_topk_monotone;
    ce_sum += ce.final_val_ppl;
    kd_sum += kd.final_val_ppl;
    ce_list += fmt("%s%.2f", ce_list.empty() ? "" : " ", ce.final_val_ppl);
    kd_list += fmt("%s%.2f", kd_list.empty() ? "" : " ", kd.final_val_ppl);
  }
  const double n = static_cast<double>(std::size(kKdSeeds));
  report(10, "rank distillation direction (soft)", kd_sum / n <= ce_sum / n,
         fmt("n-gram teacher (P=3 F=2 q=10 k=10, mean row length %.2f), %zu epochs, seeds 1-5: wPL_s mean %.2f [%s] "
             "vs CE mean %.2f [%s], %.0f s",
             mean_row_length(d.ngram), kKdEpochs, kd_sum / n, kd_list.c_str(), ce_sum / n, ce_list.c_str(),
             clock.seconds()));
}

void memorize() {
  // 30 distinct words in a fixed cycle: any 2-token window names the next word.
  std::vector<std::string> toks{"<eos>", "<unk>"};
  for (int i = 0; i < 30; ++i) toks.push_back("w" + std::to_string(i));
  TrainData d;
  d.vocab = Vocabulary::from_tokens(toks);
  d.train.vocab_size = d.valid.vocab_size = 32;
  for (std::size_t t = 0; t < 3000; ++t) d.train.ids.push_back(static_cast<TokenId>(2 + (t * 7) % 30));
  d.valid.ids.assign(d.train.ids.begin(), d.train.ids.begin() + 300);
  TrainConfig c;
  c.student.context_len = 2;
  c.student.embed_dim = 16;
  c.student.hidden_dim = 32;
  c.optim.lr = 1e-2;
  c.epochs = 15;
  c.batch = {8, 16, false};
  c.record_wall_time = false;
  const TrainResult r = train(c, d);
  std::string curve;
  const bool mono = monotone_topk(r.params, d.valid, &curve);
  all_topk_monotone = all_topk_monotone && mono;
  const std::vector<std::size_t> one{1};
  const double a1 = topk_accuracy(r.params, d.valid, std::span<const std::size_t>(one))[0].accuracy;
  report(11, "top-k accuracy sanity", a1 == 1.0 && all_topk_monotone,
         fmt("memorizable cycle: %s; monotone in k on every trained model: %s", curve.c_str(),
             all_topk_monotone ? "yes" : "no"));
}

}  // namespace

int main() {
  try {
    collapse();
    batched_vs_naive();
    gradients();
    shift_invariance();
    permutation_invariance();
    rank_oracle();
    stepped();
    serialization();
    const Desk desk = load_desk();
    desk_ce(desk);
    desk_kd(desk);
    memorize();
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance aborted: %s\n", e.what());
    return 100;
  }
  std::printf("%d failed\n", failures);
  return std::min(failures, 100);
}

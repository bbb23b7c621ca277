#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmrank/corpus.hpp"
#include "lmrank/loss.hpp"
#include "lmrank/rank_ground_truth.hpp"
#include "lmrank/student.hpp"

namespace lmrank {

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);
void to_json(nlohmann::json& j, const BatchPlan& c);
void from_json(const nlohmann::json& j, BatchPlan& c);

struct TrainConfig {
  StudentConfig student;  // vocab_size 0 means "take it from the vocabulary"
  LossConfig loss;
  OptimConfig optim;
  std::size_t epochs = 20;
  BatchPlan batch{32, 8, false};

  std::filesystem::path train_path;
  std::filesystem::path valid_path;
  std::filesystem::path vocab_path;
  std::filesystem::path ranks_path;  // empty: no rank targets (CE only)

  std::size_t eval_every = 0;  // steps between log rows; 0 logs at epoch ends only
  std::filesystem::path checkpoint_dir;
  std::filesystem::path metrics_path;
  bool record_wall_time = true;  // false writes 0 in wall_ms so logs are byte-reproducible

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_train_config(const std::filesystem::path& path);

struct MetricRow {
  std::uint64_t step = 0;
  double epoch = 0.0;  // fractional epoch of the logged step, the α schedule's input
  double alpha = 1.0;
  double train_loss = 0.0;  // mean per-position loss since the previous row
  double val_ppl = 0.0;
  std::int64_t wall_ms = 0;
};

void write_metrics_csv(std::span<const MetricRow> rows, std::ostream& out);

struct TrainData {
  Vocabulary vocab;
  TokenStream train;
  TokenStream valid;
  std::optional<RankGroundTruth> ranks;
};

/// Loads vocab, splits and (when set) the ranks file named by the config.
TrainData load_train_data(const TrainConfig& config);

struct TrainResult {
  StudentParamsF params;
  std::vector<MetricRow> metrics;
  std::vector<double> step_losses;  // mean loss of every optimizer step
  double final_val_ppl = 0.0;
};

/// Runs the configured number of epochs. Writes checkpoints and the metrics
/// CSV when their paths are set. Throws Error(misalignment) when ranks are
/// missing or do not match the training stream, Error(diverged) on a
/// non-finite loss.
TrainResult train(const TrainConfig& config, const TrainData& data);
TrainResult train(const TrainConfig& config);

struct GradCheckConfig {
  std::size_t n_cases = 100;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 1;
  std::vector<LossVariant> variants = {LossVariant::ce,  LossVariant::kl,  LossVariant::pl,    LossVariant::pl_t,
                                       LossVariant::pl_s, LossVariant::wpl, LossVariant::wpl_s, LossVariant::pwh};
};

struct GradCheckResult {
  LossVariant variant = LossVariant::ce;
  std::size_t cases = 0;
  std::size_t parameters_checked = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckResult> results;
  bool passed = false;
};

/// Relative error used by grad_check: |a - n| / max(|a|, |n|, 1e-6).
double gradient_rel_error(double analytic, double numeric);

/// End-to-end check of d loss / d params in 64-bit: random tiny students
/// (|V| <= 32), contexts, rank rows and α per case, against central
/// differences over every parameter. PWH cases are resampled until every
/// hinge is at least 1e-2 away from its kink.
GradCheckReport grad_check(const GradCheckConfig& config);

}  // namespace lmrank

#include "lmrank/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <numeric>
#include <random>

#include "lmrank/error.hpp"
#include "lmrank/eval.hpp"
#include "lmrank/teacherio.hpp"

namespace lmrank {

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"variant", std::string(loss_variant_name(c.variant))},
       {"k", c.k},
       {"eta", c.eta},
       {"tau", c.tau},
       {"epsilon", c.epsilon},
       {"alpha_min", c.alpha_min},
       {"cycle_epochs", c.cycle_epochs},
       {"margin", c.margin},
       {"n_negatives", c.n_negatives},
       {"average_group_discounts", c.average_group_discounts}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  if (j.contains("variant")) c.variant = parse_loss_variant(j.at("variant").get<std::string>());
  c.k = j.value("k", c.k);
  c.eta = j.value("eta", c.eta);
  c.tau = j.value("tau", c.tau);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.alpha_min = j.value("alpha_min", c.alpha_min);
  c.cycle_epochs = j.value("cycle_epochs", c.cycle_epochs);
  c.margin = j.value("margin", c.margin);
  c.n_negatives = j.value("n_negatives", c.n_negatives);
  c.average_group_discounts = j.value("average_group_discounts", c.average_group_discounts);
}

void to_json(nlohmann::json& j, const BatchPlan& c) {
  j = {{"batch_size", c.batch_size}, {"seq_len", c.seq_len}, {"drop_remainder", c.drop_remainder}};
}

void from_json(const nlohmann::json& j, BatchPlan& c) {
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.drop_remainder = j.value("drop_remainder", c.drop_remainder);
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(Errc::invalid_argument, "epochs must be >= 1");
  if (batch.batch_size < 1 || batch.seq_len < 1) throw Error(Errc::invalid_argument, "batch sizes must be >= 1");
  loss.validate();
  if (!(optim.lr > 0.0)) throw Error(Errc::invalid_argument, "optim.lr must be > 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"student", c.student},
       {"loss", c.loss},
       {"optim", c.optim},
       {"epochs", c.epochs},
       {"batch", c.batch},
       {"paths",
        {{"train", c.train_path.string()},
         {"valid", c.valid_path.string()},
         {"vocab", c.vocab_path.string()},
         {"ranks", c.ranks_path.string()}}},
       {"eval_every", c.eval_every},
       {"checkpoint_dir", c.checkpoint_dir.string()},
       {"metrics", c.metrics_path.string()},
       {"record_wall_time", c.record_wall_time}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("student")) j.at("student").get_to(c.student);
  if (j.contains("loss")) j.at("loss").get_to(c.loss);
  if (j.contains("optim")) j.at("optim").get_to(c.optim);
  c.epochs = j.value("epochs", c.epochs);
  if (j.contains("batch")) j.at("batch").get_to(c.batch);
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    c.train_path = p.value("train", c.train_path.string());
    c.valid_path = p.value("valid", c.valid_path.string());
    c.vocab_path = p.value("vocab", c.vocab_path.string());
    c.ranks_path = p.value("ranks", c.ranks_path.string());
  }
  c.eval_every = j.value("eval_every", c.eval_every);
  c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir.string());
  c.metrics_path = j.value("metrics", c.metrics_path.string());
  c.record_wall_time = j.value("record_wall_time", c.record_wall_time);
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_data, path.string() + ": " + e.what());
  }
  // Relative paths inside the config resolve against the config's directory.
  TrainConfig c = j.get<TrainConfig>();
  const auto base = path.parent_path();
  for (auto* p : {&c.train_path, &c.valid_path, &c.vocab_path, &c.ranks_path, &c.checkpoint_dir, &c.metrics_path})
    if (!p->empty() && p->is_relative()) *p = base / *p;
  return c;
}

void write_metrics_csv(std::span<const MetricRow> rows, std::ostream& out) {
  out << "step,epoch,alpha,train_loss,val_ppl,wall_ms\n" << std::setprecision(17);
  for (const auto& r : rows)
    out << r.step << ',' << r.epoch << ',' << r.alpha << ',' << r.train_loss << ',' << r.val_ppl << ',' << r.wall_ms
        << '\n';
}

TrainData load_train_data(const TrainConfig& config) {
  TrainData data;
  for (const auto* p : {&config.train_path, &config.valid_path, &config.vocab_path})
    if (p->empty() || !std::filesystem::exists(*p))
      throw Error(Errc::io, "missing input file '" + p->string() + "'");
  data.vocab = Vocabulary::load(config.vocab_path);
  data.train = load_corpus(config.train_path, data.vocab);
  data.valid = load_corpus(config.valid_path, data.vocab);
  if (!config.ranks_path.empty()) {
    if (!std::filesystem::exists(config.ranks_path))
      throw Error(Errc::io, "missing ranks file '" + config.ranks_path.string() + "'");
    data.ranks = read_ranks(config.ranks_path);
  }
  return data;
}

namespace {

void check_ranks(const TrainConfig& config, const TrainData& data) {
  if (!uses_ranks(config.loss.variant)) return;
  const auto name = std::string(loss_variant_name(config.loss.variant));
  if (!data.ranks) throw Error(Errc::misalignment, "variant " + name + " needs a ranks file");
  const RankGroundTruth& r = *data.ranks;
  if (r.positions() != data.train.size())
    throw Error(Errc::misalignment, "ranks cover " + std::to_string(r.positions()) + " positions, training stream has " +
                                        std::to_string(data.train.size()));
  if (r.vocab_size() != data.vocab.size())
    throw Error(Errc::misalignment, "ranks vocab_size " + std::to_string(r.vocab_size()) + " != vocabulary size " +
                                        std::to_string(data.vocab.size()));
  r.validate_against(data.train);
  if (uses_teacher_logits(config.loss.variant) && !r.has_logits())
    throw Error(Errc::misalignment, "variant " + name + " needs teacher logits in the ranks file");
}

}  // namespace

TrainResult train(const TrainConfig& config_in, const TrainData& data) {
  TrainConfig config = config_in;
  if (config.student.vocab_size == 0) config.student.vocab_size = data.vocab.size();
  if (config.student.vocab_size != data.vocab.size())
    throw Error(Errc::misalignment, "student vocab_size differs from the vocabulary");
  config.validate();
  check_ranks(config, data);

  const auto t0 = std::chrono::steady_clock::now();
  const LossConfig& lc = config.loss;
  const std::size_t n = config.student.context_len;
  const std::size_t V = config.student.vocab_size;
  const auto batches = batchify(data.train, config.batch);
  const bool schedule = uses_ranks(lc.variant);

  TrainResult result;
  result.params = init_params(config.student);
  OptimState opt = OptimState::create(config.optim, config.student);
  StudentParamsF grads = StudentParamsF::zeros(config.student);
  ForwardCache<float> cache;
  StudentParamsF::Matrix upstream;
  std::vector<TokenId> contexts;
  std::vector<std::size_t> positions;
  std::vector<double> logits(V), teacher;
  RankTargets targets;

  if (!config.checkpoint_dir.empty()) std::filesystem::create_directories(config.checkpoint_dir);
  double pending_loss = 0.0;
  std::size_t pending_steps = 0;
  std::uint64_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch& batch = batches[bi];
      const double global_epoch =
          static_cast<double>(epoch) + static_cast<double>(bi) / static_cast<double>(batches.size());
      const double alpha = schedule ? cycle_alpha(global_epoch, lc.cycle_epochs, lc.alpha_min) : 1.0;

      positions.clear();
      contexts.clear();
      for (std::size_t t : batch.target_index) {
        if (t < n) continue;
        positions.push_back(t);
        contexts.insert(contexts.end(), data.train.ids.begin() + static_cast<std::ptrdiff_t>(t - n),
                        data.train.ids.begin() + static_cast<std::ptrdiff_t>(t));
      }
      if (positions.empty()) continue;
      const auto rows = static_cast<Eigen::Index>(positions.size());
      forward(result.params, contexts, cache);
      upstream.resize(rows, static_cast<Eigen::Index>(V));

      double batch_loss = 0.0;
      for (Eigen::Index r = 0; r < rows; ++r) {
        const std::size_t t = positions[static_cast<std::size_t>(r)];
        for (std::size_t v = 0; v < V; ++v) logits[v] = static_cast<double>(cache.logits(r, static_cast<Eigen::Index>(v)));
        LossInputs in;
        in.gt = data.train.ids[t];
        std::vector<TokenId> negatives;
        if (schedule) {
          const RankGroundTruth& R = *data.ranks;
          const std::size_t k = std::min(lc.k, R.length(t));
          const auto ids = R.ranks(t).first(k);
          const auto grp = R.groups(t).first(k);
          targets.ids.assign(ids.begin(), ids.end());
          targets.groups.assign(grp.begin(), grp.end());
          targets.discounts.clear();
          in.targets = &targets;
          if (R.has_logits()) {
            const auto f = R.logits(t).first(k);
            teacher.assign(f.begin(), f.end());
            in.teacher_logits = teacher;
          }
          if (lc.variant == LossVariant::pwh) {
            negatives = select_negatives(logits, targets.ids, lc.n_negatives);
            in.negatives = negatives;
          }
        }
        const LossValue lv = combined_loss(logits, in, lc, alpha);
        if (!std::isfinite(lv.loss))
          throw Error(Errc::diverged, "non-finite loss at step " + std::to_string(step + 1));
        batch_loss += lv.loss;
        const double scale = 1.0 / static_cast<double>(rows);
        for (std::size_t v = 0; v < V; ++v)
          upstream(r, static_cast<Eigen::Index>(v)) = static_cast<float>(lv.grad[v] * scale);
      }
      batch_loss /= static_cast<double>(rows);

      grads.set_zero();
      backward(result.params, contexts, cache, upstream, grads);
      optimizer_step(opt, result.params, grads);
      ++step;
      result.step_losses.push_back(batch_loss);
      pending_loss += batch_loss;
      ++pending_steps;

      const bool epoch_end = bi + 1 == batches.size();
      const bool due = config.eval_every > 0 && step % config.eval_every == 0;
      if (due || epoch_end) {
        MetricRow row;
        row.step = step;
        row.epoch = global_epoch;
        row.alpha = alpha;
        row.train_loss = pending_loss / static_cast<double>(pending_steps);
        row.val_ppl = perplexity(result.params, data.valid).perplexity;
        if (config.record_wall_time)
          row.wall_ms =
              std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
        result.metrics.push_back(row);
        pending_loss = 0.0;
        pending_steps = 0;
        if (!config.checkpoint_dir.empty() && due)
          save_checkpoint(result.params, data.vocab,
                          config.checkpoint_dir / ("checkpoint-step" + std::to_string(step) + ".lmck"),
                          {{"step", step}, {"epoch", global_epoch}});
      }
    }
  }

  result.final_val_ppl = result.metrics.empty() ? perplexity(result.params, data.valid).perplexity
                                                 : result.metrics.back().val_ppl;
  if (!config.checkpoint_dir.empty()) {
    nlohmann::json extra = {{"step", step}, {"train_config", config}};
    save_checkpoint(result.params, data.vocab, config.checkpoint_dir / "final.lmck", extra);
  }
  if (!config.metrics_path.empty()) {
    if (config.metrics_path.has_parent_path()) std::filesystem::create_directories(config.metrics_path.parent_path());
    std::ofstream out(config.metrics_path, std::ios::binary);
    if (!out) throw Error(Errc::io, "cannot write metrics " + config.metrics_path.string());
    write_metrics_csv(result.metrics, out);
  }
  return result;
}

TrainResult train(const TrainConfig& config) { return train(config, load_train_data(config)); }

double gradient_rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

namespace {

struct GradCase {
  StudentParamsD params;
  std::vector<TokenId> context;
  RankTargets targets;
  std::vector<double> teacher;
  std::vector<TokenId> negatives;
  LossConfig loss;
  double alpha = 1.0;
};

double case_loss(const GradCase& c, const StudentParamsD& params, std::vector<double>* grad) {
  const ForwardOutput out = forward(params, std::span<const TokenId>(c.context));
  LossInputs in;
  in.gt = c.targets.ids[0];
  in.targets = &c.targets;
  in.teacher_logits = c.teacher;
  in.negatives = c.negatives;
  LossValue lv = combined_loss(out.logits, in, c.loss, c.alpha);
  if (grad) *grad = std::move(lv.grad);
  return lv.loss;
}

bool near_hinge_kink(const GradCase& c) {
  const ForwardOutput out = forward(c.params, std::span<const TokenId>(c.context));
  std::vector<TokenId> ids = c.targets.ids;
  ids.insert(ids.end(), c.negatives.begin(), c.negatives.end());
  for (TokenId a : ids)
    for (TokenId b : ids)
      if (a != b && std::abs(c.loss.margin - (out.logits[a] - out.logits[b])) < 1e-2) return true;
  return false;
}

GradCase sample_case(LossVariant variant, std::mt19937_64& rng) {
  auto uniform_int = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  StudentConfig sc;
  sc.vocab_size = uniform_int(6, 32);
  sc.embed_dim = uniform_int(2, 4);
  sc.tie_embeddings = unit(rng) < 0.3;
  sc.hidden_dim = sc.tie_embeddings ? sc.embed_dim : uniform_int(3, 6);
  sc.context_len = uniform_int(1, 3);
  sc.init_scale = 0.5;
  sc.seed = rng();
  GradCase c;
  c.params = init_params(sc).cast<double>();
  // Non-zero biases so their gradients are exercised away from init.
  for (auto& b : c.params.b1) b = unit(rng) - 0.5;
  for (auto& b : c.params.b2) b = unit(rng) - 0.5;
  for (std::size_t i = 0; i < sc.context_len; ++i) c.context.push_back(static_cast<TokenId>(uniform_int(0, sc.vocab_size - 1)));

  const std::size_t k = uniform_int(1, std::min<std::size_t>(8, sc.vocab_size - 1));
  std::vector<TokenId> pool(sc.vocab_size);
  std::iota(pool.begin(), pool.end(), TokenId{0});
  std::shuffle(pool.begin(), pool.end(), rng);
  c.targets.ids.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  c.targets.groups.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    const bool join = i >= 2 && unit(rng) < 0.5;
    c.targets.groups[i] = join ? c.targets.groups[i - 1] : static_cast<std::uint16_t>(i);
  }
  c.teacher.resize(k);
  for (auto& x : c.teacher) x = 4.0 * unit(rng) - 2.0;
  std::sort(c.teacher.begin(), c.teacher.end(), std::greater<>());

  c.loss.variant = variant;
  c.loss.k = k;
  c.loss.eta = 0.2 + 0.4 * unit(rng);
  c.loss.tau = 0.5 + 1.5 * unit(rng);
  c.loss.epsilon = 1e-5;
  c.loss.margin = 1.0;
  c.loss.n_negatives = uniform_int(1, 3);
  c.alpha = 0.1 + 0.8 * unit(rng);
  if (variant == LossVariant::pwh) {
    const ForwardOutput out = forward(c.params, std::span<const TokenId>(c.context));
    c.negatives = select_negatives(out.logits, c.targets.ids, c.loss.n_negatives);
  }
  return c;
}

}  // namespace

GradCheckReport grad_check(const GradCheckConfig& config) {
  GradCheckReport report;
  report.passed = true;
  for (std::size_t vi = 0; vi < config.variants.size(); ++vi) {
    const LossVariant variant = config.variants[vi];
    std::mt19937_64 rng(config.seed * 1000003u + static_cast<std::uint64_t>(variant));
    GradCheckResult res;
    res.variant = variant;
    for (std::size_t ci = 0; ci < config.n_cases; ++ci) {
      GradCase c = sample_case(variant, rng);
      for (int tries = 0; variant == LossVariant::pwh && near_hinge_kink(c); ++tries) {
        if (tries == 1000) throw Error(Errc::invalid_argument, "could not sample a hinge case away from kinks");
        c = sample_case(variant, rng);
      }

      std::vector<double> dlogits;
      case_loss(c, c.params, &dlogits);
      StudentParamsD::Matrix upstream(1, static_cast<Eigen::Index>(dlogits.size()));
      for (std::size_t v = 0; v < dlogits.size(); ++v) upstream(0, static_cast<Eigen::Index>(v)) = dlogits[v];
      StudentParamsD grads = StudentParamsD::zeros(c.params.config);
      ForwardCache<double> cache;
      forward(c.params, std::span<const TokenId>(c.context), cache);
      backward(c.params, std::span<const TokenId>(c.context), cache, upstream, grads);

      StudentParamsD probe = c.params;
      auto pblocks = probe.blocks();
      const auto gblocks = grads.blocks();
      for (std::size_t b = 0; b < pblocks.size(); ++b) {
        for (std::size_t i = 0; i < pblocks[b].values.size(); ++i) {
          double& x = pblocks[b].values[i];
          const double orig = x;
          x = orig + config.step;
          const double up = case_loss(c, probe, nullptr);
          x = orig - config.step;
          const double down = case_loss(c, probe, nullptr);
          x = orig;
          const double numeric = (up - down) / (2.0 * config.step);
          res.max_rel_error = std::max(res.max_rel_error, gradient_rel_error(gblocks[b].values[i], numeric));
          ++res.parameters_checked;
        }
      }
      ++res.cases;
    }
    res.passed = res.max_rel_error < config.tolerance;
    report.passed = report.passed && res.passed;
    report.results.push_back(res);
  }
  return report;
}

}  // namespace lmrank

#include <gtest/gtest.h>

#include <cmath>

#include "lmrank/error.hpp"
#include "lmrank/student.hpp"
#include "test_util.hpp"

using namespace lmrank;
using namespace testutil;

namespace {

StudentConfig tiny(bool tied = false) {
  StudentConfig c;
  c.context_len = 3;
  c.embed_dim = 4;
  c.hidden_dim = tied ? 4 : 5;
  c.vocab_size = 11;
  c.tie_embeddings = tied;
  c.init_scale = 0.5;
  c.seed = 9;
  return c;
}

std::vector<double> flatten(const StudentParamsD& p) {
  std::vector<double> out;
  for (const auto& b : p.blocks()) out.insert(out.end(), b.values.begin(), b.values.end());
  return out;
}

void unflatten(StudentParamsD& p, const std::vector<double>& x) {
  std::size_t i = 0;
  for (auto& b : p.blocks())
    for (double& v : b.values) v = x[i++];
}

}  // namespace

TEST(Student, ZeroParamsGiveUniformLogits) {
  StudentConfig c = tiny();
  c.init_scale = 0.0;
  const StudentParamsF p = init_params(c);
  const std::vector<TokenId> ctx{1, 2, 3};
  const ForwardOutput out = forward(p, std::span<const TokenId>(ctx));
  EXPECT_NEAR(out.log_partition(), std::log(11.0), 1e-12);
  for (double w : out.logits) EXPECT_EQ(w, 0.0);
}

TEST(Student, BatchedForwardMatchesSingleRows) {
  const StudentParamsD p = init_params(tiny()).cast<double>();
  std::mt19937_64 rng(1);
  std::vector<TokenId> ctx;
  for (int i = 0; i < 3 * 7; ++i) ctx.push_back(static_cast<TokenId>(uniform(rng, 0, 10)));
  ForwardCache<double> cache;
  forward(p, std::span<const TokenId>(ctx), cache);
  ASSERT_EQ(cache.rows(), 7u);
  for (std::size_t r = 0; r < 7; ++r) {
    const auto one = forward(p, std::span<const TokenId>(ctx).subspan(3 * r, 3));
    for (std::size_t v = 0; v < 11; ++v) EXPECT_NEAR(cache.logits(r, v), one.logits[v], 1e-13);
  }
}

TEST(Student, OutputDependsOnlyOnTheWindowInOrder) {
  const StudentParamsF p = init_params(tiny());
  const std::vector<TokenId> a{1, 2, 3}, b{3, 2, 1};
  const auto la = forward(p, std::span<const TokenId>(a)).logits;
  EXPECT_EQ(forward(p, std::span<const TokenId>(a)).logits, la);
  EXPECT_NE(forward(p, std::span<const TokenId>(b)).logits, la);
  const std::vector<TokenId> bad{1, 2, 11}, short_ctx{1, 2};
  EXPECT_THROW(forward(p, std::span<const TokenId>(bad)), Error);
  EXPECT_THROW(forward(p, std::span<const TokenId>(short_ctx)), Error);
}

TEST(Student, BackwardMatchesFiniteDifferences) {
  for (bool tied : {false, true}) {
    StudentParamsD p = init_params(tiny(tied)).cast<double>();
    std::mt19937_64 rng(tied ? 2 : 3);
    for (double& x : p.b1) x = std::normal_distribution<double>(0, 0.3)(rng);
    for (double& x : p.b2) x = std::normal_distribution<double>(0, 0.3)(rng);
    std::vector<TokenId> ctx;
    for (int i = 0; i < 3 * 4; ++i) ctx.push_back(static_cast<TokenId>(uniform(rng, 0, 10)));
    StudentParamsD::Matrix up(4, 11);
    for (Eigen::Index i = 0; i < up.size(); ++i) up.data()[i] = std::normal_distribution<double>(0, 1)(rng);

    auto objective = [&](const std::vector<double>& x) {
      StudentParamsD q = p;
      unflatten(q, x);
      ForwardCache<double> cache;
      forward(q, std::span<const TokenId>(ctx), cache);
      return (cache.logits.array() * up.array()).sum();
    };
    ForwardCache<double> cache;
    forward(p, std::span<const TokenId>(ctx), cache);
    StudentParamsD g = StudentParamsD::zeros(p.config);
    backward(p, std::span<const TokenId>(ctx), cache, up, g);
    EXPECT_LT(max_rel_error(flatten(g), numeric_grad(objective, flatten(p))), 1e-6) << "tied=" << tied;
  }
}

TEST(Student, ZeroUpstreamLeavesGradientsAtZero) {
  const StudentParamsD p = init_params(tiny()).cast<double>();
  const std::vector<TokenId> ctx{0, 4, 7};
  ForwardCache<double> cache;
  forward(p, std::span<const TokenId>(ctx), cache);
  StudentParamsD g = StudentParamsD::zeros(p.config);
  backward(p, std::span<const TokenId>(ctx), cache, StudentParamsD::Matrix::Zero(1, 11), g);
  for (double x : flatten(g)) EXPECT_EQ(x, 0.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  StudentParamsF p = StudentParamsF::zeros(tiny());
  p.b2.setConstant(1.0f);
  StudentParamsF g = StudentParamsF::zeros(tiny());
  g.b2.setConstant(0.01f);
  OptimConfig oc;
  oc.clip_norm = 0.0;
  OptimState s = OptimState::create(oc, tiny());
  optimizer_step(s, p, g);
  for (float x : p.b2) EXPECT_NEAR(x, 0.999f, 1e-6f);
  for (float x : p.b1) EXPECT_EQ(x, 0.0f);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, ZeroGradientIsANoOp) {
  StudentParamsF p = init_params(tiny());
  const StudentParamsF before = p;
  StudentParamsF g = StudentParamsF::zeros(tiny());
  OptimState s = OptimState::create({}, tiny());
  for (int i = 0; i < 3; ++i) optimizer_step(s, p, g);
  EXPECT_EQ(p.embed, before.embed);
  EXPECT_EQ(p.w1, before.w1);
}

TEST(Adam, GlobalNormClipping) {
  StudentParamsF p = StudentParamsF::zeros(tiny());
  StudentParamsF g = StudentParamsF::zeros(tiny());
  g.b1(0) = 30.0f;
  g.b1(1) = 40.0f;
  OptimConfig oc;
  oc.clip_norm = 5.0;
  OptimState s = OptimState::create(oc, tiny());
  optimizer_step(s, p, g);
  EXPECT_NEAR(s.last_grad_norm, 50.0, 1e-9);
  EXPECT_NEAR(s.last_clip_scale, 0.1, 1e-12);
  EXPECT_NEAR(s.first.b1(0), 0.1 * 0.1 * 30.0, 1e-6);
}

TEST(Adam, NonFiniteGradientDiverges) {
  StudentParamsF p = StudentParamsF::zeros(tiny());
  StudentParamsF g = StudentParamsF::zeros(tiny());
  g.w1(0, 0) = NAN;
  OptimState s = OptimState::create({}, tiny());
  try {
    optimizer_step(s, p, g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::diverged);
  }
  OptimConfig bad;
  bad.lr = 0.0;
  EXPECT_THROW(OptimState::create(bad, tiny()), Error);
}

TEST(Student, InitIsDeterministicPerSeed) {
  StudentConfig c = tiny();
  EXPECT_EQ(init_params(c).embed, init_params(c).embed);
  c.seed = 10;
  EXPECT_NE(init_params(c).embed, init_params(tiny()).embed);
  const StudentParamsF p = init_params(c);
  EXPECT_LE(p.w1.cwiseAbs().maxCoeff(), 0.5f);
  EXPECT_EQ(p.b1.cwiseAbs().maxCoeff(), 0.0f);
}

TEST(Student, ConfigValidation) {
  StudentConfig c = tiny(true);
  c.hidden_dim = 5;
  EXPECT_THROW(c.validate(), Error);
  c = tiny();
  c.context_len = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Checkpoint, RoundtripKeepsParamsAndVocab) {
  TempDir dir("ckpt");
  for (bool tied : {false, true}) {
    const StudentParamsF p = init_params(tiny(tied));
    std::vector<std::string> toks{"<eos>", "<unk>"};
    for (int i = 0; i < 9; ++i) toks.push_back("w" + std::to_string(i));
    const Vocabulary v = Vocabulary::from_tokens(toks);
    save_checkpoint(p, v, dir.file("m.lmck"), {{"step", 7}});
    const Checkpoint ck = load_checkpoint(dir.file("m.lmck"));
    EXPECT_EQ(ck.vocab, v);
    EXPECT_EQ(ck.params.config.tie_embeddings, tied);
    EXPECT_EQ(ck.params.embed, p.embed);
    EXPECT_EQ(ck.params.w1, p.w1);
    EXPECT_EQ(ck.params.w2, p.w2);
    EXPECT_EQ(ck.params.b2, p.b2);
  }
  dir.write("bad.lmck", "LMCX0000");
  EXPECT_THROW(load_checkpoint(dir.file("bad.lmck")), Error);
  const std::string good = slurp(dir.file("m.lmck"));
  dir.write("short.lmck", good.substr(0, good.size() - 4));
  EXPECT_THROW(load_checkpoint(dir.file("short.lmck")), Error);
}

#include "lmrank/student.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "lmrank/error.hpp"

namespace lmrank {

void StudentConfig::validate() const {
  if (context_len < 1 || embed_dim < 1 || hidden_dim < 1 || vocab_size < 1)
    throw Error(Errc::invalid_argument, "student dimensions must all be >= 1");
  if (!(init_scale >= 0.0)) throw Error(Errc::invalid_argument, "init_scale must be >= 0");
  if (tie_embeddings && hidden_dim != embed_dim)
    throw Error(Errc::invalid_argument, "tied embeddings require hidden_dim == embed_dim");
}

void to_json(nlohmann::json& j, const StudentConfig& c) {
  j = {{"context_len", c.context_len}, {"embed_dim", c.embed_dim},           {"hidden_dim", c.hidden_dim},
       {"vocab_size", c.vocab_size},   {"tie_embeddings", c.tie_embeddings}, {"init_scale", c.init_scale},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, StudentConfig& c) {
  c.context_len = j.value("context_len", c.context_len);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
  c.init_scale = j.value("init_scale", c.init_scale);
  c.seed = j.value("seed", c.seed);
}

void to_json(nlohmann::json& j, const OptimConfig& c) {
  j = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"clip_norm", c.clip_norm}};
}

void from_json(const nlohmann::json& j, OptimConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
}

template <typename Scalar>
StudentParams<Scalar> StudentParams<Scalar>::zeros(const StudentConfig& config) {
  config.validate();
  const auto V = static_cast<Eigen::Index>(config.vocab_size);
  const auto D = static_cast<Eigen::Index>(config.embed_dim);
  const auto H = static_cast<Eigen::Index>(config.hidden_dim);
  const auto N = static_cast<Eigen::Index>(config.context_len);
  StudentParams p;
  p.config = config;
  p.embed = Matrix::Zero(V, D);
  p.w1 = Matrix::Zero(N * D, H);
  p.b1 = RowVector::Zero(H);
  if (!config.tie_embeddings) p.w2 = Matrix::Zero(H, V);
  p.b2 = RowVector::Zero(V);
  return p;
}

template <typename Scalar>
std::vector<typename StudentParams<Scalar>::Block> StudentParams<Scalar>::blocks() {
  auto span_of = [](auto& m) { return std::span<Scalar>(m.data(), static_cast<std::size_t>(m.size())); };
  std::vector<Block> out{{"E", span_of(embed)}, {"W1", span_of(w1)}, {"b1", span_of(b1)}};
  if (!config.tie_embeddings) out.push_back({"W2", span_of(w2)});
  out.push_back({"b2", span_of(b2)});
  return out;
}

template <typename Scalar>
std::vector<typename StudentParams<Scalar>::ConstBlock> StudentParams<Scalar>::blocks() const {
  std::vector<ConstBlock> out;
  for (const auto& b : const_cast<StudentParams*>(this)->blocks()) out.push_back({b.name, b.values});
  return out;
}

template <typename Scalar>
std::size_t StudentParams<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks()) n += b.values.size();
  return n;
}

template <typename Scalar>
void StudentParams<Scalar>::set_zero() {
  for (auto& b : blocks()) std::fill(b.values.begin(), b.values.end(), Scalar(0));
}

template <typename Scalar>
template <typename Other>
StudentParams<Other> StudentParams<Scalar>::cast() const {
  StudentParams<Other> out;
  out.config = config;
  out.embed = embed.template cast<Other>();
  out.w1 = w1.template cast<Other>();
  out.b1 = b1.template cast<Other>();
  out.w2 = w2.template cast<Other>();
  out.b2 = b2.template cast<Other>();
  return out;
}

StudentParamsF init_params(const StudentConfig& config) {
  StudentParamsF p = StudentParamsF::zeros(config);
  std::mt19937_64 gen(config.seed);
  // 53 random bits -> [0, 1) -> [-scale, scale).
  auto draw = [&] {
    const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
    return static_cast<float>((2.0 * u - 1.0) * config.init_scale);
  };
  for (auto& block : p.blocks()) {
    if (std::strcmp(block.name, "b1") == 0 || std::strcmp(block.name, "b2") == 0) continue;
    for (float& x : block.values) x = draw();
  }
  return p;
}

namespace {

template <typename Scalar>
void check_contexts(const StudentParams<Scalar>& params, std::span<const TokenId> contexts) {
  const std::size_t n = params.config.context_len;
  if (contexts.size() % n != 0)
    throw Error(Errc::invalid_argument, "context ids are not a multiple of context_len=" + std::to_string(n));
  for (TokenId id : contexts)
    if (id >= params.config.vocab_size) throw Error(Errc::invalid_argument, "context id out of range");
}

}  // namespace

template <typename Scalar>
void forward(const StudentParams<Scalar>& params, std::span<const TokenId> contexts, ForwardCache<Scalar>& cache) {
  check_contexts(params, contexts);
  const std::size_t n = params.config.context_len;
  const auto D = params.embed.cols();
  const auto rows = static_cast<Eigen::Index>(contexts.size() / n);

  cache.input.resize(rows, static_cast<Eigen::Index>(n) * D);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j)
      cache.input.block(r, static_cast<Eigen::Index>(j) * D, 1, D) =
          params.embed.row(contexts[static_cast<std::size_t>(r) * n + j]);

  cache.hidden.noalias() = cache.input * params.w1;
  cache.hidden.rowwise() += params.b1;
  cache.hidden = cache.hidden.array().tanh().matrix();

  if (params.config.tie_embeddings)
    cache.logits.noalias() = cache.hidden * params.embed.transpose();
  else
    cache.logits.noalias() = cache.hidden * params.w2;
  cache.logits.rowwise() += params.b2;
}

template <typename Scalar>
ForwardOutput forward(const StudentParams<Scalar>& params, std::span<const TokenId> context) {
  if (context.size() != params.config.context_len)
    throw Error(Errc::invalid_argument, "context has " + std::to_string(context.size()) + " ids, expected " +
                                            std::to_string(params.config.context_len));
  ForwardCache<Scalar> cache;
  forward(params, context, cache);
  std::vector<double> logits(static_cast<std::size_t>(cache.logits.cols()));
  for (std::size_t v = 0; v < logits.size(); ++v) logits[v] = static_cast<double>(cache.logits(0, static_cast<Eigen::Index>(v)));
  return ForwardOutput::from_logits(std::move(logits));
}

template <typename Scalar>
void backward(const StudentParams<Scalar>& params, std::span<const TokenId> contexts, const ForwardCache<Scalar>& cache,
              const typename StudentParams<Scalar>::Matrix& upstream, StudentParams<Scalar>& grads) {
  using Matrix = typename StudentParams<Scalar>::Matrix;
  if (upstream.rows() != cache.logits.rows() || upstream.cols() != cache.logits.cols())
    throw Error(Errc::invalid_argument, "upstream gradient shape does not match logits");
  if (grads.embed.rows() != params.embed.rows() || grads.w1.rows() != params.w1.rows())
    throw Error(Errc::invalid_argument, "gradient buffers do not match parameters");
  const std::size_t n = params.config.context_len;
  const auto D = params.embed.cols();

  Matrix d_hidden;
  grads.b2 += upstream.colwise().sum();
  if (params.config.tie_embeddings) {
    grads.embed.noalias() += upstream.transpose() * cache.hidden;
    d_hidden.noalias() = upstream * params.embed;
  } else {
    grads.w2.noalias() += cache.hidden.transpose() * upstream;
    d_hidden.noalias() = upstream * params.w2.transpose();
  }
  // tanh' = 1 - hidden^2
  Matrix d_pre = (d_hidden.array() * (Scalar(1) - cache.hidden.array().square())).matrix();
  grads.w1.noalias() += cache.input.transpose() * d_pre;
  grads.b1 += d_pre.colwise().sum();

  Matrix d_input;
  d_input.noalias() = d_pre * params.w1.transpose();
  for (Eigen::Index r = 0; r < d_input.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j)
      grads.embed.row(contexts[static_cast<std::size_t>(r) * n + j]) +=
          d_input.block(r, static_cast<Eigen::Index>(j) * D, 1, D);
}

OptimState OptimState::create(const OptimConfig& config, const StudentConfig& student) {
  if (!(config.lr > 0.0) || !(config.beta1 >= 0.0 && config.beta1 < 1.0) || !(config.beta2 >= 0.0 && config.beta2 < 1.0) ||
      !(config.eps > 0.0))
    throw Error(Errc::invalid_argument, "invalid optimizer hyperparameters");
  OptimState s;
  s.config = config;
  s.first = StudentParamsF::zeros(student);
  s.second = StudentParamsF::zeros(student);
  return s;
}

void optimizer_step(OptimState& state, StudentParamsF& params, StudentParamsF& grads) {
  auto p_blocks = params.blocks();
  auto g_blocks = grads.blocks();
  auto m_blocks = state.first.blocks();
  auto v_blocks = state.second.blocks();
  if (p_blocks.size() != g_blocks.size() || p_blocks.size() != m_blocks.size())
    throw Error(Errc::invalid_argument, "optimizer block count mismatch");

  double sq = 0.0;
  for (std::size_t b = 0; b < g_blocks.size(); ++b) {
    if (g_blocks[b].values.size() != p_blocks[b].values.size())
      throw Error(Errc::invalid_argument, std::string("gradient shape mismatch in ") + g_blocks[b].name);
    const auto g = Eigen::Map<const Eigen::ArrayXf>(g_blocks[b].values.data(),
                                                    static_cast<Eigen::Index>(g_blocks[b].values.size()));
    const double block_sq = g.cast<double>().square().sum();
    // NaN and inf both survive the sum.
    if (!std::isfinite(block_sq))
      throw Error(Errc::diverged, std::string("non-finite gradient in ") + g_blocks[b].name);
    sq += block_sq;
  }
  const double norm = std::sqrt(sq);
  const OptimConfig& c = state.config;
  const double scale = (c.clip_norm > 0.0 && norm > c.clip_norm) ? c.clip_norm / norm : 1.0;
  state.last_grad_norm = norm;
  state.last_clip_scale = scale;

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double corr1 = 1.0 - std::pow(c.beta1, t);
  const double corr2 = 1.0 - std::pow(c.beta2, t);
  const auto b1 = static_cast<float>(c.beta1), b2 = static_cast<float>(c.beta2);
  const auto fscale = static_cast<float>(scale), lr = static_cast<float>(c.lr), eps = static_cast<float>(c.eps);
  const auto inv1 = static_cast<float>(1.0 / corr1), inv2 = static_cast<float>(1.0 / corr2);
  for (std::size_t b = 0; b < p_blocks.size(); ++b) {
    const auto len = static_cast<Eigen::Index>(p_blocks[b].values.size());
    Eigen::Map<Eigen::ArrayXf> p(p_blocks[b].values.data(), len);
    Eigen::Map<Eigen::ArrayXf> m(m_blocks[b].values.data(), len);
    Eigen::Map<Eigen::ArrayXf> v(v_blocks[b].values.data(), len);
    const Eigen::ArrayXf g = Eigen::Map<const Eigen::ArrayXf>(g_blocks[b].values.data(), len) * fscale;
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.square();
    p -= lr * (m * inv1) / ((v * inv2).sqrt() + eps);
  }
}

namespace {

constexpr char kCheckpointMagic[4] = {'L', 'M', 'C', 'K'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw Error(Errc::truncated, "checkpoint");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

}  // namespace

void save_checkpoint(const StudentParamsF& params, const Vocabulary& vocab, const std::filesystem::path& path,
                     const nlohmann::json& extra) {
  nlohmann::json header = {{"format", "lmrank-checkpoint"},
                           {"version", kCheckpointVersion},
                           {"student", params.config},
                           {"vocab", vocab.tokens()}};
  if (!extra.is_null()) header["extra"] = extra;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out.write(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& block : params.blocks())
    for (float f : block.values) put_u32(out, std::bit_cast<std::uint32_t>(f));
  if (!out) throw Error(Errc::io, "checkpoint write failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw Error(Errc::bad_magic, "not a checkpoint: " + path.string());
  const auto version = get_u32(in);
  if (version != kCheckpointVersion) throw Error(Errc::version_mismatch, "checkpoint version " + std::to_string(version));
  const auto len = get_u32(in);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (static_cast<std::uint32_t>(in.gcount()) != len) throw Error(Errc::truncated, "checkpoint header");

  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(text);
    ck.params = StudentParamsF::zeros(ck.header.at("student").get<StudentConfig>());
    ck.vocab = Vocabulary::from_tokens(ck.header.at("vocab").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_data, std::string("checkpoint header: ") + e.what());
  }
  for (auto& block : ck.params.blocks())
    for (float& f : block.values) f = std::bit_cast<float>(get_u32(in));
  if (in.peek() != std::char_traits<char>::eof()) throw Error(Errc::invalid_data, "trailing bytes in checkpoint");
  return ck;
}

template struct StudentParams<float>;
template struct StudentParams<double>;
template StudentParams<double> StudentParams<float>::cast<double>() const;
template StudentParams<float> StudentParams<double>::cast<float>() const;
template void forward<float>(const StudentParamsF&, std::span<const TokenId>, ForwardCache<float>&);
template void forward<double>(const StudentParamsD&, std::span<const TokenId>, ForwardCache<double>&);
template ForwardOutput forward<float>(const StudentParamsF&, std::span<const TokenId>);
template ForwardOutput forward<double>(const StudentParamsD&, std::span<const TokenId>);
template void backward<float>(const StudentParamsF&, std::span<const TokenId>, const ForwardCache<float>&,
                              const StudentParamsF::Matrix&, StudentParamsF&);
template void backward<double>(const StudentParamsD&, std::span<const TokenId>, const ForwardCache<double>&,
                               const StudentParamsD::Matrix&, StudentParamsD&);

}  // namespace lmrank

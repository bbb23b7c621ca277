#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "lmrank/corpus.hpp"
#include "lmrank/loss.hpp"

namespace lmrank {

struct StudentConfig {
  std::size_t context_len = 5;
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 128;
  std::size_t vocab_size = 0;
  bool tie_embeddings = false;
  double init_scale = 0.1;
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const StudentConfig& c);
void from_json(const nlohmann::json& j, StudentConfig& c);

/// Feedforward window LM:
///   x      = concat(E[ids[0]], ..., E[ids[n-1]])
///   hidden = tanh(x W1 + b1)
///   logits = hidden W2 + b2        (W2 = E^T when embeddings are tied)
/// Rows are examples; all matrices are row-major.
template <typename Scalar>
struct StudentParams {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

  StudentConfig config;
  Matrix embed;   // vocab x embed_dim
  Matrix w1;      // (context_len * embed_dim) x hidden_dim
  RowVector b1;   // hidden_dim
  Matrix w2;      // hidden_dim x vocab; 0x0 when tied
  RowVector b2;   // vocab

  /// Zero-valued parameters (or gradients) with the config's shapes.
  static StudentParams zeros(const StudentConfig& config);

  struct Block {
    const char* name;
    std::span<Scalar> values;
  };
  struct ConstBlock {
    const char* name;
    std::span<const Scalar> values;
  };
  /// Parameter blocks in declaration order: E, W1, b1, W2, b2 (W2 absent when tied).
  std::vector<Block> blocks();
  std::vector<ConstBlock> blocks() const;
  std::size_t parameter_count() const;
  void set_zero();

  template <typename Other>
  StudentParams<Other> cast() const;
};

using StudentParamsF = StudentParams<float>;
using StudentParamsD = StudentParams<double>;

template <typename Scalar>
struct ForwardCache {
  typename StudentParams<Scalar>::Matrix input;   // rows x (context_len * embed_dim)
  typename StudentParams<Scalar>::Matrix hidden;  // rows x hidden_dim
  typename StudentParams<Scalar>::Matrix logits;  // rows x vocab
  std::size_t rows() const { return static_cast<std::size_t>(logits.rows()); }
};

StudentParamsF init_params(const StudentConfig& config);

/// contexts: rows x context_len ids, row-major.
template <typename Scalar>
void forward(const StudentParams<Scalar>& params, std::span<const TokenId> contexts, ForwardCache<Scalar>& cache);

/// Single context, in 64-bit.
template <typename Scalar>
ForwardOutput forward(const StudentParams<Scalar>& params, std::span<const TokenId> context);

/// Accumulates d(sum_r logits_r . upstream_r)/d(params) into grads.
template <typename Scalar>
void backward(const StudentParams<Scalar>& params, std::span<const TokenId> contexts, const ForwardCache<Scalar>& cache,
              const typename StudentParams<Scalar>::Matrix& upstream, StudentParams<Scalar>& grads);

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // <= 0 disables clipping
};

void to_json(nlohmann::json& j, const OptimConfig& c);
void from_json(const nlohmann::json& j, OptimConfig& c);

/// Adam moments for every parameter block.
struct OptimState {
  OptimConfig config;
  StudentParamsF first;
  StudentParamsF second;
  std::uint64_t step = 0;
  double last_grad_norm = 0.0;
  double last_clip_scale = 1.0;

  static OptimState create(const OptimConfig& config, const StudentConfig& student);
};

/// Global-norm clip, then one bias-corrected Adam update. Throws
/// Error(diverged) on non-finite gradients.
void optimizer_step(OptimState& state, StudentParamsF& params, StudentParamsF& grads);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "LMCK" | u32 version | u32 header length | header JSON (config + vocab) |
/// little-endian f32 blocks in declaration order.
void save_checkpoint(const StudentParamsF& params, const Vocabulary& vocab, const std::filesystem::path& path,
                     const nlohmann::json& extra = {});
struct Checkpoint {
  StudentParamsF params;
  Vocabulary vocab;
  nlohmann::json header;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace lmrank

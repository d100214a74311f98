#pragma once

// Toy conditional denoiser: a stack of residual cross-attention layers over a
// small feature grid, a linear noise schedule, and a deterministic DDIM sampler.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "klr/rank1.hpp"
#include "klr/textenc.hpp"

namespace klr {

/// H x W grid of d_f-channel features. Row p = y * width + x of `data` is pixel (x, y).
struct FeatureGrid {
  int height = 0;
  int width = 0;
  int channels = 0;
  Matrix data;  // (height * width) x channels

  FeatureGrid() = default;
  FeatureGrid(int h, int w, int c) : height(h), width(w), channels(c), data(Matrix::Zero(h * w, c)) {}
  FeatureGrid(int h, int w, Matrix values);

  int pixels() const noexcept { return height * width; }
  bool same_shape(const FeatureGrid& other) const noexcept {
    return height == other.height && width == other.width && channels == other.channels;
  }
  /// Throws ContractError on NaN/Inf.
  void require_finite(const char* what) const;
};

FeatureGrid random_normal_grid(int h, int w, int c, std::mt19937_64& rng);

struct Schedule {
  int steps = 0;
  std::vector<double> alpha_bar;

  /// alpha_bar linear in t from `first` (t = 0) to `last` (t = T - 1).
  static Schedule linear(int steps, double first = 0.999, double last = 0.05);
  double at(int t) const;
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
FeatureGrid noisify(const FeatureGrid& x0, int t, const FeatureGrid& eps, const Schedule& s);
FeatureGrid noisify(const FeatureGrid& x0, double alpha_bar, const FeatureGrid& eps);

struct CrossAttentionLayer {
  Matrix w_q;                          // d_k x d_f
  EditedProjection<double> w_k;        // d_k x d_e
  EditedProjection<double> w_v;        // d_v x d_e
  Matrix w_out;                        // d_f x d_v
  double scale;                        // 1 / sqrt(d_k)

  CrossAttentionLayer(Matrix q, EditedProjection<double> k, EditedProjection<double> v, Matrix out);
  int d_k() const noexcept { return static_cast<int>(w_q.rows()); }
  int d_f() const noexcept { return static_cast<int>(w_q.cols()); }
  int d_v() const noexcept { return static_cast<int>(w_out.cols()); }
};

/// Keys and values one layer attends over; rows are prompt tokens.
struct LayerConditioning {
  Matrix keys;    // M x d_k
  Matrix values;  // M x d_v
  int tokens() const noexcept { return static_cast<int>(keys.rows()); }
};
using Conditioning = std::vector<LayerConditioning>;

enum class ProjectionMode { kBase, kGatedSingle, kGatedMulti };

/// Keys/values of one layer for an encoded prompt under the given projection mode.
LayerConditioning project_layer(const CrossAttentionLayer& layer, const EncodedPrompt& ep, ProjectionMode mode,
                                const ConceptBasis<double>* basis = nullptr);

struct AttentionOutput {
  FeatureGrid grid;  // residual output
  Matrix attention;  // pixels x M, rows sum to 1
};

/// Single layer: Q = features W_q^T, A = softmax_tokens(Q K^T / sqrt(d_k)),
/// output = features + (A V) W_out^T.
AttentionOutput attend(const CrossAttentionLayer& layer, const FeatureGrid& grid, const LayerConditioning& kv);
AttentionOutput cross_attention(const CrossAttentionLayer& layer, const FeatureGrid& grid, const EncodedPrompt& ep,
                                ProjectionMode mode, const ConceptBasis<double>* basis = nullptr);

/// The H x W map of one token's attention weights, from an attention matrix.
Matrix attention_map(const Matrix& attention, int token, int height, int width);

/// Normalized entropy H(p) / log(H W) of a nonnegative map.
double attention_spread(const Matrix& map);

class Denoiser {
 public:
  Denoiser(std::vector<CrossAttentionLayer> layers, Schedule schedule, int height, int width);

  struct Trace {
    int t = 0;
    std::vector<Matrix> inputs;     // residual stream entering each layer
    std::vector<Matrix> queries;
    std::vector<Matrix> attention;  // pixels x M per layer
  };

  const std::vector<CrossAttentionLayer>& layers() const noexcept { return layers_; }
  const Schedule& schedule() const noexcept { return schedule_; }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return layers_.front().d_f(); }

  /// Base-model keys and values (no edits) for a prompt.
  Conditioning condition_base(const EncodedPrompt& ep) const;

  /// x0 estimate: the content written by all attention layers into the
  /// residual stream that starts at x_t. Empty conditioning writes nothing.
  FeatureGrid predict_x0(const FeatureGrid& x_t, const Conditioning& cond, Trace* trace = nullptr) const;

  /// eps_hat = (x_t - sqrt(abar_t) x0_hat) / sqrt(1 - abar_t).
  FeatureGrid predict_noise(const FeatureGrid& x_t, int t, const Conditioning& cond, Trace* trace = nullptr) const;

  /// dL/dK and dL/dV for every layer, given dL/d(eps_hat) of a traced predict_noise call.
  Conditioning backward(const Trace& trace, const Conditioning& cond, const Matrix& d_noise) const;

 private:
  void check_conditioning(const Conditioning& cond) const;

  std::vector<CrossAttentionLayer> layers_;
  Schedule schedule_;
  int height_;
  int width_;
};

using NoisePredictor = std::function<FeatureGrid(const FeatureGrid& x_t, int t)>;

struct SampleOptions {
  int steps = 10;
  double guidance = 1.0;
  std::uint64_t seed = 0;
  int height = 8;
  int width = 8;
  int channels = 16;
};

/// Timesteps visited by an n-step DDIM trajectory, from T-1 down to 0.
std::vector<int> ddim_timesteps(int total_steps, int n_steps);

/// Deterministic DDIM (eta = 0). The noise estimate is
/// eps_u + guidance * (eps_c - eps_u); with guidance == 1 only `conditional` runs.
/// `observer`, when set, sees every x_t before its update.
FeatureGrid ddim_sample(const NoisePredictor& conditional, const NoisePredictor& unconditional, const Schedule& s,
                        const SampleOptions& options,
                        const std::function<void(int step, int t, const FeatureGrid& x_t)>& observer = {});

}  // namespace klr

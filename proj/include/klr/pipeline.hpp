#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "klr/diffuser.hpp"
#include "klr/metric.hpp"
#include "klr/textenc.hpp"

namespace klr {

struct PipelineConfig {
  std::uint64_t seed = 7;
  int d_w = 32;
  int d_e = 32;
  int d_f = 16;
  int d_k = 16;
  int d_v = 16;
  int layers = 3;
  int height = 8;
  int width = 8;
  int diffusion_steps = 50;
  int max_tokens = 16;
  double mix_strength = 0.3;
  /// Synthetic captions whose encodings estimate the covariance C.
  int corpus_prompts = 512;
  /// Ridge added to C. Unset: zero when the corpus spans the encoding space,
  /// otherwise 1e-6 * trace(C) / d_e.
  std::optional<double> cov_ridge;
  double query_gain = 1.0;
  double key_gain = 1.0;
  double value_gain = 1.0;
  double out_gain = 1.0;
  /// Empty: the built-in 32-word vocabulary.
  std::filesystem::path vocabulary_file;
};

/// Text encoder + cross-attention denoiser + the shared metric C^-1.
/// Weights are drawn from the config seed; nothing is trained here.
class ToyPipeline {
 public:
  /// Estimates C from the synthetic caption corpus.
  explicit ToyPipeline(const PipelineConfig& config);
  /// Uses a cached metric instead; its dimension must equal d_e.
  ToyPipeline(const PipelineConfig& config, MetricSpace<double> metric);

  const PipelineConfig& config() const noexcept { return config_; }
  const TextEncoder& encoder() const noexcept { return *encoder_; }
  const Denoiser& denoiser() const noexcept { return *denoiser_; }
  const Schedule& schedule() const noexcept { return denoiser_->schedule(); }
  const MetricSpace<double>& metric() const noexcept { return *metric_; }
  const std::shared_ptr<const MetricSpace<double>>& metric_ptr() const noexcept { return metric_; }
  int layer_count() const noexcept { return static_cast<int>(denoiser_->layers().size()); }
  const CrossAttentionLayer& layer(int l) const { return denoiser_->layers().at(static_cast<std::size_t>(l)); }
  double ridge_used() const noexcept { return ridge_used_; }

  /// Encodings (one per token position) of the synthetic caption corpus.
  std::vector<Vector> covariance_corpus() const;

  /// Prototype image feature of a superclass: the feature direction whose queries
  /// best match the superclass keys across layers, scaled to `amplitude`.
  Vector superclass_feature(std::string_view superclass, double amplitude) const;

 private:
  void build_model();

  PipelineConfig config_;
  std::unique_ptr<TextEncoder> encoder_;
  std::shared_ptr<const MetricSpace<double>> metric_;
  std::unique_ptr<Denoiser> denoiser_;
  double ridge_used_ = 0.0;
};

/// Encodings (one per token position) of seeded random captions over the vocabulary.
std::vector<Vector> caption_corpus(const TextEncoder& encoder, const PipelineConfig& config);

/// Covariance from the corpus, with the ridge policy of PipelineConfig.
MetricSpace<double> estimate_pipeline_metric(const TextEncoder& encoder, const PipelineConfig& config,
                                             double* ridge_used = nullptr);

}  // namespace klr

#include "klr/pipeline.hpp"

#include <algorithm>
#include <random>

#include "klr/error.hpp"
#include "klr/random.hpp"

namespace klr {

namespace {

constexpr std::uint64_t kCorpusStream = 0x636f72707573ULL;
constexpr std::uint64_t kLayerStream = 0x6c61796572ULL;

Vocabulary make_vocabulary(const PipelineConfig& c) {
  if (c.vocabulary_file.empty()) return Vocabulary(Vocabulary::default_tokens(), c.d_w, c.seed);
  return Vocabulary::from_file(c.vocabulary_file, c.d_w, c.seed);
}

void validate(const PipelineConfig& c) {
  if (c.d_w <= 0 || c.d_e <= 0 || c.d_f <= 0 || c.d_k <= 0 || c.d_v <= 0) {
    throw ConfigError("all dimensions must be positive");
  }
  if (c.layers <= 0) throw ConfigError("layer count must be positive");
  if (c.height <= 0 || c.width <= 0) throw ConfigError("grid size must be positive");
  if (c.corpus_prompts <= 0) throw ConfigError("corpus_prompts must be positive");
  if (c.cov_ridge && *c.cov_ridge < 0) throw ConfigError("cov_ridge must be nonnegative");
}

}  // namespace

std::vector<Vector> caption_corpus(const TextEncoder& encoder, const PipelineConfig& config) {
  auto rng = make_rng(config.seed, kCorpusStream);
  const auto& vocab = encoder.vocabulary();
  std::uniform_int_distribution<int> word(0, vocab.size() - 1);
  const int max_len = std::min(encoder.max_tokens(), 12);
  std::uniform_int_distribution<int> length(std::min(3, max_len), max_len);

  std::vector<Vector> samples;
  for (int p = 0; p < config.corpus_prompts; ++p) {
    std::vector<std::string> tokens(static_cast<std::size_t>(length(rng)));
    for (auto& t : tokens) t = vocab.token(word(rng));
    const Matrix enc = encoder.encode(tokens).encodings;
    for (Eigen::Index r = 0; r < enc.rows(); ++r) samples.emplace_back(enc.row(r).transpose());
  }
  return samples;
}

MetricSpace<double> estimate_pipeline_metric(const TextEncoder& encoder, const PipelineConfig& config,
                                             double* ridge_used) {
  const std::vector<Vector> samples = caption_corpus(encoder, config);
  double ridge = 0.0;
  if (config.cov_ridge) {
    ridge = *config.cov_ridge;
  } else {
    // Rank test on the unregularized covariance; only rank-deficient corpora get the default ridge.
    const Matrix c0 = uncentered_covariance<double>(samples, 0.0);
    const bool full_rank = static_cast<Eigen::Index>(samples.size()) >= c0.rows() &&
                           Eigen::FullPivLU<Matrix>(c0).rank() == c0.rows();
    if (!full_rank) ridge = default_ridge<double>(samples);
  }
  if (ridge_used) *ridge_used = ridge;
  return estimate_covariance<double>(samples, ridge);
}

ToyPipeline::ToyPipeline(const PipelineConfig& config) : config_(config) {
  validate(config_);
  encoder_ = std::make_unique<TextEncoder>(make_vocabulary(config_), config_.d_e, config_.mix_strength, config_.seed,
                                           config_.max_tokens);
  metric_ = std::make_shared<const MetricSpace<double>>(estimate_pipeline_metric(*encoder_, config_, &ridge_used_));
  build_model();
}

ToyPipeline::ToyPipeline(const PipelineConfig& config, MetricSpace<double> metric) : config_(config) {
  validate(config_);
  if (metric.dim() != config_.d_e) {
    throw LoadError("covariance has dimension " + std::to_string(metric.dim()) + ", pipeline d_e is " +
                    std::to_string(config_.d_e));
  }
  encoder_ = std::make_unique<TextEncoder>(make_vocabulary(config_), config_.d_e, config_.mix_strength, config_.seed,
                                           config_.max_tokens);
  metric_ = std::make_shared<const MetricSpace<double>>(std::move(metric));
  build_model();
}

void ToyPipeline::build_model() {
  const auto& c = config_;
  std::vector<CrossAttentionLayer> layers;
  layers.reserve(static_cast<std::size_t>(c.layers));
  for (int l = 0; l < c.layers; ++l) {
    auto rng = make_rng(c.seed, kLayerStream + static_cast<std::uint64_t>(l));
    Matrix w_q = random_normal(c.d_k, c.d_f, rng, c.query_gain / std::sqrt(double(c.d_f)));
    Matrix w_k = random_normal(c.d_k, c.d_e, rng, c.key_gain / std::sqrt(double(c.d_e)));
    Matrix w_v = random_normal(c.d_v, c.d_e, rng, c.value_gain / std::sqrt(double(c.d_e)));
    Matrix w_out = random_normal(c.d_f, c.d_v, rng, c.out_gain / std::sqrt(double(c.d_v)));
    layers.emplace_back(std::move(w_q), EditedProjection<double>(std::move(w_k), metric_),
                        EditedProjection<double>(std::move(w_v), metric_), std::move(w_out));
  }
  denoiser_ = std::make_unique<Denoiser>(std::move(layers), Schedule::linear(c.diffusion_steps), c.height, c.width);
}

std::vector<Vector> ToyPipeline::covariance_corpus() const { return caption_corpus(*encoder_, config_); }

Vector ToyPipeline::superclass_feature(std::string_view superclass, double amplitude) const {
  Vector dir = Vector::Zero(config_.d_f);
  for (const auto& layer : denoiser_->layers()) {
    const Vector key = superclass_target(*encoder_, kInitTemplate, superclass, layer.w_k.weight());
    const Vector q = layer.w_q.transpose() * key;
    dir += q.normalized();
  }
  return amplitude * dir.normalized();
}

}  // namespace klr

#pragma once

// Run configuration: `key = value` lines grouped in [sections]. A manifest is
// the same format with every field resolved, so it can be fed back verbatim.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "klr/concept.hpp"
#include "klr/personalize.hpp"
#include "klr/pipeline.hpp"
#include "klr/store.hpp"

namespace klr {

inline constexpr double kLocalLockBeta = 0.675;
inline constexpr double kGlobalLockBeta = 0.5;
inline constexpr double kInferenceTau = 0.15;

/// Inference-time bias for a lock mode when none is given.
double default_inference_beta(LockMode lock);

struct RunConfig {
  std::uint64_t seed = 7;  // drives pipeline weights, data, training and sampling
  PipelineConfig pipeline;
  TrainConfig train;
  SyntheticConfig data;
  std::string superclass = "teddy";
  std::string concept_name = "concept";
  std::filesystem::path covariance;  // optional cached metric
  int seeds = 5;                     // consecutive seeds visited by multi-seed experiments

  std::optional<double> beta;  // inference bias; default depends on the lock mode
  double tau = kInferenceTau;
  LockMode lock = LockMode::kLocal;
  double guidance = 1.0;
  int ddim_steps = 10;
  Precision precision = Precision::kF32;

  std::string prompt = "a photo of a S*";
  std::vector<std::string> concepts;  // "[TOKEN=]PATH" specs
  std::vector<double> sweep_betas;    // empty: 0.5, 0.6, 0.675, 0.75, 0.9
  std::vector<double> sweep_taus;     // empty: the training and inference temperatures

  double resolved_beta() const { return beta ? *beta : default_inference_beta(lock); }
  /// Copies `seed` into the pipeline and training configs.
  void sync_seed();
};

/// Parses a config file; unknown sections or keys are rejected.
RunConfig load_run_config(const std::filesystem::path& path);
/// Applies the file on top of `base`.
void merge_run_config(RunConfig& base, const std::filesystem::path& path);

/// Every field, doubles printed so they parse back to the same bits.
std::string manifest_text(const RunConfig& cfg, const std::vector<std::pair<std::string, std::string>>& extra = {});

}  // namespace klr

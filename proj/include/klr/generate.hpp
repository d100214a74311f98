#pragma once

// Prompt-to-grid sampling with zero, one or several attached concepts.

#include <cstdint>
#include <string>
#include <vector>

#include "klr/concept.hpp"
#include "klr/diffuser.hpp"
#include "klr/pipeline.hpp"

namespace klr {

struct GenerateRequest {
  std::vector<std::string> tokens;
  std::vector<BoundConcept> concepts;
  ConditionOptions options;
  double guidance = 1.0;
  int steps = 10;
  std::uint64_t seed = 7;
};

struct ConceptGates {
  std::string token;
  GateReport report;
};

struct GenerateResult {
  FeatureGrid sample;
  ConditionedPrompt conditioned;
  Denoiser::Trace final_trace;  // denoiser pass on the finished sample
  std::vector<ConceptGates> gates;
};

/// Keys/values with zero tokens for every layer: the unconditional branch.
Conditioning empty_conditioning(const ToyPipeline& pipeline);

GenerateResult generate(const ToyPipeline& pipeline, const GenerateRequest& request);

/// Attention-spread of one token averaged over the layers of a trace.
double mean_token_spread(const Denoiser& denoiser, const Denoiser::Trace& trace, int token);

}  // namespace klr

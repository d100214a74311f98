#include "klr/generate.hpp"

#include "klr/error.hpp"

namespace klr {

Conditioning empty_conditioning(const ToyPipeline& pipeline) {
  Conditioning cond;
  for (int l = 0; l < pipeline.layer_count(); ++l) {
    const auto& layer = pipeline.layer(l);
    cond.push_back({Matrix(0, layer.d_k()), Matrix(0, layer.d_v())});
  }
  return cond;
}

GenerateResult generate(const ToyPipeline& pipeline, const GenerateRequest& request) {
  if (request.tokens.empty()) throw ContractError("prompt is empty");
  GenerateResult out;
  out.conditioned = condition_prompt(pipeline, request.tokens, request.concepts, request.options);
  const auto& den = pipeline.denoiser();
  const Conditioning& cond = out.conditioned.conditioning;
  const Conditioning uncond = empty_conditioning(pipeline);

  SampleOptions so;
  so.steps = request.steps;
  so.guidance = request.guidance;
  so.seed = request.seed;
  so.height = den.height();
  so.width = den.width();
  so.channels = den.channels();
  out.sample = ddim_sample([&](const FeatureGrid& x, int t) { return den.predict_noise(x, t, cond); },
                           [&](const FeatureGrid& x, int t) { return den.predict_noise(x, t, uncond); },
                           pipeline.schedule(), so);
  den.predict_x0(out.sample, cond, &out.final_trace);

  for (const auto& b : request.concepts) {
    const double beta = request.options.beta ? *request.options.beta : (b.beta ? *b.beta : b.ref->beta);
    out.gates.push_back({b.token, gate_report(pipeline, out.conditioned.prompt, *b.ref, {beta, request.options.tau})});
  }
  return out;
}

double mean_token_spread(const Denoiser& denoiser, const Denoiser::Trace& trace, int token) {
  if (trace.attention.empty()) throw ContractError("trace has no attention maps");
  double total = 0.0;
  for (const auto& a : trace.attention) {
    if (token < 0 || token >= a.cols()) throw ContractError("token index outside the attention map");
    total += attention_spread(attention_map(a, token, denoiser.height(), denoiser.width()));
  }
  return total / static_cast<double>(trace.attention.size());
}

}  // namespace klr

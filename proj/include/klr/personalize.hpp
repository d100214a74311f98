#pragma once

// Concept training through the gated edit, the masked diffusion loss, the
// synthetic concept dataset, and the two diagnostic experiments (train versus
// inference mismatch of the plain closed-form edit, and trained-K ablation).

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "klr/concept.hpp"
#include "klr/diffuser.hpp"
#include "klr/pipeline.hpp"

namespace klr {

struct TrainingSample {
  std::vector<std::string> prompt;  // contains the placeholder
  FeatureGrid target;               // clean features x0
  Matrix mask;                      // height x width, nonnegative; entry (y, x)
};

/// mask / max(mask). Throws DegenerateInputError for an all-zero mask.
Matrix normalized_mask(const Matrix& mask);

/// mean over pixels and channels of mask(x, y) * (pred - truth)^2, mask normalized by its max.
double masked_loss(const FeatureGrid& pred, const FeatureGrid& truth, const Matrix& mask);
/// dL/dpred of masked_loss, pixels x channels.
Matrix masked_loss_gradient(const FeatureGrid& pred, const FeatureGrid& truth, const Matrix& mask);

struct SyntheticConfig {
  int images = 4;
  double amplitude = 3.0;    // norm of the superclass prototype feature
  double appearance = 1.5;   // norm of the concept-specific offset from the prototype
  double background = 1.0;   // per-image background feature norm
  double texture = 0.05;     // per-pixel noise stddev on the target
  bool one_shot = false;     // a single image and a single template
};

/// Elliptical soft masks around an object feature that is the superclass
/// prototype plus a fixed concept-specific offset; every image is paired with
/// every training template.
std::vector<TrainingSample> synthetic_dataset(const ToyPipeline& pipeline, std::string_view superclass,
                                              std::uint64_t seed, const SyntheticConfig& config = {});

struct ValidationItem {
  int sample = 0;
  int t = 0;
  FeatureGrid eps;
};

/// Seeded validation draws; timesteps are evenly spaced over [0, T).
std::vector<ValidationItem> validation_items(const std::vector<TrainingSample>& dataset, const ToyPipeline& pipeline,
                                             std::uint64_t seed, int count = 16);

struct TrainConfig {
  double lr_o = 0.03;
  double lr_embed = 0.006;
  int steps = 400;
  int batch = 16;
  GateParams<double> gate{0.75, 0.1};
  double ema_decay = kEmaDecay;
  std::uint64_t seed = 7;
  bool train_keys = false;         // ablation: learn o*^K as well
  std::optional<int> select_step;  // return the concept after this many steps
};

struct StepRecord {
  int step = 0;
  double loss = 0.0;
  double gate_mean = 0.0;  // gate at the placeholder, averaged over the batch
  double i_star_norm = 0.0;
};

struct TrainResult {
  Concept concept_state;
  std::vector<StepRecord> log;
};

using StepObserver = std::function<void(const StepRecord&)>;

/// Plain SGD on o*^V (and o*^K when train_keys) and the placeholder embedding,
/// with i* updated by EMA from the batch-mean placeholder encoding before the
/// gated forward pass of each step.
TrainResult train_concept(const Concept& init, const std::vector<TrainingSample>& dataset, const TrainConfig& cfg,
                          const ToyPipeline& pipeline, const StepObserver& observer = {});

struct SampleEvaluation {
  double loss = 0.0;
  ConceptGradient gradient;  // empty unless requested
};

/// Masked loss of one (sample, t, eps) draw under the gated training view,
/// optionally with the gradient w.r.t. the concept's trainable parameters.
SampleEvaluation evaluate_sample(const ToyPipeline& pipeline, const Concept& concept_state,
                                 const TrainingSample& sample, int t, const FeatureGrid& eps,
                                 const GateParams<double>& gate, bool with_gradient);

double validation_loss(const ToyPipeline& pipeline, const Concept& concept_state,
                       const std::vector<TrainingSample>& dataset, const std::vector<ValidationItem>& items,
                       const GateParams<double>& gate);

/// Conditioning-agnostic validation loss: `condition` maps a sample's encoded prompt to keys/values.
double validation_loss(const ToyPipeline& pipeline, const std::vector<TrainingSample>& dataset,
                       const std::vector<ValidationItem>& items, const EmbeddingOverrides& overrides,
                       const std::function<Conditioning(const EncodedPrompt&)>& condition);

/// Mean attention_spread of the placeholder token over layers and validation draws.
double mean_attention_spread(const ToyPipeline& pipeline, const Concept& concept_state,
                             const std::vector<TrainingSample>& dataset, const std::vector<ValidationItem>& items,
                             const GateParams<double>& gate);

/// Keys/values with the placeholder row replaced by per-layer targets; every
/// other row uses the base projection.
Conditioning condition_replaced(const ToyPipeline& pipeline, const EncodedPrompt& ep, int index,
                                const std::vector<Vector>& key_targets, const std::vector<Vector>& value_targets);

/// Keys/values through the closed-form edited weights applied to every token.
Conditioning condition_closed_form(const ToyPipeline& pipeline, const EncodedPrompt& ep, const Vector& i_star,
                                   const std::vector<Vector>& key_targets, const std::vector<Vector>& value_targets);

struct MismatchReport {
  double loss_a_train = 0.0;  // plain edit, loss in the replacement view it was trained in
  double loss_a_eval = 0.0;   // same targets, closed-form weights applied to every token
  double loss_b = 0.0;        // end-to-end gated training
  double gap() const noexcept { return loss_a_eval - loss_a_train; }
};

/// Variant A fixes the embedding to the superclass word and i* to the mean
/// placeholder encoding over the training prompts, then trains o*^V with the
/// edit applied only at the placeholder index. Variant B is train_concept.
MismatchReport reproduce_mismatch(const std::vector<TrainingSample>& dataset, const TrainConfig& cfg,
                                  const ToyPipeline& pipeline, std::string_view superclass);

struct AblationReport {
  double spread_trained_keys = 0.0;
  double spread_locked = 0.0;
  double loss_trained_keys = 0.0;
  double loss_locked = 0.0;
};

AblationReport key_lock_ablation(const std::vector<TrainingSample>& dataset, const TrainConfig& cfg,
                                 const ToyPipeline& pipeline, std::string_view superclass);

/// Placeholder position of an encoded prompt; ContractError when absent.
int placeholder_index(const EncodedPrompt& ep, std::string_view token = kPlaceholder);

}  // namespace klr

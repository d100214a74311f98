#pragma once

// A personalized concept and the machinery that turns (prompt, concepts) into
// per-layer keys and values for the denoiser.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "klr/diffuser.hpp"
#include "klr/pipeline.hpp"
#include "klr/rank1.hpp"

namespace klr {

struct Concept {
  std::string name;
  std::string superclass;
  Vector embedding;                  // learned word embedding (d_w)
  Vector i_star;                     // EMA target-input, shared by every layer (d_e)
  std::vector<Vector> key_targets;   // o*^K per layer, frozen unless key_trainable
  std::vector<Vector> value_targets; // o*^V per layer, learned
  double beta = 0.75;
  bool key_trainable = false;
  GateParams<double> train_gate{0.75, 0.1};

  int layers() const noexcept { return static_cast<int>(value_targets.size()); }
  ConceptEdit<double> key_edit(int layer) const;
  ConceptEdit<double> value_edit(int layer) const;
};

/// Embedding copied from the superclass word; o* = W e_superclass and
/// i* = e_superclass, with e_superclass read from "a photo of a <superclass>".
Concept init_concept(const std::string& name, const std::string& superclass, const ToyPipeline& pipeline);

enum class LockMode {
  kNone,    // K pathway unedited; only V carries the concept
  kLocal,   // gated rank-1 K edit towards the superclass key
  kGlobal,  // K of the whole prompt replaced by the superclass-prompt K
};

const char* to_string(LockMode mode);
LockMode parse_lock_mode(std::string_view text);

/// A concept bound to the placeholder token that invokes it.
struct BoundConcept {
  const Concept* ref = nullptr;
  std::string token{kPlaceholder};
  std::optional<double> beta;  // overrides ref->beta
};

struct ConditionOptions {
  LockMode lock = LockMode::kLocal;
  double tau = 0.15;
  std::optional<double> beta;  // overrides every concept's beta
};

struct ConditionedPrompt {
  EncodedPrompt prompt;
  Conditioning conditioning;
  std::optional<ConceptBasis<double>> basis;  // set for more than one concept
  std::vector<CrossAttentionLayer> layers;    // layers with the edits attached
};

/// Keys/values for a prompt with zero, one (gated single) or several
/// (gated multi) concepts attached to every layer.
ConditionedPrompt condition_prompt(const ToyPipeline& pipeline, const std::vector<std::string>& tokens,
                                   std::span<const BoundConcept> concepts, const ConditionOptions& options);

/// Layers of the pipeline with the concept's K and V edits attached.
std::vector<CrossAttentionLayer> edited_layers(const ToyPipeline& pipeline, std::span<const BoundConcept> concepts,
                                               double tau);

/// Gated single-concept keys/values on both pathways, as used during training.
Conditioning condition_gated(const ToyPipeline& pipeline, const EncodedPrompt& ep, const Concept& cpt,
                             const GateParams<double>& gate);

/// Global key-locking: V from the concept prompt (gated), K from the prompt with
/// every concept token replaced by its superclass word, through the unedited W_K.
Conditioning global_key_lock(const ToyPipeline& pipeline, const std::vector<std::string>& tokens,
                             std::span<const BoundConcept> concepts, double tau);
Conditioning global_key_lock(const ToyPipeline& pipeline, const std::vector<std::string>& tokens,
                             const Concept& cpt, double tau = 0.15);

struct ConceptGradient {
  Vector embedding;
  std::vector<Vector> key_targets;
  std::vector<Vector> value_targets;
};

/// Chains dL/dK, dL/dV of condition_gated back to o*^K, o*^V and the placeholder
/// embedding. i* is treated as a constant.
ConceptGradient concept_gradient(const ToyPipeline& pipeline, const EncodedPrompt& ep, const Concept& cpt,
                                 const GateParams<double>& gate, const Conditioning& d_conditioning,
                                 std::string_view token = kPlaceholder);

/// Per-token (ratio, gate) of a concept against a prompt.
struct GateReport {
  Vector ratios;
  Vector gates;
};
GateReport gate_report(const ToyPipeline& pipeline, const EncodedPrompt& ep, const Concept& cpt,
                       const GateParams<double>& gate);

void check_compatible(const Concept& cpt, const ToyPipeline& pipeline);

}  // namespace klr

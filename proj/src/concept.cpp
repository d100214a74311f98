#include "klr/concept.hpp"

#include <algorithm>

#include "klr/error.hpp"

namespace klr {

ConceptEdit<double> Concept::key_edit(int layer) const {
  return {i_star, key_targets.at(static_cast<std::size_t>(layer)), key_trainable, beta};
}

ConceptEdit<double> Concept::value_edit(int layer) const {
  return {i_star, value_targets.at(static_cast<std::size_t>(layer)), true, beta};
}

void check_compatible(const Concept& cpt, const ToyPipeline& pipeline) {
  const auto& cfg = pipeline.config();
  auto mismatch = [&](const std::string& what, long have, long want) {
    throw LoadError("concept '" + cpt.name + "' " + what + " is " + std::to_string(have) + ", pipeline expects " +
                    std::to_string(want));
  };
  if (cpt.embedding.size() != cfg.d_w) mismatch("d_w", cpt.embedding.size(), cfg.d_w);
  if (cpt.i_star.size() != cfg.d_e) mismatch("d_e", cpt.i_star.size(), cfg.d_e);
  if (cpt.layers() != pipeline.layer_count() ||
      cpt.key_targets.size() != cpt.value_targets.size()) {
    mismatch("layer count", cpt.layers(), pipeline.layer_count());
  }
  for (int l = 0; l < cpt.layers(); ++l) {
    const auto& layer = pipeline.layer(l);
    if (cpt.key_targets[static_cast<std::size_t>(l)].size() != layer.d_k()) {
      mismatch("d_k of layer " + std::to_string(l), cpt.key_targets[static_cast<std::size_t>(l)].size(),
               layer.d_k());
    }
    if (cpt.value_targets[static_cast<std::size_t>(l)].size() != layer.d_v()) {
      mismatch("d_v of layer " + std::to_string(l), cpt.value_targets[static_cast<std::size_t>(l)].size(),
               layer.d_v());
    }
  }
  if (!pipeline.encoder().vocabulary().contains(cpt.superclass)) throw VocabularyError(cpt.superclass);
}

Concept init_concept(const std::string& name, const std::string& superclass, const ToyPipeline& pipeline) {
  const auto& enc = pipeline.encoder();
  const int word = enc.vocabulary().index_of(superclass);

  auto tokens = tokenize(kInitTemplate);
  const int index = static_cast<int>(std::find(tokens.begin(), tokens.end(), kPlaceholder) - tokens.begin());
  tokens = replace_token(std::move(tokens), kPlaceholder, superclass);
  const EncodedPrompt ep = enc.encode(tokens);
  const Vector e_super = ep.encodings.row(index).transpose();

  Concept c;
  c.name = name;
  c.superclass = superclass;
  c.embedding = enc.vocabulary().embedding(word);
  c.i_star = e_super;
  for (int l = 0; l < pipeline.layer_count(); ++l) {
    const auto& layer = pipeline.layer(l);
    c.key_targets.push_back(layer.w_k.weight() * e_super);
    c.value_targets.push_back(layer.w_v.weight() * e_super);
  }
  return c;
}

const char* to_string(LockMode mode) {
  switch (mode) {
    case LockMode::kNone: return "none";
    case LockMode::kLocal: return "local";
    case LockMode::kGlobal: return "global";
  }
  return "?";
}

LockMode parse_lock_mode(std::string_view text) {
  if (text == "none") return LockMode::kNone;
  if (text == "local") return LockMode::kLocal;
  if (text == "global") return LockMode::kGlobal;
  throw ConfigError("unknown lock mode '" + std::string(text) + "' (expected none|local|global)");
}

namespace {

EmbeddingOverrides overrides_for(std::span<const BoundConcept> concepts) {
  EmbeddingOverrides out;
  for (const auto& b : concepts) {
    if (!b.ref) throw ContractError("bound concept is null");
    if (!is_placeholder(b.token)) throw ContractError("concept token '" + b.token + "' must end in '*'");
    if (!out.emplace(b.token, b.ref->embedding).second) {
      throw ContractError("concept token '" + b.token + "' bound twice");
    }
  }
  return out;
}

}  // namespace

std::vector<CrossAttentionLayer> edited_layers(const ToyPipeline& pipeline, std::span<const BoundConcept> concepts,
                                               double tau) {
  std::vector<CrossAttentionLayer> layers;
  for (int l = 0; l < pipeline.layer_count(); ++l) {
    CrossAttentionLayer layer = pipeline.layer(l);
    layer.w_k.set_tau(tau);
    layer.w_v.set_tau(tau);
    for (const auto& b : concepts) {
      auto k = b.ref->key_edit(l);
      auto v = b.ref->value_edit(l);
      if (b.beta) k.beta = v.beta = *b.beta;
      layer.w_k.add_edit(std::move(k));
      layer.w_v.add_edit(std::move(v));
    }
    layers.push_back(std::move(layer));
  }
  return layers;
}

ConditionedPrompt condition_prompt(const ToyPipeline& pipeline, const std::vector<std::string>& tokens,
                                   std::span<const BoundConcept> concepts, const ConditionOptions& options) {
  std::vector<BoundConcept> bound(concepts.begin(), concepts.end());
  for (auto& b : bound) {
    if (!b.ref) throw ContractError("bound concept is null");
    check_compatible(*b.ref, pipeline);
    if (options.beta) b.beta = options.beta;
  }
  ConditionedPrompt out;
  out.prompt = pipeline.encoder().encode(tokens, overrides_for(bound));
  if (bound.empty()) {
    out.conditioning = pipeline.denoiser().condition_base(out.prompt);
    return out;
  }

  out.layers = edited_layers(pipeline, bound, options.tau);
  const ProjectionMode mode = bound.size() == 1 ? ProjectionMode::kGatedSingle : ProjectionMode::kGatedMulti;
  if (mode == ProjectionMode::kGatedMulti) {
    Matrix targets(pipeline.config().d_e, static_cast<Eigen::Index>(bound.size()));
    for (std::size_t j = 0; j < bound.size(); ++j) targets.col(static_cast<Eigen::Index>(j)) = bound[j].ref->i_star;
    out.basis = orthonormal_basis(targets, pipeline.metric());
  }
  const ConceptBasis<double>* basis = out.basis ? &*out.basis : nullptr;
  for (const auto& layer : out.layers) out.conditioning.push_back(project_layer(layer, out.prompt, mode, basis));

  if (options.lock == LockMode::kNone) {
    for (int l = 0; l < pipeline.layer_count(); ++l) {
      out.conditioning[static_cast<std::size_t>(l)].keys = project_base(pipeline.layer(l).w_k, out.prompt.encodings);
    }
  } else if (options.lock == LockMode::kGlobal) {
    const Conditioning locked = global_key_lock(pipeline, tokens, bound, options.tau);
    for (std::size_t l = 0; l < locked.size(); ++l) out.conditioning[l].keys = locked[l].keys;
  }
  return out;
}

Conditioning condition_gated(const ToyPipeline& pipeline, const EncodedPrompt& ep, const Concept& cpt,
                             const GateParams<double>& gate) {
  Conditioning cond;
  cond.reserve(static_cast<std::size_t>(pipeline.layer_count()));
  for (int l = 0; l < pipeline.layer_count(); ++l) {
    EditedProjection<double> k = pipeline.layer(l).w_k;
    EditedProjection<double> v = pipeline.layer(l).w_v;
    k.set_tau(gate.tau);
    v.set_tau(gate.tau);
    auto ke = cpt.key_edit(l);
    auto ve = cpt.value_edit(l);
    ke.beta = ve.beta = gate.beta;
    k.add_edit(std::move(ke));
    v.add_edit(std::move(ve));
    cond.push_back({project_gated_single(k, ep.encodings), project_gated_single(v, ep.encodings)});
  }
  return cond;
}

Conditioning global_key_lock(const ToyPipeline& pipeline, const std::vector<std::string>& tokens,
                             std::span<const BoundConcept> concepts, double tau) {
  if (concepts.empty()) throw ContractError("global key-locking needs at least one concept");
  auto super_tokens = tokens;
  bool found = false;
  for (const auto& b : concepts) {
    if (std::find(tokens.begin(), tokens.end(), b.token) != tokens.end()) found = true;
    super_tokens = replace_token(std::move(super_tokens), b.token, b.ref->superclass);
  }
  if (!found) throw ContractError("global key-locking needs a prompt containing a concept token");

  // Step 1: V (and K, discarded) from the concept prompt with the gated edits.
  ConditionOptions local;
  local.lock = LockMode::kLocal;
  local.tau = tau;
  Conditioning cond = condition_prompt(pipeline, tokens, concepts, local).conditioning;
  // Step 2: K only, from the superclass prompt through the unedited projection.
  const EncodedPrompt super_prompt = pipeline.encoder().encode(super_tokens);
  for (int l = 0; l < pipeline.layer_count(); ++l) {
    cond[static_cast<std::size_t>(l)].keys = project_base(pipeline.layer(l).w_k, super_prompt.encodings);
  }
  return cond;
}

Conditioning global_key_lock(const ToyPipeline& pipeline, const std::vector<std::string>& tokens,
                             const Concept& cpt, double tau) {
  const BoundConcept bound{&cpt, std::string(kPlaceholder), std::nullopt};
  return global_key_lock(pipeline, tokens, std::span<const BoundConcept>(&bound, 1), tau);
}

ConceptGradient concept_gradient(const ToyPipeline& pipeline, const EncodedPrompt& ep, const Concept& cpt,
                                 const GateParams<double>& gate, const Conditioning& d_conditioning,
                                 std::string_view token) {
  if (static_cast<int>(d_conditioning.size()) != pipeline.layer_count()) {
    throw ContractError("conditioning gradient has the wrong layer count");
  }
  ConceptGradient out;
  Matrix d_enc = Matrix::Zero(ep.encodings.rows(), ep.encodings.cols());
  for (int l = 0; l < pipeline.layer_count(); ++l) {
    EditedProjection<double> k = pipeline.layer(l).w_k;
    EditedProjection<double> v = pipeline.layer(l).w_v;
    k.set_tau(gate.tau);
    v.set_tau(gate.tau);
    auto ke = cpt.key_edit(l);
    auto ve = cpt.value_edit(l);
    ke.beta = ve.beta = gate.beta;
    k.add_edit(std::move(ke));
    v.add_edit(std::move(ve));
    const auto& dl = d_conditioning[static_cast<std::size_t>(l)];
    auto gk = backward_gated_single(k, ep.encodings, dl.keys);
    auto gv = backward_gated_single(v, ep.encodings, dl.values);
    d_enc += gk.d_encodings;
    d_enc += gv.d_encodings;
    out.key_targets.push_back(std::move(gk.d_o_star));
    out.value_targets.push_back(std::move(gv.d_o_star));
  }
  out.embedding = pipeline.encoder().embedding_gradient(ep, d_enc, token);
  return out;
}

GateReport gate_report(const ToyPipeline& pipeline, const EncodedPrompt& ep, const Concept& cpt,
                       const GateParams<double>& gate) {
  GateReport r;
  const ConceptEdit<double> edit{cpt.i_star, Vector(), false, gate.beta};
  r.ratios = gate_ratios(edit, ep.encodings, pipeline.metric());
  r.gates.resize(r.ratios.size());
  for (Eigen::Index m = 0; m < r.ratios.size(); ++m) r.gates(m) = gate_value(r.ratios(m), gate);
  return r;
}

}  // namespace klr

#include "klr/personalize.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "klr/error.hpp"
#include "klr/random.hpp"

namespace klr {

Matrix normalized_mask(const Matrix& mask) {
  if (mask.size() == 0) throw DegenerateInputError("mask is empty");
  if (!mask.allFinite() || mask.minCoeff() < 0.0) throw ContractError("mask must be finite and nonnegative");
  const double peak = mask.maxCoeff();
  if (peak <= 0.0) throw DegenerateInputError("mask is zero everywhere");
  return mask / peak;
}

namespace {

Vector pixel_weights(const FeatureGrid& grid, const Matrix& mask) {
  if (mask.rows() != grid.height || mask.cols() != grid.width) {
    throw ContractError("mask shape does not match the feature grid");
  }
  const Matrix m = normalized_mask(mask);
  Vector w(grid.pixels());
  for (int y = 0; y < grid.height; ++y) {
    for (int x = 0; x < grid.width; ++x) w(y * grid.width + x) = m(y, x);
  }
  return w;
}

}  // namespace

double masked_loss(const FeatureGrid& pred, const FeatureGrid& truth, const Matrix& mask) {
  if (!pred.same_shape(truth)) throw ContractError("prediction and target grids differ in shape");
  const Vector w = pixel_weights(pred, mask);
  const Vector per_pixel = (pred.data - truth.data).rowwise().squaredNorm();
  return w.dot(per_pixel) / static_cast<double>(pred.data.size());
}

Matrix masked_loss_gradient(const FeatureGrid& pred, const FeatureGrid& truth, const Matrix& mask) {
  if (!pred.same_shape(truth)) throw ContractError("prediction and target grids differ in shape");
  const Vector w = pixel_weights(pred, mask);
  return (2.0 / static_cast<double>(pred.data.size())) * (w.asDiagonal() * (pred.data - truth.data));
}

int placeholder_index(const EncodedPrompt& ep, std::string_view token) {
  const auto pos = ep.positions_of(token);
  if (pos.empty()) throw ContractError("prompt '" + ep.prompt_text + "' has no " + std::string(token) + " token");
  return pos.front();
}

// ---------------------------------------------------------------------------
// Synthetic data

std::vector<TrainingSample> synthetic_dataset(const ToyPipeline& pipeline, std::string_view superclass,
                                              std::uint64_t seed, const SyntheticConfig& config) {
  if (config.images <= 0) throw ConfigError("dataset needs at least one image");
  const int h = pipeline.config().height;
  const int w = pipeline.config().width;
  const int c = pipeline.config().d_f;
  auto rng = make_rng(seed, stream_id("dataset"));

  const Vector proto = pipeline.superclass_feature(superclass, config.amplitude);
  Vector offset = random_normal(c, 1, rng);
  offset *= config.appearance / offset.norm();
  const Vector object = proto + offset;

  std::uniform_real_distribution<double> centre_x(0.3 * w, 0.7 * w);
  std::uniform_real_distribution<double> centre_y(0.3 * h, 0.7 * h);
  std::uniform_real_distribution<double> radius(0.22, 0.34);

  const auto& templates = training_templates();
  const int images = config.one_shot ? 1 : config.images;
  const std::size_t n_templates = config.one_shot ? 1 : templates.size();

  std::vector<TrainingSample> out;
  for (int i = 0; i < images; ++i) {
    const double cx = centre_x(rng);
    const double cy = centre_y(rng);
    const double rx = radius(rng) * w;
    const double ry = radius(rng) * h;
    Vector bg = random_normal(c, 1, rng);
    bg *= config.background / bg.norm();
    const Matrix texture = random_normal(static_cast<Eigen::Index>(h) * w, c, rng, config.texture);

    Matrix mask(h, w);
    FeatureGrid target(h, w, c);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double dx = (x + 0.5 - cx) / rx;
        const double dy = (y + 0.5 - cy) / ry;
        const double r = std::sqrt(dx * dx + dy * dy);
        const double m = 1.0 / (1.0 + std::exp((r - 1.0) / 0.15));
        mask(y, x) = m;
        const int p = y * w + x;
        target.data.row(p) = (m * object + (1.0 - m) * bg).transpose() + texture.row(p);
      }
    }
    mask = normalized_mask(mask);
    for (std::size_t j = 0; j < n_templates; ++j) out.push_back({tokenize(templates[j]), target, mask});
  }
  return out;
}

std::vector<ValidationItem> validation_items(const std::vector<TrainingSample>& dataset, const ToyPipeline& pipeline,
                                             std::uint64_t seed, int count) {
  if (dataset.empty()) throw ContractError("dataset is empty");
  if (count <= 0) throw ContractError("validation needs at least one item");
  auto rng = make_rng(seed, stream_id("validation"));
  std::uniform_int_distribution<int> pick(0, static_cast<int>(dataset.size()) - 1);
  const int steps = pipeline.schedule().steps;
  std::vector<ValidationItem> items;
  for (int k = 0; k < count; ++k) {
    ValidationItem item;
    item.sample = pick(rng);
    item.t = static_cast<int>(static_cast<long long>(k) * steps / count);
    const auto& target = dataset[static_cast<std::size_t>(item.sample)].target;
    item.eps = random_normal_grid(target.height, target.width, target.channels, rng);
    items.push_back(std::move(item));
  }
  return items;
}

// ---------------------------------------------------------------------------
// Loss and gradient

namespace {

EmbeddingOverrides placeholder_override(const Concept& c) {
  EmbeddingOverrides ov;
  ov.emplace(std::string(kPlaceholder), c.embedding);
  return ov;
}

SampleEvaluation evaluate_encoded(const ToyPipeline& pipeline, const Concept& c, const EncodedPrompt& ep,
                                  const TrainingSample& sample, int t, const FeatureGrid& eps,
                                  const GateParams<double>& gate, bool with_gradient) {
  const Conditioning cond = condition_gated(pipeline, ep, c, gate);
  const FeatureGrid x_t = noisify(sample.target, t, eps, pipeline.schedule());
  Denoiser::Trace trace;
  const FeatureGrid pred = pipeline.denoiser().predict_noise(x_t, t, cond, with_gradient ? &trace : nullptr);
  SampleEvaluation out;
  out.loss = masked_loss(pred, eps, sample.mask);
  if (with_gradient) {
    const Matrix d_pred = masked_loss_gradient(pred, eps, sample.mask);
    const Conditioning d_cond = pipeline.denoiser().backward(trace, cond, d_pred);
    out.gradient = concept_gradient(pipeline, ep, c, gate, d_cond);
  }
  return out;
}

void add_scaled(std::vector<Vector>& acc, const std::vector<Vector>& g, double s) {
  if (acc.empty()) {
    for (const auto& v : g) acc.push_back(s * v);
    return;
  }
  for (std::size_t l = 0; l < acc.size(); ++l) acc[l] += s * g[l];
}

}  // namespace

SampleEvaluation evaluate_sample(const ToyPipeline& pipeline, const Concept& concept_state,
                                 const TrainingSample& sample, int t, const FeatureGrid& eps,
                                 const GateParams<double>& gate, bool with_gradient) {
  const EncodedPrompt ep = pipeline.encoder().encode(sample.prompt, placeholder_override(concept_state));
  return evaluate_encoded(pipeline, concept_state, ep, sample, t, eps, gate, with_gradient);
}

double validation_loss(const ToyPipeline& pipeline, const std::vector<TrainingSample>& dataset,
                       const std::vector<ValidationItem>& items, const EmbeddingOverrides& overrides,
                       const std::function<Conditioning(const EncodedPrompt&)>& condition) {
  if (items.empty()) throw ContractError("validation set is empty");
  double total = 0.0;
  for (const auto& item : items) {
    const auto& sample = dataset.at(static_cast<std::size_t>(item.sample));
    const EncodedPrompt ep = pipeline.encoder().encode(sample.prompt, overrides);
    const Conditioning cond = condition(ep);
    const FeatureGrid x_t = noisify(sample.target, item.t, item.eps, pipeline.schedule());
    const FeatureGrid pred = pipeline.denoiser().predict_noise(x_t, item.t, cond);
    total += masked_loss(pred, item.eps, sample.mask);
  }
  return total / static_cast<double>(items.size());
}

double validation_loss(const ToyPipeline& pipeline, const Concept& concept_state,
                       const std::vector<TrainingSample>& dataset, const std::vector<ValidationItem>& items,
                       const GateParams<double>& gate) {
  return validation_loss(pipeline, dataset, items, placeholder_override(concept_state),
                         [&](const EncodedPrompt& ep) { return condition_gated(pipeline, ep, concept_state, gate); });
}

double mean_attention_spread(const ToyPipeline& pipeline, const Concept& concept_state,
                             const std::vector<TrainingSample>& dataset, const std::vector<ValidationItem>& items,
                             const GateParams<double>& gate) {
  if (items.empty()) throw ContractError("validation set is empty");
  const auto& den = pipeline.denoiser();
  double total = 0.0;
  int count = 0;
  for (const auto& item : items) {
    const auto& sample = dataset.at(static_cast<std::size_t>(item.sample));
    const EncodedPrompt ep = pipeline.encoder().encode(sample.prompt, placeholder_override(concept_state));
    const int index = placeholder_index(ep);
    const Conditioning cond = condition_gated(pipeline, ep, concept_state, gate);
    const FeatureGrid x_t = noisify(sample.target, item.t, item.eps, pipeline.schedule());
    Denoiser::Trace trace;
    den.predict_x0(x_t, cond, &trace);
    for (const auto& a : trace.attention) {
      total += attention_spread(attention_map(a, index, den.height(), den.width()));
      ++count;
    }
  }
  return total / count;
}

// ---------------------------------------------------------------------------
// Training

TrainResult train_concept(const Concept& init, const std::vector<TrainingSample>& dataset, const TrainConfig& cfg,
                          const ToyPipeline& pipeline, const StepObserver& observer) {
  if (dataset.empty()) throw ContractError("dataset is empty");
  if (cfg.steps < 0 || cfg.batch <= 0) throw ConfigError("steps must be >= 0 and batch > 0");
  if (!(cfg.gate.tau > 0.0)) throw ConfigError("gate temperature must be positive");
  if (cfg.select_step && (*cfg.select_step < 0 || *cfg.select_step > cfg.steps)) {
    throw ConfigError("select_step must lie in [0, steps]");
  }
  check_compatible(init, pipeline);
  for (const auto& s : dataset) {
    if (std::find(s.prompt.begin(), s.prompt.end(), kPlaceholder) == s.prompt.end()) {
      throw ContractError("training prompt '" + join_tokens(s.prompt) + "' has no placeholder");
    }
  }

  TrainResult result;
  Concept c = init;
  c.train_gate = cfg.gate;
  c.key_trainable = cfg.train_keys;
  std::optional<Concept> selected;
  if (cfg.select_step && *cfg.select_step == 0) selected = c;

  auto rng = make_rng(cfg.seed, stream_id("train"));
  std::uniform_int_distribution<int> pick(0, static_cast<int>(dataset.size()) - 1);
  std::uniform_int_distribution<int> timestep(0, pipeline.schedule().steps - 1);
  const auto& base_target = dataset.front().target;
  const double inv_batch = 1.0 / cfg.batch;

  struct Draw {
    int sample;
    int t;
    FeatureGrid eps;
    EncodedPrompt ep;
  };

  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<Draw> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch));
    const EmbeddingOverrides ov = placeholder_override(c);
    Vector e_mean = Vector::Zero(c.i_star.size());
    for (int b = 0; b < cfg.batch; ++b) {
      Draw d{pick(rng), timestep(rng),
             random_normal_grid(base_target.height, base_target.width, base_target.channels, rng), {}};
      d.ep = pipeline.encoder().encode(dataset[static_cast<std::size_t>(d.sample)].prompt, ov);
      e_mean += d.ep.encodings.row(placeholder_index(d.ep)).transpose();
      batch.push_back(std::move(d));
    }
    c.i_star = ema_update<double>(c.i_star, e_mean * inv_batch, cfg.ema_decay);

    StepRecord rec;
    rec.step = step;
    ConceptGradient acc;
    acc.embedding = Vector::Zero(c.embedding.size());
    for (const auto& d : batch) {
      const auto ev = evaluate_encoded(pipeline, c, d.ep, dataset[static_cast<std::size_t>(d.sample)], d.t, d.eps,
                                       cfg.gate, true);
      rec.loss += ev.loss * inv_batch;
      acc.embedding += inv_batch * ev.gradient.embedding;
      add_scaled(acc.key_targets, ev.gradient.key_targets, inv_batch);
      add_scaled(acc.value_targets, ev.gradient.value_targets, inv_batch);
      const Vector e_s = d.ep.encodings.row(placeholder_index(d.ep)).transpose();
      rec.gate_mean += gate_value(gate_ratio(c.i_star, e_s, pipeline.metric()), cfg.gate) * inv_batch;
    }
    if (!std::isfinite(rec.loss)) throw TrainingDivergedError(step);

    for (std::size_t l = 0; l < c.value_targets.size(); ++l) {
      c.value_targets[l] -= cfg.lr_o * acc.value_targets[l];
      if (cfg.train_keys) c.key_targets[l] -= cfg.lr_o * acc.key_targets[l];
    }
    c.embedding -= cfg.lr_embed * acc.embedding;
    if (!c.embedding.allFinite()) throw TrainingDivergedError(step);

    rec.i_star_norm = c.i_star.norm();
    result.log.push_back(rec);
    if (observer) observer(rec);
    if (cfg.select_step && *cfg.select_step == step) selected = c;
  }
  result.concept_state = selected ? std::move(*selected) : std::move(c);
  return result;
}

// ---------------------------------------------------------------------------
// Plain closed-form edit (variant A)

Conditioning condition_replaced(const ToyPipeline& pipeline, const EncodedPrompt& ep, int index,
                                const std::vector<Vector>& key_targets, const std::vector<Vector>& value_targets) {
  Conditioning cond = pipeline.denoiser().condition_base(ep);
  for (std::size_t l = 0; l < cond.size(); ++l) {
    cond[l].keys.row(index) = key_targets.at(l).transpose();
    cond[l].values.row(index) = value_targets.at(l).transpose();
  }
  return cond;
}

Conditioning condition_closed_form(const ToyPipeline& pipeline, const EncodedPrompt& ep, const Vector& i_star,
                                   const std::vector<Vector>& key_targets, const std::vector<Vector>& value_targets) {
  Conditioning cond;
  for (int l = 0; l < pipeline.layer_count(); ++l) {
    const auto& layer = pipeline.layer(l);
    const auto lu = static_cast<std::size_t>(l);
    const Matrix wk = rome_closed_form<double>(layer.w_k.weight(), i_star, key_targets.at(lu), pipeline.metric());
    const Matrix wv = rome_closed_form<double>(layer.w_v.weight(), i_star, value_targets.at(lu), pipeline.metric());
    cond.push_back({ep.encodings * wk.transpose(), ep.encodings * wv.transpose()});
  }
  return cond;
}

MismatchReport reproduce_mismatch(const std::vector<TrainingSample>& dataset, const TrainConfig& cfg,
                                  const ToyPipeline& pipeline, std::string_view superclass) {
  if (dataset.empty()) throw ContractError("dataset is empty");
  const Concept init = init_concept("mismatch", std::string(superclass), pipeline);
  const auto items = validation_items(dataset, pipeline, cfg.seed);
  const EmbeddingOverrides ov = placeholder_override(init);

  // i* of the plain edit: mean placeholder encoding over the distinct training prompts.
  std::vector<std::vector<std::string>> prompts;
  for (const auto& s : dataset) {
    if (std::find(prompts.begin(), prompts.end(), s.prompt) == prompts.end()) prompts.push_back(s.prompt);
  }
  Vector i_star = Vector::Zero(init.i_star.size());
  for (const auto& p : prompts) {
    const EncodedPrompt ep = pipeline.encoder().encode(p, ov);
    i_star += ep.encodings.row(placeholder_index(ep)).transpose();
  }
  i_star /= static_cast<double>(prompts.size());

  std::vector<Vector> keys = init.key_targets;
  std::vector<Vector> values = init.value_targets;
  auto rng = make_rng(cfg.seed, stream_id("train"));
  std::uniform_int_distribution<int> pick(0, static_cast<int>(dataset.size()) - 1);
  std::uniform_int_distribution<int> timestep(0, pipeline.schedule().steps - 1);
  const auto& shape = dataset.front().target;
  const auto& den = pipeline.denoiser();
  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<Vector> grad;
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& sample = dataset[static_cast<std::size_t>(pick(rng))];
      const int t = timestep(rng);
      const FeatureGrid eps = random_normal_grid(shape.height, shape.width, shape.channels, rng);
      const EncodedPrompt ep = pipeline.encoder().encode(sample.prompt, ov);
      const int index = placeholder_index(ep);
      const Conditioning cond = condition_replaced(pipeline, ep, index, keys, values);
      Denoiser::Trace trace;
      const FeatureGrid pred = den.predict_noise(noisify(sample.target, t, eps, pipeline.schedule()), t, cond, &trace);
      loss += masked_loss(pred, eps, sample.mask) / cfg.batch;
      const Conditioning d = den.backward(trace, cond, masked_loss_gradient(pred, eps, sample.mask));
      std::vector<Vector> g;
      for (const auto& dl : d) g.push_back(dl.values.row(index).transpose());
      add_scaled(grad, g, 1.0 / cfg.batch);
    }
    if (!std::isfinite(loss)) throw TrainingDivergedError(step);
    for (std::size_t l = 0; l < values.size(); ++l) values[l] -= cfg.lr_o * grad[l];
  }

  MismatchReport r;
  r.loss_a_train = validation_loss(pipeline, dataset, items, ov, [&](const EncodedPrompt& ep) {
    return condition_replaced(pipeline, ep, placeholder_index(ep), keys, values);
  });
  r.loss_a_eval = validation_loss(pipeline, dataset, items, ov, [&](const EncodedPrompt& ep) {
    return condition_closed_form(pipeline, ep, i_star, keys, values);
  });
  const TrainResult b = train_concept(init, dataset, cfg, pipeline);
  r.loss_b = validation_loss(pipeline, b.concept_state, dataset, items, cfg.gate);
  return r;
}

AblationReport key_lock_ablation(const std::vector<TrainingSample>& dataset, const TrainConfig& cfg,
                                 const ToyPipeline& pipeline, std::string_view superclass) {
  const Concept init = init_concept("ablation", std::string(superclass), pipeline);
  const auto items = validation_items(dataset, pipeline, cfg.seed);
  TrainConfig locked_cfg = cfg;
  locked_cfg.train_keys = false;
  TrainConfig free_cfg = cfg;
  free_cfg.train_keys = true;
  const Concept locked = train_concept(init, dataset, locked_cfg, pipeline).concept_state;
  const Concept free_keys = train_concept(init, dataset, free_cfg, pipeline).concept_state;
  AblationReport r;
  r.spread_locked = mean_attention_spread(pipeline, locked, dataset, items, cfg.gate);
  r.spread_trained_keys = mean_attention_spread(pipeline, free_keys, dataset, items, cfg.gate);
  r.loss_locked = validation_loss(pipeline, locked, dataset, items, cfg.gate);
  r.loss_trained_keys = validation_loss(pipeline, free_keys, dataset, items, cfg.gate);
  return r;
}

}  // namespace klr

#include "klr/diffuser.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "klr/error.hpp"
#include "klr/random.hpp"

namespace klr {

FeatureGrid::FeatureGrid(int h, int w, Matrix values)
    : height(h), width(w), channels(static_cast<int>(values.cols())), data(std::move(values)) {
  if (h <= 0 || w <= 0 || data.rows() != static_cast<Eigen::Index>(h) * w) {
    throw ContractError("feature grid data does not match " + std::to_string(h) + "x" + std::to_string(w));
  }
}

void FeatureGrid::require_finite(const char* what) const {
  if (!data.allFinite()) throw ContractError(std::string(what) + " contains non-finite values");
}

FeatureGrid random_normal_grid(int h, int w, int c, std::mt19937_64& rng) {
  return FeatureGrid(h, w, random_normal(static_cast<Eigen::Index>(h) * w, c, rng));
}

Schedule Schedule::linear(int steps, double first, double last) {
  if (steps < 2) throw ContractError("schedule needs at least two steps");
  if (!(first <= 1.0 && first > last && last > 0.0)) throw ContractError("alpha_bar must decrease within (0, 1]");
  Schedule s;
  s.steps = steps;
  s.alpha_bar.resize(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    s.alpha_bar[static_cast<std::size_t>(t)] = first + (last - first) * t / static_cast<double>(steps - 1);
  }
  return s;
}

double Schedule::at(int t) const {
  if (t < 0 || t >= steps) throw ContractError("timestep " + std::to_string(t) + " outside [0, " +
                                               std::to_string(steps) + ")");
  return alpha_bar[static_cast<std::size_t>(t)];
}

FeatureGrid noisify(const FeatureGrid& x0, double alpha_bar, const FeatureGrid& eps) {
  if (!x0.same_shape(eps)) throw ContractError("noise and signal grids differ in shape");
  if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) throw ContractError("alpha_bar outside [0, 1]");
  FeatureGrid out = x0;
  out.data = std::sqrt(alpha_bar) * x0.data + std::sqrt(1.0 - alpha_bar) * eps.data;
  return out;
}

FeatureGrid noisify(const FeatureGrid& x0, int t, const FeatureGrid& eps, const Schedule& s) {
  return noisify(x0, s.at(t), eps);
}

// ---------------------------------------------------------------------------

CrossAttentionLayer::CrossAttentionLayer(Matrix q, EditedProjection<double> k, EditedProjection<double> v, Matrix out)
    : w_q(std::move(q)), w_k(std::move(k)), w_v(std::move(v)), w_out(std::move(out)) {
  if (w_k.out_dim() != w_q.rows()) throw ContractError("W_K and W_Q disagree on d_k");
  if (w_v.out_dim() != w_out.cols()) throw ContractError("W_V and W_out disagree on d_v");
  if (w_out.rows() != w_q.cols()) throw ContractError("W_out and W_Q disagree on d_f");
  if (w_k.in_dim() != w_v.in_dim()) throw ContractError("W_K and W_V disagree on d_e");
  scale = 1.0 / std::sqrt(static_cast<double>(w_q.rows()));
}

LayerConditioning project_layer(const CrossAttentionLayer& layer, const EncodedPrompt& ep, ProjectionMode mode,
                                const ConceptBasis<double>* basis) {
  switch (mode) {
    case ProjectionMode::kBase:
      if (!layer.w_k.edits().empty() || !layer.w_v.edits().empty()) {
        throw ContractError("base mode requires projections without edits");
      }
      return {project_base(layer.w_k, ep.encodings), project_base(layer.w_v, ep.encodings)};
    case ProjectionMode::kGatedSingle:
      return {project_gated_single(layer.w_k, ep.encodings), project_gated_single(layer.w_v, ep.encodings)};
    case ProjectionMode::kGatedMulti:
      if (basis == nullptr) throw ContractError("multi-concept mode needs a concept basis");
      return {project_gated_multi(layer.w_k, *basis, ep.encodings),
              project_gated_multi(layer.w_v, *basis, ep.encodings)};
  }
  throw ContractError("unknown projection mode");
}

namespace {

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

}  // namespace

AttentionOutput attend(const CrossAttentionLayer& layer, const FeatureGrid& grid, const LayerConditioning& kv) {
  if (grid.channels != layer.d_f()) throw ContractError("grid channels do not match layer d_f");
  if (kv.keys.cols() != layer.d_k() || kv.values.cols() != layer.d_v() || kv.keys.rows() != kv.values.rows()) {
    throw ContractError("keys/values do not match layer dimensions");
  }
  grid.require_finite("attention input");
  AttentionOutput out{grid, Matrix(grid.pixels(), kv.tokens())};
  if (kv.tokens() == 0) return out;
  const Matrix q = grid.data * layer.w_q.transpose();
  out.attention = softmax_rows(layer.scale * q * kv.keys.transpose());
  out.grid.data.noalias() += (out.attention * kv.values) * layer.w_out.transpose();
  return out;
}

AttentionOutput cross_attention(const CrossAttentionLayer& layer, const FeatureGrid& grid, const EncodedPrompt& ep,
                                ProjectionMode mode, const ConceptBasis<double>* basis) {
  return attend(layer, grid, project_layer(layer, ep, mode, basis));
}

Matrix attention_map(const Matrix& attention, int token, int height, int width) {
  if (token < 0 || token >= attention.cols()) throw ContractError("token index outside attention matrix");
  if (attention.rows() != static_cast<Eigen::Index>(height) * width) {
    throw ContractError("attention rows do not match grid size");
  }
  Matrix map(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) map(y, x) = attention(y * width + x, token);
  return map;
}

double attention_spread(const Matrix& map) {
  if (map.size() < 2) throw ContractError("attention map needs at least two cells");
  if ((map.array() < 0).any() || !map.allFinite()) throw ContractError("attention map must be finite and nonnegative");
  const double total = map.sum();
  if (!(total > 0)) throw DegenerateInputError("attention map is all zero");
  double entropy = 0.0;
  for (Eigen::Index i = 0; i < map.size(); ++i) {
    const double p = map.data()[i] / total;
    if (p > 0) entropy -= p * std::log(p);
  }
  // Rounding in the sum can overshoot log(n) by a few ulps.
  return std::min(1.0, entropy / std::log(static_cast<double>(map.size())));
}

// ---------------------------------------------------------------------------

Denoiser::Denoiser(std::vector<CrossAttentionLayer> layers, Schedule schedule, int height, int width)
    : layers_(std::move(layers)), schedule_(std::move(schedule)), height_(height), width_(width) {
  if (layers_.empty()) throw ContractError("denoiser needs at least one layer");
  for (const auto& l : layers_) {
    if (l.d_f() != layers_.front().d_f()) throw ContractError("layers disagree on d_f");
  }
}

Conditioning Denoiser::condition_base(const EncodedPrompt& ep) const {
  Conditioning cond;
  cond.reserve(layers_.size());
  for (const auto& layer : layers_) {
    cond.push_back({project_base(layer.w_k, ep.encodings), project_base(layer.w_v, ep.encodings)});
  }
  return cond;
}

void Denoiser::check_conditioning(const Conditioning& cond) const {
  if (cond.size() != layers_.size()) {
    throw ContractError("conditioning has " + std::to_string(cond.size()) + " layers, denoiser has " +
                        std::to_string(layers_.size()));
  }
}

FeatureGrid Denoiser::predict_x0(const FeatureGrid& x_t, const Conditioning& cond, Trace* trace) const {
  check_conditioning(cond);
  if (x_t.height != height_ || x_t.width != width_ || x_t.channels != channels()) {
    throw ContractError("input grid shape does not match denoiser");
  }
  x_t.require_finite("denoiser input");
  if (trace) {
    trace->inputs.clear();
    trace->queries.clear();
    trace->attention.clear();
  }
  Matrix h = x_t.data;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    const auto& kv = cond[l];
    if (kv.keys.cols() != layer.d_k() || kv.values.cols() != layer.d_v() || kv.keys.rows() != kv.values.rows()) {
      throw ContractError("conditioning for layer " + std::to_string(l) + " has wrong shape");
    }
    if (trace) trace->inputs.push_back(h);
    if (kv.tokens() == 0) {
      if (trace) {
        trace->queries.emplace_back();
        trace->attention.emplace_back(h.rows(), 0);
      }
      continue;
    }
    Matrix q = h * layer.w_q.transpose();
    Matrix a = softmax_rows(layer.scale * q * kv.keys.transpose());
    h.noalias() += (a * kv.values) * layer.w_out.transpose();
    if (trace) {
      trace->queries.push_back(std::move(q));
      trace->attention.push_back(std::move(a));
    }
  }
  return FeatureGrid(height_, width_, h - x_t.data);
}

FeatureGrid Denoiser::predict_noise(const FeatureGrid& x_t, int t, const Conditioning& cond, Trace* trace) const {
  const double ab = schedule_.at(t);
  FeatureGrid x0 = predict_x0(x_t, cond, trace);
  if (trace) trace->t = t;
  x0.data = (x_t.data - std::sqrt(ab) * x0.data) / std::sqrt(1.0 - ab);
  return x0;
}

Conditioning Denoiser::backward(const Trace& trace, const Conditioning& cond, const Matrix& d_noise) const {
  check_conditioning(cond);
  if (trace.inputs.size() != layers_.size()) throw ContractError("trace does not match denoiser");
  const double ab = schedule_.at(trace.t);
  // The residual stream h_L - x_t is the x0 estimate; x_t itself carries no parameters.
  Matrix dh = -std::sqrt(ab) / std::sqrt(1.0 - ab) * d_noise;

  Conditioning grads(layers_.size());
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const auto& layer = layers_[li];
    const auto& kv = cond[li];
    auto& g = grads[li];
    g.keys = Matrix::Zero(kv.keys.rows(), kv.keys.cols());
    g.values = Matrix::Zero(kv.values.rows(), kv.values.cols());
    if (kv.tokens() == 0) continue;
    const Matrix& a = trace.attention[li];
    const Matrix& q = trace.queries[li];
    const Matrix d_o = dh * layer.w_out;             // pixels x d_v
    g.values.noalias() = a.transpose() * d_o;        // M x d_v
    const Matrix d_a = d_o * kv.values.transpose();  // pixels x M
    const Eigen::VectorXd inner = (d_a.array() * a.array()).rowwise().sum();
    const Matrix d_s = (a.array() * (d_a.colwise() - inner).array()).matrix();
    g.keys.noalias() = layer.scale * d_s.transpose() * q;
    dh.noalias() += layer.scale * (d_s * kv.keys) * layer.w_q;
  }
  return grads;
}

// ---------------------------------------------------------------------------

std::vector<int> ddim_timesteps(int total_steps, int n_steps) {
  if (n_steps < 1 || n_steps > total_steps) {
    throw ContractError("DDIM steps must lie in [1, " + std::to_string(total_steps) + "]");
  }
  std::vector<int> ts;
  ts.reserve(static_cast<std::size_t>(n_steps));
  if (n_steps == 1) return {total_steps - 1};
  for (int k = n_steps - 1; k >= 0; --k) {
    ts.push_back(static_cast<int>((static_cast<long>(k) * (total_steps - 1)) / (n_steps - 1)));
  }
  return ts;
}

FeatureGrid ddim_sample(const NoisePredictor& conditional, const NoisePredictor& unconditional, const Schedule& s,
                        const SampleOptions& options,
                        const std::function<void(int step, int t, const FeatureGrid& x_t)>& observer) {
  if (!conditional) throw ContractError("sampler needs a conditional noise predictor");
  if (options.guidance != 1.0 && !unconditional) {
    throw ContractError("guidance other than 1 needs an unconditional predictor");
  }
  const auto ts = ddim_timesteps(s.steps, options.steps);
  auto rng = make_rng(options.seed, stream_id("ddim-init"));
  FeatureGrid x = random_normal_grid(options.height, options.width, options.channels, rng);

  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    if (observer) observer(static_cast<int>(k), t, x);
    FeatureGrid eps = conditional(x, t);
    if (options.guidance != 1.0) {
      const FeatureGrid eps_u = unconditional(x, t);
      eps.data = eps_u.data + options.guidance * (eps.data - eps_u.data);
    }
    if (!eps.same_shape(x)) throw ContractError("noise predictor returned a grid of the wrong shape");
    const double ab = s.at(t);
    const double ab_prev = k + 1 < ts.size() ? s.at(ts[k + 1]) : 1.0;
    const Matrix x0 = (x.data - std::sqrt(1.0 - ab) * eps.data) / std::sqrt(ab);
    x.data = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps.data;
    x.require_finite("DDIM state");
  }
  return x;
}

}  // namespace klr

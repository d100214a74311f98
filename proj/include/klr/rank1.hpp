#pragma once

// Gated rank-1 editing of a projection matrix W (d_out x d_e).
//
// A concept edit is a (target-input i*, target-output o*) pair. The closed-form
// edit W + Lambda (C^-1 i*)^T and the reformulated forward pass
// W e_perp + o* sim(i*, e)/||i*||^2 are two routes to the same output; the
// gated variants replace the linear ratio with a logistic gate.

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "klr/error.hpp"
#include "klr/metric.hpp"

namespace klr {

template <typename Scalar>
struct GateParams {
  Scalar beta = Scalar(0.75);
  Scalar tau = Scalar(0.1);
};

template <typename Scalar>
struct ConceptEdit {
  VectorX<Scalar> i_star;
  VectorX<Scalar> o_star;
  bool trainable = false;  // false on the key-locked K pathway
  Scalar beta = Scalar(0.75);
};

inline constexpr double kEmaDecay = 0.99;

template <typename Scalar>
class EditedProjection {
 public:
  using Matrix = MatrixX<Scalar>;
  using Vector = VectorX<Scalar>;

  EditedProjection(Matrix w, std::shared_ptr<const MetricSpace<Scalar>> metric, Scalar tau = Scalar(0.1))
      : w_(std::move(w)), metric_(std::move(metric)), tau_(tau) {
    if (!metric_) throw ContractError("edited projection needs a metric");
    if (w_.cols() != metric_->dim()) {
      throw ContractError("projection has " + std::to_string(w_.cols()) + " input columns, metric dimension is " +
                          std::to_string(metric_->dim()));
    }
    set_tau(tau);
  }

  const Matrix& weight() const noexcept { return w_; }
  const MetricSpace<Scalar>& metric() const noexcept { return *metric_; }
  const std::shared_ptr<const MetricSpace<Scalar>>& metric_ptr() const noexcept { return metric_; }
  Eigen::Index out_dim() const noexcept { return w_.rows(); }
  Eigen::Index in_dim() const noexcept { return w_.cols(); }

  Scalar tau() const noexcept { return tau_; }
  void set_tau(Scalar tau) {
    if (!(tau > 0)) throw ContractError("gate temperature must be positive");
    tau_ = tau;
  }

  const std::vector<ConceptEdit<Scalar>>& edits() const noexcept { return edits_; }
  ConceptEdit<Scalar>& edit(std::size_t j) { return edits_.at(j); }
  const ConceptEdit<Scalar>& edit(std::size_t j) const { return edits_.at(j); }

  void add_edit(ConceptEdit<Scalar> edit) {
    if (edit.i_star.size() != in_dim()) throw ContractError("edit i* does not match projection input dimension");
    if (edit.o_star.size() != out_dim()) throw ContractError("edit o* does not match projection output dimension");
    edits_.push_back(std::move(edit));
  }
  void clear_edits() { edits_.clear(); }

  GateParams<Scalar> gate(std::size_t j) const { return {edits_.at(j).beta, tau_}; }

 private:
  Matrix w_;
  std::shared_ptr<const MetricSpace<Scalar>> metric_;
  Scalar tau_;
  std::vector<ConceptEdit<Scalar>> edits_;
};

namespace detail {

template <typename Scalar>
const ConceptEdit<Scalar>& only_edit(const EditedProjection<Scalar>& p) {
  if (p.edits().size() != 1) {
    throw ContractError("single-concept forward needs exactly one edit, projection has " +
                        std::to_string(p.edits().size()));
  }
  return p.edits().front();
}

}  // namespace detail

/// W_hat = W + Lambda (C^-1 i*)^T with Lambda = (o* - W i*) / (i*^T C^-T i*).
template <typename Scalar>
MatrixX<Scalar> rome_closed_form(const MatrixX<Scalar>& w, const VectorX<Scalar>& i_star,
                                 const VectorX<Scalar>& o_star, const MetricSpace<Scalar>& m) {
  if (w.cols() != m.dim()) throw ContractError("W columns do not match metric dimension");
  if (o_star.size() != w.rows()) throw ContractError("o* does not match W rows");
  const Scalar en = energy(i_star, m);
  const VectorX<Scalar> lambda = (o_star - w * i_star) / en;
  const VectorX<Scalar> key = m.c_inv() * i_star;
  return w + lambda * key.transpose();
}

/// Logistic gate sigma((ratio - beta) / tau).
template <typename Scalar>
Scalar gate_value(Scalar ratio, const GateParams<Scalar>& g) {
  if (!(g.tau > 0)) throw ContractError("gate temperature must be positive");
  const Scalar z = (ratio - g.beta) / g.tau;
  if (z >= 0) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar ez = std::exp(z);
  return ez / (Scalar(1) + ez);
}

/// sim(i*, e) / ||i*||^2_{C^-1}.
template <typename Scalar, typename Derived>
Scalar gate_ratio(const VectorX<Scalar>& i_star, const Eigen::MatrixBase<Derived>& e, const MetricSpace<Scalar>& m) {
  return sim(i_star, e, m) / energy(i_star, m);
}

template <typename Scalar, typename Derived>
VectorX<Scalar> forward_base(const EditedProjection<Scalar>& p, const Eigen::MatrixBase<Derived>& e) {
  detail::require_dim(e, p.in_dim(), "e");
  return p.weight() * e;
}

/// h = W e_perp + o* sim(i*, e) / ||i*||^2.
template <typename Scalar, typename Derived>
VectorX<Scalar> forward_ungated(const EditedProjection<Scalar>& p, const Eigen::MatrixBase<Derived>& e) {
  const auto& edit = detail::only_edit(p);
  const Scalar ratio = gate_ratio(edit.i_star, e, p.metric());
  return p.weight() * (e - edit.i_star * ratio) + edit.o_star * ratio;
}

/// h = W e_perp + o* sigma((sim(i*, e)/||i*||^2 - beta) / tau).
template <typename Scalar, typename Derived>
VectorX<Scalar> forward_gated_single(const EditedProjection<Scalar>& p, const Eigen::MatrixBase<Derived>& e) {
  const auto& edit = detail::only_edit(p);
  const Scalar ratio = gate_ratio(edit.i_star, e, p.metric());
  return p.weight() * (e - edit.i_star * ratio) + edit.o_star * gate_value(ratio, p.gate(0));
}

template <typename Scalar>
void check_basis_matches(const EditedProjection<Scalar>& p, const ConceptBasis<Scalar>& basis) {
  if (!basis.built_over(p.metric())) throw ContractError("concept basis was built over a different metric");
  const auto& edits = p.edits();
  if (static_cast<Eigen::Index>(edits.size()) != basis.targets().cols()) {
    throw ContractError("basis has " + std::to_string(basis.targets().cols()) + " targets, projection has " +
                        std::to_string(edits.size()) + " edits");
  }
  for (std::size_t j = 0; j < edits.size(); ++j) {
    if (edits[j].i_star != basis.targets().col(static_cast<Eigen::Index>(j))) {
      throw ContractError("basis target " + std::to_string(j) + " differs from edit i*");
    }
  }
}

/// h = W e_perpJ + sum_j o*_j sigma((sim(i*_j, e)/||i*_j||^2 - beta_j) / tau).
template <typename Scalar, typename Derived>
VectorX<Scalar> forward_gated_multi(const EditedProjection<Scalar>& p, const ConceptBasis<Scalar>& basis,
                                    const Eigen::MatrixBase<Derived>& e) {
  check_basis_matches(p, basis);
  VectorX<Scalar> h = p.weight() * project_orthogonal(e, basis, p.metric());
  for (std::size_t j = 0; j < p.edits().size(); ++j) {
    const auto& edit = p.edits()[j];
    h += edit.o_star * gate_value(gate_ratio(edit.i_star, e, p.metric()), p.gate(j));
  }
  return h;
}

/// i* := 0.99 i* + 0.01 e_concept.
template <typename Scalar>
VectorX<Scalar> ema_update(const VectorX<Scalar>& i_star, const VectorX<Scalar>& e_concept,
                           Scalar decay = Scalar(kEmaDecay)) {
  if (i_star.size() != e_concept.size()) throw ContractError("EMA operands differ in dimension");
  return decay * i_star + (Scalar(1) - decay) * e_concept;
}

// ---------------------------------------------------------------------------
// Sequence forms. Rows of `encodings` are token encodings e_m; rows of the
// result are the projected outputs h_m.

template <typename Scalar>
MatrixX<Scalar> project_base(const EditedProjection<Scalar>& p, const MatrixX<Scalar>& encodings) {
  if (encodings.cols() != p.in_dim()) throw ContractError("encodings do not match projection input dimension");
  return encodings * p.weight().transpose();
}

/// Per-token gate ratios sim(i*, e_m) / ||i*||^2 for one edit.
template <typename Scalar>
VectorX<Scalar> gate_ratios(const ConceptEdit<Scalar>& edit, const MatrixX<Scalar>& encodings,
                            const MetricSpace<Scalar>& m) {
  if (encodings.cols() != m.dim()) throw ContractError("encodings do not match metric dimension");
  const Scalar en = energy(edit.i_star, m);
  return encodings * (m.c_inv() * edit.i_star) / en;
}

template <typename Scalar>
MatrixX<Scalar> project_ungated(const EditedProjection<Scalar>& p, const MatrixX<Scalar>& encodings) {
  const auto& edit = detail::only_edit(p);
  const VectorX<Scalar> r = gate_ratios(edit, encodings, p.metric());
  const VectorX<Scalar> w_i = p.weight() * edit.i_star;
  MatrixX<Scalar> h = project_base(p, encodings);
  h.noalias() += r * (edit.o_star - w_i).transpose();
  return h;
}

template <typename Scalar>
MatrixX<Scalar> project_gated_single(const EditedProjection<Scalar>& p, const MatrixX<Scalar>& encodings) {
  const auto& edit = detail::only_edit(p);
  const VectorX<Scalar> r = gate_ratios(edit, encodings, p.metric());
  const auto g = p.gate(0);
  VectorX<Scalar> gates(r.size());
  for (Eigen::Index m = 0; m < r.size(); ++m) gates(m) = gate_value(r(m), g);
  const VectorX<Scalar> w_i = p.weight() * edit.i_star;
  MatrixX<Scalar> h = project_base(p, encodings);
  h.noalias() -= r * w_i.transpose();
  h.noalias() += gates * edit.o_star.transpose();
  return h;
}

template <typename Scalar>
MatrixX<Scalar> project_gated_multi(const EditedProjection<Scalar>& p, const ConceptBasis<Scalar>& basis,
                                    const MatrixX<Scalar>& encodings) {
  check_basis_matches(p, basis);
  const auto& m = p.metric();
  // e_perpJ rows: e - sum_j u_j sim(u_j, e)
  const MatrixX<Scalar> coeffs = encodings * (m.c_inv() * basis.u());
  const MatrixX<Scalar> perp = encodings - coeffs * basis.u().transpose();
  MatrixX<Scalar> h = project_base(p, perp);
  for (std::size_t j = 0; j < p.edits().size(); ++j) {
    const auto& edit = p.edits()[j];
    const VectorX<Scalar> r = gate_ratios(edit, encodings, m);
    const auto g = p.gate(j);
    for (Eigen::Index row = 0; row < r.size(); ++row) h.row(row) += gate_value(r(row), g) * edit.o_star.transpose();
  }
  return h;
}

/// Gradients of a scalar loss through project_gated_single, given dL/dH.
template <typename Scalar>
struct GatedSingleGradient {
  MatrixX<Scalar> d_encodings;  // M x d_e
  VectorX<Scalar> d_o_star;     // d_out
};

/// i* is held constant (stop-gradient), as during a training step.
template <typename Scalar>
GatedSingleGradient<Scalar> backward_gated_single(const EditedProjection<Scalar>& p, const MatrixX<Scalar>& encodings,
                                                  const MatrixX<Scalar>& d_out) {
  const auto& edit = detail::only_edit(p);
  if (d_out.rows() != encodings.rows() || d_out.cols() != p.out_dim()) {
    throw ContractError("output gradient shape does not match projection output");
  }
  const auto& m = p.metric();
  const Scalar en = energy(edit.i_star, m);
  const VectorX<Scalar> key = m.c_inv() * edit.i_star;
  const VectorX<Scalar> r = encodings * key / en;
  const VectorX<Scalar> w_i = p.weight() * edit.i_star;
  const auto g = p.gate(0);

  GatedSingleGradient<Scalar> out;
  out.d_o_star = VectorX<Scalar>::Zero(p.out_dim());
  VectorX<Scalar> d_ratio(r.size());
  for (Eigen::Index row = 0; row < r.size(); ++row) {
    const Scalar gv = gate_value(r(row), g);
    const Scalar dg_dr = gv * (Scalar(1) - gv) / g.tau;
    out.d_o_star += gv * d_out.row(row).transpose();
    d_ratio(row) = -w_i.dot(d_out.row(row)) + edit.o_star.dot(d_out.row(row)) * dg_dr;
  }
  out.d_encodings = d_out * p.weight();
  out.d_encodings.noalias() += d_ratio * (key / en).transpose();
  return out;
}

}  // namespace klr

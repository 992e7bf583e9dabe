#pragma once

#include <cmath>

#include <Eigen/Dense>

#include "emgssl/error.hpp"
#include "emgssl/neural.hpp"

namespace emgssl {

struct VicregConfig {
  double lambda = 8.0;  // invariance weight
  double mu = 32.0;     // variance weight
  double nu = 1.0;      // covariance weight
  double gamma = 1.0;   // target standard deviation
  double eps = 1e-4;
};

inline void validate(const VicregConfig& c) {
  if (c.lambda < 0 || c.mu < 0 || c.nu < 0 || c.gamma < 0 || c.eps < 0)
    throw UsageError("VICReg coefficients must be non-negative");
}

// Embedding batches are N x D: one row per sample. Variances and covariances
// use the unbiased (N - 1) estimator.

template <class S>
S invariance_term(const Mat<S>& za, const Mat<S>& zb) {
  if (za.rows() != zb.rows() || za.cols() != zb.cols()) throw UsageError("invariance_term: shape mismatch");
  if (za.rows() == 0) throw UsageError("invariance_term: empty batch");
  return (za - zb).squaredNorm() / static_cast<S>(za.rows());
}

namespace detail {
template <class S>
void require_batch(const Mat<S>& z, const char* what) {
  if (z.rows() < 2) throw UsageError(std::string(what) + ": needs at least 2 samples");
}

template <class S>
Mat<S> centred(const Mat<S>& z) {
  return z.rowwise() - z.colwise().mean();
}
}  // namespace detail

template <class S>
S variance_term(const Mat<S>& z, double gamma = 1.0, double eps = 1e-4) {
  detail::require_batch(z, "variance_term");
  const Mat<S> zc = detail::centred(z);
  const auto var = zc.colwise().squaredNorm().array() / static_cast<S>(z.rows() - 1);
  const auto sd = (var + static_cast<S>(eps)).sqrt();
  return (static_cast<S>(gamma) - sd).max(S(0)).sum() / static_cast<S>(z.cols());
}

template <class S>
Mat<S> covariance(const Mat<S>& z) {
  const Mat<S> zc = detail::centred(z);
  return (zc.transpose() * zc) / static_cast<S>(z.rows() - 1);
}

template <class S>
S covariance_term(const Mat<S>& z) {
  detail::require_batch(z, "covariance_term");
  const Mat<S> c = covariance(z);
  return (c.squaredNorm() - c.diagonal().squaredNorm()) / static_cast<S>(z.cols());
}

struct VicregTerms {
  double invariance = 0;
  double variance_a = 0, variance_b = 0;
  double covariance_a = 0, covariance_b = 0;
  double total = 0;
};

namespace detail {

// d/dz of mu * v(z) + nu * c(z).
template <class S>
Mat<S> regulariser_grad(const Mat<S>& z, const VicregConfig& cfg) {
  const auto n = static_cast<S>(z.rows());
  const auto d = static_cast<S>(z.cols());
  const Mat<S> zc = centred(z);
  const Eigen::Array<S, 1, Eigen::Dynamic> var = zc.colwise().squaredNorm().array() / (n - 1);
  const Eigen::Array<S, 1, Eigen::Dynamic> sd = (var + static_cast<S>(cfg.eps)).sqrt();
  // variance: -(z - m) / (D * S_j * (N - 1)) where the hinge is active
  const Eigen::Array<S, 1, Eigen::Dynamic> vscale =
      (sd < static_cast<S>(cfg.gamma)).select(-static_cast<S>(cfg.mu) / (d * sd * (n - 1)), S(0));
  Mat<S> g = (zc.array().rowwise() * vscale).matrix();
  // covariance: 4 / (D (N - 1)) * zc * offdiag(C)
  Mat<S> c = (zc.transpose() * zc) / (n - 1);
  c.diagonal().setZero();
  g.noalias() += (static_cast<S>(4.0 * cfg.nu) / (d * (n - 1))) * (zc * c);
  return g;
}

}  // namespace detail

/// lambda * s(a, b) + mu * (v(a) + v(b)) + nu * (c(a) + c(b)). When the
/// gradient outputs are given they receive dL/dza and dL/dzb.
template <class S>
VicregTerms vicreg_loss(const Mat<S>& za, const Mat<S>& zb, const VicregConfig& cfg, Mat<S>* dza = nullptr,
                        Mat<S>* dzb = nullptr) {
  validate(cfg);
  if (za.rows() != zb.rows() || za.cols() != zb.cols()) throw UsageError("vicreg_loss: shape mismatch");
  detail::require_batch(za, "vicreg_loss");
  VicregTerms t;
  t.invariance = static_cast<double>(invariance_term(za, zb));
  t.variance_a = static_cast<double>(variance_term(za, cfg.gamma, cfg.eps));
  t.variance_b = static_cast<double>(variance_term(zb, cfg.gamma, cfg.eps));
  t.covariance_a = static_cast<double>(covariance_term(za));
  t.covariance_b = static_cast<double>(covariance_term(zb));
  t.total = cfg.lambda * t.invariance + cfg.mu * (t.variance_a + t.variance_b) +
            cfg.nu * (t.covariance_a + t.covariance_b);
  if (dza || dzb) {
    const Mat<S> dinv = (static_cast<S>(2.0 * cfg.lambda) / static_cast<S>(za.rows())) * (za - zb);
    if (dza) *dza = dinv + detail::regulariser_grad(za, cfg);
    if (dzb) *dzb = -dinv + detail::regulariser_grad(zb, cfg);
  }
  return t;
}

/// Loss through a shared-weight backbone for two views given as sequence
/// batches (F x T*N each). Backbone gradients of both branches accumulate
/// into `grad`.
template <class S>
VicregTerms vicreg_backbone_loss(const NetParams<S>& p, const Mat<S>& view_a, const Mat<S>& view_b, int steps,
                                 const VicregConfig& cfg, NetParams<S>* grad, Mat<S>* emb_a = nullptr) {
  BackboneCache<S> ca, cb;
  const Mat<S> za = backbone_forward(p, view_a, steps, ca).transpose();
  const Mat<S> zb = backbone_forward(p, view_b, steps, cb).transpose();
  if (emb_a) *emb_a = za;
  if (!grad) return vicreg_loss<S>(za, zb, cfg);
  Mat<S> dza, dzb;
  const auto terms = vicreg_loss<S>(za, zb, cfg, &dza, &dzb);
  backbone_backward(p, ca, Mat<S>(dza.transpose()), *grad);
  backbone_backward(p, cb, Mat<S>(dzb.transpose()), *grad);
  return terms;
}

}  // namespace emgssl

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emgssl/error.hpp"

namespace emgssl {

inline constexpr double kLdaRidge = 1e-6;

/// Gaussian classifier with a pooled within-class covariance.
struct LdaModel {
  Eigen::MatrixXd class_means;        // K x F
  Eigen::MatrixXd shared_covariance;  // F x F, ridge included
  Eigen::VectorXd priors;             // K
  // Linear discriminant: score_k(x) = coef.row(k) . x + intercept[k]
  Eigen::MatrixXd coef;
  Eigen::VectorXd intercept;
  std::vector<std::string> fitted_on;

  int num_classes() const { return static_cast<int>(class_means.rows()); }
  int dim() const { return static_cast<int>(class_means.cols()); }

  /// Rebuild coef / intercept from means, covariance and priors.
  void factorize() {
    Eigen::LLT<Eigen::MatrixXd> llt(shared_covariance);
    if (llt.info() != Eigen::Success) throw NumericError("LDA covariance is not positive definite");
    coef = llt.solve(class_means.transpose()).transpose();
    intercept.resize(num_classes());
    for (int k = 0; k < num_classes(); ++k)
      intercept[k] = -0.5 * coef.row(k).dot(class_means.row(k)) + std::log(priors[k]);
  }

  /// N x F samples to N x K posteriors.
  Eigen::MatrixXd predict_posterior(const Eigen::MatrixXd& x) const {
    if (x.cols() != dim()) throw UsageError("LDA input dimension mismatch");
    Eigen::MatrixXd s = x * coef.transpose();
    s.rowwise() += intercept.transpose();
    s.colwise() -= s.rowwise().maxCoeff();
    s = s.array().exp().matrix();
    s.array().colwise() /= s.rowwise().sum().array();
    return s;
  }
};

/// Per-class means, empirical priors and the pooled within-class covariance
/// (maximum-likelihood, N denominator) plus a ridge of 1e-6 * trace / dim on the diagonal.
inline LdaModel fit_lda(const Eigen::MatrixXd& x, std::span<const int> labels, int num_classes,
                        std::vector<std::string> fitted_on = {}) {
  const auto n = x.rows();
  const auto dim = x.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw DataError("LDA: label count does not match samples");
  if (num_classes < 2) throw UsageError("LDA needs at least 2 classes");
  if (n < dim + 1) throw DataError("LDA needs at least dim + 1 samples");

  LdaModel m;
  m.class_means = Eigen::MatrixXd::Zero(num_classes, dim);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(num_classes);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= num_classes) throw DataError("LDA: label " + std::to_string(y) + " out of range");
    m.class_means.row(y) += x.row(i);
    counts[y] += 1;
  }
  for (int k = 0; k < num_classes; ++k) {
    if (counts[k] == 0) throw DataError("LDA: class " + std::to_string(k) + " has no training samples");
    m.class_means.row(k) /= counts[k];
  }
  Eigen::MatrixXd centred = x;
  for (Eigen::Index i = 0; i < n; ++i) centred.row(i) -= m.class_means.row(labels[static_cast<std::size_t>(i)]);
  m.shared_covariance = (centred.transpose() * centred) / static_cast<double>(n);
  const double ridge = kLdaRidge * m.shared_covariance.trace() / static_cast<double>(dim);
  m.shared_covariance.diagonal().array() += ridge;
  m.priors = counts / static_cast<double>(n);
  m.fitted_on = std::move(fitted_on);
  m.factorize();
  return m;
}

}  // namespace emgssl

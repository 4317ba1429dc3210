#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <utility>

#include "speckle/image.hpp"
#include "speckle/rng.hpp"

namespace speckle::bayes {

/// Number of looks of an intensity product. L = 1 is single-look.
struct LooksParam {
  double L = 1.0;

  explicit LooksParam(double looks) : L(looks) {
    if (!(looks >= 1.0) || !std::isfinite(looks))
      throw std::domain_error("LooksParam: L must be finite and >= 1");
  }
};

/// Per-pixel inverse-gamma prior parameters predicted by the network.
template <class S>
struct PriorField {
  Image<S> alpha;
  Image<S> beta;

  void validate() const {
    if (alpha.rows() != beta.rows() || alpha.cols() != beta.cols())
      throw std::invalid_argument("PriorField: alpha/beta grids differ");
    if (!(alpha > S(0)).all() || !(beta > S(0)).all())
      throw std::domain_error("PriorField: alpha and beta must be positive");
  }
};

/// ln Gamma(t) for t > 0.
inline double log_gamma_fn(double t) {
  if (!(t > 0.0) || !std::isfinite(t))
    throw std::domain_error("log_gamma_fn: t must be finite and positive");
  return std::lgamma(t);
}

/// Digamma psi(t) = d/dt ln Gamma(t), t > 0. Recurrence up to t >= 8 then
/// the asymptotic series.
inline double digamma(double t) {
  if (!(t > 0.0) || !std::isfinite(t))
    throw std::domain_error("digamma: t must be finite and positive");
  double acc = 0.0;
  while (t < 8.0) {
    acc -= 1.0 / t;
    t += 1.0;
  }
  const double inv = 1.0 / t;
  const double inv2 = inv * inv;
  // B_2/2 t^-2, B_4/4 t^-4, ...
  const double series =
      inv2 * (1.0 / 12.0 -
              inv2 * (1.0 / 120.0 -
                      inv2 * (1.0 / 252.0 -
                              inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
  return acc + std::log(t) - 0.5 * inv - series;
}

/// Density of unit-mean Gamma(L, L) speckle at n >= 0.
inline double speckle_pdf(double n, const LooksParam& looks) {
  if (!(n >= 0.0)) throw std::domain_error("speckle_pdf: n must be >= 0");
  const double L = looks.L;
  if (n == 0.0) return L == 1.0 ? 1.0 : 0.0;
  return std::exp(L * std::log(L) + (L - 1.0) * std::log(n) - L * n -
                  log_gamma_fn(L));
}

/// i.i.d. Gamma(L, L) field, deterministic under seed.
template <class S = double>
Image<S> sample_speckle(const LooksParam& looks, Eigen::Index rows,
                        Eigen::Index cols, std::uint64_t seed) {
  if (rows <= 0 || cols <= 0)
    throw std::invalid_argument("sample_speckle: dims must be positive");
  Rng rng(seed);
  Image<S> out(rows, cols);
  const double L = looks.L;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      out(i, j) = static_cast<S>(rng.gamma(L) / L);
  return out;
}

inline void check_pixel_domain(double y, double alpha, double beta) {
  if (!(y >= 0.0) || !std::isfinite(y))
    throw std::domain_error("y must be finite and >= 0");
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw std::domain_error("alpha must be finite and positive");
  if (!(beta > 0.0) || !std::isfinite(beta))
    throw std::domain_error("beta must be finite and positive");
}

/// Posterior inverse-gamma parameters (L + alpha, beta + L y).
inline std::pair<double, double> posterior_params(double y, double alpha,
                                                  double beta,
                                                  const LooksParam& looks) {
  check_pixel_domain(y, alpha, beta);
  return {looks.L + alpha, beta + looks.L * y};
}

/// Posterior mean (beta + L y) / (L + alpha - 1); needs L + alpha > 1.
inline double posterior_mmse(double y, double alpha, double beta,
                             const LooksParam& looks) {
  check_pixel_domain(y, alpha, beta);
  const double shape = looks.L + alpha;
  if (!(shape > 1.0))
    throw std::domain_error("posterior_mmse: undefined mean, L + alpha <= 1");
  return (beta + looks.L * y) / (shape - 1.0);
}

/// Mean of the prior inv-gamma, beta / (alpha - 1); needs alpha > 1.
inline double prior_mean(double alpha, double beta) {
  if (!(alpha > 0.0) || !(beta > 0.0))
    throw std::domain_error("prior_mean: alpha, beta must be positive");
  if (!(alpha > 1.0))
    throw std::domain_error("prior_mean: undefined mean, alpha <= 1");
  return beta / (alpha - 1.0);
}

/// -ln p(y|Omega) under the closed-form marginal
///   p(y|Omega) = L^L y^(L-1) / [beta^-alpha Beta(L,alpha) (beta+Ly)^(L+alpha)].
/// Computed entirely in the log domain. y = 0 with L > 1 yields the +inf
/// sentinel (the density is 0 there).
inline double neg_log_likelihood(double y, double alpha, double beta,
                                 const LooksParam& looks) {
  check_pixel_domain(y, alpha, beta);
  const double L = looks.L;
  if (y == 0.0 && L > 1.0) return std::numeric_limits<double>::infinity();
  const double log_beta_fn =
      log_gamma_fn(L) + log_gamma_fn(alpha) - log_gamma_fn(L + alpha);
  const double log_y_term = (L == 1.0) ? 0.0 : (L - 1.0) * std::log(y);
  const double log_p = L * std::log(L) + log_y_term + alpha * std::log(beta) -
                       log_beta_fn - (L + alpha) * std::log(beta + L * y);
  return -log_p;
}

/// Partial derivatives of neg_log_likelihood w.r.t. (alpha, beta); used by
/// the training loss backward pass.
inline std::pair<double, double> neg_log_likelihood_grad(
    double y, double alpha, double beta, const LooksParam& looks) {
  check_pixel_domain(y, alpha, beta);
  const double L = looks.L;
  const double denom = beta + L * y;
  const double d_alpha = -(std::log(beta) + digamma(L + alpha) -
                           digamma(alpha) - std::log(denom));
  const double d_beta = -(alpha / beta - (L + alpha) / denom);
  return {d_alpha, d_beta};
}

}  // namespace speckle::bayes

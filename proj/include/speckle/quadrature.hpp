#pragma once

#include <cmath>
#include <functional>

namespace speckle::quad {

namespace detail {

inline double simpson(double a, double b, double fa, double fm, double fb) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

template <class F>
double adapt(const F& f, double a, double b, double fa, double fm, double fb,
             double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = simpson(a, m, fa, flm, fm);
  const double right = simpson(m, b, fm, frm, fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol)
    return left + right + delta / 15.0;
  return adapt(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         adapt(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

}  // namespace detail

/// Adaptive Simpson quadrature of f over [a, b].
template <class F>
double integrate(const F& f, double a, double b, double tol = 1e-12,
                 int max_depth = 48) {
  const double m = 0.5 * (a + b);
  const double fa = f(a), fm = f(m), fb = f(b);
  const double whole = detail::simpson(a, b, fa, fm, fb);
  return detail::adapt(f, a, b, fa, fm, fb, whole, tol, max_depth);
}

/// Integral of g over (0, inf) via the substitution y = e^u. The integrand
/// g must decay at both ends in the log domain; [u_lo, u_hi] is widened
/// until the endpoint contributions are negligible against the mode.
template <class G>
double integrate_positive_axis(const G& g, double tol = 1e-12) {
  auto h = [&](double u) {
    const double y = std::exp(u);
    return g(y) * y;
  };
  double u_lo = -4.0, u_hi = 4.0;
  double peak = 0.0;
  for (double u = u_lo; u <= u_hi; u += 0.25)
    peak = std::max(peak, std::abs(h(u)));
  if (peak == 0.0) peak = 1.0;
  const double floor = peak * 1e-18;
  while (std::abs(h(u_lo)) > floor && u_lo > -700.0) u_lo -= 2.0;
  while (std::abs(h(u_hi)) > floor && u_hi < 700.0) u_hi += 2.0;
  return integrate(h, u_lo, u_hi, tol);
}

}  // namespace speckle::quad

#pragma once

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <cstdint>
#include <stdexcept>
#include <utility>

#include "speckle/bayes.hpp"
#include "speckle/image.hpp"
#include "speckle/rng.hpp"

namespace speckle::sim {

/// Odd-sized point spread function, normalized to unit sum.
struct PsfKernel {
  ImageD taps;

  explicit PsfKernel(ImageD t) : taps(std::move(t)) {
    if (taps.rows() % 2 == 0 || taps.cols() % 2 == 0)
      throw std::invalid_argument("PsfKernel: size must be odd");
    if (!taps.isFinite().all())
      throw std::invalid_argument("PsfKernel: non-finite taps");
    const double s = taps.sum();
    if (std::abs(s) < 1e-12)
      throw std::invalid_argument("PsfKernel: zero-sum kernel");
    taps /= s;
  }

  static PsfKernel delta() {
    ImageD t = ImageD::Zero(1, 1);
    t(0, 0) = 1.0;
    return PsfKernel(std::move(t));
  }

  /// Separable truncated Gaussian; anisotropy via distinct sigmas.
  static PsfKernel gaussian(double sigma_v, double sigma_h, int size) {
    if (size % 2 == 0 || size < 1)
      throw std::invalid_argument("PsfKernel: size must be odd and >= 1");
    const int r = size / 2;
    ImageD t(size, size);
    for (int i = -r; i <= r; ++i)
      for (int j = -r; j <= r; ++j)
        t(i + r, j + r) = std::exp(-0.5 * (i * i / (sigma_v * sigma_v) +
                                           j * j / (sigma_h * sigma_h)));
    return PsfKernel(std::move(t));
  }
};

/// Default correlation PSF for the decorrelation experiments: stronger
/// vertical smearing than horizontal.
inline PsfKernel default_correlation_psf() {
  return PsfKernel::gaussian(1.0, 0.3, 5);
}

namespace detail {
// symmetric (mirror) border extension
inline Eigen::Index reflect(Eigen::Index idx, Eigen::Index n) {
  while (idx < 0 || idx >= n) {
    if (idx < 0) idx = -idx - 1;
    if (idx >= n) idx = 2 * n - 1 - idx;
  }
  return idx;
}
}  // namespace detail

/// 2-D convolution with reflective border extension.
template <class S>
Image<S> correlate_field(const Image<S>& field, const PsfKernel& psf) {
  const Eigen::Index h = field.rows(), w = field.cols();
  const Eigen::Index kr = psf.taps.rows() / 2, kc = psf.taps.cols() / 2;
  Image<S> out(h, w);
  for (Eigen::Index i = 0; i < h; ++i) {
    for (Eigen::Index j = 0; j < w; ++j) {
      double acc = 0.0;
      for (Eigen::Index a = -kr; a <= kr; ++a)
        for (Eigen::Index b = -kc; b <= kc; ++b)
          acc += psf.taps(kr + a, kc + b) *
                 static_cast<double>(field(detail::reflect(i - a, h),
                                           detail::reflect(j - b, w)));
      out(i, j) = static_cast<S>(acc);
    }
  }
  return out;
}

template <class S>
struct WhitenResult {
  Image<S> img;
  double clamped_fraction = 0.0;  // share of pixels clipped at zero
};

/// Frequency-domain inverse filtering with a Tikhonov guard:
/// X = Y * conj(H) / (|H|^2 + eps_reg). Output is the real part with
/// negatives clamped to zero.
template <class S>
WhitenResult<S> whiten_known_psf(const Image<S>& img, const PsfKernel& psf,
                                 double eps_reg) {
  if (!(eps_reg > 0.0))
    throw std::invalid_argument("whiten_known_psf: eps_reg must be > 0");
  using C = std::complex<double>;
  using MatC = Eigen::Matrix<C, Eigen::Dynamic, Eigen::Dynamic>;
  const Eigen::Index h = img.rows(), w = img.cols();

  // PSF on the image grid, center tap wrapped to the origin
  MatC psf_grid = MatC::Zero(h, w);
  const Eigen::Index kr = psf.taps.rows() / 2, kc = psf.taps.cols() / 2;
  for (Eigen::Index a = 0; a < psf.taps.rows(); ++a)
    for (Eigen::Index b = 0; b < psf.taps.cols(); ++b) {
      const Eigen::Index i = ((a - kr) % h + h) % h;
      const Eigen::Index j = ((b - kc) % w + w) % w;
      psf_grid(i, j) += psf.taps(a, b);
    }

  MatC y(h, w);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) y(i, j) = C(img(i, j), 0.0);

  Eigen::FFT<double> fft;
  auto fft2 = [&](MatC& m, bool inverse) {
    Eigen::VectorXcd line, tmp;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      line = m.row(i).transpose();
      tmp.resize(line.size());
      if (inverse)
        fft.inv(tmp, line);
      else
        fft.fwd(tmp, line);
      m.row(i) = tmp.transpose();
    }
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      line = m.col(j);
      tmp.resize(line.size());
      if (inverse)
        fft.inv(tmp, line);
      else
        fft.fwd(tmp, line);
      m.col(j) = tmp;
    }
  };

  fft2(psf_grid, false);
  fft2(y, false);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) {
      const C hh = psf_grid(i, j);
      y(i, j) *= std::conj(hh) / (std::norm(hh) + eps_reg);
    }
  fft2(y, true);

  WhitenResult<S> res;
  res.img.resize(h, w);
  Eigen::Index clamped = 0;
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) {
      double v = y(i, j).real();
      if (v < 0.0) {
        v = 0.0;
        ++clamped;
      }
      res.img(i, j) = static_cast<S>(v);
    }
  res.clamped_fraction = static_cast<double>(clamped) / (h * w);
  return res;
}

template <class S>
struct Autocorr {
  Image<S> lags;  // (2*max_lag+1)^2 map, center normalized to 1
  bool degenerate = false;

  S at(Eigen::Index di, Eigen::Index dj) const {
    const Eigen::Index m = lags.rows() / 2;
    return lags(m + di, m + dj);
  }
};

/// Biased sample autocorrelation of the mean-removed field.
template <class S>
Autocorr<S> autocorrelation(const Image<S>& field, int max_lag) {
  const Eigen::Index h = field.rows(), w = field.cols();
  if (h <= 2 * max_lag || w <= 2 * max_lag)
    throw std::invalid_argument("autocorrelation: field too small for lag");
  Autocorr<S> res;
  res.lags = Image<S>::Zero(2 * max_lag + 1, 2 * max_lag + 1);
  Image<double> f = field.template cast<double>();
  f -= f.mean();
  const double denom = f.square().sum();
  if (denom < 1e-30) {
    res.degenerate = true;
    return res;
  }
  for (int di = -max_lag; di <= max_lag; ++di) {
    for (int dj = -max_lag; dj <= max_lag; ++dj) {
      double acc = 0.0;
      for (Eigen::Index i = std::max<Eigen::Index>(0, -di);
           i < h - std::max<Eigen::Index>(0, di); ++i)
        for (Eigen::Index j = std::max<Eigen::Index>(0, -dj);
             j < w - std::max<Eigen::Index>(0, dj); ++j)
          acc += f(i, j) * f(i + di, j + dj);
      res.lags(max_lag + di, max_lag + dj) = static_cast<S>(acc / denom);
    }
  }
  return res;
}

/// noisy = clean (.)  Gamma(L, L) speckle, deterministic under seed.
template <class S>
std::pair<Image<S>, Image<S>> make_synthetic_pair(const Image<S>& clean,
                                                  const bayes::LooksParam& L,
                                                  std::uint64_t seed) {
  if ((clean < S(0)).any())
    throw std::domain_error("make_synthetic_pair: clean must be >= 0");
  Image<S> n = bayes::sample_speckle<S>(L, clean.rows(), clean.cols(), seed);
  return {clean * n, clean};
}

/// Procedural clean scene: gradient background, flat shapes, a sinusoidal
/// texture strip and a few thin lines. Gives flat regions for ENL-style
/// metrics and hard edges for fidelity checks.
inline ImageD synthesize_clean(std::uint64_t seed, Eigen::Index rows,
                               Eigen::Index cols) {
  Rng rng(seed);
  ImageD img(rows, cols);
  const double gx = (rng.uniform() - 0.5) * 80.0 / cols;
  const double gy = (rng.uniform() - 0.5) * 80.0 / rows;
  const double base = 60.0 + 80.0 * rng.uniform();
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) img(i, j) = base + gy * i + gx * j;

  const int n_shapes = 4 + static_cast<int>(rng.below(5));
  for (int s = 0; s < n_shapes; ++s) {
    const double level = 20.0 + 220.0 * rng.uniform();
    const bool ellipse = rng.uniform() < 0.5;
    const double ci = rows * rng.uniform(), cj = cols * rng.uniform();
    const double ri = rows * (0.05 + 0.2 * rng.uniform());
    const double rj = cols * (0.05 + 0.2 * rng.uniform());
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) {
        const double di = (i - ci) / ri, dj = (j - cj) / rj;
        const bool inside = ellipse ? (di * di + dj * dj <= 1.0)
                                    : (std::abs(di) <= 1.0 && std::abs(dj) <= 1.0);
        if (inside) img(i, j) = level;
      }
  }

  if (rng.uniform() < 0.7) {
    // sinusoidal texture band
    const Eigen::Index i0 = static_cast<Eigen::Index>(rows * rng.uniform() * 0.7);
    const Eigen::Index i1 = std::min(rows, i0 + rows / 4);
    const double freq = 0.2 + 0.6 * rng.uniform();
    const double amp = 15.0 + 25.0 * rng.uniform();
    for (Eigen::Index i = i0; i < i1; ++i)
      for (Eigen::Index j = 0; j < cols; ++j)
        img(i, j) += amp * std::sin(freq * j + 0.3 * i);
  }

  const int n_lines = static_cast<int>(rng.below(4));
  for (int s = 0; s < n_lines; ++s) {
    const double level = 20.0 + 220.0 * rng.uniform();
    const bool horiz = rng.uniform() < 0.5;
    const Eigen::Index pos = static_cast<Eigen::Index>(
        (horiz ? rows : cols) * rng.uniform());
    const Eigen::Index thick = 1 + static_cast<Eigen::Index>(rng.below(3));
    for (Eigen::Index t = 0; t < thick; ++t) {
      const Eigen::Index p = std::min(pos + t, (horiz ? rows : cols) - 1);
      if (horiz)
        img.row(p).setConstant(level);
      else
        img.col(p).setConstant(level);
    }
  }

  return img.cwiseMax(5.0).cwiseMin(255.0);
}

/// Piecewise-constant chart with alternating bright/dark squares; used to
/// probe high-frequency fidelity.
inline ImageD edge_chart(Eigen::Index rows, Eigen::Index cols,
                         Eigen::Index period) {
  ImageD img(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      img(i, j) = ((i / period + j / period) % 2 == 0) ? 40.0 : 220.0;
  return img;
}

}  // namespace speckle::sim

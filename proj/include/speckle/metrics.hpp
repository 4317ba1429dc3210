#pragma once

// Full-reference (PSNR) and no-reference (ENL, ratio moments, M index, RIS)
// despeckling quality metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "speckle/bayes.hpp"
#include "speckle/image.hpp"

namespace speckle::metrics {

inline constexpr double kEnlCap = 1e6;  // stands in for the +inf sentinel
                                        // inside M-index aggregation

struct WindowRect {
  Eigen::Index row = 0, col = 0, size = 0;
};

/// 10 log10(peak^2 / MSE); identical images return +inf.
template <class S>
double psnr(const Image<S>& reference, const Image<S>& estimate, double peak) {
  if (reference.rows() != estimate.rows() ||
      reference.cols() != estimate.cols())
    throw std::invalid_argument("psnr: shape mismatch");
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be > 0");
  const double mse =
      (reference.template cast<double>() - estimate.template cast<double>())
          .square()
          .mean();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

/// Equivalent number of looks: mean^2 / sample variance (n-1 denominator).
/// Constant regions return the +inf sentinel.
template <class S>
double enl(const Image<S>& region) {
  if (region.size() == 0) throw std::invalid_argument("enl: empty window");
  if (region.size() < 16)
    throw std::invalid_argument("enl: window must hold at least 16 pixels");
  const double mean = region.template cast<double>().mean();
  const double var =
      (region.template cast<double>() - mean).square().sum() /
      (region.size() - 1);
  if (var == 0.0) return std::numeric_limits<double>::infinity();
  return mean * mean / var;
}

struct RatioMoments {
  double mu = 0.0;
  double sigma = 0.0;
  double excluded_fraction = 0.0;
  bool excluded_warning = false;  // more than 10% of pixels skipped
};

/// Mean and standard deviation of r = noisy / estimate; pixels where the
/// estimate is not positive are excluded and counted.
template <class S>
RatioMoments ratio_moments(const Image<S>& noisy, const Image<S>& estimate) {
  if (noisy.rows() != estimate.rows() || noisy.cols() != estimate.cols())
    throw std::invalid_argument("ratio_moments: shape mismatch");
  double sum = 0.0, sum2 = 0.0;
  Eigen::Index used = 0;
  for (Eigen::Index i = 0; i < noisy.size(); ++i) {
    if (!(estimate(i) > S(0))) continue;
    const double r = static_cast<double>(noisy(i)) / estimate(i);
    sum += r;
    sum2 += r * r;
    ++used;
  }
  RatioMoments out;
  out.excluded_fraction =
      1.0 - static_cast<double>(used) / static_cast<double>(noisy.size());
  out.excluded_warning = out.excluded_fraction > 0.10;
  if (used == 0) return out;
  out.mu = sum / used;
  const double var = std::max(0.0, sum2 / used - out.mu * out.mu);
  out.sigma = std::sqrt(var);
  return out;
}

namespace detail {

/// Quantile quantizer: equal-probability bins via sorted thresholds.
template <class S>
std::vector<int> quantize_levels(const Image<S>& img, int levels) {
  std::vector<double> sorted(img.size());
  for (Eigen::Index i = 0; i < img.size(); ++i)
    sorted[i] = static_cast<double>(img(i));
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> thresh(levels - 1);
  for (int k = 1; k < levels; ++k)
    thresh[k - 1] =
        sorted[std::min<std::size_t>(sorted.size() - 1,
                                     sorted.size() * k / levels)];
  std::vector<int> bins(img.size());
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const double v = img(i);
    bins[i] = static_cast<int>(
        std::upper_bound(thresh.begin(), thresh.end(), v) - thresh.begin());
  }
  return bins;
}

}  // namespace detail

/// Unit offsets at 0, 45, 90, 135 degrees.
inline std::vector<std::pair<int, int>> glcm_unit_offsets() {
  return {{0, 1}, {1, 1}, {1, 0}, {1, -1}};
}

/// Haralick homogeneity of the symmetric gray-level co-occurrence matrix
/// accumulated over the given offsets; quantization is quantile-based so
/// the measure is invariant to monotone intensity maps.
template <class S>
double glcm_homogeneity(const Image<S>& img, int levels,
                        const std::vector<std::pair<int, int>>& offsets) {
  if (levels < 2) throw std::invalid_argument("glcm: levels must be >= 2");
  for (auto [di, dj] : offsets)
    if (std::abs(di) >= img.rows() || std::abs(dj) >= img.cols())
      throw std::invalid_argument("glcm: window smaller than offset");
  const std::vector<int> bins = detail::quantize_levels(img, levels);
  std::vector<double> glcm(static_cast<std::size_t>(levels) * levels, 0.0);
  double total = 0.0;
  const Eigen::Index h = img.rows(), w = img.cols();
  for (auto [di, dj] : offsets) {
    for (Eigen::Index i = std::max(0, -di); i < h - std::max(0, di); ++i)
      for (Eigen::Index j = std::max(0, -dj); j < w - std::max(0, dj); ++j) {
        const int a = bins[i * w + j];
        const int b = bins[(i + di) * w + (j + dj)];
        glcm[a * levels + b] += 1.0;
        glcm[b * levels + a] += 1.0;
        total += 2.0;
      }
  }
  double hom = 0.0;
  for (int a = 0; a < levels; ++a)
    for (int b = 0; b < levels; ++b)
      hom += glcm[a * levels + b] / total / (1.0 + std::abs(a - b));
  return hom;
}

/// The n non-overlapping windows with the lowest coefficient of variation,
/// greedy in ascending CV order over all stride-1 positions.
template <class S>
std::vector<WindowRect> select_homogeneous_windows(const Image<S>& img, int n,
                                                    Eigen::Index window) {
  const Eigen::Index h = img.rows(), w = img.cols();
  if (window <= 0 || window > h || window > w)
    throw std::invalid_argument("select_homogeneous_windows: bad window size");

  // integral images for O(1) window statistics
  Eigen::ArrayXXd s1 = Eigen::ArrayXXd::Zero(h + 1, w + 1);
  Eigen::ArrayXXd s2 = Eigen::ArrayXXd::Zero(h + 1, w + 1);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) {
      const double v = img(i, j);
      s1(i + 1, j + 1) = v + s1(i, j + 1) + s1(i + 1, j) - s1(i, j);
      s2(i + 1, j + 1) = v * v + s2(i, j + 1) + s2(i + 1, j) - s2(i, j);
    }
  const double cnt = static_cast<double>(window) * window;

  struct Cand {
    double cv;
    Eigen::Index i, j;
  };
  std::vector<Cand> cands;
  cands.reserve((h - window + 1) * (w - window + 1));
  for (Eigen::Index i = 0; i + window <= h; ++i)
    for (Eigen::Index j = 0; j + window <= w; ++j) {
      const double sum = s1(i + window, j + window) - s1(i, j + window) -
                         s1(i + window, j) + s1(i, j);
      const double sum2 = s2(i + window, j + window) - s2(i, j + window) -
                          s2(i + window, j) + s2(i, j);
      const double mean = sum / cnt;
      const double var = std::max(0.0, sum2 / cnt - mean * mean);
      const double cv =
          std::abs(mean) < 1e-300 ? std::numeric_limits<double>::infinity()
                                  : std::sqrt(var) / std::abs(mean);
      cands.push_back({cv, i, j});
    }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Cand& a, const Cand& b) { return a.cv < b.cv; });

  std::vector<WindowRect> picked;
  for (const Cand& c : cands) {
    if (static_cast<int>(picked.size()) == n) break;
    bool overlaps = false;
    for (const auto& p : picked)
      if (c.i < p.row + window && p.row < c.i + window &&
          c.j < p.col + window && p.col < c.j + window) {
        overlaps = true;
        break;
      }
    if (!overlaps) picked.push_back({c.i, c.j, window});
  }
  if (static_cast<int>(picked.size()) < n)
    throw std::invalid_argument(
        "select_homogeneous_windows: only " + std::to_string(picked.size()) +
        " non-overlapping windows available, requested " + std::to_string(n));
  return picked;
}

template <class S>
Image<S> ratio_image(const Image<S>& noisy, const Image<S>& estimate) {
  if (noisy.rows() != estimate.rows() || noisy.cols() != estimate.cols())
    throw std::invalid_argument("ratio_image: shape mismatch");
  Image<S> r(noisy.rows(), noisy.cols());
  for (Eigen::Index i = 0; i < r.size(); ++i)
    r(i) = estimate(i) > S(0) ? noisy(i) / estimate(i) : S(0);
  return r;
}

/// Ratio image structuredness: homogeneity of the ratio image minus the
/// mean homogeneity of i.i.d. Gamma(L, L) fields of the same size,
/// clamped at zero. 64 quantile levels, unit offsets in 4 directions.
template <class S>
double ris(const Image<S>& noisy, const Image<S>& estimate,
           const bayes::LooksParam& looks,
           const std::vector<std::uint64_t>& baseline_seeds) {
  if (baseline_seeds.size() < 8)
    throw std::invalid_argument("ris: need at least 8 baseline seeds");
  Image<S> r = ratio_image(noisy, estimate);
  const double h_r = glcm_homogeneity(r, 64, glcm_unit_offsets());
  double h0 = 0.0;
  for (std::uint64_t seed : baseline_seeds) {
    Image<S> field =
        bayes::sample_speckle<S>(looks, r.rows(), r.cols(), seed);
    h0 += glcm_homogeneity(field, 64, glcm_unit_offsets());
  }
  h0 /= static_cast<double>(baseline_seeds.size());
  return std::max(0.0, h_r - h0);
}

struct MIndexBreakdown {
  double m = 0.0;
  double first_order = 0.0;
  double second_order = 0.0;
  bool enl_capped = false;
  std::vector<WindowRect> windows;
};

/// M = first_order + second_order. First order averages, over n windows
/// selected as the most homogeneous areas of the estimate, the ENL
/// deviation |ENL(r_w) - L| / L plus the mean deviation |mean(r_w) - 1| of
/// the ratio image; the second order is RIS. ENL sentinels are capped at
/// 1e6 so degenerate ratios stay finite (the cap is reported).
template <class S>
MIndexBreakdown m_index(const Image<S>& noisy, const Image<S>& estimate,
                        const bayes::LooksParam& looks, int n,
                        Eigen::Index window,
                        const std::vector<std::uint64_t>& baseline_seeds) {
  MIndexBreakdown out;
  out.windows = select_homogeneous_windows(estimate, n, window);
  Image<S> r = ratio_image(noisy, estimate);
  for (const auto& wr : out.windows) {
    Image<S> rw = r.block(wr.row, wr.col, wr.size, wr.size);
    double e = enl(rw);
    if (!std::isfinite(e) || e > kEnlCap) {
      e = kEnlCap;
      out.enl_capped = true;
    }
    const double mean_rw = rw.template cast<double>().mean();
    out.first_order +=
        std::abs(e - looks.L) / looks.L + std::abs(mean_rw - 1.0);
  }
  out.first_order /= static_cast<double>(n);
  out.second_order = ris(noisy, estimate, looks, baseline_seeds);
  out.m = out.first_order + out.second_order;
  return out;
}

// ---------------------------------------------------------------------------
// report

struct MetricsReport {
  std::optional<double> psnr_db;
  std::vector<double> enl_regions;
  std::vector<WindowRect> enl_windows;
  double mu_r = 0.0;
  double sigma_r = 0.0;
  double ratio_excluded_fraction = 0.0;
  bool ratio_excluded_warning = false;
  double m = 0.0;
  double m_first_order = 0.0;
  double m_second_order = 0.0;
  bool enl_capped = false;
  double ris_value = 0.0;
  int margin = 0;

  std::string to_kv() const {
    std::ostringstream os;
    os.precision(10);
    os << "schema = metrics-report-v1\n";
    os << "psnr_db = ";
    if (!psnr_db)
      os << "none";
    else if (std::isinf(*psnr_db))
      os << "inf";
    else
      os << *psnr_db;
    os << "\n";
    os << "mu_r = " << mu_r << "\n";
    os << "sigma_r = " << sigma_r << "\n";
    os << "ratio_excluded_fraction = " << ratio_excluded_fraction << "\n";
    os << "ratio_excluded_warning = " << (ratio_excluded_warning ? 1 : 0)
       << "\n";
    os << "m_index = " << m << "\n";
    os << "m_first_order = " << m_first_order << "\n";
    os << "m_second_order = " << m_second_order << "\n";
    os << "enl_capped = " << (enl_capped ? 1 : 0) << "\n";
    os << "ris = " << ris_value << "\n";
    os << "margin = " << margin << "\n";
    os << "enl_count = " << enl_regions.size() << "\n";
    for (std::size_t k = 0; k < enl_regions.size(); ++k) {
      os << "enl_" << k << " = ";
      if (std::isinf(enl_regions[k]))
        os << "inf";
      else
        os << enl_regions[k];
      os << "\n";
      if (k < enl_windows.size())
        os << "enl_window_" << k << " = " << enl_windows[k].row << ","
           << enl_windows[k].col << "," << enl_windows[k].size << "\n";
    }
    return os.str();
  }

  static MetricsReport from_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find(" = ");
      if (eq != std::string::npos)
        kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    if (kv["schema"] != "metrics-report-v1")
      throw std::invalid_argument("MetricsReport: unknown schema");
    auto num = [&](const std::string& key) { return std::stod(kv.at(key)); };
    MetricsReport r;
    if (kv.at("psnr_db") == "inf")
      r.psnr_db = std::numeric_limits<double>::infinity();
    else if (kv.at("psnr_db") != "none")
      r.psnr_db = num("psnr_db");
    r.mu_r = num("mu_r");
    r.sigma_r = num("sigma_r");
    r.ratio_excluded_fraction = num("ratio_excluded_fraction");
    r.ratio_excluded_warning = kv.at("ratio_excluded_warning") == "1";
    r.m = num("m_index");
    r.m_first_order = num("m_first_order");
    r.m_second_order = num("m_second_order");
    r.enl_capped = kv.at("enl_capped") == "1";
    r.ris_value = num("ris");
    r.margin = static_cast<int>(num("margin"));
    const int count = static_cast<int>(num("enl_count"));
    for (int k = 0; k < count; ++k) {
      const std::string v = kv.at("enl_" + std::to_string(k));
      r.enl_regions.push_back(v == "inf"
                                  ? std::numeric_limits<double>::infinity()
                                  : std::stod(v));
      auto it = kv.find("enl_window_" + std::to_string(k));
      if (it != kv.end()) {
        WindowRect wr;
        std::sscanf(it->second.c_str(), "%ld,%ld,%ld", &wr.row, &wr.col,
                    &wr.size);
        r.enl_windows.push_back(wr);
      }
    }
    return r;
  }

  std::string to_table() const {
    std::ostringstream os;
    os.precision(4);
    os << "metric            value\n";
    os << "----------------  ----------\n";
    os << "PSNR (dB)         ";
    if (!psnr_db)
      os << "n/a";
    else if (std::isinf(*psnr_db))
      os << "inf";
    else
      os << *psnr_db;
    os << "\n";
    os << "mu_r              " << mu_r << "\n";
    os << "sigma_r           " << sigma_r << "\n";
    os << "M index           " << m << (enl_capped ? "  (ENL capped)" : "")
       << "\n";
    os << "RIS               " << ris_value << "\n";
    for (std::size_t k = 0; k < enl_regions.size(); ++k)
      os << "ENL window " << k << "      " << enl_regions[k] << "\n";
    os << "border margin     " << margin << "\n";
    return os.str();
  }
};

/// Full no-reference suite (plus PSNR when a reference is available) on
/// margin-cropped images.
template <class S>
MetricsReport evaluate(const Image<S>& noisy, const Image<S>& estimate,
                       const Image<S>* reference, const bayes::LooksParam& looks,
                       int margin, int enl_windows_n = 4,
                       Eigen::Index enl_window_size = 32, double peak = 255.0,
                       std::uint64_t baseline_seed = 0x5eedba5e) {
  if (noisy.rows() != estimate.rows() || noisy.cols() != estimate.cols())
    throw std::invalid_argument("evaluate: shape mismatch");
  const Eigen::Index h = noisy.rows() - 2 * margin;
  const Eigen::Index w = noisy.cols() - 2 * margin;
  if (h <= 0 || w <= 0)
    throw std::invalid_argument("evaluate: margin swallows the image");
  Image<S> nz = noisy.block(margin, margin, h, w);
  Image<S> est = estimate.block(margin, margin, h, w);

  MetricsReport rep;
  rep.margin = margin;
  if (reference) {
    Image<S> ref = reference->block(margin, margin, h, w);
    rep.psnr_db = psnr(ref, est, peak);
  }
  auto rm = ratio_moments(nz, est);
  rep.mu_r = rm.mu;
  rep.sigma_r = rm.sigma;
  rep.ratio_excluded_fraction = rm.excluded_fraction;
  rep.ratio_excluded_warning = rm.excluded_warning;

  std::vector<std::uint64_t> seeds;
  for (int k = 0; k < 8; ++k) seeds.push_back(baseline_seed + k);
  const Eigen::Index wsz = std::min({enl_window_size, h, w});
  auto mb = m_index(nz, est, looks, enl_windows_n, wsz, seeds);
  rep.m = mb.m;
  rep.m_first_order = mb.first_order;
  rep.m_second_order = mb.second_order;
  rep.enl_capped = mb.enl_capped;
  rep.ris_value = mb.second_order;
  for (const auto& wr : mb.windows) {
    rep.enl_windows.push_back(wr);
    rep.enl_regions.push_back(
        enl(Image<S>(est.block(wr.row, wr.col, wr.size, wr.size))));
  }
  return rep;
}

}  // namespace speckle::metrics

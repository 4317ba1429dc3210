#pragma once

// Self-supervised training loop: negative log likelihood of the noisy
// observations plus anisotropic TV on the posterior image, stochastic
// blind-spot shape schedule, Adam updates.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "speckle/autodiff.hpp"
#include "speckle/bayes.hpp"
#include "speckle/image.hpp"
#include "speckle/net.hpp"
#include "speckle/rng.hpp"

namespace speckle::train {

using ad::Buffer;
using ad::Shape4;

struct LrSchedule {
  double initial = 1e-4;
  std::uint64_t decay_step = 10000;
  double decay_factor = 0.1;

  double at(std::uint64_t iteration) const {
    return iteration >= decay_step ? initial * decay_factor : initial;
  }
};

struct ShapeChoice {
  net::BlindSpotShape shape;
  double probability = 1.0;
};

struct TrainingConfig {
  int batch_size = 16;
  int patch_size = 64;
  LrSchedule lr;
  double lambda_tv = 0.0;
  std::vector<ShapeChoice> shape_schedule = {{net::BlindSpotShape(), 1.0}};
  double looks = 1.0;
  std::uint64_t total_iterations = 20000;
  std::uint64_t seed = 0;
  int loss_margin = 6;
  std::uint64_t log_interval = 100;
  std::uint64_t checkpoint_interval = 5000;

  void validate(const net::NetConfig& net_cfg) const {
    double psum = 0.0;
    int max_extent = 0;
    for (const auto& e : shape_schedule) {
      e.shape.validate();
      if (e.probability < 0.0)
        throw std::invalid_argument("shape_schedule: negative probability");
      psum += e.probability;
      max_extent = std::max({max_extent, e.shape.up, e.shape.down,
                             e.shape.left, e.shape.right});
    }
    if (shape_schedule.empty() || std::abs(psum - 1.0) > 1e-9)
      throw std::invalid_argument(
          "shape_schedule: probabilities must sum to 1");
    if (patch_size < 2 * net_cfg.blocks + max_extent)
      throw std::invalid_argument(
          "patch_size too small for network depth and blind-spot extent");
    if (2 * loss_margin >= patch_size)
      throw std::invalid_argument("loss_margin swallows the whole patch");
    if (batch_size < 1 || total_iterations < 0)
      throw std::invalid_argument("bad batch size or iteration count");
  }
};

/// Anisotropic total variation with no wrap-around.
template <class S>
double tv_anisotropic(const Image<S>& x) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (i + 1 < x.rows())
        acc += std::abs(static_cast<double>(x(i + 1, j)) - x(i, j));
      if (j + 1 < x.cols())
        acc += std::abs(static_cast<double>(x(i, j + 1)) - x(i, j));
    }
  return acc;
}

/// Categorical draw from the shape schedule.
inline net::BlindSpotShape sample_shape(
    const std::vector<ShapeChoice>& schedule, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (const auto& e : schedule) {
    acc += e.probability;
    if (u < acc) return e.shape;
  }
  return schedule.back().shape;
}

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class S>
struct AdamState {
  std::vector<Buffer<S>> m, v;
  std::int64_t step = 0;
  AdamParams hp;

  static AdamState zeros_like(const std::vector<net::ParamRef<S>>& params,
                              AdamParams hp = {}) {
    AdamState st;
    st.hp = hp;
    for (const auto& p : params) {
      st.m.push_back(Buffer<S>::Zero(p.shape.count()));
      st.v.push_back(Buffer<S>::Zero(p.shape.count()));
    }
    return st;
  }
};

/// One bias-corrected Adam update over the parameter registry.
template <class S>
void adam_step(const std::vector<net::ParamRef<S>>& params,
               const std::vector<Buffer<S>>& grads, AdamState<S>& state,
               double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_step: registry size mismatch");
  state.step += 1;
  const double b1 = state.hp.beta1, b2 = state.hp.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Buffer<S>& w = *params[k].buf;
    const Buffer<S>& g = grads[k];
    if (!g.isFinite().all())
      throw std::runtime_error("adam_step: non-finite gradient in " +
                               params[k].name);
    Buffer<S>& m = state.m[k];
    Buffer<S>& v = state.v[k];
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      m[i] = static_cast<S>(b1 * m[i] + (1.0 - b1) * g[i]);
      v[i] = static_cast<S>(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + state.hp.eps));
    }
  }
}

struct PatchOrigin {
  std::size_t image = 0;
  Eigen::Index row = 0, col = 0;
};

/// Uniform random crops from the corpus; undersized images are skipped
/// (their indices are reported once through skipped_out).
template <class S>
std::vector<Image<S>> extract_patches(const std::vector<Image<S>>& corpus,
                                      int patch_size, int count, Rng& rng,
                                      std::vector<PatchOrigin>* origins = nullptr,
                                      std::vector<std::size_t>* skipped_out = nullptr) {
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].rows() >= patch_size && corpus[i].cols() >= patch_size)
      usable.push_back(i);
    else if (skipped_out)
      skipped_out->push_back(i);
  }
  if (usable.empty())
    throw std::invalid_argument("extract_patches: no image fits patch size");
  std::vector<Image<S>> out;
  out.reserve(count);
  for (int k = 0; k < count; ++k) {
    const std::size_t idx = usable[rng.below(usable.size())];
    const Image<S>& img = corpus[idx];
    const Eigen::Index oi =
        static_cast<Eigen::Index>(rng.below(img.rows() - patch_size + 1));
    const Eigen::Index oj =
        static_cast<Eigen::Index>(rng.below(img.cols() - patch_size + 1));
    out.push_back(img.block(oi, oj, patch_size, patch_size));
    if (origins) origins->push_back({idx, oi, oj});
  }
  return out;
}

/// NLL + lambda_tv * TV(posterior) over the margin-cropped patch interior.
/// y holds the scaled noisy batch; alpha/beta are the network outputs on
/// the same grid.
template <class S>
ad::Tensor<S> loss(ad::Tape<S>& tape, const net::PriorFieldT<S>& field,
                   const Buffer<S>& y, const Shape4& y_shape,
                   const bayes::LooksParam& looks, double lambda_tv,
                   int margin) {
  auto alpha = ad::crop(tape, field.alpha, margin, margin, margin, margin);
  auto beta = ad::crop(tape, field.beta, margin, margin, margin, margin);
  const Shape4 cs = alpha.shape();
  Buffer<S> yc(cs.count());
  for (Eigen::Index b = 0; b < cs.n; ++b)
    for (Eigen::Index i = 0; i < cs.h; ++i)
      for (Eigen::Index j = 0; j < cs.w; ++j)
        yc[ad::flat(cs, b, 0, i, j)] =
            y[ad::flat(y_shape, b, 0, i + margin, j + margin)];

  auto nll = ad::sum(tape, ad::g0_nll(tape, alpha, beta, yc, looks));
  if (lambda_tv == 0.0) return nll;
  auto xhat = ad::posterior_mean_map(tape, alpha, beta, yc, looks);
  auto tv_v = ad::sum(tape, ad::abs_tv(tape, ad::diff_down(tape, xhat)));
  auto tv_h = ad::sum(tape, ad::abs_tv(tape, ad::diff_right(tape, xhat)));
  auto tv = ad::add(tape, tv_v, tv_h);
  return ad::add(tape, nll, ad::scale(tape, tv, static_cast<S>(lambda_tv)));
}

struct LogRecord {
  std::uint64_t iteration = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::map<std::string, std::uint64_t> shape_counts;
  double seconds = 0.0;
};

struct FitReport {
  std::vector<LogRecord> log;
  bool aborted = false;
  std::string abort_reason;
};

struct FitHooks {
  // called at every checkpoint_interval and once at the end
  std::function<void(std::uint64_t)> on_checkpoint;
  std::function<void(const LogRecord&)> on_log;
};

inline std::string shape_key(const net::BlindSpotShape& s) {
  return std::to_string(s.up) + "," + std::to_string(s.down) + "," +
         std::to_string(s.left) + "," + std::to_string(s.right);
}

/// Runs the loop: sample shape, forward in train mode, loss, backward,
/// Adam step. Resumes from state.trained_iterations and stops at
/// cfg.total_iterations. Despeckling downstream always evaluates with a
/// 1x1 blind spot regardless of the training schedule.
template <class S>
FitReport fit(net::NetworkState<S>& state, AdamState<S>& adam,
              const std::vector<Image<S>>& corpus, const TrainingConfig& cfg,
              const FitHooks& hooks = {}) {
  cfg.validate(state.config);
  if (corpus.empty()) throw std::invalid_argument("fit: empty corpus");

  FitReport report;
  auto params = state.parameters();
  Rng shape_rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 1);
  Rng patch_rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 2);
  const bayes::LooksParam looks(cfg.looks);
  const S scale = static_cast<S>(state.config.input_scale);

  std::map<std::string, std::uint64_t> shape_counts;
  const auto t0 = std::chrono::steady_clock::now();
  double loss_acc = 0.0;
  std::uint64_t loss_n = 0;

  for (std::uint64_t it = state.trained_iterations; it < cfg.total_iterations;
       ++it) {
    const net::BlindSpotShape shape = sample_shape(cfg.shape_schedule,
                                                   shape_rng);
    shape_counts[shape_key(shape)] += 1;

    auto patches = extract_patches(corpus, cfg.patch_size, cfg.batch_size,
                                   patch_rng);
    const Shape4 ys{cfg.batch_size, 1, cfg.patch_size, cfg.patch_size};
    Buffer<S> ybuf(ys.count());
    for (int b = 0; b < cfg.batch_size; ++b)
      for (Eigen::Index i = 0; i < cfg.patch_size; ++i)
        for (Eigen::Index j = 0; j < cfg.patch_size; ++j)
          ybuf[ad::flat(ys, b, 0, i, j)] = patches[b](i, j) * scale;

    ad::Tape<S> tape;
    auto y = tape.leaf_from(ybuf, ys, false);
    net::Bindings<S> bound;
    auto field = net::forward(tape, y, state, shape, ad::Mode::kTrain, true,
                              &bound);
    auto l = loss(tape, field, ybuf, ys, looks, cfg.lambda_tv,
                  cfg.loss_margin);
    const double loss_value = static_cast<double>(l.value()[0]);
    if (!std::isfinite(loss_value)) {
      report.aborted = true;
      report.abort_reason = "non-finite loss at iteration " +
                            std::to_string(it);
      return report;
    }
    tape.backward(l);

    std::vector<Buffer<S>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) grads.push_back(bound.grad_of(p.buf));
    try {
      adam_step(params, grads, adam, cfg.lr.at(it));
    } catch (const std::runtime_error& e) {
      report.aborted = true;
      report.abort_reason = e.what();
      return report;
    }
    state.trained_iterations = it + 1;
    loss_acc += loss_value;
    loss_n += 1;

    if ((it + 1) % cfg.log_interval == 0 || it + 1 == cfg.total_iterations) {
      LogRecord rec;
      rec.iteration = it + 1;
      rec.loss = loss_acc / loss_n;
      rec.lr = cfg.lr.at(it);
      rec.shape_counts = shape_counts;
      rec.seconds = std::chrono::duration<double>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
      report.log.push_back(rec);
      if (hooks.on_log) hooks.on_log(rec);
      loss_acc = 0.0;
      loss_n = 0;
    }
    if (hooks.on_checkpoint &&
        ((it + 1) % cfg.checkpoint_interval == 0 ||
         it + 1 == cfg.total_iterations))
      hooks.on_checkpoint(it + 1);
  }
  return report;
}

}  // namespace speckle::train

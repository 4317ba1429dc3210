#pragma once

// Four-branch blind-spot network: each branch sees a half-plane receptive
// field produced by shifted convolutions on a rotated copy of the input,
// the four feature maps are shifted to shape the blind spot, rotated back,
// concatenated and fused by 1x1 convolutions into per-pixel inverse-gamma
// parameters.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "speckle/autodiff.hpp"
#include "speckle/bayes.hpp"
#include "speckle/image.hpp"
#include "speckle/rng.hpp"

namespace speckle::net {

using ad::Buffer;
using ad::Mode;
using ad::Shape4;
using ad::Tape;
using ad::Tensor;

/// Cross-shaped excluded region around each pixel, one shift per
/// direction. A shift of 1 excludes exactly the center pixel in that
/// branch; shift s excludes the center plus s-1 further pixels.
struct BlindSpotShape {
  int up = 1, down = 1, left = 1, right = 1;

  void validate() const {
    if (up < 1 || down < 1 || left < 1 || right < 1)
      throw std::invalid_argument(
          "BlindSpotShape: shifts must be >= 1 (center pixel is always "
          "excluded)");
  }
  bool operator==(const BlindSpotShape&) const = default;

  static BlindSpotShape square1() { return {1, 1, 1, 1}; }
  /// 3x1 vertical: center plus one pixel above and below.
  static BlindSpotShape vertical3() { return {2, 2, 1, 1}; }
  /// full 3-wide cross (the "3x3" ablation shape)
  static BlindSpotShape cross3() { return {2, 2, 2, 2}; }
};

struct NetConfig {
  int blocks = 8;
  int channels = 32;
  int kernel = 3;
  bool nonlocal = false;
  int nonlocal_every = 3;  // masked non-local layer after every 3rd block
  int nonlocal_q = 7;
  double lrelu_slope = 0.1;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  double positive_eps = 1e-3;
  double input_scale = 1.0 / 255.0;

  int nonlocal_count() const {
    return nonlocal ? blocks / nonlocal_every : 0;
  }
  bool operator==(const NetConfig&) const = default;
};

template <class S>
struct ConvBlock {
  Buffer<S> kernel;  // [out, in, k, k]
  Buffer<S> gamma, delta;
  ad::RunningStats<S> stats;
};

template <class S>
struct NonLocalWeights {
  Buffer<S> w_theta, w_psi, w_g;  // [c, c] each
};

/// One directional weight set; the vertical set serves the up and down
/// branches, the horizontal set the left and right ones.
template <class S>
struct BranchSet {
  std::vector<ConvBlock<S>> blocks;
  std::vector<NonLocalWeights<S>> nonlocal;
};

template <class S>
struct MergeHead {
  Buffer<S> k1, b1, k2, b2, k3, b3;  // three 1x1 stages: 4c -> 2c -> c -> 2
};

template <class S>
struct ParamRef {
  std::string name;
  Buffer<S>* buf;
  Shape4 shape;
};

template <class S>
struct NetworkState {
  NetConfig config;
  BranchSet<S> vertical, horizontal;
  MergeHead<S> merge;
  std::uint64_t trained_iterations = 0;

  static NetworkState random_init(const NetConfig& cfg, std::uint64_t seed);

  /// Trainable parameters in the fixed serialization order.
  std::vector<ParamRef<S>> parameters();
  /// Non-trainable per-channel statistics, same fixed order.
  std::vector<ParamRef<S>> running_stats();
};

namespace detail {

template <class S>
Buffer<S> uniform_init(Rng& rng, Eigen::Index count, double fan_in,
                       double fan_out) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  Buffer<S> b(count);
  for (Eigen::Index i = 0; i < count; ++i)
    b[i] = static_cast<S>(a * (2.0 * rng.uniform() - 1.0));
  return b;
}

template <class S>
BranchSet<S> init_branch_set(const NetConfig& cfg, Rng& rng) {
  BranchSet<S> set;
  const int c = cfg.channels, k = cfg.kernel;
  for (int b = 0; b < cfg.blocks; ++b) {
    const int cin = b == 0 ? 1 : c;
    ConvBlock<S> blk;
    blk.kernel = uniform_init<S>(rng, static_cast<Eigen::Index>(c) * cin * k * k,
                                 cin * k * k, c * k * k);
    blk.gamma = Buffer<S>::Constant(c, S(1));
    blk.delta = Buffer<S>::Zero(c);
    blk.stats.mean = Buffer<S>::Zero(c);
    blk.stats.var = Buffer<S>::Constant(c, S(1));
    set.blocks.push_back(std::move(blk));
  }
  for (int l = 0; l < cfg.nonlocal_count(); ++l) {
    NonLocalWeights<S> nl;
    nl.w_theta = uniform_init<S>(rng, c * c, c, c);
    nl.w_psi = uniform_init<S>(rng, c * c, c, c);
    nl.w_g = uniform_init<S>(rng, c * c, c, c);
    set.nonlocal.push_back(std::move(nl));
  }
  return set;
}

}  // namespace detail

template <class S>
NetworkState<S> NetworkState<S>::random_init(const NetConfig& cfg,
                                             std::uint64_t seed) {
  Rng rng(seed);
  NetworkState<S> st;
  st.config = cfg;
  st.vertical = detail::init_branch_set<S>(cfg, rng);
  st.horizontal = detail::init_branch_set<S>(cfg, rng);
  const int c = cfg.channels;
  st.merge.k1 = detail::uniform_init<S>(rng, 2 * c * 4 * c, 4 * c, 2 * c);
  st.merge.b1 = Buffer<S>::Zero(2 * c);
  st.merge.k2 = detail::uniform_init<S>(rng, c * 2 * c, 2 * c, c);
  st.merge.b2 = Buffer<S>::Zero(c);
  st.merge.k3 = detail::uniform_init<S>(rng, 2 * c, c, 2);
  st.merge.b3 = Buffer<S>::Zero(2);
  return st;
}

template <class S>
std::vector<ParamRef<S>> NetworkState<S>::parameters() {
  std::vector<ParamRef<S>> out;
  const int c = config.channels, k = config.kernel;
  auto add_set = [&](BranchSet<S>& set, const std::string& prefix) {
    for (std::size_t b = 0; b < set.blocks.size(); ++b) {
      const Eigen::Index cin = b == 0 ? 1 : c;
      auto& blk = set.blocks[b];
      const std::string base = prefix + ".block" + std::to_string(b);
      out.push_back({base + ".kernel", &blk.kernel, Shape4{c, cin, k, k}});
      out.push_back({base + ".gamma", &blk.gamma, Shape4{1, 1, 1, c}});
      out.push_back({base + ".delta", &blk.delta, Shape4{1, 1, 1, c}});
    }
    for (std::size_t l = 0; l < set.nonlocal.size(); ++l) {
      auto& nl = set.nonlocal[l];
      const std::string base = prefix + ".nonlocal" + std::to_string(l);
      out.push_back({base + ".w_theta", &nl.w_theta, Shape4{1, 1, c, c}});
      out.push_back({base + ".w_psi", &nl.w_psi, Shape4{1, 1, c, c}});
      out.push_back({base + ".w_g", &nl.w_g, Shape4{1, 1, c, c}});
    }
  };
  add_set(vertical, "vertical");
  add_set(horizontal, "horizontal");
  out.push_back({"merge.k1", &merge.k1, Shape4{2 * c, 4 * c, 1, 1}});
  out.push_back({"merge.b1", &merge.b1, Shape4{1, 1, 1, 2 * c}});
  out.push_back({"merge.k2", &merge.k2, Shape4{c, 2 * c, 1, 1}});
  out.push_back({"merge.b2", &merge.b2, Shape4{1, 1, 1, c}});
  out.push_back({"merge.k3", &merge.k3, Shape4{2, c, 1, 1}});
  out.push_back({"merge.b3", &merge.b3, Shape4{1, 1, 1, 2}});
  return out;
}

template <class S>
std::vector<ParamRef<S>> NetworkState<S>::running_stats() {
  std::vector<ParamRef<S>> out;
  const int c = config.channels;
  auto add_set = [&](BranchSet<S>& set, const std::string& prefix) {
    for (std::size_t b = 0; b < set.blocks.size(); ++b) {
      auto& blk = set.blocks[b];
      const std::string base = prefix + ".block" + std::to_string(b);
      out.push_back(
          {base + ".running_mean", &blk.stats.mean, Shape4{1, 1, 1, c}});
      out.push_back(
          {base + ".running_var", &blk.stats.var, Shape4{1, 1, 1, c}});
    }
  };
  add_set(vertical, "vertical");
  add_set(horizontal, "horizontal");
  return out;
}

/// Records which tape leaf holds each parameter buffer during a forward
/// pass, so the trainer can read gradients back after the sweep.
template <class S>
struct Bindings {
  std::vector<std::pair<const void*, Tensor<S>>> entries;

  void bind(const Buffer<S>* buf, const Tensor<S>& leaf) {
    entries.emplace_back(buf, leaf);
  }

  Buffer<S> grad_of(const Buffer<S>* buf) const {
    for (const auto& [p, t] : entries)
      if (p == buf)
        return t.node()->grad.size() > 0
                   ? t.grad()
                   : Buffer<S>::Zero(t.shape().count());
    throw std::logic_error("Bindings: parameter was not bound this pass");
  }
};

/// Exact 90-degree counter-clockwise rotation of a plain image, applied k
/// times; rotate_quarter(rotate_quarter(x, k), 4-k) == x.
template <class S>
Image<S> rotate_quarter(const Image<S>& img, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return img;
  const Eigen::Index h = img.rows(), w = img.cols();
  Image<S> out(k % 2 == 1 ? w : h, k % 2 == 1 ? h : w);
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      switch (k) {
        case 1: out(i, j) = img(j, w - 1 - i); break;
        case 2: out(i, j) = img(h - 1 - i, w - 1 - j); break;
        default: out(i, j) = img(h - 1 - j, i); break;
      }
    }
  return out;
}

/// Branch trunk: n blocks of [shifted conv -> batch norm -> leaky ReLU]
/// with optional masked non-local layers. The receptive field of output
/// pixel (i, j) stays confined to rows <= i of the branch input.
template <class S>
Tensor<S> branch_features(Tape<S>& tape, const Tensor<S>& x,
                          BranchSet<S>& set, const NetConfig& cfg, Mode mode,
                          Bindings<S>* bound = nullptr) {
  const int c = cfg.channels, k = cfg.kernel;
  Tensor<S> h = x;
  std::size_t nl_used = 0;
  auto make_leaf = [&](Buffer<S>& buf, const Shape4& shape) {
    auto t = tape.leaf_from(buf, shape, true);
    if (bound) bound->bind(&buf, t);
    return t;
  };
  for (std::size_t b = 0; b < set.blocks.size(); ++b) {
    auto& blk = set.blocks[b];
    const Eigen::Index cin = b == 0 ? 1 : c;
    auto kt = make_leaf(blk.kernel, Shape4{c, cin, k, k});
    auto gt = make_leaf(blk.gamma, Shape4{1, 1, 1, c});
    auto dt = make_leaf(blk.delta, Shape4{1, 1, 1, c});
    h = ad::shifted_conv_up(tape, h, kt);
    h = ad::batch_norm(tape, h, gt, dt, blk.stats, mode, cfg.bn_eps,
                       cfg.bn_momentum);
    h = ad::leaky_relu(tape, h, static_cast<S>(cfg.lrelu_slope));
    if (cfg.nonlocal && (b + 1) % cfg.nonlocal_every == 0 &&
        nl_used < set.nonlocal.size()) {
      auto& nl = set.nonlocal[nl_used++];
      auto wt = make_leaf(nl.w_theta, Shape4{1, 1, c, c});
      auto wp = make_leaf(nl.w_psi, Shape4{1, 1, c, c});
      auto wg = make_leaf(nl.w_g, Shape4{1, 1, c, c});
      h = ad::masked_nonlocal(tape, h, wt, wp, wg, cfg.nonlocal_q);
    }
  }
  return h;
}

/// Three 1x1 fusion stages over the concatenated branch maps; no spatial
/// mixing. Returns the raw 2-channel (alpha, beta) map.
template <class S>
Tensor<S> merge_heads(Tape<S>& tape, const Tensor<S>& cat, MergeHead<S>& m,
                      const NetConfig& cfg, Bindings<S>* bound = nullptr) {
  const Eigen::Index c = cfg.channels;
  if (cat.shape().c != 4 * c)
    throw std::invalid_argument("merge_heads: expected 4c channels");
  auto make_leaf = [&](Buffer<S>& buf, const Shape4& shape) {
    auto t = tape.leaf_from(buf, shape, true);
    if (bound) bound->bind(&buf, t);
    return t;
  };
  auto k1 = make_leaf(m.k1, Shape4{2 * c, 4 * c, 1, 1});
  auto b1 = make_leaf(m.b1, Shape4{1, 1, 1, 2 * c});
  auto k2 = make_leaf(m.k2, Shape4{c, 2 * c, 1, 1});
  auto b2 = make_leaf(m.b2, Shape4{1, 1, 1, c});
  auto k3 = make_leaf(m.k3, Shape4{2, c, 1, 1});
  auto b3 = make_leaf(m.b3, Shape4{1, 1, 1, 2});
  auto h = ad::leaky_relu(tape, ad::conv2d(tape, cat, k1, ad::Padding{}, &b1),
                          static_cast<S>(cfg.lrelu_slope));
  h = ad::leaky_relu(tape, ad::conv2d(tape, h, k2, ad::Padding{}, &b2),
                     static_cast<S>(cfg.lrelu_slope));
  return ad::conv2d(tape, h, k3, ad::Padding{}, &b3);
}

template <class S>
struct PriorFieldT {
  Tensor<S> alpha;
  Tensor<S> beta;
};

/// Full blind-spot forward pass on a batch [n, 1, h, w] of (scaled)
/// intensities. Rotation k = 0/2 route through the vertical weight set
/// (up/down branches), k = 1/3 through the horizontal one (right/left).
template <class S>
PriorFieldT<S> forward(Tape<S>& tape, const Tensor<S>& y,
                       NetworkState<S>& state, const BlindSpotShape& shape,
                       Mode mode, bool validate_shape = true,
                       Bindings<S>* bound = nullptr) {
  if (validate_shape) shape.validate();
  if (y.shape().c != 1)
    throw std::invalid_argument("forward: expected single-channel input");
  const Eigen::Index n = y.shape().n;
  const NetConfig& cfg = state.config;

  auto r0 = ad::rot90(tape, y, 0);
  auto r1 = ad::rot90(tape, y, 1);
  auto r2 = ad::rot90(tape, y, 2);
  auto r3 = ad::rot90(tape, y, 3);

  // one pass per weight set, rotations stacked along the batch
  auto vstack = ad::concat_batch<S>(tape, {r0, r2});
  auto vfeat = branch_features(tape, vstack, state.vertical, cfg, mode, bound);
  auto up = ad::slice_batch(tape, vfeat, 0, n);
  auto down = ad::slice_batch(tape, vfeat, n, n);

  auto hstack = ad::concat_batch<S>(tape, {r1, r3});
  auto hfeat =
      branch_features(tape, hstack, state.horizontal, cfg, mode, bound);
  auto right = ad::slice_batch(tape, hfeat, 0, n);
  auto left = ad::slice_batch(tape, hfeat, n, n);

  // blind-spot shaping: shift each branch down in its own frame
  up = ad::shift2d(tape, up, shape.up, 0);
  down = ad::shift2d(tape, down, shape.down, 0);
  right = ad::shift2d(tape, right, shape.right, 0);
  left = ad::shift2d(tape, left, shape.left, 0);

  // back to the common frame; concat order is fixed project-wide
  auto b_up = ad::rot90(tape, up, 0);
  auto b_down = ad::rot90(tape, down, 2);
  auto b_left = ad::rot90(tape, left, 1);
  auto b_right = ad::rot90(tape, right, 3);
  auto cat = ad::concat_channels<S>(tape, {b_up, b_down, b_left, b_right});

  auto raw = merge_heads(tape, cat, state.merge, cfg, bound);
  auto alpha_raw = ad::slice_channels(tape, raw, 0, 1);
  auto beta_raw = ad::slice_channels(tape, raw, 1, 1);
  PriorFieldT<S> field;
  field.alpha =
      ad::softplus_eps(tape, alpha_raw, static_cast<S>(cfg.positive_eps));
  field.beta =
      ad::softplus_eps(tape, beta_raw, static_cast<S>(cfg.positive_eps));
  return field;
}

/// Worst-case spatial reach of one output pixel, used as the tile overlap
/// and the border margin excluded from metrics.
inline int receptive_margin(const NetConfig& cfg,
                            const BlindSpotShape& shape) {
  const int per_block = cfg.kernel / 2 + cfg.kernel / 2;  // shift + conv reach
  const int nl = cfg.nonlocal_count() * (cfg.nonlocal_q / 2);
  const int max_shift =
      std::max({shape.up, shape.down, shape.left, shape.right});
  return cfg.blocks * per_block + nl + max_shift;
}

template <class S>
struct DespeckleOutput {
  Image<S> posterior;
  Image<S> prior;  // prior mean, pixels with alpha <= 1 clamped
  double prior_clamped_fraction = 0.0;
};

/// Tiled eval-mode inference with a 1x1 blind spot unless configured
/// otherwise. Tiles overlap by the receptive margin and the overlaps are
/// cropped, so the tiled result matches a single full-image pass exactly.
template <class S>
DespeckleOutput<S> despeckle_image(const Image<S>& noisy, NetworkState<S>& state,
                                   const bayes::LooksParam& looks,
                                   Eigen::Index tile = 128,
                                   BlindSpotShape shape = BlindSpotShape()) {
  const NetConfig& cfg = state.config;
  const Eigen::Index margin = receptive_margin(cfg, shape);
  const Eigen::Index h = noisy.rows(), w = noisy.cols();
  const S scale = static_cast<S>(cfg.input_scale);
  if (tile <= 2 * margin)
    throw std::invalid_argument("despeckle_image: tile smaller than overlap");

  DespeckleOutput<S> out;
  out.posterior.resize(h, w);
  out.prior.resize(h, w);
  Eigen::Index clamped = 0;

  const Eigen::Index step = tile - 2 * margin;
  for (Eigen::Index i0 = 0; i0 < h; i0 += step) {
    const Eigen::Index i1 = std::min(i0 + step, h);
    const Eigen::Index win_i0 = std::max<Eigen::Index>(0, i0 - margin);
    const Eigen::Index win_i1 = std::min(h, i1 + margin);
    for (Eigen::Index j0 = 0; j0 < w; j0 += step) {
      const Eigen::Index j1 = std::min(j0 + step, w);
      const Eigen::Index win_j0 = std::max<Eigen::Index>(0, j0 - margin);
      const Eigen::Index win_j1 = std::min(w, j1 + margin);
      const Eigen::Index wh = win_i1 - win_i0, ww = win_j1 - win_j0;

      Tape<S> tape;
      Shape4 ts{1, 1, wh, ww};
      auto y = tape.leaf(ts, false);
      for (Eigen::Index i = 0; i < wh; ++i)
        for (Eigen::Index j = 0; j < ww; ++j)
          y.value()[ad::flat(ts, 0, 0, i, j)] =
              noisy(win_i0 + i, win_j0 + j) * scale;

      auto field = forward(tape, y, state, shape, Mode::kEval);
      for (Eigen::Index i = i0; i < i1; ++i)
        for (Eigen::Index j = j0; j < j1; ++j) {
          const Eigen::Index k = ad::flat(ts, 0, 0, i - win_i0, j - win_j0);
          const double a = field.alpha.value()[k];
          const double b = field.beta.value()[k];
          const double ys = y.value()[k];
          out.posterior(i, j) = static_cast<S>(
              bayes::posterior_mmse(ys, a, b, looks) / scale);
          if (a > 1.0 + 1e-3) {
            out.prior(i, j) = static_cast<S>(bayes::prior_mean(a, b) / scale);
          } else {
            out.prior(i, j) = static_cast<S>(b / 1e-3 / scale);
            ++clamped;
          }
        }
    }
  }
  out.prior_clamped_fraction = static_cast<double>(clamped) / (h * w);
  return out;
}

}  // namespace speckle::net

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracle.hpp"
#include "speckle/bayes.hpp"
#include "speckle/sim.hpp"
#include "speckle/train.hpp"

using namespace speckle;
using namespace speckle::train;
using D = double;
using BufD = ad::Buffer<D>;
using ad::Shape4;

namespace {

net::NetConfig tiny_net() {
  net::NetConfig cfg;
  cfg.blocks = 3;
  cfg.channels = 8;
  cfg.input_scale = 1.0 / 255.0;
  return cfg;
}

TrainingConfig tiny_train() {
  TrainingConfig cfg;
  cfg.batch_size = 4;
  cfg.patch_size = 24;
  cfg.loss_margin = 4;
  cfg.lr.initial = 1e-3;
  cfg.lr.decay_step = 100000;
  cfg.log_interval = 10;
  cfg.checkpoint_interval = 1000000;
  cfg.seed = 7;
  return cfg;
}

std::vector<ImageD> speckled_corpus(int n, std::uint64_t seed) {
  std::vector<ImageD> out;
  for (int i = 0; i < n; ++i) {
    ImageD clean = sim::synthesize_clean(seed + i, 48, 48);
    auto [noisy, c] =
        sim::make_synthetic_pair(clean, bayes::LooksParam(1), seed + 1000 + i);
    out.push_back(noisy);
  }
  return out;
}

double held_out_loss(net::NetworkState<D>& state, const TrainingConfig& cfg,
                     const std::vector<ImageD>& corpus, std::uint64_t seed) {
  Rng rng(seed);
  auto patches = extract_patches(corpus, cfg.patch_size, cfg.batch_size, rng);
  const Shape4 ys{cfg.batch_size, 1, cfg.patch_size, cfg.patch_size};
  BufD ybuf(ys.count());
  const double scale = state.config.input_scale;
  for (int b = 0; b < cfg.batch_size; ++b)
    for (Eigen::Index i = 0; i < cfg.patch_size; ++i)
      for (Eigen::Index j = 0; j < cfg.patch_size; ++j)
        ybuf[ad::flat(ys, b, 0, i, j)] = patches[b](i, j) * scale;
  ad::Tape<D> tape;
  auto y = tape.leaf_from(ybuf, ys, false);
  auto field = net::forward(tape, y, state, net::BlindSpotShape::square1(),
                            ad::Mode::kEval);
  auto l = loss(tape, field, ybuf, ys, bayes::LooksParam(cfg.looks),
                cfg.lambda_tv, cfg.loss_margin);
  return l.value()[0];
}

}  // namespace

TEST_CASE("tv_anisotropic known values and oracle") {
  ImageD flat = ImageD::Constant(5, 7, 3.0);
  CHECK(tv_anisotropic(flat) == 0.0);

  ImageD checker(2, 2);
  checker << 0, 1, 1, 0;
  CHECK(tv_anisotropic(checker) == doctest::Approx(4.0));

  Rng rng(1);
  ImageD img(8, 8);
  for (Eigen::Index i = 0; i < img.size(); ++i) img(i) = rng.uniform();
  // column-major accumulation as an independent summation order
  double want = 0.0;
  for (Eigen::Index j = 0; j < 8; ++j)
    for (Eigen::Index i = 0; i < 8; ++i) {
      if (i + 1 < 8) want += std::abs(img(i + 1, j) - img(i, j));
      if (j + 1 < 8) want += std::abs(img(i, j + 1) - img(i, j));
    }
  CHECK(tv_anisotropic(img) == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("sample_shape frequencies and determinism") {
  std::vector<ShapeChoice> fixed = {{net::BlindSpotShape::square1(), 1.0}};
  Rng rng(2);
  for (int i = 0; i < 50; ++i)
    CHECK(sample_shape(fixed, rng) == net::BlindSpotShape::square1());

  std::vector<ShapeChoice> sched = {{net::BlindSpotShape::vertical3(), 0.9},
                                    {net::BlindSpotShape::square1(), 0.1}};
  Rng rng2(3);
  int count3 = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i)
    if (sample_shape(sched, rng2) == net::BlindSpotShape::vertical3())
      ++count3;
  CHECK(std::abs(count3 / static_cast<double>(n) - 0.9) < 0.01);

  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i)
    CHECK(sample_shape(sched, a) == sample_shape(sched, b));
}

TEST_CASE("adam_step first-step properties and scalar descent") {
  BufD w = BufD::Constant(3, 1.0);
  std::vector<net::ParamRef<D>> params{{"w", &w, Shape4{1, 1, 1, 3}}};
  auto adam = AdamState<D>::zeros_like(params);

  std::vector<BufD> zero{BufD::Zero(3)};
  adam_step(params, zero, adam, 0.1);
  CHECK((w == 1.0).all());

  // bias correction makes the very first update magnitude ~ lr per weight
  BufD g(3);
  g << 0.3, -2.0, 1e-4;
  std::vector<BufD> grads{g};
  auto fresh = AdamState<D>::zeros_like(params);
  w.setConstant(1.0);
  adam_step(params, grads, fresh, 0.1);
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(std::abs(w[i] - 1.0) - 0.1) < 1e-4);

  // descend f(w) = w^2 from w = 1: |w| shrinks monotonically through the
  // early phase, then dithers in a small band around the optimum
  BufD w2 = BufD::Constant(1, 1.0);
  std::vector<net::ParamRef<D>> p2{{"w", &w2, Shape4{1, 1, 1, 1}}};
  auto adam2 = AdamState<D>::zeros_like(p2);
  std::vector<double> traj;
  for (int it = 0; it < 100; ++it) {
    std::vector<BufD> g2{BufD::Constant(1, 2.0 * w2[0])};
    adam_step(p2, g2, adam2, 0.1);
    traj.push_back(std::abs(w2[0]));
  }
  for (int it = 1; it < 10; ++it) CHECK(traj[it] < traj[it - 1]);
  for (int it = 50; it < 100; ++it) CHECK(traj[it] < 0.05);
  CHECK(traj.back() < 0.01);

  BufD bad(1);
  bad << std::numeric_limits<double>::quiet_NaN();
  std::vector<BufD> badg{bad};
  CHECK_THROWS_AS(adam_step(p2, badg, adam2, 0.1), std::runtime_error);
}

TEST_CASE("extract_patches fidelity and uniformity") {
  Rng rng(4);
  std::vector<ImageD> corpus;
  corpus.push_back(sim::synthesize_clean(1, 16, 16));  // exactly patch size
  auto one = extract_patches(corpus, 16, 3, rng);
  for (auto& p : one) CHECK((p == corpus[0]).all());

  corpus.push_back(sim::synthesize_clean(2, 40, 32));
  corpus.push_back(ImageD::Constant(8, 8, 1.0));  // undersized, skipped
  std::vector<PatchOrigin> origins;
  std::vector<std::size_t> skipped;
  auto patches = extract_patches(corpus, 16, 64, rng, &origins, &skipped);
  REQUIRE(skipped.size() == 1);
  CHECK(skipped[0] == 2);
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const auto& src = corpus[origins[k].image];
    CHECK((patches[k] ==
           src.block(origins[k].row, origins[k].col, 16, 16))
              .all());
  }

  // chi-squared uniformity of crop rows on a single 40-row image
  std::vector<ImageD> solo{corpus[1]};
  Rng rng2(5);
  const int draws = 100000;
  const int nbins = 25;  // rows 0..24
  std::vector<double> hist(nbins, 0.0);
  std::vector<PatchOrigin> org2;
  extract_patches(solo, 16, draws, rng2, &org2);
  for (auto& o : org2) hist[o.row] += 1.0;
  const double expect = draws / static_cast<double>(nbins);
  double chi2 = 0.0;
  for (double h : hist) chi2 += (h - expect) * (h - expect) / expect;
  // 24 dof: mean 24, sd ~ sqrt(48); 3 sigma
  CHECK(chi2 < 24.0 + 3.0 * std::sqrt(48.0));

  CHECK_THROWS_AS(extract_patches(std::vector<ImageD>{ImageD::Zero(4, 4)}, 16,
                                  1, rng),
                  std::invalid_argument);
}

TEST_CASE("loss reduces to the closed-form NLL sum") {
  net::NetConfig ncfg = tiny_net();
  net::NetworkState<D> state = net::NetworkState<D>::random_init(ncfg, 11);
  const int p = 20, margin = 4;
  Shape4 ys{2, 1, p, p};
  Rng rng(6);
  BufD ybuf(ys.count());
  for (Eigen::Index i = 0; i < ybuf.size(); ++i) ybuf[i] = rng.gamma(1.0);

  ad::Tape<D> tape;
  auto y = tape.leaf_from(ybuf, ys, false);
  auto field = net::forward(tape, y, state, net::BlindSpotShape::square1(),
                            ad::Mode::kEval);
  auto l0 = loss(tape, field, ybuf, ys, bayes::LooksParam(1), 0.0, margin);

  // the nll is evaluated on the margin-cropped interior only
  double want = 0.0;
  const Shape4 fs = field.alpha.shape();
  for (Eigen::Index b = 0; b < 2; ++b)
    for (Eigen::Index i = margin; i < p - margin; ++i)
      for (Eigen::Index j = margin; j < p - margin; ++j)
        want += bayes::neg_log_likelihood(
            ybuf[ad::flat(ys, b, 0, i, j)],
            field.alpha.value()[ad::flat(fs, b, 0, i, j)],
            field.beta.value()[ad::flat(fs, b, 0, i, j)],
            bayes::LooksParam(1));
  CHECK(oracle::rel_err(l0.value()[0], want) < 1e-12);

  // constant posterior: TV contributes nothing for any lambda
  ad::Tape<D> tape2;
  Shape4 fs2{1, 1, 8, 8};
  BufD av = BufD::Constant(fs2.count(), 3.0);
  BufD bv = BufD::Constant(fs2.count(), 2.0);
  BufD yv = BufD::Constant(fs2.count(), 5.0);
  net::PriorFieldT<D> fixed;
  fixed.alpha = tape2.leaf_from(av, fs2, false);
  fixed.beta = tape2.leaf_from(bv, fs2, false);
  auto la = loss(tape2, fixed, yv, fs2, bayes::LooksParam(1), 0.0, 1);
  auto lb = loss(tape2, fixed, yv, fs2, bayes::LooksParam(1), 123.0, 1);
  CHECK(la.value()[0] == doctest::Approx(lb.value()[0]).epsilon(1e-14));
}

TEST_CASE("full training loss gradients match finite differences") {
  net::NetConfig ncfg = tiny_net();
  ncfg.nonlocal = true;  // cover every layer type
  ncfg.nonlocal_every = 2;
  ncfg.nonlocal_q = 5;
  net::NetworkState<D> state = net::NetworkState<D>::random_init(ncfg, 13);
  auto params = state.parameters();

  const int p = 16, margin = 3;
  Shape4 ys{1, 1, p, p};
  Rng rng(14);
  BufD ybuf(ys.count());
  for (Eigen::Index i = 0; i < ybuf.size(); ++i)
    ybuf[i] = rng.gamma(1.0) * 0.8;

  auto eval = [&](bool with_grads, std::vector<BufD>* grads) {
    ad::Tape<D> tape;
    auto y = tape.leaf_from(ybuf, ys, false);
    net::Bindings<D> bound;
    auto field = net::forward(tape, y, state, net::BlindSpotShape::vertical3(),
                              ad::Mode::kEval, true, &bound);
    auto l = loss(tape, field, ybuf, ys, bayes::LooksParam(1), 3e-3, margin);
    if (with_grads) {
      tape.backward(l);
      for (const auto& pr : params) grads->push_back(bound.grad_of(pr.buf));
    }
    return l.value()[0];
  };

  std::vector<BufD> grads;
  eval(true, &grads);

  Rng probe_rng(15);
  for (int probe = 0; probe < 20; ++probe) {
    const std::size_t k = probe_rng.below(params.size());
    const Eigen::Index idx = probe_rng.below(params[k].buf->size());
    BufD& buf = *params[k].buf;
    const double x0 = buf[idx];
    const double h = 1e-5 * std::max(1.0, std::abs(x0));
    buf[idx] = x0 + h;
    const double fp = eval(false, nullptr);
    buf[idx] = x0 - h;
    const double fm = eval(false, nullptr);
    buf[idx] = x0;
    const double fd = (fp - fm) / (2.0 * h);
    const double an = grads[k][idx];
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
    CHECK(std::abs(fd - an) / denom < 1e-4);
  }
}

TEST_CASE("fit zero iterations, determinism, and abort paths") {
  net::NetConfig ncfg = tiny_net();
  TrainingConfig cfg = tiny_train();
  auto corpus = speckled_corpus(6, 100);

  SUBCASE("zero iterations returns initial weights") {
    cfg.total_iterations = 0;
    net::NetworkState<D> state = net::NetworkState<D>::random_init(ncfg, 1);
    net::NetworkState<D> copy = state;
    auto adam = AdamState<D>::zeros_like(state.parameters());
    auto report = fit(state, adam, corpus, cfg);
    CHECK_FALSE(report.aborted);
    auto a = state.parameters();
    auto b = copy.parameters();
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK((*a[i].buf == *b[i].buf).all());
  }

  SUBCASE("same seed gives identical loss curves") {
    cfg.total_iterations = 20;
    std::vector<double> curve1, curve2;
    for (auto* curve : {&curve1, &curve2}) {
      net::NetworkState<D> state = net::NetworkState<D>::random_init(ncfg, 1);
      auto adam = AdamState<D>::zeros_like(state.parameters());
      auto report = fit(state, adam, corpus, cfg);
      for (auto& rec : report.log) curve->push_back(rec.loss);
    }
    REQUIRE(curve1.size() == curve2.size());
    for (std::size_t i = 0; i < curve1.size(); ++i)
      CHECK(curve1[i] == curve2[i]);
  }

  SUBCASE("non-finite loss aborts with a diagnostic") {
    cfg.total_iterations = 3;
    net::NetworkState<D> state = net::NetworkState<D>::random_init(ncfg, 1);
    (*state.parameters()[0].buf)[0] = std::numeric_limits<D>::infinity();
    auto adam = AdamState<D>::zeros_like(state.parameters());
    auto report = fit(state, adam, corpus, cfg);
    CHECK(report.aborted);
    CHECK(report.abort_reason.find("non-finite") != std::string::npos);
  }

  SUBCASE("empty corpus is rejected") {
    net::NetworkState<D> state = net::NetworkState<D>::random_init(ncfg, 1);
    auto adam = AdamState<D>::zeros_like(state.parameters());
    CHECK_THROWS_AS(fit(state, adam, std::vector<ImageD>{}, cfg),
                    std::invalid_argument);
  }
}

TEST_CASE("short training run reduces held-out loss") {
  net::NetConfig ncfg = tiny_net();
  TrainingConfig cfg = tiny_train();
  cfg.total_iterations = 300;
  auto corpus = speckled_corpus(8, 500);
  auto held_out = speckled_corpus(2, 900);

  net::NetworkState<D> state = net::NetworkState<D>::random_init(ncfg, 2);
  const double before = held_out_loss(state, cfg, held_out, 31);
  auto adam = AdamState<D>::zeros_like(state.parameters());
  auto report = fit(state, adam, corpus, cfg);
  REQUIRE_FALSE(report.aborted);
  const double after = held_out_loss(state, cfg, held_out, 31);
  CHECK(after < before);
  CHECK(state.trained_iterations == 300);
}

TEST_CASE("training config validation") {
  net::NetConfig ncfg = tiny_net();
  TrainingConfig cfg = tiny_train();
  cfg.shape_schedule = {{net::BlindSpotShape::vertical3(), 0.5},
                        {net::BlindSpotShape::square1(), 0.4}};
  CHECK_THROWS_AS(cfg.validate(ncfg), std::invalid_argument);
  cfg = tiny_train();
  cfg.patch_size = 6;
  CHECK_THROWS_AS(cfg.validate(ncfg), std::invalid_argument);
}

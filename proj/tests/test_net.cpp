#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "oracle.hpp"
#include "speckle/checkpoint.hpp"
#include "speckle/net.hpp"

using namespace speckle;
using namespace speckle::net;
using D = double;
using BufD = ad::Buffer<D>;
using ad::flat;
using ad::Shape4;

namespace {

NetConfig small_config(bool nonlocal = false) {
  NetConfig cfg;
  cfg.blocks = 3;
  cfg.channels = 8;
  cfg.nonlocal = nonlocal;
  cfg.nonlocal_every = 2;
  cfg.nonlocal_q = 5;
  cfg.input_scale = 1.0;
  return cfg;
}

BufD image_to_buf(const ImageD& img) {
  BufD b(img.size());
  for (Eigen::Index i = 0; i < img.rows(); ++i)
    for (Eigen::Index j = 0; j < img.cols(); ++j)
      b[i * img.cols() + j] = img(i, j);
  return b;
}

struct FieldValues {
  BufD alpha, beta;
};

FieldValues run_forward(const ImageD& img, NetworkState<D>& state,
                        const BlindSpotShape& shape,
                        ad::Mode mode = ad::Mode::kEval) {
  ad::Tape<D> tape;
  Shape4 s{1, 1, img.rows(), img.cols()};
  auto y = tape.leaf_from(image_to_buf(img), s, false);
  auto field = forward(tape, y, state, shape, mode);
  return {field.alpha.value(), field.beta.value()};
}

ImageD random_image(Eigen::Index h, Eigen::Index w, std::uint64_t seed) {
  Rng rng(seed);
  ImageD img(h, w);
  for (Eigen::Index i = 0; i < img.size(); ++i) img(i) = rng.gamma(1.0);
  return img;
}

}  // namespace

TEST_CASE("rotate_quarter on plain images") {
  ImageD img(2, 2);
  img << 1, 2, 3, 4;  // [[a,b],[c,d]]
  CHECK((rotate_quarter(img, 0) == img).all());
  ImageD r1 = rotate_quarter(img, 1);
  ImageD want(2, 2);
  want << 2, 4, 1, 3;
  CHECK((r1 == want).all());
  ImageD rect = random_image(3, 5, 1);
  for (int k = 0; k < 4; ++k) {
    ImageD rt = rotate_quarter(rotate_quarter(rect, k), 4 - k);
    CHECK((rt == rect).all());
  }
}

TEST_CASE("blind spot shape validation") {
  CHECK_THROWS_AS((BlindSpotShape{0, 1, 1, 1}.validate()),
                  std::invalid_argument);
  CHECK_NOTHROW(BlindSpotShape::vertical3().validate());
  CHECK(BlindSpotShape::vertical3() == BlindSpotShape{2, 2, 1, 1});
}

TEST_CASE("blind-spot structural invariance, local and non-local") {
  const ImageD img = random_image(12, 12, 7);
  for (bool nonlocal : {false, true}) {
    NetworkState<D> state =
        NetworkState<D>::random_init(small_config(nonlocal), 42);
    for (const BlindSpotShape& shape :
         {BlindSpotShape::square1(), BlindSpotShape::vertical3()}) {
      FieldValues base = run_forward(img, state, shape);
      for (auto [ti, tj] : {std::pair<Eigen::Index, Eigen::Index>{5, 6},
                            {0, 0},
                            {11, 11},
                            {1, 10}}) {
        std::vector<std::pair<Eigen::Index, Eigen::Index>> blind;
        for (int d = 0; d < shape.up; ++d) blind.push_back({ti - d, tj});
        for (int d = 0; d < shape.down; ++d) blind.push_back({ti + d, tj});
        for (int d = 0; d < shape.left; ++d) blind.push_back({ti, tj - d});
        for (int d = 0; d < shape.right; ++d) blind.push_back({ti, tj + d});
        for (auto [bi, bj] : blind) {
          if (bi < 0 || bi >= 12 || bj < 0 || bj >= 12) continue;
          ImageD pert = img;
          pert(bi, bj) += 3.17;
          FieldValues probed = run_forward(pert, state, shape);
          const Eigen::Index k = ti * 12 + tj;
          CHECK(probed.alpha[k] == base.alpha[k]);
          CHECK(probed.beta[k] == base.beta[k]);
        }
      }
    }

    // sensitivity control: a pixel outside the blind spot must influence
    // the output, otherwise the invariance checks above are vacuous
    ImageD pert = img;
    pert(4, 6) += 3.17;  // one row above the 1x1 blind spot at (5,6)
    FieldValues base = run_forward(img, state, BlindSpotShape::square1());
    FieldValues probed = run_forward(pert, state, BlindSpotShape::square1());
    CHECK(probed.alpha[5 * 12 + 6] != base.alpha[5 * 12 + 6]);
  }
}

TEST_CASE("forward is deterministic and constant inputs give constant fields") {
  NetworkState<D> state = NetworkState<D>::random_init(small_config(), 3);
  const ImageD img = random_image(16, 16, 9);
  FieldValues a = run_forward(img, state, BlindSpotShape::square1());
  FieldValues b = run_forward(img, state, BlindSpotShape::square1());
  CHECK((a.alpha == b.alpha).all());
  CHECK((a.beta == b.beta).all());

  ImageD flat_img = ImageD::Constant(24, 24, 1.3);
  FieldValues f = run_forward(flat_img, state, BlindSpotShape::square1());
  const int m = receptive_margin(state.config, BlindSpotShape::square1());
  const Eigen::Index ref = static_cast<Eigen::Index>(m) * 24 + m;
  for (Eigen::Index i = m; i < 24 - m; ++i)
    for (Eigen::Index j = m; j < 24 - m; ++j) {
      CHECK(f.alpha[i * 24 + j] == doctest::Approx(f.alpha[ref]).epsilon(1e-12));
      CHECK(f.beta[i * 24 + j] == doctest::Approx(f.beta[ref]).epsilon(1e-12));
    }
}

TEST_CASE("interior translation invariance") {
  NetworkState<D> state = NetworkState<D>::random_init(small_config(), 5);
  const Eigen::Index n = 24, delta = 3;
  ImageD img = random_image(n, n, 11);
  ImageD shifted = ImageD::Zero(n, n);
  for (Eigen::Index i = delta; i < n; ++i)
    for (Eigen::Index j = delta; j < n; ++j)
      shifted(i, j) = img(i - delta, j - delta);

  FieldValues base = run_forward(img, state, BlindSpotShape::square1());
  FieldValues moved = run_forward(shifted, state, BlindSpotShape::square1());
  const int m = receptive_margin(state.config, BlindSpotShape::square1());
  for (Eigen::Index i = m; i < n - m - delta; ++i)
    for (Eigen::Index j = m; j < n - m - delta; ++j) {
      CHECK(moved.alpha[(i + delta) * n + (j + delta)] ==
            base.alpha[i * n + j]);
      CHECK(moved.beta[(i + delta) * n + (j + delta)] == base.beta[i * n + j]);
    }
}

TEST_CASE("180-degree equivariance with a pair-symmetric first merge stage") {
  NetworkState<D> state = NetworkState<D>::random_init(small_config(), 8);
  // tie the merge input groups: up/down and left/right columns equal, so
  // the 180-degree branch swap cannot be distinguished downstream
  const int c = state.config.channels;
  for (int f = 0; f < 2 * c; ++f)
    for (int g = 0; g < c; ++g) {
      state.merge.k1[f * 4 * c + c + g] = state.merge.k1[f * 4 * c + g];
      state.merge.k1[f * 4 * c + 3 * c + g] =
          state.merge.k1[f * 4 * c + 2 * c + g];
    }
  const ImageD img = random_image(14, 14, 13);
  for (const BlindSpotShape& shape :
       {BlindSpotShape::square1(), BlindSpotShape::vertical3()}) {
    FieldValues direct = run_forward(rotate_quarter(img, 2), state, shape);
    FieldValues base = run_forward(img, state, shape);
    // rotate base by 180
    double max_diff = 0.0;
    for (Eigen::Index i = 0; i < 14; ++i)
      for (Eigen::Index j = 0; j < 14; ++j) {
        const Eigen::Index k_rot = (13 - i) * 14 + (13 - j);
        max_diff = std::max(max_diff,
                            std::abs(direct.alpha[k_rot] - base.alpha[i * 14 + j]));
        max_diff = std::max(max_diff,
                            std::abs(direct.beta[k_rot] - base.beta[i * 14 + j]));
      }
    CHECK(max_diff < 1e-5);
  }
}

TEST_CASE("merge_heads locality and per-pixel dense oracle") {
  NetConfig cfg = small_config();
  const int c = cfg.channels;
  NetworkState<D> state = NetworkState<D>::random_init(cfg, 21);
  Rng rng(22);
  Shape4 cs{1, 4 * c, 6, 6};
  BufD cat_buf(cs.count());
  for (Eigen::Index i = 0; i < cat_buf.size(); ++i)
    cat_buf[i] = 2.0 * rng.uniform() - 1.0;

  ad::Tape<D> tape;
  auto cat = tape.leaf_from(cat_buf, cs, false);
  auto raw = merge_heads(tape, cat, state.merge, cfg);
  CHECK(raw.shape().c == 2);

  // per-pixel affine chain oracle
  using Mat = ad::MatRM<D>;
  Eigen::Map<const Mat> k1(state.merge.k1.data(), 2 * c, 4 * c);
  Eigen::Map<const Mat> k2(state.merge.k2.data(), c, 2 * c);
  Eigen::Map<const Mat> k3(state.merge.k3.data(), 2, c);
  auto lrelu = [&](Eigen::VectorXd v) {
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (v[i] < 0) v[i] *= cfg.lrelu_slope;
    return v;
  };
  for (Eigen::Index i = 0; i < 6; ++i)
    for (Eigen::Index j = 0; j < 6; ++j) {
      Eigen::VectorXd x(4 * c);
      for (int ch = 0; ch < 4 * c; ++ch)
        x[ch] = cat_buf[flat(cs, 0, ch, i, j)];
      Eigen::VectorXd h1 = lrelu(
          k1 * x + Eigen::Map<const Eigen::VectorXd>(state.merge.b1.data(),
                                                     2 * c));
      Eigen::VectorXd h2 = lrelu(
          k2 * h1 +
          Eigen::Map<const Eigen::VectorXd>(state.merge.b2.data(), c));
      Eigen::VectorXd h3 =
          k3 * h2 + Eigen::Map<const Eigen::VectorXd>(state.merge.b3.data(), 2);
      CHECK(std::abs(raw.value()[flat(raw.shape(), 0, 0, i, j)] - h3[0]) <
            1e-12);
      CHECK(std::abs(raw.value()[flat(raw.shape(), 0, 1, i, j)] - h3[1]) <
            1e-12);
    }

  // 1x1 locality: perturbing one pixel changes raw outputs only there
  BufD pert_buf = cat_buf;
  pert_buf[flat(cs, 0, 3, 2, 4)] += 0.9;
  auto cat2 = tape.leaf_from(pert_buf, cs, false);
  auto raw2 = merge_heads(tape, cat2, state.merge, cfg);
  for (Eigen::Index ch = 0; ch < 2; ++ch)
    for (Eigen::Index i = 0; i < 6; ++i)
      for (Eigen::Index j = 0; j < 6; ++j) {
        const Eigen::Index k = flat(raw.shape(), 0, ch, i, j);
        if (i == 2 && j == 4)
          CHECK(raw.value()[k] != raw2.value()[k]);
        else
          CHECK(raw.value()[k] == raw2.value()[k]);
      }

  // zero weights and offsets give zero raw maps
  MergeHead<D> zero;
  zero.k1 = BufD::Zero(2 * c * 4 * c);
  zero.b1 = BufD::Zero(2 * c);
  zero.k2 = BufD::Zero(c * 2 * c);
  zero.b2 = BufD::Zero(c);
  zero.k3 = BufD::Zero(2 * c);
  zero.b3 = BufD::Zero(2);
  auto raw0 = merge_heads(tape, cat, zero, cfg);
  CHECK((raw0.value() == 0.0).all());
}

TEST_CASE("single zero block outputs the norm offsets") {
  NetConfig cfg = small_config();
  cfg.blocks = 1;
  NetworkState<D> state = NetworkState<D>::random_init(cfg, 31);
  auto& blk = state.vertical.blocks[0];
  blk.kernel.setZero();
  blk.delta = BufD::Constant(cfg.channels, 0.37);

  ad::Tape<D> tape;
  Shape4 s{1, 1, 6, 6};
  auto y = tape.leaf_from(image_to_buf(random_image(6, 6, 1)), s, false);
  auto feat = branch_features(tape, y, state.vertical, cfg, ad::Mode::kEval);
  CHECK((feat.value() - 0.37).abs().maxCoeff() < 1e-9);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "speckle_test";
  fs::create_directories(dir);
  const std::string p1 = (dir / "ck1.bin").string();
  const std::string p2 = (dir / "ck2.bin").string();

  NetworkState<float> state =
      NetworkState<float>::random_init(small_config(true), 77);
  state.trained_iterations = 1234;
  AdamBlob<float> adam;
  adam.step = 1234;
  Rng rng(5);
  for (auto& p : state.parameters()) {
    ad::Buffer<float> m(p.shape.count()), v(p.shape.count());
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m[i] = static_cast<float>(rng.uniform());
      v[i] = static_cast<float>(rng.uniform());
    }
    adam.m.push_back(m);
    adam.v.push_back(v);
  }

  save_checkpoint(p1, state, &adam);
  AdamBlob<float> adam2;
  NetworkState<float> loaded = load_checkpoint<float>(p1, &adam2);
  CHECK(loaded.config == state.config);
  CHECK(loaded.trained_iterations == 1234);
  CHECK(adam2.step == 1234);
  auto orig = state.parameters();
  auto back = loaded.parameters();
  REQUIRE(orig.size() == back.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    CHECK(orig[i].name == back[i].name);
    CHECK((*orig[i].buf == *back[i].buf).all());
    CHECK((adam.m[i] == adam2.m[i]).all());
  }

  save_checkpoint(p2, loaded, &adam2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)),
                 std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)),
                 std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(!s1.empty());

  CHECK_THROWS(load_checkpoint<float>((dir / "missing.bin").string()));
}

TEST_CASE("tiled despeckling equals the single-pass result") {
  NetConfig cfg = small_config();
  cfg.input_scale = 1.0 / 255.0;
  NetworkState<D> state = NetworkState<D>::random_init(cfg, 51);
  ImageD noisy = 80.0 * random_image(40, 40, 3);

  const bayes::LooksParam looks(1.0);
  auto tiled = despeckle_image(noisy, state, looks, 24);
  auto whole = despeckle_image(noisy, state, looks, 4096);
  CHECK((tiled.posterior == whole.posterior).all());
  CHECK((tiled.prior == whole.prior).all());
  CHECK(tiled.posterior.minCoeff() >= 0.0);
}

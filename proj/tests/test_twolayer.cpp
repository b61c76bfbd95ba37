#include <doctest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"
#include "tokensel/twolayer.hpp"

using namespace tokensel;
using namespace testsupport;

TEST_CASE("reverse mode matches finite differences") {
  Rng rng(1);
  for (int k = 0; k < 15; ++k) {
    const std::size_t vocab = 2 + rng.below(7), dim = 2 + rng.below(7);
    auto st = TwoLayerState::from_base(random_state(rng, vocab, dim));
    for (Eigen::Index i = 0; i < st.ln_gain.size(); ++i) {
      st.ln_gain[i] += 0.2 * rng.normal();
      st.ln_bias[i] = 0.2 * rng.normal();
    }
    const auto data = random_dataset(rng, 1 + rng.below(4), 6, vocab);
    const auto g = two_layer_grads(st, data);
    CHECK(max_relative_error(g, two_layer_finite_diff(st, data, 1e-5)) <= 1e-5);
    CHECK(g.loss == doctest::Approx(two_layer_loss(st, data)).epsilon(1e-13));
  }
}

TEST_CASE("absent tokens get zero gradient") {
  Rng rng(2);
  const auto st = TwoLayerState::from_base(random_state(rng, 5, 4));
  LabeledDataset d;
  d.vocab.size = 5;
  d.examples = {{{0, 1, 1}, 1}, {{2, 0}, -1}};
  const auto g = two_layer_grads(st, d);
  CHECK(g.embeddings.row(3).isZero(0.0));
  CHECK(g.embeddings.row(4).isZero(0.0));
}

TEST_CASE("identical tokens make the output independent of the query") {
  Rng rng(3);
  auto st = TwoLayerState::from_base(random_state(rng, 3, 5));
  const std::vector<TokenId> seq{1, 1, 1, 1};
  const auto a = two_layer_forward(st, seq, 1);
  for (Eigen::Index i = 1; i < 4; ++i) CHECK(a.rows.row(i) == a.rows.row(0));
  st.base.cls = gaussian(rng, 5, 10.0);
  CHECK(two_layer_forward(st, seq, 1).head.output == doctest::Approx(a.head.output).epsilon(1e-14));
}

TEST_CASE("output shapes") {
  Rng rng(4);
  const auto st = TwoLayerState::from_base(random_state(rng, 4, 6));
  const std::vector<TokenId> seq{0, 3, 2};
  const auto f = two_layer_forward(st, seq, -1);
  CHECK(f.rows.rows() == 3);
  CHECK(f.rows.cols() == 6);
  CHECK(f.head.weights.size() == 3);
}

TEST_CASE("normalization of a zero-mean unit-variance row") {
  // One token with embedding (1, -1): the attention output is the row itself,
  // so LayerNorm sees (2, -2) and returns (1, -1) up to the eps correction.
  ModelState base{Matrix(1, 2), Vector::Zero(2), Vector::Unit(2, 0)};
  base.embeddings << 1, -1;
  const auto st = TwoLayerState::from_base(base, 1e-12);
  const std::vector<TokenId> seq{0};
  const auto f = two_layer_forward(st, seq, 1);
  CHECK(f.rows(0, 0) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(f.rows(0, 1) == doctest::Approx(-1.0).epsilon(1e-10));
}

TEST_CASE("rows are centred with the eps-corrected variance") {
  Rng rng(5);
  const auto st = TwoLayerState::from_base(random_state(rng, 6, 7));
  const auto data = random_dataset(rng, 5, 6, 6);
  for (const auto& ex : data.examples) {
    const auto f = two_layer_forward(st, ex.tokens, ex.label);
    for (Eigen::Index i = 0; i < f.rows.rows(); ++i) {
      const Vector r = f.rows.row(i).transpose();
      CHECK(std::abs(r.mean()) <= 1e-12);
      const double var = (r.array() - r.mean()).square().mean();
      CHECK(var <= 1.0);
      CHECK(var >= 0.99);
    }
  }
}

// Repeated tokens may land in different canonical slots, and the matrix product
// can round those slots differently, so rows match to rounding only.
TEST_CASE("position permutation leaves the output unchanged") {
  Rng rng(6);
  const auto st = TwoLayerState::from_base(random_state(rng, 8, 5));
  for (int k = 0; k < 20; ++k) {
    const auto data = random_dataset(rng, 1, 6, 8, true);
    auto seq = data.examples[0].tokens;
    const auto a = two_layer_forward(st, seq, 1);
    std::vector<std::size_t> perm(seq.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm.begin(), perm.end());
    std::vector<TokenId> shuffled(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) shuffled[i] = seq[perm[i]];
    const auto b = two_layer_forward(st, shuffled, 1);
    CHECK(a.head.output == b.head.output);
    for (std::size_t i = 0; i < seq.size(); ++i)
      CHECK((b.rows.row(static_cast<Eigen::Index>(i)) - a.rows.row(static_cast<Eigen::Index>(perm[i])))
                .cwiseAbs()
                .maxCoeff() <= 1e-14);
  }
}

TEST_CASE("gradient descent with frozen LayerNorm lowers the loss") {
  Rng rng(7);
  const auto st = TwoLayerState::from_base(random_state(rng, 6, 6));
  const auto data = random_dataset(rng, 8, 5, 6);
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::gradient_descent;
  cfg.lr = 0.05;
  cfg.weight_decay = 0.0;
  cfg.epochs = 30;
  cfg.batch_size = 8;
  cfg.train_readout = false;
  const auto res = train_two_layer(st, data, cfg, 0, false);
  CHECK(res.losses.back() < res.losses.front());
  CHECK(res.state.ln_gain == st.ln_gain);
  CHECK(res.state.ln_bias == st.ln_bias);
}

TEST_CASE("invalid LayerNorm parameters are rejected") {
  Rng rng(8);
  auto st = TwoLayerState::from_base(random_state(rng, 2, 3));
  st.ln_eps = 0.0;
  CHECK_THROWS_AS(st.validate(), InputError);
  st.ln_eps = 1e-5;
  st.ln_gain.resize(2);
  CHECK_THROWS_AS(st.validate(), InputError);
}

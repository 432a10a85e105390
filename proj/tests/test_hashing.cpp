#include "doctest.h"

#include <cstdint>
#include <vector>

#include "episeg/hashing.hpp"
#include "episeg/rng.hpp"
#include "episeg/tensor.hpp"
#include "testutil.hpp"

using episeg::HashingSpec;
using episeg::Rng;
using episeg::Tape;
using episeg::Tensor;

namespace {

// Plain dense matrix-vector product, the reference the sparse expansion is
// checked against.
std::vector<double> matvec(const Tensor& w, const std::vector<double>& x) {
  const std::int64_t rows = w.extent(0), cols = w.extent(1);
  std::vector<double> y(static_cast<std::size_t>(rows), 0.0);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j)
      y[static_cast<std::size_t>(i)] += w.data()[i * cols + j] * x[static_cast<std::size_t>(j)];
  return y;
}

HashingSpec hand_spec() {
  HashingSpec spec;
  spec.seed = 0;
  spec.m = 2;
  spec.d = 3;
  spec.kappa = {0, 1, 0};
  spec.zeta = {1.0, -1.0, -1.0};
  return spec;
}

}  // namespace

TEST_CASE("hashing: hand-checked expansion and matrix form") {
  const HashingSpec spec = hand_spec();
  Tape tape;
  Tensor x = Tensor::from_data({2}, {2, 5});
  Tensor theta = episeg::hash_forward(tape, x, spec);
  REQUIRE(theta.shape() == episeg::Shape{3});
  CHECK(theta.data()[0] == 2.0);
  CHECK(theta.data()[1] == -5.0);
  CHECK(theta.data()[2] == -2.0);

  Tensor w = episeg::as_matrix(spec);
  REQUIRE(w.shape() == (episeg::Shape{3, 2}));
  const std::vector<double> expected = {1, 0, 0, -1, -1, 0};
  for (std::int64_t i = 0; i < w.size(); ++i) CHECK(w.data()[i] == expected[static_cast<std::size_t>(i)]);
}

TEST_CASE("hashing: tables are a pure function of (seed, m, d)") {
  const HashingSpec a = episeg::build_hashing(42, 16, 33);
  const HashingSpec b = episeg::build_hashing(42, 16, 33);
  CHECK(a.kappa == b.kappa);
  CHECK(a.zeta == b.zeta);
  const HashingSpec c = episeg::build_hashing(43, 16, 33);
  CHECK(a.kappa != c.kappa);
}

TEST_CASE("hashing: every slot reads one input and the matrix has one nonzero per row") {
  const HashingSpec spec = episeg::build_hashing(7, 64, 65);
  REQUIRE(spec.kappa.size() == 65);
  for (std::int64_t k : spec.kappa) {
    CHECK(k >= 0);
    CHECK(k < 64);
  }
  for (double z : spec.zeta) CHECK((z == 1.0 || z == -1.0));

  Tensor w = episeg::as_matrix(spec);
  for (std::int64_t i = 0; i < spec.d; ++i) {
    int nonzeros = 0;
    for (std::int64_t j = 0; j < spec.m; ++j)
      if (w.data()[i * spec.m + j] != 0.0) ++nonzeros;
    CHECK(nonzeros == 1);
  }
}

TEST_CASE("hashing: signs stay roughly balanced") {
  const HashingSpec spec = episeg::build_hashing(11, 64, 4096);
  double mean = 0.0;
  for (double z : spec.zeta) mean += z;
  mean /= static_cast<double>(spec.zeta.size());
  CHECK(std::abs(mean) <= 1.0);   // hard bound the signs can never violate
  CHECK(std::abs(mean) < 0.05);   // statistical balance at this table size
}

TEST_CASE("hashing: expansion equals the dense matrix product exactly") {
  Rng rng(99);
  int cases = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& [m, d] : {std::pair<std::int64_t, std::int64_t>{64, 65},
                              {3, 8},
                              {16, 16},
                              {32, 7},
                              {8, 129}}) {
      const HashingSpec spec = episeg::build_hashing(seed, m, d);
      std::vector<double> xv(static_cast<std::size_t>(m));
      for (double& v : xv) v = rng.normal();
      Tape tape;
      Tensor theta = episeg::hash_forward(tape, Tensor::from_data({m}, xv), spec);
      const std::vector<double> ref = matvec(episeg::as_matrix(spec), xv);
      REQUIRE(theta.size() == static_cast<std::int64_t>(ref.size()));
      for (std::int64_t i = 0; i < theta.size(); ++i)
        CHECK(theta.data()[i] == ref[static_cast<std::size_t>(i)]);
      ++cases;
    }
  }
  CHECK(cases == 100);
}

TEST_CASE("hashing: gradients route through the index and sign tables") {
  SUBCASE("hand case") {
    const HashingSpec spec = hand_spec();
    Tape tape;
    Tensor x = Tensor::from_data({2}, {2, 5}, true);
    Tensor theta = episeg::hash_forward(tape, x, spec);
    Tensor loss = episeg::sum(tape, theta);
    tape.backward(loss);
    // slot 0 contributes +1 to x0, slot 2 contributes -1 to x0, slot 1 -1 to x1
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == -1.0);
  }
  SUBCASE("finite differences") {
    auto outcome = testutil::gradcheck_redraw(
        [](Rng& rng) {
          const HashingSpec spec = episeg::build_hashing(rng.next_u64(), 6, 13);
          Tensor x = Tensor::randn({6}, 1.0, rng, true);
          testutil::GradCase c;
          c.leaves = {x};
          c.build = [x, spec](Tape& tape) {
            Tensor theta = episeg::hash_forward(tape, x, spec);
            return episeg::sum(tape, episeg::mul(tape, theta, theta));
          };
          return c;
        },
        3001);
    CHECK(outcome.max_rel_err < 1e-6);
  }
}

TEST_CASE("hashing: malformed specs and inputs are rejected") {
  CHECK_THROWS_AS(episeg::build_hashing(1, 0, 5), std::invalid_argument);
  CHECK_THROWS_AS(episeg::build_hashing(1, 5, 0), std::invalid_argument);

  HashingSpec bad = hand_spec();
  bad.kappa[1] = 9;  // out of range
  Tape tape;
  Tensor x = Tensor::from_data({2}, {1, 2});
  CHECK_THROWS_AS(episeg::hash_forward(tape, x, bad), std::invalid_argument);

  HashingSpec bad_sign = hand_spec();
  bad_sign.zeta[0] = 0.5;
  CHECK_THROWS_AS(episeg::as_matrix(bad_sign), std::invalid_argument);

  CHECK_THROWS_AS(episeg::hash_forward(tape, Tensor::zeros({3}), hand_spec()),
                  std::invalid_argument);
}

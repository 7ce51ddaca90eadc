// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "lorasafe/error.hpp"
#include "lorasafe/linalg.hpp"
#include "lorasafe/subspace.hpp"
#include "support/test_support.hpp"

using namespace lorasafe;
using namespace lorasafe::testing;

TEST_SUITE("subspace") {
  TEST_CASE("identical weights give a zero subspace") {
    std::mt19937_64 rng(31);
    const Matrix w = random_matrix(6, 4, rng);
    const SubspaceOperator op = alignment_matrix("k", w, w);
    CHECK(op.v_norm() == 0.0);
    CHECK(op.v() == Matrix(6, 4));
  }

  TEST_CASE("aligned = I2, unaligned = 0 gives V = I2 and norm sqrt 2") {
    const SubspaceOperator op = alignment_matrix("k", Matrix::identity(2), Matrix(2, 2));
    CHECK(op.v() == Matrix::identity(2));
    CHECK(op.v_norm() == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
  }

  TEST_CASE("v_norm matches an elementwise loop") {
    std::mt19937_64 rng(32);
    const Matrix a = random_matrix(16, 8, rng);
    const Matrix u = random_matrix(16, 8, rng);
    const SubspaceOperator op = alignment_matrix("k", a, u);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = double(float(a.values()[i] - u.values()[i]));
      acc += d * d;
    }
    CHECK(std::abs(op.v_norm() - std::sqrt(acc)) <= 1e-9 * std::sqrt(acc));
  }

  TEST_CASE("shape mismatch is a pairing error") {
    CHECK_THROWS_AS(alignment_matrix("k", Matrix(3, 2), Matrix(2, 3)), PairingError);
  }

  TEST_CASE("V = I gives C = I / sqrt(d)") {
    std::mt19937_64 rng(33);
    const std::size_t d = 9;
    const SubspaceOperator op("k", Matrix::identity(d));
    const LoraLayer l = random_layer("k", d, d, 2, 2.0, rng);
    const Eigen::MatrixXd got = to_eigen(densify(apply_C(op, l.factors())));
    CHECK(rel_diff(got, dense_delta(l) / std::sqrt(double(d))) <= 1e-6);
  }

  TEST_CASE("B in the null space of V^T projects to zero") {
    Matrix v(4, 3);
    v(0, 0) = 1.0f;
    v(0, 2) = 2.0f;
    const SubspaceOperator op("k", v);
    LowRankFactors f{Matrix{{0, 0}, {1, 2}, {3, 4}, {5, 6}}, Matrix{{1, 0, 1}, {0, 1, 1}}, 1.0};
    CHECK(frobenius_norm(densify(op.apply(f))) == 0.0);
  }

  TEST_CASE("factored C * delta matches the dense oracle") {
    std::mt19937_64 rng(34);
    const Matrix v = random_matrix(24, 12, rng);
    const SubspaceOperator op("k", v);
    const LoraLayer l = random_layer("k", 24, 12, 3, 6.0, rng);
    const Eigen::MatrixXd ev = to_eigen(v);
    const Eigen::MatrixXd want = ev * ev.transpose() / ev.norm() * dense_delta(l);
    CHECK(rel_diff(to_eigen(densify(op.apply(l.factors()))), want) <= 1e-5);
  }

  TEST_CASE("apply is linear") {
    std::mt19937_64 rng(35);
    const SubspaceOperator op("k", random_matrix(10, 7, rng));
    const Matrix x = random_matrix(10, 3, rng);
    const Matrix y = random_matrix(10, 3, rng);
    Matrix combo(10, 3);
    for (std::size_t i = 0; i < combo.size(); ++i) combo.values()[i] = 2.0f * x.values()[i] - 0.5f * y.values()[i];
    const Eigen::MatrixXd lhs = to_eigen(op.apply_to_columns(combo));
    const Eigen::MatrixXd rhs = 2.0 * to_eigen(op.apply_to_columns(x)) - 0.5 * to_eigen(op.apply_to_columns(y));
    CHECK(rel_diff(lhs, rhs) <= 1e-5);
  }

  TEST_CASE("zero subspace cannot be applied") {
    const SubspaceOperator op("k", Matrix(3, 3));
    LowRankFactors f{Matrix{{1}, {0}, {0}}, Matrix{{1, 0, 0}}, 1.0};
    CHECK_THROWS_AS(op.apply(f), DegenerateSubspaceError);
  }

  TEST_CASE("V = I scores 1 for any nonzero delta") {
    std::mt19937_64 rng(36);
    for (std::size_t d : {2, 5, 16}) {
      const SubspaceOperator op("k", Matrix::identity(d));
      const LoraLayer l = random_layer("k", d, d, 1, 1.0, rng);
      const LayerScore s = op.cosine_score(l.factors());
      CHECK(std::abs(s.rho - 1.0) <= 1e-6);
      CHECK_FALSE(s.degenerate.has_value());
    }
  }

  TEST_CASE("delta on rows V does not touch scores exactly 0") {
    Matrix v(3, 3);
    v(0, 0) = 1.0f;
    v(0, 1) = -2.0f;
    const SubspaceOperator op("k", v);
    LowRankFactors f{Matrix{{0}, {1}, {4}}, Matrix{{1, 2, 3}}, 1.0};
    const LayerScore s = op.cosine_score(f);
    CHECK(s.rho == 0.0);
    CHECK(s.degenerate == DegenerateReason::kOrthogonalDelta);
  }

  TEST_CASE("conventions for zero delta and zero subspace") {
    const SubspaceOperator zero_v("k", Matrix(3, 3));
    const SubspaceOperator some_v("k", Matrix::identity(3));
    LowRankFactors zero_delta{Matrix(3, 1), Matrix{{1, 2, 3}}, 1.0};
    LowRankFactors delta{Matrix{{1}, {2}, {3}}, Matrix{{1, 2, 3}}, 1.0};
    CHECK(some_v.cosine_score(zero_delta).rho == 1.0);
    CHECK(some_v.cosine_score(zero_delta).degenerate == DegenerateReason::kZeroDelta);
    CHECK(zero_v.cosine_score(delta).rho == 0.0);
    CHECK(zero_v.cosine_score(delta).degenerate == DegenerateReason::kZeroSubspace);
    // zero delta wins over zero subspace
    CHECK(zero_v.cosine_score(zero_delta).degenerate == DegenerateReason::kZeroDelta);
  }

  TEST_CASE("factored rho matches dense C on 200 random pairs") {
    std::mt19937_64 rng(37);
    const std::size_t ranks[] = {1, 2, 4};
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      const Matrix v = random_matrix(24, 12, rng);
      const LoraLayer l = random_layer("k", 24, 12, ranks[trial % 3], 2.0, rng);
      const double got = SubspaceOperator("k", v).cosine_score(l.factors()).rho;
      worst = std::max(worst, std::abs(got - dense_rho(to_eigen(v), dense_delta(l))));
    }
    CHECK(worst <= 1e-6);
  }

  TEST_CASE("shape mismatch between delta and V is a dimension error") {
    const SubspaceOperator op("k", Matrix::identity(3));
    LowRankFactors f{Matrix(4, 1), Matrix(1, 3), 1.0};
    CHECK_THROWS_AS(op.cosine_score(f), DimensionError);
  }

  TEST_CASE("non-finite factors are numeric errors naming the layer") {
    const SubspaceOperator op("layer.7", Matrix::identity(2));
    LowRankFactors f{Matrix{{INFINITY}, {1}}, Matrix{{1, 1}}, 1.0};
    try {
      (void)op.cosine_score(f);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("layer.7") != std::string::npos);
    }
  }

  TEST_CASE("degenerate reasons round-trip through their names") {
    for (auto r : {DegenerateReason::kZeroDelta, DegenerateReason::kOrthogonalDelta, DegenerateReason::kZeroSubspace}) {
      CHECK(parse_degenerate_reason(to_string(r)) == r);
    }
  }
}

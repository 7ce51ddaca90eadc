// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "lorasafe/error.hpp"
#include "lorasafe/linalg.hpp"
#include "support/test_support.hpp"

using namespace lorasafe;
using namespace lorasafe::testing;

TEST_SUITE("tensor_core") {
  TEST_CASE("identity times Y returns Y") {
    std::mt19937_64 rng(1);
    const Matrix y = random_matrix(3, 5, rng);
    CHECK(matmul(Matrix::identity(3), y) == y);
  }

  TEST_CASE("hand-checked 2x2 times 2x1") {
    const Matrix x{{1, 2}, {3, 4}};
    const Matrix y{{5}, {6}};
    CHECK(matmul(x, y) == Matrix{{17}, {39}});
  }

  TEST_CASE("matmul matches a triple-loop oracle") {
    std::mt19937_64 rng(2);
    const Matrix x = random_matrix(32, 16, rng);
    const Matrix y = random_matrix(16, 8, rng);
    const MatrixD got = multiply(x, y);
    double worst = 0.0;
    for (std::size_t i = 0; i < 32; ++i) {
      for (std::size_t j = 0; j < 8; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < 16; ++k) acc += double(x(i, k)) * double(y(k, j));
        worst = std::max(worst, std::abs(got(i, j) - acc) / std::max(std::abs(acc), 1e-12));
      }
    }
    CHECK(worst <= 1e-6);
  }

  TEST_CASE("transposed products match Eigen") {
    std::mt19937_64 rng(3);
    const Matrix x = random_matrix(20, 6, rng);
    const Matrix y = random_matrix(20, 4, rng);
    const Matrix z = random_matrix(9, 6, rng);
    CHECK(rel_diff(to_eigen(multiply_tn(x, y)), to_eigen(x).transpose() * to_eigen(y)) < 1e-12);
    CHECK(rel_diff(to_eigen(multiply_nt(x, z)), to_eigen(x) * to_eigen(z).transpose()) < 1e-12);
  }

  TEST_CASE("matmul rejects mismatched inner dimensions naming both shapes") {
    const Matrix x(2, 3);
    const Matrix y(4, 2);
    try {
      (void)matmul(x, y);
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string what = e.what();
      CHECK(what.find("(2, 3)") != std::string::npos);
      CHECK(what.find("(4, 2)") != std::string::npos);
    }
  }

  TEST_CASE("frobenius inner and norm") {
    const Matrix x{{3, 4}};
    CHECK(frobenius_inner(x, x) == 25.0);
    CHECK(frobenius_norm(x) == 5.0);
    CHECK(frobenius_inner(x, Matrix(1, 2)) == 0.0);
    CHECK_THROWS_AS(frobenius_inner(x, Matrix(2, 1)), DimensionError);
  }

  TEST_CASE("frobenius inner matches an elementwise loop") {
    std::mt19937_64 rng(4);
    const Matrix x = random_matrix(17, 11, rng);
    const Matrix y = random_matrix(17, 11, rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += double(x.values()[i]) * double(y.values()[i]);
    CHECK(std::abs(frobenius_inner(x, y) - acc) <= 1e-9 * std::abs(acc));
  }

  TEST_CASE("densify hand cases") {
    LowRankFactors zero{Matrix{{1}, {2}}, Matrix{{3, 4}}, 0.0};
    CHECK(densify(zero) == Matrix(2, 2));
    LowRankFactors f{Matrix{{1}, {0}}, Matrix{{2, 3}}, 2.0};
    CHECK(densify(f) == Matrix{{4, 6}, {0, 0}});
  }

  TEST_CASE("densify and factored norm match a dense oracle") {
    std::mt19937_64 rng(5);
    const LoraLayer l = random_layer("k", 24, 18, 4, 8.0, rng);
    const Eigen::MatrixXd want = dense_delta(l);
    CHECK(rel_diff(to_eigen(densify(l.factors())), want) <= 1e-6);
    CHECK(std::abs(frobenius_norm(l.factors()) - want.norm()) <= 1e-9 * want.norm());
  }

  TEST_CASE("thin QR reconstructs with orthonormal Q") {
    std::mt19937_64 rng(6);
    const Matrix a = random_matrix(30, 7, rng);
    const ThinQr qr = thin_qr(matrix_cast<double>(a));
    const Eigen::MatrixXd q = to_eigen(qr.q);
    CHECK(rel_diff(q * to_eigen(qr.r), to_eigen(a)) < 1e-12);
    CHECK((q.transpose() * q - Eigen::MatrixXd::Identity(7, 7)).norm() < 1e-12);
  }

  TEST_CASE("Jacobi SVD singular values match Eigen") {
    std::mt19937_64 rng(7);
    for (auto [m, n] : {std::pair{9, 5}, std::pair{5, 9}, std::pair{6, 6}}) {
      const Matrix a = random_matrix(m, n, rng);
      const SvdResult svd = jacobi_svd(matrix_cast<double>(a));
      const Eigen::JacobiSVD<Eigen::MatrixXd> oracle(to_eigen(a));
      const auto& sv = oracle.singularValues();
      REQUIRE(svd.singular.size() == static_cast<std::size_t>(sv.size()));
      for (Eigen::Index i = 0; i < sv.size(); ++i) CHECK(std::abs(svd.singular[i] - sv(i)) < 1e-10);
      Eigen::MatrixXd s = Eigen::MatrixXd::Zero(sv.size(), sv.size());
      for (Eigen::Index i = 0; i < sv.size(); ++i) s(i, i) = svd.singular[i];
      CHECK(rel_diff(to_eigen(svd.u) * s * to_eigen(svd.v).transpose(), to_eigen(a)) < 1e-10);
    }
  }

  TEST_CASE("truncation to the full rank is exact") {
    std::mt19937_64 rng(8);
    const LoraLayer l = random_layer("k", 20, 16, 4, 4.0, rng);
    const TruncatedSvd t = truncated_svd_of_factors(l.factors(), 4);
    CHECK(t.reconstruction_error <= 1e-6);
    CHECK(rel_diff(to_eigen(densify(t.factors)), dense_delta(l)) <= 1e-6);
    const TruncatedSvd above = truncated_svd_of_factors(l.factors(), 6);
    CHECK(above.reconstruction_error == 0.0);
    CHECK(above.factors.B == l.B);
  }

  TEST_CASE("rank-one matrix from rank-two factors truncates without error") {
    LowRankFactors f{Matrix{{1, 0}, {2, 0}, {3, 0}}, Matrix{{1, 1}, {0, 0}}, 1.0};
    const TruncatedSvd t = truncated_svd_of_factors(f, 1);
    CHECK(t.reconstruction_error <= 1e-12);
    CHECK(rel_diff(to_eigen(densify(t.factors)), to_eigen(densify(f))) <= 1e-6);
  }

  TEST_CASE("truncation error equals the tail energy of a dense SVD") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 10; ++trial) {
      const LoraLayer l = random_layer("k", 40, 32, 8, 16.0, rng);
      const Eigen::MatrixXd dense = dense_delta(l);
      const Eigen::JacobiSVD<Eigen::MatrixXd> oracle(dense);
      double tail = 0.0;
      for (Eigen::Index i = 4; i < oracle.singularValues().size(); ++i) {
        tail += oracle.singularValues()(i) * oracle.singularValues()(i);
      }
      const TruncatedSvd t = truncated_svd_of_factors(l.factors(), 4);
      CHECK(std::abs(t.reconstruction_error - std::sqrt(tail)) <= 1e-5 * std::max(1.0, dense.norm()));
      CHECK(std::abs((to_eigen(densify(t.factors)) - dense).norm() - std::sqrt(tail)) <=
            1e-4 * std::max(1.0, dense.norm()));
    }
  }

  TEST_CASE("non-finite input is a numeric error") {
    LowRankFactors f{Matrix{{NAN}, {1}}, Matrix{{1, 1}}, 1.0};
    CHECK_THROWS_AS(truncated_svd_of_factors(f, 1), NumericError);
    CHECK_THROWS_AS(require_finite(Matrix{{INFINITY}}, "x"), NumericError);
  }

  TEST_CASE("matrix construction validates the data length") {
    CHECK_THROWS_AS(Matrix(2, 2, std::vector<float>(3)), DimensionError);
  }
}

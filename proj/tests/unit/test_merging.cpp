// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "lorasafe/error.hpp"
#include "lorasafe/linalg.hpp"
#include "lorasafe/merging.hpp"
#include "lorasafe/subspace.hpp"
#include "support/test_support.hpp"

using namespace lorasafe;
using namespace lorasafe::testing;

namespace {

LoraLayer fixed_layer(const std::string& key, const Matrix& delta) {
  return layer_from_dense(key, delta, RankMode::dense()).layer;
}

}  // namespace

TEST_SUITE("merging") {
  TEST_CASE("weights (1, 0) and (0, 1) select one side") {
    std::mt19937_64 rng(41);
    const LoraLayer f = random_layer("k", 12, 10, 4, 8.0, rng);
    const LoraLayer s = random_layer("k", 12, 10, 2, 4.0, rng);
    CHECK(rel_diff(to_eigen(densify(merge_linear(f, s, 1, 0, RankMode::concat()).layer.factors())),
                   dense_delta(f)) <= 1e-6);
    CHECK(rel_diff(to_eigen(densify(merge_linear(f, s, 0, 1, RankMode::concat()).layer.factors())),
                   dense_delta(s)) <= 1e-6);
  }

  TEST_CASE("concat merge matches the dense sum for every rank pair") {
    std::mt19937_64 rng(42);
    for (std::size_t rf : {1, 2, 4, 8}) {
      for (std::size_t rs : {1, 2, 4, 8}) {
        const LoraLayer f = random_layer("k", 16, 12, rf, 16.0, rng);
        const LoraLayer s = random_layer("k", 16, 12, rs, 8.0, rng);
        const MergeOutcome m = merge_linear(f, s, 0.8, 0.2, RankMode::concat());
        CHECK(m.layer.rank() == rf + rs);
        CHECK(m.reconstruction_error == 0.0);
        CHECK(rel_diff(to_eigen(densify(m.layer.factors())), 0.8 * dense_delta(f) + 0.2 * dense_delta(s)) <=
              1e-5);
      }
    }
  }

  TEST_CASE("restore mode reports the dense SVD tail energy") {
    std::mt19937_64 rng(43);
    const LoraLayer f = random_layer("k", 20, 14, 4, 8.0, rng);
    const LoraLayer s = random_layer("k", 20, 14, 4, 8.0, rng);
    const MergeOutcome m = merge_linear(f, s, 0.8, 0.2, RankMode::restore(4));
    const Eigen::MatrixXd sum = 0.8 * dense_delta(f) + 0.2 * dense_delta(s);
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(sum);
    double tail = 0.0;
    for (Eigen::Index i = 4; i < svd.singularValues().size(); ++i) tail += std::pow(svd.singularValues()(i), 2);
    CHECK(m.layer.rank() == 4);
    CHECK(std::abs(m.reconstruction_error - std::sqrt(tail)) <= 1e-5 * std::max(1.0, sum.norm()));
  }

  TEST_CASE("dense mode is exact and full rank") {
    std::mt19937_64 rng(44);
    const LoraLayer f = random_layer("k", 9, 6, 2, 2.0, rng);
    const LoraLayer s = random_layer("k", 9, 6, 3, 2.0, rng);
    const MergeOutcome m = merge_linear(f, s, 0.5, 0.5, RankMode::dense());
    CHECK(m.layer.rank() == 6);
    CHECK(rel_diff(to_eigen(densify(m.layer.factors())), 0.5 * dense_delta(f) + 0.5 * dense_delta(s)) <= 1e-6);
  }

  TEST_CASE("shape mismatch and negative weights are rejected") {
    std::mt19937_64 rng(45);
    const LoraLayer f = random_layer("k", 8, 6, 2, 2.0, rng);
    const LoraLayer g = random_layer("k", 8, 7, 2, 2.0, rng);
    CHECK_THROWS_AS(merge_linear(f, g, 0.5, 0.5, RankMode::concat()), PairingError);
    CHECK_THROWS_AS(merge_linear(f, f, -0.1, 0.5, RankMode::concat()), PolicyError);
  }

  TEST_CASE("policy validation") {
    MergePolicy p;
    p.strategy = Strategy::kDareLinear;
    p.rank_mode = RankMode::concat();
    CHECK_THROWS_AS(p.validate(), ModeError);
    p.rank_mode = RankMode::dense();
    p.density = 0.0;
    CHECK_THROWS_AS(p.validate(), PolicyError);
    p.density = 0.5;
    p.tau = 1.5;
    CHECK_THROWS_AS(p.validate(), PolicyError);
    p.tau = 0.5;
    CHECK_NOTHROW(p.validate());
    CHECK(default_rank_mode(Strategy::kLinear) == RankMode::concat());
    CHECK(default_rank_mode(Strategy::kTies) == RankMode::dense());
  }

  TEST_CASE("DARE at density 1 equals the linear merge") {
    std::mt19937_64 rng(46);
    const LoraLayer f = random_layer("k", 10, 8, 2, 4.0, rng);
    const LoraLayer s = random_layer("k", 10, 8, 2, 4.0, rng);
    const auto dare = merge_dare_linear(f, s, 0.8, 0.2, 1.0, 7, RankMode::dense());
    const Eigen::MatrixXd want = 0.8 * dense_delta(f) + 0.2 * dense_delta(s);
    CHECK(rel_diff(to_eigen(densify(dare.layer.factors())), want) <= 1e-6);
  }

  TEST_CASE("DARE masks are deterministic and keyed") {
    std::mt19937_64 rng(47);
    const Matrix d = random_matrix(8, 8, rng);
    CHECK(dare_drop_rescale(d, 0.5, 3, "k", "fine_tuned") == dare_drop_rescale(d, 0.5, 3, "k", "fine_tuned"));
    CHECK(dare_drop_rescale(d, 0.5, 3, "k", "fine_tuned") != dare_drop_rescale(d, 0.5, 4, "k", "fine_tuned"));
    CHECK(dare_drop_rescale(d, 0.5, 3, "k", "fine_tuned") != dare_drop_rescale(d, 0.5, 3, "k", "safe"));
    const Matrix m = dare_drop_rescale(d, 0.25, 3, "k", "x");
    for (std::size_t i = 0; i < m.size(); ++i) {
      CHECK((m.values()[i] == 0.0f || m.values()[i] == 4.0f * d.values()[i]));
    }
    CHECK_THROWS_AS(dare_drop_rescale(d, 0.0, 3, "k", "x"), PolicyError);
  }

  TEST_CASE("DARE is unbiased over many seeds") {
    std::mt19937_64 rng(48);
    const Matrix d = random_matrix(4, 4, rng);
    const double p = 0.5;
    const int draws = 20000;
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(4, 4);
    for (int s = 0; s < draws; ++s) mean += to_eigen(dare_drop_rescale(d, p, s, "layer", "fine_tuned"));
    mean /= draws;
    const Eigen::MatrixXd want = to_eigen(d);
    for (Eigen::Index i = 0; i < 16; ++i) {
      const double se = std::abs(want(i)) * std::sqrt((1.0 - p) / p) / std::sqrt(double(draws));
      CHECK(std::abs(mean(i) - want(i)) <= 3.0 * se);
    }
  }

  TEST_CASE("TIES agreement case returns the common value") {
    std::mt19937_64 rng(49);
    const Matrix t = random_matrix(3, 3, rng);
    CHECK(ties_combine(t, t, 1.0) == t);
  }

  TEST_CASE("TIES 1x1 sign conflict keeps the elected side") {
    CHECK(ties_combine(Matrix{{2}}, Matrix{{-1}}, 1.0) == Matrix{{2}});
  }

  TEST_CASE("TIES 2x2 hand case") {
    const Matrix tf{{3, -1}, {0, 2}};
    const Matrix ts{{-3.5f, 1}, {1, 2}};
    CHECK(ties_trim(tf, 0.5) == Matrix{{3, 0}, {0, 2}});
    CHECK(ties_trim(ts, 0.5) == Matrix{{-3.5f, 0}, {0, 2}});
    const Matrix got = ties_combine(tf, ts, 0.5);
    CHECK(got == Matrix{{-3.5f, 0}, {0, 2}});
    CHECK((to_eigen(got) - ties_oracle(to_eigen(tf), to_eigen(ts), 0.5)).norm() == 0.0);
  }

  TEST_CASE("TIES matches the scripted oracle on random inputs") {
    std::mt19937_64 rng(50);
    for (double density : {0.25, 0.5, 1.0}) {
      for (int trial = 0; trial < 30; ++trial) {
        const Matrix tf = random_matrix(4, 4, rng);
        const Matrix ts = random_matrix(4, 4, rng);
        const Eigen::MatrixXd want = ties_oracle(to_eigen(tf), to_eigen(ts), density);
        CHECK((to_eigen(ties_combine(tf, ts, density)) - want).cwiseAbs().maxCoeff() <= 1e-6);
      }
    }
  }

  TEST_CASE("merge_ties operates on weighted deltas") {
    std::mt19937_64 rng(51);
    const LoraLayer f = random_layer("k", 6, 5, 2, 2.0, rng);
    const LoraLayer s = random_layer("k", 6, 5, 2, 2.0, rng);
    const auto m = merge_ties(f, s, 0.8, 0.2, 0.5, RankMode::dense());
    const Eigen::MatrixXd want = ties_oracle(0.8 * dense_delta(f), 0.2 * dense_delta(s), 0.5);
    CHECK((to_eigen(densify(m.layer.factors())) - want).cwiseAbs().maxCoeff() <= 1e-5);
  }

  TEST_CASE("SafeLoRA projection with V = I scales by 1/sqrt(d)") {
    std::mt19937_64 rng(52);
    const LoraLayer f = random_layer("k", 8, 8, 2, 4.0, rng);
    const LoraLayer p = safelora_project(f, SubspaceOperator("k", Matrix::identity(8)));
    CHECK(p.A == f.A);
    CHECK(rel_diff(to_eigen(densify(p.factors())), dense_delta(f) / std::sqrt(8.0)) <= 1e-6);
  }

  TEST_CASE("SafeLoRA projection of a null-space delta is zero") {
    Matrix v(4, 4);
    v(0, 0) = 1.0f;
    LoraLayer f;
    f.key = "k";
    f.B = Matrix{{0}, {1}, {2}, {3}};
    f.A = Matrix{{1, 1, 1, 1}};
    f.lora_alpha = 1.0;
    CHECK(frobenius_norm(densify(safelora_project(f, SubspaceOperator("k", v)).factors())) == 0.0);
  }

  TEST_CASE("SafeLoRA projection matches the dense C oracle") {
    std::mt19937_64 rng(53);
    const Matrix v = random_matrix(16, 10, rng);
    const LoraLayer f = random_layer("k", 16, 10, 4, 8.0, rng);
    const Eigen::MatrixXd ev = to_eigen(v);
    const Eigen::MatrixXd want = ev * ev.transpose() / ev.norm() * dense_delta(f);
    CHECK(rel_diff(to_eigen(densify(safelora_project(f, SubspaceOperator("k", v)).factors())), want) <= 1e-5);
    CHECK_THROWS_AS(safelora_project(f, SubspaceOperator("k", Matrix(16, 10))), DegenerateSubspaceError);
  }

  TEST_CASE("RESTA cancels a harmful delta equal to the fine-tuned one") {
    std::mt19937_64 rng(54);
    const LoraLayer f = random_layer("k", 12, 9, 4, 8.0, rng);
    const auto m = resta_merge(f, f, 1.0, std::nullopt, RankMode::concat());
    CHECK(frobenius_norm(densify(m.layer.factors())) < 1e-6);
  }

  TEST_CASE("negation is involutive") {
    std::mt19937_64 rng(55);
    const LoraLayer h = random_layer("k", 5, 4, 2, 2.0, rng);
    for (auto which : {NegatedFactor::kA, NegatedFactor::kB}) {
      CHECK(negate_factor(negate_factor(h, which), which) == h);
    }
  }

  TEST_CASE("RESTA matches the dense oracle") {
    std::mt19937_64 rng(56);
    const LoraLayer f = random_layer("k", 12, 9, 4, 8.0, rng);
    const LoraLayer h = random_layer("k", 12, 9, 2, 4.0, rng);
    const Eigen::MatrixXd want = dense_delta(f) - 0.5 * dense_delta(h);
    for (auto which : {NegatedFactor::kA, NegatedFactor::kB}) {
      const auto m = resta_merge(f, h, 0.5, std::nullopt, RankMode::concat(), which);
      CHECK(rel_diff(to_eigen(densify(m.layer.factors())), want) <= 1e-5);
    }
    const auto dare1 = resta_merge(f, h, 0.5, DareOptions{1.0, 0}, RankMode::dense());
    CHECK(rel_diff(to_eigen(densify(dare1.layer.factors())), want) <= 1e-5);
    CHECK_THROWS_AS(resta_merge(f, h, 0.0, std::nullopt, RankMode::concat()), PolicyError);
  }

  TEST_CASE("dense deltas have no concat factorization") {
    CHECK_THROWS_AS(layer_from_dense("k", Matrix(2, 2), RankMode::concat()), ModeError);
    const Matrix wide{{1, 2, 3}, {4, 5, 6}};
    CHECK(densify(fixed_layer("k", wide).factors()) == wide);
  }

  TEST_CASE("strategy names") {
    CHECK(parse_strategy("linear") == Strategy::kLinear);
    CHECK(parse_strategy("dare_linear") == Strategy::kDareLinear);
    CHECK(parse_strategy("ties") == Strategy::kTies);
    CHECK_FALSE(parse_strategy("slerp").has_value());
  }
}

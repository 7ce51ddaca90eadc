// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "cli/fixtures.hpp"
#include "lorasafe/error.hpp"
#include "lorasafe/linalg.hpp"
#include "lorasafe/pipeline.hpp"
#include "support/test_support.hpp"

using namespace lorasafe;
using namespace lorasafe::testing;
using lorasafe::cli::FixtureSpec;
using lorasafe::cli::Planting;

namespace {

cli::Fixture small_fixture(std::uint64_t seed, std::map<std::size_t, Planting> plants = {},
                           std::size_t layers = 4) {
  FixtureSpec spec;
  spec.num_layers = layers;
  spec.d_out = 24;
  spec.d_in = 16;
  spec.rank = 4;
  spec.seed = seed;
  spec.plants = std::move(plants);
  return cli::generate_fixture(spec);
}

Eigen::MatrixXd v_of(const cli::Fixture& fx, const std::string& key) {
  const std::string name = NamingProfile{}.weight_name(key);
  return to_eigen(fx.aligned.at(name)) - to_eigen(fx.unaligned.at(name));
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("tau 0 merges nothing and returns the adapter unchanged") {
    const auto fx = small_fixture(1);
    const InMemoryWeightSource a(fx.aligned), u(fx.unaligned);
    MergePolicy p;
    p.tau = 0.0;
    const auto r = run_safemerge(fx.fine_tuned, fx.safe, a, u, p, {});
    CHECK(r.report.merged_count == 0);
    CHECK(r.adapter.layers == fx.fine_tuned.layers);
    CHECK(r.report.output_digest == adapter_digest(fx.fine_tuned));
  }

  TEST_CASE("tau 1 with linear weights merges every layer exactly") {
    const auto fx = small_fixture(2);
    const InMemoryWeightSource a(fx.aligned), u(fx.unaligned);
    MergePolicy p;
    p.tau = 1.0;
    const auto r = run_safemerge(fx.fine_tuned, fx.safe, a, u, p, {});
    CHECK(r.report.merged_count == fx.fine_tuned.layers.size());
    for (const auto& [key, layer] : r.adapter.layers) {
      const Eigen::MatrixXd want = 0.8 * dense_delta(fx.fine_tuned.layers.at(key)) +
                                   0.2 * dense_delta(fx.safe.layers.at(key));
      CHECK(rel_diff(dense_delta(layer), want) <= 1e-5);
    }
  }

  TEST_CASE("three orthogonal plantings among zero-delta layers merge alone at any positive tau") {
    FixtureSpec spec;
    spec.num_layers = 8;
    spec.d_out = 32;
    spec.d_in = 16;
    spec.rank = 4;
    spec.target_modules = {"q_proj"};
    for (std::size_t i = 0; i < 8; ++i) spec.plants[i] = Planting::kZeroDelta;
    for (std::size_t i : {1, 4, 6}) spec.plants[i] = Planting::kOrthogonal;
    const auto fx = cli::generate_fixture(spec);
    const InMemoryWeightSource a(fx.aligned), u(fx.unaligned);
    for (double tau : {1e-12, 0.1, 0.5, 0.9, 1.0}) {
      MergePolicy p;
      p.tau = tau;
      const auto r = run_safemerge(fx.fine_tuned, fx.safe, a, u, p, {});
      CHECK(r.report.merged_count == 3);
      for (const auto& d : r.report.decisions) {
        const bool planted = d.key == "model.layers.1.self_attn.q_proj" ||
                             d.key == "model.layers.4.self_attn.q_proj" ||
                             d.key == "model.layers.6.self_attn.q_proj";
        CHECK(d.merged == planted);
      }
    }
  }

  TEST_CASE("analyze reports planted rho values and tags") {
    const auto fx = small_fixture(3, {{0, Planting::kOrthogonal}, {3, Planting::kOrthogonal},
                                      {5, Planting::kOrthogonal}, {6, Planting::kZeroDelta}});
    const InMemoryWeightSource a(fx.aligned), u(fx.unaligned);
    const MergeReport r = run_analyze(fx.fine_tuned, a, u, 0.5, {});
    std::size_t zeros = 0;
    for (const auto& d : r.decisions) {
      if (*d.rho == 0.0) {
        ++zeros;
        CHECK(d.degenerate == DegenerateReason::kOrthogonalDelta);
      }
    }
    CHECK(zeros == 3);
    CHECK(r.decisions[6].rho == 1.0);
    CHECK(r.decisions[6].degenerate == DegenerateReason::kZeroDelta);
    CHECK(r.merged_count == 0);
    CHECK(r.expected_total == 8);
  }

  TEST_CASE("rho in the report matches the dense oracle per layer") {
    const auto fx = small_fixture(4);
    const InMemoryWeightSource a(fx.aligned), u(fx.unaligned);
    const MergeReport r = run_analyze(fx.fine_tuned, a, u, 0.5, {});
    for (const auto& d : r.decisions) {
      const double want = dense_rho(v_of(fx, d.key), dense_delta(fx.fine_tuned.layers.at(d.key)));
      CHECK(std::abs(*d.rho - want) <= 1e-6);
    }
  }

  TEST_CASE("aligned equal to unaligned tags every layer zero-subspace") {
    const auto fx = small_fixture(5);
    const InMemoryWeightSource a(fx.aligned);
    const MergeReport r = run_analyze(fx.fine_tuned, a, a, 0.5, {});
    for (const auto& d : r.decisions) {
      CHECK(d.rho == 0.0);
      CHECK(d.degenerate == DegenerateReason::kZeroSubspace);
    }
  }

  TEST_CASE("missing weight keys abort with the key list") {
    auto fx = small_fixture(6);
    fx.aligned.erase(fx.aligned.begin());
    const InMemoryWeightSource a(fx.aligned), u(fx.unaligned);
    CHECK_THROWS_AS(run_analyze(fx.fine_tuned, a, u, 0.5, {}), MissingKeyError);
  }

  TEST_CASE("a layer missing from the safe adapter stays unmerged with a note") {
    auto fx = small_fixture(7);
    const std::string gone = fx.safe.layers.begin()->first;
    fx.safe.layers.erase(fx.safe.layers.begin());
    const InMemoryWeightSource a(fx.aligned), u(fx.unaligned);
    MergePolicy p;
    p.tau = 1.0;
    const auto r = run_safemerge(fx.fine_tuned, fx.safe, a, u, p, {});
    CHECK(r.report.merged_count == fx.fine_tuned.layers.size() - 1);
    CHECK(r.adapter.layers.at(gone) == fx.fine_tuned.layers.at(gone));
    CHECK(r.report.decisions.front().notes == std::vector<std::string>{"missing-safe-layer"});
  }

  TEST_CASE("merged count is monotone in tau") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto fx = small_fixture(100 + seed);
      const InMemoryWeightSource a(fx.aligned), u(fx.unaligned);
      std::size_t prev = 0;
      for (int i = 0; i <= 10; ++i) {
        MergePolicy p;
        p.tau = i / 10.0;
        const auto r = run_safemerge(fx.fine_tuned, fx.safe, a, u, p, {});
        CHECK(r.report.merged_count >= prev);
        prev = r.report.merged_count;
      }
    }
  }

  TEST_CASE("results do not depend on the worker count") {
    const auto fx = small_fixture(8);
    const InMemoryWeightSource a(fx.aligned), u(fx.unaligned);
    MergePolicy p;
    p.tau = 1.0;
    p.strategy = Strategy::kDareLinear;
    p.density = 0.5;
    p.seed = 9;
    p.rank_mode = RankMode::dense();
    const auto one = run_safemerge(fx.fine_tuned, fx.safe, a, u, p, {NamingProfile{}, 1});
    const auto many = run_safemerge(fx.fine_tuned, fx.safe, a, u, p, {NamingProfile{}, 8});
    CHECK(one.adapter.layers == many.adapter.layers);
    CHECK(one.report == many.report);
  }

  TEST_CASE("SafeLoRA endpoints and monotone projected counts") {
    const auto fx = small_fixture(9);
    const InMemoryWeightSource a(fx.aligned), u(fx.unaligned);
    const auto none = run_safelora(fx.fine_tuned, a, u, 0.0, {});
    CHECK(none.report.merged_count == 0);
    CHECK(none.adapter.layers == fx.fine_tuned.layers);
    const auto all = run_safelora(fx.fine_tuned, a, u, 1.0, {});
    CHECK(all.report.merged_count == fx.fine_tuned.layers.size());
    for (const auto& [key, layer] : all.adapter.layers) {
      const Eigen::MatrixXd v = v_of(fx, key);
      const Eigen::MatrixXd want = v * v.transpose() / v.norm() * dense_delta(fx.fine_tuned.layers.at(key));
      CHECK(rel_diff(dense_delta(layer), want) <= 1e-5);
    }
    std::size_t prev = 0;
    for (int i = 1; i <= 10; ++i) {
      const auto r = run_safelora(fx.fine_tuned, a, u, i / 10.0, {});
      CHECK(r.report.merged_count >= prev);
      prev = r.report.merged_count;
    }
  }

  TEST_CASE("SafeLoRA leaves zero-subspace layers alone with a note") {
    const auto fx = small_fixture(10);
    const InMemoryWeightSource a(fx.aligned);
    const auto r = run_safelora(fx.fine_tuned, a, a, 1.0, {});
    CHECK(r.report.merged_count == 0);
    CHECK(r.report.flagged_count == fx.fine_tuned.layers.size());
    CHECK(r.report.decisions.front().notes == std::vector<std::string>{"zero-subspace-not-projectable"});
  }

  TEST_CASE("RESTA rewrites every layer and records norms") {
    const auto fx = small_fixture(11);
    RestaOptions o;
    o.alpha = 0.5;
    const auto r = run_resta(fx.fine_tuned, fx.harmful, o, {});
    CHECK(r.report.merged_count == fx.fine_tuned.layers.size());
    for (const auto& d : r.report.decisions) {
      const Eigen::MatrixXd want =
          dense_delta(fx.fine_tuned.layers.at(d.key)) - 0.5 * dense_delta(fx.harmful.layers.at(d.key));
      CHECK(rel_diff(dense_delta(r.adapter.layers.at(d.key)), want) <= 1e-5);
      REQUIRE(d.norm_after.has_value());
      CHECK(std::abs(*d.norm_after - want.norm()) <= 1e-5 * want.norm());
    }
  }

  TEST_CASE("RESTA cancellation, guard and key mismatch") {
    auto fx = small_fixture(12);
    RestaOptions o;
    o.alpha = 1.0;
    const auto r = run_resta(fx.fine_tuned, fx.fine_tuned, o, {});
    for (const auto& [key, layer] : r.adapter.layers) CHECK(frobenius_norm(densify(layer.factors())) < 1e-6);
    o.alpha = 0.0;
    CHECK_THROWS_AS(run_resta(fx.fine_tuned, fx.harmful, o, {}), PolicyError);
    o.alpha = 0.5;
    fx.harmful.layers.erase(fx.harmful.layers.begin());
    CHECK_THROWS_AS(run_resta(fx.fine_tuned, fx.harmful, o, {}), MissingKeyError);
  }

  TEST_CASE("safety score") {
    CHECK(safety_score({7.50, 5.70}) == doctest::Approx(93.40).epsilon(1e-12));
    CHECK(safety_score({0, 0}) == 100.0);
    CHECK(safety_score({100, 100}) == 0.0);
    CHECK_THROWS_AS(safety_score({-1, 0}), ValidationError);
    CHECK_THROWS_AS(safety_score({0, 100.5}), ValidationError);
  }

  TEST_CASE("sweep endpoints, monotonicity and single scoring pass") {
    const auto fx = small_fixture(13);
    const InMemoryWeightSource a(fx.aligned), u(fx.unaligned);
    SweepGrid g;
    g.taus = {0.0, 1.0};
    g.weights = {{0.8, 0.2}};
    auto r = sweep(fx.fine_tuned, fx.safe, a, u, g, {});
    REQUIRE(r.rows.size() == 2);
    CHECK(r.rows[0].merged_count == 0);
    CHECK(r.rows[1].merged_count == fx.fine_tuned.layers.size());

    g.taus.clear();
    for (int i = 1; i <= 10; ++i) g.taus.push_back(i / 10.0);
    g.weights = {{0.8, 0.2}, {0.7, 0.3}};
    r = sweep(fx.fine_tuned, fx.safe, a, u, g, {});
    CHECK(r.rows.size() == 20);
    CHECK(r.stats.rho_computations == fx.fine_tuned.layers.size());
    for (std::size_t i = 0; i < r.rows.size(); ++i) {
      MergePolicy p;
      p.tau = r.rows[i].tau;
      p.w_f = r.rows[i].w_f;
      p.w_s = r.rows[i].w_s;
      const auto brute = run_safemerge(fx.fine_tuned, fx.safe, a, u, p, {});
      CHECK(r.rows[i].merged_count == brute.report.merged_count);
      if (i % 10 != 0) CHECK(r.rows[i].merged_count >= r.rows[i - 1].merged_count);
    }
  }

  TEST_CASE("report JSON round trip is exact") {
    const auto fx = small_fixture(14, {{0, Planting::kOrthogonal}});
    const InMemoryWeightSource a(fx.aligned), u(fx.unaligned);
    MergePolicy p;
    p.tau = 0.6;
    p.rank_mode = RankMode::restore(4);
    const auto r = run_safemerge(fx.fine_tuned, fx.safe, a, u, p, {});
    TempDir tmp;
    write_report_json(r.report, tmp / "r.json");
    const MergeReport back = read_report_json(tmp / "r.json");
    CHECK(back == r.report);
    write_report_json(back, tmp / "again.json");
    CHECK(read_file(tmp / "again.json") == read_file(tmp / "r.json"));
    CHECK(r.report.to_csv().find("key,rho") == 0);
  }
}

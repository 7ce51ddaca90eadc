// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lorasafe/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace lorasafe {

void LowRankFactors::validate() const {
  if (A.rows() == 0) throw DimensionError("low-rank factors have zero rank");
  if (B.cols() != A.rows()) {
    throw DimensionError("low-rank factors disagree on rank: B " + B.shape() + ", A " + A.shape());
  }
  if (!std::isfinite(scale)) throw NumericError("low-rank scale is not finite");
}

Matrix matmul(const Matrix& x, const Matrix& y) {
  return matrix_cast<float>(multiply(x, y));
}

double trace_of_product(const MatrixD& x, const MatrixD& y) {
  if (x.rows() != x.cols() || !x.same_shape(y)) {
    throw DimensionError("trace_of_product: expected equal square shapes, got " + x.shape() +
                         " and " + y.shape());
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) acc += x(i, j) * y(j, i);
  }
  return acc;
}

double frobenius_norm(const LowRankFactors& f) {
  f.validate();
  const MatrixD gram_b = multiply_tn(f.B, f.B);
  const MatrixD gram_a = multiply_nt(f.A, f.A);
  const double sq = f.scale * f.scale * trace_of_product(gram_b, gram_a);
  return std::sqrt(std::max(sq, 0.0));
}

Matrix densify(const LowRankFactors& f) {
  f.validate();
  MatrixD prod = multiply(f.B, f.A);
  Matrix out(prod.rows(), prod.cols());
  auto src = prod.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(f.scale * src[i]);
  return out;
}

ThinQr thin_qr(const MatrixD& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  const std::size_t p = std::min(m, n);
  MatrixD work = a;
  std::vector<std::vector<double>> reflectors(p);

  for (std::size_t k = 0; k < p; ++k) {
    double norm = 0.0;
    for (std::size_t i = k; i < m; ++i) norm += work(i, k) * work(i, k);
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    const double alpha = work(k, k) > 0 ? -norm : norm;
    std::vector<double> v(m - k);
    for (std::size_t i = k; i < m; ++i) v[i - k] = work(i, k);
    v[0] -= alpha;
    double vnorm = 0.0;
    for (double x : v) vnorm += x * x;
    vnorm = std::sqrt(vnorm);
    if (vnorm == 0.0) continue;
    for (double& x : v) x /= vnorm;
    for (std::size_t j = k; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t i = k; i < m; ++i) dot += v[i - k] * work(i, j);
      for (std::size_t i = k; i < m; ++i) work(i, j) -= 2.0 * v[i - k] * dot;
    }
    reflectors[k] = std::move(v);
  }

  ThinQr out{MatrixD(m, p), MatrixD(p, n)};
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = i; j < n; ++j) out.r(i, j) = work(i, j);
  }
  for (std::size_t i = 0; i < p; ++i) out.q(i, i) = 1.0;
  for (std::size_t kk = p; kk-- > 0;) {
    const auto& v = reflectors[kk];
    if (v.empty()) continue;
    for (std::size_t j = 0; j < p; ++j) {
      double dot = 0.0;
      for (std::size_t i = kk; i < m; ++i) dot += v[i - kk] * out.q(i, j);
      for (std::size_t i = kk; i < m; ++i) out.q(i, j) -= 2.0 * v[i - kk] * dot;
    }
  }
  return out;
}

namespace {

// Hestenes one-sided Jacobi on a tall matrix (m >= n). Columns are stored as
// rows of `cols` so that rotations touch contiguous memory.
SvdResult jacobi_svd_tall(const MatrixD& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  MatrixD cols(n, m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) cols(j, i) = a(i, j);
  }
  MatrixD vt = MatrixD::identity(n);  // row j holds right singular vector j

  constexpr double kEps = std::numeric_limits<double>::epsilon();
  constexpr int kMaxSweeps = 80;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto cp = cols.row(p);
        auto cq = cols.row(q);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= kEps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = cp[i];
          const double y = cq[i];
          cp[i] = c * x - s * y;
          cq[i] = s * x + c * y;
        }
        auto vp = vt.row(p);
        auto vq = vt.row(q);
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i];
          const double y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (double x : cols.row(j)) s += x * x;
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t l, std::size_t r) { return sigma[l] > sigma[r]; });

  SvdResult out{MatrixD(m, n), std::vector<double>(n), MatrixD(n, n)};
  const double floor = sigma.empty() ? 0.0 : sigma[order[0]] * kEps * static_cast<double>(m);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.singular[k] = sigma[j];
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = vt(j, i);
    if (sigma[j] > floor && sigma[j] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = cols(j, i) / sigma[j];
    }
  }
  return out;
}

}  // namespace

SvdResult jacobi_svd(const MatrixD& a) {
  if (a.rows() >= a.cols()) return jacobi_svd_tall(a);
  MatrixD t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  }
  SvdResult r = jacobi_svd_tall(t);
  return SvdResult{std::move(r.v), std::move(r.singular), std::move(r.u)};
}

TruncatedSvd truncated_svd_of_factors(const LowRankFactors& f, std::size_t target_rank) {
  f.validate();
  const std::size_t max_rank = std::min(f.out_dim(), f.in_dim());
  if (target_rank == 0 || target_rank > max_rank) {
    throw ValidationError("target rank " + std::to_string(target_rank) + " outside [1, " +
                          std::to_string(max_rank) + "]");
  }
  require_finite(f.B, "low-rank factor B");
  require_finite(f.A, "low-rank factor A");
  if (target_rank >= f.rank()) return TruncatedSvd{f, 0.0, {}};

  const ThinQr qb = thin_qr(matrix_cast<double>(f.B));
  MatrixD at(f.A.cols(), f.A.rows());
  for (std::size_t i = 0; i < f.A.rows(); ++i) {
    for (std::size_t j = 0; j < f.A.cols(); ++j) at(j, i) = f.A(i, j);
  }
  const ThinQr qa = thin_qr(at);

  MatrixD core = multiply_nt(qb.r, qa.r);
  for (double& x : core.values()) x *= f.scale;
  const SvdResult svd = jacobi_svd(core);

  const std::size_t keep = std::min(target_rank, svd.singular.size());
  double tail = 0.0;
  for (std::size_t i = keep; i < svd.singular.size(); ++i) tail += svd.singular[i] * svd.singular[i];

  // B' = Qb U_t sqrt(S_t), A' = sqrt(S_t) V_t^T Qa^T
  MatrixD left(svd.u.rows(), keep);
  MatrixD right(svd.v.rows(), keep);
  for (std::size_t k = 0; k < keep; ++k) {
    const double root = std::sqrt(svd.singular[k]);
    for (std::size_t i = 0; i < svd.u.rows(); ++i) left(i, k) = svd.u(i, k) * root;
    for (std::size_t i = 0; i < svd.v.rows(); ++i) right(i, k) = svd.v(i, k) * root;
  }
  const MatrixD b_new = multiply(qb.q, left);
  const MatrixD a_new_t = multiply(qa.q, right);
  Matrix a_new(keep, f.in_dim());
  for (std::size_t i = 0; i < f.in_dim(); ++i) {
    for (std::size_t k = 0; k < keep; ++k) a_new(k, i) = static_cast<float>(a_new_t(i, k));
  }

  TruncatedSvd out;
  out.factors = LowRankFactors{matrix_cast<float>(b_new), std::move(a_new), 1.0};
  out.reconstruction_error = std::sqrt(tail);
  out.singular_values = svd.singular;
  require_finite(out.factors.B, "truncated factor B");
  require_finite(out.factors.A, "truncated factor A");
  return out;
}

}  // namespace lorasafe

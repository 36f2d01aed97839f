// Test-only reference implementations, independent of the message-passing
// code paths they check: a dense joint-Gaussian solve over (theta_i, theta_j,
// d) in long double, Monte Carlo moments, and a union-find connectivity
// oracle.

#pragma once

#include <Eigen/Dense>
#include <numeric>
#include <vector>

#include "coslas/measurement.hpp"
#include "coslas/rng.hpp"

namespace coslas::test {

using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
using VecL = Eigen::Matrix<long double, Eigen::Dynamic, 1>;

struct JointGaussian {
  VecL mean;
  MatL cov;
};

// Exact posterior over z = (theta_i, theta_j, d_m) for one exchange, with the
// likelihood |A t_i + B t_j + a_d d|^2 / (2 sigma_v^2) and optional Gaussian
// priors per block (empty prior = flat).  Works internally with d in seconds
// to keep the normal equations well scaled; the returned block is in meters.
inline JointGaussian dense_joint(const LikelihoodMatrices& mats,
                                 const Eigen::Vector2d* mu_i,
                                 const Eigen::Matrix2d* cov_i,
                                 const Eigen::Vector2d* mu_j,
                                 const Eigen::Matrix2d* cov_j,
                                 const double* mu_d, const double* var_d,
                                 double sigma_v) {
  const int m = static_cast<int>(mats.a_d.size());
  const long double c = kSpeedOfLight;
  MatL big(m, 5);
  for (int r = 0; r < m; ++r) {
    big(r, 0) = mats.A(r, 0);
    big(r, 1) = mats.A(r, 1);
    big(r, 2) = mats.B(r, 0);
    big(r, 3) = mats.B(r, 1);
    big(r, 4) = -1.0L;  // distance in seconds
  }
  MatL lam = big.transpose() * big / (static_cast<long double>(sigma_v) * sigma_v);
  VecL eta = VecL::Zero(5);
  auto add_prior2 = [&](int off, const Eigen::Vector2d* mu,
                        const Eigen::Matrix2d* cov) {
    if (!mu) return;
    Eigen::Matrix2d inv = cov->inverse();
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) lam(off + a, off + b) += inv(a, b);
    }
    Eigen::Vector2d h = inv * (*mu);
    eta[off] += h[0];
    eta[off + 1] += h[1];
  };
  add_prior2(0, mu_i, cov_i);
  add_prior2(2, mu_j, cov_j);
  if (mu_d) {
    const long double lam_d = c * c / static_cast<long double>(*var_d);
    lam(4, 4) += lam_d;
    eta[4] += lam_d * (*mu_d / c);
  }
  JointGaussian out;
  out.cov = lam.inverse();
  out.mean = out.cov * eta;
  // convert the distance block back to meters
  for (int k = 0; k < 5; ++k) {
    out.cov(4, k) *= c;
    out.cov(k, 4) *= c;
  }
  out.mean[4] *= c;
  return out;
}

struct Moments2 {
  Eigen::Vector2d mean;
  Eigen::Matrix2d cov;
};

// Weighted sample moments of a particle cloud.
inline Moments2 weighted_moments(const std::vector<Eigen::Vector2d>& pts,
                                 const std::vector<double>& w) {
  double wsum = 0.0;
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    wsum += w[i];
    mean += w[i] * pts[i];
  }
  mean /= wsum;
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Eigen::Vector2d d = pts[i] - mean;
    cov += w[i] * d * d.transpose();
  }
  cov /= wsum;
  return {mean, cov};
}

// Monte-Carlo moments of |p_i - p_j| for Gaussian p_i, p_j.
inline void mc_distance_moments(const Eigen::Vector2d& mu_i,
                                const Eigen::Matrix2d& cov_i,
                                const Eigen::Vector2d& mu_j,
                                const Eigen::Matrix2d& cov_j, int n,
                                RngStream& rng, double& mean, double& var) {
  const Eigen::Matrix2d li = Eigen::LLT<Eigen::Matrix2d>(cov_i).matrixL();
  const Eigen::Matrix2d lj = Eigen::LLT<Eigen::Matrix2d>(cov_j).matrixL();
  double s1 = 0.0, s2 = 0.0;
  for (int k = 0; k < n; ++k) {
    Eigen::Vector2d zi(rng.normal(), rng.normal());
    Eigen::Vector2d zj(rng.normal(), rng.normal());
    const double d = ((mu_i + li * zi) - (mu_j + lj * zj)).norm();
    s1 += d;
    s2 += d * d;
  }
  mean = s1 / n;
  var = s2 / n - mean * mean;
}

// Independent connectivity oracle.
class UnionFind {
 public:
  explicit UnionFind(int n) : parent_(n) {
    std::iota(parent_.begin(), parent_.end(), 0);
  }
  int find(int x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  void unite(int a, int b) { parent_[find(a)] = find(b); }
  bool connected(int a, int b) { return find(a) == find(b); }

 private:
  std::vector<int> parent_;
};

}  // namespace coslas::test

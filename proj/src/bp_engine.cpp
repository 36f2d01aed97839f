#include "coslas/bp_engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace coslas {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Eigen::Matrix2d floor_spd(const Eigen::Matrix2d& c, double floor_eig = 1e-9) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(c);
  const double lo = es.eigenvalues().minCoeff();
  if (lo >= floor_eig) return c;
  return c + (floor_eig - lo) * Eigen::Matrix2d::Identity();
}

// Limit the anisotropy of a fitted position covariance.  An elongated fit
// (tight across a ring, wide along it) understates the radius error its
// tangential spread induces through ring curvature; capping the eigenvalue
// ratio keeps downstream annulus widths from turning confidently wrong.
Eigen::Matrix2d cap_anisotropy(const Eigen::Matrix2d& c, double ratio = 1e-2) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(c);
  const double hi = es.eigenvalues().maxCoeff();
  const double lo = es.eigenvalues().minCoeff();
  if (lo >= ratio * hi) return c;
  return c + (ratio * hi - lo) * Eigen::Matrix2d::Identity();
}

}  // namespace

Gaussian pinned_clock_belief(const Eigen::Vector2d& value, double eps) {
  return Gaussian::from_moments(value, eps * Eigen::Matrix2d::Identity());
}

GaussianMixture pinned_location_belief(const Eigen::Vector4d& value,
                                       double eps) {
  MixtureComponent c;
  c.weight = 1.0;
  c.g = Gaussian::from_moments(value, eps * Eigen::Matrix4d::Identity());
  return GaussianMixture({c});
}

Gaussian predict_clock(const Gaussian& b_prev,
                       const Eigen::Matrix2d& sigma_u1) {
  return Gaussian::from_moments(b_prev.mean(), b_prev.cov() + sigma_u1);
}

GaussianMixture predict_location(const GaussianMixture& b_prev,
                                 const Eigen::Matrix4d& g1,
                                 const Eigen::Matrix4d& sigma_u2) {
  std::vector<MixtureComponent> comps;
  comps.reserve(b_prev.size());
  for (const auto& c : b_prev.components()) {
    MixtureComponent out;
    out.weight = c.weight;
    out.g = Gaussian::from_moments(g1 * c.g.mean(),
                                   g1 * c.g.cov() * g1.transpose() + sigma_u2);
    comps.push_back(out);
  }
  return GaussianMixture(std::move(comps));
}

GaussianMixture project_position(const GaussianMixture& msg_x) {
  const Eigen::Matrix<double, 2, 4> p = position_projection();
  std::vector<MixtureComponent> comps;
  comps.reserve(msg_x.size());
  for (const auto& c : msg_x.components()) {
    MixtureComponent out;
    out.weight = c.weight;
    out.g = Gaussian::from_moments(p * c.g.mean(),
                                   p * c.g.cov() * p.transpose());
    comps.push_back(out);
  }
  return GaussianMixture(std::move(comps));
}

namespace {

// Square root of a message's information matrix: lambda = L L^T.
Eigen::Matrix2d info_sqrt(const Gaussian& g) {
  Eigen::LLT<Eigen::Matrix2d> llt((Eigen::Matrix2d(g.lambda())));
  if (llt.info() != Eigen::Success) {
    throw NumericalError("info_sqrt", "message information not posdef");
  }
  return llt.matrixL();
}

}  // namespace

Gaussian1 zeta_f_d(const LikelihoodMatrices& mats, const Gaussian& eta_i,
                   const Gaussian& eta_j, double sigma_v, double var_floor) {
  const int m = static_cast<int>(mats.a_d.size());

  // Square-root marginalization: stack the whitened residual rows
  // [A B a]/sigma_v (distance in seconds, a = -1) on top of the clock
  // message square roots, QR with d ordered last, and read the d marginal
  // off the trailing entry of R.  Algebraically identical to the
  // information-form expression, but stable for both tight and wide clock
  // messages, whose scales differ by many orders of magnitude.
  Eigen::MatrixXd stack = Eigen::MatrixXd::Zero(m + 4, 5);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m + 4);
  stack.block(0, 0, m, 2) = mats.A / sigma_v;
  stack.block(0, 2, m, 2) = mats.B / sigma_v;
  stack.block(0, 4, m, 1).setConstant(-1.0 / sigma_v);

  const Eigen::Matrix2d li = info_sqrt(eta_i);
  const Eigen::Matrix2d lj = info_sqrt(eta_j);
  stack.block(m, 0, 2, 2) = li.transpose();
  rhs.segment(m, 2) = li.transpose() * eta_i.mean();
  stack.block(m + 2, 2, 2, 2) = lj.transpose();
  rhs.segment(m + 2, 2) = lj.transpose() * eta_j.mean();

  Eigen::HouseholderQR<Eigen::MatrixXd> qr(stack);
  const Eigen::MatrixXd r =
      qr.matrixQR().topRows(5).triangularView<Eigen::Upper>();
  const Eigen::VectorXd e =
      (qr.householderQ().transpose() * rhs).head(5);

  const double r_dd = r(4, 4);
  if (!(r_dd * r_dd > 0.0) || !std::isfinite(r_dd)) {
    throw NumericalError("zeta_f_d", "distance not observable");
  }
  Gaussian1 out;
  out.mean = kSpeedOfLight * e(4) / r_dd;
  out.var = kSpeedOfLight * kSpeedOfLight / (r_dd * r_dd);
  out.var = std::max(out.var, var_floor);
  return out;
}

Gaussian1 zeta_phi_d(const GaussianMixture& eta_p_i,
                     const GaussianMixture& eta_p_j, double var_floor) {
  double mean = 0.0;
  struct Term {
    double w, norm, quad;
  };
  std::vector<Term> terms;
  terms.reserve(static_cast<std::size_t>(eta_p_i.size()) * eta_p_j.size());
  for (const auto& ci : eta_p_i.components()) {
    for (const auto& cj : eta_p_j.components()) {
      const Eigen::Vector2d diff = ci.g.mean() - cj.g.mean();
      double norm = diff.norm();
      Eigen::Vector2d dir;
      if (norm < 1e-6) {
        // degenerate linearization: floor the distance, fixed unit direction
        norm = std::max(norm, 1e-6);
        dir = Eigen::Vector2d(1.0, 0.0);
      } else {
        dir = diff / norm;
      }
      const double quad = dir.dot(ci.g.cov() * dir) + dir.dot(cj.g.cov() * dir);
      const double w = ci.weight * cj.weight;
      mean += w * norm;
      terms.push_back({w, norm, quad});
    }
  }
  double var = 0.0;
  for (const auto& t : terms) {
    var += t.w * (t.quad + (t.norm - mean) * (t.norm - mean));
  }
  return {mean, std::max(var, var_floor)};
}

Gaussian zeta_f_theta(const LikelihoodMatrices& mats,
                      const Gaussian& eta_theta_j, const Gaussian1& dist_msg,
                      double sigma_v) {
  const int m = static_cast<int>(mats.a_d.size());
  const double c = kSpeedOfLight;

  // Square-root marginalization of (theta_j, d) with this agent's clock
  // state ordered last; the 2x2 trailing block of R carries the marginal.
  Eigen::MatrixXd stack = Eigen::MatrixXd::Zero(m + 3, 5);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m + 3);
  stack.block(0, 0, m, 2) = mats.B / sigma_v;
  stack.block(0, 2, m, 1).setConstant(-1.0 / sigma_v);
  stack.block(0, 3, m, 2) = mats.A / sigma_v;

  const Eigen::Matrix2d lj = info_sqrt(eta_theta_j);
  stack.block(m, 0, 2, 2) = lj.transpose();
  rhs.segment(m, 2) = lj.transpose() * eta_theta_j.mean();
  const double sd_inv = c / std::sqrt(dist_msg.var);
  stack(m + 2, 2) = sd_inv;
  rhs(m + 2) = sd_inv * dist_msg.mean / c;

  Eigen::HouseholderQR<Eigen::MatrixXd> qr(stack);
  const Eigen::MatrixXd r =
      qr.matrixQR().topRows(5).triangularView<Eigen::Upper>();
  const Eigen::VectorXd e =
      (qr.householderQ().transpose() * rhs).head(5);

  const Eigen::Matrix2d r22 = r.bottomRightCorner<2, 2>();
  const Eigen::Matrix2d lam_out = r22.transpose() * r22;
  const Eigen::Vector2d h_out = r22.transpose() * e.tail<2>();
  if (!(lam_out(0, 0) > 0.0) || !(lam_out(1, 1) > 0.0) ||
      !std::isfinite(lam_out.sum())) {
    throw NumericalError("zeta_f_theta", "singular output information");
  }
  return Gaussian::from_information(lam_out, h_out);
}

AnnulusMixture zeta_phi_p(const GaussianMixture& eta_p_j,
                          const Gaussian1& dist_msg,
                          const GaussianMixture& eta_p_i_prev) {
  Eigen::Vector2d own_mean = Eigen::Vector2d::Zero();
  for (const auto& c : eta_p_i_prev.components()) {
    own_mean += c.weight * c.g.mean();
  }
  AnnulusMixture out;
  out.radius = dist_msg.mean;
  out.components.reserve(eta_p_j.size());
  for (const auto& c : eta_p_j.components()) {
    AnnulusComponent ac;
    ac.weight = c.weight;
    ac.center = c.g.mean();
    Eigen::Vector2d diff = ac.center - own_mean;
    double norm = diff.norm();
    Eigen::Vector2d dir = norm < 1e-6 ? Eigen::Vector2d(1.0, 0.0) : Eigen::Vector2d(diff / norm);
    ac.width_sq = dir.dot(c.g.cov() * dir) + dist_msg.var;
    out.components.push_back(ac);
  }
  return out;
}

Gaussian eta_f_theta(const Gaussian& zeta_f,
                     std::span<const Gaussian* const> zeta_f_theta_others) {
  Eigen::Matrix2d lam = zeta_f.lambda();
  Eigen::Vector2d eta = zeta_f.eta();
  for (const auto* g : zeta_f_theta_others) {
    lam += g->lambda();
    eta += g->eta();
  }
  return Gaussian::from_information(lam, eta);
}

// ---- particle machinery ----

namespace {

struct PreparedComp {
  double logw;
  Eigen::Vector2d mean;
  Eigen::Matrix2d lam;
  Eigen::Matrix2d chol;
  double lognorm;
};

struct PreparedFactor {
  bool is_annulus = false;
  std::vector<PreparedComp> comps;  // gm, or annulus centers for sampling
  std::vector<double> cumw;
  const AnnulusMixture* ann = nullptr;
  Gaussian1 radius;
};

PreparedFactor prepare(const PositionFactor& f) {
  PreparedFactor p;
  const GaussianMixture* source = f.gm ? f.gm : f.annulus_centers;
  double cum = 0.0;
  for (const auto& c : source->components()) {
    PreparedComp pc;
    pc.logw = std::log(c.weight);
    pc.mean = c.g.mean();
    // the floor must stay below the reference-pinning covariance, or pinned
    // agents lose their authority inside particle products
    const Eigen::Matrix2d cov = floor_spd(c.g.cov(), 1e-14);
    pc.lam = spd_inverse(cov);
    pc.chol = Eigen::LLT<Eigen::Matrix2d>(cov).matrixL();
    pc.lognorm = -std::log(2.0 * M_PI) - 0.5 * std::log(cov.determinant());
    p.comps.push_back(pc);
    cum += c.weight;
    p.cumw.push_back(cum);
  }
  if (f.annulus) {
    p.is_annulus = true;
    p.ann = f.annulus;
    p.radius = f.annulus_radius;
    double acum = 0.0;
    p.cumw.clear();
    for (const auto& ac : f.annulus->components) {
      acum += ac.weight;
      p.cumw.push_back(acum);
    }
  }
  return p;
}

int pick_component(const std::vector<double>& cumw, RngStream& rng) {
  const double u = rng.uniform() * cumw.back();
  for (std::size_t s = 0; s < cumw.size(); ++s) {
    if (u < cumw[s]) return static_cast<int>(s);
  }
  return static_cast<int>(cumw.size()) - 1;
}

Eigen::Vector2d sample_factor(const PreparedFactor& f, RngStream& rng) {
  const int s = pick_component(f.cumw, rng);
  if (f.is_annulus) {
    const PreparedComp& center =
        f.comps[std::min<std::size_t>(s, f.comps.size() - 1)];
    Eigen::Vector2d z(rng.normal(), rng.normal());
    const Eigen::Vector2d c = center.mean + center.chol * z;
    const double d = f.radius.mean + std::sqrt(f.radius.var) * rng.normal();
    const double phi = 2.0 * M_PI * rng.uniform();
    return c + d * Eigen::Vector2d(std::sin(phi), std::cos(phi));
  }
  Eigen::Vector2d z(rng.normal(), rng.normal());
  return f.comps[s].mean + f.comps[s].chol * z;
}

double logeval_factor(const PreparedFactor& f, const Eigen::Vector2d& p) {
  if (f.is_annulus) return annulus_logeval(*f.ann, p);
  double best = kNegInf;
  double terms[2];
  int n = 0;
  for (const auto& c : f.comps) {
    const Eigen::Vector2d d = p - c.mean;
    terms[n] = c.logw + c.lognorm - 0.5 * d.dot(c.lam * d);
    best = std::max(best, terms[n]);
    ++n;
  }
  if (!std::isfinite(best)) return kNegInf;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += std::exp(terms[i] - best);
  return best + std::log(acc);
}

}  // namespace

namespace {

double cloud_ess(const ParticleCloud& cloud) {
  double wsum = 0.0, wsq = 0.0;
  for (double w : cloud.w) {
    wsum += w;
    wsq += w * w;
  }
  return wsq > 0.0 ? wsum * wsum / wsq : 0.0;
}

void finalize_weights(ParticleCloud& cloud, std::vector<double>& logw) {
  double logw_max = kNegInf;
  for (double lw : logw) logw_max = std::max(logw_max, lw);
  if (!std::isfinite(logw_max)) {
    throw NumericalError("eta_phi_p_particles", "degenerate message product");
  }
  cloud.w.resize(logw.size());
  double sum = 0.0;
  for (std::size_t l = 0; l < logw.size(); ++l) {
    cloud.w[l] = std::exp(logw[l] - logw_max);
    sum += cloud.w[l];
  }
  if (!(sum > 0.0) || !std::isfinite(sum)) {
    throw NumericalError("eta_phi_p_particles", "degenerate message product");
  }
}

}  // namespace

ParticleCloud sample_position_product(std::span<const PositionFactor> factors,
                                      int particle_budget, RngStream& rng) {
  const int n_factors = static_cast<int>(factors.size());
  ParticleCloud cloud;
  if (n_factors == 0) return cloud;

  std::vector<PreparedFactor> prep;
  prep.reserve(n_factors);
  for (const auto& f : factors) prep.push_back(prepare(f));

  auto log_product = [&](const Eigen::Vector2d& p) {
    double num = 0.0;
    for (const auto& f : prep) num += logeval_factor(f, p);
    return num;
  };

  const int per_factor = std::max(1, particle_budget / n_factors);
  const int total = per_factor * n_factors;
  cloud.pts.reserve(total);
  for (const auto& f : prep) {
    for (int l = 0; l < per_factor; ++l) {
      cloud.pts.push_back(sample_factor(f, rng));
    }
  }

  // w = product(factors) / sum(factors), rescaled by the max for stability
  std::vector<double> logw(total);
  std::vector<double> logvals(n_factors);
  for (int l = 0; l < total; ++l) {
    double num = 0.0;
    double den_max = kNegInf;
    for (int k = 0; k < n_factors; ++k) {
      logvals[k] = logeval_factor(prep[k], cloud.pts[l]);
      num += logvals[k];
      den_max = std::max(den_max, logvals[k]);
    }
    double den_acc = 0.0;
    for (int k = 0; k < n_factors; ++k) den_acc += std::exp(logvals[k] - den_max);
    logw[l] = num - (den_max + std::log(den_acc));
  }
  finalize_weights(cloud, logw);

  // With several narrow annuli, particles sampled ring-by-ring rarely land
  // on the joint intersection and the effective sample size collapses.  An
  // adaptive refinement pass fixes that: polish the best stage-one particles
  // into local modes of the product (Gauss-Newton on its log), then
  // importance-sample the same product against a Laplace mixture proposal
  // built at those modes.  Up to two modes are kept so the two-ring
  // intersection ambiguity survives.
  const double ess = cloud_ess(cloud);
  if (ess < std::max(50.0, 0.05 * total)) {
    // broadened objective: ring widths floored to width_floor so the ring
    // valleys become a smooth bowl; width_floor = 0 evaluates the true product
    auto log_product_floored = [&](const Eigen::Vector2d& p,
                                   double width_floor) {
      double acc = 0.0;
      for (const auto& f : prep) {
        if (f.is_annulus && width_floor > 0.0) {
          double best = kNegInf;
          double sum = 0.0;
          double terms[2];
          int n = 0;
          for (const auto& ac : f.ann->components) {
            const double w2 = std::max(ac.width_sq, width_floor);
            const double dev = f.ann->radius - (p - ac.center).norm();
            terms[n] = std::log(ac.weight) - dev * dev / (2.0 * w2);
            best = std::max(best, terms[n]);
            ++n;
          }
          for (int i = 0; i < n; ++i) sum += std::exp(terms[i] - best);
          acc += best + std::log(sum);
        } else {
          acc += logeval_factor(f, p);
        }
      }
      return acc;
    };
    // gradient and Gauss-Newton information of -log product
    auto gauss_newton = [&](const Eigen::Vector2d& p, double width_floor,
                            Eigen::Vector2d& grad, Eigen::Matrix2d& info) {
      grad.setZero();
      info.setZero();
      for (const auto& f : prep) {
        if (f.is_annulus) {
          // use the closest component of the ring mixture
          const AnnulusComponent* bc = nullptr;
          double best = kNegInf;
          for (const auto& ac : f.ann->components) {
            const double rho = (p - ac.center).norm();
            const double val = std::log(ac.weight) -
                               (f.ann->radius - rho) * (f.ann->radius - rho) /
                                   (2.0 * ac.width_sq);
            if (val > best) {
              best = val;
              bc = &ac;
            }
          }
          const double w2 = std::max(bc->width_sq, width_floor);
          const Eigen::Vector2d diff = p - bc->center;
          const double rho = std::max(diff.norm(), 1e-9);
          const Eigen::Vector2d u = diff / rho;
          const double e = f.ann->radius - rho;
          grad += (-e / w2) * u;
          info += u * u.transpose() / w2;
        } else {
          const PreparedComp* bc = &f.comps[0];
          if (f.comps.size() > 1) {
            const Eigen::Vector2d d0 = p - f.comps[0].mean;
            const Eigen::Vector2d d1 = p - f.comps[1].mean;
            if (f.comps[1].logw - 0.5 * d1.dot(f.comps[1].lam * d1) >
                f.comps[0].logw - 0.5 * d0.dot(f.comps[0].lam * d0)) {
              bc = &f.comps[1];
            }
          }
          grad += bc->lam * (p - bc->mean);
          info += bc->lam;
        }
      }
    };
    auto polish_phase = [&](Eigen::Vector2d p, double width_floor) {
      Eigen::Vector2d grad;
      Eigen::Matrix2d info;
      double value = log_product_floored(p, width_floor);
      for (int it = 0; it < 25; ++it) {
        gauss_newton(p, width_floor, grad, info);
        const Eigen::Matrix2d damped =
            info + 1e-9 * Eigen::Matrix2d::Identity();
        Eigen::Vector2d step = -damped.ldlt().solve(grad);
        double scale = 1.0;
        bool moved = false;
        for (int bt = 0; bt < 10; ++bt) {
          const Eigen::Vector2d cand = p + scale * step;
          const double cand_value = log_product_floored(cand, width_floor);
          if (cand_value > value) {
            p = cand;
            value = cand_value;
            moved = true;
            break;
          }
          scale *= 0.5;
        }
        if (!moved || step.norm() * scale < 1e-9) break;
      }
      return p;
    };

    // Mode enumeration.  Stage-one weights cannot rank basins when rings are
    // much narrower than the particle spacing, so polish a spread of starts
    // under the broadened objective (where smooth factors such as the
    // prediction do rank basins), keep the two best distinct basins, then
    // sharpen each against the true widths.
    int best_idx = 0;
    for (int l = 1; l < total; ++l) {
      if (cloud.w[l] > cloud.w[best_idx]) best_idx = l;
    }
    struct Basin {
      Eigen::Vector2d mode;
      double score;
    };
    std::vector<Basin> basins;
    auto consider = [&](const Eigen::Vector2d& start) {
      const Eigen::Vector2d m = polish_phase(start, 0.25);
      const double score = log_product_floored(m, 0.25);
      for (auto& b : basins) {
        if ((b.mode - m).norm() < 0.5) {
          if (score > b.score) {
            b.mode = m;
            b.score = score;
          }
          return;
        }
      }
      basins.push_back({m, score});
    };
    consider(cloud.pts[best_idx]);
    const int n_starts = 8;
    for (int k = 0; k < n_starts; ++k) {
      consider(cloud.pts[(k * total) / n_starts]);
    }
    std::sort(basins.begin(), basins.end(),
              [](const Basin& a, const Basin& b) { return a.score > b.score; });
    if (basins.size() > 2) basins.resize(2);
    std::vector<Eigen::Vector2d> modes;
    for (const auto& b : basins) {
      const Eigen::Vector2d m = polish_phase(b.mode, 0.0);
      bool dup = false;
      for (const auto& seen : modes) dup = dup || (seen - m).norm() < 1e-3;
      if (!dup) modes.push_back(m);
    }

    struct Proposal {
      Eigen::Vector2d mean;
      Eigen::Matrix2d chol, lam;
      double lognorm;
    };
    std::vector<Proposal> proposal;
    for (const auto& m : modes) {
      Eigen::Vector2d grad;
      Eigen::Matrix2d info;
      gauss_newton(m, 0.0, grad, info);
      const Eigen::Matrix2d cov =
          floor_spd(Eigen::Matrix2d(4.0 * spd_inverse(
              info + 1e-9 * Eigen::Matrix2d::Identity())), 1e-10);
      Proposal q;
      q.mean = m;
      q.chol = Eigen::LLT<Eigen::Matrix2d>(cov).matrixL();
      q.lam = spd_inverse(cov);
      q.lognorm = -std::log(2.0 * M_PI) - 0.5 * std::log(cov.determinant());
      proposal.push_back(q);
    }
    const double log_mix = -std::log(static_cast<double>(proposal.size()));

    ParticleCloud refined;
    refined.pts.reserve(total);
    std::vector<double> logw2(total);
    for (int l = 0; l < total; ++l) {
      const auto& q = proposal[l % proposal.size()];
      Eigen::Vector2d z(rng.normal(), rng.normal());
      const Eigen::Vector2d p = q.mean + q.chol * z;
      refined.pts.push_back(p);
      double qmax = kNegInf;
      double qacc = 0.0;
      for (const auto& qq : proposal) {
        const Eigen::Vector2d d = p - qq.mean;
        const double lq = qq.lognorm - 0.5 * d.dot(qq.lam * d);
        if (lq > qmax) {
          qacc = qacc * std::exp(qmax - lq) + 1.0;
          qmax = lq;
        } else {
          qacc += std::exp(lq - qmax);
        }
      }
      logw2[l] = log_product(p) - (log_mix + qmax + std::log(qacc));
    }
    finalize_weights(refined, logw2);
    if (cloud_ess(refined) > ess) cloud = std::move(refined);
  }
  return cloud;
}

Message fit_particles(const ParticleCloud& cloud, double tau1, double tau2) {
  const int n = static_cast<int>(cloud.pts.size());
  if (n == 0) return Uninformative{};
  double wsum = 0.0, wsq = 0.0;
  for (double w : cloud.w) {
    wsum += w;
    wsq += w * w;
  }
  if (!(wsum > 0.0)) return Uninformative{};
  const double ess = wsum * wsum / wsq;
  if (ess < 10.0) return Uninformative{};

  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (int l = 0; l < n; ++l) mean += cloud.w[l] * cloud.pts[l];
  mean /= wsum;
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (int l = 0; l < n; ++l) {
    const Eigen::Vector2d d = cloud.pts[l] - mean;
    cov += cloud.w[l] * d * d.transpose();
  }
  cov /= wsum;
  const double spread = cov.trace();

  auto single = [&]() -> Message {
    MixtureComponent c;
    c.weight = 1.0;
    c.g = Gaussian::from_moments(mean, cap_anisotropy(floor_spd(cov)));
    return GaussianMixture({c});
  };

  if (spread <= tau1) return single();

  // 2-means split seeded on the principal axis
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov);
  const Eigen::Vector2d axis =
      es.eigenvectors().col(1) * std::sqrt(std::max(es.eigenvalues()[1], 0.0));
  Eigen::Vector2d c1 = mean + axis;
  Eigen::Vector2d c2 = mean - axis;
  std::vector<char> assign(n, 0);
  bool ok = true;
  for (int it = 0; it < 25; ++it) {
    bool changed = false;
    for (int l = 0; l < n; ++l) {
      const char a =
          (cloud.pts[l] - c1).squaredNorm() <= (cloud.pts[l] - c2).squaredNorm()
              ? 0
              : 1;
      if (a != assign[l]) {
        assign[l] = a;
        changed = true;
      }
    }
    Eigen::Vector2d m1 = Eigen::Vector2d::Zero(), m2 = Eigen::Vector2d::Zero();
    double w1 = 0.0, w2 = 0.0;
    for (int l = 0; l < n; ++l) {
      if (assign[l] == 0) {
        w1 += cloud.w[l];
        m1 += cloud.w[l] * cloud.pts[l];
      } else {
        w2 += cloud.w[l];
        m2 += cloud.w[l] * cloud.pts[l];
      }
    }
    if (w1 <= 0.0 || w2 <= 0.0) {
      ok = false;
      break;
    }
    c1 = m1 / w1;
    c2 = m2 / w2;
    if (!changed && it > 0) break;
  }

  if (ok) {
    double w1 = 0.0, w2 = 0.0;
    Eigen::Matrix2d s1 = Eigen::Matrix2d::Zero(), s2 = Eigen::Matrix2d::Zero();
    for (int l = 0; l < n; ++l) {
      const Eigen::Vector2d d =
          cloud.pts[l] - (assign[l] == 0 ? c1 : c2);
      if (assign[l] == 0) {
        w1 += cloud.w[l];
        s1 += cloud.w[l] * d * d.transpose();
      } else {
        w2 += cloud.w[l];
        s2 += cloud.w[l] * d * d.transpose();
      }
    }
    const double m1 = w1 / wsum, m2 = w2 / wsum;
    if (w1 > 0.0 && w2 > 0.0) {
      s1 /= w1;
      s2 /= w2;
      const double sep_sq = (c1 - c2).squaredNorm();
      if (m1 >= 0.2 && m2 >= 0.2 && sep_sq > tau1 && s1.trace() <= tau2 &&
          s2.trace() <= tau2) {
        MixtureComponent a, b;
        a.weight = m1;
        a.g = Gaussian::from_moments(c1, cap_anisotropy(floor_spd(s1)));
        b.weight = m2;
        b.g = Gaussian::from_moments(c2, cap_anisotropy(floor_spd(s2)));
        return GaussianMixture({a, b});
      }
    }
  }

  if (spread <= tau2) return single();
  return Uninformative{};
}

Message eta_phi_p_particles(std::span<const PositionFactor> factors,
                            int particle_budget, double tau1, double tau2,
                            RngStream& rng) {
  if (factors.empty()) return Uninformative{};
  const ParticleCloud cloud =
      sample_position_product(factors, particle_budget, rng);
  return fit_particles(cloud, tau1, tau2);
}

Message eta_psi_p(std::span<const PositionFactor> zeta_phi_factors,
                  int particle_budget, double tau1, double tau2,
                  RngStream& rng) {
  if (zeta_phi_factors.empty()) return Uninformative{};
  const ParticleCloud cloud =
      sample_position_product(zeta_phi_factors, particle_budget, rng);
  return fit_particles(cloud, tau1, tau2);
}

Message zeta_psi_x(const Message& eta_psi) {
  if (std::holds_alternative<Uninformative>(eta_psi)) return Uninformative{};
  const Eigen::Matrix<double, 2, 4> p = position_projection();

  auto lift = [&](const Gaussian& g2) {
    const Eigen::Matrix2d lam2 =
        g2.zero_information() ? Eigen::Matrix2d::Zero() : Eigen::Matrix2d(g2.lambda());
    const Eigen::Vector2d eta2 =
        g2.zero_information() ? Eigen::Vector2d::Zero() : Eigen::Vector2d(g2.eta());
    const Eigen::Matrix4d lam4 = p.transpose() * lam2 * p;
    const Eigen::Vector4d eta4 = p.transpose() * eta2;
    return Gaussian::from_information(lam4, eta4);
  };

  if (const auto* g = std::get_if<Gaussian>(&eta_psi)) {
    return lift(*g);
  }
  const auto& gm = std::get<GaussianMixture>(eta_psi);
  std::vector<MixtureComponent> comps;
  comps.reserve(gm.size());
  for (const auto& c : gm.components()) {
    MixtureComponent out;
    out.weight = c.weight;
    out.g = lift(c.g);
    comps.push_back(out);
  }
  return GaussianMixture(std::move(comps));
}

Gaussian belief_theta(std::span<const Gaussian* const> zeta_list,
                      const Gaussian& prediction) {
  if (zeta_list.empty()) return prediction;
  Eigen::Matrix2d lam = Eigen::Matrix2d::Zero();
  Eigen::Vector2d eta = Eigen::Vector2d::Zero();
  for (const auto* g : zeta_list) {
    lam += g->lambda();
    eta += g->eta();
  }
  Eigen::LLT<Eigen::Matrix2d> llt(lam);
  if (llt.info() != Eigen::Success) return prediction;
  return Gaussian::from_information(lam, eta);
}

GaussianMixture belief_x(const Message& zeta_psi_x_msg,
                         const GaussianMixture& zeta_l) {
  if (is_zero_information(zeta_psi_x_msg)) return zeta_l;

  std::vector<MixtureComponent> psi_comps;
  if (const auto* g = std::get_if<Gaussian>(&zeta_psi_x_msg)) {
    psi_comps.push_back({1.0, *g});
  } else {
    psi_comps = std::get<GaussianMixture>(zeta_psi_x_msg).components();
  }

  struct Cand {
    double logw;
    Eigen::Vector4d mean;
    Eigen::Matrix4d cov;
  };
  std::vector<Cand> cands;
  for (const auto& pr : psi_comps) {
    const Eigen::Matrix4d lam_psi = pr.g.lambda();
    const Eigen::Vector4d eta_psi_v = pr.g.eta();
    const double h_psi = pr.g.quad_information();
    for (const auto& ls : zeta_l.components()) {
      const Eigen::Matrix4d lam_l = spd_inverse(ls.g.cov());
      const Eigen::Vector4d mu_l = ls.g.mean();
      const Eigen::Vector4d eta_l = lam_l * mu_l;
      const double h_l = mu_l.dot(eta_l);

      const Eigen::Matrix4d lam_b = lam_psi + lam_l;
      const Eigen::Vector4d eta_b = eta_psi_v + eta_l;
      const Eigen::Matrix4d cov_b = spd_inverse(lam_b);
      const Eigen::Vector4d mu_b = cov_b * eta_b;
      const double h_b = mu_b.dot(eta_b);

      Cand c;
      c.logw = std::log(pr.weight) + std::log(ls.weight) - h_psi - h_l + h_b;
      c.mean = mu_b;
      c.cov = cov_b;
      cands.push_back(c);
    }
  }

  if (cands.size() > 2) {
    std::sort(cands.begin(), cands.end(),
              [](const Cand& a, const Cand& b) { return a.logw > b.logw; });
    cands.resize(2);
  }
  double best = kNegInf;
  for (const auto& c : cands) best = std::max(best, c.logw);
  std::vector<MixtureComponent> comps;
  for (const auto& c : cands) {
    MixtureComponent out;
    out.weight = std::exp(c.logw - best);
    out.g = Gaussian::from_moments(c.mean, c.cov);
    comps.push_back(out);
  }
  return GaussianMixture(std::move(comps));
}

Estimates estimate(const AgentBeliefs& beliefs) {
  Estimates e;
  e.theta_hat = beliefs.b_theta.mean();
  if (!(e.theta_hat[1] > 0.0)) {
    throw NumericalError("estimate", "clock skew sign violation");
  }
  Eigen::Vector4d x = Eigen::Vector4d::Zero();
  for (const auto& c : beliefs.b_x.components()) {
    x += c.weight * c.g.mean();
  }
  e.x_hat = x;
  e.alpha_hat = 1.0 / e.theta_hat[1];
  e.beta_hat = e.alpha_hat * e.theta_hat[0];
  return e;
}

int comm_payload(const Message& eta_phi, const Gaussian& eta_f) {
  (void)eta_f;  // a 2-D Gaussian: 2 mean + 3 distinct covariance entries
  int pos = 0;
  if (is_zero_information(eta_phi)) {
    pos = 1;  // censoring flag
  } else if (std::holds_alternative<Gaussian>(eta_phi)) {
    pos = 5;
  } else if (const auto* gm = std::get_if<GaussianMixture>(&eta_phi)) {
    pos = gm->size() == 1 ? 5 : 11;
  } else {
    throw NumericalError("comm_payload", "annulus messages are not transmitted");
  }
  const int total = 5 + pos;
  if (total > 16) {
    throw NumericalError("comm_payload", "payload exceeds 16 reals");
  }
  return total;
}

bool clock_message_informative(const Gaussian& msg, double tau) {
  return trace_of_cov(msg) < tau;
}

bool position_message_informative(const Message& msg, double tau1,
                                  double tau2) {
  (void)tau1;
  if (is_zero_information(msg)) return false;
  if (const auto* g = std::get_if<Gaussian>(&msg)) {
    return trace_of_cov(*g) <= tau2;
  }
  const auto* gm = std::get_if<GaussianMixture>(&msg);
  if (!gm) return false;
  if (trace_of_cov(moment_match_mixture(*gm)) <= tau2) return true;
  if (gm->size() == 2) {
    const double t0 = trace_of_cov((*gm)[0].g);
    const double t1 = trace_of_cov((*gm)[1].g);
    const double wmin = std::min((*gm)[0].weight, (*gm)[1].weight);
    // a pair of tight, well-separated components is informative even though
    // its moment-matched spread is not
    if (t0 <= tau2 && t1 <= tau2 && wmin >= 0.2) return true;
  }
  return false;
}

// ---- network superstep ----

namespace {

TimestampBlock swapped(const TimestampBlock& b) {
  TimestampBlock s;
  s.y_i_to_j = b.y_j_to_i;
  s.y_j_to_i = b.y_i_to_j;
  s.ytilde_i_to_j = b.ytilde_j_to_i;
  s.ytilde_j_to_i = b.ytilde_i_to_j;
  return s;
}

struct Adjacent {
  int peer = -1;       // neighbor agent id
  int back = -1;       // index of this agent in the neighbor's adjacency
  LikelihoodMatrices mats;  // oriented so A multiplies this agent's theta
};

Message materialize(const Message& m) {
  if (std::holds_alternative<Uninformative>(m)) {
    return Gaussian::from_information(Eigen::Matrix2d::Zero(),
                                      Eigen::Vector2d::Zero());
  }
  return m;
}

const GaussianMixture* as_mixture(const Message& m) {
  return std::get_if<GaussianMixture>(&m);
}

}  // namespace

StepResult advance_network_step(std::vector<AgentBeliefs>& beliefs,
                                const std::vector<AgentRole>& roles,
                                const std::vector<NetworkLink>& links,
                                const EvolutionParams& evo,
                                const EngineConfig& cfg,
                                const StepContext& ctx,
                                const IterationHook& hook) {
  const int n_agents = static_cast<int>(beliefs.size());
  StepResult result;
  result.comm_reals.assign(n_agents, 0);

  Eigen::Matrix4d g1, g2;
  kinematic_matrices(evo.T, g1, g2);
  const Eigen::Matrix4d sigma_u2 = evo.sigma_u2 * evo.sigma_u2 * g2;
  Eigen::Matrix2d sigma_u1 = Eigen::Matrix2d::Zero();
  sigma_u1(0, 0) = evo.sigma1 * evo.sigma1;
  sigma_u1(1, 1) = evo.sigma2 * evo.sigma2;

  // Step 1: prediction (pinned agents know their current state exactly)
  std::vector<Gaussian> zeta_f(n_agents);
  std::vector<GaussianMixture> zeta_l(n_agents);
  std::vector<GaussianMixture> zeta_psi(n_agents);
  for (int i = 0; i < n_agents; ++i) {
    zeta_f[i] = roles[i].pinned_clock
                    ? pinned_clock_belief(*roles[i].pinned_clock,
                                          cfg.ref_clock_eps)
                    : predict_clock(beliefs[i].b_theta, sigma_u1);
    zeta_l[i] = roles[i].pinned_loc
                    ? pinned_location_belief(*roles[i].pinned_loc,
                                             cfg.ref_pos_eps)
                    : predict_location(beliefs[i].b_x, g1, sigma_u2);
    zeta_psi[i] = project_position(zeta_l[i]);
  }

  if (hook) {
    std::vector<AgentBeliefs> b0(n_agents);
    for (int i = 0; i < n_agents; ++i) b0[i] = {zeta_f[i], zeta_l[i]};
    hook(0, b0);
  }

  // adjacency with per-endpoint matrix orientation
  std::vector<std::vector<Adjacent>> adj(n_agents);
  for (const auto& link : links) {
    Adjacent ai;
    ai.peer = link.j;
    ai.mats = build_matrices(link.block);
    Adjacent aj;
    aj.peer = link.i;
    aj.mats = build_matrices(swapped(link.block));
    ai.back = static_cast<int>(adj[link.j].size());
    aj.back = static_cast<int>(adj[link.i].size());
    adj[link.i].push_back(std::move(ai));
    adj[link.j].push_back(std::move(aj));
  }

  // directed message state, indexed [agent][slot]
  std::vector<std::vector<Gaussian>> eta_f_prev(n_agents), eta_f_next(n_agents);
  std::vector<std::vector<Message>> eta_phi_prev(n_agents),
      eta_phi_next(n_agents);
  std::vector<std::vector<Gaussian1>> zeta_fd(n_agents), zeta_phid(n_agents);
  std::vector<std::vector<std::optional<Gaussian>>> zeta_ft(n_agents);
  std::vector<std::vector<std::optional<AnnulusMixture>>> annuli(n_agents);
  std::vector<std::vector<char>> tc(n_agents), tp(n_agents);

  const Gaussian1 dist_prior{cfg.mu_d, cfg.sigma_d * cfg.sigma_d};
  for (int i = 0; i < n_agents; ++i) {
    const auto deg = adj[i].size();
    eta_f_prev[i].assign(deg, zeta_f[i]);
    eta_f_next[i].resize(deg);
    eta_phi_prev[i].assign(deg, Message(zeta_psi[i]));
    eta_phi_next[i].resize(deg);
    zeta_fd[i].assign(deg, dist_prior);
    zeta_phid[i].assign(deg, dist_prior);
    zeta_ft[i].resize(deg);
    annuli[i].resize(deg);
    tc[i].assign(deg, 0);
    tp[i].assign(deg, 0);
    // initial transmission of the q = 0 messages
    for (std::size_t s = 0; s < deg; ++s) {
      const int payload = comm_payload(eta_phi_prev[i][s], eta_f_prev[i][s]);
      result.comm_reals[i] += payload;
      result.max_link_payload = std::max(result.max_link_payload, payload);
    }
  }

  auto link_context = [&](int i, int s, int q) {
    return "link (" + std::to_string(i + 1) + "," +
           std::to_string(adj[i][s].peer + 1) + ") q=" + std::to_string(q) +
           " n=" + std::to_string(ctx.step);
  };

  auto compute_beliefs = [&](int q) {
    std::vector<AgentBeliefs> out(n_agents);
    for (int i = 0; i < n_agents; ++i) {
      std::vector<const Gaussian*> zl;
      for (std::size_t s = 0; s < adj[i].size(); ++s) {
        if (tc[i][s] && zeta_ft[i][s]) zl.push_back(&*zeta_ft[i][s]);
      }
      out[i].b_theta = belief_theta(zl, zeta_f[i]);

      std::vector<PositionFactor> factors;
      for (std::size_t s = 0; s < adj[i].size(); ++s) {
        if (!(tp[i][s] && annuli[i][s])) continue;
        const auto* centers =
            as_mixture(eta_phi_prev[adj[i][s].peer][adj[i][s].back]);
        if (!centers) continue;
        factors.push_back(
            PositionFactor::ring(*annuli[i][s], *centers, zeta_fd[i][s]));
      }
      RngStream rng(ctx.seed, {ctx.run, static_cast<std::uint64_t>(i),
                               ctx.step, Draw::BeliefParticles, 0,
                               static_cast<std::uint64_t>(q)});
      Message eta_psi = eta_psi_p(factors, cfg.particle_budget, cfg.tau1,
                                  cfg.tau2, rng);
      if (cfg.materialize_uninformative) eta_psi = materialize(eta_psi);
      out[i].b_x = belief_x(zeta_psi_x(eta_psi), zeta_l[i]);

      if (roles[i].pinned_clock) {
        out[i].b_theta =
            pinned_clock_belief(*roles[i].pinned_clock, cfg.ref_clock_eps);
      }
      if (roles[i].pinned_loc) {
        out[i].b_x =
            pinned_location_belief(*roles[i].pinned_loc, cfg.ref_pos_eps);
      }
    }
    return out;
  };

  // Step 2: iterative message passing
  for (int q = 1; q <= cfg.iterations; ++q) {
    for (int i = 0; i < n_agents; ++i) {
      const auto deg = adj[i].size();
      // 2.1 classify the received messages
      for (std::size_t s = 0; s < deg; ++s) {
        const auto& a = adj[i][s];
        tc[i][s] = clock_message_informative(eta_f_prev[a.peer][a.back], cfg.tau);
        tp[i][s] = position_message_informative(eta_phi_prev[a.peer][a.back],
                                                cfg.tau1, cfg.tau2);
      }
      for (std::size_t s = 0; s < deg; ++s) {
        const auto& a = adj[i][s];
        const Gaussian& recv_f = eta_f_prev[a.peer][a.back];
        const Message& recv_phi = eta_phi_prev[a.peer][a.back];
        const bool own_f_informative =
            clock_message_informative(eta_f_prev[i][s], cfg.tau);
        const bool own_phi_informative = position_message_informative(
            eta_phi_prev[i][s], cfg.tau1, cfg.tau2);

        // 2.2 distance from the timestamp factor
        if (own_f_informative && tc[i][s]) {
          try {
            zeta_fd[i][s] = zeta_f_d(a.mats, eta_f_prev[i][s], recv_f,
                                     cfg.sigma_v, cfg.dist_var_floor);
          } catch (const NumericalError& e) {
            throw NumericalError(e.op(), e.context() + ", " + link_context(i, static_cast<int>(s), q));
          }
        }
        // 2.3 distance from the position factor
        if (own_phi_informative && tp[i][s]) {
          const auto* own = as_mixture(eta_phi_prev[i][s]);
          const auto* recv = as_mixture(recv_phi);
          if (own && recv) {
            zeta_phid[i][s] = zeta_phi_d(*own, *recv, cfg.dist_var_floor);
          }
        }
        // 2.4 clock message toward this agent
        if (tc[i][s]) {
          try {
            zeta_ft[i][s] =
                zeta_f_theta(a.mats, recv_f, zeta_phid[i][s], cfg.sigma_v);
          } catch (const NumericalError& e) {
            throw NumericalError(e.op(), e.context() + ", " + link_context(i, static_cast<int>(s), q));
          }
        } else {
          zeta_ft[i][s].reset();
        }
        // 2.5 annulus toward this agent's position replica
        if (tp[i][s]) {
          const auto* recv = as_mixture(recv_phi);
          const auto* own = as_mixture(eta_phi_prev[i][s]);
          // an own message that was censored has no usable linearization
          // point; fall back to the prediction
          const GaussianMixture& lin = own ? *own : zeta_psi[i];
          if (recv) {
            annuli[i][s] = zeta_phi_p(*recv, zeta_fd[i][s], lin);
          }
        } else {
          annuli[i][s].reset();
        }
      }
      // 2.6 outgoing clock messages
      for (std::size_t s = 0; s < deg; ++s) {
        std::vector<const Gaussian*> others;
        for (std::size_t s2 = 0; s2 < deg; ++s2) {
          if (s2 != s && tc[i][s2] && zeta_ft[i][s2]) {
            others.push_back(&*zeta_ft[i][s2]);
          }
        }
        eta_f_next[i][s] = eta_f_theta(zeta_f[i], others);
      }
      // 2.7 outgoing position messages (memoized by exclusion)
      Message shared_product;
      bool have_shared = false;
      for (std::size_t s = 0; s < deg; ++s) {
        const bool exclude = tp[i][s] && annuli[i][s].has_value();
        if (!exclude && have_shared) {
          eta_phi_next[i][s] = shared_product;
          continue;
        }
        std::vector<PositionFactor> factors;
        factors.push_back(PositionFactor::mixture(zeta_psi[i]));
        for (std::size_t s2 = 0; s2 < deg; ++s2) {
          if (exclude && s2 == s) continue;
          if (!(tp[i][s2] && annuli[i][s2])) continue;
          const auto* centers =
              as_mixture(eta_phi_prev[adj[i][s2].peer][adj[i][s2].back]);
          if (!centers) continue;
          factors.push_back(
              PositionFactor::ring(*annuli[i][s2], *centers, zeta_fd[i][s2]));
        }
        RngStream rng(ctx.seed,
                      {ctx.run, static_cast<std::uint64_t>(i), ctx.step,
                       Draw::EtaPhiParticles,
                       exclude ? static_cast<std::uint64_t>(adj[i][s].peer) + 1
                               : 0,
                       static_cast<std::uint64_t>(q)});
        Message fitted;
        try {
          fitted = eta_phi_p_particles(factors, cfg.particle_budget, cfg.tau1,
                                       cfg.tau2, rng);
        } catch (const NumericalError& e) {
          throw NumericalError(e.op(), e.context() + ", " + link_context(i, static_cast<int>(s), q));
        }
        if (cfg.materialize_uninformative) fitted = materialize(fitted);
        eta_phi_next[i][s] = fitted;
        if (!exclude) {
          shared_product = eta_phi_next[i][s];
          have_shared = true;
        }
      }
      // 2.8 transmission accounting
      for (std::size_t s = 0; s < deg; ++s) {
        const int payload = comm_payload(eta_phi_next[i][s], eta_f_next[i][s]);
        result.comm_reals[i] += payload;
        result.max_link_payload = std::max(result.max_link_payload, payload);
      }
    }

    if (q < cfg.iterations) {
      if (hook) hook(q, compute_beliefs(q));
      std::swap(eta_f_prev, eta_f_next);
      std::swap(eta_phi_prev, eta_phi_next);
    }
  }

  // Steps 3-4: final beliefs (messages of iteration Q, sets of iteration Q)
  std::vector<AgentBeliefs> final_beliefs = compute_beliefs(cfg.iterations);
  beliefs = final_beliefs;
  if (hook) hook(cfg.iterations, final_beliefs);
  return result;
}

}  // namespace coslas

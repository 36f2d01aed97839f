#include "coslas/messages.hpp"

#include <cmath>

namespace coslas {

Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const auto& ev = es.eigenvalues();
  const double lo = ev.minCoeff();
  const double hi = ev.maxCoeff();
  Eigen::MatrixXd work = m;
  if (lo <= 0.0 || hi / lo > 1e12) {
    const double jitter = 1e-12 * m.trace() / static_cast<double>(m.rows());
    work += jitter * Eigen::MatrixXd::Identity(m.rows(), m.cols());
  }
  Eigen::LLT<Eigen::MatrixXd> llt(work);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("spd_inverse", "matrix not positive definite");
  }
  return llt.solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
}

Gaussian Gaussian::from_moments(const Eigen::VectorXd& mean,
                                const Eigen::MatrixXd& cov) {
  Gaussian g;
  g.form_ = Form::Covariance;
  g.vec_ = mean;
  g.mat_ = cov;
  return g;
}

Gaussian Gaussian::from_information(const Eigen::MatrixXd& lambda,
                                    const Eigen::VectorXd& eta) {
  Gaussian g;
  g.form_ = Form::Information;
  g.vec_ = eta;
  g.mat_ = lambda;
  return g;
}

Eigen::VectorXd Gaussian::mean() const {
  if (form_ == Form::Covariance) return vec_;
  return spd_inverse(mat_) * vec_;
}

Eigen::MatrixXd Gaussian::cov() const {
  if (form_ == Form::Covariance) return mat_;
  return spd_inverse(mat_);
}

Eigen::MatrixXd Gaussian::lambda() const {
  if (form_ == Form::Information) return mat_;
  return spd_inverse(mat_);
}

Eigen::VectorXd Gaussian::eta() const {
  if (form_ == Form::Information) return vec_;
  return spd_inverse(mat_) * vec_;
}

bool Gaussian::zero_information() const {
  return form_ == Form::Information && mat_.isZero(0.0);
}

double Gaussian::quad_information() const {
  if (form_ == Form::Information) {
    // mu^T lambda mu = eta^T pinv(lambda) eta; for lambda = P^T L P built from
    // a nonsingular 2-D message this equals the 2-D quadratic, computed via a
    // least-squares solve to stay valid for singular lambda.
    if (mat_.isZero(0.0)) return 0.0;
    Eigen::VectorXd mu =
        mat_.completeOrthogonalDecomposition().solve(vec_);
    return mu.dot(mat_ * mu);
  }
  const Eigen::VectorXd e = eta();
  return vec_.dot(e);
}

GaussianMixture::GaussianMixture(std::vector<MixtureComponent> comps)
    : comps_(std::move(comps)) {
  if (comps_.empty() || comps_.size() > 2) {
    throw NumericalError("GaussianMixture", "S must be 1 or 2");
  }
  double sum = 0.0;
  for (const auto& c : comps_) sum += c.weight;
  if (!(sum > 0.0) || !std::isfinite(sum)) {
    throw NumericalError("GaussianMixture", "weights not normalizable");
  }
  if (std::abs(sum - 1.0) > 1e-12) {
    for (auto& c : comps_) c.weight /= sum;
  }
}

Eigen::VectorXd GaussianMixture::mean() const {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(dim());
  for (const auto& c : comps_) m += c.weight * c.g.mean();
  return m;
}

Gaussian gaussian_product(const Gaussian& a, const Gaussian& b) {
  if (a.dim() != b.dim()) {
    throw NumericalError("gaussian_product", "dimension mismatch");
  }
  return Gaussian::from_information(a.lambda() + b.lambda(), a.eta() + b.eta());
}

double annulus_logeval(const AnnulusMixture& msg, const Eigen::Vector2d& p) {
  double best = -std::numeric_limits<double>::infinity();
  double acc = 0.0;
  // log-sum-exp over the (at most two) components
  double terms[2];
  int n = 0;
  for (const auto& c : msg.components) {
    const double rho = (p - c.center).norm();
    const double dev = msg.radius - rho;
    terms[n] = std::log(c.weight) - dev * dev / (2.0 * c.width_sq);
    if (terms[n] > best) best = terms[n];
    ++n;
  }
  if (n == 0 || !std::isfinite(best)) return -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) acc += std::exp(terms[i] - best);
  return best + std::log(acc);
}

double annulus_eval(const AnnulusMixture& msg, const Eigen::Vector2d& p) {
  return std::exp(annulus_logeval(msg, p));
}

Gaussian moment_match_mixture(const GaussianMixture& mix) {
  if (mix.size() == 1) {
    return Gaussian::from_moments(mix[0].g.mean(), mix[0].g.cov());
  }
  const int d = mix.dim();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (const auto& c : mix.components()) mean += c.weight * c.g.mean();
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& c : mix.components()) {
    const Eigen::VectorXd dm = c.g.mean() - mean;
    cov += c.weight * (c.g.cov() + dm * dm.transpose());
  }
  return Gaussian::from_moments(mean, cov);
}

double trace_of_cov(const Gaussian& g) {
  if (g.form() == Gaussian::Form::Covariance) return g.cov().trace();
  const Eigen::MatrixXd lam = g.lambda();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(lam);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (lo <= 0.0 || hi <= 0.0 || hi / lo > 1e14) {
    return std::numeric_limits<double>::infinity();
  }
  return spd_inverse(lam).trace();
}

bool is_zero_information(const Message& m) {
  if (std::holds_alternative<Uninformative>(m)) return true;
  if (const auto* g = std::get_if<Gaussian>(&m)) return g->zero_information();
  if (const auto* gm = std::get_if<GaussianMixture>(&m)) {
    for (const auto& c : gm->components()) {
      if (!c.g.zero_information()) return false;
    }
    return true;
  }
  return false;
}

namespace {
void append_gaussian(std::vector<double>& out, double w, const Gaussian& g) {
  out.push_back(w);
  const Eigen::VectorXd mu = g.zero_information()
                                 ? Eigen::VectorXd::Zero(g.dim())
                                 : g.mean();
  const Eigen::MatrixXd cov = g.zero_information()
                                  ? Eigen::MatrixXd::Zero(g.dim(), g.dim())
                                  : g.cov();
  for (int i = 0; i < mu.size(); ++i) out.push_back(mu[i]);
  for (int i = 0; i < cov.rows(); ++i)
    for (int j = i; j < cov.cols(); ++j) out.push_back(cov(i, j));
}
}  // namespace

std::vector<double> serialize_message(const Message& m) {
  std::vector<double> out;
  if (std::holds_alternative<Uninformative>(m)) {
    out = {0.0, 0.0};
  } else if (const auto* g = std::get_if<Gaussian>(&m)) {
    out = {1.0, 1.0};
    append_gaussian(out, 1.0, *g);
  } else if (const auto* gm = std::get_if<GaussianMixture>(&m)) {
    out = {2.0, static_cast<double>(gm->size())};
    for (const auto& c : gm->components()) append_gaussian(out, c.weight, c.g);
  } else if (const auto* am = std::get_if<AnnulusMixture>(&m)) {
    out = {3.0, static_cast<double>(am->components.size()), am->radius};
    for (const auto& c : am->components) {
      out.push_back(c.weight);
      out.push_back(c.center.x());
      out.push_back(c.center.y());
      out.push_back(c.width_sq);
    }
  }
  return out;
}

}  // namespace coslas

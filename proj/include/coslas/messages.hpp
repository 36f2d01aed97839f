// Message representations for the BP engine: Gaussians in covariance or
// information form, two-component mixtures, annulus mixtures, and the
// uninformative (constant) message.  All values are immutable in spirit:
// operations are pure and return new objects.

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace coslas {

// Thrown when a numerical operation cannot proceed; `op` names the operation
// and `context` carries scenario coordinates (link, iteration, ...).
class NumericalError : public std::runtime_error {
 public:
  NumericalError(std::string op, std::string context)
      : std::runtime_error("numerical failure in " + op +
                           (context.empty() ? "" : " [" + context + "]")),
        op_(std::move(op)),
        context_(std::move(context)) {}
  const std::string& op() const { return op_; }
  const std::string& context() const { return context_; }

 private:
  std::string op_, context_;
};

// SPD inverse with the conditioning guard used project-wide: if the matrix is
// indefinite or its eigenvalue ratio exceeds 1e12, a jitter of
// 1e-12 * trace/dim is added to the diagonal before inverting.
Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& m);

// Gaussian over R^d, tagged covariance or information form.  Information form
// stores (lambda, eta = lambda * mu) and permits singular lambda.
class Gaussian {
 public:
  enum class Form { Covariance, Information };

  Gaussian() = default;
  static Gaussian from_moments(const Eigen::VectorXd& mean,
                               const Eigen::MatrixXd& cov);
  static Gaussian from_information(const Eigen::MatrixXd& lambda,
                                   const Eigen::VectorXd& eta);

  Form form() const { return form_; }
  int dim() const { return static_cast<int>(vec_.size()); }

  // Moment accessors; converting a singular information form throws.
  Eigen::VectorXd mean() const;
  Eigen::MatrixXd cov() const;
  // Information accessors; always available.
  Eigen::MatrixXd lambda() const;
  Eigen::VectorXd eta() const;

  bool zero_information() const;

  // mu^T lambda mu; well defined also for singular lambda.
  double quad_information() const;

 private:
  Form form_ = Form::Covariance;
  Eigen::VectorXd vec_;  // mean or eta
  Eigen::MatrixXd mat_;  // cov or lambda
};

// 1-D Gaussian used for the distance messages.
struct Gaussian1 {
  double mean = 0.0;
  double var = 1.0;
};

struct MixtureComponent {
  double weight = 1.0;
  Gaussian g;
};

// 1- or 2-component Gaussian mixture with normalized weights.
class GaussianMixture {
 public:
  GaussianMixture() = default;
  explicit GaussianMixture(std::vector<MixtureComponent> comps);

  int size() const { return static_cast<int>(comps_.size()); }
  const MixtureComponent& operator[](int s) const { return comps_[s]; }
  const std::vector<MixtureComponent>& components() const { return comps_; }

  int dim() const { return comps_.empty() ? 0 : comps_.front().g.dim(); }

  // Mean/covariance of the mixture as a whole (moment match).
  Eigen::VectorXd mean() const;

 private:
  std::vector<MixtureComponent> comps_;
};

// Annulus mixture: shared radius r, per-component center, squared width and
// weight.  Evaluates to sum_s w_s exp(-(r - |p - mu_s|)^2 / (2 sigma_s^2)).
struct AnnulusComponent {
  double weight = 1.0;
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  double width_sq = 1.0;
};

struct AnnulusMixture {
  double radius = 0.0;
  std::vector<AnnulusComponent> components;
};

struct Uninformative {};

using Message = std::variant<Uninformative, Gaussian, GaussianMixture, AnnulusMixture>;

// Information-form product of two Gaussians.
Gaussian gaussian_product(const Gaussian& a, const Gaussian& b);

double annulus_eval(const AnnulusMixture& msg, const Eigen::Vector2d& p);
double annulus_logeval(const AnnulusMixture& msg, const Eigen::Vector2d& p);

// Collapse a mixture to a single Gaussian preserving mean and covariance.
Gaussian moment_match_mixture(const GaussianMixture& mix);

// Trace of the covariance; +infinity when the information form is singular,
// which downstream censoring treats as uninformative.
double trace_of_cov(const Gaussian& g);

// True for Uninformative and for messages whose information content is
// exactly zero; such messages act as the constant function in every product.
bool is_zero_information(const Message& m);

// Flat numeric record for the run-trace dump: type tag, S, then parameters
// in the order weight, mean, upper-triangular covariance per component
// (annulus: radius, then weight, center, width^2 per component).
std::vector<double> serialize_message(const Message& m);

}  // namespace coslas

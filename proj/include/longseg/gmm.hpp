#pragma once

#include <Eigen/Dense>
#include <vector>

#include "longseg/errors.hpp"
#include "longseg/volume.hpp"

namespace longseg {

/// Per-class Gaussian intensity parameters in log-intensity space. Classes are
/// indexed like atlas channels: 0..K-1 anatomical (0 = background), K lesion.
struct GaussianParams {
  std::vector<Eigen::VectorXd> mean;
  std::vector<Eigen::MatrixXd> cov;

  int num_classes() const { return static_cast<int>(mean.size()); }
  int num_channels() const { return mean.empty() ? 0 : static_cast<int>(mean[0].size()); }
};

/// Separable cosine basis of degree G per axis, P = (G+1)^3 functions.
struct BiasBasis {
  int degree = 2;
  std::array<int, 3> dims{};

  int count() const { return (degree + 1) * (degree + 1) * (degree + 1); }
  /// Basis values at one voxel center, length count().
  Eigen::VectorXd eval(int x, int y, int z) const;
  /// Basis values for every voxel, voxels x count(), x-fastest voxel order.
  Eigen::MatrixXd eval_all() const;
};

/// Additive bias field: per-channel linear combination of basis functions.
struct BiasField {
  BiasBasis basis;
  Eigen::MatrixXd coeffs;  // count() x N

  /// Bias value per voxel per channel, voxels x N.
  Eigen::MatrixXd field(const Eigen::MatrixXd& phi) const { return phi * coeffs; }
};

/// Normal-inverse-Wishart pseudo-observation prior for one class. strength = 0
/// means flat (no prior); strength > 0 requires strength > N + 2 so that the
/// inverse-Wishart degrees of freedom strength - N - 2 stay positive.
struct NIWPrior {
  Eigen::VectorXd mean0;
  Eigen::MatrixXd cov0;
  double strength = 0.0;

  void validate(int channels) const;
};

struct EStepResult {
  Eigen::MatrixXd resp;  // voxels x classes
  double log_evidence = 0.0;
};

/// Intensity matrix (voxels x N) from a log-transformed volume, x-fastest.
Eigen::MatrixXd intensity_matrix(const Volume& d);

/// Per-voxel class log-likelihoods ln N(d_i | mu_k + bias_i, Sigma_k),
/// voxels x classes. Throws NumericError naming the class on singular Sigma.
Eigen::MatrixXd class_log_likelihoods(const Eigen::MatrixXd& data,
                                      const Eigen::MatrixXd& bias_values,
                                      const GaussianParams& params);

/// Responsibilities r_ik proportional to prior_ik * N(d_i | ...), normalized
/// per voxel, and the log evidence sum_i ln sum_k prior_ik N(...).
EStepResult e_step(const Volume& d, const Volume& priors,
                   const GaussianParams& params, const BiasField& bias);

struct MStepResult {
  GaussianParams params;
  /// Classes whose responsibility mass was ~0 under a flat prior; previous
  /// parameters were kept for them.
  std::vector<std::uint8_t> empty;
};

/// MAP M-step under per-class NIW pseudo-observation priors; strength 0 gives
/// the maximum-likelihood (flat prior) update. prev supplies parameters to
/// keep for empty flat classes (may be null: empty class throws).
MStepResult m_step_niw(const Eigen::MatrixXd& data, const Eigen::MatrixXd& resp,
                       const Eigen::MatrixXd& bias_values,
                       const std::vector<NIWPrior>& priors,
                       const GaussianParams* prev);

/// Flat-prior M-step: m_step_niw with all strengths zero.
MStepResult m_step_flat(const Eigen::MatrixXd& data, const Eigen::MatrixXd& resp,
                        const Eigen::MatrixXd& bias_values,
                        const GaussianParams* prev);

/// Exact weighted-least-squares bias update solving the coupled normal
/// equations across channels; falls back to a ridge (1e-8) solve when the
/// normal matrix is rank-deficient (flag set on the result).
struct BiasUpdateResult {
  BiasField bias;
  bool regularized = false;
};
BiasUpdateResult update_bias(const Eigen::MatrixXd& data,
                             const Eigen::MatrixXd& resp,
                             const Eigen::MatrixXd& phi,
                             const GaussianParams& params);

struct LesionPriorConfig {
  int wm_class = -1;
  Eigen::VectorXd delta;   // per-channel mean offset from white matter
  double rho_sigma = 1.0;  // covariance scale relative to white matter
  double rho_w = 50.0;     // pseudo-observation count
};

/// Weak conditional prior for the lesion class, centered on the designated
/// white-matter parameters.
NIWPrior lesion_conditional_prior(const GaussianParams& params,
                                  const LesionPriorConfig& config);

/// Fully normalized log density of the implemented NIW coupling:
///   ln N(mu | mean0, Sigma/strength) + ln IW(Sigma | strength*cov0, strength-N-2).
/// Returns 0 for strength == 0 (flat).
double log_niw(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma,
               const NIWPrior& prior);

/// Symmetrize and jitter a covariance to keep it positive definite.
Eigen::MatrixXd make_spd(Eigen::MatrixXd sigma);

}  // namespace longseg

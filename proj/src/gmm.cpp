#include "longseg/gmm.hpp"

#include <cmath>
#include <numbers>

namespace longseg {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;

double log_multigamma(int n, double a) {
  double s = 0.25 * n * (n - 1) * std::log(std::numbers::pi);
  for (int j = 1; j <= n; ++j) s += std::lgamma(a + (1.0 - j) / 2.0);
  return s;
}

}  // namespace

Eigen::VectorXd BiasBasis::eval(int x, int y, int z) const {
  const int g1 = degree + 1;
  Eigen::VectorXd fx(g1), fy(g1), fz(g1);
  for (int n = 0; n < g1; ++n) {
    fx[n] = std::cos(std::numbers::pi * n * (x + 0.5) / dims[0]);
    fy[n] = std::cos(std::numbers::pi * n * (y + 0.5) / dims[1]);
    fz[n] = std::cos(std::numbers::pi * n * (z + 0.5) / dims[2]);
  }
  Eigen::VectorXd phi(count());
  int p = 0;
  for (int c = 0; c < g1; ++c)
    for (int b = 0; b < g1; ++b)
      for (int a = 0; a < g1; ++a) phi[p++] = fx[a] * fy[b] * fz[c];
  return phi;
}

Eigen::MatrixXd BiasBasis::eval_all() const {
  const std::size_t nvox =
      static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  Eigen::MatrixXd phi(nvox, count());
  std::size_t i = 0;
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) phi.row(i++) = eval(x, y, z).transpose();
  return phi;
}

void NIWPrior::validate(int channels) const {
  if (strength == 0.0) return;
  if (strength < 0.0 || strength <= channels + 2)
    throw ConfigError("NIW strength must be 0 or > N + 2");
  if (mean0.size() != channels || cov0.rows() != channels || cov0.cols() != channels)
    throw ConfigError("NIW prior dimension mismatch");
  Eigen::LLT<Eigen::MatrixXd> llt(cov0);
  if (llt.info() != Eigen::Success)
    throw ConfigError("NIW prior covariance is not positive definite");
}

Eigen::MatrixXd intensity_matrix(const Volume& d) {
  Eigen::MatrixXd m(d.voxels(), d.nc);
  for (int c = 0; c < d.nc; ++c)
    for (std::size_t i = 0; i < d.voxels(); ++i)
      m(i, c) = d.data[i + d.voxels() * c];
  return m;
}

Eigen::MatrixXd make_spd(Eigen::MatrixXd sigma) {
  sigma = 0.5 * (sigma + sigma.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sigma);
  const double min_eig = es.eigenvalues().minCoeff();
  if (min_eig < 1e-12) {
    const int n = static_cast<int>(sigma.rows());
    const double jitter =
        1e-10 * std::max(sigma.trace(), 1.0) / n + std::max(0.0, -min_eig) + 1e-12;
    sigma += jitter * Eigen::MatrixXd::Identity(n, n);
  }
  return sigma;
}

Eigen::MatrixXd class_log_likelihoods(const Eigen::MatrixXd& data,
                                      const Eigen::MatrixXd& bias_values,
                                      const GaussianParams& params) {
  const Eigen::Index nvox = data.rows();
  const int nch = static_cast<int>(data.cols());
  const int nclass = params.num_classes();
  Eigen::MatrixXd ll(nvox, nclass);
  const Eigen::MatrixXd corrected = data - bias_values;
  for (int k = 0; k < nclass; ++k) {
    Eigen::LLT<Eigen::MatrixXd> llt(params.cov[k]);
    if (llt.info() != Eigen::Success)
      throw NumericError("singular covariance for class " + std::to_string(k));
    double log_det = 0.0;
    for (int c = 0; c < nch; ++c)
      log_det += 2.0 * std::log(llt.matrixL()(c, c));
    const double norm = -0.5 * (nch * kLogTwoPi + log_det);
    Eigen::MatrixXd centered =
        (corrected.rowwise() - params.mean[k].transpose()).transpose();
    llt.matrixL().solveInPlace(centered);
    ll.col(k) = norm - 0.5 * centered.colwise().squaredNorm().transpose().array();
  }
  return ll;
}

EStepResult e_step(const Volume& d, const Volume& priors,
                   const GaussianParams& params, const BiasField& bias) {
  if (priors.nc != params.num_classes())
    throw DataError("priors channel count does not match class count");
  if (d.nc != params.num_channels())
    throw DataError("data channel count does not match parameter dimension");

  const Eigen::MatrixXd data = intensity_matrix(d);
  const Eigen::MatrixXd phi = bias.basis.eval_all();
  const Eigen::MatrixXd ll = class_log_likelihoods(data, bias.field(phi), params);

  const std::size_t nvox = d.voxels();
  const int nclass = params.num_classes();
  EStepResult out;
  out.resp.resize(nvox, nclass);
  double log_ev = 0.0;
  Eigen::VectorXd row(nclass);
  for (std::size_t i = 0; i < nvox; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < nclass; ++k) {
      const double p = priors.data[i + nvox * k];
      row[k] = p > 0.0 ? std::log(p) + ll(i, k)
                       : -std::numeric_limits<double>::infinity();
      best = std::max(best, row[k]);
    }
    if (!std::isfinite(best))
      throw NumericError("zero total prior mass at voxel " + std::to_string(i));
    double sum = 0.0;
    for (int k = 0; k < nclass; ++k) {
      row[k] = std::exp(row[k] - best);
      sum += row[k];
    }
    out.resp.row(i) = row.transpose() / sum;
    log_ev += best + std::log(sum);
  }
  out.log_evidence = log_ev;
  return out;
}

MStepResult m_step_niw(const Eigen::MatrixXd& data, const Eigen::MatrixXd& resp,
                       const Eigen::MatrixXd& bias_values,
                       const std::vector<NIWPrior>& priors,
                       const GaussianParams* prev) {
  const int nclass = static_cast<int>(resp.cols());
  const int nch = static_cast<int>(data.cols());
  if (static_cast<int>(priors.size()) != nclass)
    throw ConfigError("m_step_niw: one prior per class required");
  for (const auto& p : priors) p.validate(nch);

  const Eigen::MatrixXd corrected = data - bias_values;
  MStepResult out;
  out.params.mean.resize(nclass);
  out.params.cov.resize(nclass);
  out.empty.assign(nclass, 0);

  for (int k = 0; k < nclass; ++k) {
    const Eigen::VectorXd w = resp.col(k);
    const double wk = w.sum();
    const double p0 = priors[k].strength;

    if (wk <= 1e-10 && p0 == 0.0) {
      if (!prev) throw FitError("empty class " + std::to_string(k) +
                                " with flat prior and no fallback parameters");
      out.params.mean[k] = prev->mean[k];
      out.params.cov[k] = prev->cov[k];
      out.empty[k] = 1;
      continue;
    }

    Eigen::VectorXd dbar = Eigen::VectorXd::Zero(nch);
    Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(nch, nch);
    if (wk > 0.0) {
      dbar = corrected.transpose() * w / wk;
      const Eigen::MatrixXd centered = corrected.rowwise() - dbar.transpose();
      scatter = centered.transpose() * w.asDiagonal() * centered;
    }

    if (p0 == 0.0) {
      out.params.mean[k] = dbar;
      out.params.cov[k] = make_spd(scatter / wk);
    } else {
      // MAP under the NIW pseudo-observation prior; the (wk + p0) covariance
      // divisor comes from the joint mode with dof = p0 - N - 2, which makes
      // the wk -> 0 limit return cov0 exactly.
      const Eigen::VectorXd diff = dbar - priors[k].mean0;
      out.params.mean[k] = (wk * dbar + p0 * priors[k].mean0) / (wk + p0);
      Eigen::MatrixXd num = p0 * priors[k].cov0 + scatter +
                            (wk * p0 / (wk + p0)) * diff * diff.transpose();
      out.params.cov[k] = make_spd(num / (wk + p0));
    }
  }
  return out;
}

MStepResult m_step_flat(const Eigen::MatrixXd& data, const Eigen::MatrixXd& resp,
                        const Eigen::MatrixXd& bias_values,
                        const GaussianParams* prev) {
  std::vector<NIWPrior> flat(resp.cols());
  return m_step_niw(data, resp, bias_values, flat, prev);
}

BiasUpdateResult update_bias(const Eigen::MatrixXd& data,
                             const Eigen::MatrixXd& resp,
                             const Eigen::MatrixXd& phi,
                             const GaussianParams& params) {
  const int nclass = static_cast<int>(resp.cols());
  const int nch = static_cast<int>(data.cols());
  const int nbasis = static_cast<int>(phi.cols());
  const int dim = nbasis * nch;

  // Normal equations for vec(C) with unknown order (p, n) -> p * N + n:
  //   A = sum_k G_k (x) Sigma_k^{-1},  G_k = Phi^T diag(r_k) Phi
  //   rhs = sum_k Phi^T diag(r_k) (D - 1 mu_k^T) Sigma_k^{-1}
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::MatrixXd rhs_mat = Eigen::MatrixXd::Zero(nbasis, nch);
  for (int k = 0; k < nclass; ++k) {
    Eigen::LLT<Eigen::MatrixXd> llt(params.cov[k]);
    if (llt.info() != Eigen::Success)
      throw NumericError("singular covariance for class " + std::to_string(k));
    const Eigen::MatrixXd prec = llt.solve(Eigen::MatrixXd::Identity(nch, nch));
    const Eigen::MatrixXd phi_w = resp.col(k).asDiagonal() * phi;
    const Eigen::MatrixXd gk = phi.transpose() * phi_w;
    for (int p = 0; p < nbasis; ++p)
      for (int q = 0; q < nbasis; ++q)
        A.block(p * nch, q * nch, nch, nch) += gk(p, q) * prec;
    rhs_mat += phi_w.transpose() *
               (data.rowwise() - params.mean[k].transpose()) * prec;
  }

  Eigen::VectorXd rhs(dim);
  for (int p = 0; p < nbasis; ++p) rhs.segment(p * nch, nch) = rhs_mat.row(p);

  BiasUpdateResult out;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
  Eigen::VectorXd sol;
  if (lu.rank() < dim) {
    out.regularized = true;
    sol = (A + 1e-8 * Eigen::MatrixXd::Identity(dim, dim)).ldlt().solve(rhs);
  } else {
    sol = lu.solve(rhs);
  }

  out.bias.coeffs.resize(nbasis, nch);
  for (int p = 0; p < nbasis; ++p)
    out.bias.coeffs.row(p) = sol.segment(p * nch, nch);
  return out;
}

NIWPrior lesion_conditional_prior(const GaussianParams& params,
                                  const LesionPriorConfig& config) {
  if (config.wm_class < 0 || config.wm_class >= params.num_classes())
    throw ConfigError("lesion prior: white-matter class not designated");
  const int nch = params.num_channels();
  NIWPrior prior;
  prior.mean0 = params.mean[config.wm_class];
  if (config.delta.size() > 0) {
    if (config.delta.size() != nch)
      throw ConfigError("lesion prior delta dimension mismatch");
    prior.mean0 += config.delta;
  }
  prior.cov0 = config.rho_sigma * params.cov[config.wm_class];
  prior.strength = config.rho_w;
  prior.validate(nch);
  return prior;
}

double log_niw(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma,
               const NIWPrior& prior) {
  const double p0 = prior.strength;
  if (p0 == 0.0) return 0.0;
  const int n = static_cast<int>(mu.size());
  const double nu = p0 - n - 2.0;

  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw NumericError("log_niw: singular covariance");
  double log_det_sigma = 0.0;
  for (int c = 0; c < n; ++c) log_det_sigma += 2.0 * std::log(llt.matrixL()(c, c));

  const Eigen::MatrixXd psi = p0 * prior.cov0;
  const double log_det_psi =
      Eigen::LLT<Eigen::MatrixXd>(psi).matrixL().toDenseMatrix().diagonal().array().log().sum() * 2.0;

  // ln N(mu | mean0, sigma / p0)
  const Eigen::VectorXd diff = mu - prior.mean0;
  const double quad = diff.dot(llt.solve(diff));
  double out = -0.5 * n * kLogTwoPi + 0.5 * n * std::log(p0) -
               0.5 * log_det_sigma - 0.5 * p0 * quad;

  // ln IW(sigma | psi, nu)
  out += 0.5 * nu * log_det_psi - 0.5 * nu * n * std::log(2.0) -
         log_multigamma(n, 0.5 * nu) - 0.5 * (nu + n + 1.0) * log_det_sigma -
         0.5 * llt.solve(psi).trace();
  return out;
}

}  // namespace longseg

#include "longseg/fit.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "longseg/optim.hpp"

namespace longseg {

namespace {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;

Eigen::VectorXd flatten(const NodePositions& x) {
  Eigen::VectorXd v(x.size());
  for (Eigen::Index m = 0; m < x.rows(); ++m)
    v.segment(m * 3, 3) = x.row(m).transpose();
  return v;
}

NodePositions unflatten(const Eigen::VectorXd& v) {
  NodePositions x(v.size() / 3, 3);
  for (Eigen::Index m = 0; m < x.rows(); ++m)
    x.row(m) = v.segment(m * 3, 3).transpose();
  return x;
}

/// Atlas data term sum_i ln sum_k prior_ik(x) * lik_ik and its gradient
/// w.r.t. node positions. lik is passed shifted per voxel (lik = exp(ll - m))
/// together with the shift vector, so the value is exact in log space.
class MeshDataTerm {
 public:
  MeshDataTerm(const TetMeshAtlas& atlas, std::array<int, 3> dims,
               const Eigen::MatrixXd& lik, const Eigen::VectorXd& shift)
      : atlas_(atlas), dims_(dims), lik_(lik), shift_(shift) {}

  /// Returns -inf on a folded mesh. grad may be null.
  double eval(const NodePositions& x, NodePositions* grad) const {
    const std::size_t nvox =
        static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
    const int nch = atlas_.num_channels();
    if (grad) grad->setZero(x.rows(), 3);
    std::vector<std::uint8_t> assigned(nvox, 0);
    double value = 0.0;

    for (std::size_t d = 0; d < atlas_.tets.size(); ++d) {
      const auto& tet = atlas_.tets[d];
      Mat3 E;
      for (int j = 0; j < 3; ++j)
        E.col(j) = (x.row(tet[j + 1]) - x.row(tet[0])).transpose();
      const double det = E.determinant();
      if (!(det > 0.0)) return -std::numeric_limits<double>::infinity();
      const Mat3 B = E.inverse();
      const Vec3 v0 = x.row(tet[0]).transpose();

      // Per-tet alpha differences: G.col(k) = B^T (alpha_mk - alpha_0k).
      Eigen::Matrix<double, 3, Eigen::Dynamic> gk(3, nch);
      if (grad) {
        Eigen::Matrix<double, 3, Eigen::Dynamic> adiff(3, nch);
        for (int j = 0; j < 3; ++j)
          adiff.row(j) = atlas_.alphas.row(tet[j + 1]) - atlas_.alphas.row(tet[0]);
        gk = B.transpose() * adiff;
      }

      Vec3 lo = v0, hi = v0;
      for (int j = 1; j < 4; ++j) {
        const Vec3 v = x.row(tet[j]).transpose();
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
      }
      const int x0 = std::max(0, static_cast<int>(std::ceil(lo[0] - 1e-9)));
      const int y0 = std::max(0, static_cast<int>(std::ceil(lo[1] - 1e-9)));
      const int z0 = std::max(0, static_cast<int>(std::ceil(lo[2] - 1e-9)));
      const int x1 = std::min(dims_[0] - 1, static_cast<int>(std::floor(hi[0] + 1e-9)));
      const int y1 = std::min(dims_[1] - 1, static_cast<int>(std::floor(hi[1] + 1e-9)));
      const int z1 = std::min(dims_[2] - 1, static_cast<int>(std::floor(hi[2] + 1e-9)));

      for (int zz = z0; zz <= z1; ++zz)
        for (int yy = y0; yy <= y1; ++yy)
          for (int xx = x0; xx <= x1; ++xx) {
            const std::size_t vi =
                static_cast<std::size_t>(xx) +
                static_cast<std::size_t>(dims_[0]) *
                    (static_cast<std::size_t>(yy) +
                     static_cast<std::size_t>(dims_[1]) * zz);
            if (assigned[vi]) continue;
            const Vec3 lam123 = B * (Vec3(xx, yy, zz) - v0);
            const double lam0 = 1.0 - lam123.sum();
            if (lam123.minCoeff() < -1e-9 || lam0 < -1e-9) continue;
            assigned[vi] = 1;

            double s = 0.0;
            Eigen::VectorXd prior(nch);
            for (int c = 0; c < nch; ++c) {
              double p = lam0 * atlas_.alphas(tet[0], c);
              for (int j = 0; j < 3; ++j)
                p += lam123[j] * atlas_.alphas(tet[j + 1], c);
              prior[c] = std::max(p, 0.0);
              s += prior[c] * lik_(vi, c);
            }
            if (!(s > 0.0)) return -std::numeric_limits<double>::infinity();
            value += shift_[vi] + std::log(s);

            if (grad) {
              const Vec3 q = gk * (lik_.row(vi).transpose() / s);
              grad->row(tet[0]) -= lam0 * q.transpose();
              for (int j = 0; j < 3; ++j)
                grad->row(tet[j + 1]) -= lam123[j] * q.transpose();
            }
          }
    }

    // Uncovered voxels are pure background; constant w.r.t. x as long as they
    // stay outside, so no gradient contribution.
    for (std::size_t vi = 0; vi < nvox; ++vi)
      if (!assigned[vi]) value += shift_[vi] + std::log(lik_(vi, 0));
    return value;
  }

 private:
  const TetMeshAtlas& atlas_;
  std::array<int, 3> dims_;
  const Eigen::MatrixXd& lik_;
  const Eigen::VectorXd& shift_;
};

struct EStepCore {
  Eigen::MatrixXd resp;
  double log_evidence = 0.0;
};

EStepCore e_step_from_ll(const Volume& priors, const Eigen::MatrixXd& ll) {
  const std::size_t nvox = priors.voxels();
  const int nclass = priors.nc;
  EStepCore out;
  out.resp.resize(nvox, nclass);
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
    out.log_evidence += best + std::log(sum);
  }
  return out;
}

double log_evidence_from_ll(const Volume& priors, const Eigen::MatrixXd& ll) {
  const std::size_t nvox = priors.voxels();
  const int nclass = priors.nc;
  double log_ev = 0.0;
  for (std::size_t i = 0; i < nvox; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < nclass; ++k) {
      const double p = priors.data[i + nvox * k];
      if (p > 0.0) best = std::max(best, std::log(p) + ll(i, k));
    }
    double sum = 0.0;
    for (int k = 0; k < nclass; ++k) {
      const double p = priors.data[i + nvox * k];
      if (p > 0.0) sum += std::exp(std::log(p) + ll(i, k) - best);
    }
    log_ev += best + std::log(sum);
  }
  return log_ev;
}

double prior_terms(const GaussianParams& params,
                   const std::vector<NIWPrior>* anat_priors,
                   const NIWPrior& lesion_prior, int lesion_channel) {
  double s = 0.0;
  if (anat_priors) {
    for (int k = 0; k < lesion_channel; ++k)
      s += log_niw(params.mean[k], params.cov[k], (*anat_priors)[k]);
  }
  s += log_niw(params.mean[lesion_channel], params.cov[lesion_channel],
               lesion_prior);
  return s;
}

}  // namespace

CrossFitResult fit_model(const Volume& d, const TetMeshAtlas& atlas,
                         const NodePositions& anchor, double stiffness,
                         const std::vector<NIWPrior>* anat_priors,
                         const CrossFitResult* init, const CrossHyper& hyper) {
  d.validate();
  const std::array<int, 3> dims{d.nx, d.ny, d.nz};
  const int nclass = atlas.num_channels();
  const int lesion_ch = atlas.lesion_channel;
  if (anat_priors && static_cast<int>(anat_priors->size()) != lesion_ch)
    throw ConfigError("fit_model: expected one coupling prior per anatomical class");

  const Eigen::MatrixXd data = intensity_matrix(d);
  const int nch = static_cast<int>(data.cols());

  CrossFitResult st;
  if (init) {
    st.params = init->params;
    st.bias = init->bias;
    st.x_hat = init->x_hat;
    st.lesion_prior = init->lesion_prior;
  } else {
    st.x_hat = anchor;
    st.bias.basis = BiasBasis{hyper.bias_degree, dims};
    st.bias.coeffs = Eigen::MatrixXd::Zero(st.bias.basis.count(), nch);
  }
  if (st.bias.basis.degree != hyper.bias_degree && !init)
    st.bias.basis.degree = hyper.bias_degree;

  const Eigen::MatrixXd phi = st.bias.basis.eval_all();
  Volume priors = rasterize_priors(atlas, st.x_hat, dims);

  if (!init) {
    // Initial parameters: priors as soft assignments, global stats as the
    // fallback for classes with no prior mass.
    // Hardened: each voxel contributes only to its argmax-prior class. Using
    // the raw priors instead lets the spatial tails dominate, which drags
    // every class mean toward the global statistics.
    Eigen::MatrixXd prior_resp =
        Eigen::MatrixXd::Zero(priors.voxels(), nclass);
    for (std::size_t i = 0; i < priors.voxels(); ++i) {
      int best = 0;
      for (int k = 1; k < nclass; ++k)
        if (priors.data[i + priors.voxels() * k] >
            priors.data[i + priors.voxels() * best])
          best = k;
      prior_resp(i, best) = priors.data[i + priors.voxels() * best];
    }
    GaussianParams global;
    const Eigen::VectorXd gmean = data.colwise().mean();
    const Eigen::MatrixXd centered = data.rowwise() - gmean.transpose();
    const Eigen::MatrixXd gcov =
        make_spd(centered.transpose() * centered / static_cast<double>(data.rows()));
    global.mean.assign(nclass, gmean);
    global.cov.assign(nclass, gcov);
    auto ms = m_step_flat(data, prior_resp, st.bias.field(phi), &global);
    st.params = ms.params;
    st.lesion_prior = lesion_conditional_prior(st.params, hyper.lesion);
    if (st.lesion_prior.strength > 0.0) {
      // Start the lesion Gaussian at its conditional-prior anchor rather than
      // the raster-weighted flat estimate: the lesion raster spreads over the
      // whole host region, so the flat estimate is a diffuse copy of the
      // surrounding tissue and EM cannot escape that basin.
      st.params.mean[lesion_ch] = st.lesion_prior.mean0;
      st.params.cov[lesion_ch] = st.lesion_prior.cov0;
    }
  }

  auto objective_at = [&](const Volume& pr) {
    const Eigen::MatrixXd ll =
        class_log_likelihoods(data, st.bias.field(phi), st.params);
    return log_evidence_from_ll(pr, ll) -
           stiffness * deformation_energy(st.x_hat, anchor, atlas.tets,
                                          atlas.nodes_ref) +
           prior_terms(st.params, anat_priors, st.lesion_prior, lesion_ch);
  };
  auto track = [&](const char* label) {
    if (hyper.track_steps) st.step_trace.emplace_back(label, objective_at(priors));
  };

  double prev_obj = -std::numeric_limits<double>::infinity();
  for (int outer = 0; outer < hyper.max_outer; ++outer) {
    // (a) E-step
    const Eigen::MatrixXd ll =
        class_log_likelihoods(data, st.bias.field(phi), st.params);
    auto es = e_step_from_ll(priors, ll);
    st.resp = std::move(es.resp);
    st.log_evidence = es.log_evidence;

    const double obj =
        es.log_evidence -
        stiffness *
            deformation_energy(st.x_hat, anchor, atlas.tets, atlas.nodes_ref) +
        prior_terms(st.params, anat_priors, st.lesion_prior, lesion_ch);
    st.objective_trace.push_back(obj);
    st.final_objective = obj;
    if (outer > 0 && obj - prev_obj <= hyper.tol * (std::abs(prev_obj) + 1.0)) {
      st.converged = true;
      break;
    }
    prev_obj = obj;

    // (b) Gaussian M-step: coupled (or flat) anatomical classes, NIW lesion.
    std::vector<NIWPrior> class_priors(nclass);
    if (anat_priors)
      for (int k = 0; k < lesion_ch; ++k) class_priors[k] = (*anat_priors)[k];
    class_priors[lesion_ch] = st.lesion_prior;
    auto ms = m_step_niw(data, st.resp, st.bias.field(phi), class_priors, &st.params);
    st.params = std::move(ms.params);
    st.empty_flags = std::move(ms.empty);
    track("m_step");

    // (c) bias update. Refresh the responsibilities first: the EM bound only
    // guarantees an objective increase for a block update whose
    // responsibilities were computed at the current parameters, and the
    // M-step just changed them.
    st.resp = e_step_from_ll(priors,
                             class_log_likelihoods(data, st.bias.field(phi),
                                                   st.params))
                  .resp;
    st.bias.coeffs = update_bias(data, st.resp, phi, st.params).bias.coeffs;
    track("bias");

    // (d) mesh step
    {
      const Eigen::MatrixXd ll2 =
          class_log_likelihoods(data, st.bias.field(phi), st.params);
      const Eigen::VectorXd shift = ll2.rowwise().maxCoeff();
      const Eigen::MatrixXd lik = (ll2.colwise() - shift).array().exp();
      MeshDataTerm term(atlas, dims, lik, shift);

      auto fn = [&](const Eigen::VectorXd& xv, Eigen::VectorXd* g) {
        const NodePositions x = unflatten(xv);
        const double energy =
            deformation_energy(x, anchor, atlas.tets, atlas.nodes_ref);
        if (!std::isfinite(energy)) return std::numeric_limits<double>::infinity();
        NodePositions dgrad;
        const double dval = term.eval(x, g ? &dgrad : nullptr);
        if (!std::isfinite(dval)) return std::numeric_limits<double>::infinity();
        if (g) {
          const NodePositions egrad =
              deformation_gradient(x, anchor, atlas.tets, atlas.nodes_ref);
          *g = flatten((stiffness * egrad - dgrad).eval());
        }
        return stiffness * energy - dval;
      };

      LbfgsOptions opts;
      opts.memory = hyper.mesh_memory;
      opts.max_iters = hyper.mesh_max_iters;
      opts.grad_tol = 1e-7;
      auto res = lbfgs_minimize(fn, flatten(st.x_hat), opts);
      // Accepted L-BFGS iterates never increase the (negated) objective, so
      // taking res.x is safe even when the search stalls immediately.
      st.x_hat = unflatten(res.x);
      priors = rasterize_priors(atlas, st.x_hat, dims);
    }
    track("mesh");
  }

  // Leave responsibilities and evidence consistent with the final parameters.
  {
    const Eigen::MatrixXd ll =
        class_log_likelihoods(data, st.bias.field(phi), st.params);
    auto es = e_step_from_ll(priors, ll);
    st.resp = std::move(es.resp);
    st.log_evidence = es.log_evidence;
    st.final_objective =
        es.log_evidence -
        stiffness *
            deformation_energy(st.x_hat, anchor, atlas.tets, atlas.nodes_ref) +
        prior_terms(st.params, anat_priors, st.lesion_prior, lesion_ch);
    if (st.objective_trace.empty() ||
        st.final_objective > st.objective_trace.back())
      st.objective_trace.push_back(st.final_objective);
  }
  return st;
}

CrossFitResult fit_cross(const Volume& d, const TetMeshAtlas& atlas,
                         const CrossHyper& hyper) {
  return fit_model(d, atlas, atlas.nodes_ref, hyper.k_stiffness, nullptr,
                   nullptr, hyper);
}

double mesh_step_objective(const Volume& d, const TetMeshAtlas& atlas,
                           const NodePositions& x, const NodePositions& anchor,
                           double stiffness, const GaussianParams& params,
                           const BiasField& bias, NodePositions* grad) {
  const Eigen::MatrixXd data = intensity_matrix(d);
  const Eigen::MatrixXd phi = bias.basis.eval_all();
  const Eigen::MatrixXd ll = class_log_likelihoods(data, bias.field(phi), params);
  const Eigen::VectorXd shift = ll.rowwise().maxCoeff();
  const Eigen::MatrixXd lik = (ll.colwise() - shift).array().exp();
  MeshDataTerm term(atlas, {d.nx, d.ny, d.nz}, lik, shift);

  const double energy = deformation_energy(x, anchor, atlas.tets, atlas.nodes_ref);
  if (!std::isfinite(energy)) return std::numeric_limits<double>::infinity();
  NodePositions dgrad;
  const double dval = term.eval(x, grad ? &dgrad : nullptr);
  if (!std::isfinite(dval)) return std::numeric_limits<double>::infinity();
  if (grad)
    *grad = stiffness * deformation_gradient(x, anchor, atlas.tets, atlas.nodes_ref) -
            dgrad;
  return stiffness * energy - dval;
}

double model_objective(const Volume& d, const TetMeshAtlas& atlas,
                       const NodePositions& anchor, double stiffness,
                       const std::vector<NIWPrior>* anat_priors,
                       const CrossFitResult& state) {
  const Eigen::MatrixXd data = intensity_matrix(d);
  const Eigen::MatrixXd phi = state.bias.basis.eval_all();
  const Eigen::MatrixXd ll =
      class_log_likelihoods(data, state.bias.field(phi), state.params);
  const Volume priors =
      rasterize_priors(atlas, state.x_hat, {d.nx, d.ny, d.nz});
  return log_evidence_from_ll(priors, ll) -
         stiffness * deformation_energy(state.x_hat, anchor, atlas.tets,
                                        atlas.nodes_ref) +
         prior_terms(state.params, anat_priors, state.lesion_prior,
                     atlas.lesion_channel);
}

LabelVolume segment(const Volume& d, const TetMeshAtlas& atlas,
                    const CrossFitResult& fit, double lesion_threshold) {
  const int lesion_ch = atlas.lesion_channel;
  LabelVolume seg(d.nx, d.ny, d.nz, static_cast<std::uint32_t>(lesion_ch),
                  d.spacing);
  for (std::size_t i = 0; i < seg.voxels(); ++i) {
    if (fit.resp(i, lesion_ch) > lesion_threshold) {
      seg.labels[i] = static_cast<std::uint16_t>(lesion_ch);
      continue;
    }
    int best = 0;
    double best_r = fit.resp(i, 0);
    for (int k = 1; k < lesion_ch; ++k)
      if (fit.resp(i, k) > best_r) {
        best = k;
        best_r = fit.resp(i, k);
      }
    seg.labels[i] = static_cast<std::uint16_t>(best);
  }
  return seg;
}

VolumeTable structure_volumes(const LabelVolume& seg,
                              const std::vector<std::string>& class_names) {
  const double voxel_mm3 = seg.spacing[0] * seg.spacing[1] * seg.spacing[2];
  VolumeTable table;
  table.names = class_names;
  table.mm3.assign(class_names.size(), 0.0);
  for (std::uint16_t label : seg.labels) {
    if (label < table.mm3.size()) table.mm3[label] += voxel_mm3;
    if (label != 0) table.intracranial_mm3 += voxel_mm3;
  }
  return table;
}

VolumeTable expected_volumes(const CrossFitResult& fit,
                             const std::array<double, 3>& spacing,
                             const std::vector<std::string>& class_names) {
  const double voxel_mm3 = spacing[0] * spacing[1] * spacing[2];
  VolumeTable table;
  table.names = class_names;
  table.mm3.assign(class_names.size(), 0.0);
  const int nclass =
      std::min<int>(static_cast<int>(class_names.size()),
                    static_cast<int>(fit.resp.cols()));
  for (Eigen::Index i = 0; i < fit.resp.rows(); ++i)
    for (int k = 0; k < nclass; ++k) table.mm3[k] += fit.resp(i, k) * voxel_mm3;
  for (int k = 1; k < nclass; ++k) table.intracranial_mm3 += table.mm3[k];
  return table;
}

void write_fit_checkpoint(const CrossFitResult& fit, const std::string& path) {
  nlohmann::json j;
  for (std::size_t k = 0; k < fit.params.mean.size(); ++k) {
    nlohmann::json cls;
    cls["mean"] = std::vector<double>(fit.params.mean[k].data(),
                                      fit.params.mean[k].data() + fit.params.mean[k].size());
    std::vector<double> cov;
    for (Eigen::Index r = 0; r < fit.params.cov[k].rows(); ++r)
      for (Eigen::Index c = 0; c < fit.params.cov[k].cols(); ++c)
        cov.push_back(fit.params.cov[k](r, c));
    cls["cov_row_major"] = cov;
    j["classes"].push_back(cls);
  }
  j["bias_degree"] = fit.bias.basis.degree;
  std::vector<double> coeffs;
  for (Eigen::Index r = 0; r < fit.bias.coeffs.rows(); ++r)
    for (Eigen::Index c = 0; c < fit.bias.coeffs.cols(); ++c)
      coeffs.push_back(fit.bias.coeffs(r, c));
  j["bias_coeffs_row_major"] = coeffs;
  std::vector<double> nodes;
  for (Eigen::Index m = 0; m < fit.x_hat.rows(); ++m)
    for (int a = 0; a < 3; ++a) nodes.push_back(fit.x_hat(m, a));
  j["node_positions"] = nodes;
  j["objective_trace"] = fit.objective_trace;
  j["converged"] = fit.converged;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << j.dump(2) << "\n";
}

}  // namespace longseg

#include "longseg/longitudinal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "longseg/optim.hpp"

namespace longseg {

namespace {

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

bool has_coupling(const std::vector<NIWPrior>& theta0) {
  return std::any_of(theta0.begin(), theta0.end(),
                     [](const NIWPrior& p) { return p.strength > 0.0; });
}

/// Coupling energy as it appears in the joint model: the per-timepoint meshes
/// deform away from the latent mesh, and the latent mesh from the reference.
double coupling_energy(const NodePositions& x0,
                       const std::vector<NodePositions>& x_ts,
                       const TetMeshAtlas& atlas, double k0, double k1) {
  double e = k0 * deformation_energy(x0, atlas.nodes_ref, atlas.tets,
                                     atlas.nodes_ref);
  for (const auto& xt : x_ts)
    e += k1 * deformation_energy(xt, x0, atlas.tets, atlas.nodes_ref);
  return e;
}

}  // namespace

Volume build_template(const std::vector<Volume>& scans) {
  if (scans.empty()) throw DataError("build_template: no scans");
  const Volume& first = scans[0];
  for (const auto& s : scans)
    if (!s.same_geometry(first))
      throw DataError("build_template: scans have mismatched geometry");

  Volume out = first;
  const std::size_t n = first.size();
  std::vector<double> vals(scans.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < scans.size(); ++t) vals[t] = scans[t].data[i];
    std::sort(vals.begin(), vals.end());
    const std::size_t mid = vals.size() / 2;
    out.data[i] = vals.size() % 2 == 1 ? vals[mid]
                                       : 0.5 * (vals[mid - 1] + vals[mid]);
  }
  return out;
}

LongInit init_longitudinal(const CrossFitResult& template_fit,
                           int num_timepoints, const TetMeshAtlas& atlas,
                           const LongHyper& hyper) {
  LongInit out;
  out.seeds.assign(num_timepoints, template_fit);
  out.latents.x0 = hyper.freeze_x0 ? atlas.nodes_ref : template_fit.x_hat;

  const int num_anat = atlas.num_anatomical();
  const int nch = template_fit.params.num_channels();

  // P0k = voxels assigned to class k in the template segmentation.
  std::vector<double> counts(num_anat, 0.0);
  {
    const int lesion_ch = atlas.lesion_channel;
    for (Eigen::Index i = 0; i < template_fit.resp.rows(); ++i) {
      if (template_fit.resp(i, lesion_ch) > hyper.lesion_threshold) continue;
      int best = 0;
      double best_r = template_fit.resp(i, 0);
      for (int k = 1; k < num_anat; ++k)
        if (template_fit.resp(i, k) > best_r) {
          best = k;
          best_r = template_fit.resp(i, k);
        }
      counts[best] += 1.0;
    }
  }

  out.p0_floored.assign(num_anat, 0);
  out.latents.theta0.resize(num_anat);
  for (int k = 0; k < num_anat; ++k) {
    auto& prior = out.latents.theta0[k];
    prior.mean0 = template_fit.params.mean[k];
    prior.cov0 = template_fit.params.cov[k];
    if (hyper.decouple_theta0) {
      prior.strength = 0.0;
      continue;
    }
    prior.strength = counts[k] * hyper.p0_scale;
    if (prior.strength <= nch + 2) {
      prior.strength = nch + 3;  // smallest valid pseudo-count
      out.p0_floored[k] = 1;
    }
  }
  return out;
}

std::vector<NIWPrior> update_theta0(const std::vector<GaussianParams>& per_t,
                                    const std::vector<NIWPrior>& current,
                                    int num_classes) {
  if (per_t.empty()) throw DataError("update_theta0: no timepoints");
  const int nch = per_t[0].num_channels();
  const double T = static_cast<double>(per_t.size());

  std::vector<NIWPrior> out = current;
  for (int k = 0; k < num_classes; ++k) {
    const double p0 = current[k].strength;
    if (p0 == 0.0) continue;
    if (p0 <= nch + 2)
      throw ConfigError("update_theta0: P0 must exceed N + 2 for class " +
                        std::to_string(k));
    Eigen::MatrixXd prec_sum = Eigen::MatrixXd::Zero(nch, nch);
    Eigen::VectorXd weighted_mean = Eigen::VectorXd::Zero(nch);
    for (const auto& params : per_t) {
      Eigen::LLT<Eigen::MatrixXd> llt(params.cov[k]);
      if (llt.info() != Eigen::Success)
        throw NumericError("update_theta0: singular covariance for class " +
                           std::to_string(k));
      const Eigen::MatrixXd prec = llt.solve(Eigen::MatrixXd::Identity(nch, nch));
      prec_sum += prec;
      weighted_mean += prec * params.mean[k];
    }
    out[k].mean0 = prec_sum.ldlt().solve(weighted_mean);
    const Eigen::MatrixXd cov0_inv = (prec_sum / T) * (p0 / (p0 - nch - 2.0));
    out[k].cov0 = make_spd(cov0_inv.inverse());
  }
  return out;
}

X0UpdateResult update_x0(const std::vector<NodePositions>& x_ts,
                         const NodePositions& x0_init, const TetMeshAtlas& atlas,
                         double k0, double k1) {
  // Normalize by the total stiffness so the optimizer's relative tolerances
  // behave the same whether k0 is 0.1 or 1e9; the minimizer is unchanged.
  const double scale =
      1.0 / (k0 + k1 * static_cast<double>(std::max<std::size_t>(1, x_ts.size())));
  auto fn = [&](const Eigen::VectorXd& xv, Eigen::VectorXd* g) {
    const NodePositions x0 = unflatten(xv);
    double value = k0 * deformation_energy(x0, atlas.nodes_ref, atlas.tets,
                                           atlas.nodes_ref);
    if (!std::isfinite(value)) return std::numeric_limits<double>::infinity();
    NodePositions grad;
    if (g)
      grad = k0 * deformation_gradient(x0, atlas.nodes_ref, atlas.tets,
                                       atlas.nodes_ref);
    for (const auto& xt : x_ts) {
      const double e = deformation_energy(x0, xt, atlas.tets, atlas.nodes_ref);
      if (!std::isfinite(e)) return std::numeric_limits<double>::infinity();
      value += k1 * e;
      if (g)
        grad += k1 * deformation_gradient(x0, xt, atlas.tets, atlas.nodes_ref);
    }
    if (g) *g = scale * flatten(grad);
    return scale * value;
  };

  LbfgsOptions opts;
  opts.max_iters = 300;  // the problem has 3 * num_nodes dimensions
  opts.grad_tol = 1e-8;
  // Node positions matter to ~1e-4 voxels; since the energy is quadratic near
  // its minimum the f tolerance must be roughly the square of that.
  opts.rel_f_tol = 1e-14;
  auto res = lbfgs_minimize(fn, flatten(x0_init), opts);

  X0UpdateResult out;
  const NodePositions candidate = unflatten(res.x);
  const double before = coupling_energy(x0_init, x_ts, atlas, k0, k1);
  const double after = coupling_energy(candidate, x_ts, atlas, k0, k1);
  if (std::isfinite(after) && after <= before) {
    out.x0 = candidate;
  } else {
    out.x0 = x0_init;
    out.stalled = true;
  }
  return out;
}

double joint_objective(const std::vector<Volume>& scans,
                       const TetMeshAtlas& atlas,
                       const std::vector<CrossFitResult>& fits,
                       const SubjectLatents& latents, const LongHyper& hyper) {
  const double k0 = hyper.effective_k0();
  const double k1 = hyper.effective_k1();
  const bool coupled = has_coupling(latents.theta0);
  double obj = -k0 * deformation_energy(latents.x0, atlas.nodes_ref, atlas.tets,
                                        atlas.nodes_ref);
  for (std::size_t t = 0; t < scans.size(); ++t)
    obj += model_objective(scans[t], atlas, latents.x0, k1,
                           coupled ? &latents.theta0 : nullptr, fits[t]);
  return obj;
}

LongFitResult fit_longitudinal(const std::vector<Volume>& scans,
                               const TetMeshAtlas& atlas,
                               const LongHyper& hyper) {
  if (scans.empty()) throw DataError("fit_longitudinal: no scans");
  const int T = static_cast<int>(scans.size());
  const double k1 = hyper.effective_k1();

  const Volume tmpl = build_template(scans);
  LongFitResult out;
  out.template_fit = fit_cross(tmpl, atlas, hyper.cross);

  auto init = init_longitudinal(out.template_fit, T, atlas, hyper);
  out.latents = std::move(init.latents);
  out.p0_floored = std::move(init.p0_floored);
  const bool coupled = has_coupling(out.latents.theta0);

  // Lesion intensities are per-timepoint by default; the coupling flag swaps
  // the fixed conditional prior for a theta0-style latent updated across time.
  NIWPrior lesion0;
  if (hyper.couple_lesion) {
    const int lesion_ch = atlas.lesion_channel;
    const int nch = out.template_fit.params.num_channels();
    lesion0.mean0 = out.template_fit.params.mean[lesion_ch];
    lesion0.cov0 = out.template_fit.params.cov[lesion_ch];
    // Count-based strength, matching the anatomical P0k convention.
    double lesion_count = 0.0;
    for (Eigen::Index i = 0; i < out.template_fit.resp.rows(); ++i)
      if (out.template_fit.resp(i, lesion_ch) > hyper.lesion_threshold)
        lesion_count += 1.0;
    lesion0.strength =
        std::max<double>(nch + 3, lesion_count * hyper.p0_scale);
  }

  out.timepoints = std::move(init.seeds);
  std::vector<bool> fitted(T, false);

  auto record = [&](const std::string& label) {
    if (hyper.track_steps)
      out.step_trace.emplace_back(
          label, joint_objective(scans, atlas, out.timepoints, out.latents, hyper));
  };

  for (int sweep = 0; sweep < hyper.n_iter; ++sweep) {
    for (int t = 0; t < T; ++t) {
      const CrossFitResult* warm = nullptr;
      if (fitted[t] || hyper.init_from_template) warm = &out.timepoints[t];
      if (warm && hyper.couple_lesion)
        out.timepoints[t].lesion_prior = lesion0;
      CrossFitResult fit;
      try {
        fit = fit_model(scans[t], atlas, out.latents.x0, k1,
                        coupled ? &out.latents.theta0 : nullptr, warm,
                        hyper.cross);
      } catch (const std::exception& e) {
        throw FitError("timepoint " + std::to_string(t) + ": " + e.what());
      }
      out.timepoints[t] = std::move(fit);
      fitted[t] = true;
      record("omega_t" + std::to_string(t));
    }

    if (coupled) {
      std::vector<GaussianParams> per_t;
      per_t.reserve(T);
      for (const auto& f : out.timepoints) per_t.push_back(f.params);
      out.latents.theta0 =
          update_theta0(per_t, out.latents.theta0, atlas.num_anatomical());
      if (hyper.couple_lesion) {
        const int lesion_ch = atlas.lesion_channel;
        std::vector<GaussianParams> lesion_t(per_t.size());
        for (std::size_t t = 0; t < per_t.size(); ++t) {
          lesion_t[t].mean = {per_t[t].mean[lesion_ch]};
          lesion_t[t].cov = {per_t[t].cov[lesion_ch]};
        }
        lesion0 = update_theta0(lesion_t, {lesion0}, 1)[0];
      }
      record("theta0");
    }

    if (!hyper.freeze_x0) {
      std::vector<NodePositions> x_ts;
      x_ts.reserve(T);
      for (const auto& f : out.timepoints) x_ts.push_back(f.x_hat);
      auto upd = update_x0(x_ts, out.latents.x0, atlas, hyper.effective_k0(), k1);
      out.latents.x0 = upd.x0;
      out.x0_stalled = upd.stalled;
      record("x0");
    }

    out.joint_objective_trace.push_back(
        joint_objective(scans, atlas, out.timepoints, out.latents, hyper));
  }

  if (hyper.n_iter == 0)
    out.joint_objective_trace.push_back(
        joint_objective(scans, atlas, out.timepoints, out.latents, hyper));
  return out;
}

}  // namespace longseg

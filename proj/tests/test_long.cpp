#include <doctest.h>

#include <cmath>
#include <random>

#include "longseg/longitudinal.hpp"
#include "longseg/synth.hpp"
#include "test_support.hpp"

using namespace longseg;

namespace {

SubjectSpec retest_spec(int timepoints = 2) {
  SubjectSpec s;
  s.dims = {16, 16, 16};
  s.atlas_grid_step = 5;
  s.background_mean = Eigen::VectorXd::Constant(1, 2.0);
  s.background_cov = Eigen::MatrixXd::Identity(1, 1) * 0.02;
  StructureSpec a;
  a.name = "core";
  a.blobs.push_back({Eigen::Vector3d(8, 8, 8), Eigen::Vector3d(2.8, 2.8, 2.8), 1.0});
  a.mean = Eigen::VectorXd::Constant(1, 4.0);
  a.cov = Eigen::MatrixXd::Identity(1, 1) * 0.02;
  s.structures = {a};
  s.num_timepoints = timepoints;
  s.seed = 31;
  return s;
}

LongHyper quick_hyper() {
  LongHyper h;
  h.cross.max_outer = 6;
  h.cross.bias_degree = 1;
  h.cross.lesion.wm_class = 1;
  h.n_iter = 2;
  return h;
}

GaussianParams random_params(int classes, int nch, std::mt19937_64& rng) {
  GaussianParams p;
  for (int k = 0; k < classes; ++k) {
    p.mean.push_back(testsup::random_vector(nch, rng));
    p.cov.push_back(testsup::random_spd(nch, rng));
  }
  return p;
}

}  // namespace

TEST_CASE("template is the voxelwise median") {
  std::vector<Volume> scans(3, Volume(2, 2, 1));
  scans[0].data = {1, 10, 3, 8};
  scans[1].data = {2, 30, 1, 9};
  scans[2].data = {9, 20, 2, 7};
  const Volume median = build_template(scans);
  CHECK(median.data == std::vector<double>{2, 20, 2, 8});

  scans.push_back(Volume(2, 2, 1));
  scans[3].data = {3, 40, 4, 10};
  const Volume even = build_template(scans);
  // Even count: mean of the two middle values.
  CHECK(even.data[0] == doctest::Approx(2.5));
  CHECK(even.data[1] == doctest::Approx(25.0));
}

TEST_CASE("template is invariant to scan ordering") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Volume> scans(4, Volume(3, 3, 3));
  for (auto& s : scans)
    for (auto& v : s.data) v = u(rng);
  const Volume a = build_template(scans);
  std::swap(scans[0], scans[3]);
  std::swap(scans[1], scans[2]);
  const Volume b = build_template(scans);
  CHECK(a.data == b.data);
}

TEST_CASE("update_theta0 closed form matches its defining formulas") {
  std::mt19937_64 rng(23);
  const int nch = 2;
  const double p0 = 9.0;

  SUBCASE("single timepoint") {
    const GaussianParams params = random_params(1, nch, rng);
    NIWPrior current;
    current.mean0 = Eigen::VectorXd::Zero(nch);
    current.cov0 = Eigen::MatrixXd::Identity(nch, nch);
    current.strength = p0;
    const auto out = update_theta0({params}, {current}, 1);
    CHECK((out[0].mean0 - params.mean[0]).norm() < 1e-10);
    // cov0 = Sigma_1 * (P0 - N - 2) / P0 for T = 1.
    const Eigen::MatrixXd expect = params.cov[0] * (p0 - nch - 2.0) / p0;
    CHECK((out[0].cov0 - expect).norm() <= 1e-9 * (1.0 + expect.norm()));
    CHECK(out[0].strength == p0);
  }

  SUBCASE("two identical timepoints collapse to that timepoint") {
    const GaussianParams params = random_params(1, nch, rng);
    NIWPrior current;
    current.mean0 = Eigen::VectorXd::Ones(nch);
    current.cov0 = Eigen::MatrixXd::Identity(nch, nch);
    current.strength = p0;
    const auto out = update_theta0({params, params}, {current}, 1);
    CHECK((out[0].mean0 - params.mean[0]).norm() < 1e-10);
    const Eigen::MatrixXd expect = params.cov[0] * (p0 - nch - 2.0) / p0;
    CHECK((out[0].cov0 - expect).norm() <= 1e-9 * (1.0 + expect.norm()));
  }

  SUBCASE("flat classes are skipped") {
    const GaussianParams params = random_params(1, nch, rng);
    NIWPrior flat;
    flat.mean0 = Eigen::VectorXd::Constant(nch, 5.0);
    flat.cov0 = Eigen::MatrixXd::Identity(nch, nch);
    flat.strength = 0.0;
    const auto out = update_theta0({params}, {flat}, 1);
    CHECK(out[0].mean0 == flat.mean0);
    CHECK(out[0].strength == 0.0);
  }
}

TEST_CASE("update_theta0 matches a numerical maximizer of the coupling objective") {
  std::mt19937_64 rng(29);
  const int nch = 2;
  const double p0 = 11.0;
  const double nu = p0 - nch - 2.0;
  const int T = 3;

  std::vector<GaussianParams> per_t;
  for (int t = 0; t < T; ++t) per_t.push_back(random_params(1, nch, rng));
  NIWPrior current;
  current.mean0 = Eigen::VectorXd::Zero(nch);
  current.cov0 = Eigen::MatrixXd::Identity(nch, nch);
  current.strength = p0;
  const auto out = update_theta0(per_t, {current}, 1);

  // Independent objective from the coupling density definitions:
  // sum_t [ -P0/2 (mu_t-mu0)' S_t^-1 (mu_t-mu0)
  //         + nu/2 ln|P0 Sigma0| - P0/2 tr(Sigma0 S_t^-1) ].
  const auto objective = [&](const Eigen::VectorXd& p) {
    const Eigen::VectorXd mu0 = p.head(nch);
    Eigen::MatrixXd chol = Eigen::MatrixXd::Zero(nch, nch);
    chol(0, 0) = std::exp(p[2]);
    chol(1, 0) = p[3];
    chol(1, 1) = std::exp(p[4]);
    const Eigen::MatrixXd sigma0 = chol * chol.transpose();
    double obj = 0.0;
    for (const auto& params : per_t) {
      const Eigen::MatrixXd inv = params.cov[0].inverse();
      const Eigen::VectorXd d = params.mean[0] - mu0;
      obj += -0.5 * p0 * d.dot(inv * d);
      obj += 0.5 * nu * std::log((p0 * sigma0).determinant()) -
             0.5 * p0 * (sigma0 * inv).trace();
    }
    return -obj;
  };

  Eigen::VectorXd start(5);
  start << 0.1, -0.1, 0.0, 0.0, 0.0;
  const auto nm = testsup::nelder_mead(objective, start, 0.3);
  const Eigen::VectorXd mu_hat = nm.x.head(nch);
  Eigen::MatrixXd chol = Eigen::MatrixXd::Zero(nch, nch);
  chol(0, 0) = std::exp(nm.x[2]);
  chol(1, 0) = nm.x[3];
  chol(1, 1) = std::exp(nm.x[4]);
  const Eigen::MatrixXd sigma_hat = chol * chol.transpose();

  CHECK((mu_hat - out[0].mean0).norm() <= 1e-5 * (1.0 + out[0].mean0.norm()));
  CHECK((sigma_hat - out[0].cov0).norm() <= 1e-5 * (1.0 + out[0].cov0.norm()));
}

TEST_CASE("x0 update never increases the coupling energy") {
  const SubjectSpec spec = retest_spec();
  const TetMeshAtlas atlas = make_subject_atlas(spec);
  std::mt19937_64 rng(41);
  std::normal_distribution<double> normal(0.0, 0.2);

  std::vector<NodePositions> x_ts(3, atlas.nodes_ref);
  for (auto& xt : x_ts)
    for (Eigen::Index i = 0; i < xt.size(); ++i) xt(i) += normal(rng);

  const double k0 = 0.1, k1 = 1.4;
  const auto energy = [&](const NodePositions& x0) {
    double e = k0 * deformation_energy(x0, atlas.nodes_ref, atlas.tets, atlas.nodes_ref);
    for (const auto& xt : x_ts)
      e += k1 * deformation_energy(xt, x0, atlas.tets, atlas.nodes_ref);
    return e;
  };
  const double before = energy(atlas.nodes_ref);
  const auto upd = update_x0(x_ts, atlas.nodes_ref, atlas, k0, k1);
  CHECK(energy(upd.x0) <= before + 1e-12 * (1.0 + std::abs(before)));
}

TEST_CASE("huge reference stiffness pins x0 at the reference") {
  const SubjectSpec spec = retest_spec();
  const TetMeshAtlas atlas = make_subject_atlas(spec);
  std::mt19937_64 rng(43);
  std::normal_distribution<double> normal(0.0, 0.15);
  std::vector<NodePositions> x_ts(2, atlas.nodes_ref);
  for (auto& xt : x_ts)
    for (Eigen::Index i = 0; i < xt.size(); ++i) xt(i) += normal(rng);

  NodePositions start = atlas.nodes_ref;
  for (Eigen::Index i = 0; i < start.size(); ++i) start(i) += 0.5 * normal(rng);
  const auto upd = update_x0(x_ts, start, atlas, 1e9 * 1.4, 1.4);
  // The deformation energy vanishes exactly on rigid motions (rotations have
  // ||J||_F^2 = 3 and det J = 1), so "pinned at the reference" means pinned
  // modulo the best-fit rigid transform (Kabsch alignment).
  CHECK(deformation_energy(upd.x0, atlas.nodes_ref, atlas.tets, atlas.nodes_ref) <
        1e-6);
  Eigen::MatrixXd x = upd.x0.rowwise() - upd.x0.colwise().mean();
  Eigen::MatrixXd y = atlas.nodes_ref.rowwise() - atlas.nodes_ref.colwise().mean();
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      (x.transpose() * y).eval(), Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d rot = svd.matrixU() * svd.matrixV().transpose();
  if (rot.determinant() < 0.0) {
    Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
    flip(2, 2) = -1.0;
    rot = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  CHECK((x * rot - y).cwiseAbs().maxCoeff() < 0.01);
}

TEST_CASE("init_longitudinal uses template voxel counts as coupling strengths") {
  const SubjectSpec spec = retest_spec();
  const SubjectData data = generate_subject(spec);
  const TetMeshAtlas atlas = make_subject_atlas(spec);
  LongHyper hyper = quick_hyper();
  std::vector<Volume> scans;
  for (const auto& s : data.scans) scans.push_back(log_transform(s));

  const CrossFitResult tf = fit_cross(build_template(scans), atlas, hyper.cross);
  const LongInit init = init_longitudinal(tf, 2, atlas, hyper);

  REQUIRE(init.latents.theta0.size() == 2);
  double total = 0.0;
  for (std::size_t k = 0; k < init.latents.theta0.size(); ++k) {
    CHECK(init.latents.theta0[k].strength > 0.0);
    if (!init.p0_floored[k]) total += init.latents.theta0[k].strength;
  }
  // Non-floored strengths are voxel counts and cannot exceed the volume.
  CHECK(total <= 16.0 * 16.0 * 16.0);
  CHECK(init.seeds.size() == 2);
  CHECK((init.latents.x0 - tf.x_hat).cwiseAbs().maxCoeff() == 0.0);

  hyper.decouple_theta0 = true;
  const LongInit flat = init_longitudinal(tf, 2, atlas, hyper);
  for (const auto& p : flat.latents.theta0) CHECK(p.strength == 0.0);
}

TEST_CASE("longitudinal fit joint objective is non-decreasing across sweeps") {
  const SubjectSpec spec = retest_spec(3);
  const SubjectData data = generate_subject(spec);
  const TetMeshAtlas atlas = make_subject_atlas(spec);
  std::vector<Volume> scans;
  for (const auto& s : data.scans) scans.push_back(log_transform(s));

  LongHyper hyper = quick_hyper();
  hyper.track_steps = true;
  const LongFitResult fit = fit_longitudinal(scans, atlas, hyper);
  REQUIRE(fit.timepoints.size() == 3);
  REQUIRE(static_cast<int>(fit.joint_objective_trace.size()) == hyper.n_iter);
  for (std::size_t i = 1; i < fit.joint_objective_trace.size(); ++i)
    CHECK(fit.joint_objective_trace[i] >=
          fit.joint_objective_trace[i - 1] -
              1e-8 * (std::abs(fit.joint_objective_trace[i - 1]) + 1.0));
}

TEST_CASE("n_iter 0 still reports one joint objective value") {
  const SubjectSpec spec = retest_spec();
  const SubjectData data = generate_subject(spec);
  const TetMeshAtlas atlas = make_subject_atlas(spec);
  std::vector<Volume> scans;
  for (const auto& s : data.scans) scans.push_back(log_transform(s));
  LongHyper hyper = quick_hyper();
  hyper.n_iter = 0;
  const LongFitResult fit = fit_longitudinal(scans, atlas, hyper);
  CHECK(fit.joint_objective_trace.size() == 1);
}

TEST_CASE("single-timepoint longitudinal fit succeeds") {
  const SubjectSpec spec = retest_spec(1);
  const SubjectData data = generate_subject(spec);
  const TetMeshAtlas atlas = make_subject_atlas(spec);
  LongHyper hyper = quick_hyper();
  hyper.n_iter = 1;
  const LongFitResult fit =
      fit_longitudinal({log_transform(data.scans[0])}, atlas, hyper);
  CHECK(fit.timepoints.size() == 1);
}

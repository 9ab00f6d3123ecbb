#include "longseg/synth.hpp"

#include <algorithm>
#include <cmath>

namespace longseg {

namespace {

// All-zero covariance means noise-free sampling and is allowed here.
void check_spd(const Eigen::MatrixXd& cov, int channels, const std::string& what) {
  if (cov.rows() != channels || cov.cols() != channels)
    throw SpecError(what + " covariance dimension mismatch");
  if (cov.isZero(0.0)) return;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success)
    throw SpecError(what + " covariance is not positive definite");
}

Eigen::MatrixXd noise_chol(const Eigen::MatrixXd& cov) {
  if (cov.isZero(0.0)) return Eigen::MatrixXd::Zero(cov.rows(), cov.cols());
  return Eigen::LLT<Eigen::MatrixXd>(cov).matrixL();
}

double volume_factor(const StructureSpec& s, double t, SubjectMode mode) {
  if (mode != SubjectMode::kLinearAtrophy || s.annual_rate == 0.0) return 1.0;
  const double factor = 1.0 + s.annual_rate * t;
  if (!(factor > 0.0))
    throw SpecError("structure '" + s.name + "' shrinks to non-positive volume");
  return factor;
}

double lesion_radius(const LesionScheduleEntry& e, double t, SubjectMode mode) {
  if (mode != SubjectMode::kLesionEvolution || e.annual_rate == 0.0)
    return e.radius;
  const double factor = 1.0 + e.annual_rate * t;
  if (!(factor > 0.0)) throw SpecError("lesion shrinks to non-positive volume");
  return e.radius * std::cbrt(factor);
}

}  // namespace

void SubjectSpec::validate() const {
  if (dims[0] < 2 || dims[1] < 2 || dims[2] < 2)
    throw SpecError("subject dims must be >= 2");
  if (channels < 1) throw SpecError("channels must be >= 1");
  if (num_timepoints < 1) throw SpecError("num_timepoints must be >= 1");
  if (structures.empty()) throw SpecError("at least one structure required");
  if (!times_years.empty() &&
      times_years.size() != static_cast<std::size_t>(num_timepoints))
    throw SpecError("times_years length must match num_timepoints");
  check_spd(background_cov, channels, "background");
  if (background_mean.size() != channels)
    throw SpecError("background mean dimension mismatch");
  for (const auto& s : structures) {
    if (s.mean.size() != channels)
      throw SpecError("structure '" + s.name + "' mean dimension mismatch");
    check_spd(s.cov, channels, "structure '" + s.name + "'");
    if (!std::isfinite(s.annual_rate))
      throw SpecError("structure rate must be finite");
    for (const auto& b : s.blobs)
      for (int a = 0; a < 3; ++a)
        if (b.center[a] < 0.0 || b.center[a] > dims[a] - 1.0)
          throw SpecError("structure blob outside the domain");
  }
  if (!lesion_schedule.empty()) {
    if (lesion_mean.size() != channels)
      throw SpecError("lesion mean dimension mismatch");
    check_spd(lesion_cov, channels, "lesion");
  }
}

SubjectData generate_subject(const SubjectSpec& spec) {
  spec.validate();
  const int T = spec.num_timepoints;
  const int num_struct = static_cast<int>(spec.structures.size());
  const int lesion_label = num_struct + 1;
  const std::size_t nvox =
      static_cast<std::size_t>(spec.dims[0]) * spec.dims[1] * spec.dims[2];
  const double voxel_mm3 = spec.spacing[0] * spec.spacing[1] * spec.spacing[2];

  std::vector<double> times = spec.times_years;
  if (times.empty())
    for (int t = 0; t < T; ++t) times.push_back(static_cast<double>(t));

  // Cholesky factors for noise sampling.
  std::vector<Eigen::MatrixXd> chol(num_struct + 2);
  chol[0] = noise_chol(spec.background_cov);
  for (int s = 0; s < num_struct; ++s)
    chol[s + 1] = noise_chol(spec.structures[s].cov);
  if (!spec.lesion_schedule.empty()) chol[lesion_label] = noise_chol(spec.lesion_cov);

  BiasBasis basis{spec.bias_degree, spec.dims};
  const Eigen::MatrixXd phi = basis.eval_all();

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Baseline label assignment and per-structure blob scores, shared by all
  // timepoints: each voxel goes to the above-threshold structure with the
  // highest score, ties to the lower index.
  std::vector<std::uint16_t> baseline(nvox, 0);
  std::vector<std::vector<double>> struct_score(
      num_struct, std::vector<double>(nvox, 0.0));
  {
    std::size_t i = 0;
    for (int z = 0; z < spec.dims[2]; ++z)
      for (int y = 0; y < spec.dims[1]; ++y)
        for (int x = 0; x < spec.dims[0]; ++x, ++i) {
          const Eigen::Vector3d p(x, y, z);
          int best = 0;
          double best_score = 0.0;
          for (int s = 0; s < num_struct; ++s) {
            double score = 0.0;
            for (const auto& b : spec.structures[s].blobs) {
              const Eigen::Vector3d zz = (p - b.center).cwiseQuotient(b.sigma);
              score += b.weight * std::exp(-0.5 * zz.squaredNorm());
            }
            struct_score[s][i] = score;
            if (score > spec.structures[s].threshold && score > best_score) {
              best = s + 1;
              best_score = score;
            }
          }
          baseline[i] = static_cast<std::uint16_t>(best);
        }
  }
  // Voxel indices ordered by each structure's own score (descending, index
  // breaking ties), split into baseline members and growth candidates. Volume
  // change keeps/adds voxels in this order, so the painted voxel count tracks
  // v0 * (1 + rate * t) exactly and the region deforms radially.
  std::vector<std::vector<std::size_t>> members(num_struct), candidates(num_struct);
  for (int s = 0; s < num_struct; ++s) {
    for (std::size_t v = 0; v < nvox; ++v)
      (baseline[v] == s + 1 ? members[s] : candidates[s]).push_back(v);
    const auto by_score = [&](std::size_t a, std::size_t b) {
      return struct_score[s][a] != struct_score[s][b]
                 ? struct_score[s][a] > struct_score[s][b]
                 : a < b;
    };
    std::sort(members[s].begin(), members[s].end(), by_score);
    std::sort(candidates[s].begin(), candidates[s].end(), by_score);
  }

  SubjectData out;
  for (int t = 0; t < T; ++t) {
    const double tt = times[t];

    // Paint the ground-truth labels for this timepoint.
    LabelVolume labels(spec.dims[0], spec.dims[1], spec.dims[2],
                       static_cast<std::uint32_t>(lesion_label), spec.spacing);
    std::vector<double> scales(num_struct);
    for (std::size_t v = 0; v < nvox; ++v) labels.labels[v] = baseline[v];
    for (int s = 0; s < num_struct; ++s) {
      const double factor = volume_factor(spec.structures[s], tt, spec.mode);
      scales[s] = std::cbrt(factor);
      if (factor == 1.0) continue;
      const auto v0 = static_cast<long>(members[s].size());
      const long target = std::lround(static_cast<double>(v0) * factor);
      if (target < v0) {  // drop the lowest-score members
        for (long r = target; r < v0; ++r)
          labels.labels[members[s][static_cast<std::size_t>(r)]] = 0;
      } else {  // grow into the best-scoring background voxels
        long added = 0;
        for (std::size_t c = 0; c < candidates[s].size() && added < target - v0; ++c) {
          const std::size_t v = candidates[s][c];
          if (labels.labels[v] != 0) continue;
          labels.labels[v] = static_cast<std::uint16_t>(s + 1);
          ++added;
        }
      }
    }
    for (const auto& e : spec.lesion_schedule) {
      const double r = lesion_radius(e, tt, spec.mode);
      if (r <= 0.0) continue;
      std::size_t i = 0;
      for (int z = 0; z < spec.dims[2]; ++z)
        for (int y = 0; y < spec.dims[1]; ++y)
          for (int x = 0; x < spec.dims[0]; ++x, ++i)
            if ((Eigen::Vector3d(x, y, z) - e.center).norm() < r)
              labels.labels[i] = static_cast<std::uint16_t>(lesion_label);
    }

    // Random smooth bias (constant component excluded: it would alias the
    // class means) and per-voxel Gaussian noise in log-intensity space.
    Eigen::MatrixXd coeffs = Eigen::MatrixXd::Zero(basis.count(), spec.channels);
    for (int pb = 1; pb < basis.count(); ++pb)
      for (int c = 0; c < spec.channels; ++c)
        coeffs(pb, c) = spec.bias_amplitude * normal(rng);
    const Eigen::MatrixXd bias_vals = phi * coeffs;

    Volume scan(spec.dims[0], spec.dims[1], spec.dims[2], spec.channels,
                spec.spacing);
    Volume bias_vol(spec.dims[0], spec.dims[1], spec.dims[2], spec.channels,
                    spec.spacing);
    Eigen::VectorXd noise(spec.channels);
    for (std::size_t v = 0; v < nvox; ++v) {
      const int label = labels.labels[v];
      const Eigen::VectorXd& mean =
          label == 0 ? spec.background_mean
          : label == lesion_label ? spec.lesion_mean
                                  : spec.structures[label - 1].mean;
      for (int c = 0; c < spec.channels; ++c) noise[c] = normal(rng);
      const Eigen::VectorXd log_intensity =
          mean + chol[label] * noise + bias_vals.row(v).transpose();
      for (int c = 0; c < spec.channels; ++c) {
        scan.data[v + nvox * c] = std::exp(log_intensity[c]);
        bias_vol.data[v + nvox * c] = bias_vals(v, c);
      }
    }

    std::vector<double> volumes(lesion_label + 1, 0.0);
    for (std::uint16_t l : labels.labels) volumes[l] += voxel_mm3;

    out.scans.push_back(std::move(scan));
    out.truth.labels.push_back(std::move(labels));
    out.truth.volumes_mm3.push_back(std::move(volumes));
    out.truth.bias_fields.push_back(std::move(bias_vol));
    out.truth.structure_scales.push_back(std::move(scales));
  }
  return out;
}

TetMeshAtlas make_subject_atlas(const SubjectSpec& spec) {
  spec.validate();
  GridAtlasSpec gs;
  gs.dims = spec.dims;
  gs.grid_step = spec.atlas_grid_step;
  // Pick the background floor so the atlas argmax boundary coincides with the
  // truth threshold: a weight-w blob crosses the truth threshold t where its
  // softened score is s_b = w (t/w)^(1/f^2); background (floor * exp(-s))
  // ties the blob there when floor = s_b exp(s_b). Averaged over structures.
  double floor_sum = 0.0;
  for (const auto& s : spec.structures) {
    double wmax = 0.0;
    for (const auto& b : s.blobs) wmax = std::max(wmax, b.weight);
    const double f = spec.atlas_blob_soften;
    const double sb = wmax * std::pow(s.threshold / wmax, 1.0 / (f * f));
    floor_sum += sb * std::exp(sb);
  }
  gs.background_floor =
      spec.structures.empty() ? 1.0
                              : floor_sum / static_cast<double>(spec.structures.size());
  for (const auto& s : spec.structures) {
    std::vector<BlobSpec> blobs = s.blobs;
    for (auto& b : blobs) b.sigma *= spec.atlas_blob_soften;
    gs.class_blobs.push_back(std::move(blobs));
    gs.class_names.push_back(s.name);
  }
  gs.lesion_baseline = spec.atlas_lesion_baseline;
  gs.lesion_host_class = spec.lesion_host_class > 0
                             ? spec.lesion_host_class
                             : static_cast<int>(spec.structures.size());
  return build_grid_atlas(gs);
}

CohortManifest generate_cohort(const std::vector<GroupSpec>& groups,
                               const SubjectSpec& base, int target_structure,
                               std::uint64_t seed) {
  if (target_structure < 0 ||
      target_structure >= static_cast<int>(base.structures.size()))
    throw SpecError("cohort target structure out of range");
  for (const auto& g : groups)
    if (g.count < 2) throw SpecError("cohort groups need n >= 2");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  CohortManifest manifest;
  manifest.target_structure = target_structure;
  for (const auto& g : groups) {
    for (int i = 0; i < g.count; ++i) {
      CohortSubject subj;
      subj.id = g.name + "_" + std::to_string(i);
      subj.group = g.name;
      subj.rate = g.rate_mean + g.rate_sd * normal(rng);
      subj.spec = base;
      subj.spec.mode = SubjectMode::kLinearAtrophy;
      subj.spec.structures[target_structure].annual_rate = subj.rate;
      subj.spec.seed = rng();
      manifest.subjects.push_back(std::move(subj));
    }
  }
  return manifest;
}

}  // namespace longseg

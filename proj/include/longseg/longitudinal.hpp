#pragma once

#include <utility>
#include <vector>

#include "longseg/fit.hpp"

namespace longseg {

struct LongHyper {
  CrossHyper cross;
  double k0 = 0.0;  // latent-mesh stiffness toward the reference; default = K
  double k1 = 0.0;  // per-timepoint stiffness toward the latent mesh; default = 14 K
  int n_iter = 5;
  /// Scales the count-based coupling strengths (anatomical P0k and the coupled
  /// lesion strength). At small image sizes the count convention over-weights
  /// the coupling relative to the information in a scan; values < 1 soften it.
  double p0_scale = 1.0;
  bool freeze_x0 = false;          // pin x0 at nodes_ref, skip its update
  bool init_from_template = true;  // seed per-timepoint fits from the template fit
  /// Zero every P0k so the Gaussian coupling drops out and each timepoint sees
  /// the plain cross-sectional likelihood.
  bool decouple_theta0 = false;
  bool couple_lesion = false;      // couple lesion intensities through theta0
  double lesion_threshold = 0.5;   // for the template segmentation / P0k counts
  bool track_steps = false;

  double effective_k0() const { return k0 > 0.0 ? k0 : cross.k_stiffness; }
  double effective_k1() const { return k1 > 0.0 ? k1 : 14.0 * cross.k_stiffness; }
};

/// Subject-specific latents coupling the timepoints: latent mesh x0 and one
/// NIW coupling prior per anatomical class (theta0 with strengths P0k).
struct SubjectLatents {
  NodePositions x0;
  std::vector<NIWPrior> theta0;
};

struct LongFitResult {
  std::vector<CrossFitResult> timepoints;
  SubjectLatents latents;
  std::vector<double> joint_objective_trace;
  std::vector<std::pair<std::string, double>> step_trace;
  CrossFitResult template_fit;
  std::vector<std::uint8_t> p0_floored;
  bool x0_stalled = false;
};

/// Voxelwise median across timepoints, per channel.
Volume build_template(const std::vector<Volume>& scans);

struct LongInit {
  std::vector<CrossFitResult> seeds;
  SubjectLatents latents;
  std::vector<std::uint8_t> p0_floored;
};

/// Seeds every timepoint with the template parameters; theta0 from the
/// template Gaussians with strengths P0k = template voxel count of class k
/// (floored at N+3 for empty classes); x0 from the template mesh.
LongInit init_longitudinal(const CrossFitResult& template_fit, int num_timepoints,
                           const TetMeshAtlas& atlas, const LongHyper& hyper);

/// Closed-form coordinate update of the coupling Gaussians:
///   mean0_k = (sum_t S_tk^-1)^-1 sum_t S_tk^-1 mu_tk
///   cov0_k^-1 = (1/T sum_t S_tk^-1) * P0k / (P0k - N - 2)
/// Strengths are carried through unchanged.
std::vector<NIWPrior> update_theta0(const std::vector<GaussianParams>& per_t,
                                    const std::vector<NIWPrior>& current,
                                    int num_classes);

struct X0UpdateResult {
  NodePositions x0;
  bool stalled = false;
};

/// L-BFGS minimization of K0 U(x0, x_ref) + K1 sum_t U(x0, x_t), started at
/// x0_init; the result is kept only when the joint coupling energy
/// K0 U(x0, x_ref) + K1 sum_t U(x_t, x0) does not increase.
X0UpdateResult update_x0(const std::vector<NodePositions>& x_ts,
                         const NodePositions& x0_init, const TetMeshAtlas& atlas,
                         double k0, double k1);

/// Unnormalized log joint of all timepoint models plus the latent couplings.
double joint_objective(const std::vector<Volume>& scans,
                       const TetMeshAtlas& atlas,
                       const std::vector<CrossFitResult>& fits,
                       const SubjectLatents& latents, const LongHyper& hyper);

LongFitResult fit_longitudinal(const std::vector<Volume>& scans,
                               const TetMeshAtlas& atlas,
                               const LongHyper& hyper);

}  // namespace longseg

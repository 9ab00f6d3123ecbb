#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "longseg/gmm.hpp"
#include "longseg/mesh.hpp"
#include "longseg/volume.hpp"

namespace longseg {

struct CrossHyper {
  double k_stiffness = 0.1;
  int bias_degree = 2;
  LesionPriorConfig lesion;
  int max_outer = 30;
  double tol = 1e-6;  // relative objective gain
  int mesh_memory = 10;
  int mesh_max_iters = 20;
  /// Record the full objective after every coordinate step (slow; tests only).
  bool track_steps = false;
};

struct CrossFitResult {
  GaussianParams params;
  BiasField bias;
  NodePositions x_hat;
  Eigen::MatrixXd resp;  // voxels x classes, at the final parameters
  std::vector<double> objective_trace;
  bool converged = false;
  std::vector<std::uint8_t> empty_flags;
  /// Lesion prior anchor, fixed at initialization and carried through warm
  /// starts so the objective stays comparable across coordinate sweeps.
  NIWPrior lesion_prior;
  double final_objective = 0.0;
  double log_evidence = 0.0;
  std::vector<std::pair<std::string, double>> step_trace;
};

/// One coordinate-ascent model fit: alternates E-step, Gaussian M-step, bias
/// update, and an L-BFGS mesh step on the deformation posterior. anchor and
/// stiffness define the deformation prior; anat_priors (optional, one per
/// anatomical class) couple the Gaussian parameters; init warm-starts all
/// blocks. fit_cross is this with anchor = nodes_ref and flat class priors.
CrossFitResult fit_model(const Volume& d, const TetMeshAtlas& atlas,
                         const NodePositions& anchor, double stiffness,
                         const std::vector<NIWPrior>* anat_priors,
                         const CrossFitResult* init, const CrossHyper& hyper);

CrossFitResult fit_cross(const Volume& d, const TetMeshAtlas& atlas,
                         const CrossHyper& hyper);

/// Point-estimate segmentation: anatomical argmax with the lesion channel
/// overriding when its responsibility exceeds lesion_threshold. Ties go to
/// the lowest class index.
LabelVolume segment(const Volume& d, const TetMeshAtlas& atlas,
                    const CrossFitResult& fit, double lesion_threshold = 0.5);

struct VolumeTable {
  std::vector<std::string> names;  // one per class, lesion last
  std::vector<double> mm3;
  double intracranial_mm3 = 0.0;
};

/// Per-class volumes (voxel count x spacing product) plus intracranial volume
/// (everything except background).
VolumeTable structure_volumes(const LabelVolume& seg,
                              const std::vector<std::string>& class_names);

/// Expected (soft) per-class volumes: the responsibility mass of each class
/// times the voxel volume. Smoother than hard-label counts, so repeated
/// measurements are not limited by single-voxel quantization.
VolumeTable expected_volumes(const CrossFitResult& fit,
                             const std::array<double, 3>& spacing,
                             const std::vector<std::string>& class_names);

/// Full model objective at the given state: log evidence + deformation prior
/// + Gaussian coupling priors + lesion conditional prior. Used by tests and
/// the longitudinal joint objective.
double model_objective(const Volume& d, const TetMeshAtlas& atlas,
                       const NodePositions& anchor, double stiffness,
                       const std::vector<NIWPrior>* anat_priors,
                       const CrossFitResult& state);

/// Mesh coordinate-step objective at fixed Gaussian/bias parameters:
///   stiffness * U(x, anchor) - sum_i ln sum_k prior_ik(x) * N(d_i | ...)
/// with its analytic node gradient (may be null). +inf on a folded mesh.
double mesh_step_objective(const Volume& d, const TetMeshAtlas& atlas,
                           const NodePositions& x, const NodePositions& anchor,
                           double stiffness, const GaussianParams& params,
                           const BiasField& bias, NodePositions* grad);

// Parameter checkpoint JSON (means, covariances, bias coefficients, mesh).
void write_fit_checkpoint(const CrossFitResult& fit, const std::string& path);

}  // namespace longseg

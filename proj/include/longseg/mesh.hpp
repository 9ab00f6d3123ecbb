#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <vector>

#include "longseg/errors.hpp"
#include "longseg/volume.hpp"

namespace longseg {

/// Mesh node positions in voxel units, rows are nodes.
using NodePositions = Eigen::Matrix<double, Eigen::Dynamic, 3>;

/// Tetrahedral probabilistic atlas. alphas has one row per node and K+1
/// columns: K anatomical classes (column 0 is background) plus a lesion
/// channel (column lesion_channel == K).
struct TetMeshAtlas {
  NodePositions nodes_ref;
  std::vector<std::array<int, 4>> tets;
  Eigen::MatrixXd alphas;
  std::vector<std::string> class_names;
  int lesion_channel = 0;

  int num_nodes() const { return static_cast<int>(nodes_ref.rows()); }
  int num_channels() const { return static_cast<int>(alphas.cols()); }
  int num_anatomical() const { return num_channels() - 1; }

  /// Checks alpha simplex constraints and positive tet volumes at nodes_ref.
  void validate() const;
};

/// Barycentric interpolation of node alphas at voxel centers. Voxels outside
/// every tetrahedron get background probability 1. Point-in-tet ties go to the
/// first tetrahedron in index order.
Volume rasterize_priors(const TetMeshAtlas& atlas, const NodePositions& x,
                        std::array<int, 3> dims);

/// Sum over tetrahedra of the per-tet deformation cost. With J the Jacobian of
/// the affine map anchor -> x and V the tet volume at nodes_ref:
///   U_d = V * [ ||J||_F^2 (det J)^(-2/3) / 3 - 1 + (det J + 1/det J - 2) / 2 ]
/// Returns +inf if any det J <= 0.
double deformation_energy(const NodePositions& x, const NodePositions& anchor,
                          const std::vector<std::array<int, 4>>& tets,
                          const NodePositions& nodes_ref);

/// Analytic gradient of deformation_energy w.r.t. x. Throws NumericError if
/// the energy is infinite at x.
NodePositions deformation_gradient(const NodePositions& x,
                                   const NodePositions& anchor,
                                   const std::vector<std::array<int, 4>>& tets,
                                   const NodePositions& nodes_ref);

/// Gradient of deformation_energy w.r.t. the anchor positions (x held fixed).
/// Needed for the subject-latent mesh update, where the latent mesh is the
/// anchor of the per-timepoint deformation terms.
NodePositions deformation_gradient_anchor(
    const NodePositions& x, const NodePositions& anchor,
    const std::vector<std::array<int, 4>>& tets, const NodePositions& nodes_ref);

/// A smooth class bump used to paint atlas probabilities and synthetic labels.
struct BlobSpec {
  Eigen::Vector3d center;
  Eigen::Vector3d sigma;  // per-axis Gaussian widths, voxel units
  double weight = 1.0;
};

struct GridAtlasSpec {
  std::array<int, 3> dims{};
  int grid_step = 4;
  /// One blob list per anatomical class 1..K-1; class 0 (background) gets a
  /// constant floor score instead of blobs.
  std::vector<std::vector<BlobSpec>> class_blobs;
  std::vector<std::string> class_names;  // optional, anatomical classes only
  double background_floor = 1.0;
  /// Lesion channel baseline: fraction of the designated class's probability.
  double lesion_baseline = 0.0;
  int lesion_host_class = -1;
};

/// Regular-lattice atlas with each cell split into 6 tetrahedra (Kuhn
/// triangulation, face-consistent across cells), alphas painted from the
/// class blobs and normalized per node.
TetMeshAtlas build_grid_atlas(const GridAtlasSpec& spec);

// Atlas JSON (de)serialization.
void write_atlas_json(const TetMeshAtlas& atlas, const std::string& path);
TetMeshAtlas read_atlas_json(const std::string& path);

}  // namespace longseg

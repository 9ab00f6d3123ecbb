#include "longseg/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace longseg {

namespace {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;

Mat3 edge_matrix(const NodePositions& p, const std::array<int, 4>& tet) {
  Mat3 e;
  for (int j = 0; j < 3; ++j)
    e.col(j) = (p.row(tet[j + 1]) - p.row(tet[0])).transpose();
  return e;
}

double signed_volume(const NodePositions& p, const std::array<int, 4>& tet) {
  return edge_matrix(p, tet).determinant() / 6.0;
}

/// Per-tet cost and its derivative w.r.t. the Jacobian J, scaled by ref_vol.
/// Returns false when det J <= 0 (infinite cost).
bool tet_cost(const Mat3& J, double ref_vol, double* cost, Mat3* dJ) {
  const double g = J.determinant();
  if (!(g > 0.0)) return false;
  const double F = J.squaredNorm();
  const double g23 = std::pow(g, -2.0 / 3.0);
  if (cost)
    *cost = ref_vol * (F * g23 / 3.0 - 1.0 + (g + 1.0 / g - 2.0) / 2.0);
  if (dJ) {
    const Mat3 Jit = J.inverse().transpose();
    *dJ = ref_vol * ((2.0 / 3.0) * g23 * J +
                     (-(2.0 * F / 9.0) * g23 + (g - 1.0 / g) / 2.0) * Jit);
  }
  return true;
}

}  // namespace

void TetMeshAtlas::validate() const {
  if (alphas.rows() != nodes_ref.rows())
    throw DataError("atlas alphas/nodes row count mismatch");
  if (lesion_channel != num_channels() - 1)
    throw DataError("atlas lesion channel must be the last column");
  for (Eigen::Index m = 0; m < alphas.rows(); ++m) {
    if ((alphas.row(m).array() < -1e-12).any())
      throw DataError("negative alpha at node " + std::to_string(m));
    if (std::abs(alphas.row(m).sum() - 1.0) > 1e-9)
      throw DataError("alpha row does not sum to 1 at node " + std::to_string(m));
  }
  for (std::size_t d = 0; d < tets.size(); ++d)
    if (!(signed_volume(nodes_ref, tets[d]) > 0.0))
      throw DegenerateMeshError("non-positive reference volume in tet " +
                                std::to_string(d));
}

Volume rasterize_priors(const TetMeshAtlas& atlas, const NodePositions& x,
                        std::array<int, 3> dims) {
  const int nch = atlas.num_channels();
  Volume priors(dims[0], dims[1], dims[2], nch);
  std::vector<std::uint8_t> assigned(priors.voxels(), 0);

  for (std::size_t d = 0; d < atlas.tets.size(); ++d) {
    const auto& tet = atlas.tets[d];
    const Mat3 E = edge_matrix(x, tet);
    const double det = E.determinant();
    if (!(det > 0.0))
      throw DegenerateMeshError("flipped tetrahedron " + std::to_string(d) +
                                " during rasterization");
    const Mat3 B = E.inverse();
    const Vec3 v0 = x.row(tet[0]).transpose();

    Vec3 lo = v0, hi = v0;
    for (int j = 1; j < 4; ++j) {
      const Vec3 v = x.row(tet[j]).transpose();
      lo = lo.cwiseMin(v);
      hi = hi.cwiseMax(v);
    }
    const int x0 = std::max(0, static_cast<int>(std::ceil(lo[0] - 1e-9)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(lo[1] - 1e-9)));
    const int z0 = std::max(0, static_cast<int>(std::ceil(lo[2] - 1e-9)));
    const int x1 = std::min(dims[0] - 1, static_cast<int>(std::floor(hi[0] + 1e-9)));
    const int y1 = std::min(dims[1] - 1, static_cast<int>(std::floor(hi[1] + 1e-9)));
    const int z1 = std::min(dims[2] - 1, static_cast<int>(std::floor(hi[2] + 1e-9)));

    for (int zz = z0; zz <= z1; ++zz)
      for (int yy = y0; yy <= y1; ++yy)
        for (int xx = x0; xx <= x1; ++xx) {
          const std::size_t vi = priors.index(xx, yy, zz);
          if (assigned[vi]) continue;
          const Vec3 lam123 = B * (Vec3(xx, yy, zz) - v0);
          const double lam0 = 1.0 - lam123.sum();
          if (lam123.minCoeff() < -1e-9 || lam0 < -1e-9) continue;
          assigned[vi] = 1;
          for (int c = 0; c < nch; ++c) {
            double p = lam0 * atlas.alphas(tet[0], c);
            for (int j = 0; j < 3; ++j)
              p += lam123[j] * atlas.alphas(tet[j + 1], c);
            priors.data[vi + priors.voxels() * c] = std::max(p, 0.0);
          }
        }
  }

  // Voxels outside the mesh are background with certainty.
  for (std::size_t vi = 0; vi < priors.voxels(); ++vi)
    if (!assigned[vi]) priors.data[vi] = 1.0;
  return priors;
}

double deformation_energy(const NodePositions& x, const NodePositions& anchor,
                          const std::vector<std::array<int, 4>>& tets,
                          const NodePositions& nodes_ref) {
  double total = 0.0;
  for (const auto& tet : tets) {
    const Mat3 Ea = edge_matrix(anchor, tet);
    const double det_a = Ea.determinant();
    if (!(det_a > 0.0))
      throw DegenerateMeshError("degenerate anchor tetrahedron");
    const Mat3 J = edge_matrix(x, tet) * Ea.inverse();
    const double ref_vol = signed_volume(nodes_ref, tet);
    double cost;
    if (!tet_cost(J, ref_vol, &cost, nullptr))
      return std::numeric_limits<double>::infinity();
    total += cost;
  }
  return total;
}

NodePositions deformation_gradient(const NodePositions& x,
                                   const NodePositions& anchor,
                                   const std::vector<std::array<int, 4>>& tets,
                                   const NodePositions& nodes_ref) {
  NodePositions grad = NodePositions::Zero(x.rows(), 3);
  for (const auto& tet : tets) {
    const Mat3 Ea = edge_matrix(anchor, tet);
    if (!(Ea.determinant() > 0.0))
      throw DegenerateMeshError("degenerate anchor tetrahedron");
    const Mat3 Eai = Ea.inverse();
    const Mat3 J = edge_matrix(x, tet) * Eai;
    Mat3 dJ;
    if (!tet_cost(J, signed_volume(nodes_ref, tet), nullptr, &dJ))
      throw NumericError("deformation gradient undefined: infinite energy");
    const Mat3 dE = dJ * Eai.transpose();  // d cost / d edge matrix of x
    for (int j = 0; j < 3; ++j) {
      grad.row(tet[j + 1]) += dE.col(j).transpose();
      grad.row(tet[0]) -= dE.col(j).transpose();
    }
  }
  return grad;
}

NodePositions deformation_gradient_anchor(
    const NodePositions& x, const NodePositions& anchor,
    const std::vector<std::array<int, 4>>& tets, const NodePositions& nodes_ref) {
  NodePositions grad = NodePositions::Zero(anchor.rows(), 3);
  for (const auto& tet : tets) {
    const Mat3 Ea = edge_matrix(anchor, tet);
    if (!(Ea.determinant() > 0.0))
      throw DegenerateMeshError("degenerate anchor tetrahedron");
    const Mat3 Eai = Ea.inverse();
    const Mat3 J = edge_matrix(x, tet) * Eai;
    Mat3 dJ;
    if (!tet_cost(J, signed_volume(nodes_ref, tet), nullptr, &dJ))
      throw NumericError("deformation gradient undefined: infinite energy");
    // dJ/dEa = -J dEa Ea^{-1}, hence d cost / d Ea = -J^T dJ Ea^{-T}.
    const Mat3 dE = -J.transpose() * dJ * Eai.transpose();
    for (int j = 0; j < 3; ++j) {
      grad.row(tet[j + 1]) += dE.col(j).transpose();
      grad.row(tet[0]) -= dE.col(j).transpose();
    }
  }
  return grad;
}

TetMeshAtlas build_grid_atlas(const GridAtlasSpec& spec) {
  if (spec.grid_step < 2) throw SpecError("grid_step must be >= 2");
  for (int a = 0; a < 3; ++a)
    if (spec.dims[a] < 2) throw SpecError("atlas dims must be >= 2");
  for (const auto& blobs : spec.class_blobs)
    for (const auto& b : blobs)
      for (int a = 0; a < 3; ++a)
        if (b.center[a] < 0.0 || b.center[a] > spec.dims[a] - 1.0)
          throw SpecError("class blob center outside the image domain");

  const int num_anat = static_cast<int>(spec.class_blobs.size()) + 1;
  if (spec.lesion_baseline > 0.0 &&
      (spec.lesion_host_class < 1 || spec.lesion_host_class >= num_anat))
    throw SpecError("lesion_host_class must name an anatomical class");

  // Node lattice: uniform real-valued spacing covering [0, dim-1] per axis.
  std::array<int, 3> ncells{}, nn{};
  std::array<double, 3> cell{};
  for (int a = 0; a < 3; ++a) {
    ncells[a] = std::max(1, (spec.dims[a] - 1 + spec.grid_step - 1) / spec.grid_step);
    nn[a] = ncells[a] + 1;
    cell[a] = (spec.dims[a] - 1.0) / ncells[a];
  }

  TetMeshAtlas atlas;
  atlas.nodes_ref.resize(static_cast<Eigen::Index>(nn[0]) * nn[1] * nn[2], 3);
  auto node_id = [&](int i, int j, int k) {
    return i + nn[0] * (j + nn[1] * k);
  };
  for (int k = 0; k < nn[2]; ++k)
    for (int j = 0; j < nn[1]; ++j)
      for (int i = 0; i < nn[0]; ++i)
        atlas.nodes_ref.row(node_id(i, j, k)) =
            Eigen::RowVector3d(i * cell[0], j * cell[1], k * cell[2]);

  // Kuhn triangulation: 6 tets per cell along the main diagonal; shared cell
  // faces triangulate identically, so the mesh is conforming.
  static const int kPerms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                   {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  for (int k = 0; k < ncells[2]; ++k)
    for (int j = 0; j < ncells[1]; ++j)
      for (int i = 0; i < ncells[0]; ++i) {
        const std::array<int, 3> base{i, j, k};
        for (const auto& perm : kPerms) {
          std::array<int, 4> tet;
          std::array<int, 3> c = base;
          tet[0] = node_id(c[0], c[1], c[2]);
          for (int s = 0; s < 3; ++s) {
            ++c[perm[s]];
            tet[s + 1] = node_id(c[0], c[1], c[2]);
          }
          if (signed_volume(atlas.nodes_ref, tet) < 0.0)
            std::swap(tet[2], tet[3]);
          atlas.tets.push_back(tet);
        }
      }

  // Paint per-node class scores from the blobs and normalize.
  const int nch = num_anat + 1;
  atlas.alphas.resize(atlas.nodes_ref.rows(), nch);
  for (Eigen::Index m = 0; m < atlas.nodes_ref.rows(); ++m) {
    const Vec3 p = atlas.nodes_ref.row(m).transpose();
    Eigen::VectorXd score(num_anat);
    for (int c = 1; c < num_anat; ++c) {
      double s = 0.0;
      for (const auto& b : spec.class_blobs[c - 1]) {
        const Vec3 z = (p - b.center).cwiseQuotient(b.sigma);
        s += b.weight * std::exp(-0.5 * z.squaredNorm());
      }
      score[c] = s;
    }
    // Background yields where structures are present so a full-strength blob
    // center gets a dominant (> 0.5) prior rather than a 50/50 split.
    score[0] = spec.background_floor *
               std::exp(-score.tail(num_anat - 1).sum());
    score /= score.sum();
    const double lesion =
        spec.lesion_baseline > 0.0 ? spec.lesion_baseline * score[spec.lesion_host_class]
                                   : 0.0;
    atlas.alphas.row(m).head(num_anat) = (score * (1.0 - lesion)).transpose();
    atlas.alphas(m, num_anat) = lesion;
  }

  atlas.lesion_channel = num_anat;
  atlas.class_names.resize(nch);
  atlas.class_names[0] = "background";
  for (int c = 1; c < num_anat; ++c)
    atlas.class_names[c] =
        c - 1 < static_cast<int>(spec.class_names.size()) && !spec.class_names[c - 1].empty()
            ? spec.class_names[c - 1]
            : "class_" + std::to_string(c);
  atlas.class_names[num_anat] = "lesion";

  atlas.validate();
  return atlas;
}

void write_atlas_json(const TetMeshAtlas& atlas, const std::string& path) {
  nlohmann::json j;
  auto& nodes = j["nodes_ref"];
  for (Eigen::Index m = 0; m < atlas.nodes_ref.rows(); ++m)
    nodes.push_back({atlas.nodes_ref(m, 0), atlas.nodes_ref(m, 1), atlas.nodes_ref(m, 2)});
  auto& tets = j["tets"];
  for (const auto& t : atlas.tets) tets.push_back({t[0], t[1], t[2], t[3]});
  auto& alphas = j["alphas"];
  for (Eigen::Index m = 0; m < atlas.alphas.rows(); ++m) {
    std::vector<double> row(atlas.alphas.cols());
    for (Eigen::Index c = 0; c < atlas.alphas.cols(); ++c) row[c] = atlas.alphas(m, c);
    alphas.push_back(row);
  }
  j["class_names"] = atlas.class_names;
  j["lesion_channel"] = atlas.lesion_channel;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << j.dump() << "\n";
}

TetMeshAtlas read_atlas_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid atlas JSON in " + path + ": " + e.what());
  }
  TetMeshAtlas atlas;
  const auto& nodes = j.at("nodes_ref");
  atlas.nodes_ref.resize(static_cast<Eigen::Index>(nodes.size()), 3);
  for (std::size_t m = 0; m < nodes.size(); ++m)
    for (int a = 0; a < 3; ++a)
      atlas.nodes_ref(static_cast<Eigen::Index>(m), a) = nodes[m][a].get<double>();
  for (const auto& t : j.at("tets"))
    atlas.tets.push_back({t[0].get<int>(), t[1].get<int>(), t[2].get<int>(), t[3].get<int>()});
  const auto& alphas = j.at("alphas");
  if (alphas.empty()) throw FormatError("atlas has no alphas: " + path);
  atlas.alphas.resize(static_cast<Eigen::Index>(alphas.size()),
                      static_cast<Eigen::Index>(alphas[0].size()));
  for (std::size_t m = 0; m < alphas.size(); ++m)
    for (std::size_t c = 0; c < alphas[m].size(); ++c)
      atlas.alphas(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(c)) =
          alphas[m][c].get<double>();
  atlas.class_names = j.at("class_names").get<std::vector<std::string>>();
  atlas.lesion_channel = j.at("lesion_channel").get<int>();
  atlas.validate();
  return atlas;
}

}  // namespace longseg

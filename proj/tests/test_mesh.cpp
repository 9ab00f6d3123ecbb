#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "longseg/mesh.hpp"
#include "test_support.hpp"

using namespace longseg;

namespace {

// Unit-volume tetrahedron: corner at the origin, legs of length (6)^(1/3).
NodePositions unit_tet() {
  const double a = std::cbrt(6.0);
  NodePositions n(4, 3);
  n << 0, 0, 0, a, 0, 0, 0, a, 0, 0, 0, a;
  return n;
}

TetMeshAtlas small_atlas() {
  GridAtlasSpec spec;
  spec.dims = {9, 9, 9};
  spec.grid_step = 4;
  spec.class_blobs = {{{Eigen::Vector3d(4, 4, 4), Eigen::Vector3d(2, 2, 2), 1.0}}};
  spec.class_names = {"blob"};
  spec.lesion_baseline = 0.05;
  spec.lesion_host_class = 1;
  return build_grid_atlas(spec);
}

}  // namespace

TEST_CASE("deformation energy of a uniform doubling is 3.0625") {
  const NodePositions ref = unit_tet();
  const NodePositions x = 2.0 * ref;
  const std::vector<std::array<int, 4>> tets = {{0, 1, 2, 3}};
  // F = 12, det = 8: 12/3 * 8^(-2/3) - 1 + (8 + 1/8 - 2)/2 = 3.0625.
  CHECK(deformation_energy(x, ref, tets, ref) == doctest::Approx(3.0625).epsilon(1e-12));
}

TEST_CASE("deformation energy is zero at the anchor and +inf when folded") {
  const NodePositions ref = unit_tet();
  const std::vector<std::array<int, 4>> tets = {{0, 1, 2, 3}};
  CHECK(deformation_energy(ref, ref, tets, ref) == doctest::Approx(0.0));

  NodePositions folded = ref;
  folded.row(3) << 0, 0, -std::cbrt(6.0);  // inverted orientation
  CHECK(std::isinf(deformation_energy(folded, ref, tets, ref)));
}

TEST_CASE("deformation energy is translation invariant") {
  const TetMeshAtlas atlas = small_atlas();
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal(0.0, 0.15);
  NodePositions x = atlas.nodes_ref;
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) += normal(rng);

  const double e0 = deformation_energy(x, atlas.nodes_ref, atlas.tets, atlas.nodes_ref);
  NodePositions shifted = x;
  shifted.col(0).array() += 11.5;
  shifted.col(2).array() -= 3.25;
  const double e1 =
      deformation_energy(shifted, atlas.nodes_ref, atlas.tets, atlas.nodes_ref);
  CHECK(std::abs(e1 - e0) <= 1e-10 * (1.0 + std::abs(e0)));
}

TEST_CASE("deformation gradient matches central finite differences") {
  const TetMeshAtlas atlas = small_atlas();
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal(0.0, 0.1);

  for (int trial = 0; trial < 5; ++trial) {
    NodePositions x = atlas.nodes_ref;
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) += normal(rng);

    const NodePositions g =
        deformation_gradient(x, atlas.nodes_ref, atlas.tets, atlas.nodes_ref);
    const auto f = [&](const Eigen::VectorXd& v) {
      NodePositions xp = Eigen::Map<const NodePositions>(v.data(), x.rows(), 3);
      return deformation_energy(xp, atlas.nodes_ref, atlas.tets, atlas.nodes_ref);
    };
    const Eigen::VectorXd x_flat = Eigen::Map<const Eigen::VectorXd>(x.data(), x.size());
    const Eigen::VectorXd fd = testsup::finite_difference_gradient(f, x_flat, 1e-6);
    const Eigen::VectorXd ga = Eigen::Map<const Eigen::VectorXd>(g.data(), g.size());
    CHECK((ga - fd).norm() <= 1e-5 * (1.0 + fd.norm()));
  }
}

TEST_CASE("anchor gradient matches central finite differences") {
  const TetMeshAtlas atlas = small_atlas();
  std::mt19937_64 rng(13);
  std::normal_distribution<double> normal(0.0, 0.1);

  NodePositions x = atlas.nodes_ref;
  NodePositions anchor = atlas.nodes_ref;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x(i) += normal(rng);
    anchor(i) += normal(rng);
  }

  const NodePositions g =
      deformation_gradient_anchor(x, anchor, atlas.tets, atlas.nodes_ref);
  const auto f = [&](const Eigen::VectorXd& v) {
    NodePositions ap = Eigen::Map<const NodePositions>(v.data(), anchor.rows(), 3);
    return deformation_energy(x, ap, atlas.tets, atlas.nodes_ref);
  };
  const Eigen::VectorXd a_flat =
      Eigen::Map<const Eigen::VectorXd>(anchor.data(), anchor.size());
  const Eigen::VectorXd fd = testsup::finite_difference_gradient(f, a_flat, 1e-6);
  const Eigen::VectorXd ga = Eigen::Map<const Eigen::VectorXd>(g.data(), g.size());
  CHECK((ga - fd).norm() <= 1e-5 * (1.0 + fd.norm()));
}

TEST_CASE("rasterized priors are simplexes and match node alphas at lattice points") {
  const TetMeshAtlas atlas = small_atlas();
  const Volume priors = rasterize_priors(atlas, atlas.nodes_ref, {9, 9, 9});
  CHECK(priors.nc == atlas.num_channels());

  for (int z = 0; z < 9; ++z)
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 9; ++x) {
        double sum = 0.0;
        for (int c = 0; c < priors.nc; ++c) sum += priors.at(x, y, z, c);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
      }

  // Lattice nodes coincide with voxel centers on a 4-step 9^3 grid, so the
  // interpolated prior at a node voxel equals its alphas exactly.
  for (int node = 0; node < atlas.num_nodes(); ++node) {
    const Eigen::Vector3d p = atlas.nodes_ref.row(node);
    const int xi = static_cast<int>(std::lround(p[0]));
    const int yi = static_cast<int>(std::lround(p[1]));
    const int zi = static_cast<int>(std::lround(p[2]));
    for (int c = 0; c < priors.nc; ++c)
      CHECK(priors.at(xi, yi, zi, c) ==
            doctest::Approx(atlas.alphas(node, c)).epsilon(1e-9));
  }
}

TEST_CASE("grid atlas passes validation and has sane alpha structure") {
  const TetMeshAtlas atlas = small_atlas();
  CHECK_NOTHROW(atlas.validate());
  CHECK(atlas.num_anatomical() == 2);  // background + blob
  CHECK(atlas.lesion_channel == 2);
  CHECK(atlas.class_names.size() == 3);
  CHECK(atlas.class_names.back() == "lesion");
  // Node nearest the blob center carries most probability on the blob class.
  int center_node = -1;
  for (int n = 0; n < atlas.num_nodes(); ++n)
    if ((atlas.nodes_ref.row(n) - Eigen::RowVector3d(4, 4, 4)).norm() < 1e-9)
      center_node = n;
  REQUIRE(center_node >= 0);
  CHECK(atlas.alphas(center_node, 1) > 0.5);
}

TEST_CASE("atlas json round-trip") {
  const TetMeshAtlas atlas = small_atlas();
  const std::string path = "/tmp/longseg_test_atlas.json";
  write_atlas_json(atlas, path);
  const TetMeshAtlas r = read_atlas_json(path);
  CHECK(r.num_nodes() == atlas.num_nodes());
  CHECK(r.tets == atlas.tets);
  CHECK(r.class_names == atlas.class_names);
  CHECK(r.lesion_channel == atlas.lesion_channel);
  CHECK((r.nodes_ref - atlas.nodes_ref).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  CHECK((r.alphas - atlas.alphas).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  std::remove(path.c_str());
}

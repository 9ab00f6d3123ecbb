#include <doctest.h>

#include <cmath>

#include "longseg/synth.hpp"

using namespace longseg;

namespace {

SubjectSpec base_spec() {
  SubjectSpec s;
  s.dims = {20, 20, 20};
  s.atlas_grid_step = 5;
  s.background_mean = Eigen::VectorXd::Constant(1, 2.0);
  s.background_cov = Eigen::MatrixXd::Identity(1, 1) * 0.01;
  StructureSpec a;
  a.name = "left";
  a.blobs.push_back({Eigen::Vector3d(6, 10, 10), Eigen::Vector3d(3, 3, 3), 1.0});
  a.mean = Eigen::VectorXd::Constant(1, 4.0);
  a.cov = Eigen::MatrixXd::Identity(1, 1) * 0.01;
  StructureSpec b;
  b.name = "right";
  b.blobs.push_back({Eigen::Vector3d(14, 10, 10), Eigen::Vector3d(2.5, 2.5, 2.5), 1.0});
  b.mean = Eigen::VectorXd::Constant(1, 5.0);
  b.cov = Eigen::MatrixXd::Identity(1, 1) * 0.01;
  s.structures = {a, b};
  s.num_timepoints = 2;
  s.seed = 77;
  return s;
}

}  // namespace

TEST_CASE("test-retest with zero noise and bias gives bitwise-identical scans") {
  SubjectSpec spec = base_spec();
  for (auto& st : spec.structures) st.cov *= 0.0;
  spec.background_cov *= 0.0;
  spec.bias_amplitude = 0.0;
  const SubjectData d = generate_subject(spec);
  REQUIRE(d.scans.size() == 2);
  CHECK(d.scans[0].data == d.scans[1].data);
  CHECK(d.truth.labels[0].labels == d.truth.labels[1].labels);
}

TEST_CASE("same seed gives identical subjects, different seeds differ") {
  const SubjectSpec spec = base_spec();
  const SubjectData a = generate_subject(spec);
  const SubjectData b = generate_subject(spec);
  CHECK(a.scans[0].data == b.scans[0].data);
  CHECK(a.scans[1].data == b.scans[1].data);

  SubjectSpec other = spec;
  other.seed = 78;
  const SubjectData c = generate_subject(other);
  CHECK(a.scans[0].data != c.scans[0].data);
}

TEST_CASE("linear atrophy shrinks true volumes at the requested rate") {
  SubjectSpec spec = base_spec();
  spec.mode = SubjectMode::kLinearAtrophy;
  spec.structures[0].annual_rate = -0.02;
  spec.num_timepoints = 2;
  const SubjectData d = generate_subject(spec);

  const double v0 = d.truth.volumes_mm3[0][1];
  const double v1 = d.truth.volumes_mm3[1][1];
  REQUIRE(v0 > 0.0);
  // One-voxel quantization tolerance around the ideal 2% shrinkage.
  CHECK(std::abs(v1 / v0 - 0.98) <= 1.0 / v0);
  // The untouched structure keeps its volume.
  CHECK(d.truth.volumes_mm3[1][2] == doctest::Approx(d.truth.volumes_mm3[0][2]));
}

TEST_CASE("rates that drive volume non-positive are rejected") {
  SubjectSpec spec = base_spec();
  spec.mode = SubjectMode::kLinearAtrophy;
  spec.structures[0].annual_rate = -0.6;
  spec.times_years = {0.0, 2.0};  // 1 - 1.2 < 0 at t = 2
  CHECK_THROWS_AS(generate_subject(spec), SpecError);
}

TEST_CASE("lesion evolution paints and grows the scheduled lesion") {
  SubjectSpec spec = base_spec();
  spec.mode = SubjectMode::kLesionEvolution;
  spec.lesion_mean = Eigen::VectorXd::Constant(1, 6.0);
  spec.lesion_cov = Eigen::MatrixXd::Identity(1, 1) * 0.01;
  spec.lesion_schedule.push_back({Eigen::Vector3d(6, 10, 10), 2.0, 0.5});
  const SubjectData d = generate_subject(spec);
  const int lesion_label = static_cast<int>(spec.structures.size()) + 1;
  CHECK(d.truth.labels[0].lesion_label == static_cast<std::uint32_t>(lesion_label));
  const double l0 = d.truth.volumes_mm3[0][lesion_label];
  const double l1 = d.truth.volumes_mm3[1][lesion_label];
  CHECK(l0 > 0.0);
  CHECK(l1 > l0);

  SubjectSpec empty = base_spec();
  empty.mode = SubjectMode::kLesionEvolution;
  const SubjectData e = generate_subject(empty);
  CHECK(e.truth.volumes_mm3[0][lesion_label] == 0.0);
  CHECK(e.truth.volumes_mm3[1][lesion_label] == 0.0);
}

TEST_CASE("truth volume table matches painted voxel counts") {
  const SubjectSpec spec = base_spec();
  const SubjectData d = generate_subject(spec);
  for (int t = 0; t < 2; ++t) {
    std::vector<double> counts(d.truth.volumes_mm3[t].size(), 0.0);
    for (std::uint16_t l : d.truth.labels[t].labels) counts[l] += 1.0;
    for (std::size_t k = 0; k < counts.size(); ++k)
      CHECK(d.truth.volumes_mm3[t][k] == doctest::Approx(counts[k]).epsilon(1e-12));
  }
}

TEST_CASE("subject atlas covers the painted anatomy") {
  const SubjectSpec spec = base_spec();
  const TetMeshAtlas atlas = make_subject_atlas(spec);
  CHECK_NOTHROW(atlas.validate());
  CHECK(atlas.num_anatomical() == 3);  // background + 2 structures
  CHECK(atlas.class_names[1] == "left");
  CHECK(atlas.class_names[2] == "right");
}

TEST_CASE("cohort generation is deterministic and uses group rates") {
  const SubjectSpec base = base_spec();
  const std::vector<GroupSpec> groups = {{"healthy", 3, -0.01, 0.002},
                                         {"disease", 3, -0.04, 0.002}};
  const CohortManifest a = generate_cohort(groups, base, 0, 123);
  const CohortManifest b = generate_cohort(groups, base, 0, 123);
  REQUIRE(a.subjects.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(a.subjects[i].id == b.subjects[i].id);
    CHECK(a.subjects[i].rate == b.subjects[i].rate);
    CHECK(a.subjects[i].spec.seed == b.subjects[i].spec.seed);
    CHECK(a.subjects[i].spec.mode == SubjectMode::kLinearAtrophy);
    CHECK(a.subjects[i].spec.structures[0].annual_rate ==
          doctest::Approx(a.subjects[i].rate));
  }
  // Group means separate by construction.
  double healthy = 0, disease = 0;
  for (int i = 0; i < 3; ++i) {
    healthy += a.subjects[i].rate;
    disease += a.subjects[3 + i].rate;
  }
  CHECK(healthy / 3 > disease / 3);
  CHECK_THROWS_AS(generate_cohort({{"tiny", 1, 0.0, 0.0}}, base, 0, 1), SpecError);
}

TEST_CASE("spec validation rejects inconsistent inputs") {
  SubjectSpec s = base_spec();
  s.structures[0].cov = -Eigen::MatrixXd::Identity(1, 1);
  CHECK_THROWS_AS(generate_subject(s), SpecError);
  s = base_spec();
  s.times_years = {0.0};
  CHECK_THROWS_AS(generate_subject(s), SpecError);
  s = base_spec();
  s.structures.clear();
  CHECK_THROWS_AS(generate_subject(s), SpecError);
}

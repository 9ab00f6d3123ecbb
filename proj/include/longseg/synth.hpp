#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "longseg/gmm.hpp"
#include "longseg/mesh.hpp"
#include "longseg/volume.hpp"

namespace longseg {

enum class SubjectMode { kTestRetest, kLinearAtrophy, kLesionEvolution };

/// One anatomical structure of the phantom: labels are painted where the
/// summed blob score exceeds the threshold, highest class index wins.
struct StructureSpec {
  std::string name;
  std::vector<BlobSpec> blobs;
  double threshold = 0.35;
  Eigen::VectorXd mean;   // log-intensity Gaussian per channel
  Eigen::MatrixXd cov;
  double annual_rate = 0.0;  // relative volume change per year
};

struct LesionScheduleEntry {
  Eigen::Vector3d center;
  double radius = 0.0;  // at t = 0, voxel units
  double annual_rate = 0.0;
};

struct SubjectSpec {
  std::array<int, 3> dims{32, 32, 32};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  int channels = 1;
  int atlas_grid_step = 6;
  double atlas_blob_soften = 1.4;  // widens atlas blobs relative to the truth
  double atlas_lesion_baseline = 0.03;
  int lesion_host_class = 0;  // 1-based anatomical index set by caller, 0 = last
  std::vector<StructureSpec> structures;
  Eigen::VectorXd lesion_mean;
  Eigen::MatrixXd lesion_cov;
  std::vector<LesionScheduleEntry> lesion_schedule;
  Eigen::VectorXd background_mean;
  Eigen::MatrixXd background_cov;
  int bias_degree = 1;
  double bias_amplitude = 0.0;
  SubjectMode mode = SubjectMode::kTestRetest;
  int num_timepoints = 1;
  std::vector<double> times_years;  // defaults to 0, 1, 2, ...
  std::uint64_t seed = 0;

  void validate() const;
};

struct GroundTruth {
  std::vector<LabelVolume> labels;       // per timepoint
  std::vector<std::vector<double>> volumes_mm3;  // [t][class], lesion last
  std::vector<Volume> bias_fields;       // per timepoint, log-intensity units
  /// Per-structure radial scale factor per timepoint (the generator's
  /// deformation record; 1 = reference shape).
  std::vector<std::vector<double>> structure_scales;
};

struct SubjectData {
  std::vector<Volume> scans;  // raw (exponentiated) intensities
  GroundTruth truth;
};

/// Deterministic synthetic longitudinal subject: labels from smooth blob
/// scores, volume change via radial blob rescaling, intensities
/// exp(class Gaussian + bias) with fresh noise and bias per timepoint.
SubjectData generate_subject(const SubjectSpec& spec);

/// Atlas matched to (a softened version of) the subject geometry at t = 0.
TetMeshAtlas make_subject_atlas(const SubjectSpec& spec);

struct GroupSpec {
  std::string name;
  int count = 0;
  double rate_mean = 0.0;  // annual volume-change rate of the target structure
  double rate_sd = 0.0;
};

struct CohortSubject {
  std::string id;
  std::string group;
  double rate = 0.0;
  SubjectSpec spec;
};

struct CohortManifest {
  std::vector<CohortSubject> subjects;
  int target_structure = 0;  // index into SubjectSpec::structures
};

/// n subjects per group, target-structure rates drawn from the group normal
/// distribution; deterministic under the seed.
CohortManifest generate_cohort(const std::vector<GroupSpec>& groups,
                               const SubjectSpec& base, int target_structure,
                               std::uint64_t seed);

}  // namespace longseg

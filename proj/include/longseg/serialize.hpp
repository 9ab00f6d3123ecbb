#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "longseg/longitudinal.hpp"
#include "longseg/synth.hpp"

namespace longseg {

/// Run-level configuration with the model hyperparameters. Unknown JSON keys
/// are rejected.
struct RunConfig {
  double k = 0.1;
  std::optional<double> k0;  // default K
  std::optional<double> k1;  // default 14 K
  int bias_degree = 2;
  Eigen::VectorXd lesion_delta;  // empty = zeros
  double lesion_rho_sigma = 1.0;
  double lesion_rho_w = 50.0;
  int n_iter = 5;
  double p0_scale = 1.0;
  double lesion_threshold = 0.5;
  int threads = 0;  // 0 = available cores
  std::uint64_t seed = 0;
  int max_outer = 30;
  double tol = 1e-6;
  bool freeze_x0 = false;
  bool init_from_template = true;
  bool decouple_theta0 = false;
  bool couple_lesion = false;

  double effective_k0() const { return k0.value_or(k); }
  double effective_k1() const { return k1.value_or(14.0 * k); }
  CrossHyper cross_hyper(int wm_class) const;
  LongHyper long_hyper(int wm_class) const;
};

RunConfig read_run_config(const std::string& path);
std::string run_config_json(const RunConfig& cfg);

/// Subject or cohort generation spec file.
struct SynthSpecFile {
  SubjectSpec base;
  bool is_cohort = false;
  std::vector<GroupSpec> groups;
  int target_structure = 0;
  std::uint64_t cohort_seed = 0;
};

SynthSpecFile read_synth_spec(const std::string& path);

/// Manifest describing generated subjects on disk.
struct ManifestSubject {
  std::string id;
  std::string group;
  std::vector<double> times;
  std::vector<std::string> scan_paths;
  std::vector<std::string> truth_label_paths;
  std::string truth_volumes_csv;
};

struct Manifest {
  std::string atlas_path;
  std::vector<std::string> class_names;  // atlas channel order, lesion last
  int wm_class = 0;
  std::vector<ManifestSubject> subjects;
};

void write_manifest(const Manifest& m, const std::string& path);
Manifest read_manifest(const std::string& path);

/// Long-format volume measurements CSV:
///   subject,group,structure,time_years,volume_mm3,method
struct VolumeRow {
  std::string subject;
  std::string group;
  std::string structure;
  double time_years = 0.0;
  double volume_mm3 = 0.0;
  std::string method;
};

void write_volume_rows(const std::vector<VolumeRow>& rows, const std::string& path);
std::vector<VolumeRow> read_volume_rows(const std::string& path);

}  // namespace longseg

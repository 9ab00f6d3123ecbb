#include "longseg/serialize.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace longseg {

namespace {

using nlohmann::json;

json load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw FormatError("invalid JSON in " + path + ": " + e.what());
  }
  return j;
}

void reject_unknown(const json& j, const std::set<std::string>& allowed,
                    const std::string& context) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("unknown key '" + it.key() + "' in " + context);
}

Eigen::VectorXd to_vector(const json& j) {
  Eigen::VectorXd v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[i] = j[i].get<double>();
  return v;
}

Eigen::MatrixXd to_matrix(const json& j) {
  if (j.empty()) return {};
  Eigen::MatrixXd m(j.size(), j[0].size());
  for (std::size_t r = 0; r < j.size(); ++r)
    for (std::size_t c = 0; c < j[r].size(); ++c) m(r, c) = j[r][c].get<double>();
  return m;
}

BlobSpec parse_blob(const json& j) {
  reject_unknown(j, {"center", "sigma", "weight"}, "blob");
  BlobSpec b;
  for (int a = 0; a < 3; ++a) {
    b.center[a] = j.at("center")[a].get<double>();
    b.sigma[a] = j.at("sigma")[a].get<double>();
  }
  b.weight = j.value("weight", 1.0);
  return b;
}

SubjectSpec parse_subject(const json& j) {
  reject_unknown(j,
                 {"dims", "spacing", "channels", "atlas_grid_step",
                  "atlas_blob_soften", "atlas_lesion_baseline",
                  "lesion_host_class", "structures", "lesion_mean", "lesion_cov",
                  "lesion_schedule", "background_mean", "background_cov",
                  "bias_degree", "bias_amplitude", "mode", "num_timepoints",
                  "times_years", "seed"},
                 "subject spec");
  SubjectSpec s;
  for (int a = 0; a < 3; ++a) {
    s.dims[a] = j.at("dims")[a].get<int>();
    if (j.contains("spacing")) s.spacing[a] = j.at("spacing")[a].get<double>();
  }
  s.channels = j.value("channels", 1);
  s.atlas_grid_step = j.value("atlas_grid_step", 6);
  s.atlas_blob_soften = j.value("atlas_blob_soften", 1.4);
  s.atlas_lesion_baseline = j.value("atlas_lesion_baseline", 0.03);
  s.lesion_host_class = j.value("lesion_host_class", 0);
  for (const auto& sj : j.at("structures")) {
    reject_unknown(sj, {"name", "blobs", "threshold", "mean", "cov", "annual_rate"},
                   "structure");
    StructureSpec st;
    st.name = sj.at("name").get<std::string>();
    for (const auto& bj : sj.at("blobs")) st.blobs.push_back(parse_blob(bj));
    st.threshold = sj.value("threshold", 0.35);
    st.mean = to_vector(sj.at("mean"));
    st.cov = to_matrix(sj.at("cov"));
    st.annual_rate = sj.value("annual_rate", 0.0);
    s.structures.push_back(std::move(st));
  }
  if (j.contains("lesion_mean")) s.lesion_mean = to_vector(j.at("lesion_mean"));
  if (j.contains("lesion_cov")) s.lesion_cov = to_matrix(j.at("lesion_cov"));
  if (j.contains("lesion_schedule"))
    for (const auto& lj : j.at("lesion_schedule")) {
      reject_unknown(lj, {"center", "radius", "annual_rate"}, "lesion schedule");
      LesionScheduleEntry e;
      for (int a = 0; a < 3; ++a) e.center[a] = lj.at("center")[a].get<double>();
      e.radius = lj.at("radius").get<double>();
      e.annual_rate = lj.value("annual_rate", 0.0);
      s.lesion_schedule.push_back(e);
    }
  s.background_mean = to_vector(j.at("background_mean"));
  s.background_cov = to_matrix(j.at("background_cov"));
  s.bias_degree = j.value("bias_degree", 1);
  s.bias_amplitude = j.value("bias_amplitude", 0.0);
  const std::string mode = j.value("mode", "test_retest");
  if (mode == "test_retest") s.mode = SubjectMode::kTestRetest;
  else if (mode == "linear_atrophy") s.mode = SubjectMode::kLinearAtrophy;
  else if (mode == "lesion_evolution") s.mode = SubjectMode::kLesionEvolution;
  else throw ConfigError("unknown mode '" + mode + "'");
  s.num_timepoints = j.value("num_timepoints", 1);
  if (j.contains("times_years"))
    s.times_years = j.at("times_years").get<std::vector<double>>();
  s.seed = j.value("seed", std::uint64_t{0});
  return s;
}

}  // namespace

CrossHyper RunConfig::cross_hyper(int wm_class) const {
  CrossHyper h;
  h.k_stiffness = k;
  h.bias_degree = bias_degree;
  h.max_outer = max_outer;
  h.tol = tol;
  h.lesion.wm_class = wm_class;
  h.lesion.delta = lesion_delta;
  h.lesion.rho_sigma = lesion_rho_sigma;
  h.lesion.rho_w = lesion_rho_w;
  return h;
}

LongHyper RunConfig::long_hyper(int wm_class) const {
  LongHyper h;
  h.cross = cross_hyper(wm_class);
  h.k0 = effective_k0();
  h.k1 = effective_k1();
  h.n_iter = n_iter;
  h.p0_scale = p0_scale;
  h.lesion_threshold = lesion_threshold;
  h.freeze_x0 = freeze_x0;
  h.init_from_template = init_from_template;
  h.decouple_theta0 = decouple_theta0;
  h.couple_lesion = couple_lesion;
  return h;
}

RunConfig read_run_config(const std::string& path) {
  const json j = load_json(path);
  reject_unknown(j,
                 {"K", "K0", "K1", "bias_degree", "lesion_prior", "n_iter",
                  "p0_scale", "lesion_threshold", "threads", "seed", "max_outer",
                  "tol",
                  "freeze_x0", "init_from_template", "decouple_theta0",
                  "couple_lesion"},
                 "run config");
  RunConfig cfg;
  cfg.k = j.value("K", cfg.k);
  if (j.contains("K0")) cfg.k0 = j.at("K0").get<double>();
  if (j.contains("K1")) cfg.k1 = j.at("K1").get<double>();
  cfg.bias_degree = j.value("bias_degree", cfg.bias_degree);
  if (j.contains("lesion_prior")) {
    const auto& lp = j.at("lesion_prior");
    reject_unknown(lp, {"delta", "rho_sigma", "rho_w"}, "lesion_prior");
    if (lp.contains("delta")) cfg.lesion_delta = to_vector(lp.at("delta"));
    cfg.lesion_rho_sigma = lp.value("rho_sigma", cfg.lesion_rho_sigma);
    cfg.lesion_rho_w = lp.value("rho_w", cfg.lesion_rho_w);
  }
  cfg.n_iter = j.value("n_iter", cfg.n_iter);
  cfg.p0_scale = j.value("p0_scale", cfg.p0_scale);
  cfg.lesion_threshold = j.value("lesion_threshold", cfg.lesion_threshold);
  cfg.threads = j.value("threads", cfg.threads);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.max_outer = j.value("max_outer", cfg.max_outer);
  cfg.tol = j.value("tol", cfg.tol);
  cfg.freeze_x0 = j.value("freeze_x0", cfg.freeze_x0);
  cfg.init_from_template = j.value("init_from_template", cfg.init_from_template);
  cfg.decouple_theta0 = j.value("decouple_theta0", cfg.decouple_theta0);
  cfg.couple_lesion = j.value("couple_lesion", cfg.couple_lesion);
  return cfg;
}

std::string run_config_json(const RunConfig& cfg) {
  json j;
  j["K"] = cfg.k;
  j["K0"] = cfg.effective_k0();
  j["K1"] = cfg.effective_k1();
  j["bias_degree"] = cfg.bias_degree;
  j["lesion_prior"]["delta"] =
      std::vector<double>(cfg.lesion_delta.data(),
                          cfg.lesion_delta.data() + cfg.lesion_delta.size());
  j["lesion_prior"]["rho_sigma"] = cfg.lesion_rho_sigma;
  j["lesion_prior"]["rho_w"] = cfg.lesion_rho_w;
  j["n_iter"] = cfg.n_iter;
  j["p0_scale"] = cfg.p0_scale;
  j["lesion_threshold"] = cfg.lesion_threshold;
  j["threads"] = cfg.threads;
  j["seed"] = cfg.seed;
  j["max_outer"] = cfg.max_outer;
  j["tol"] = cfg.tol;
  return j.dump(2);
}

SynthSpecFile read_synth_spec(const std::string& path) {
  const json j = load_json(path);
  SynthSpecFile out;
  if (j.contains("cohort")) {
    reject_unknown(j, {"cohort"}, "synth spec");
    const auto& cj = j.at("cohort");
    reject_unknown(cj, {"base", "groups", "target_structure", "seed"}, "cohort");
    out.is_cohort = true;
    out.base = parse_subject(cj.at("base"));
    for (const auto& gj : cj.at("groups")) {
      reject_unknown(gj, {"name", "n", "rate_mean", "rate_sd"}, "group");
      GroupSpec g;
      g.name = gj.at("name").get<std::string>();
      g.count = gj.at("n").get<int>();
      g.rate_mean = gj.value("rate_mean", 0.0);
      g.rate_sd = gj.value("rate_sd", 0.0);
      out.groups.push_back(std::move(g));
    }
    out.target_structure = cj.value("target_structure", 0);
    out.cohort_seed = cj.value("seed", std::uint64_t{0});
  } else if (j.contains("subject")) {
    reject_unknown(j, {"subject"}, "synth spec");
    out.base = parse_subject(j.at("subject"));
  } else {
    out.base = parse_subject(j);
  }
  return out;
}

void write_manifest(const Manifest& m, const std::string& path) {
  json j;
  j["atlas"] = m.atlas_path;
  j["class_names"] = m.class_names;
  j["wm_class"] = m.wm_class;
  for (const auto& s : m.subjects) {
    json sj;
    sj["id"] = s.id;
    sj["group"] = s.group;
    sj["times"] = s.times;
    sj["scans"] = s.scan_paths;
    sj["truth_labels"] = s.truth_label_paths;
    sj["truth_volumes_csv"] = s.truth_volumes_csv;
    j["subjects"].push_back(sj);
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << j.dump(2) << "\n";
}

Manifest read_manifest(const std::string& path) {
  const json j = load_json(path);
  Manifest m;
  m.atlas_path = j.at("atlas").get<std::string>();
  m.class_names = j.at("class_names").get<std::vector<std::string>>();
  m.wm_class = j.at("wm_class").get<int>();
  for (const auto& sj : j.at("subjects")) {
    ManifestSubject s;
    s.id = sj.at("id").get<std::string>();
    s.group = sj.value("group", "");
    s.times = sj.at("times").get<std::vector<double>>();
    s.scan_paths = sj.at("scans").get<std::vector<std::string>>();
    if (sj.contains("truth_labels"))
      s.truth_label_paths = sj.at("truth_labels").get<std::vector<std::string>>();
    s.truth_volumes_csv = sj.value("truth_volumes_csv", "");
    m.subjects.push_back(std::move(s));
  }
  return m;
}

void write_volume_rows(const std::vector<VolumeRow>& rows, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << "subject,group,structure,time_years,volume_mm3,method\n";
  f.precision(17);
  for (const auto& r : rows)
    f << r.subject << ',' << r.group << ',' << r.structure << ','
      << r.time_years << ',' << r.volume_mm3 << ',' << r.method << "\n";
}

std::vector<VolumeRow> read_volume_rows(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line))
    throw FormatError("empty volumes CSV: " + path);
  if (line != "subject,group,structure,time_years,volume_mm3,method")
    throw FormatError("unexpected volumes CSV header in " + path);
  std::vector<VolumeRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    VolumeRow r;
    std::string time_s, vol_s;
    if (!std::getline(ss, r.subject, ',') || !std::getline(ss, r.group, ',') ||
        !std::getline(ss, r.structure, ',') || !std::getline(ss, time_s, ',') ||
        !std::getline(ss, vol_s, ',') || !std::getline(ss, r.method))
      throw FormatError("malformed volumes CSV row in " + path);
    r.time_years = std::stod(time_s);
    r.volume_mm3 = std::stod(vol_s);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace longseg

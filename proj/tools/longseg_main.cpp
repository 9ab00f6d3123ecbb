// longseg: synthetic-data generation, model fitting, segmentation and
// evaluation from the command line. Exit codes: 0 success, 2 input/config
// error, 3 numerical/fit failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "longseg/fit.hpp"
#include "longseg/longitudinal.hpp"
#include "longseg/serialize.hpp"
#include "longseg/stats.hpp"
#include "longseg/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace longseg;

namespace {

constexpr const char* kVersion = "0.1.0";

int resolve_threads(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("LONGSEG_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

std::string hash_hex(const std::string& s) {
  std::ostringstream os;
  os << std::hex << std::hash<std::string>{}(s);
  return os.str();
}

void write_stamp(const fs::path& dir, const std::string& config_text,
                 std::uint64_t seed) {
  json j;
  j["version"] = kVersion;
  j["config_hash"] = hash_hex(config_text);
  j["seed"] = seed;
  std::ofstream f(dir / "stamp.json", std::ios::trunc);
  f << j.dump(2) << "\n";
}

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

json hyper_report(const RunConfig& cfg) {
  json j;
  j["K"] = cfg.k;
  j["K0"] = cfg.effective_k0();
  j["K1"] = cfg.effective_k1();
  j["bias_degree"] = cfg.bias_degree;
  j["n_iter"] = cfg.n_iter;
  j["p0_scale"] = cfg.p0_scale;
  j["lesion_threshold"] = cfg.lesion_threshold;
  j["max_outer"] = cfg.max_outer;
  j["tol"] = cfg.tol;
  return j;
}

// ---------------------------------------------------------------- synth ----

int cmd_synth(const std::string& spec_path, const std::string& out_dir) {
  const SynthSpecFile spec = read_synth_spec(spec_path);
  fs::create_directories(out_dir);
  const fs::path out(out_dir);

  Manifest manifest;
  const TetMeshAtlas atlas = make_subject_atlas(spec.base);
  manifest.atlas_path = (out / "atlas.json").string();
  manifest.class_names = atlas.class_names;
  manifest.wm_class = spec.base.lesion_host_class > 0
                          ? spec.base.lesion_host_class
                          : static_cast<int>(spec.base.structures.size());
  write_atlas_json(atlas, manifest.atlas_path);

  std::vector<std::pair<std::string, SubjectSpec>> subjects;
  std::vector<std::string> groups;
  if (spec.is_cohort) {
    const CohortManifest cohort = generate_cohort(
        spec.groups, spec.base, spec.target_structure, spec.cohort_seed);
    for (const auto& s : cohort.subjects) {
      subjects.emplace_back(s.id, s.spec);
      groups.push_back(s.group);
    }
  } else {
    subjects.emplace_back("subject_0", spec.base);
    groups.emplace_back("");
  }

  std::vector<VolumeRow> truth_rows;
  for (std::size_t si = 0; si < subjects.size(); ++si) {
    const auto& [id, sspec] = subjects[si];
    const SubjectData data = generate_subject(sspec);
    const fs::path sdir = out / id;
    fs::create_directories(sdir);

    ManifestSubject ms;
    ms.id = id;
    ms.group = groups[si];
    ms.times = sspec.times_years;
    if (ms.times.empty())
      for (int t = 0; t < sspec.num_timepoints; ++t)
        ms.times.push_back(static_cast<double>(t));
    for (int t = 0; t < sspec.num_timepoints; ++t) {
      const fs::path scan = sdir / ("scan_" + std::to_string(t) + ".lvol");
      const fs::path lab = sdir / ("truth_" + std::to_string(t) + ".lseg");
      write_lvol(data.scans[t], scan.string());
      write_lseg(data.truth.labels[t], lab.string());
      ms.scan_paths.push_back(scan.string());
      ms.truth_label_paths.push_back(lab.string());
      const auto& vols = data.truth.volumes_mm3[t];
      for (std::size_t k = 0; k < vols.size(); ++k) {
        const std::string name = k < manifest.class_names.size()
                                     ? manifest.class_names[k]
                                     : "class_" + std::to_string(k);
        truth_rows.push_back(
            {id, ms.group, name, ms.times[t], vols[k], "truth"});
      }
    }
    ms.truth_volumes_csv = (out / "truth_volumes.csv").string();
    manifest.subjects.push_back(std::move(ms));
  }
  write_volume_rows(truth_rows, (out / "truth_volumes.csv").string());
  write_manifest(manifest, (out / "manifest.json").string());
  write_stamp(out, read_text(spec_path), spec.base.seed ^ spec.cohort_seed);
  std::cout << (out / "manifest.json").string() << "\n";
  return 0;
}

// ------------------------------------------------------------------ fit ----

struct SubjectFitOutput {
  std::vector<VolumeRow> rows;
  json report;
  bool failed = false;
  std::string error;
};

SubjectFitOutput fit_subject(const ManifestSubject& ms, const Manifest& manifest,
                             const TetMeshAtlas& atlas, const RunConfig& cfg,
                             bool longitudinal, const fs::path& out) {
  SubjectFitOutput res;
  res.report["subject"] = ms.id;
  res.report["mode"] = longitudinal ? "long" : "cross";
  try {
    std::vector<Volume> scans;
    for (const auto& p : ms.scan_paths)
      scans.push_back(log_transform(read_lvol(p)));

    const fs::path sdir = out / ms.id;
    fs::create_directories(sdir);
    const std::string method = longitudinal ? "long" : "cross";

    std::vector<CrossFitResult> fits;
    if (longitudinal) {
      const LongHyper hyper = cfg.long_hyper(manifest.wm_class);
      LongFitResult lf = fit_longitudinal(scans, atlas, hyper);
      res.report["joint_objective_trace"] = lf.joint_objective_trace;
      res.report["x0_stalled"] = lf.x0_stalled;
      fits = std::move(lf.timepoints);
    } else {
      const CrossHyper hyper = cfg.cross_hyper(manifest.wm_class);
      for (const auto& scan : scans) fits.push_back(fit_cross(scan, atlas, hyper));
    }

    for (std::size_t t = 0; t < fits.size(); ++t) {
      const LabelVolume seg =
          segment(scans[t], atlas, fits[t], cfg.lesion_threshold);
      const fs::path seg_path = sdir / (method + "_" + std::to_string(t) + ".lseg");
      write_lseg(seg, seg_path.string());
      const VolumeTable table = structure_volumes(seg, manifest.class_names);
      for (std::size_t k = 0; k < table.names.size(); ++k)
        res.rows.push_back({ms.id, ms.group, table.names[k], ms.times[t],
                            table.mm3[k], method});
      res.rows.push_back(
          {ms.id, ms.group, "ICV", ms.times[t], table.intracranial_mm3, method});

      json tj;
      tj["objective_trace"] = fits[t].objective_trace;
      tj["converged"] = fits[t].converged;
      tj["final_objective"] = fits[t].final_objective;
      tj["segmentation"] = seg_path.string();
      res.report["timepoints"].push_back(tj);
    }
  } catch (const std::exception& e) {
    res.failed = true;
    res.error = e.what();
    res.report["error"] = e.what();
  }
  return res;
}

int cmd_fit(const std::string& mode, const std::string& manifest_path,
            const std::string& config_path, const std::string& out_dir,
            int threads_flag) {
  if (mode != "cross" && mode != "long")
    throw ConfigError("fit mode must be 'cross' or 'long'");
  const bool longitudinal = mode == "long";
  const RunConfig cfg =
      config_path.empty() ? RunConfig{} : read_run_config(config_path);
  const Manifest manifest = read_manifest(manifest_path);
  const TetMeshAtlas atlas = read_atlas_json(manifest.atlas_path);

  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  const std::string config_text =
      config_path.empty() ? std::string("{}") : read_text(config_path);
  write_stamp(out, config_text, cfg.seed);

  const int threads = resolve_threads(threads_flag > 0 ? threads_flag : cfg.threads);
  std::vector<SubjectFitOutput> outputs(manifest.subjects.size());
  std::size_t next = 0;
  while (next < manifest.subjects.size()) {
    const std::size_t batch =
        std::min<std::size_t>(threads, manifest.subjects.size() - next);
    std::vector<std::future<SubjectFitOutput>> futs;
    for (std::size_t i = 0; i < batch; ++i)
      futs.push_back(std::async(std::launch::async, fit_subject,
                                std::cref(manifest.subjects[next + i]),
                                std::cref(manifest), std::cref(atlas),
                                std::cref(cfg), longitudinal, std::cref(out)));
    for (std::size_t i = 0; i < batch; ++i) outputs[next + i] = futs[i].get();
    next += batch;
  }

  json report;
  report["mode"] = mode;
  report["hyperparameters"] = hyper_report(cfg);
  report["threads"] = threads;
  std::vector<VolumeRow> rows;
  bool failed = false;
  for (const auto& o : outputs) {
    report["subjects"].push_back(o.report);
    rows.insert(rows.end(), o.rows.begin(), o.rows.end());
    if (o.failed) {
      failed = true;
      std::cerr << "fit failed: " << o.error << "\n";
    }
  }
  write_volume_rows(rows, (out / ("volumes_" + mode + ".csv")).string());
  const fs::path report_path = out / ("report_" + mode + ".json");
  {
    std::ofstream f(report_path, std::ios::trunc);
    f << report.dump(2) << "\n";
  }
  if (failed) return 3;
  std::cout << report_path.string() << "\n";
  return 0;
}

// -------------------------------------------------------------- segment ----

int cmd_segment(const std::string& scan_path, const std::string& atlas_path,
                const std::string& config_path, const std::string& out_path) {
  const RunConfig cfg =
      config_path.empty() ? RunConfig{} : read_run_config(config_path);
  const TetMeshAtlas atlas = read_atlas_json(atlas_path);
  const Volume scan = log_transform(read_lvol(scan_path));
  // Without a manifest the white-matter class defaults to the last anatomical
  // class, matching the generated atlases.
  const int wm_class = atlas.num_anatomical() - 1;
  const CrossFitResult fit = fit_cross(scan, atlas, cfg.cross_hyper(wm_class));
  const LabelVolume seg = segment(scan, atlas, fit, cfg.lesion_threshold);
  write_lseg(seg, out_path);
  const VolumeTable table = structure_volumes(seg, atlas.class_names);
  for (std::size_t k = 0; k < table.names.size(); ++k)
    std::cout << table.names[k] << "," << table.mm3[k] << "\n";
  std::cout << "ICV," << table.intracranial_mm3 << "\n";
  return 0;
}

// ----------------------------------------------------------------- eval ----

struct SeriesKey {
  std::string method, subject, structure;
  bool operator<(const SeriesKey& o) const {
    return std::tie(method, subject, structure) <
           std::tie(o.method, o.subject, o.structure);
  }
};

int cmd_eval(const std::vector<std::string>& volume_csvs,
             const std::string& truth_manifest, const std::string& seg_dir,
             const std::string& out_dir) {
  std::vector<VolumeRow> rows;
  for (const auto& p : volume_csvs) {
    const auto r = read_volume_rows(p);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (rows.empty()) throw DataError("no volume rows to evaluate");

  std::map<SeriesKey, std::vector<std::pair<double, double>>> series;
  std::map<std::string, std::string> subject_group;
  for (const auto& r : rows) {
    series[{r.method, r.subject, r.structure}].emplace_back(r.time_years,
                                                            r.volume_mm3);
    subject_group[r.subject] = r.group;
  }
  for (auto& [key, pts] : series) std::sort(pts.begin(), pts.end());

  fs::create_directories(out_dir);
  const fs::path out(out_dir);

  std::ofstream cov_f(out / "cov.csv", std::ios::trunc);
  std::ofstream res_f(out / "residual_ratio.csv", std::ios::trunc);
  std::ofstream apc_f(out / "apc.csv", std::ios::trunc);
  cov_f << "method,subject,structure,cov_percent\n";
  res_f << "method,subject,structure,residual_ratio_percent\n";
  apc_f << "method,subject,group,structure,apc_percent_per_year\n";
  cov_f.precision(17);
  res_f.precision(17);
  apc_f.precision(17);

  // APC per series feeds the group comparison: (method, structure, group).
  std::map<std::tuple<std::string, std::string, std::string>,
           std::vector<double>>
      group_apcs;
  for (const auto& [key, pts] : series) {
    VolumeSeries s;
    s.structure = key.structure;
    for (const auto& [t, v] : pts) {
      s.times.push_back(t);
      s.values.push_back(v);
    }
    if (s.values.size() >= 2) {
      try {
        const double c = cov_percent(s.values);
        cov_f << key.method << ',' << key.subject << ',' << key.structure << ','
              << c << "\n";
      } catch (const NumericError&) {
      }
      try {
        const double a = apc(s);
        apc_f << key.method << ',' << key.subject << ','
              << subject_group[key.subject] << ',' << key.structure << ',' << a
              << "\n";
        group_apcs[{key.method, key.structure, subject_group[key.subject]}]
            .push_back(a);
      } catch (const NumericError&) {
      }
    }
    if (s.values.size() >= 3) {
      try {
        const double r = linear_residual_ratio(s);
        res_f << key.method << ',' << key.subject << ',' << key.structure << ','
              << r << "\n";
      } catch (const NumericError&) {
      }
    }
  }

  // Two-group Welch / Cohen comparison of per-subject APCs.
  std::map<std::pair<std::string, std::string>,
           std::vector<std::pair<std::string, std::vector<double>>>>
      by_struct;
  for (const auto& [key, apcs] : group_apcs)
    by_struct[{std::get<0>(key), std::get<1>(key)}].emplace_back(
        std::get<2>(key), apcs);
  std::ofstream grp_f(out / "group_comparison.csv", std::ios::trunc);
  grp_f << "method,structure,group_a,group_b,welch_t,dof,p,cohens_d\n";
  grp_f.precision(17);
  for (const auto& [ms, groups] : by_struct) {
    if (groups.size() != 2) continue;
    const auto& [ga, va] = groups[0];
    const auto& [gb, vb] = groups[1];
    if (va.size() < 2 || vb.size() < 2) continue;
    try {
      const WelchResult w = welch_t(va, vb);
      const double d = cohens_d(va, vb);
      grp_f << ms.first << ',' << ms.second << ',' << ga << ',' << gb << ','
            << w.t << ',' << w.dof << ',' << w.p << ',' << d << "\n";
    } catch (const NumericError&) {
    }
  }

  // Dice against ground-truth labels when a synth manifest is provided.
  if (!truth_manifest.empty()) {
    const Manifest m = read_manifest(truth_manifest);
    std::ofstream dice_f(out / "dice.csv", std::ios::trunc);
    dice_f << "method,subject,timepoint,structure,dice\n";
    dice_f.precision(17);
    for (const auto& ms : m.subjects) {
      for (std::size_t t = 0; t < ms.truth_label_paths.size(); ++t) {
        const LabelVolume truth = read_lseg(ms.truth_label_paths[t]);
        for (const std::string method : {"cross", "long"}) {
          const fs::path seg_path = fs::path(seg_dir) / ms.id /
                                    (method + ("_" + std::to_string(t)) + ".lseg");
          if (!fs::exists(seg_path)) continue;
          const LabelVolume seg = read_lseg(seg_path.string());
          for (std::size_t k = 1; k < m.class_names.size(); ++k)
            dice_f << method << ',' << ms.id << ',' << t << ','
                   << m.class_names[k] << ','
                   << dice(truth, seg, static_cast<int>(k)) << "\n";
        }
      }
    }
  }
  std::cout << out.string() << "\n";
  return 0;
}

// --------------------------------------------------------------- report ----

int cmd_report(const std::string& run_dir) {
  const fs::path dir(run_dir);
  bool found = false;
  for (const std::string mode : {"cross", "long"}) {
    const fs::path p = dir / ("report_" + mode + ".json");
    if (!fs::exists(p)) continue;
    found = true;
    json j;
    std::ifstream(p) >> j;
    std::cout << mode << ": K=" << j["hyperparameters"]["K"]
              << " K0=" << j["hyperparameters"]["K0"]
              << " K1=" << j["hyperparameters"]["K1"]
              << " n_iter=" << j["hyperparameters"]["n_iter"] << "\n";
    for (const auto& s : j["subjects"]) {
      std::cout << "  " << s["subject"].get<std::string>();
      if (s.contains("error")) {
        std::cout << "  ERROR: " << s["error"].get<std::string>() << "\n";
        continue;
      }
      std::cout << "  timepoints=" << s["timepoints"].size();
      bool all_conv = true;
      for (const auto& t : s["timepoints"])
        all_conv = all_conv && t["converged"].get<bool>();
      std::cout << (all_conv ? "  converged" : "  not-converged") << "\n";
    }
  }
  if (!found) throw IoError("no fit reports under " + run_dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative longitudinal brain segmentation toolkit"};
  app.require_subcommand(1);

  std::string spec_path, out_dir, mode = "cross", manifest_path, config_path;
  std::string scan_path, atlas_path, out_path, truth_manifest, seg_dir, run_dir;
  std::vector<std::string> volume_csvs;
  int threads = 0;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic subject or cohort");
  synth->add_option("spec", spec_path, "Subject/cohort spec JSON")->required();
  synth->add_option("--out", out_dir, "Output directory")->required();

  auto* fit = app.add_subcommand("fit", "Fit the model to a manifest of subjects");
  fit->add_option("--mode", mode, "cross or long")->required();
  fit->add_option("--manifest", manifest_path, "Subject manifest JSON")->required();
  fit->add_option("--config", config_path, "Run config JSON");
  fit->add_option("--out", out_dir, "Output directory")->required();
  fit->add_option("--threads", threads, "Worker threads (LONGSEG_THREADS fallback)");

  auto* seg = app.add_subcommand("segment", "Fit and segment a single scan");
  seg->add_option("scan", scan_path, "Input LVOL scan")->required();
  seg->add_option("--atlas", atlas_path, "Atlas JSON")->required();
  seg->add_option("--config", config_path, "Run config JSON");
  seg->add_option("--out", out_path, "Output LSEG path")->required();

  auto* eval = app.add_subcommand("eval", "Reliability and group statistics");
  eval->add_option("volumes", volume_csvs, "Volume CSV files")->required();
  eval->add_option("--truth", truth_manifest, "Synth manifest with truth labels");
  eval->add_option("--segs", seg_dir, "Fit output directory with LSEG files");
  eval->add_option("--out", out_dir, "Output directory")->required();

  auto* rep = app.add_subcommand("report", "Summarize a fit run directory");
  rep->add_option("run", run_dir, "Fit output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(spec_path, out_dir);
    if (fit->parsed())
      return cmd_fit(mode, manifest_path, config_path, out_dir, threads);
    if (seg->parsed())
      return cmd_segment(scan_path, atlas_path, config_path, out_path);
    if (eval->parsed())
      return cmd_eval(volume_csvs, truth_manifest, seg_dir, out_dir);
    if (rep->parsed()) return cmd_report(run_dir);
  } catch (const FitError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const DegenerateMeshError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}

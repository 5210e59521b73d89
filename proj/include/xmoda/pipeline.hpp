#pragma once

// End-to-end experiment: phantoms -> preprocessing -> two translators ->
// per-arm segmentation with self-training -> evaluation -> report.
//
// Every stage reads and writes files under the output root. manifest.json
// records, per stage, a key (hash of the config and the stage's input files)
// and the hash of every file it produced. A resumed run skips stages whose
// key and outputs still match, reruns stages with missing outputs, and
// refuses to continue when a recorded output was modified.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "xmoda/checkpoint.hpp"
#include "xmoda/error.hpp"
#include "xmoda/metrics.hpp"
#include "xmoda/phantom.hpp"
#include "xmoda/report.hpp"
#include "xmoda/rng.hpp"
#include "xmoda/segmenter.hpp"
#include "xmoda/self_training.hpp"
#include "xmoda/translators.hpp"
#include "xmoda/volume_io.hpp"

namespace xmoda {

namespace fs = std::filesystem;

inline constexpr int kConfigVersion = 1;
inline const std::vector<std::string>& all_arms() {
  static const std::vector<std::string> a{"cyclegan", "qsattn", "multiview"};
  return a;
}

struct DataConfig {
  int n_labeled = 8;
  int n_unlabeled = 8;
  int n_validation = 4;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, n_labeled, n_unlabeled, n_validation)

struct PreprocessConfig {
  Spacing3 target_spacing{1.5, 1.0, 1.0};
  std::array<int, 2> crop{48, 48};
  int image_size = 48;
  double lo_pct = 0.5;
  double hi_pct = 99.5;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PreprocessConfig, target_spacing, crop, image_size, lo_pct, hi_pct)

struct SelfTrainingConfig {
  int rounds = 1;
  double confidence_floor = 0.0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SelfTrainingConfig, rounds, confidence_floor)

struct EvalConfig {
  int montage_cases = 2;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, montage_cases)

struct ExperimentConfig {
  int config_version = kConfigVersion;
  std::uint64_t master_seed = 0;
  PhantomParams phantom;
  DataConfig data;
  PreprocessConfig preprocess;
  TrainConfig cyclegan;
  TrainConfig qsattn;
  std::vector<SegConfig> segmenter{SegConfig{}};  // ensemble members
  SelfTrainingConfig self_training;
  EvalConfig eval;
  std::vector<std::string> arms = all_arms();
  std::string output_root = "xmoda_out";
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, config_version, master_seed, phantom, data,
                                                preprocess, cyclegan, qsattn, segmenter, self_training, eval, arms,
                                                output_root)

/// Sub-seeds: derive_seed(master_seed, stage name). Seeds written in the
/// sub-configs are replaced.
inline ExperimentConfig resolve_seeds(ExperimentConfig c) {
  c.phantom.seed = derive_seed(c.master_seed, "phantom");
  c.cyclegan.seed = derive_seed(c.master_seed, "translator/cyclegan");
  c.qsattn.seed = derive_seed(c.master_seed, "translator/qsattn");
  for (std::size_t i = 0; i < c.segmenter.size(); ++i)
    c.segmenter[i].seed = derive_seed(c.master_seed, "segmenter/" + std::to_string(i));
  return c;
}

inline std::vector<std::string> canonical_arms(const std::vector<std::string>& arms) {
  if (arms.empty()) throw Error(Errc::ConfigInvalid, "at least one arm is required");
  std::set<std::string> want(arms.begin(), arms.end());
  if (want.size() != arms.size()) throw Error(Errc::ConfigInvalid, "duplicate arm");
  std::vector<std::string> out;
  for (const auto& a : all_arms())
    if (want.erase(a)) out.push_back(a);
  if (!want.empty()) throw Error(Errc::ConfigInvalid, "unknown arm '" + *want.begin() + "'");
  return out;
}

inline void check(const ExperimentConfig& c) {
  if (c.config_version != kConfigVersion)
    throw Error(Errc::ConfigInvalid, "config_version " + std::to_string(c.config_version) + " is not supported");
  canonical_arms(c.arms);
  if (c.data.n_labeled < 1 || c.data.n_unlabeled < 0 || c.data.n_validation < 0)
    throw Error(Errc::ConfigInvalid, "need >= 1 labeled case and non-negative unlabeled/validation counts");
  if (c.segmenter.empty()) throw Error(Errc::ConfigInvalid, "need at least one segmenter member");
  if (c.self_training.rounds < 0 || !(c.self_training.confidence_floor >= 0.0) ||
      !(c.self_training.confidence_floor <= 1.0))
    throw Error(Errc::ConfigInvalid, "self_training rounds must be >= 0 and confidence_floor in [0, 1]");
  if (c.preprocess.image_size != c.cyclegan.image_size || c.preprocess.image_size != c.qsattn.image_size)
    throw Error(Errc::ConfigInvalid, "translator image_size must equal preprocess.image_size");
  try {
    detail::check_params(c.phantom);
    detail::check_spacing(c.preprocess.target_spacing);
    check(c.cyclegan);
    check(c.qsattn);
    for (const auto& s : c.segmenter) check(s);
  } catch (const Error& e) {
    throw Error(Errc::ConfigInvalid, e.what());
  }
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  ExperimentConfig c;
  try {
    // Patch onto the defaults so partial nested objects keep their parent's
    // defaults (e.g. a discriminator block stays a discriminator).
    nlohmann::json j = ExperimentConfig{};
    j.merge_patch(nlohmann::json::parse(detail::read_file(path)));
    c = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ConfigInvalid, path.string() + ": " + e.what());
  }
  check(c);
  return c;
}

/// XMODA_OUT, when set, replaces the configured output root.
inline fs::path output_root(const ExperimentConfig& c) {
  if (const char* env = std::getenv("XMODA_OUT"); env && *env) return fs::path(env);
  return fs::path(c.output_root);
}

// ---------------------------------------------------------------------------
// Stage bookkeeping.

inline std::vector<std::string> files_under(const fs::path& root, const fs::path& dir) {
  std::vector<std::string> out;
  if (!fs::exists(root / dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root / dir))
    if (e.is_regular_file() && e.path().extension() != ".tmp" && e.path().extension() != ".partial")
      out.push_back(fs::relative(e.path(), root).generic_string());
  std::sort(out.begin(), out.end());
  return out;
}

class StageRunner {
 public:
  using Log = std::function<void(const std::string&)>;

  StageRunner(fs::path root, std::string config_hash, const nlohmann::ordered_json* previous, Log log)
      : root_(std::move(root)), config_hash_(std::move(config_hash)), log_(std::move(log)) {
    if (previous)
      for (const auto& s : previous->at("stages")) prev_[s.at("name").get<std::string>()] = s;
  }

  const fs::path& root() const { return root_; }

  /// Runs `fn` unless a previous run already produced the same outputs from
  /// the same inputs. `fn` returns the produced files relative to the root.
  void run(const std::string& name, const std::vector<std::string>& inputs,
           const std::function<std::vector<std::string>()>& fn) {
    std::string key_src = config_hash_ + "\n" + name + "\n";
    for (const auto& in : inputs) key_src += in + "=" + hash_file(root_ / in) + "\n";
    const std::string key = hash_bytes(key_src);

    if (auto it = prev_.find(name); it != prev_.end() && it->second.at("key") == key) {
      bool complete = true;
      for (const auto& [rel, h] : it->second.at("outputs").items()) {
        if (!fs::exists(root_ / rel)) {
          complete = false;
          continue;
        }
        if (hash_file(root_ / rel) != h.get<std::string>())
          throw Error(Errc::HashMismatch, "artifact " + rel + " of stage " + name + " does not match its recorded hash");
      }
      if (complete) {
        if (log_) log_("skip  " + name);
        stages_.push_back(it->second);
        return;
      }
    }
    if (log_) log_("run   " + name);
    const auto t0 = std::chrono::steady_clock::now();
    const auto outputs = fn();
    timings_[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    nlohmann::ordered_json rec;
    rec["name"] = name;
    rec["key"] = key;
    rec["outputs"] = nlohmann::ordered_json::object();
    for (const auto& rel : outputs) rec["outputs"][rel] = hash_file(root_ / rel);
    stages_.push_back(rec);
    on_stage_done_();
  }

  void set_on_stage_done(std::function<void()> f) { on_stage_done_ = std::move(f); }
  const std::vector<nlohmann::ordered_json>& stages() const { return stages_; }
  const std::map<std::string, double>& timings() const { return timings_; }

 private:
  fs::path root_;
  std::string config_hash_;
  Log log_;
  std::map<std::string, nlohmann::ordered_json> prev_;
  std::vector<nlohmann::ordered_json> stages_;
  std::map<std::string, double> timings_;
  std::function<void()> on_stage_done_ = [] {};
};

// ---------------------------------------------------------------------------
// Stage bodies. All paths are relative to the output root.

inline Volume preprocess_volume(const Volume& v, const PreprocessConfig& p) {
  return normalize_intensity(resample(v, p.target_spacing, Interp::Linear), p.lo_pct, p.hi_pct);
}

inline LabelMask preprocess_mask(const LabelMask& m, const PreprocessConfig& p) { return resample(m, p.target_spacing); }

inline std::vector<std::string> stage_phantom(const ExperimentConfig& c, const fs::path& root) {
  fs::remove_all(root / "data");
  generate_dataset(c.phantom, c.data.n_labeled, c.data.n_unlabeled, c.data.n_validation, root / "data");
  return files_under(root, "data");
}

/// Mirrors data/ into prep/ with every volume resampled and normalised and
/// every mask resampled with nearest-neighbour.
inline std::vector<std::string> stage_preprocess(const ExperimentConfig& c, const fs::path& root) {
  fs::remove_all(root / "prep");
  const auto m = read_dataset_manifest(root / "data" / "manifest.json");
  for (const auto& e : m.entries) {
    for (const auto* p : {&e.path, &e.target_path})
      if (!p->empty()) save_volume(preprocess_volume(load_volume(root / "data" / *p), c.preprocess), root / "prep" / *p);
    if (e.has_mask) {
      const LabelMask mask = load_mask(root / "data" / e.mask_path);
      save_mask(preprocess_mask(mask, c.preprocess), root / "prep" / e.mask_path,
                fs::path(e.mask_path).stem().string());
    }
  }
  fs::copy_file(root / "data" / "manifest.json", root / "prep" / "manifest.json");
  return files_under(root, "prep");
}

inline DatasetManifest prep_manifest(const fs::path& root) {
  return read_dataset_manifest(root / "prep" / "manifest.json");
}

inline std::string translator_ckpt(const std::string& model) { return "translators/" + model + ".ckpt"; }

/// Trains one translator on axial slices of the labeled source volumes and
/// the unlabeled target volumes. Per-epoch snapshots allow an interrupted
/// run to continue where it stopped.
inline std::vector<std::string> stage_train_translator(const std::string& model, const ExperimentConfig& c,
                                                       const fs::path& root) {
  const TrainConfig& tc = model == "cyclegan" ? c.cyclegan : c.qsattn;
  const auto m = prep_manifest(root);
  std::vector<Slice2D> s, t;
  for (const auto& e : m.with_role(kRoleSourceLabeled))
    for (auto& sl : prepare_slices(load_volume(root / "prep" / e.path), c.preprocess.crop, c.preprocess.image_size))
      s.push_back(std::move(sl));
  for (const auto& e : m.with_role(kRoleTargetUnlabeled))
    for (auto& sl : prepare_slices(load_volume(root / "prep" / e.path), c.preprocess.crop, c.preprocess.image_size))
      t.push_back(std::move(sl));

  const std::string rel = translator_ckpt(model);
  const fs::path partial = root / (rel + ".partial");
  std::optional<Checkpoint> resume;
  if (fs::exists(partial)) {
    try {
      resume = load_checkpoint(partial);
      detail::check_resume(*resume, model, tc);
    } catch (const Error&) {
      resume.reset();
    }
  }
  TrainHooks hooks;
  hooks.on_epoch = [&](const Checkpoint& ck) { save_checkpoint(ck, partial); };
  const Checkpoint ck = model == "cyclegan" ? train_cyclegan(s, t, tc, hooks, resume ? &*resume : nullptr)
                                            : train_qsattn(s, t, tc, hooks, resume ? &*resume : nullptr);
  save_checkpoint(ck, root / rel);
  fs::remove(partial);
  return {rel};
}

/// Translates the labeled source volumes (the segmentation training data)
/// and the validation source volumes (montage only).
inline std::vector<std::string> stage_translate(const std::string& model, const ExperimentConfig& c,
                                                const fs::path& root) {
  const Checkpoint ck = load_checkpoint(root / translator_ckpt(model));
  const auto m = prep_manifest(root);
  const fs::path dir = fs::path("translated") / model;
  fs::remove_all(root / dir);
  for (const auto& role : {kRoleSourceLabeled, kRoleValidationPaired})
    for (const auto& e : m.with_role(role)) {
      const std::string rel = (dir / fs::path(e.path).parent_path().filename() / fs::path(e.path).filename()).generic_string();
      save_volume(translate_volume(ck, load_volume(root / "prep" / e.path), c.preprocess.crop), root / rel);
    }
  return files_under(root, dir);
}

inline std::vector<std::string> arm_models(const std::string& arm) {
  if (arm == "multiview") return {"cyclegan", "qsattn"};
  return {arm};
}

/// The arm's labeled training set: translated source volumes with the
/// source masks; multiview concatenates both translators' sets.
inline std::vector<LabeledCase> arm_training_set(const std::string& arm, const fs::path& root) {
  const auto m = prep_manifest(root);
  std::vector<LabeledCase> out;
  for (const auto& model : arm_models(arm))
    for (const auto& e : m.with_role(kRoleSourceLabeled)) {
      const fs::path p(e.path);
      LabeledCase lc{load_volume(root / "translated" / model / p.parent_path().filename() / p.filename()),
                     load_mask(root / "prep" / e.mask_path)};
      lc.image.origin_id = model + ":" + lc.image.origin_id;
      out.push_back(std::move(lc));
    }
  return out;
}

inline fs::path round_dir(const std::string& arm, int round) {
  return fs::path("seg") / arm / ("round" + std::to_string(round));
}

inline std::string member_ckpt(const std::string& arm, int round, std::size_t i) {
  return (round_dir(arm, round) / ("member" + std::to_string(i) + ".ckpt")).generic_string();
}

inline std::vector<Checkpoint> load_members(const ExperimentConfig& c, const std::string& arm, int round,
                                            const fs::path& root) {
  std::vector<Checkpoint> out;
  for (std::size_t i = 0; i < c.segmenter.size(); ++i) out.push_back(load_checkpoint(root / member_ckpt(arm, round, i)));
  return out;
}

/// Round 0 trains on the arm's translated set. Round r >= 1 pseudo-labels
/// the unlabeled target volumes with the round r-1 ensemble and retrains
/// every member from scratch on the union.
inline std::vector<std::string> stage_segment(const std::string& arm, int round, const ExperimentConfig& c,
                                              const fs::path& root) {
  const fs::path dir = round_dir(arm, round);
  fs::remove_all(root / dir);
  std::vector<LabeledCase> train = arm_training_set(arm, root);
  if (round > 0) {
    const auto prev = load_members(c, arm, round - 1, root);
    for (const auto& e : prep_manifest(root).with_role(kRoleTargetUnlabeled)) {
      Volume v = load_volume(root / "prep" / e.path);
      LabelMask pl = pseudo_label(prev, v, c.self_training.confidence_floor);
      const std::string rel = (dir / "pseudo" / fs::path(e.path).filename()).generic_string();
      save_mask(pl, root / rel, v.origin_id);
      train.push_back({std::move(v), std::move(pl)});
    }
  }
  for (std::size_t i = 0; i < c.segmenter.size(); ++i) {
    const std::string rel = member_ckpt(arm, round, i);
    const fs::path partial = root / (rel + ".partial");
    std::optional<Checkpoint> resume;
    if (fs::exists(partial)) {
      try {
        resume = load_checkpoint(partial);
        if (resume->kind != "segmenter" || resume->config != nlohmann::json(c.segmenter[i])) resume.reset();
      } catch (const Error&) {
        resume.reset();
      }
    }
    SegHooks hooks;
    hooks.on_epoch = [&](const Checkpoint& ck) { save_checkpoint(ck, partial); };
    save_checkpoint(train_segmenter(train, c.segmenter[i], hooks, resume ? &*resume : nullptr), root / rel);
    fs::remove(partial);
  }
  write_file_atomic(root / dir / "training_set.json",
                    nlohmann::json({{"size", train.size()}, {"round", round}, {"arm", arm}}).dump() + "\n");
  return files_under(root, dir);
}

inline std::vector<std::string> segment_inputs(const std::string& arm, int round, const fs::path& root) {
  auto in = files_under(root, "prep");
  for (const auto& m : arm_models(arm))
    for (const auto& f : files_under(root, fs::path("translated") / m)) in.push_back(f);
  if (round > 0)
    for (const auto& f : files_under(root, round_dir(arm, round - 1))) in.push_back(f);
  return in;
}

inline fs::path eval_dir(const std::string& arm, int round) {
  return fs::path("eval") / arm / ("round" + std::to_string(round));
}

/// Ensemble predictions for every validation target volume.
inline std::vector<std::string> stage_evaluate(const std::string& arm, int round, const ExperimentConfig& c,
                                               const fs::path& root) {
  const fs::path dir = eval_dir(arm, round);
  fs::remove_all(root / dir);
  const auto members = load_members(c, arm, round, root);
  for (const auto& e : prep_manifest(root).with_role(kRoleValidationPaired)) {
    const Volume v = load_volume(root / "prep" / e.target_path);
    save_mask(ensemble_predict(members, v), root / dir / fs::path(e.target_path).filename(), v.origin_id);
  }
  fs::create_directories(root / dir);
  return files_under(root, dir);
}

inline std::vector<std::string> evaluate_inputs(const std::string& arm, int round, const fs::path& root) {
  auto in = files_under(root, round_dir(arm, round));
  for (const auto& f : files_under(root, "prep")) in.push_back(f);
  return in;
}

/// Scores the saved predictions of one arm and round against the
/// validation masks.
inline ResultsTable score_round(const std::string& arm, int round, const fs::path& root) {
  std::vector<LabelMask> preds, gts;
  std::vector<std::string> ids;
  Spacing3 spacing{1, 1, 1};
  for (const auto& e : prep_manifest(root).with_role(kRoleValidationPaired)) {
    preds.push_back(load_mask(root / eval_dir(arm, round) / fs::path(e.target_path).filename()));
    gts.push_back(load_mask(root / "prep" / e.mask_path));
    spacing = gts.back().spacing;
    ids.push_back(detail::case_name(e.case_id));
  }
  return evaluate_cases(preds, gts, spacing, ids);
}

struct ArmResult {
  std::string arm;
  std::int64_t training_set_size = 0;  // round 0
  std::vector<ResultsTable> rounds;
};

struct ExperimentResult {
  fs::path root;
  std::vector<ArmResult> arms;
  std::vector<Comparison> comparisons;
  nlohmann::ordered_json manifest;
  std::map<std::string, double> timings;
};

inline std::vector<std::pair<std::string, ResultsTable>> labelled_tables(const std::vector<ArmResult>& arms) {
  std::vector<std::pair<std::string, ResultsTable>> out;
  for (const auto& a : arms)
    for (std::size_t r = 0; r < a.rounds.size(); ++r) out.emplace_back(a.arm + "/round" + std::to_string(r), a.rounds[r]);
  return out;
}

/// Cross-arm tests on the final round, plus first vs final round per arm.
inline std::vector<Comparison> arm_comparisons(const std::vector<ArmResult>& arms) {
  std::vector<Comparison> out;
  if (arms.empty() || arms.front().rounds.front().cases.size() < 2) return out;
  const std::vector<std::string> metrics{"dice_mean", "dice_vs", "dice_cochlea"};
  for (std::size_t i = 0; i < arms.size(); ++i)
    for (std::size_t j = i + 1; j < arms.size(); ++j)
      for (const auto& m : metrics)
        out.push_back(compare_tables(arms[i].arm, arms[i].rounds.back(), arms[j].arm, arms[j].rounds.back(), m));
  for (const auto& a : arms)
    if (a.rounds.size() > 1)
      out.push_back(compare_tables(a.arm + "/round" + std::to_string(a.rounds.size() - 1), a.rounds.back(),
                                   a.arm + "/round0", a.rounds.front(), "dice_mean"));
  return out;
}

/// Middle axial slice of each montage case: source, each translation, and
/// the real target.
inline MontageSpec build_montage(const ExperimentConfig& c, const std::vector<std::string>& models, const fs::path& root) {
  MontageSpec ms;
  ms.name = "montage";
  ms.labels.push_back("SOURCE");
  for (const auto& m : models) ms.labels.push_back(m);
  ms.labels.push_back("TARGET");
  const auto val = prep_manifest(root).with_role(kRoleValidationPaired);
  const int n = std::min<int>(c.eval.montage_cases, static_cast<int>(val.size()));
  auto mid = [&](const fs::path& p) {
    const Volume v = load_volume(p);
    return slice_axial(v)[static_cast<std::size_t>(v.shape[0] / 2)];
  };
  for (int i = 0; i < n; ++i) {
    const auto& e = val[static_cast<std::size_t>(i)];
    std::vector<Slice2D> row{mid(root / "prep" / e.path)};
    for (const auto& m : models)
      row.push_back(mid(root / "translated" / m / fs::path(e.path).parent_path().filename() / fs::path(e.path).filename()));
    row.push_back(mid(root / "prep" / e.target_path));
    ms.rows.push_back(std::move(row));
  }
  return ms;
}

inline std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = c;
  j.erase("output_root");
  return hash_bytes(j.dump());
}

struct RunOptions {
  bool resume = false;
  std::optional<fs::path> root;  // overrides XMODA_OUT and output_root
  StageRunner::Log log;
};

/// Runs (or resumes) the experiment for `cfg.arms`. Seeds are resolved from
/// the master seed before anything runs.
inline ExperimentResult run_pipeline(const ExperimentConfig& raw, const RunOptions& opt = {}) {
  check(raw);
  ExperimentConfig c = resolve_seeds(raw);
  c.arms = canonical_arms(c.arms);
  const fs::path root = opt.root ? *opt.root : output_root(c);
  fs::create_directories(root);
  const fs::path manifest_path = root / "manifest.json";
  const std::string chash = config_hash(c);

  nlohmann::ordered_json previous;
  if (opt.resume) {
    if (!fs::exists(manifest_path)) throw Error(Errc::MissingFile, "no manifest to resume at " + manifest_path.string());
    previous = nlohmann::ordered_json::parse(detail::read_file(manifest_path));
    if (previous.at("config_hash") != chash)
      throw Error(Errc::ConfigInvalid, "manifest was written for a different configuration");
  }

  StageRunner runner(root, chash, opt.resume ? &previous : nullptr, opt.log);
  ExperimentResult res;
  res.root = root;
  auto write_manifest = [&](const char* status) {
    nlohmann::ordered_json m;
    m["format"] = "xmoda-experiment";
    m["config_version"] = c.config_version;
    m["config_hash"] = chash;
    nlohmann::json cfg_json = raw;
    cfg_json.erase("output_root");
    m["config"] = nlohmann::ordered_json::parse(cfg_json.dump());
    m["arms"] = c.arms;
    m["status"] = status;
    m["stages"] = runner.stages();
    write_file_atomic(manifest_path, m.dump(2) + "\n");
    res.manifest = m;
  };
  runner.set_on_stage_done([&] { write_manifest("incomplete"); });

  runner.run("phantom", {}, [&] { return stage_phantom(c, root); });
  runner.run("preprocess", files_under(root, "data"), [&] { return stage_preprocess(c, root); });

  std::vector<std::string> models;
  for (const auto& arm : c.arms)
    for (const auto& m : arm_models(arm))
      if (std::find(models.begin(), models.end(), m) == models.end()) models.push_back(m);
  std::sort(models.begin(), models.end());

  const auto prep_files = files_under(root, "prep");
  for (const auto& m : models)
    runner.run("train-translator/" + m, prep_files, [&] { return stage_train_translator(m, c, root); });
  for (const auto& m : models) {
    auto in = prep_files;
    in.push_back(translator_ckpt(m));
    runner.run("translate/" + m, in, [&] { return stage_translate(m, c, root); });
  }

  for (const auto& arm : c.arms) {
    ArmResult ar;
    ar.arm = arm;
    for (int r = 0; r <= c.self_training.rounds; ++r) {
      const std::string tag = arm + "/round" + std::to_string(r);
      runner.run("segment/" + tag, segment_inputs(arm, r, root), [&] { return stage_segment(arm, r, c, root); });
      runner.run("evaluate/" + tag, evaluate_inputs(arm, r, root), [&] { return stage_evaluate(arm, r, c, root); });
      if (c.data.n_validation > 0) ar.rounds.push_back(score_round(arm, r, root));
    }
    ar.training_set_size = nlohmann::json::parse(detail::read_file(root / round_dir(arm, 0) / "training_set.json"))
                               .at("size")
                               .get<std::int64_t>();
    res.arms.push_back(std::move(ar));
  }
  res.comparisons = arm_comparisons(res.arms);

  std::vector<std::string> report_in;
  for (const auto& arm : c.arms)
    for (int r = 0; r <= c.self_training.rounds; ++r)
      for (const auto& f : files_under(root, eval_dir(arm, r))) report_in.push_back(f);
  for (const auto& m : models)
    for (const auto& f : files_under(root, fs::path("translated") / m)) report_in.push_back(f);
  runner.run("report", report_in, [&] {
    std::vector<MontageSpec> montages;
    if (c.eval.montage_cases > 0 && c.data.n_validation > 0) montages.push_back(build_montage(c, models, root));
    std::vector<std::string> out;
    for (const auto& f : emit_report(labelled_tables(res.arms), res.comparisons, montages, root / "report"))
      out.push_back("report/" + f);
    return out;
  });

  res.timings = runner.timings();
  write_manifest("complete");
  return res;
}

/// Continues the experiment recorded in `manifest_path`'s directory.
inline ExperimentResult resume_pipeline(const fs::path& manifest_path, const StageRunner::Log& log = {}) {
  if (!fs::exists(manifest_path)) throw Error(Errc::MissingFile, "no manifest at " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::CorruptHeader, manifest_path.string() + ": " + e.what());
  }
  ExperimentConfig c;
  try {
    c = m.at("config").get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ConfigInvalid, manifest_path.string() + ": " + e.what());
  }
  RunOptions opt;
  opt.resume = true;
  opt.root = manifest_path.parent_path().empty() ? fs::path(".") : manifest_path.parent_path();
  opt.log = log;
  return run_pipeline(c, opt);
}

}  // namespace xmoda

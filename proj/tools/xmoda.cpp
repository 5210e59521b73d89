#include <iostream>

#include "CLI11.hpp"

#include "xmoda/pipeline.hpp"

using namespace xmoda;

namespace {

void log_line(const std::string& s) { std::cerr << "[xmoda] " << s << std::endl; }

ExperimentConfig config_or_default(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_experiment_config(path);
}

std::vector<LabeledCase> labeled_cases(const std::vector<std::string>& images, const std::vector<std::string>& masks) {
  if (images.size() != masks.size()) throw Error(Errc::LengthMismatch, "need one --mask per --image");
  std::vector<LabeledCase> out;
  for (std::size_t i = 0; i < images.size(); ++i) out.push_back({load_volume(images[i]), load_mask(masks[i])});
  return out;
}

SegConfig member_config(const ExperimentConfig& c, std::size_t member) {
  if (member >= c.segmenter.size()) throw Error(Errc::InvalidArgument, "no segmenter member " + std::to_string(member));
  return resolve_seeds(c).segmenter[member];
}

void print_table(const ResultsTable& t) {
  std::cout << metrics_csv({{"", t}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modality translation and segmentation on phantom volumes"};
  app.require_subcommand(1);
  std::string config;

  auto* phantom = app.add_subcommand("phantom", "generate a phantom dataset");
  std::string ph_out;
  phantom->add_option("--config", config, "experiment config (JSON)");
  phantom->add_option("--out", ph_out, "output directory")->required();

  auto* prep = app.add_subcommand("preprocess", "resample and normalise a phantom dataset");
  std::string prep_in, prep_out;
  prep->add_option("--config", config, "experiment config (JSON)");
  prep->add_option("--in", prep_in, "dataset directory (with manifest.json)")->required();
  prep->add_option("--out", prep_out, "output directory")->required();

  auto* ttrain = app.add_subcommand("train-translate", "train a translator on a preprocessed dataset");
  std::string model = "qsattn", tt_data, tt_out, tt_resume;
  ttrain->add_option("--model", model, "cyclegan | qsattn")->check(CLI::IsMember({"cyclegan", "qsattn"}));
  ttrain->add_option("--config", config, "experiment config (JSON)");
  ttrain->add_option("--data", tt_data, "preprocessed dataset directory")->required();
  ttrain->add_option("--out", tt_out, "checkpoint path")->required();
  ttrain->add_option("--resume", tt_resume, "checkpoint to continue from");

  auto* trans = app.add_subcommand("translate", "translate a volume slice by slice");
  std::string tr_ckpt, tr_in, tr_out;
  std::array<int, 2> crop{0, 0};
  trans->add_option("--ckpt", tr_ckpt, "translator checkpoint")->required();
  trans->add_option("--in", tr_in, "input volume header")->required();
  trans->add_option("--out", tr_out, "output volume header")->required();
  trans->add_option("--crop", crop, "center crop h w (default: full plane)")->expected(2);

  auto* tseg = app.add_subcommand("train-seg", "train one segmenter member");
  std::vector<std::string> images, masks, unlabeled;
  std::size_t member = 0;
  std::string ts_out;
  tseg->add_option("--config", config, "experiment config (JSON)");
  tseg->add_option("--image", images, "training volume (repeatable)")->required();
  tseg->add_option("--mask", masks, "label mask matching each --image")->required();
  tseg->add_option("--member", member, "segmenter member index in the config");
  tseg->add_option("--out", ts_out, "checkpoint path")->required();

  auto* pred = app.add_subcommand("predict", "segment a volume with one checkpoint");
  std::vector<std::string> ckpts;
  std::string pr_in, pr_out, pr_conf;
  pred->add_option("--ckpt", ckpts, "segmenter checkpoint")->required()->expected(1);
  pred->add_option("--in", pr_in, "volume header")->required();
  pred->add_option("--out", pr_out, "mask header")->required();
  pred->add_option("--confidence", pr_conf, "write the max-softmax map to this header");

  auto* ens = app.add_subcommand("ensemble", "segment a volume with the mean softmax of several checkpoints");
  ens->add_option("--ckpt", ckpts, "segmenter checkpoint (repeatable)")->required();
  ens->add_option("--in", pr_in, "volume header")->required();
  ens->add_option("--out", pr_out, "mask header")->required();

  auto* st = app.add_subcommand("self-train", "train, pseudo-label and retrain");
  int rounds = 1;
  double floor = 0.0;
  std::string st_out;
  st->add_option("--config", config, "experiment config (JSON)");
  st->add_option("--image", images, "labeled volume (repeatable)")->required();
  st->add_option("--mask", masks, "label mask matching each --image")->required();
  st->add_option("--unlabeled", unlabeled, "unlabeled volume (repeatable)");
  st->add_option("--rounds", rounds, "pseudo-label rounds")->check(CLI::NonNegativeNumber);
  st->add_option("--confidence-floor", floor, "voxels below this confidence become background")
      ->check(CLI::Range(0.0, 1.0));
  st->add_option("--out", st_out, "output directory")->required();

  auto* ev = app.add_subcommand("evaluate", "Dice and ASSD of predictions against ground truth");
  std::vector<std::string> preds, gts;
  std::string ev_out;
  ev->add_option("--pred", preds, "predicted mask (repeatable)")->required();
  ev->add_option("--gt", gts, "ground-truth mask matching each --pred")->required();
  ev->add_option("--out", ev_out, "CSV path (default: stdout)");

  auto* all = app.add_subcommand("run-all", "run the whole experiment");
  std::string out_root;
  std::vector<std::string> arms;
  all->add_option("--config", config, "experiment config (JSON)");
  all->add_option("--out", out_root, "output root (overrides XMODA_OUT and the config)");
  all->add_option("--arms", arms, "subset of cyclegan, qsattn, multiview")->delimiter(',');

  auto* res = app.add_subcommand("resume", "continue an experiment from its manifest");
  std::string manifest;
  res->add_option("--manifest", manifest, "manifest.json of the experiment")->required();

  auto* rep = app.add_subcommand("report", "rewrite the report of a finished experiment");
  std::string rep_root;
  rep->add_option("--root", rep_root, "experiment output root")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*phantom) {
      const auto c = resolve_seeds(config_or_default(config));
      generate_dataset(c.phantom, c.data.n_labeled, c.data.n_unlabeled, c.data.n_validation, ph_out);
    } else if (*prep) {
      const auto c = config_or_default(config);
      const auto m = read_dataset_manifest(fs::path(prep_in) / "manifest.json");
      for (const auto& e : m.entries) {
        for (const auto* p : {&e.path, &e.target_path})
          if (!p->empty())
            save_volume(preprocess_volume(load_volume(fs::path(prep_in) / *p), c.preprocess), fs::path(prep_out) / *p);
        if (e.has_mask)
          save_mask(preprocess_mask(load_mask(fs::path(prep_in) / e.mask_path), c.preprocess),
                    fs::path(prep_out) / e.mask_path, fs::path(e.mask_path).stem().string());
      }
      fs::copy_file(fs::path(prep_in) / "manifest.json", fs::path(prep_out) / "manifest.json",
                    fs::copy_options::overwrite_existing);
    } else if (*ttrain) {
      const auto c = resolve_seeds(config_or_default(config));
      const TrainConfig& tc = model == "cyclegan" ? c.cyclegan : c.qsattn;
      const auto m = read_dataset_manifest(fs::path(tt_data) / "manifest.json");
      std::vector<Slice2D> s, t;
      for (const auto& e : m.with_role(kRoleSourceLabeled))
        for (auto& sl : prepare_slices(load_volume(fs::path(tt_data) / e.path), c.preprocess.crop, tc.image_size))
          s.push_back(std::move(sl));
      for (const auto& e : m.with_role(kRoleTargetUnlabeled))
        for (auto& sl : prepare_slices(load_volume(fs::path(tt_data) / e.path), c.preprocess.crop, tc.image_size))
          t.push_back(std::move(sl));
      std::optional<Checkpoint> resume;
      if (!tt_resume.empty()) resume = load_checkpoint(tt_resume);
      TrainHooks hooks;
      hooks.on_epoch = [&](const Checkpoint& ck) {
        const auto& e = ck.loss_history.back();
        std::string line = "epoch " + std::to_string(ck.epoch);
        for (const auto& [k, v] : e) line += " " + k + "=" + fixed6(v);
        log_line(line);
        save_checkpoint(ck, tt_out);
      };
      hooks.on_divergence = [&](const Checkpoint& ck) { save_checkpoint(ck, tt_out); };
      const auto ck = model == "cyclegan" ? train_cyclegan(s, t, tc, hooks, resume ? &*resume : nullptr)
                                          : train_qsattn(s, t, tc, hooks, resume ? &*resume : nullptr);
      save_checkpoint(ck, tt_out);
    } else if (*trans) {
      save_volume(translate_volume(load_checkpoint(tr_ckpt), load_volume(tr_in), crop), tr_out);
    } else if (*tseg) {
      const auto cfg = member_config(config_or_default(config), member);
      SegHooks hooks;
      hooks.on_epoch = [&](const Checkpoint& ck) {
        log_line("epoch " + std::to_string(ck.epoch) + " loss=" + fixed6(ck.loss_history.back().at("loss")));
      };
      save_checkpoint(train_segmenter(labeled_cases(images, masks), cfg, hooks), ts_out);
    } else if (*pred) {
      const auto p = predict(load_checkpoint(ckpts.front()), load_volume(pr_in));
      save_mask(p.mask, pr_out, p.confidence.origin_id);
      if (!pr_conf.empty()) save_volume(p.confidence, pr_conf);
    } else if (*ens) {
      std::vector<Checkpoint> members;
      for (const auto& c : ckpts) members.push_back(load_checkpoint(c));
      const Volume v = load_volume(pr_in);
      save_mask(ensemble_predict(members, v), pr_out, v.origin_id);
    } else if (*st) {
      const auto c = resolve_seeds(config_or_default(config));
      std::vector<Volume> unl;
      for (const auto& u : unlabeled) unl.push_back(load_volume(u));
      const auto r = self_train(labeled_cases(images, masks), unl, c.segmenter, rounds, floor, nullptr,
                                [](const RoundRecord& rec) { log_line("round " + std::to_string(rec.round) + " done"); });
      const fs::path out(st_out);
      nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
      for (const auto& rec : r.rounds) {
        nlohmann::ordered_json j;
        j["round"] = rec.round;
        j["checkpoint_hashes"] = rec.checkpoint_hashes;
        j["training_set_size"] = rec.training_set_size;
        j["pseudo_labels"] = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < rec.pseudo_labels.size(); ++i) {
          const std::string rel = "round" + std::to_string(rec.round) + "/pseudo_" + std::to_string(i) + ".vvol";
          save_mask(rec.pseudo_labels[i], out / rel, unl[i].origin_id);
          j["pseudo_labels"].push_back({{"volume", unlabeled[i]}, {"mask", rel}, {"hash", rec.pseudo_label_hashes[i]}});
        }
        manifest.push_back(j);
      }
      for (std::size_t i = 0; i < r.members.size(); ++i)
        save_checkpoint(r.members[i], out / ("member" + std::to_string(i) + ".ckpt"));
      write_file_atomic(out / "rounds.json", manifest.dump(2) + "\n");
    } else if (*ev) {
      if (preds.size() != gts.size()) throw Error(Errc::LengthMismatch, "need one --gt per --pred");
      std::vector<LabelMask> p, g;
      std::vector<std::string> ids;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        p.push_back(load_mask(preds[i]));
        g.push_back(load_mask(gts[i]));
        ids.push_back(fs::path(preds[i]).stem().string());
      }
      const auto t = evaluate_cases(p, g, g.front().spacing, ids);
      if (ev_out.empty()) print_table(t);
      else write_file_atomic(ev_out, metrics_csv({{"", t}}));
    } else if (*all) {
      auto c = config_or_default(config);
      if (!arms.empty()) c.arms = arms;
      RunOptions opt;
      opt.log = log_line;
      if (!out_root.empty()) opt.root = out_root;
      const auto r = run_pipeline(c, opt);
      // Wall time stays out of the manifest so reruns compare byte-for-byte.
      for (const auto& [stage, sec] : r.timings) log_line("time  " + stage + " " + fixed6(sec) + " s");
      for (const auto& a : r.arms)
        for (std::size_t k = 0; k < a.rounds.size(); ++k)
          std::cout << a.arm << " round" << k << " dice_mean " << fixed6(a.rounds[k].agg("dice_mean").mean) << "\n";
    } else if (*res) {
      resume_pipeline(manifest, log_line);
    } else if (*rep) {
      const fs::path root(rep_root);
      const auto m = nlohmann::json::parse(detail::read_file(root / "manifest.json"));
      const auto c = resolve_seeds(m.at("config").get<ExperimentConfig>());
      std::vector<ArmResult> results;
      std::vector<std::string> models;
      for (const auto& arm : canonical_arms(c.arms)) {
        ArmResult a;
        a.arm = arm;
        for (int r = 0; r <= c.self_training.rounds; ++r) a.rounds.push_back(score_round(arm, r, root));
        results.push_back(std::move(a));
        for (const auto& mm : arm_models(arm))
          if (std::find(models.begin(), models.end(), mm) == models.end()) models.push_back(mm);
      }
      std::sort(models.begin(), models.end());
      std::vector<MontageSpec> montages;
      if (c.eval.montage_cases > 0 && c.data.n_validation > 0) montages.push_back(build_montage(c, models, root));
      for (const auto& f : emit_report(labelled_tables(results), arm_comparisons(results), montages, root / "report"))
        std::cout << (root / "report" / f).string() << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "xmoda: " << errc_name(e.code()) << ": " << e.what() << std::endl;
    return 2;
  }
  return 0;
}

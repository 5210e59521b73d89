#include <gtest/gtest.h>

#include <cstdlib>

#include "xmoda/pipeline.hpp"

using namespace xmoda;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.master_seed = 11;
  c.phantom.volume_shape = {8, 32, 32};
  c.phantom.vs_radius_range = {3.0, 4.0};
  c.phantom.cochlea_radius_range = {2.0, 2.5};
  c.data = {2, 2, 2};
  c.preprocess.crop = {32, 32};
  c.preprocess.image_size = 32;
  for (TrainConfig* t : {&c.cyclegan, &c.qsattn}) {
    t->epochs = 1;
    t->iters_per_epoch = 2;
    t->image_size = 32;
    t->generator.base_width = 4;
    t->generator.n_resblocks = 1;
    t->discriminator.base_width = 4;
  }
  SegConfig s;
  s.base_width = 4;
  s.epochs = 1;
  s.iters_per_epoch = 2;
  s.patch_size = {8, 16, 16};
  c.segmenter = {s};
  c.eval.montage_cases = 1;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("xmoda_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

RunOptions at(const fs::path& root, bool resume = false) {
  RunOptions o;
  o.root = root;
  o.resume = resume;
  return o;
}

std::vector<std::string> stage_names(const nlohmann::ordered_json& m) {
  std::vector<std::string> out;
  for (const auto& s : m.at("stages")) out.push_back(s.at("name").get<std::string>());
  return out;
}

}  // namespace

TEST(Pipeline, ConfigValidation) {
  auto c = tiny_config();
  c.config_version = 2;
  try {
    check(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ConfigInvalid);
  }
  c = tiny_config();
  c.arms = {"cyclegan", "cyclegan"};
  EXPECT_THROW(check(c), Error);
  c.arms = {"pix2pix"};
  EXPECT_THROW(check(c), Error);
  c = tiny_config();
  c.qsattn.image_size = 48;
  EXPECT_THROW(check(c), Error);
  c = tiny_config();
  c.self_training.confidence_floor = 2;
  EXPECT_THROW(check(c), Error);
  EXPECT_EQ(canonical_arms({"multiview", "cyclegan"}), (std::vector<std::string>{"cyclegan", "multiview"}));
}

TEST(Pipeline, ConfigJsonRoundTrip) {
  const auto c = tiny_config();
  const nlohmann::json j = c;
  EXPECT_EQ(nlohmann::json(j.get<ExperimentConfig>()), j);
  const fs::path dir = fresh_dir("cfg");
  fs::create_directories(dir);
  write_file_atomic(dir / "c.json", j.dump());
  EXPECT_EQ(nlohmann::json(load_experiment_config(dir / "c.json")), j);
  write_file_atomic(dir / "bad.json", "{\"config_version\": \"one\"}");
  EXPECT_THROW(load_experiment_config(dir / "bad.json"), Error);
}

TEST(Pipeline, PartialNestedConfigKeepsDefaults) {
  const fs::path dir = fresh_dir("partial");
  fs::create_directories(dir);
  write_file_atomic(dir / "p.json",
                    R"({"config_version": 1, "cyclegan": {"epochs": 2, "discriminator": {"base_width": 8}},
                        "phantom": {"volume_shape": [16, 48, 48]}})");
  const auto c = load_experiment_config(dir / "p.json");
  const ExperimentConfig d;
  EXPECT_EQ(c.cyclegan.epochs, 2);
  EXPECT_EQ(c.cyclegan.discriminator.base_width, 8);
  EXPECT_EQ(c.cyclegan.discriminator.kind, d.cyclegan.discriminator.kind);
  EXPECT_EQ(c.cyclegan.discriminator.n_down, d.cyclegan.discriminator.n_down);
  EXPECT_EQ(c.cyclegan.lr, d.cyclegan.lr);
  EXPECT_EQ(c.phantom.spacing, d.phantom.spacing);
  EXPECT_EQ(c.qsattn.nce_head_width, d.qsattn.nce_head_width);
}

TEST(Pipeline, SubSeedsComeFromMasterSeed) {
  auto c = tiny_config();
  c.cyclegan.seed = 123;
  const auto r = resolve_seeds(c);
  EXPECT_EQ(r.cyclegan.seed, derive_seed(11, "translator/cyclegan"));
  EXPECT_EQ(r.phantom.seed, derive_seed(11, "phantom"));
  EXPECT_NE(r.cyclegan.seed, r.qsattn.seed);
}

TEST(Pipeline, EnvironmentOverridesOutputRoot) {
  auto c = tiny_config();
  c.output_root = "configured";
  ::unsetenv("XMODA_OUT");
  EXPECT_EQ(output_root(c), fs::path("configured"));
  ::setenv("XMODA_OUT", "/tmp/elsewhere", 1);
  EXPECT_EQ(output_root(c), fs::path("/tmp/elsewhere"));
  ::unsetenv("XMODA_OUT");
}

TEST(Pipeline, SingleArmHasNoCrossArmTests) {
  auto c = tiny_config();
  c.arms = {"cyclegan"};
  const auto r = run_pipeline(c, at(fresh_dir("single")));
  ASSERT_EQ(r.arms.size(), 1u);
  EXPECT_EQ(r.arms[0].arm, "cyclegan");
  EXPECT_EQ(r.manifest.at("arms").size(), 1u);
  for (const auto& cmp : r.comparisons) EXPECT_EQ(cmp.a.rfind("cyclegan/round", 0), 0u) << cmp.a << " vs " << cmp.b;
  const auto names = stage_names(r.manifest);
  EXPECT_EQ(std::count(names.begin(), names.end(), "train-translator/qsattn"), 0);
  EXPECT_TRUE(fs::exists(r.root / "report" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(r.root / "report" / "montage.pgm"));
}

class FullPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fresh_dir("full"));
    result_ = new ExperimentResult(run_pipeline(tiny_config(), at(*root_)));
  }
  static void TearDownTestSuite() {
    delete result_;
    delete root_;
  }
  static fs::path* root_;
  static ExperimentResult* result_;
};

fs::path* FullPipeline::root_ = nullptr;
ExperimentResult* FullPipeline::result_ = nullptr;

TEST_F(FullPipeline, MultiviewTrainingSetIsUnion) {
  ASSERT_EQ(result_->arms.size(), 3u);
  EXPECT_EQ(result_->arms[2].arm, "multiview");
  EXPECT_EQ(result_->arms[2].training_set_size,
            result_->arms[0].training_set_size + result_->arms[1].training_set_size);
  EXPECT_EQ(result_->arms[0].training_set_size, 2);
  for (const auto& a : result_->arms) {
    ASSERT_EQ(a.rounds.size(), 2u);
    EXPECT_EQ(a.rounds[0].cases.size(), 2u);
  }
  // Three cross-arm pairs x 3 metrics, plus one round comparison per arm.
  EXPECT_EQ(result_->comparisons.size(), 12u);
}

TEST_F(FullPipeline, RerunIsByteIdentical) {
  const fs::path other = fresh_dir("full_rerun");
  const auto r = run_pipeline(tiny_config(), at(other));
  EXPECT_EQ(detail::read_file(other / "report" / "metrics.csv"), detail::read_file(*root_ / "report" / "metrics.csv"));
  EXPECT_EQ(detail::read_file(other / "manifest.json"), detail::read_file(*root_ / "manifest.json"));
  EXPECT_EQ(detail::read_file(other / "report" / "montage.pgm"), detail::read_file(*root_ / "report" / "montage.pgm"));
}

TEST_F(FullPipeline, ResumeAfterCompletionIsNoOp) {
  const std::string before = detail::read_file(*root_ / "manifest.json");
  std::vector<std::string> log;
  auto opt = at(*root_, true);
  opt.log = [&](const std::string& s) { log.push_back(s); };
  run_pipeline(tiny_config(), opt);
  for (const auto& l : log) EXPECT_EQ(l.rfind("skip", 0), 0u) << l;
  EXPECT_EQ(detail::read_file(*root_ / "manifest.json"), before);
}

TEST_F(FullPipeline, DeletedDownstreamArtifactsAreReproduced) {
  const fs::path copy = fresh_dir("full_copy");
  fs::copy(*root_, copy, fs::copy_options::recursive);
  const std::string ckpt_hash = hash_file(copy / "translators" / "qsattn.ckpt");
  const auto ckpt_time = fs::last_write_time(copy / "translators" / "qsattn.ckpt");
  fs::remove_all(copy / "seg");
  fs::remove_all(copy / "eval");
  fs::remove_all(copy / "report");
  std::vector<std::string> ran;
  StageRunner::Log log = [&](const std::string& s) {
    if (s.rfind("run", 0) == 0) ran.push_back(s);
  };
  resume_pipeline(copy / "manifest.json", log);
  for (const auto& r : ran) EXPECT_EQ(r.find("translat"), std::string::npos) << r;
  EXPECT_FALSE(ran.empty());
  EXPECT_EQ(hash_file(copy / "translators" / "qsattn.ckpt"), ckpt_hash);
  EXPECT_EQ(fs::last_write_time(copy / "translators" / "qsattn.ckpt"), ckpt_time);
  for (const auto& f : files_under(*root_, "seg"))
    EXPECT_EQ(hash_file(copy / f), hash_file(*root_ / f)) << f;
  EXPECT_EQ(detail::read_file(copy / "report" / "metrics.csv"), detail::read_file(*root_ / "report" / "metrics.csv"));
  EXPECT_EQ(detail::read_file(copy / "manifest.json"), detail::read_file(*root_ / "manifest.json"));
}

TEST_F(FullPipeline, CorruptCheckpointStopsResume) {
  const fs::path copy = fresh_dir("full_corrupt");
  fs::copy(*root_, copy, fs::copy_options::recursive);
  {
    std::fstream f(copy / "seg" / "qsattn" / "round0" / "member0.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-3, std::ios::end);
    f.put('\x7f');
  }
  try {
    resume_pipeline(copy / "manifest.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::HashMismatch);
  }
}

TEST_F(FullPipeline, ResumeRejectsChangedConfig) {
  auto c = tiny_config();
  c.self_training.rounds = 2;
  EXPECT_THROW(run_pipeline(c, at(*root_, true)), Error);
}

TEST_F(FullPipeline, MetricsCsvShape) {
  const std::string csv = detail::read_file(*root_ / "report" / "metrics.csv");
  EXPECT_EQ(csv.rfind("case_id,dice_vs,dice_cochlea,dice_mean,assd_vs,assd_cochlea\n", 0), 0u);
  for (const std::string arm : {"cyclegan", "qsattn", "multiview"})
    for (const std::string r : {"round0", "round1"}) {
      EXPECT_NE(csv.find(arm + "/" + r + "/AGG_mean,"), std::string::npos);
      EXPECT_NE(csv.find(arm + "/" + r + "/AGG_sd,"), std::string::npos);
    }
  EXPECT_TRUE(fs::exists(*root_ / "report" / "comparisons.csv"));
}

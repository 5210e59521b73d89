#include <gtest/gtest.h>

#include "xmoda/phantom.hpp"
#include "xmoda/self_training.hpp"

using namespace xmoda;

namespace {

struct Data {
  std::vector<LabeledCase> labeled;
  std::vector<Volume> unlabeled;
  std::vector<LabeledCase> validation;
};

Data make_data(std::uint64_t seed) {
  PhantomParams p;
  p.seed = seed;
  Data d;
  for (int i = 0; i < 2; ++i) {
    auto c = generate_case(p, i);
    d.labeled.push_back({c.source, c.mask});
  }
  for (int i = 2; i < 5; ++i) d.unlabeled.push_back(generate_case(p, i).source);
  auto c = generate_case(p, 5);
  d.validation.push_back({c.source, c.mask});
  return d;
}

SegConfig tiny(std::uint64_t seed) {
  SegConfig c;
  c.seed = seed;
  c.base_width = 4;
  c.epochs = 1;
  c.iters_per_epoch = 3;
  c.patch_size = {8, 16, 16};
  return c;
}

}  // namespace

TEST(SelfTraining, ZeroRoundsIsPlainTraining) {
  const auto d = make_data(1);
  const auto cfg = tiny(2);
  const auto r = self_train(d.labeled, d.unlabeled, cfg, 0, 0.0);
  const auto plain = train_segmenter(d.labeled, cfg);
  ASSERT_EQ(r.members.size(), 1u);
  EXPECT_EQ(r.members[0].loss_history, plain.loss_history);
  EXPECT_EQ(r.members[0].arrays, plain.arrays);
  ASSERT_EQ(r.rounds.size(), 1u);
  EXPECT_EQ(r.rounds[0].round, 0);
  EXPECT_TRUE(r.rounds[0].pseudo_labels.empty());
  EXPECT_EQ(r.rounds[0].training_set_size, 2);
}

TEST(SelfTraining, EveryRoundLabelsEveryUnlabeledCase) {
  const auto d = make_data(2);
  const auto r = self_train(d.labeled, d.unlabeled, tiny(3), 2, 0.0);
  ASSERT_EQ(r.rounds.size(), 3u);
  for (int k = 1; k <= 2; ++k) {
    EXPECT_EQ(r.rounds[k].round, k);
    EXPECT_EQ(r.rounds[k].pseudo_labels.size(), d.unlabeled.size());
    EXPECT_EQ(r.rounds[k].pseudo_label_hashes.size(), d.unlabeled.size());
    // Pseudo-labels replace the previous round's set.
    EXPECT_EQ(r.rounds[k].training_set_size, 5);
  }
}

TEST(SelfTraining, ZeroFloorGivesRawPredictions) {
  const auto d = make_data(3);
  const auto cfg = tiny(4);
  const auto r = self_train(d.labeled, d.unlabeled, cfg, 1, 0.0);
  const auto base = train_segmenter(d.labeled, cfg);
  for (std::size_t i = 0; i < d.unlabeled.size(); ++i)
    EXPECT_EQ(r.rounds[1].pseudo_labels[i], predict(base, d.unlabeled[i]).mask);
}

TEST(SelfTraining, FloorMovesLowConfidenceToBackground) {
  const auto d = make_data(4);
  const auto base = train_segmenter(d.labeled, tiny(5));
  const auto full = predict(base, d.unlabeled[0]);
  const double floor = 0.7;
  const auto m = pseudo_label({base}, d.unlabeled[0], floor);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    if (full.confidence.data[i] < floor) {
      EXPECT_EQ(m.data[i], 0);
    } else {
      EXPECT_EQ(m.data[i], full.mask.data[i]);
    }
  }
  // A floor of 1 keeps only voxels with saturated confidence.
  const auto all = pseudo_label({base}, d.unlabeled[0], 1.0);
  for (std::size_t i = 0; i < all.data.size(); ++i)
    if (full.confidence.data[i] < 1.0f) EXPECT_EQ(all.data[i], 0);
}

TEST(SelfTraining, PseudoLabelsReproducibleFromRoundCheckpoint) {
  const auto d = make_data(5);
  const auto cfg = tiny(6);
  const auto r = self_train(d.labeled, d.unlabeled, std::vector<SegConfig>{cfg}, 1, 0.3);
  // The round-0 model is a plain training run on the labeled set.
  const std::vector<Checkpoint> prev{train_segmenter(d.labeled, cfg)};
  EXPECT_EQ(checkpoint_hash(prev[0]), r.rounds[0].checkpoint_hashes[0]);
  for (std::size_t i = 0; i < d.unlabeled.size(); ++i)
    EXPECT_EQ(mask_hash(pseudo_label(prev, d.unlabeled[i], 0.3)), r.rounds[1].pseudo_label_hashes[i]);
}

TEST(SelfTraining, DeterministicRecords) {
  const auto d = make_data(6);
  std::vector<SegConfig> members{tiny(7), tiny(8)};
  members[1].mode = "2d";
  const auto a = self_train(d.labeled, d.unlabeled, members, 1, 0.0, &d.validation);
  const auto b = self_train(d.labeled, d.unlabeled, members, 1, 0.0, &d.validation);
  EXPECT_EQ(a.rounds, b.rounds);
  ASSERT_TRUE(a.rounds[1].validation.has_value());
  EXPECT_EQ(a.rounds[1].validation->cases.size(), 1u);
  EXPECT_EQ(a.rounds[1].checkpoint_hashes.size(), 2u);
}

TEST(SelfTraining, ArgumentChecks) {
  const auto d = make_data(7);
  try {
    self_train({}, d.unlabeled, tiny(1), 1, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyLabeledSet);
  }
  EXPECT_THROW(self_train(d.labeled, d.unlabeled, tiny(1), -1, 0.0), Error);
  EXPECT_THROW(self_train(d.labeled, d.unlabeled, tiny(1), 1, 1.5), Error);
  EXPECT_THROW(self_train(d.labeled, d.unlabeled, tiny(1), 1, -0.1), Error);
}

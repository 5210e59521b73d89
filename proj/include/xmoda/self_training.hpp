#pragma once

// Pseudo-label self-training around the segmenter.
//
// Round 0 trains on the labeled set. Round r >= 1 labels every unlabeled
// volume with the round r-1 model (or ensemble), drops voxels whose
// confidence is below the floor to background, and retrains from a fresh
// initialisation on labeled + pseudo-labeled cases.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "xmoda/checkpoint.hpp"
#include "xmoda/error.hpp"
#include "xmoda/metrics.hpp"
#include "xmoda/segmenter.hpp"

namespace xmoda {

struct RoundRecord {
  int round = 0;
  std::vector<std::string> checkpoint_hashes;  // one per ensemble member
  std::vector<LabelMask> pseudo_labels;        // one per unlabeled case, empty at round 0
  std::vector<std::string> pseudo_label_hashes;
  std::int64_t training_set_size = 0;
  std::optional<ResultsTable> validation;

  bool operator==(const RoundRecord&) const = default;
};

struct SelfTrainResult {
  std::vector<Checkpoint> members;
  std::vector<RoundRecord> rounds;
};

inline std::string mask_hash(const LabelMask& m) {
  return hash_bytes(std::string_view(reinterpret_cast<const char*>(m.data.data()), m.data.size()));
}

inline std::string checkpoint_hash(const Checkpoint& c) { return hash_bytes(serialize_checkpoint(c)); }

/// Ensemble argmax with voxels below `confidence_floor` set to background.
inline LabelMask pseudo_label(const std::vector<Checkpoint>& members, const Volume& vol, double confidence_floor) {
  auto p = ensemble_predict_full(members, vol);
  for (std::size_t i = 0; i < p.mask.data.size(); ++i)
    if (p.confidence.data[i] < confidence_floor) p.mask.data[i] = 0;
  return p.mask;
}

inline std::vector<Checkpoint> train_members(const std::vector<LabeledCase>& cases,
                                             const std::vector<SegConfig>& members) {
  std::vector<Checkpoint> out;
  for (const auto& cfg : members) out.push_back(train_segmenter(cases, cfg));
  return out;
}

inline ResultsTable validate_members(const std::vector<Checkpoint>& members, const std::vector<LabeledCase>& val) {
  std::vector<LabelMask> preds, gts;
  std::vector<std::string> ids;
  for (const auto& c : val) {
    preds.push_back(ensemble_predict(members, c.image));
    gts.push_back(c.mask);
    ids.push_back(c.image.origin_id);
  }
  return evaluate_cases(preds, gts, val.front().image.spacing, ids);
}

inline void check_self_train_args(const std::vector<LabeledCase>& labeled, const std::vector<SegConfig>& members,
                                  int rounds, double confidence_floor) {
  if (labeled.empty()) throw Error(Errc::EmptyLabeledSet, "self-training needs at least one labeled case");
  if (members.empty()) throw Error(Errc::EmptyEnsemble, "self-training needs at least one segmenter config");
  if (rounds < 0) throw Error(Errc::InvalidArgument, "rounds must be >= 0");
  if (!(confidence_floor >= 0.0 && confidence_floor <= 1.0))
    throw Error(Errc::InvalidArgument, "confidence_floor must lie in [0, 1]");
}

/// Runs rounds 0..`rounds`; pseudo-labels replace (never accumulate) the
/// previous round's. `validation` cases, when given, are scored every round.
inline SelfTrainResult self_train(const std::vector<LabeledCase>& labeled, const std::vector<Volume>& unlabeled,
                                  const std::vector<SegConfig>& members, int rounds, double confidence_floor,
                                  const std::vector<LabeledCase>* validation = nullptr,
                                  const std::function<void(const RoundRecord&)>& on_round = {}) {
  check_self_train_args(labeled, members, rounds, confidence_floor);
  SelfTrainResult res;
  auto finish_round = [&](RoundRecord rec, std::int64_t n_train) {
    rec.training_set_size = n_train;
    for (const auto& c : res.members) rec.checkpoint_hashes.push_back(checkpoint_hash(c));
    if (validation && !validation->empty()) rec.validation = validate_members(res.members, *validation);
    if (on_round) on_round(rec);
    res.rounds.push_back(std::move(rec));
  };

  res.members = train_members(labeled, members);
  finish_round(RoundRecord{}, static_cast<std::int64_t>(labeled.size()));

  for (int r = 1; r <= rounds; ++r) {
    RoundRecord rec;
    rec.round = r;
    std::vector<LabeledCase> train = labeled;
    for (const auto& v : unlabeled) {
      LabelMask m = pseudo_label(res.members, v, confidence_floor);
      rec.pseudo_label_hashes.push_back(mask_hash(m));
      train.push_back({v, m});
      rec.pseudo_labels.push_back(std::move(m));
    }
    res.members = train_members(train, members);
    finish_round(std::move(rec), static_cast<std::int64_t>(train.size()));
  }
  return res;
}

inline SelfTrainResult self_train(const std::vector<LabeledCase>& labeled, const std::vector<Volume>& unlabeled,
                                  const SegConfig& cfg, int rounds, double confidence_floor) {
  return self_train(labeled, unlabeled, std::vector<SegConfig>{cfg}, rounds, confidence_floor);
}

}  // namespace xmoda

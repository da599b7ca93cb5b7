#pragma once

#include <string>
#include <vector>

#include "seqdvc/data.hpp"
#include "seqdvc/numerics.hpp"
#include "seqdvc/pretraining.hpp"

// Per-frame semantic concept features: a bidirectional LSTM classifies each
// frame against a small concept vocabulary and an event-boundary class, and
// its concatenated forward/backward hidden states become extra feature
// columns next to the appearance features.

namespace seqdvc {

struct ConceptVocab {
  std::vector<std::string> labels;  // unique, frequency-ranked

  int size() const { return static_cast<int>(labels.size()); }
  int index_of(const std::string& label) const;  // -1 when absent
};

// Top-k content words over all captions, ranked by frequency then
// alphabetically. Content words are whatever the small function-word lexicon
// does not filter out; at desk scale that leaves the activity vocabulary.
ConceptVocab build_concept_vocab(const Dataset& data, int k);

// Frame-level boundary classes. One label per frame; when events overlap the
// strongest claim wins (start over end over middle), so a one-frame event is
// its own start.
inline constexpr int kBoundaryStart = 0;
inline constexpr int kBoundaryMiddle = 1;
inline constexpr int kBoundaryEnd = 2;
inline constexpr int kBoundaryOutside = 3;
inline constexpr int kBoundaryClasses = 4;

struct FrameTargets {
  Mat concepts;               // n x K, bit k set iff a containing event's
                              // caption uses label k
  std::vector<int> boundary;  // n entries in {start, middle, end, outside}
};

FrameTargets frame_targets(const DenseVideoRecord& rec, const ConceptVocab& vocab);

struct CptConfig {
  int width = 32;  // per-direction hidden size; feature width is twice this
  int steps = 1000;
  int batch_size = 4;
  double lr = 1e-3;
  std::uint64_t seed = 1;
};

class Cpt {
 public:
  Cpt() = default;
  static Cpt init(int feature_dim, int width, int n_concepts, std::uint64_t seed);

  int feature_dim() const { return feature_dim_; }
  int width() const { return width_; }
  int n_concepts() const { return n_concepts_; }

  // n x 2*width: forward hidden states next to backward ones, row-aligned
  // with the input frames.
  Var hidden_states(const Mat& video) const;
  Var concept_logits(const Var& hidden) const;   // n x K
  Var boundary_logits(const Var& hidden) const;  // n x 4

  Mat extract(const Mat& video) const;  // hidden_states value, no training use

  std::vector<std::pair<std::string, Var>> parameters() const;
  std::vector<Var> parameter_vars() const;
  void save(const std::string& path) const;
  static Cpt load(int feature_dim, int width, int n_concepts, const std::string& path);

 private:
  Var run_direction(const Mat& video, bool backward) const;

  int feature_dim_ = 0;
  int width_ = 0;
  int n_concepts_ = 0;
  Var fwd_wx_, fwd_wh_, fwd_b_;
  Var bwd_wx_, bwd_wh_, bwd_b_;
  Var concept_w_, concept_b_;
  Var boundary_w_, boundary_b_;
};

struct CptTrainResult {
  std::vector<LossPoint> curve;  // tasks "concept" and "boundary" per step
};

// Multi-label concept BCE plus boundary cross entropy, equally weighted,
// averaged over frames, Adam over all parameters.
CptTrainResult train_cpt(Cpt& model, const Dataset& data, const ConceptVocab& vocab,
                         const CptConfig& cfg);

struct CptEval {
  double concept_f1 = 0.0;         // micro F1 at probability 0.5
  double boundary_accuracy = 0.0;  // argmax class hit rate
};

CptEval evaluate_cpt(const Cpt& model, const Dataset& data, const ConceptVocab& vocab);

// [appearance | concept] feature concatenation.
Mat augment_features(const Mat& appearance, const Cpt& model);
Dataset augment_dataset(const Dataset& data, const Cpt& model);

}  // namespace seqdvc

#pragma once

#include <map>
#include <string>
#include <vector>

#include "seqdvc/data.hpp"
#include "seqdvc/event_codec.hpp"

// Evaluation quantities for event detection and captioning: temporal IoU,
// any-match detection precision/recall, event-diversity self-tIoU, sentence
// metrics (BLEU@4, METEOR-lite, CIDEr), captioning-at-tIoU, and SODA-style
// order-preserving matched scoring in two reference-aggregation modes.
//
// Everything here is a pure function of its inputs; reductions run in a
// fixed order so corpus scores are bit-reproducible.

namespace seqdvc {

// Thresholds the detection report averages over.
const std::vector<double>& default_tiou_thresholds();  // {0.3, 0.5, 0.7, 0.9}

// Intersection over union of two closed intervals. Identical degenerate
// points give 1, disjoint degenerate points give 0.
double tiou(const TimeInterval& a, const TimeInterval& b);

// Mean tIoU over unordered event pairs of one video; 0 with fewer than two
// events.
double self_tiou_video(const std::vector<TimeInterval>& events);

// Corpus value: mean of the per-video self-tIoU.
double self_tiou(const std::vector<std::vector<TimeInterval>>& per_video);

struct DetectionReport {
  std::map<double, double> recall;     // threshold -> percent of GT hit
  std::map<double, double> precision;  // threshold -> percent of predictions matched
  double avg_recall = 0.0;             // mean over thresholds, percent
  double avg_precision = 0.0;
  double self_tiou = 0.0;              // [0,1], over predictions
  double events_per_video = 0.0;
};

// Any-match counting: a GT event is recalled when ANY prediction reaches the
// threshold, and a prediction is precise when it reaches ANY GT event. The
// match is deliberately non-exclusive; overlapping duplicates are not
// penalized here. Scores are per-video fractions averaged over reference
// videos. A reference video missing from the submission counts as an empty
// prediction list. Submission ids outside the reference set throw.
DetectionReport detection_pr(
    const Submission& sub, const std::vector<AnnotationRecord>& refs,
    const std::vector<double>& thresholds = default_tiou_thresholds());

// BLEU@4 against the reference set: clipped n-gram precision with add-one
// smoothing when an order has zero matches, orders longer than the candidate
// count as vacuously perfect (the brevity penalty carries the length
// signal), closest-reference brevity penalty. Empty candidate scores 0.
double bleu4(const std::string& candidate,
             const std::vector<std::string>& references);

// Exact-unigram METEOR variant with no lexical resources: recall-weighted
// harmonic mean F = P*R / (0.9*P + 0.1*R) scaled by a chunk penalty
// 1 - 0.5 * frag^3, where frag = (chunks - 1) / max(1, matches - 1) over a
// leftmost greedy alignment. Best reference wins. No matches scores 0.
double meteor_lite(const std::string& candidate,
                   const std::vector<std::string>& references);

// Corpus statistics for CIDEr. One document per video: all its reference
// sentences pooled. idf(g) = ln(n_documents / df), with df floored at 1.
class CiderContext {
 public:
  static CiderContext build(const std::vector<std::vector<std::string>>& documents);

  // Mean over references of the per-order tf-idf cosine, averaged over
  // n-gram orders 1..4 and scaled by 10. An order where either vector is
  // empty contributes 0.
  double score(const std::string& candidate,
               const std::vector<std::string>& references) const;

  double n_documents() const { return n_documents_; }

 private:
  std::map<std::string, double> idf_;
  double n_documents_ = 0.0;
};

// Per-candidate CIDEr with document frequencies taken from the reference
// corpus (candidates[i] scored against references[i]).
std::vector<double> cider(const std::vector<std::string>& candidates,
                          const std::vector<std::vector<std::string>>& references);

struct CaptioningReport {
  double threshold = 0.0;
  double bleu4 = 0.0;
  double meteor_lite = 0.0;
  double cider = 0.0;
};

// Each predicted event is scored against every reference sentence whose
// event reaches the tIoU threshold; no qualifying reference scores 0. Means
// are taken over predictions within a video, then over reference videos.
// Videos without predictions contribute nothing (the 0 convention would
// reward empty submissions). CIDEr document frequencies come from the
// reference corpus.
CaptioningReport captioning_at_tiou(const Submission& sub,
                                    const std::vector<AnnotationRecord>& refs,
                                    double threshold = 0.9);

enum class SodaInner { MeteorLite, CiderSentence };
enum class SodaMode { Old, Mr };

struct SodaVideoScore {
  std::string video_id;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct SodaReport {
  SodaMode mode = SodaMode::Old;
  SodaInner inner = SodaInner::MeteorLite;
  std::vector<SodaVideoScore> videos;  // reference corpus order
  double precision = 0.0;              // corpus means over videos
  double recall = 0.0;
  double f1 = 0.0;
};

// Maximum total score of an order-preserving one-to-one partial matching
// over a grid of pair scores (rows = generated, cols = reference).
double soda_best_matching_sum(const Mat& pair_scores);

// Order-preserving matched captioning score. Pair score is
// inner(sentences) * tiou(events); both sides are sorted temporally first.
// Per video: precision = sum / |generated|, recall = sum / |reference|,
// f1 their harmonic mean. Old mode runs each reference set separately and
// averages precision and recall over sets before forming f1. Mr mode runs
// one grid whose column j scores the best j-th event across sets, with the
// recall denominator the mean reference count. Corpus values are per-video
// means. Every set must cover the same video ids; submission ids outside
// them throw. Empty generated list scores 0.
SodaReport soda(const Submission& sub,
                const std::vector<std::vector<AnnotationRecord>>& reference_sets,
                SodaInner inner = SodaInner::MeteorLite,
                SodaMode mode = SodaMode::Old);

}  // namespace seqdvc

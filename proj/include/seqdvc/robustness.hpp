#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seqdvc/data.hpp"
#include "seqdvc/rng.hpp"

// Adverse submission perturbations and the metric audit built on them. The
// audit scores a submission before and after each perturbation with both the
// permissive detection/captioning metrics and the matched SODA scores, so
// the gap between the two metric families is visible in one table.

namespace seqdvc {

enum class PerturbOp { Increase, Reduce, Exchange, Extreme };

struct PerturbConfig {
  PerturbOp operation = PerturbOp::Increase;
  double p_increase = 0.4;   // per video: duplicate the first event
  double p_reduce = 0.15;    // per later event: remove it
  std::vector<std::uint64_t> seeds = {1, 2, 3};

  void validate() const;  // probabilities in [0,1], at least one seed
};

// Events are sorted temporally before anything else, so "first" always means
// temporally first. Increase appends a copy of the first event (and its
// caption) with p_increase per video; Reduce runs an independent p_reduce
// removal trial for every event after the first; Exchange is Increase then
// Reduce on its output; Extreme keeps only the first event. Videos with no
// events pass through unchanged. Draws happen in canonical video order, one
// video at a time, so a seeded rng reproduces the perturbation exactly.
Submission perturb(const Submission& sub, const PerturbConfig& cfg, Rng& rng);

struct AuditRow {
  std::string operation;  // "original", "increase", "reduce", "exchange", "extreme"
  std::uint64_t seed = 0;
  bool is_mean = false;   // mean over seeds (the original row is exact)
  double avg_recall = 0.0;
  double avg_precision = 0.0;
  double bleu4 = 0.0;
  double cider = 0.0;
  double meteor_lite = 0.0;
  double soda_old = 0.0;
  double soda_mr = 0.0;
};

struct AuditReport {
  double captioning_threshold = 0.9;
  std::vector<AuditRow> rows;  // original, then per operation: seeds then mean
};

// Scores the original submission once, then each requested operation under
// every configured seed plus the per-operation mean. Detection numbers are
// avg-recall/precision percentages, captioning numbers come from
// captioning_at_tiou at the default threshold, and the SODA columns are
// corpus f1 under the two reference-aggregation modes. cfg.operation is
// ignored; `ops` picks the operations and defaults to all four.
AuditReport audit(const Submission& sub, const std::vector<AnnotationRecord>& refs,
                  const PerturbConfig& cfg,
                  const std::vector<PerturbOp>& ops = {
                      PerturbOp::Increase, PerturbOp::Reduce, PerturbOp::Exchange,
                      PerturbOp::Extreme});

void write_audit_csv(const AuditReport& report, const std::string& path);
void write_audit_json(const AuditReport& report, const std::string& path);

}  // namespace seqdvc

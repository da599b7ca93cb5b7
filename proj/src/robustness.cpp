#include "seqdvc/robustness.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "seqdvc/metrics.hpp"

namespace seqdvc {

namespace {

using nlohmann::json;

void sort_events(std::vector<SubmissionEvent>& events) {
  std::sort(events.begin(), events.end(),
            [](const SubmissionEvent& a, const SubmissionEvent& b) {
              if (a.start_sec != b.start_sec) return a.start_sec < b.start_sec;
              return a.end_sec < b.end_sec;
            });
}

Submission apply_increase(const Submission& sub, double p, Rng& rng) {
  Submission out = sub;
  for (auto& [id, events] : out.results) {
    (void)id;
    sort_events(events);
    if (events.empty()) continue;
    if (rng.uniform() < p) {
      SubmissionEvent first = events.front();
      events.insert(events.begin() + 1, std::move(first));
    }
  }
  return out;
}

Submission apply_reduce(const Submission& sub, double p, Rng& rng) {
  Submission out = sub;
  for (auto& [id, events] : out.results) {
    (void)id;
    sort_events(events);
    if (events.empty()) continue;
    std::vector<SubmissionEvent> kept = {events.front()};
    for (std::size_t i = 1; i < events.size(); ++i) {
      if (!(rng.uniform() < p)) kept.push_back(events[i]);
    }
    events = std::move(kept);
  }
  return out;
}

Submission apply_extreme(const Submission& sub) {
  Submission out = sub;
  for (auto& [id, events] : out.results) {
    (void)id;
    sort_events(events);
    if (events.size() > 1) events.resize(1);
  }
  return out;
}

std::string op_name(PerturbOp op) {
  switch (op) {
    case PerturbOp::Increase: return "increase";
    case PerturbOp::Reduce: return "reduce";
    case PerturbOp::Exchange: return "exchange";
    case PerturbOp::Extreme: return "extreme";
  }
  throw std::logic_error("perturb: unknown operation");
}

}  // namespace

void PerturbConfig::validate() const {
  if (!(p_increase >= 0.0 && p_increase <= 1.0)) {
    throw std::invalid_argument("perturb: p_increase outside [0,1]");
  }
  if (!(p_reduce >= 0.0 && p_reduce <= 1.0)) {
    throw std::invalid_argument("perturb: p_reduce outside [0,1]");
  }
  if (seeds.empty()) throw std::invalid_argument("perturb: at least one seed required");
}

Submission perturb(const Submission& sub, const PerturbConfig& cfg, Rng& rng) {
  cfg.validate();
  switch (cfg.operation) {
    case PerturbOp::Increase:
      return apply_increase(sub, cfg.p_increase, rng);
    case PerturbOp::Reduce:
      return apply_reduce(sub, cfg.p_reduce, rng);
    case PerturbOp::Exchange: {
      Submission grown = apply_increase(sub, cfg.p_increase, rng);
      return apply_reduce(grown, cfg.p_reduce, rng);
    }
    case PerturbOp::Extreme:
      return apply_extreme(sub);
  }
  throw std::logic_error("perturb: unknown operation");
}

namespace {

AuditRow score_submission(const std::string& operation, std::uint64_t seed, bool is_mean,
                          const Submission& sub, const std::vector<AnnotationRecord>& refs,
                          double threshold) {
  AuditRow row;
  row.operation = operation;
  row.seed = seed;
  row.is_mean = is_mean;
  const auto det = detection_pr(sub, refs);
  row.avg_recall = det.avg_recall;
  row.avg_precision = det.avg_precision;
  const auto cap = captioning_at_tiou(sub, refs, threshold);
  row.bleu4 = cap.bleu4;
  row.cider = cap.cider;
  row.meteor_lite = cap.meteor_lite;
  row.soda_old = soda(sub, {refs}, SodaInner::MeteorLite, SodaMode::Old).f1;
  row.soda_mr = soda(sub, {refs}, SodaInner::MeteorLite, SodaMode::Mr).f1;
  return row;
}

}  // namespace

AuditReport audit(const Submission& sub, const std::vector<AnnotationRecord>& refs,
                  const PerturbConfig& cfg, const std::vector<PerturbOp>& ops) {
  cfg.validate();
  if (ops.empty()) throw std::invalid_argument("audit: no operations requested");
  AuditReport report;
  report.rows.push_back(
      score_submission("original", 0, true, sub, refs, report.captioning_threshold));
  for (PerturbOp op : ops) {
    PerturbConfig one = cfg;
    one.operation = op;
    AuditRow mean;
    mean.operation = op_name(op);
    mean.is_mean = true;
    for (std::uint64_t seed : cfg.seeds) {
      Rng rng = derive_rng(seed, "audit-" + op_name(op), 0);
      const Submission mutated = perturb(sub, one, rng);
      AuditRow row = score_submission(op_name(op), seed, false, mutated, refs,
                                      report.captioning_threshold);
      mean.avg_recall += row.avg_recall;
      mean.avg_precision += row.avg_precision;
      mean.bleu4 += row.bleu4;
      mean.cider += row.cider;
      mean.meteor_lite += row.meteor_lite;
      mean.soda_old += row.soda_old;
      mean.soda_mr += row.soda_mr;
      report.rows.push_back(std::move(row));
    }
    const double n = static_cast<double>(cfg.seeds.size());
    mean.avg_recall /= n;
    mean.avg_precision /= n;
    mean.bleu4 /= n;
    mean.cider /= n;
    mean.meteor_lite /= n;
    mean.soda_old /= n;
    mean.soda_mr /= n;
    report.rows.push_back(std::move(mean));
  }
  return report;
}

void write_audit_csv(const AuditReport& report, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("audit: cannot write " + path);
  f << "operation,seed,avg_recall,avg_precision,bleu4,cider,meteor_lite,soda_old,soda_mr\n";
  std::ostringstream line;
  line.precision(17);
  for (const auto& r : report.rows) {
    line.str("");
    line << r.operation << "," << (r.is_mean ? std::string("mean") : std::to_string(r.seed))
         << "," << r.avg_recall << "," << r.avg_precision << "," << r.bleu4 << ","
         << r.cider << "," << r.meteor_lite << "," << r.soda_old << "," << r.soda_mr
         << "\n";
    f << line.str();
  }
}

void write_audit_json(const AuditReport& report, const std::string& path) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    json row;
    row["operation"] = r.operation;
    if (r.is_mean) {
      row["seed"] = "mean";
    } else {
      row["seed"] = r.seed;
    }
    row["avg_recall"] = r.avg_recall;
    row["avg_precision"] = r.avg_precision;
    row["bleu4"] = r.bleu4;
    row["cider"] = r.cider;
    row["meteor_lite"] = r.meteor_lite;
    row["soda_old"] = r.soda_old;
    row["soda_mr"] = r.soda_mr;
    rows.push_back(row);
  }
  json j;
  j["captioning_threshold"] = report.captioning_threshold;
  j["rows"] = rows;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("audit: cannot write " + path);
  f << j.dump(2) << "\n";
}

}  // namespace seqdvc

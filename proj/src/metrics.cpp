#include "seqdvc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace seqdvc {

namespace {

// N-gram key: tokens joined by a separator that split_words can never emit,
// so orders cannot collide.
std::string ngram_key(const std::vector<std::string>& toks, std::size_t i, int n) {
  std::string key = toks[i];
  for (int k = 1; k < n; ++k) {
    key += '\x1f';
    key += toks[i + k];
  }
  return key;
}

std::map<std::string, double> ngram_counts(const std::vector<std::string>& toks, int n) {
  std::map<std::string, double> out;
  if (static_cast<int>(toks.size()) < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) out[ngram_key(toks, i, n)] += 1.0;
  return out;
}

std::vector<TimeInterval> submission_intervals(const std::vector<SubmissionEvent>& events) {
  std::vector<TimeInterval> out;
  out.reserve(events.size());
  for (const auto& e : events) out.push_back({e.start_sec, e.end_sec, 0.0});
  return out;
}

void check_submission_ids(const Submission& sub, const std::set<std::string>& known,
                          const char* where) {
  for (const auto& [id, events] : sub.results) {
    (void)events;
    if (known.count(id) == 0) {
      throw std::invalid_argument(std::string(where) + ": unknown video id: " + id);
    }
  }
}

double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

double mean_or_zero(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

}  // namespace

const std::vector<double>& default_tiou_thresholds() {
  static const std::vector<double> t = {0.3, 0.5, 0.7, 0.9};
  return t;
}

double tiou(const TimeInterval& a, const TimeInterval& b) {
  const double lo = std::max(a.start_sec, b.start_sec);
  const double hi = std::min(a.end_sec, b.end_sec);
  const double uni = std::max(a.end_sec, b.end_sec) - std::min(a.start_sec, b.start_sec);
  if (uni <= 0.0) return lo <= hi ? 1.0 : 0.0;  // both degenerate
  return std::max(0.0, hi - lo) / uni;
}

double self_tiou_video(const std::vector<TimeInterval>& events) {
  const std::size_t n = events.size();
  if (n < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) s += tiou(events[i], events[j]);
  }
  return s / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

double self_tiou(const std::vector<std::vector<TimeInterval>>& per_video) {
  std::vector<double> vals;
  vals.reserve(per_video.size());
  for (const auto& v : per_video) vals.push_back(self_tiou_video(v));
  return mean_or_zero(vals);
}

DetectionReport detection_pr(const Submission& sub,
                             const std::vector<AnnotationRecord>& refs,
                             const std::vector<double>& thresholds) {
  if (refs.empty()) throw std::invalid_argument("detection_pr: no reference videos");
  if (thresholds.empty()) throw std::invalid_argument("detection_pr: no thresholds");
  for (double t : thresholds) {
    if (!(t > 0.0 && t <= 1.0)) {
      throw std::invalid_argument("detection_pr: threshold outside (0,1]");
    }
  }
  std::set<std::string> known;
  for (const auto& r : refs) known.insert(r.video_id);
  check_submission_ids(sub, known, "detection_pr");

  static const std::vector<SubmissionEvent> kNoEvents;
  DetectionReport rep;
  std::vector<std::vector<TimeInterval>> pred_lists;
  double n_preds = 0.0;
  for (const auto& r : refs) {
    auto it = sub.results.find(r.video_id);
    const auto& events = it == sub.results.end() ? kNoEvents : it->second;
    pred_lists.push_back(submission_intervals(events));
    n_preds += static_cast<double>(events.size());
  }

  for (double t : thresholds) {
    std::vector<double> rec, prec;
    for (std::size_t v = 0; v < refs.size(); ++v) {
      const auto& gt = refs[v].events;
      const auto& pred = pred_lists[v];
      int hit_gt = 0;
      for (const auto& g : gt) {
        for (const auto& p : pred) {
          if (tiou(g, p) >= t) {
            ++hit_gt;
            break;
          }
        }
      }
      rec.push_back(gt.empty() ? 0.0 : static_cast<double>(hit_gt) / gt.size());
      int hit_pred = 0;
      for (const auto& p : pred) {
        for (const auto& g : gt) {
          if (tiou(g, p) >= t) {
            ++hit_pred;
            break;
          }
        }
      }
      prec.push_back(pred.empty() ? 0.0 : static_cast<double>(hit_pred) / pred.size());
    }
    rep.recall[t] = 100.0 * mean_or_zero(rec);
    rep.precision[t] = 100.0 * mean_or_zero(prec);
  }

  double sr = 0.0, sp = 0.0;
  for (double t : thresholds) {
    sr += rep.recall[t];
    sp += rep.precision[t];
  }
  rep.avg_recall = sr / static_cast<double>(thresholds.size());
  rep.avg_precision = sp / static_cast<double>(thresholds.size());
  rep.self_tiou = self_tiou(pred_lists);
  rep.events_per_video = n_preds / static_cast<double>(refs.size());
  return rep;
}

double bleu4(const std::string& candidate, const std::vector<std::string>& references) {
  const auto cand = Tokenizer::split_words(candidate);
  if (cand.empty() || references.empty()) return 0.0;
  std::vector<std::vector<std::string>> refs;
  refs.reserve(references.size());
  for (const auto& r : references) refs.push_back(Tokenizer::split_words(r));

  double log_sum = 0.0;
  for (int n = 1; n <= 4; ++n) {
    const double total = static_cast<double>(cand.size()) - n + 1;
    if (total <= 0.0) continue;  // vacuous order, the brevity penalty covers length
    auto cc = ngram_counts(cand, n);
    std::vector<std::map<std::string, double>> rcs;
    rcs.reserve(refs.size());
    for (const auto& rt : refs) rcs.push_back(ngram_counts(rt, n));
    double matched = 0.0;
    for (auto& [key, count] : cc) {
      double best = 0.0;
      for (const auto& rc : rcs) {
        auto it = rc.find(key);
        if (it != rc.end()) best = std::max(best, it->second);
      }
      matched += std::min(count, best);
    }
    const double p = matched > 0.0 ? matched / total : 1.0 / (total + 1.0);
    log_sum += 0.25 * std::log(p);
  }

  // Closest reference length, ties to the shorter one.
  const double c = static_cast<double>(cand.size());
  double r = static_cast<double>(refs[0].size());
  for (const auto& rt : refs) {
    const double len = static_cast<double>(rt.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) {
      r = len;
    }
  }
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum);
}

namespace {

double meteor_single(const std::vector<std::string>& cand,
                     const std::vector<std::string>& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  // Leftmost greedy alignment: each candidate token grabs the first unused
  // occurrence in the reference.
  std::vector<bool> used(ref.size(), false);
  std::vector<int> aligned(cand.size(), -1);
  int m = 0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (!used[j] && ref[j] == cand[i]) {
        used[j] = true;
        aligned[i] = static_cast<int>(j);
        ++m;
        break;
      }
    }
  }
  if (m == 0) return 0.0;
  const double p = static_cast<double>(m) / cand.size();
  const double r = static_cast<double>(m) / ref.size();
  const double f = p * r / (0.9 * p + 0.1 * r);
  int chunks = 0;
  int prev_i = -2, prev_j = -2;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (aligned[i] < 0) continue;
    if (static_cast<int>(i) != prev_i + 1 || aligned[i] != prev_j + 1) ++chunks;
    prev_i = static_cast<int>(i);
    prev_j = aligned[i];
  }
  const double frag = static_cast<double>(chunks - 1) / std::max(1.0, static_cast<double>(m - 1));
  return f * (1.0 - 0.5 * frag * frag * frag);
}

}  // namespace

double meteor_lite(const std::string& candidate, const std::vector<std::string>& references) {
  const auto cand = Tokenizer::split_words(candidate);
  double best = 0.0;
  for (const auto& r : references) {
    best = std::max(best, meteor_single(cand, Tokenizer::split_words(r)));
  }
  return best;
}

CiderContext CiderContext::build(const std::vector<std::vector<std::string>>& documents) {
  CiderContext ctx;
  ctx.n_documents_ = static_cast<double>(documents.size());
  std::map<std::string, double> df;
  for (const auto& doc : documents) {
    std::set<std::string> seen;
    for (const auto& sentence : doc) {
      const auto toks = Tokenizer::split_words(sentence);
      for (int n = 1; n <= 4; ++n) {
        for (const auto& [key, count] : ngram_counts(toks, n)) {
          (void)count;
          seen.insert(key);
        }
      }
    }
    for (const auto& key : seen) df[key] += 1.0;
  }
  for (const auto& [key, d] : df) {
    ctx.idf_[key] = std::log(std::max(1.0, ctx.n_documents_) / d);
  }
  return ctx;
}

double CiderContext::score(const std::string& candidate,
                           const std::vector<std::string>& references) const {
  if (references.empty()) return 0.0;
  const double fallback = std::log(std::max(1.0, n_documents_));
  auto idf = [&](const std::string& key) {
    auto it = idf_.find(key);
    return it == idf_.end() ? fallback : it->second;
  };
  auto weighted = [&](const std::vector<std::string>& toks, int n) {
    auto counts = ngram_counts(toks, n);
    for (auto& [key, v] : counts) v *= idf(key);
    return counts;
  };
  const auto cand = Tokenizer::split_words(candidate);
  double total = 0.0;
  for (int n = 1; n <= 4; ++n) {
    const auto cv = weighted(cand, n);
    double cn = 0.0;
    for (const auto& [key, v] : cv) cn += v * v;
    double sim_sum = 0.0;
    for (const auto& r : references) {
      const auto rv = weighted(Tokenizer::split_words(r), n);
      double rn = 0.0, dot = 0.0;
      for (const auto& [key, v] : rv) {
        rn += v * v;
        auto it = cv.find(key);
        if (it != cv.end()) dot += v * it->second;
      }
      if (cn > 0.0 && rn > 0.0) sim_sum += dot / std::sqrt(cn * rn);
    }
    total += sim_sum / static_cast<double>(references.size());
  }
  return 10.0 * total / 4.0;
}

std::vector<double> cider(const std::vector<std::string>& candidates,
                          const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size()) {
    throw std::invalid_argument("cider: one reference set per candidate required");
  }
  const auto ctx = CiderContext::build(references);
  std::vector<double> out;
  out.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    out.push_back(ctx.score(candidates[i], references[i]));
  }
  return out;
}

CaptioningReport captioning_at_tiou(const Submission& sub,
                                    const std::vector<AnnotationRecord>& refs,
                                    double threshold) {
  if (refs.empty()) throw std::invalid_argument("captioning_at_tiou: no reference videos");
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw std::invalid_argument("captioning_at_tiou: threshold outside (0,1]");
  }
  std::set<std::string> known;
  std::vector<std::vector<std::string>> documents;
  for (const auto& r : refs) {
    known.insert(r.video_id);
    documents.push_back(r.sentences);
  }
  check_submission_ids(sub, known, "captioning_at_tiou");
  const auto ctx = CiderContext::build(documents);

  CaptioningReport rep;
  rep.threshold = threshold;
  std::vector<double> vb, vm, vc;
  for (const auto& r : refs) {
    auto it = sub.results.find(r.video_id);
    if (it == sub.results.end() || it->second.empty()) continue;  // permissive: skipped, not zeroed
    std::vector<double> pb, pm, pc;
    for (const auto& pred : it->second) {
      const TimeInterval pi{pred.start_sec, pred.end_sec, 0.0};
      std::vector<std::string> qualifying;
      for (std::size_t g = 0; g < r.events.size(); ++g) {
        if (tiou(pi, r.events[g]) >= threshold) qualifying.push_back(r.sentences[g]);
      }
      if (qualifying.empty()) {
        pb.push_back(0.0);
        pm.push_back(0.0);
        pc.push_back(0.0);
      } else {
        pb.push_back(bleu4(pred.sentence, qualifying));
        pm.push_back(meteor_lite(pred.sentence, qualifying));
        pc.push_back(ctx.score(pred.sentence, qualifying));
      }
    }
    vb.push_back(mean_or_zero(pb));
    vm.push_back(mean_or_zero(pm));
    vc.push_back(mean_or_zero(pc));
  }
  rep.bleu4 = mean_or_zero(vb);
  rep.meteor_lite = mean_or_zero(vm);
  rep.cider = mean_or_zero(vc);
  return rep;
}

double soda_best_matching_sum(const Mat& pair_scores) {
  const Eigen::Index n = pair_scores.rows();
  const Eigen::Index m = pair_scores.cols();
  Mat dp = Mat::Zero(n + 1, m + 1);
  for (Eigen::Index i = 1; i <= n; ++i) {
    for (Eigen::Index j = 1; j <= m; ++j) {
      dp(i, j) = std::max({dp(i - 1, j), dp(i, j - 1),
                           dp(i - 1, j - 1) + pair_scores(i - 1, j - 1)});
    }
  }
  return dp(n, m);
}

namespace {

struct SodaEvent {
  TimeInterval interval;
  std::string sentence;
};

std::vector<SodaEvent> sorted_generated(const std::vector<SubmissionEvent>& events) {
  std::vector<SodaEvent> out;
  out.reserve(events.size());
  for (const auto& e : events) out.push_back({{e.start_sec, e.end_sec, 0.0}, e.sentence});
  std::sort(out.begin(), out.end(), [](const SodaEvent& a, const SodaEvent& b) {
    if (a.interval.start_sec != b.interval.start_sec) {
      return a.interval.start_sec < b.interval.start_sec;
    }
    return a.interval.end_sec < b.interval.end_sec;
  });
  return out;
}

std::vector<SodaEvent> sorted_reference(const AnnotationRecord& rec) {
  std::vector<SodaEvent> out;
  out.reserve(rec.events.size());
  for (std::size_t i = 0; i < rec.events.size(); ++i) {
    out.push_back({rec.events[i], rec.sentences[i]});
  }
  std::sort(out.begin(), out.end(), [](const SodaEvent& a, const SodaEvent& b) {
    if (a.interval.start_sec != b.interval.start_sec) {
      return a.interval.start_sec < b.interval.start_sec;
    }
    return a.interval.end_sec < b.interval.end_sec;
  });
  return out;
}

}  // namespace

SodaReport soda(const Submission& sub,
                const std::vector<std::vector<AnnotationRecord>>& reference_sets,
                SodaInner inner, SodaMode mode) {
  if (reference_sets.empty() || reference_sets[0].empty()) {
    throw std::invalid_argument("soda: no reference videos");
  }
  std::set<std::string> known;
  for (const auto& r : reference_sets[0]) known.insert(r.video_id);
  std::vector<std::map<std::string, const AnnotationRecord*>> by_id(reference_sets.size());
  for (std::size_t s = 0; s < reference_sets.size(); ++s) {
    if (reference_sets[s].size() != reference_sets[0].size()) {
      throw std::invalid_argument("soda: reference sets cover different videos");
    }
    for (const auto& r : reference_sets[s]) {
      if (known.count(r.video_id) == 0) {
        throw std::invalid_argument("soda: reference sets cover different videos");
      }
      by_id[s][r.video_id] = &r;
    }
  }
  check_submission_ids(sub, known, "soda");

  CiderContext ctx;
  if (inner == SodaInner::CiderSentence) {
    std::vector<std::vector<std::string>> documents;
    for (const auto& set : reference_sets) {
      for (const auto& r : set) documents.push_back(r.sentences);
    }
    ctx = CiderContext::build(documents);
  }
  auto inner_score = [&](const std::string& g, const std::string& r) {
    return inner == SodaInner::MeteorLite ? meteor_lite(g, {r})
                                          : ctx.score(g, {r});
  };
  auto pair_score = [&](const SodaEvent& g, const SodaEvent& r) {
    const double t = tiou(g.interval, r.interval);
    return t > 0.0 ? inner_score(g.sentence, r.sentence) * t : 0.0;
  };

  static const std::vector<SubmissionEvent> kNoEvents;
  SodaReport rep;
  rep.mode = mode;
  rep.inner = inner;
  std::vector<double> cp, cr, cf;
  for (const auto& r0 : reference_sets[0]) {
    const std::string& id = r0.video_id;
    auto it = sub.results.find(id);
    const auto gen = sorted_generated(it == sub.results.end() ? kNoEvents : it->second);
    std::vector<std::vector<SodaEvent>> refs;
    refs.reserve(reference_sets.size());
    for (std::size_t s = 0; s < reference_sets.size(); ++s) {
      refs.push_back(sorted_reference(*by_id[s].at(id)));
    }

    SodaVideoScore score;
    score.video_id = id;
    if (!gen.empty()) {
      const double ng = static_cast<double>(gen.size());
      if (mode == SodaMode::Old) {
        double sp = 0.0, sr = 0.0;
        for (const auto& rs : refs) {
          Mat grid(gen.size(), rs.size());
          for (std::size_t i = 0; i < gen.size(); ++i) {
            for (std::size_t j = 0; j < rs.size(); ++j) {
              grid(i, j) = pair_score(gen[i], rs[j]);
            }
          }
          const double sum = soda_best_matching_sum(grid);
          sp += sum / ng;
          sr += rs.empty() ? 0.0 : sum / static_cast<double>(rs.size());
        }
        score.precision = sp / static_cast<double>(refs.size());
        score.recall = sr / static_cast<double>(refs.size());
      } else {
        std::size_t width = 0;
        double mean_r = 0.0;
        for (const auto& rs : refs) {
          width = std::max(width, rs.size());
          mean_r += static_cast<double>(rs.size());
        }
        mean_r /= static_cast<double>(refs.size());
        Mat grid = Mat::Zero(gen.size(), width);
        for (std::size_t i = 0; i < gen.size(); ++i) {
          for (std::size_t j = 0; j < width; ++j) {
            double best = 0.0;
            for (const auto& rs : refs) {
              if (j < rs.size()) best = std::max(best, pair_score(gen[i], rs[j]));
            }
            grid(i, j) = best;
          }
        }
        const double sum = soda_best_matching_sum(grid);
        score.precision = sum / ng;
        score.recall = mean_r > 0.0 ? sum / mean_r : 0.0;
      }
      score.f1 = harmonic(score.precision, score.recall);
    }
    cp.push_back(score.precision);
    cr.push_back(score.recall);
    cf.push_back(score.f1);
    rep.videos.push_back(std::move(score));
  }
  rep.precision = mean_or_zero(cp);
  rep.recall = mean_or_zero(cr);
  rep.f1 = mean_or_zero(cf);
  return rep;
}

}  // namespace seqdvc

#include "seqdvc/concept.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "seqdvc/event_codec.hpp"

namespace seqdvc {

namespace {

// Closed-class words plus the corpus filler vocabulary; whatever is left in a
// caption counts as a content word.
const std::set<std::string>& function_word_lexicon() {
  static const std::set<std::string> lex = [] {
    std::set<std::string> s = {
        "an", "and", "or", "of", "in", "on", "at", "by", "with", "for",
        "from", "into", "over", "under", "up", "down", "is", "are", "was",
        "were", "be", "been", "being", "do", "does", "did", "has", "have",
        "had", "he", "she", "it", "they", "them", "his", "her", "its",
        "their", "this", "that", "these", "those", "there", "here", "then",
        "now", "very", "also", "just", "not", "no", "yes", "while", "when",
        "where", "who", "what", "how", "why", "as", "so", "but", "if",
        "because", "before", "after", "during", "between", "through"};
    for (const auto& w : generic_filler_words()) s.insert(w);
    return s;
  }();
  return lex;
}

int boundary_rank(int label) {
  switch (label) {
    case kBoundaryStart: return 3;
    case kBoundaryEnd: return 2;
    case kBoundaryMiddle: return 1;
    default: return 0;
  }
}

Mat scaled_normal(Eigen::Index r, Eigen::Index c, Rng& rng, double scale) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal() * scale;
  return m;
}

}  // namespace

int ConceptVocab::index_of(const std::string& label) const {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) return static_cast<int>(i);
  }
  return -1;
}

ConceptVocab build_concept_vocab(const Dataset& data, int k) {
  if (k < 1) throw std::invalid_argument("build_concept_vocab: k must be >= 1");
  std::map<std::string, long> freq;
  for (const auto& rec : data.records) {
    for (const auto& s : rec.sentences) {
      for (const auto& w : Tokenizer::split_words(s)) {
        if (!function_word_lexicon().count(w)) freq[w] += 1;
      }
    }
  }
  if (k > static_cast<int>(freq.size())) {
    throw std::invalid_argument("build_concept_vocab: k exceeds distinct content words");
  }
  std::vector<std::pair<std::string, long>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  ConceptVocab vocab;
  for (int i = 0; i < k; ++i) vocab.labels.push_back(ranked[i].first);
  return vocab;
}

FrameTargets frame_targets(const DenseVideoRecord& rec, const ConceptVocab& vocab) {
  const int n = static_cast<int>(rec.features.rows());
  FrameTargets ft;
  ft.concepts = Mat::Zero(n, vocab.size());
  ft.boundary.assign(n, kBoundaryOutside);

  const auto events = encode_record_events(rec, n);
  for (std::size_t i = 0; i < events.size(); ++i) {
    int first = -1, last = -1;
    for (int t = 0; t < n; ++t) {
      if (events[i](0, t) > 0.5) {
        if (first < 0) first = t;
        last = t;
      }
    }
    std::vector<int> present;
    for (const auto& w : Tokenizer::split_words(rec.sentences[i])) {
      const int idx = vocab.index_of(w);
      if (idx >= 0) present.push_back(idx);
    }
    for (int t = first; t <= last; ++t) {
      if (events[i](0, t) <= 0.5) continue;
      for (int idx : present) ft.concepts(t, idx) = 1.0;
      const int cand = t == first ? kBoundaryStart
                                  : (t == last ? kBoundaryEnd : kBoundaryMiddle);
      if (boundary_rank(cand) > boundary_rank(ft.boundary[t])) ft.boundary[t] = cand;
    }
  }
  return ft;
}

Cpt Cpt::init(int feature_dim, int width, int n_concepts, std::uint64_t seed) {
  if (feature_dim < 1 || width < 1 || n_concepts < 1) {
    throw std::invalid_argument("cpt: dims must be >= 1");
  }
  Cpt m;
  m.feature_dim_ = feature_dim;
  m.width_ = width;
  m.n_concepts_ = n_concepts;
  Rng rng = derive_rng(seed, "cpt-init", 0);
  const double sx = std::sqrt(2.0 / (feature_dim + 4.0 * width));
  const double sh = std::sqrt(2.0 / (5.0 * width));
  auto gate_bias = [&] {
    // Forget gate opens at init so early gradients reach across time.
    Mat b = Mat::Zero(1, 4 * width);
    b.block(0, width, 1, width).setOnes();
    return b;
  };
  m.fwd_wx_ = Var::parameter(scaled_normal(feature_dim, 4 * width, rng, sx));
  m.fwd_wh_ = Var::parameter(scaled_normal(width, 4 * width, rng, sh));
  m.fwd_b_ = Var::parameter(gate_bias());
  m.bwd_wx_ = Var::parameter(scaled_normal(feature_dim, 4 * width, rng, sx));
  m.bwd_wh_ = Var::parameter(scaled_normal(width, 4 * width, rng, sh));
  m.bwd_b_ = Var::parameter(gate_bias());
  m.concept_w_ = Var::parameter(scaled_normal(2 * width, n_concepts, rng, 0.02));
  m.concept_b_ = Var::parameter(Mat::Zero(1, n_concepts));
  m.boundary_w_ = Var::parameter(scaled_normal(2 * width, kBoundaryClasses, rng, 0.02));
  m.boundary_b_ = Var::parameter(Mat::Zero(1, kBoundaryClasses));
  return m;
}

Var Cpt::run_direction(const Mat& video, bool backward) const {
  const int n = static_cast<int>(video.rows());
  const Var& wx = backward ? bwd_wx_ : fwd_wx_;
  const Var& wh = backward ? bwd_wh_ : fwd_wh_;
  const Var& b = backward ? bwd_b_ : fwd_b_;
  Var x_all = Var::constant(video);
  Var h = Var::constant(Mat::Zero(1, width_));
  Var c = Var::constant(Mat::Zero(1, width_));
  std::vector<Var> hs(n);
  for (int s = 0; s < n; ++s) {
    const int t = backward ? n - 1 - s : s;
    Var xt = nn::slice_rows(x_all, t, 1);
    Var pre = nn::add(nn::add(nn::matmul(xt, wx), nn::matmul(h, wh)), b);
    Var i = nn::sigmoid(nn::slice_cols(pre, 0, width_));
    Var f = nn::sigmoid(nn::slice_cols(pre, width_, width_));
    Var g = nn::tanh_act(nn::slice_cols(pre, 2 * width_, width_));
    Var o = nn::sigmoid(nn::slice_cols(pre, 3 * width_, width_));
    c = nn::add(nn::cmul(f, c), nn::cmul(i, g));
    h = nn::cmul(o, nn::tanh_act(c));
    hs[t] = h;
  }
  return hs.size() == 1 ? hs[0] : nn::concat_rows(hs);
}

Var Cpt::hidden_states(const Mat& video) const {
  if (video.rows() < 1 || video.cols() != feature_dim_) {
    throw std::invalid_argument("cpt: video must be n x feature_dim");
  }
  std::vector<Var> halves = {run_direction(video, false), run_direction(video, true)};
  return nn::concat_cols(halves);
}

Var Cpt::concept_logits(const Var& hidden) const {
  return nn::add_row(nn::matmul(hidden, concept_w_), concept_b_);
}

Var Cpt::boundary_logits(const Var& hidden) const {
  return nn::add_row(nn::matmul(hidden, boundary_w_), boundary_b_);
}

Mat Cpt::extract(const Mat& video) const { return hidden_states(video).value(); }

std::vector<std::pair<std::string, Var>> Cpt::parameters() const {
  return {{"fwd.wx", fwd_wx_},         {"fwd.wh", fwd_wh_},
          {"fwd.b", fwd_b_},           {"bwd.wx", bwd_wx_},
          {"bwd.wh", bwd_wh_},         {"bwd.b", bwd_b_},
          {"head.concept.w", concept_w_}, {"head.concept.b", concept_b_},
          {"head.boundary.w", boundary_w_}, {"head.boundary.b", boundary_b_}};
}

std::vector<Var> Cpt::parameter_vars() const {
  std::vector<Var> out;
  for (auto& [name, v] : parameters()) out.push_back(v);
  return out;
}

void Cpt::save(const std::string& path) const {
  std::map<std::string, Mat> named;
  for (auto& [name, v] : parameters()) named[name] = v.value();
  nn::save_checkpoint(path, named);
}

Cpt Cpt::load(int feature_dim, int width, int n_concepts, const std::string& path) {
  Cpt m = init(feature_dim, width, n_concepts, 0);
  auto named = nn::load_checkpoint<double>(path);
  auto params = m.parameters();
  if (named.size() != params.size()) {
    throw std::runtime_error("cpt load: parameter count mismatch");
  }
  for (auto& [name, v] : params) {
    auto it = named.find(name);
    if (it == named.end()) throw std::runtime_error("cpt load: missing " + name);
    if (it->second.rows() != v.value().rows() || it->second.cols() != v.value().cols()) {
      throw std::runtime_error("cpt load: shape mismatch for " + name);
    }
    v.value() = it->second;
  }
  return m;
}

CptTrainResult train_cpt(Cpt& model, const Dataset& data, const ConceptVocab& vocab,
                         const CptConfig& cfg) {
  if (data.records.empty()) throw std::invalid_argument("train_cpt: empty corpus");
  if (vocab.size() != model.n_concepts()) {
    throw std::invalid_argument("train_cpt: vocab size does not match the model");
  }
  if (cfg.steps < 0 || cfg.batch_size < 1 || cfg.lr <= 0.0) {
    throw std::invalid_argument("train_cpt: bad config");
  }
  std::vector<FrameTargets> targets;
  for (const auto& rec : data.records) {
    if (rec.features.cols() != model.feature_dim()) {
      throw std::invalid_argument("train_cpt: feature dim mismatch for " + rec.video_id);
    }
    targets.push_back(frame_targets(rec, vocab));
  }

  auto params = model.parameter_vars();
  nn::AdamState<double> opt;
  nn::adam_init(opt, params);
  opt.lr = cfg.lr;

  CptTrainResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    Var total;
    double concept_sum = 0.0, boundary_sum = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      Rng rng = derive_rng(cfg.seed, "cpt-sample",
                           static_cast<std::uint64_t>(step) * 1000003u + b);
      const std::size_t idx = rng.uniform_int(data.records.size());
      Var hidden = model.hidden_states(data.records[idx].features);
      Var closs = nn::bce_logits_rowsum_mean(model.concept_logits(hidden),
                                             targets[idx].concepts);
      Var bloss =
          nn::cross_entropy_rows(model.boundary_logits(hidden), targets[idx].boundary);
      concept_sum += closs.value()(0, 0);
      boundary_sum += bloss.value()(0, 0);
      Var sample = nn::add(closs, bloss);
      total = (b == 0) ? sample : nn::add(total, sample);
    }
    Var loss = nn::scale(total, 1.0 / cfg.batch_size);
    if (!std::isfinite(loss.value()(0, 0))) {
      throw std::runtime_error("train_cpt: non-finite loss at step " + std::to_string(step));
    }
    auto g = nn::grad(loss, params);
    nn::adam_step(params, g.grads, opt);
    result.curve.push_back({step, "concept", concept_sum / cfg.batch_size});
    result.curve.push_back({step, "boundary", boundary_sum / cfg.batch_size});
  }
  return result;
}

CptEval evaluate_cpt(const Cpt& model, const Dataset& data, const ConceptVocab& vocab) {
  long tp = 0, fp = 0, fn = 0, hits = 0, frames = 0;
  for (const auto& rec : data.records) {
    const FrameTargets ft = frame_targets(rec, vocab);
    Var hidden = model.hidden_states(rec.features);
    const Mat cl = model.concept_logits(hidden).value();
    const Mat bl = model.boundary_logits(hidden).value();
    for (Eigen::Index t = 0; t < cl.rows(); ++t) {
      for (Eigen::Index k = 0; k < cl.cols(); ++k) {
        const bool pred = cl(t, k) > 0.0;  // sigmoid > 0.5
        const bool truth = ft.concepts(t, k) > 0.5;
        if (pred && truth) ++tp;
        if (pred && !truth) ++fp;
        if (!pred && truth) ++fn;
      }
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < bl.cols(); ++c) {
        if (bl(t, c) > bl(t, best)) best = c;
      }
      if (static_cast<int>(best) == ft.boundary[t]) ++hits;
      ++frames;
    }
  }
  CptEval ev;
  const long denom = 2 * tp + fp + fn;
  ev.concept_f1 = denom == 0 ? 1.0 : 2.0 * tp / static_cast<double>(denom);
  ev.boundary_accuracy = frames == 0 ? 0.0 : static_cast<double>(hits) / frames;
  return ev;
}

Mat augment_features(const Mat& appearance, const Cpt& model) {
  const Mat semantic = model.extract(appearance);
  Mat out(appearance.rows(), appearance.cols() + semantic.cols());
  out.leftCols(appearance.cols()) = appearance;
  out.rightCols(semantic.cols()) = semantic;
  return out;
}

Dataset augment_dataset(const Dataset& data, const Cpt& model) {
  Dataset out = data;
  for (auto& rec : out.records) rec.features = augment_features(rec.features, model);
  return out;
}

}  // namespace seqdvc

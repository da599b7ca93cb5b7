#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "seqdvc/concept.hpp"
#include "support/gradcheck.hpp"

using seqdvc::ConceptVocab;
using seqdvc::Cpt;
using seqdvc::Dataset;
using seqdvc::DenseVideoRecord;
using seqdvc::Mat;
using seqdvc::Tokenizer;
using seqdvc::Var;
namespace nn = seqdvc::nn;

namespace {

Dataset corpus_from_captions(const std::vector<std::vector<std::string>>& videos) {
  Dataset ds;
  int id = 0;
  std::vector<std::string> all;
  for (const auto& sentences : videos) {
    DenseVideoRecord rec;
    rec.video_id = "v" + std::to_string(id++);
    rec.duration_sec = 8.0;
    rec.features = Mat::Zero(8, 2);
    double t = 0.0;
    for (const auto& s : sentences) {
      rec.events.push_back({t, t + 0.9, rec.duration_sec});
      rec.sentences.push_back(s);
      all.push_back(s);
      t += 2.0;
    }
    ds.records.push_back(std::move(rec));
  }
  ds.tokenizer = Tokenizer::build(all);
  return ds;
}

Dataset synthetic_cpt_corpus(int n_videos, std::uint64_t seed, int n_activities = 3) {
  seqdvc::SyntheticSpec spec;
  spec.n_videos = n_videos;
  spec.n_frames = 8;
  spec.n_activities = n_activities;
  spec.events_min = 1;
  spec.events_max = 2;
  spec.d_appearance = 4;
  spec.noise_std = 0.01;
  spec.seed = seed;
  auto videos = seqdvc::generate_synthetic_videos(spec);
  Dataset ds;
  std::vector<std::string> captions;
  for (auto& v : videos) {
    DenseVideoRecord rec;
    rec.video_id = v.annotation.video_id;
    rec.duration_sec = v.annotation.duration_sec;
    rec.events = v.annotation.events;
    rec.sentences = v.annotation.sentences;
    rec.features = v.features;
    for (const auto& s : rec.sentences) captions.push_back(s);
    ds.records.push_back(std::move(rec));
  }
  ds.tokenizer = Tokenizer::build(captions);
  return ds;
}

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TEST_SUITE("concept") {

TEST_CASE("vocab: frequency ranking matches hand counting") {
  Dataset ds = corpus_from_captions({{"a person starts to jog", "someone continues to swim slowly"},
                                     {"the man tries to jog again", "a woman learns to jog outdoors"},
                                     {"someone continues to swim slowly"}});
  auto v3 = seqdvc::build_concept_vocab(ds, 2);
  REQUIRE(v3.size() == 2);
  CHECK(v3.labels[0] == "jog");   // 3 uses
  CHECK(v3.labels[1] == "swim");  // 2 uses
  auto v1 = seqdvc::build_concept_vocab(ds, 1);
  CHECK(v1.labels == std::vector<std::string>{"jog"});
  CHECK(v1.index_of("jog") == 0);
  CHECK(v1.index_of("swim") == -1);
  CHECK_THROWS_AS((void)seqdvc::build_concept_vocab(ds, 3), std::invalid_argument);
  CHECK_THROWS_AS((void)seqdvc::build_concept_vocab(ds, 0), std::invalid_argument);
}

TEST_CASE("vocab: template scaffolding is filtered, ties break alphabetically") {
  Dataset ds = corpus_from_captions({{"a person starts to dive", "the man tries to climb again"}});
  auto v = seqdvc::build_concept_vocab(ds, 2);
  // One use each: alphabetical order decides.
  CHECK(v.labels == std::vector<std::string>{"climb", "dive"});
}

TEST_CASE("vocab: activity words dominate a synthetic corpus") {
  Dataset ds = synthetic_cpt_corpus(40, 90, 8);
  auto v = seqdvc::build_concept_vocab(ds, 8);
  const auto& pool = seqdvc::activity_word_pool();
  std::set<std::string> allowed(pool.begin(), pool.begin() + 8);
  for (const auto& label : v.labels) CHECK(allowed.count(label) == 1);
}

TEST_CASE("frame targets: containment, boundaries, outside frames") {
  ConceptVocab vocab;
  vocab.labels = {"jog", "swim"};
  DenseVideoRecord rec;
  rec.video_id = "v";
  rec.duration_sec = 8.0;
  rec.features = Mat::Zero(8, 2);
  rec.events = {{0.0, 3.0, 8.0}, {5.0, 6.0, 8.0}};
  rec.sentences = {"a person starts to jog", "someone continues to swim slowly"};

  auto ft = seqdvc::frame_targets(rec, vocab);
  REQUIRE(ft.boundary.size() == 8);
  // Event one covers frames 0..3, event two frames 5..6.
  CHECK(ft.boundary[0] == seqdvc::kBoundaryStart);
  CHECK(ft.boundary[1] == seqdvc::kBoundaryMiddle);
  CHECK(ft.boundary[2] == seqdvc::kBoundaryMiddle);
  CHECK(ft.boundary[3] == seqdvc::kBoundaryEnd);
  CHECK(ft.boundary[4] == seqdvc::kBoundaryOutside);
  CHECK(ft.boundary[5] == seqdvc::kBoundaryStart);
  CHECK(ft.boundary[6] == seqdvc::kBoundaryEnd);
  CHECK(ft.boundary[7] == seqdvc::kBoundaryOutside);
  for (int t = 0; t < 8; ++t) {
    CHECK(ft.concepts(t, 0) == ((t <= 3) ? 1.0 : 0.0));
    CHECK(ft.concepts(t, 1) == ((t == 5 || t == 6) ? 1.0 : 0.0));
  }

  // A one-frame event is its own start.
  DenseVideoRecord one;
  one.video_id = "w";
  one.duration_sec = 8.0;
  one.features = Mat::Zero(8, 2);
  one.events = {{4.2, 4.8, 8.0}};
  one.sentences = {"a person starts to jog"};
  auto f1 = seqdvc::frame_targets(one, vocab);
  CHECK(f1.boundary[4] == seqdvc::kBoundaryStart);
}

TEST_CASE("frame targets: brute-force recomputation on synthetic videos") {
  Dataset ds = synthetic_cpt_corpus(12, 91);
  auto vocab = seqdvc::build_concept_vocab(ds, 3);
  for (const auto& rec : ds.records) {
    const int n = static_cast<int>(rec.features.rows());
    auto ft = seqdvc::frame_targets(rec, vocab);
    const double span = rec.duration_sec / n;
    for (int t = 0; t < n; ++t) {
      for (int k = 0; k < vocab.size(); ++k) {
        bool expect = false;
        for (std::size_t i = 0; i < rec.events.size(); ++i) {
          const bool covers = t * span <= rec.events[i].end_sec &&
                              (t + 1) * span > rec.events[i].start_sec;
          if (!covers) continue;
          for (const auto& w : Tokenizer::split_words(rec.sentences[i])) {
            if (w == vocab.labels[k]) expect = true;
          }
        }
        CHECK(ft.concepts(t, k) == (expect ? 1.0 : 0.0));
      }
    }
  }
}

TEST_CASE("recurrent cell matches a hand computation") {
  Cpt m = Cpt::init(2, 2, 1, 5);
  auto params = m.parameters();
  std::map<std::string, Mat*> by_name;
  for (auto& [name, v] : params) by_name[name] = &v.value();

  // Distinct simple weights per direction so a swap would show.
  Mat wx(2, 8), wh(2, 8), b(1, 8);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 8; ++c) wx(r, c) = 0.05 * (r + 1) * (c - 3);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 8; ++c) wh(r, c) = 0.03 * (r - c % 3);
  for (int c = 0; c < 8; ++c) b(0, c) = 0.01 * c;
  *by_name["fwd.wx"] = wx;
  *by_name["fwd.wh"] = wh;
  *by_name["fwd.b"] = b;
  *by_name["bwd.wx"] = 2.0 * wx;
  *by_name["bwd.wh"] = 0.5 * wh;
  *by_name["bwd.b"] = -b;

  Mat video(2, 2);
  video << 0.3, -0.2, 0.1, 0.4;

  auto step = [](const Mat& wx_, const Mat& wh_, const Mat& b_, const Mat& x,
                 Mat& h, Mat& c) {
    Mat pre = x * wx_ + h * wh_ + b_;
    for (int j = 0; j < 2; ++j) {
      const double i = sig(pre(0, j));
      const double f = sig(pre(0, 2 + j));
      const double g = std::tanh(pre(0, 4 + j));
      const double o = sig(pre(0, 6 + j));
      c(0, j) = f * c(0, j) + i * g;
      h(0, j) = o * std::tanh(c(0, j));
    }
  };
  Mat hf = Mat::Zero(1, 2), cf = Mat::Zero(1, 2);
  Mat expect(2, 4);
  step(wx, wh, b, video.row(0), hf, cf);
  expect.row(0).head(2) = hf.row(0);
  step(wx, wh, b, video.row(1), hf, cf);
  expect.row(1).head(2) = hf.row(0);
  Mat hb = Mat::Zero(1, 2), cb = Mat::Zero(1, 2);
  step(2.0 * wx, 0.5 * wh, -b, video.row(1), hb, cb);
  expect.row(1).tail(2) = hb.row(0);
  step(2.0 * wx, 0.5 * wh, -b, video.row(0), hb, cb);
  expect.row(0).tail(2) = hb.row(0);

  const Mat got = m.extract(video);
  CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("cpt gradcheck") {
  Cpt m = Cpt::init(2, 2, 2, 6);
  seqdvc::Rng rng(7);
  Mat video(3, 2);
  for (Eigen::Index i = 0; i < video.size(); ++i) video.data()[i] = rng.normal();
  Mat ct(3, 2);
  ct << 1, 0, 0, 1, 1, 1;
  std::vector<int> bt = {0, 1, 3};
  auto build = [&] {
    Var hidden = m.hidden_states(video);
    return nn::add(nn::bce_logits_rowsum_mean(m.concept_logits(hidden), ct),
                   nn::cross_entropy_rows(m.boundary_logits(hidden), bt));
  };
  auto params = m.parameter_vars();
  CHECK(seqdvc::testsupport::gradcheck(build, params) < 5e-3);
}

TEST_CASE("extraction: shape, determinism, checkpoint round trip") {
  Dataset ds = synthetic_cpt_corpus(2, 92);
  Cpt a = Cpt::init(4, 3, 2, 93);
  const Mat fa = a.extract(ds.records[0].features);
  CHECK(fa.rows() == ds.records[0].features.rows());
  CHECK(fa.cols() == 6);  // twice the per-direction width

  Cpt b = Cpt::init(4, 3, 2, 93);
  CHECK((b.extract(ds.records[0].features) - fa).cwiseAbs().maxCoeff() == 0.0);
  Cpt c = Cpt::init(4, 3, 2, 94);
  CHECK((c.extract(ds.records[0].features) - fa).cwiseAbs().maxCoeff() > 0.0);

  namespace fs = std::filesystem;
  const auto path = (fs::temp_directory_path() / "seqdvc_cpt.ckpt").string();
  a.save(path);
  Cpt loaded = Cpt::load(4, 3, 2, path);
  CHECK((loaded.extract(ds.records[0].features) - fa).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS((void)Cpt::load(4, 5, 2, path), std::runtime_error);
  fs::remove(path);
}

TEST_CASE("augment: appearance columns preserved, concept columns appended") {
  Dataset ds = synthetic_cpt_corpus(2, 95);
  Cpt m = Cpt::init(4, 3, 2, 96);
  Mat aug = seqdvc::augment_features(ds.records[0].features, m);
  CHECK(aug.cols() == 4 + 6);
  CHECK((aug.leftCols(4) - ds.records[0].features).cwiseAbs().maxCoeff() == 0.0);
  CHECK((aug.rightCols(6) - m.extract(ds.records[0].features)).cwiseAbs().maxCoeff() == 0.0);

  Dataset out = seqdvc::augment_dataset(ds, m);
  REQUIRE(out.records.size() == ds.records.size());
  CHECK(out.records[1].video_id == ds.records[1].video_id);
  CHECK(out.records[1].features.cols() == 10);
  CHECK(out.tokenizer.size() == ds.tokenizer.size());
}

TEST_CASE("training: deterministic and validated") {
  Dataset ds = synthetic_cpt_corpus(3, 97);
  auto vocab = seqdvc::build_concept_vocab(ds, 3);
  seqdvc::CptConfig cfg;
  cfg.width = 3;
  cfg.steps = 6;
  cfg.batch_size = 2;
  cfg.seed = 98;
  Cpt a = Cpt::init(4, 3, 3, 99);
  Cpt b = Cpt::init(4, 3, 3, 99);
  auto ra = seqdvc::train_cpt(a, ds, vocab, cfg);
  auto rb = seqdvc::train_cpt(b, ds, vocab, cfg);
  REQUIRE(ra.curve.size() == rb.curve.size());
  for (std::size_t i = 0; i < ra.curve.size(); ++i) {
    CHECK(ra.curve[i].loss == rb.curve[i].loss);
  }
  ConceptVocab wrong;
  wrong.labels = {"x"};
  CHECK_THROWS_AS((void)seqdvc::train_cpt(a, ds, wrong, cfg), std::invalid_argument);
  Dataset empty;
  CHECK_THROWS_AS((void)seqdvc::train_cpt(a, empty, vocab, cfg), std::invalid_argument);
}

TEST_CASE("overfit: concept f1 and boundary accuracy clear their bars") {
  Dataset ds = synthetic_cpt_corpus(5, 100);
  auto vocab = seqdvc::build_concept_vocab(ds, 3);
  Cpt m = Cpt::init(4, 8, 3, 101);
  seqdvc::CptConfig cfg;
  cfg.width = 8;
  cfg.steps = 500;
  cfg.batch_size = 2;
  cfg.lr = 5e-3;
  cfg.seed = 102;
  auto curve = seqdvc::train_cpt(m, ds, vocab, cfg);

  auto task_mean = [&](const std::string& task, std::size_t lo, std::size_t hi) {
    double s = 0.0;
    long n = 0;
    for (const auto& p : curve.curve) {
      if (p.task != task) continue;
      if (p.step >= static_cast<int>(lo) && p.step < static_cast<int>(hi)) {
        s += p.loss;
        ++n;
      }
    }
    return s / n;
  };
  CHECK(task_mean("concept", 490, 500) < task_mean("concept", 0, 10));
  CHECK(task_mean("boundary", 490, 500) < task_mean("boundary", 0, 10));

  auto ev = seqdvc::evaluate_cpt(m, ds, vocab);
  CHECK(ev.concept_f1 > 0.95);
  CHECK(ev.boundary_accuracy > 0.9);
}

}  // TEST_SUITE

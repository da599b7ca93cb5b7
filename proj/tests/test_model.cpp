#include <filesystem>

#include "doctest.h"
#include "seqdvc/model.hpp"
#include "support/gradcheck.hpp"

using seqdvc::BoolMask;
using seqdvc::ForwardInput;
using seqdvc::Mat;
using seqdvc::Model;
using seqdvc::ModelConfig;
using seqdvc::StreamLayout;
using seqdvc::Var;
namespace nn = seqdvc::nn;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.layers_video = 1;
  cfg.layers_event = 1;
  cfg.layers_text = 1;
  cfg.layers_cross = 2;
  cfg.n_max = 8;
  cfg.vocab_size = 20;
  cfg.max_text_len = 8;
  cfg.max_events = 3;
  cfg.feature_dim = 5;
  return cfg;
}

Mat random_video(const ModelConfig& cfg, seqdvc::Rng& rng, int frames = -1) {
  const int n = frames < 0 ? cfg.n_max : frames;
  Mat v(n, cfg.feature_dim);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.normal();
  return v;
}

Mat bits_row(const ModelConfig& cfg, int a, int b) {
  Mat m = Mat::Zero(1, cfg.n_max);
  for (int t = a; t <= b; ++t) m(0, t) = 1.0;
  return m;
}

ForwardInput sample_input(const ModelConfig& cfg, seqdvc::Rng& rng) {
  ForwardInput in;
  in.video = random_video(cfg, rng);
  in.event_bits = {bits_row(cfg, 0, 2), bits_row(cfg, 4, 5), bits_row(cfg, 6, 7)};
  in.text_ids = {1, 5, 7, 9, 11, 2};
  return in;
}

BoolMask block_diag_mask(const StreamLayout& l) {
  BoolMask m = BoolMask::Constant(l.total(), l.total(), false);
  m.block(0, 0, l.n_video, l.n_video).setConstant(true);
  m.block(l.event_begin(), l.event_begin(), l.n_event, l.n_event).setConstant(true);
  m.block(l.text_begin(), l.text_begin(), l.n_text, l.n_text).setConstant(true);
  return m;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.hidden = 15;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.layers_cross = 0;  // identity cross stack is legal
  CHECK_NOTHROW(cfg.validate());
  cfg.layers_cross = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.feature_dim = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("embed: zero feature row becomes bias + modality + position") {
  ModelConfig cfg = tiny_config();
  Model m = Model::init(cfg, 1);
  ForwardInput in;
  in.video = Mat::Zero(2, cfg.feature_dim);
  Var joint = m.embed(in);
  REQUIRE(joint.rows() == 2);
  // Row t = b_video + mode_v + pos_video[t]; difference of rows isolates pos.
  auto params = m.parameters();
  Mat b_video, mode_v, pos_video;
  for (auto& [name, v] : params) {
    if (name == "embed.video.b") b_video = v.value();
    if (name == "mode.v") mode_v = v.value();
    if (name == "pos.video") pos_video = v.value();
  }
  Mat expect0 = b_video + mode_v + pos_video.row(0).matrix();
  CHECK((joint.value().row(0) - expect0.row(0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("embed: identical event vectors at different positions differ") {
  ModelConfig cfg = tiny_config();
  Model m = Model::init(cfg, 1);
  ForwardInput in;
  in.video = Mat::Zero(1, cfg.feature_dim);
  Mat e = bits_row(cfg, 0, 3);
  in.event_bits = {e, e};
  Var joint = m.embed(in);
  const auto l = m.layout(in);
  Mat r1 = joint.value().row(l.event_begin());
  Mat r2 = joint.value().row(l.event_begin() + 1);
  CHECK((r1 - r2).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("embed: joint length is frames + events + tokens") {
  ModelConfig cfg = tiny_config();
  cfg.n_max = 32;
  cfg.max_text_len = 12;
  Model m = Model::init(cfg, 1);
  seqdvc::Rng rng(3);
  ForwardInput in;
  in.video = random_video(cfg, rng);
  in.event_bits = {bits_row(cfg, 0, 5), bits_row(cfg, 8, 12), bits_row(cfg, 20, 25)};
  in.text_ids = {1, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 2};
  REQUIRE(in.text_ids.size() == 12);
  Var joint = m.embed(in);
  CHECK(m.layout(in).total() == 47);
  CHECK(joint.rows() == 47);
  CHECK(joint.cols() == cfg.hidden);
}

TEST_CASE("embed: dimension and overflow errors") {
  ModelConfig cfg = tiny_config();
  Model m = Model::init(cfg, 1);
  ForwardInput bad_dim;
  bad_dim.video = Mat::Zero(2, cfg.feature_dim + 1);
  CHECK_THROWS_AS((void)m.embed(bad_dim), std::invalid_argument);

  ForwardInput too_long;
  too_long.video = Mat::Zero(cfg.n_max + 1, cfg.feature_dim);
  CHECK_THROWS_AS((void)m.embed(too_long), std::invalid_argument);

  ForwardInput long_text;
  long_text.video = Mat::Zero(2, cfg.feature_dim);
  long_text.text_ids.assign(cfg.max_text_len + 1, 5);
  CHECK_THROWS_AS((void)m.embed(long_text), std::invalid_argument);
}

TEST_CASE("encode: joint shape preserved across legal configs") {
  seqdvc::Rng rng(4);
  for (int lc : {0, 1, 2}) {
    ModelConfig cfg = tiny_config();
    cfg.layers_cross = lc;
    Model m = Model::init(cfg, 5);
    ForwardInput in = sample_input(cfg, rng);
    const auto l = m.layout(in);
    Var h = m.encode(m.embed(in), l, seqdvc::base_mask(l));
    CHECK(h.rows() == l.total());
    CHECK(h.cols() == cfg.hidden);
  }
}

TEST_CASE("encode: block-diagonal mask degenerates to independent encoders") {
  ModelConfig cfg = tiny_config();
  Model m = Model::init(cfg, 6);
  seqdvc::Rng rng(7);
  ForwardInput in = sample_input(cfg, rng);
  const auto l = m.layout(in);
  Var joint = m.embed(in);
  Var whole = m.encode(joint, l, block_diag_mask(l));

  // Strip: run each stream alone through the same model.
  ForwardInput video_only;
  video_only.video = in.video;
  const auto lv = m.layout(video_only);
  Var v_alone = m.encode(m.embed(video_only), lv, seqdvc::base_mask(lv));
  CHECK((whole.value().topRows(l.n_video) - v_alone.value()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("encode: L_c=0 reduces to independent single-modal encoders") {
  ModelConfig cfg = tiny_config();
  cfg.layers_cross = 0;
  Model m = Model::init(cfg, 8);
  seqdvc::Rng rng(9);
  ForwardInput in = sample_input(cfg, rng);
  const auto l = m.layout(in);
  Var out = m.encode(m.embed(in), l, seqdvc::base_mask(l));

  // Without cross layers, text and event outputs cannot depend on the video.
  ForwardInput other = in;
  other.video = random_video(cfg, rng);
  Var out2 = m.encode(m.embed(other), l, seqdvc::base_mask(l));
  CHECK((out.value().bottomRows(l.n_event + l.n_text) -
         out2.value().bottomRows(l.n_event + l.n_text))
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK((out.value().topRows(l.n_video) - out2.value().topRows(l.n_video))
            .cwiseAbs()
            .maxCoeff() > 0.0);

  // And the video block itself matches encoding the video stream alone.
  ForwardInput video_only;
  video_only.video = in.video;
  const auto lv = m.layout(video_only);
  Var v_alone = m.encode(m.embed(video_only), lv, seqdvc::base_mask(lv));
  CHECK((out.value().topRows(l.n_video) - v_alone.value()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("caption_mask: M=1 leaves the mask unrestricted") {
  StreamLayout l;
  l.n_video = 4;
  l.n_event = 1;
  l.n_text = 3;
  BoolMask m = seqdvc::caption_mask(l, 0, 0);
  CHECK((m == seqdvc::base_mask(l)).all());
}

TEST_CASE("caption_mask: other-event columns are fully blocked") {
  StreamLayout l;
  l.n_video = 4;
  l.n_event = 3;
  l.n_text = 3;
  BoolMask m = seqdvc::caption_mask(l, 0, 1);
  const int e0 = l.event_begin();
  for (int q = 0; q < l.total(); ++q) {
    CHECK_FALSE(m(q, e0 + 0));
    CHECK_FALSE(m(q, e0 + 2));
    CHECK(m(q, e0 + 1));
  }
  CHECK_THROWS_AS((void)seqdvc::caption_mask(l, 0, 3), std::invalid_argument);
}

TEST_CASE("causal_mask: lower-triangular block, stream keys hidden outside") {
  StreamLayout l;
  l.n_video = 3;
  l.n_event = 2;
  l.n_text = 5;
  BoolMask m = seqdvc::causal_mask(l, seqdvc::GenStream::Text);
  const int t0 = l.text_begin();
  for (int q = 0; q < 5; ++q)
    for (int k = 0; k < 5; ++k) CHECK(m(t0 + q, t0 + k) == (k <= q));
  // No video or event query may see any text key.
  for (int q = 0; q < t0; ++q)
    for (int k = 0; k < 5; ++k) CHECK_FALSE(m(q, t0 + k));
  // Text queries keep full video/event visibility.
  for (int q = 0; q < 5; ++q)
    for (int k = 0; k < t0; ++k) CHECK(m(t0 + q, k));

  // Single-item stream: the within-stream block is just the diagonal.
  StreamLayout one;
  one.n_video = 3;
  one.n_event = 1;
  BoolMask me = seqdvc::causal_mask(one, seqdvc::GenStream::Event);
  CHECK(me(one.event_begin(), one.event_begin()));
}

TEST_CASE("and_mask composes restrictions") {
  StreamLayout l;
  l.n_video = 2;
  l.n_event = 2;
  l.n_text = 2;
  BoolMask c = seqdvc::and_mask(seqdvc::caption_mask(l, 0, 0),
                                seqdvc::causal_mask(l, seqdvc::GenStream::Text));
  CHECK_FALSE(c(0, l.event_begin() + 1));        // blocked by caption mask
  CHECK_FALSE(c(l.text_begin(), l.text_begin() + 1));  // blocked by causality
  CHECK(c(l.text_begin() + 1, l.text_begin()));
}

TEST_CASE("leakage: text logits exactly invariant to other-event perturbations") {
  ModelConfig cfg = tiny_config();
  Model m = Model::init(cfg, 10);
  seqdvc::Rng rng(11);
  ForwardInput in = sample_input(cfg, rng);
  const auto l = m.layout(in);
  const int i = 1;
  BoolMask mask = seqdvc::caption_mask(l, 0, i);

  auto text_logits = [&](const ForwardInput& input) {
    Var h = m.encode(m.embed(input), l, mask);
    Var text = nn::slice_rows(h, l.text_begin(), l.n_text);
    return m.mlm_logits(text).value();
  };
  Mat base = text_logits(in);

  ForwardInput mutated = in;
  mutated.event_bits[0] = bits_row(cfg, 1, 6);
  mutated.event_bits[2] = Mat::Zero(1, cfg.n_max);
  Mat changed = text_logits(mutated);
  CHECK((base - changed).cwiseAbs().maxCoeff() == 0.0);

  // Perturbing the current event does change the logits.
  ForwardInput cur = in;
  cur.event_bits[i] = bits_row(cfg, 0, 7);
  CHECK((base - text_logits(cur)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("leakage: gradient of caption loss w.r.t. other events is zero") {
  ModelConfig cfg = tiny_config();
  Model m = Model::init(cfg, 12);
  seqdvc::Rng rng(13);
  ForwardInput in = sample_input(cfg, rng);
  const auto l = m.layout(in);
  BoolMask mask = seqdvc::caption_mask(l, 0, 1);

  // The embedded joint matrix is itself a node, so the gradient reaching the
  // blocked events' rows is directly observable.
  Var emb = m.embed(in);
  Var h = m.encode(emb, l, mask);
  Var text = nn::slice_rows(h, l.text_begin(), l.n_text);
  Var loss = nn::mean_all(m.mlm_logits(text));
  loss.backward();
  // Gradient flowing back to the embedded joint rows of blocked events is 0.
  const Mat& g = emb.node()->grad;
  REQUIRE(g.rows() == l.total());
  CHECK(g.row(l.event_begin() + 0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.row(l.event_begin() + 2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.row(l.event_begin() + 1).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("causality: position t invariant to future positions") {
  ModelConfig cfg = tiny_config();
  Model m = Model::init(cfg, 14);
  seqdvc::Rng rng(15);
  ForwardInput in = sample_input(cfg, rng);
  const auto l = m.layout(in);
  BoolMask mask = seqdvc::causal_mask(l, seqdvc::GenStream::Text);

  auto logits_at = [&](const ForwardInput& input, int t) {
    Var h = m.encode(m.embed(input), l, mask);
    Var row = nn::slice_rows(h, l.text_begin() + t, 1);
    return m.mlm_logits(row).value();
  };
  const int t = 2;
  Mat base = logits_at(in, t);
  ForwardInput future = in;
  future.text_ids[4] = 3;
  future.text_ids[5] = 17;
  CHECK((base - logits_at(future, t)).cwiseAbs().maxCoeff() == 0.0);

  ForwardInput past = in;
  past.text_ids[1] = 3;
  CHECK((base - logits_at(past, t)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("causality: event stream, future event invisible") {
  ModelConfig cfg = tiny_config();
  Model m = Model::init(cfg, 16);
  seqdvc::Rng rng(17);
  ForwardInput in;
  in.video = random_video(cfg, rng);
  in.include_start = true;
  in.event_bits = {bits_row(cfg, 0, 2), bits_row(cfg, 3, 4), bits_row(cfg, 6, 7)};
  const auto l = m.layout(in);
  BoolMask mask = seqdvc::causal_mask(l, seqdvc::GenStream::Event);

  auto mefm_at = [&](const ForwardInput& input, int row) {
    Var h = m.encode(m.embed(input), l, mask);
    return m.mefm_logits(nn::slice_rows(h, l.event_begin() + row, 1)).value();
  };
  // Row 1 = first real event (row 0 is the start sentinel).
  Mat base = mefm_at(in, 1);
  ForwardInput future = in;
  future.event_bits[2] = Mat::Zero(1, cfg.n_max);
  CHECK((base - mefm_at(future, 1)).cwiseAbs().maxCoeff() == 0.0);
  // Video rows must not leak the future event either.
  auto video_hidden = [&](const ForwardInput& input) {
    Var h = m.encode(m.embed(input), l, mask);
    return nn::slice_rows(h, 0, l.n_video).value();
  };
  CHECK((video_hidden(in) - video_hidden(future)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("heads: identical hidden rows give identical logits; tying flag matters") {
  ModelConfig cfg = tiny_config();
  Model tied = Model::init(cfg, 18);
  seqdvc::Rng rng(19);
  Mat h(2, cfg.hidden);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = rng.normal();
  h.row(1) = h.row(0);
  Mat logits = tied.mlm_logits(Var::constant(h)).value();
  CHECK((logits.row(0) - logits.row(1)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(logits.cols() == cfg.vocab_size);

  ModelConfig untied_cfg = cfg;
  untied_cfg.tie_mlm = false;
  Model untied = Model::init(untied_cfg, 18);
  Mat logits_untied = untied.mlm_logits(Var::constant(h)).value();
  CHECK((logits - logits_untied).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("heads: video reconstruction shares storage with the embedder") {
  ModelConfig cfg = tiny_config();
  Model m = Model::init(cfg, 20);
  Var w = m.video_embed_weight();
  Mat h = Mat::Zero(1, cfg.hidden);
  Mat before = m.mvfr_pred(Var::constant(h)).value();  // zero hidden -> bias
  // Mutate the embedder weight; the prediction head must move with it.
  Mat h2 = Mat::Constant(1, cfg.hidden, 0.5);
  Mat pred_before = m.mvfr_pred(Var::constant(h2)).value();
  w.value().array() += 1.0;
  Mat pred_after = m.mvfr_pred(Var::constant(h2)).value();
  CHECK((pred_before - pred_after).cwiseAbs().maxCoeff() > 0.0);
  CHECK(before.cols() == cfg.feature_dim);
}

TEST_CASE("heads: event prediction emits n_max + 1 outputs") {
  ModelConfig cfg = tiny_config();
  Model m = Model::init(cfg, 21);
  Mat h = Mat::Zero(3, cfg.hidden);
  CHECK(m.mefm_logits(Var::constant(h)).cols() == cfg.n_max + 1);
}

TEST_CASE("checkpoint: save/load reproduces forward outputs exactly") {
  namespace fs = std::filesystem;
  ModelConfig cfg = tiny_config();
  Model m = Model::init(cfg, 22);
  seqdvc::Rng rng(23);
  ForwardInput in = sample_input(cfg, rng);
  const auto l = m.layout(in);
  Mat before = m.encode(m.embed(in), l, seqdvc::base_mask(l)).value();
  const auto path = (fs::temp_directory_path() / "seqdvc_model_ckpt.bin").string();
  m.save(path);
  Model m2 = Model::load(cfg, path);
  Mat after = m2.encode(m2.embed(in), l, seqdvc::base_mask(l)).value();
  CHECK((before - after).cwiseAbs().maxCoeff() == 0.0);
  fs::remove(path);

  ModelConfig other = cfg;
  other.hidden = 32;
  other.heads = 4;
  CHECK_THROWS((void)Model::load(other, path));
}

TEST_CASE("full-model gradcheck on a small encode + head loss") {
  ModelConfig cfg = tiny_config();
  cfg.layers_cross = 1;
  cfg.n_max = 4;
  cfg.max_text_len = 4;
  Model m = Model::init(cfg, 24);
  seqdvc::Rng rng(25);
  ForwardInput in;
  in.video = random_video(cfg, rng, 3);
  in.event_bits = {bits_row(cfg, 0, 1)};
  in.text_ids = {1, 6, 2};
  const auto l = m.layout(in);
  BoolMask mask = seqdvc::base_mask(l);
  auto build = [&] {
    Var h = m.encode(m.embed(in), l, mask);
    Var text = nn::slice_rows(h, l.text_begin(), l.n_text);
    return seqdvc::nn::cross_entropy_rows(m.mlm_logits(text), {6, 2, 2});
  };
  auto params = m.parameter_vars();
  const double err = seqdvc::testsupport::gradcheck(build, params);
  CHECK(err < 5e-3);
}

}  // TEST_SUITE

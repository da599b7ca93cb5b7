#include "seqdvc/pretraining.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace seqdvc {

namespace {

bool maskable_id(int id) {
  return id != Tokenizer::kPad && id != Tokenizer::kSos && id != Tokenizer::kEos;
}

}  // namespace

MaskedText mask_text(const std::vector<int>& ids, int vocab_size, Rng& rng, double rate) {
  std::vector<int> candidates;
  for (std::size_t p = 0; p < ids.size(); ++p) {
    if (maskable_id(ids[p])) candidates.push_back(static_cast<int>(p));
  }
  if (candidates.empty()) throw std::invalid_argument("mask_text: caption has no words");
  MaskedText out;
  out.input_ids = ids;
  std::vector<int> selected;
  for (int p : candidates) {
    if (rng.uniform() < rate) selected.push_back(p);
  }
  if (selected.empty()) {
    selected.push_back(candidates[rng.uniform_int(static_cast<int>(candidates.size()))]);
  }
  const int n_words = vocab_size - 5;  // non-special tail of the vocabulary
  for (int p : selected) {
    out.masked_positions.push_back(p);
    out.targets.push_back(ids[p]);
    const double branch = rng.uniform();
    if (branch < 0.8) {
      out.input_ids[p] = Tokenizer::kMask;
    } else if (branch < 0.9 && n_words > 0) {
      out.input_ids[p] = 5 + rng.uniform_int(n_words);
    }
    // else: keep the original token
  }
  return out;
}

MaskedVideo mask_video_frames(const Mat& video, const EventVector& event, Rng& rng,
                              double rate) {
  if (event.frame_count() < static_cast<int>(video.rows())) {
    throw std::invalid_argument("mask_video_frames: event vector shorter than video");
  }
  std::vector<int> candidates;
  for (int t = 0; t < static_cast<int>(video.rows()); ++t) {
    if (event.bits[t]) candidates.push_back(t);
  }
  if (candidates.empty()) {
    throw std::invalid_argument("mask_video_frames: event covers no frames of the video");
  }
  std::vector<int> selected;
  for (int t : candidates) {
    if (rng.uniform() < rate) selected.push_back(t);
  }
  if (selected.empty()) {
    selected.push_back(candidates[rng.uniform_int(static_cast<int>(candidates.size()))]);
  }
  MaskedVideo out;
  out.video = video;
  out.targets = Mat(static_cast<Eigen::Index>(selected.size()), video.cols());
  for (std::size_t k = 0; k < selected.size(); ++k) {
    out.masked_frames.push_back(selected[k]);
    out.targets.row(static_cast<Eigen::Index>(k)) = video.row(selected[k]);
    out.video.row(selected[k]).setZero();
  }
  return out;
}

MaskedEvents mask_events(const std::vector<Mat>& events, Rng& rng, double rate) {
  if (events.empty()) throw std::invalid_argument("mask_events: empty event sequence");
  std::vector<int> selected;
  for (int j = 0; j < static_cast<int>(events.size()); ++j) {
    if (rng.uniform() < rate) selected.push_back(j);
  }
  if (selected.empty()) {
    selected.push_back(rng.uniform_int(static_cast<int>(events.size())));
  }
  MaskedEvents out;
  out.event_bits = events;
  for (int j : selected) {
    out.masked_indices.push_back(j);
    out.targets.push_back(events[j]);
    out.event_bits[j] = Mat::Zero(1, events[j].cols());
  }
  return out;
}

BatchKind sample_batch_kind(double lambda, Rng& rng) {
  if (lambda < 0.0 || lambda > 1.0) {
    throw std::invalid_argument("sample_batch_kind: lambda outside [0,1]");
  }
  return rng.uniform() < lambda ? BatchKind::BThree : BatchKind::BTwo;
}

std::vector<Mat> encode_record_events(const DenseVideoRecord& record, int n_frames) {
  std::vector<Mat> out;
  for (const auto& iv : record.events) {
    EventVector v = encode_event(iv, n_frames);
    Mat row = Mat::Zero(1, n_frames);
    for (int t = 0; t < n_frames; ++t) row(0, t) = v.bits[t] ? 1.0 : 0.0;
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<int> caption_token_ids(const Tokenizer& tok, const std::string& sentence,
                                   int max_text_len) {
  std::vector<int> ids = tok.encode(sentence, true);
  if (static_cast<int>(ids.size()) > max_text_len) {
    ids.resize(static_cast<std::size_t>(max_text_len - 1));
    ids.push_back(Tokenizer::kEos);
  }
  return ids;
}

namespace {

void check_record(const Model& model, const DenseVideoRecord& record) {
  if (record.features.rows() != model.config().n_max) {
    throw std::invalid_argument("record " + record.video_id +
                                ": frame count must equal the model's n_max");
  }
  if (record.features.cols() != model.config().feature_dim) {
    throw std::invalid_argument("record " + record.video_id + ": feature dim mismatch");
  }
  if (static_cast<int>(record.events.size()) > model.config().max_events) {
    throw std::invalid_argument("record " + record.video_id + ": too many events");
  }
}

}  // namespace

SampleLosses b_three_sample_loss(const Model& model, const DenseVideoRecord& record,
                                 int event_index, const Tokenizer& tok, Rng& rng,
                                 double mask_rate) {
  check_record(model, record);
  if (event_index < 0 || event_index >= static_cast<int>(record.events.size())) {
    throw std::invalid_argument("b_three_sample_loss: event index out of range");
  }
  const auto& cfg = model.config();
  auto ids = caption_token_ids(tok, record.sentences[event_index], cfg.max_text_len);
  MaskedText mt = mask_text(ids, cfg.vocab_size, rng, mask_rate);
  EventVector ev = encode_event(record.events[event_index], cfg.n_max);
  MaskedVideo mv = mask_video_frames(record.features, ev, rng, mask_rate);

  ForwardInput in;
  in.video = mv.video;
  in.event_bits = encode_record_events(record, cfg.n_max);
  in.text_ids = mt.input_ids;
  const auto l = model.layout(in);
  BoolMask mask = caption_mask(l, 0, event_index);
  Var h = model.encode(model.embed(in), l, mask);

  std::vector<Eigen::Index> text_rows;
  for (int p : mt.masked_positions) text_rows.push_back(l.text_begin() + p);
  Var mlm_logits = model.mlm_logits(nn::gather_rows(h, text_rows));
  Var mlm = nn::cross_entropy_rows(mlm_logits, mt.targets);

  std::vector<Eigen::Index> frame_rows;
  for (int t : mv.masked_frames) frame_rows.push_back(t);
  Var pred = model.mvfr_pred(nn::gather_rows(h, frame_rows));
  Var mvfr = nn::l2_rowsum_mean(pred, mv.targets);

  SampleLosses out;
  out.total = nn::add(mlm, mvfr);
  out.mlm = mlm.value()(0, 0);
  out.mvfr = mvfr.value()(0, 0);
  return out;
}

SampleLosses b_two_sample_loss(const Model& model, const DenseVideoRecord& record,
                               Rng& rng, double mask_rate) {
  check_record(model, record);
  if (!record.mefm_ok) {
    throw std::invalid_argument("b_two_sample_loss: record excluded from event masking");
  }
  const auto& cfg = model.config();
  MaskedEvents me = mask_events(encode_record_events(record, cfg.n_max), rng, mask_rate);

  ForwardInput in;
  in.video = record.features;
  in.event_bits = me.event_bits;
  const auto l = model.layout(in);
  Var h = model.encode(model.embed(in), l, base_mask(l));

  std::vector<Eigen::Index> rows;
  for (int j : me.masked_indices) rows.push_back(l.event_begin() + j);
  Var logits = model.mefm_logits(nn::gather_rows(h, rows));
  Mat targets(static_cast<Eigen::Index>(me.targets.size()), cfg.n_max + 1);
  for (std::size_t k = 0; k < me.targets.size(); ++k) {
    targets.row(static_cast<Eigen::Index>(k)).head(cfg.n_max) = me.targets[k].row(0);
    targets(static_cast<Eigen::Index>(k), cfg.n_max) = 0.0;  // a real event: not stop
  }
  Var mefm = nn::bce_logits_rowsum_mean(logits, targets);

  SampleLosses out;
  out.total = mefm;
  out.mefm = mefm.value()(0, 0);
  return out;
}

PretrainResult pretrain(Model& model, const Dataset& data, const PretrainConfig& cfg) {
  if (data.records.empty()) throw std::invalid_argument("pretrain: empty corpus");
  if (cfg.steps < 0 || cfg.batch_size < 1) {
    throw std::invalid_argument("pretrain: bad steps/batch size");
  }
  std::vector<int> mefm_eligible;
  for (int r = 0; r < static_cast<int>(data.records.size()); ++r) {
    if (data.records[r].mefm_ok) mefm_eligible.push_back(r);
  }

  auto params = model.parameter_vars();
  AdamState opt;
  opt.lr = cfg.lr;
  nn::adam_init(opt, params);

  PretrainResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    Rng kind_rng = derive_rng(cfg.seed, "kind", step);
    BatchKind kind = sample_batch_kind(cfg.lambda, kind_rng);
    if (kind == BatchKind::BTwo && mefm_eligible.empty()) kind = BatchKind::BThree;

    std::vector<Var> batch_losses;
    double mlm_sum = 0.0, mvfr_sum = 0.0, mefm_sum = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      Rng rng = derive_rng(cfg.seed, "sample", static_cast<std::uint64_t>(step) * 1000003u + b);
      if (kind == BatchKind::BThree) {
        const auto& rec = data.records[rng.uniform_int(static_cast<int>(data.records.size()))];
        const int i = rng.uniform_int(static_cast<int>(rec.events.size()));
        SampleLosses s = b_three_sample_loss(model, rec, i, data.tokenizer, rng, cfg.mask_rate);
        batch_losses.push_back(s.total);
        mlm_sum += s.mlm;
        mvfr_sum += s.mvfr;
      } else {
        const auto& rec =
            data.records[mefm_eligible[rng.uniform_int(static_cast<int>(mefm_eligible.size()))]];
        SampleLosses s = b_two_sample_loss(model, rec, rng, cfg.mask_rate);
        batch_losses.push_back(s.total);
        mefm_sum += s.mefm;
      }
    }
    Var total = batch_losses.size() == 1
                    ? batch_losses[0]
                    : [&] {
                        Var acc = batch_losses[0];
                        for (std::size_t i = 1; i < batch_losses.size(); ++i) {
                          acc = nn::add(acc, batch_losses[i]);
                        }
                        return acc;
                      }();
    total = nn::scale(total, 1.0 / cfg.batch_size);
    const double loss_val = total.value()(0, 0);
    if (!std::isfinite(loss_val)) {
      throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step));
    }
    auto g = nn::grad(total, params);
    nn::adam_step(params, g.grads, opt);

    if (kind == BatchKind::BThree) {
      result.curve.push_back({step, "mlm", mlm_sum / cfg.batch_size});
      result.curve.push_back({step, "mvfr", mvfr_sum / cfg.batch_size});
    } else {
      result.curve.push_back({step, "mefm", mefm_sum / cfg.batch_size});
    }
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() &&
        (step + 1) % cfg.checkpoint_every == 0) {
      model.save(cfg.checkpoint_dir + "/step_" + std::to_string(step + 1) + ".ckpt");
    }
  }
  return result;
}

void write_loss_curve_csv(const std::string& path, const std::vector<LossPoint>& curve) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "step,task,loss\n";
  char buf[64];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof(buf), "%.17g", p.loss);
    f << p.step << "," << p.task << "," << buf << "\n";
  }
  if (!f) throw std::runtime_error("write failed for " + path);
}

}  // namespace seqdvc

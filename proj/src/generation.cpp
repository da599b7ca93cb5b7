#include "seqdvc/generation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace seqdvc {

namespace {

double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

void check_training_record(const DenseVideoRecord& rec, const ModelConfig& cfg) {
  if (rec.features.rows() != cfg.n_max || rec.features.cols() != cfg.feature_dim) {
    throw std::invalid_argument("finetune: record " + rec.video_id +
                                ": features must be n_max x feature_dim");
  }
  if (rec.events.empty()) {
    throw std::invalid_argument("finetune: record " + rec.video_id + " has no events");
  }
  if (static_cast<int>(rec.events.size()) > cfg.max_events) {
    throw std::invalid_argument("finetune: record " + rec.video_id +
                                " exceeds max_events");
  }
}

Mat bits_to_row(const EventVector& ev, int n) {
  Mat row = Mat::Zero(1, n);
  for (int t = 0; t < n; ++t) row(0, t) = ev.bits[t] ? 1.0 : 0.0;
  return row;
}

// Shared trainer skeleton; sample_loss draws one scalar loss per sample.
template <typename SampleFn>
FinetuneResult run_finetune(Model& model, const Dataset& data, const FinetuneConfig& cfg,
                            const char* task, const char* sample_tag, SampleFn sample_loss) {
  if (data.records.empty()) throw std::invalid_argument("finetune: empty corpus");
  if (cfg.steps < 0 || cfg.batch_size < 1 || cfg.lr <= 0.0 || cfg.mask_rate < 0.0 ||
      cfg.mask_rate > 1.0) {
    throw std::invalid_argument("finetune: bad config");
  }
  for (const auto& rec : data.records) check_training_record(rec, model.config());

  auto params = model.parameter_vars();
  nn::AdamState<double> opt;
  nn::adam_init(opt, params);
  opt.lr = cfg.lr;

  FinetuneResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    Var total;
    for (int b = 0; b < cfg.batch_size; ++b) {
      Rng rng = derive_rng(cfg.seed, sample_tag,
                           static_cast<std::uint64_t>(step) * 1000003u + b);
      Var li = sample_loss(rng);
      total = (b == 0) ? li : nn::add(total, li);
    }
    Var loss = nn::scale(total, 1.0 / cfg.batch_size);
    const double value = loss.value()(0, 0);
    if (!std::isfinite(value)) {
      throw std::runtime_error("finetune: non-finite loss at step " + std::to_string(step));
    }
    auto g = nn::grad(loss, params);
    nn::adam_step(params, g.grads, opt);
    result.curve.push_back({step, task, value});
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      model.save(cfg.checkpoint_dir + "/step_" + std::to_string(step + 1) + ".ckpt");
    }
  }
  return result;
}

}  // namespace

void DecodeConfig::validate() const {
  if (!(frame_threshold > 0.0 && frame_threshold < 1.0) ||
      !(stop_threshold > 0.0 && stop_threshold < 1.0)) {
    throw std::invalid_argument("decode: thresholds must lie in (0,1)");
  }
  if (max_events < 1 || max_caption_len < 1) {
    throw std::invalid_argument("decode: limits must be >= 1");
  }
}

nn::Var<double> ed_sample_loss(const Model& model, const DenseVideoRecord& record,
                               Rng& rng, double mask_rate) {
  const ModelConfig& cfg = model.config();
  check_training_record(record, cfg);
  const auto events = encode_record_events(record, cfg.n_max);
  const int m = static_cast<int>(events.size());

  // No forced minimum: a draw with nothing masked still trains the stop slot,
  // and it shows the stop query the all-real prefix that decoding presents.
  std::vector<int> masked;
  for (int j = 0; j < m; ++j) {
    if (rng.uniform() < mask_rate) masked.push_back(j);
  }

  ForwardInput in;
  in.video = record.features;
  in.include_start = true;
  in.event_bits.reserve(m + 1);
  std::vector<char> is_masked(m, 0);
  for (int j : masked) is_masked[j] = 1;
  for (int j = 0; j < m; ++j) {
    in.event_bits.push_back(is_masked[j] ? Mat::Zero(1, cfg.n_max) : events[j]);
  }
  in.event_bits.push_back(Mat::Zero(1, cfg.n_max));  // stop slot

  const StreamLayout l = model.layout(in);
  const BoolMask mask = causal_mask(l, GenStream::Event);
  Var h = model.encode(model.embed(in), l, mask);

  // Rows carrying loss: each masked event (stream row j+1 after the start
  // sentinel) and the stop slot (stream row m+1).
  std::vector<Eigen::Index> rows;
  Mat targets(static_cast<Eigen::Index>(masked.size()) + 1, cfg.n_max + 1);
  for (std::size_t k = 0; k < masked.size(); ++k) {
    rows.push_back(l.event_begin() + masked[k] + 1);
    targets.row(static_cast<Eigen::Index>(k)).head(cfg.n_max) = events[masked[k]].row(0);
    targets(static_cast<Eigen::Index>(k), cfg.n_max) = 0.0;
  }
  rows.push_back(l.event_begin() + m + 1);
  targets.row(targets.rows() - 1).setZero();
  targets(targets.rows() - 1, cfg.n_max) = 1.0;

  Var logits = model.mefm_logits(nn::gather_rows(h, rows));
  return nn::bce_logits_rowsum_mean(logits, targets);
}

nn::Var<double> ec_sample_loss(const Model& model, const DenseVideoRecord& record,
                               int event_index, const Tokenizer& tok, Rng& rng,
                               double mask_rate) {
  const ModelConfig& cfg = model.config();
  check_training_record(record, cfg);
  if (event_index < 0 || event_index >= static_cast<int>(record.events.size())) {
    throw std::invalid_argument("ec_sample_loss: event index out of range");
  }
  const auto ids = caption_token_ids(tok, record.sentences[event_index], cfg.max_text_len);

  // Every position but [SOS] may be masked; [EOS] must be learnable or the
  // generator never halts.
  std::vector<int> masked;
  for (std::size_t p = 1; p < ids.size(); ++p) {
    if (rng.uniform() < mask_rate) masked.push_back(static_cast<int>(p));
  }
  if (masked.empty()) {
    masked.push_back(1 + static_cast<int>(rng.uniform_int(ids.size() - 1)));
  }

  ForwardInput in;
  in.video = record.features;
  in.event_bits = encode_record_events(record, cfg.n_max);
  in.text_ids = ids;
  for (int p : masked) in.text_ids[p] = Tokenizer::kMask;

  const StreamLayout l = model.layout(in);
  const BoolMask mask =
      and_mask(caption_mask(l, 0, event_index), causal_mask(l, GenStream::Text));
  Var h = model.encode(model.embed(in), l, mask);

  std::vector<Eigen::Index> rows;
  std::vector<int> targets;
  for (int p : masked) {
    rows.push_back(l.text_begin() + p);
    targets.push_back(ids[p]);
  }
  return nn::cross_entropy_rows(model.mlm_logits(nn::gather_rows(h, rows)), targets);
}

FinetuneResult finetune_ed(Model& model, const Dataset& data, const FinetuneConfig& cfg) {
  return run_finetune(model, data, cfg, "ed", "ed-sample", [&](Rng& rng) {
    const auto& rec = data.records[rng.uniform_int(data.records.size())];
    return ed_sample_loss(model, rec, rng, cfg.mask_rate);
  });
}

FinetuneResult finetune_ec(Model& model, const Dataset& data, const FinetuneConfig& cfg) {
  return run_finetune(model, data, cfg, "ec", "ec-sample", [&](Rng& rng) {
    const auto& rec = data.records[rng.uniform_int(data.records.size())];
    const int ei = static_cast<int>(rng.uniform_int(rec.events.size()));
    return ec_sample_loss(model, rec, ei, data.tokenizer, rng, cfg.mask_rate);
  });
}

std::vector<EventVector> generate_event_rows(const Model& model, const Mat& features,
                                             const DecodeConfig& dc,
                                             const std::vector<EventVector>& forced_prefix,
                                             Rng* rng) {
  dc.validate();
  const ModelConfig& cfg = model.config();
  if (dc.sample_bits && rng == nullptr) {
    throw std::invalid_argument("generate_event_rows: sampling needs an rng");
  }
  const int limit = std::min(dc.max_events, cfg.max_events);

  std::vector<Mat> realized;
  for (const auto& ev : forced_prefix) {
    realized.push_back(bits_to_row(ev, cfg.n_max));
  }
  std::vector<EventVector> emitted;
  while (static_cast<int>(realized.size()) < limit) {
    ForwardInput in;
    in.video = features;
    in.include_start = true;
    in.event_bits = realized;
    in.event_bits.push_back(Mat::Zero(1, cfg.n_max));  // masked next-event slot

    const StreamLayout l = model.layout(in);
    Var h = model.encode(model.embed(in), l, causal_mask(l, GenStream::Event));
    const Eigen::Index slot = l.event_begin() + static_cast<Eigen::Index>(realized.size()) + 1;
    const Mat logits = model.mefm_logits(nn::slice_rows(h, slot, 1)).value();

    if (sigmoid(logits(0, cfg.n_max)) > dc.stop_threshold) break;
    EventVector ev;
    ev.bits.assign(cfg.n_max, 0);
    for (int t = 0; t < cfg.n_max; ++t) {
      const double p = sigmoid(logits(0, t));
      const bool on = dc.sample_bits ? (rng->uniform() < p) : (p > dc.frame_threshold);
      ev.bits[t] = on ? 1 : 0;
    }
    if (!ev.any()) break;
    realized.push_back(bits_to_row(ev, cfg.n_max));
    emitted.push_back(std::move(ev));
  }
  return emitted;
}

EventSequence generate_events(const Model& model, const Mat& features,
                              const DecodeConfig& dc, Rng* rng) {
  return sort_and_validate(generate_event_rows(model, features, dc, {}, rng));
}

std::vector<int> generate_caption(const Model& model, const Mat& features,
                                  const EventVector& event, int rank,
                                  const DecodeConfig& dc) {
  dc.validate();
  const ModelConfig& cfg = model.config();
  if (rank < 0 || rank + 1 >= cfg.max_events + 2) {
    throw std::invalid_argument("generate_caption: rank out of range");
  }
  const Mat event_row = bits_to_row(event, cfg.n_max);
  // The probe slot must still fit in the text stream, so at most
  // max_text_len - 1 tokens can be generated after [SOS].
  const int cap = std::min(dc.max_caption_len, cfg.max_text_len - 1);

  std::vector<int> seq = {Tokenizer::kSos};
  for (int t = 0; t < cap; ++t) {
    ForwardInput in;
    in.video = features;
    in.event_bits = {event_row};
    in.event_pos = {rank + 1};
    in.text_ids = seq;
    in.text_ids.push_back(Tokenizer::kMask);

    const StreamLayout l = model.layout(in);
    const BoolMask mask = and_mask(caption_mask(l, 0, 0), causal_mask(l, GenStream::Text));
    Var h = model.encode(model.embed(in), l, mask);
    const Eigen::Index slot = l.text_begin() + static_cast<Eigen::Index>(seq.size());
    const Mat logits = model.mlm_logits(nn::slice_rows(h, slot, 1)).value();

    int best = -1;
    double best_score = 0.0;
    for (int v = 0; v < cfg.vocab_size; ++v) {
      if (v == Tokenizer::kMask || v == Tokenizer::kPad) continue;
      if (best < 0 || logits(0, v) > best_score) {
        best = v;
        best_score = logits(0, v);
      }
    }
    seq.push_back(best);
    if (best == Tokenizer::kEos) break;
  }
  return seq;
}

std::vector<SubmissionEvent> detect_then_describe(const Model& ed, const Model& ec,
                                                  const Mat& features, double duration_sec,
                                                  const Tokenizer& tok,
                                                  const DecodeConfig& dc, Rng* rng) {
  const EventSequence seq = generate_events(ed, features, dc, rng);
  std::vector<SubmissionEvent> out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const TimeInterval ti = decode_event(seq[i], duration_sec);
    const auto ids = generate_caption(ec, features, seq[i], static_cast<int>(i), dc);
    SubmissionEvent se;
    se.sentence = tok.decode(ids);
    se.start_sec = ti.start_sec;
    se.end_sec = ti.end_sec;
    out.push_back(std::move(se));
  }
  return out;
}

}  // namespace seqdvc

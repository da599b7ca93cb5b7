#pragma once

#include <string>
#include <vector>

#include "seqdvc/data.hpp"
#include "seqdvc/event_codec.hpp"
#include "seqdvc/model.hpp"
#include "seqdvc/rng.hpp"

// Masked pre-training: word masking (MLM), in-event frame masking (MVFR),
// event masking (MEFM), and the lambda-scheduled alternating trainer.

namespace seqdvc {

struct MaskedText {
  std::vector<int> input_ids;
  std::vector<int> masked_positions;  // indices into input_ids
  std::vector<int> targets;           // original ids, aligned with positions
};

// Word positions (not [SOS]/[EOS]/[PAD]) are selected independently at
// `rate`; a selected word becomes [MASK] 80% of the time, a random
// non-special word 10%, and stays unchanged 10%. At least one position is
// always selected.
MaskedText mask_text(const std::vector<int>& ids, int vocab_size, Rng& rng,
                     double rate = 0.15);

struct MaskedVideo {
  Mat video;                      // copy with masked rows zeroed
  std::vector<int> masked_frames;
  Mat targets;                    // original rows, one per masked frame
};

// Candidates are the frames covered by e_i; masked frames are zeroed.
MaskedVideo mask_video_frames(const Mat& video, const EventVector& event,
                              Rng& rng, double rate = 0.15);

struct MaskedEvents {
  std::vector<Mat> event_bits;    // zero rows at masked indices
  std::vector<int> masked_indices;
  std::vector<Mat> targets;       // original 1 x N bit rows
};

MaskedEvents mask_events(const std::vector<Mat>& events, Rng& rng, double rate = 0.15);

enum class BatchKind { BThree, BTwo };

// B_three with probability lambda.
BatchKind sample_batch_kind(double lambda, Rng& rng);

struct PretrainConfig {
  double lambda = 1.0 / 3.0;
  int steps = 1000;
  int batch_size = 4;
  double lr = 1e-3;
  double mask_rate = 0.15;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;       // 0: final checkpoint only
  std::string checkpoint_dir;     // used when checkpoint_every > 0
};

struct LossPoint {
  long step = 0;
  std::string task;  // "mlm", "mvfr", or "mefm"
  double loss = 0.0;
};

struct SampleLosses {
  Var total;
  double mlm = 0.0, mvfr = 0.0, mefm = 0.0;
};

// One B_three sample: full event sequence as input, caption mask for event
// `event_index`, masked caption plus masked in-event frames; loss is
// L_MLM + L_MVFR.
SampleLosses b_three_sample_loss(const Model& model, const DenseVideoRecord& record,
                                 int event_index, const Tokenizer& tok, Rng& rng,
                                 double mask_rate);

// One B_two sample: video + events only; masked events are predicted as
// N per-frame bits plus a stop output with target "not stop".
SampleLosses b_two_sample_loss(const Model& model, const DenseVideoRecord& record,
                               Rng& rng, double mask_rate);

struct PretrainResult {
  std::vector<LossPoint> curve;
};

PretrainResult pretrain(Model& model, const Dataset& data, const PretrainConfig& cfg);

void write_loss_curve_csv(const std::string& path, const std::vector<LossPoint>& curve);

// Shared helpers for the fine-tuning stages.
std::vector<Mat> encode_record_events(const DenseVideoRecord& record, int n_frames);
std::vector<int> caption_token_ids(const Tokenizer& tok, const std::string& sentence,
                                   int max_text_len);

}  // namespace seqdvc

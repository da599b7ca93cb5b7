#pragma once

#include <string>
#include <vector>

#include "seqdvc/data.hpp"
#include "seqdvc/event_codec.hpp"
#include "seqdvc/model.hpp"
#include "seqdvc/pretraining.hpp"

// Turns the bidirectionally pre-trained model into two left-to-right
// generators, one over event vectors and one over caption tokens, and runs
// the detect-then-describe pipeline. The adaptation is entirely in the
// attention masks and the masked-position training scheme; the architecture
// is untouched.

namespace seqdvc {

enum class TextDecode { Greedy };

struct DecodeConfig {
  double frame_threshold = 0.5;  // bit_t = 1 iff sigmoid(logit_t) > this
  double stop_threshold = 0.5;   // halt once sigmoid(stop logit) > this
  int max_events = 4;
  int max_caption_len = 16;  // generated tokens, [SOS] excluded
  TextDecode text_decode = TextDecode::Greedy;
  bool sample_bits = false;  // Bernoulli per-frame draws instead of thresholds

  void validate() const;
};

struct FinetuneConfig {
  int steps = 1000;
  int batch_size = 4;
  double lr = 1e-3;
  double mask_rate = 0.15;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  // 0 disables periodic saves
  std::string checkpoint_dir;
};

struct FinetuneResult {
  std::vector<LossPoint> curve;
};

// One event-generator training sample: the video, the start sentinel, the GT
// event rows with a random 15% replaced by the all-zero mask vector, and a
// trailing always-masked slot whose target is the stop flag. Loss applies at
// the masked rows and the stop slot only, under the causal event mask, so
// every prediction sees strictly earlier events plus video.
nn::Var<double> ed_sample_loss(const Model& model, const DenseVideoRecord& record,
                               Rng& rng, double mask_rate);

// One caption-generator training sample for (record, event_index): full event
// stream with every other event's keys blocked, text under the causal mask,
// 15% of non-[SOS] token positions (at least one, [EOS] included) replaced by
// [MASK] and predicted with cross entropy.
nn::Var<double> ec_sample_loss(const Model& model, const DenseVideoRecord& record,
                               int event_index, const Tokenizer& tok, Rng& rng,
                               double mask_rate);

FinetuneResult finetune_ed(Model& model, const Dataset& data, const FinetuneConfig& cfg);
FinetuneResult finetune_ec(Model& model, const Dataset& data, const FinetuneConfig& cfg);

// Emission-order decoding loop: append a masked slot after the forced prefix
// and any rows emitted so far, run the model, read the N bit logits and the
// stop logit, and halt on stop, on an all-zero decode, or at max_events.
// Returns only newly emitted rows. `rng` is required when dc.sample_bits.
std::vector<EventVector> generate_event_rows(const Model& model, const Mat& features,
                                             const DecodeConfig& dc,
                                             const std::vector<EventVector>& forced_prefix = {},
                                             Rng* rng = nullptr);

// generate_event_rows followed by temporal sort and validation.
EventSequence generate_events(const Model& model, const Mat& features,
                              const DecodeConfig& dc, Rng* rng = nullptr);

// Greedy token loop conditioned on one event at positional slot rank+1.
// Returns the id sequence starting with [SOS], ending with [EOS] when it was
// produced within the cap; [MASK] and [PAD] are never emitted.
std::vector<int> generate_caption(const Model& model, const Mat& features,
                                  const EventVector& event, int rank,
                                  const DecodeConfig& dc);

// Detect events with the ED checkpoint, then caption each one with the EC
// checkpoint, feeding the event at its temporal rank. Intervals come from the
// event codec; sentences from the tokenizer's id-to-word mapping.
std::vector<SubmissionEvent> detect_then_describe(const Model& ed, const Model& ec,
                                                  const Mat& features, double duration_sec,
                                                  const Tokenizer& tok,
                                                  const DecodeConfig& dc,
                                                  Rng* rng = nullptr);

}  // namespace seqdvc

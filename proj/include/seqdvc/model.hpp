#pragma once

#include <string>
#include <utility>
#include <vector>

#include "seqdvc/numerics.hpp"

// Multi-stream transformer over the joint sequence [video | events | text]:
// per-modality embedders, one single-modal encoder per stream, a cross
// encoder over the concatenation, and the three prediction heads. All
// attention restrictions are boolean masks over the joint sequence.

namespace seqdvc {

struct ModelConfig {
  int hidden = 64;        // H
  int heads = 4;          // A
  int layers_video = 1;   // L_v
  int layers_event = 1;   // L_e
  int layers_text = 1;    // L_t
  int layers_cross = 4;   // L_c
  int n_max = 32;         // frame count N; also the event-vector length
  int vocab_size = 0;
  int max_text_len = 16;
  int max_events = 4;
  int feature_dim = 0;    // D, appearance (+ concept when enabled)
  bool tie_mlm = true;    // word-prediction head reuses the word embeddings

  void validate() const;
};

struct StreamLayout {
  int n_video = 0;
  int n_event = 0;  // sentinel/stop slots included
  int n_text = 0;
  int total() const { return n_video + n_event + n_text; }
  int event_begin() const { return n_video; }
  int text_begin() const { return n_video + n_event; }
};

// Inputs for one sample. Masking (zeroed frames/events, [MASK] token ids) is
// applied by the caller before embedding.
struct ForwardInput {
  Mat video;                    // n x D
  bool include_start = false;   // prepend the learned start-event row
  std::vector<Mat> event_bits;  // each 1 x n_max
  std::vector<int> event_pos;   // positional index per event; default j -> j+1
  std::vector<int> text_ids;    // empty -> no text stream
};

BoolMask base_mask(const StreamLayout& l);

// Blocks the keys of every event other than `current_event` for all queries,
// their own included. `sentinel_rows` counts leading non-event rows (start
// slot) inside the event stream.
BoolMask caption_mask(const StreamLayout& l, int sentinel_rows, int current_event);

enum class GenStream { Event, Text };

// Within the generated stream: query q sees key k iff k <= q. Queries outside
// the stream see none of its keys, so no future information can flow back
// through another modality.
BoolMask causal_mask(const StreamLayout& l, GenStream stream);

BoolMask and_mask(const BoolMask& a, const BoolMask& b);

struct LayerParams {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
  Var ff1_w, ff1_b, ff2_w, ff2_b;
  Var ln1_g, ln1_b, ln2_g, ln2_b;
};

class Model {
 public:
  Model() = default;
  static Model init(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  StreamLayout layout(const ForwardInput& in) const;
  Var embed(const ForwardInput& in) const;
  Var encode(const Var& joint, const StreamLayout& l, const BoolMask& mask) const;

  // Heads over arbitrary selections of encoded rows.
  Var mlm_logits(const Var& hidden_rows) const;   // -> rows x vocab
  Var mvfr_pred(const Var& hidden_rows) const;    // -> rows x D, embedder-tied
  Var mefm_logits(const Var& hidden_rows) const;  // -> rows x (n_max + 1); last = stop

  // Named parameters in a fixed deterministic order.
  std::vector<std::pair<std::string, Var>> parameters() const;
  std::vector<Var> parameter_vars() const;

  void save(const std::string& path) const;
  static Model load(const ModelConfig& cfg, const std::string& path);

  // Raw access for tying checks in tests.
  Var video_embed_weight() const { return w_video_; }
  Var word_embedding() const { return word_emb_; }
  Var start_event_row() const { return start_event_; }
  Var mefm_weight() const { return w_mefm_; }

 private:
  Var layer_forward(const LayerParams& p, const Var& x, const BoolMask& allow) const;
  Var run_stack(const std::vector<LayerParams>& layers, const Var& x,
                const BoolMask& allow) const;

  ModelConfig cfg_;
  Var w_video_, b_video_, b_mvfr_;
  Var w_event_, b_event_;
  Var word_emb_, w_mlm_, b_mlm_;
  Var mode_v_, mode_e_, mode_t_;
  Var pos_video_, pos_event_, pos_text_;
  Var start_event_;
  Var w_mefm_, b_mefm_;
  std::vector<LayerParams> enc_video_, enc_event_, enc_text_, enc_cross_;
};

}  // namespace seqdvc

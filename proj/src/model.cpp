#include "seqdvc/model.hpp"

#include <map>
#include <stdexcept>

#include "seqdvc/rng.hpp"

namespace seqdvc {

void ModelConfig::validate() const {
  if (hidden < 1 || heads < 1) throw std::invalid_argument("model config: hidden/heads must be >= 1");
  if (hidden % heads != 0) throw std::invalid_argument("model config: hidden not divisible by heads");
  if (layers_video < 0 || layers_event < 0 || layers_text < 0 || layers_cross < 0) {
    throw std::invalid_argument("model config: negative layer count");
  }
  if (n_max < 1 || vocab_size < 5 || max_text_len < 3 || max_events < 1 || feature_dim < 1) {
    throw std::invalid_argument("model config: size fields out of range");
  }
}

BoolMask base_mask(const StreamLayout& l) {
  return BoolMask::Constant(l.total(), l.total(), true);
}

BoolMask caption_mask(const StreamLayout& l, int sentinel_rows, int current_event) {
  const int n_real = l.n_event - sentinel_rows;
  if (current_event < 0 || current_event >= n_real) {
    throw std::invalid_argument("caption_mask: current event out of range");
  }
  BoolMask m = base_mask(l);
  for (int j = 0; j < n_real; ++j) {
    if (j == current_event) continue;
    const int col = l.event_begin() + sentinel_rows + j;
    m.col(col).setConstant(false);
  }
  return m;
}

BoolMask causal_mask(const StreamLayout& l, GenStream stream) {
  int begin = 0, count = 0;
  if (stream == GenStream::Event) {
    begin = l.event_begin();
    count = l.n_event;
  } else {
    begin = l.text_begin();
    count = l.n_text;
  }
  BoolMask m = base_mask(l);
  // Outside queries never see the generated stream's keys.
  for (int k = 0; k < count; ++k) m.col(begin + k).setConstant(false);
  // Inside the stream: lower-triangular visibility.
  for (int q = 0; q < count; ++q)
    for (int k = 0; k <= q; ++k) m(begin + q, begin + k) = true;
  return m;
}

BoolMask and_mask(const BoolMask& a, const BoolMask& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("and_mask: shape mismatch");
  }
  return a && b;
}

namespace {

Mat init_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 0.02) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal() * scale;
  return m;
}

// Fan-based scale for trunk linear maps so attention scores start at a usable
// magnitude; lookup tables and prediction heads stay small (near-uniform
// output distributions at init).
Mat glorot_mat(Eigen::Index r, Eigen::Index c, Rng& rng) {
  return init_mat(r, c, rng, std::sqrt(2.0 / static_cast<double>(r + c)));
}

LayerParams init_layer(int h, Rng& rng) {
  LayerParams p;
  p.wq = Var::parameter(glorot_mat(h, h, rng));
  p.bq = Var::parameter(Mat::Zero(1, h));
  p.wk = Var::parameter(glorot_mat(h, h, rng));
  p.bk = Var::parameter(Mat::Zero(1, h));
  p.wv = Var::parameter(glorot_mat(h, h, rng));
  p.bv = Var::parameter(Mat::Zero(1, h));
  p.wo = Var::parameter(glorot_mat(h, h, rng));
  p.bo = Var::parameter(Mat::Zero(1, h));
  p.ff1_w = Var::parameter(glorot_mat(h, 4 * h, rng));
  p.ff1_b = Var::parameter(Mat::Zero(1, 4 * h));
  p.ff2_w = Var::parameter(glorot_mat(4 * h, h, rng));
  p.ff2_b = Var::parameter(Mat::Zero(1, h));
  p.ln1_g = Var::parameter(Mat::Constant(1, h, 1.0));
  p.ln1_b = Var::parameter(Mat::Zero(1, h));
  p.ln2_g = Var::parameter(Mat::Constant(1, h, 1.0));
  p.ln2_b = Var::parameter(Mat::Zero(1, h));
  return p;
}

void collect_layer(const std::string& prefix, const LayerParams& p,
                   std::vector<std::pair<std::string, Var>>& out) {
  out.emplace_back(prefix + ".wq", p.wq);
  out.emplace_back(prefix + ".bq", p.bq);
  out.emplace_back(prefix + ".wk", p.wk);
  out.emplace_back(prefix + ".bk", p.bk);
  out.emplace_back(prefix + ".wv", p.wv);
  out.emplace_back(prefix + ".bv", p.bv);
  out.emplace_back(prefix + ".wo", p.wo);
  out.emplace_back(prefix + ".bo", p.bo);
  out.emplace_back(prefix + ".ff1_w", p.ff1_w);
  out.emplace_back(prefix + ".ff1_b", p.ff1_b);
  out.emplace_back(prefix + ".ff2_w", p.ff2_w);
  out.emplace_back(prefix + ".ff2_b", p.ff2_b);
  out.emplace_back(prefix + ".ln1_g", p.ln1_g);
  out.emplace_back(prefix + ".ln1_b", p.ln1_b);
  out.emplace_back(prefix + ".ln2_g", p.ln2_g);
  out.emplace_back(prefix + ".ln2_b", p.ln2_b);
}

}  // namespace

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  Rng rng = derive_rng(seed, "model-init", 0);
  const int h = cfg.hidden;
  m.w_video_ = Var::parameter(glorot_mat(cfg.feature_dim, h, rng));
  m.b_video_ = Var::parameter(Mat::Zero(1, h));
  m.b_mvfr_ = Var::parameter(Mat::Zero(1, cfg.feature_dim));
  m.w_event_ = Var::parameter(glorot_mat(cfg.n_max, h, rng));
  m.b_event_ = Var::parameter(Mat::Zero(1, h));
  m.word_emb_ = Var::parameter(init_mat(cfg.vocab_size, h, rng));
  if (!cfg.tie_mlm) m.w_mlm_ = Var::parameter(init_mat(h, cfg.vocab_size, rng));
  m.b_mlm_ = Var::parameter(Mat::Zero(1, cfg.vocab_size));
  m.mode_v_ = Var::parameter(init_mat(1, h, rng, 0.1));
  m.mode_e_ = Var::parameter(init_mat(1, h, rng, 0.1));
  m.mode_t_ = Var::parameter(init_mat(1, h, rng, 0.1));
  m.pos_video_ = Var::parameter(init_mat(cfg.n_max, h, rng, 0.1));
  m.pos_event_ = Var::parameter(init_mat(cfg.max_events + 2, h, rng, 0.1));
  m.pos_text_ = Var::parameter(init_mat(cfg.max_text_len, h, rng, 0.1));
  m.start_event_ = Var::parameter(init_mat(1, h, rng, 0.1));
  m.w_mefm_ = Var::parameter(init_mat(h, cfg.n_max + 1, rng));
  m.b_mefm_ = Var::parameter(Mat::Zero(1, cfg.n_max + 1));
  for (int i = 0; i < cfg.layers_video; ++i) m.enc_video_.push_back(init_layer(h, rng));
  for (int i = 0; i < cfg.layers_event; ++i) m.enc_event_.push_back(init_layer(h, rng));
  for (int i = 0; i < cfg.layers_text; ++i) m.enc_text_.push_back(init_layer(h, rng));
  for (int i = 0; i < cfg.layers_cross; ++i) m.enc_cross_.push_back(init_layer(h, rng));
  return m;
}

StreamLayout Model::layout(const ForwardInput& in) const {
  StreamLayout l;
  l.n_video = static_cast<int>(in.video.rows());
  l.n_event = static_cast<int>(in.event_bits.size()) + (in.include_start ? 1 : 0);
  l.n_text = static_cast<int>(in.text_ids.size());
  return l;
}

Var Model::embed(const ForwardInput& in) const {
  if (in.video.rows() < 1 || in.video.rows() > cfg_.n_max) {
    throw std::invalid_argument("embed: frame count outside [1, n_max]");
  }
  if (in.video.cols() != cfg_.feature_dim) {
    throw std::invalid_argument("embed: feature dim mismatch");
  }
  const int n_real = static_cast<int>(in.event_bits.size());
  if (!in.event_pos.empty() && static_cast<int>(in.event_pos.size()) != n_real) {
    throw std::invalid_argument("embed: event_pos size mismatch");
  }
  std::vector<Var> streams;

  // Video: linear feature projection + modality + frame position.
  {
    Var x = nn::add_row(nn::matmul(Var::constant(in.video), w_video_), b_video_);
    x = nn::add_row(x, mode_v_);
    std::vector<Eigen::Index> idx;
    for (Eigen::Index t = 0; t < in.video.rows(); ++t) idx.push_back(t);
    x = nn::add(x, nn::gather_rows(pos_video_, idx));
    streams.push_back(x);
  }

  // Events: projected bit-vectors; the start sentinel is a learned row at
  // positional index 0, real event j sits at positional index j+1.
  if (in.include_start || n_real > 0) {
    std::vector<Var> rows;
    std::vector<Eigen::Index> pos_idx;
    if (in.include_start) {
      rows.push_back(start_event_);
      pos_idx.push_back(0);
    }
    for (int j = 0; j < n_real; ++j) {
      if (in.event_bits[j].rows() != 1 || in.event_bits[j].cols() != cfg_.n_max) {
        throw std::invalid_argument("embed: event vector must be 1 x n_max");
      }
      rows.push_back(nn::matmul(Var::constant(in.event_bits[j]), w_event_));
      const int p = in.event_pos.empty() ? j + 1 : in.event_pos[j];
      if (p < 0 || p >= cfg_.max_events + 2) {
        throw std::invalid_argument("embed: event positional index out of range");
      }
      pos_idx.push_back(p);
    }
    if (static_cast<int>(rows.size()) > cfg_.max_events + 2) {
      throw std::invalid_argument("embed: too many event rows");
    }
    Var x = rows.size() == 1 ? rows[0] : nn::concat_rows(rows);
    x = nn::add_row(x, b_event_);
    x = nn::add_row(x, mode_e_);
    x = nn::add(x, nn::gather_rows(pos_event_, pos_idx));
    streams.push_back(x);
  }

  // Text: word embedding + modality + token position.
  if (!in.text_ids.empty()) {
    if (static_cast<int>(in.text_ids.size()) > cfg_.max_text_len) {
      throw std::invalid_argument("embed: text longer than max_text_len");
    }
    std::vector<Eigen::Index> tok, pos;
    for (std::size_t s = 0; s < in.text_ids.size(); ++s) {
      if (in.text_ids[s] < 0 || in.text_ids[s] >= cfg_.vocab_size) {
        throw std::invalid_argument("embed: token id out of range");
      }
      tok.push_back(in.text_ids[s]);
      pos.push_back(static_cast<Eigen::Index>(s));
    }
    Var x = nn::gather_rows(word_emb_, tok);
    x = nn::add_row(x, mode_t_);
    x = nn::add(x, nn::gather_rows(pos_text_, pos));
    streams.push_back(x);
  }

  return streams.size() == 1 ? streams[0] : nn::concat_rows(streams);
}

Var Model::layer_forward(const LayerParams& p, const Var& x, const BoolMask& allow) const {
  Var q = nn::add_row(nn::matmul(x, p.wq), p.bq);
  Var k = nn::add_row(nn::matmul(x, p.wk), p.bk);
  Var v = nn::add_row(nn::matmul(x, p.wv), p.bv);
  Var attn = nn::multi_head_attention(q, k, v, allow, cfg_.heads);
  attn = nn::add_row(nn::matmul(attn, p.wo), p.bo);
  Var h1 = nn::add(x, attn);
  h1 = nn::add_row(nn::mul_row(nn::layer_norm_rows(h1), p.ln1_g), p.ln1_b);
  Var ff = nn::add_row(nn::matmul(h1, p.ff1_w), p.ff1_b);
  ff = nn::gelu(ff);
  ff = nn::add_row(nn::matmul(ff, p.ff2_w), p.ff2_b);
  Var h2 = nn::add(h1, ff);
  return nn::add_row(nn::mul_row(nn::layer_norm_rows(h2), p.ln2_g), p.ln2_b);
}

Var Model::run_stack(const std::vector<LayerParams>& layers, const Var& x,
                     const BoolMask& allow) const {
  Var h = x;
  for (const auto& p : layers) h = layer_forward(p, h, allow);
  return h;
}

Var Model::encode(const Var& joint, const StreamLayout& l, const BoolMask& mask) const {
  if (joint.rows() != l.total() || mask.rows() != l.total() || mask.cols() != l.total()) {
    throw std::invalid_argument("encode: layout/mask shape mismatch");
  }
  // Single-modal encoders consume each stream's diagonal block of the same
  // joint mask, so causal and event restrictions hold in every stage.
  std::vector<Var> parts;
  if (l.n_video > 0) {
    Var x = nn::slice_rows(joint, 0, l.n_video);
    BoolMask sub = mask.block(0, 0, l.n_video, l.n_video);
    parts.push_back(run_stack(enc_video_, x, sub));
  }
  if (l.n_event > 0) {
    Var x = nn::slice_rows(joint, l.event_begin(), l.n_event);
    BoolMask sub = mask.block(l.event_begin(), l.event_begin(), l.n_event, l.n_event);
    parts.push_back(run_stack(enc_event_, x, sub));
  }
  if (l.n_text > 0) {
    Var x = nn::slice_rows(joint, l.text_begin(), l.n_text);
    BoolMask sub = mask.block(l.text_begin(), l.text_begin(), l.n_text, l.n_text);
    parts.push_back(run_stack(enc_text_, x, sub));
  }
  Var h = parts.size() == 1 ? parts[0] : nn::concat_rows(parts);
  return run_stack(enc_cross_, h, mask);
}

Var Model::mlm_logits(const Var& hidden_rows) const {
  Var logits = cfg_.tie_mlm ? nn::matmul_nt(hidden_rows, word_emb_)
                            : nn::matmul(hidden_rows, w_mlm_);
  return nn::add_row(logits, b_mlm_);
}

Var Model::mvfr_pred(const Var& hidden_rows) const {
  return nn::add_row(nn::matmul_nt(hidden_rows, w_video_), b_mvfr_);
}

Var Model::mefm_logits(const Var& hidden_rows) const {
  return nn::add_row(nn::matmul(hidden_rows, w_mefm_), b_mefm_);
}

std::vector<std::pair<std::string, Var>> Model::parameters() const {
  std::vector<std::pair<std::string, Var>> out;
  out.emplace_back("embed.video.w", w_video_);
  out.emplace_back("embed.video.b", b_video_);
  out.emplace_back("head.mvfr.b", b_mvfr_);
  out.emplace_back("embed.event.w", w_event_);
  out.emplace_back("embed.event.b", b_event_);
  out.emplace_back("embed.word", word_emb_);
  if (!cfg_.tie_mlm) out.emplace_back("head.mlm.w", w_mlm_);
  out.emplace_back("head.mlm.b", b_mlm_);
  out.emplace_back("mode.v", mode_v_);
  out.emplace_back("mode.e", mode_e_);
  out.emplace_back("mode.t", mode_t_);
  out.emplace_back("pos.video", pos_video_);
  out.emplace_back("pos.event", pos_event_);
  out.emplace_back("pos.text", pos_text_);
  out.emplace_back("start_event", start_event_);
  out.emplace_back("head.mefm.w", w_mefm_);
  out.emplace_back("head.mefm.b", b_mefm_);
  for (std::size_t i = 0; i < enc_video_.size(); ++i) {
    collect_layer("enc.video." + std::to_string(i), enc_video_[i], out);
  }
  for (std::size_t i = 0; i < enc_event_.size(); ++i) {
    collect_layer("enc.event." + std::to_string(i), enc_event_[i], out);
  }
  for (std::size_t i = 0; i < enc_text_.size(); ++i) {
    collect_layer("enc.text." + std::to_string(i), enc_text_[i], out);
  }
  for (std::size_t i = 0; i < enc_cross_.size(); ++i) {
    collect_layer("enc.cross." + std::to_string(i), enc_cross_[i], out);
  }
  return out;
}

std::vector<Var> Model::parameter_vars() const {
  std::vector<Var> out;
  for (auto& [name, v] : parameters()) out.push_back(v);
  return out;
}

void Model::save(const std::string& path) const {
  std::map<std::string, Mat> tensors;
  for (const auto& [name, v] : parameters()) tensors[name] = v.value();
  nn::save_checkpoint(path, tensors);
}

Model Model::load(const ModelConfig& cfg, const std::string& path) {
  Model m = Model::init(cfg, 0);
  auto tensors = nn::load_checkpoint<double>(path);
  auto params = m.parameters();
  if (tensors.size() != params.size()) {
    throw std::runtime_error(path + ": checkpoint parameter count mismatch");
  }
  for (auto& [name, v] : params) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error(path + ": missing tensor " + name);
    if (it->second.rows() != v.rows() || it->second.cols() != v.cols()) {
      throw std::runtime_error(path + ": shape mismatch for " + name);
    }
    v.value() = it->second;
  }
  return m;
}

}  // namespace seqdvc

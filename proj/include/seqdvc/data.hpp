#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "seqdvc/event_codec.hpp"
#include "seqdvc/numerics.hpp"

// Dataset model, on-disk formats, and the synthetic untrimmed-video corpus
// generator. Loaders validate and reject; they never repair.

namespace seqdvc {

// Special token ids are fixed so checkpoints and corpora stay compatible.
struct Tokenizer {
  static constexpr int kPad = 0;
  static constexpr int kSos = 1;
  static constexpr int kEos = 2;
  static constexpr int kMask = 3;
  static constexpr int kUnk = 4;

  std::vector<std::string> id_to_token;
  std::map<std::string, int> token_to_id;

  // Lowercase, keep [a-z0-9] runs as words.
  static std::vector<std::string> split_words(const std::string& text);

  // Non-special ids ordered by (frequency desc, token asc).
  static Tokenizer build(const std::vector<std::string>& captions, int min_freq = 1);

  int size() const { return static_cast<int>(id_to_token.size()); }
  int lookup(const std::string& word) const;  // kUnk when absent
  std::vector<int> encode(const std::string& text, bool add_specials) const;
  std::string decode(const std::vector<int>& ids) const;  // drops special ids

  void save(const std::string& path) const;
  static Tokenizer load(const std::string& path);
};

struct DenseVideoRecord {
  std::string video_id;
  double duration_sec = 0.0;
  std::vector<TimeInterval> events;
  std::vector<std::string> sentences;  // aligned with events
  Mat features;                        // N x D
  bool mefm_ok = true;                 // clip-derived records opt out of MEFM
};

struct Dataset {
  std::vector<DenseVideoRecord> records;
  Tokenizer tokenizer;
};

struct SubmissionEvent {
  std::string sentence;
  double start_sec = 0.0;
  double end_sec = 0.0;
};

struct Submission {
  std::map<std::string, std::vector<SubmissionEvent>> results;
};

// Annotation records without features, as stored in annotations JSON.
struct AnnotationRecord {
  std::string video_id;
  double duration_sec = 0.0;
  std::vector<TimeInterval> events;
  std::vector<std::string> sentences;
};

std::vector<AnnotationRecord> load_annotations(const std::string& path);
void save_annotations(const std::string& path, const std::vector<AnnotationRecord>& records);

// Feature container: magic + per-video (id, N, D, row-major doubles).
void write_features(const std::string& path, const std::map<std::string, Mat>& features);
std::map<std::string, Mat> read_features(const std::string& path);

// Annotations + features joined into validated records; the tokenizer is
// built from all captions.
Dataset load_dense_dataset(const std::string& annotations_path,
                           const std::string& features_path);

// Clip-caption corpus: one sentence per clip, no event boundaries. Each clip
// becomes a record with a single full-span event and mefm_ok = false.
Dataset ingest_clip_corpus(const std::string& annotations_path,
                           const std::string& features_path);

Submission read_submission(const std::string& path);
void write_submission(const std::string& path, const Submission& sub);

struct SyntheticSpec {
  int n_videos = 10;
  int n_frames = 32;
  int n_activities = 6;
  int events_min = 1;
  int events_max = 4;
  double noise_std = 0.05;
  int d_appearance = 16;
  double frame_sec = 1.0;
  std::uint64_t seed = 1;
  bool allow_overlap = false;
};

// The fixed activity-word pool and the caption template grammar. Templates
// contain exactly one content slot; every other word is generic filler.
const std::vector<std::string>& activity_word_pool();
const std::vector<std::string>& caption_templates();
const std::vector<std::string>& generic_filler_words();

struct SyntheticVideo {
  AnnotationRecord annotation;
  Mat features;                 // n_frames x d_appearance
  std::vector<int> frame_activity;  // 0 = background, 1..n_activities
};

// Deterministic per spec.seed. Event segments are non-overlapping frame runs
// separated by at least one background frame; ground-truth ends carry a small
// in-frame margin so encoding them reproduces the exact segment bits.
std::vector<SyntheticVideo> generate_synthetic_videos(const SyntheticSpec& spec);

// Writes annotations.json + features.bin under out_dir.
void generate_synthetic_corpus(const SyntheticSpec& spec, const std::string& out_dir);

}  // namespace seqdvc

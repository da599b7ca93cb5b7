#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "seqdvc/data.hpp"
#include "seqdvc/generation.hpp"
#include "seqdvc/model.hpp"

// Run configuration shared by every pipeline command: one JSON document with
// model / train / decode / data / eval sections, strict about unknown keys,
// resolved against defaults and CLI overrides. The resolved document plus a
// provenance record (seed, format versions, input digests) lands beside every
// command's outputs.

namespace seqdvc {

struct TrainSection {
  double lr = 1e-3;
  int batch_size = 4;
  int steps = 1000;
  std::uint64_t seed = 1;
  double lambda = 1.0 / 3.0;  // share of three-stream batches
  double mask_rate = 0.15;
  int checkpoint_every = 0;
  int cpt_k = 4;  // concept vocabulary size
};

struct DataSection {
  std::string annotations;
  std::string features;
  std::string model_checkpoint;  // starting point for the fine-tune phases
  std::string ed_checkpoint;
  std::string ec_checkpoint;
  std::string cpt_checkpoint;    // when set, concept features are appended
  std::string concept_vocab;
  std::string submission;
  SyntheticSpec synthetic;
};

struct EvalSection {
  std::vector<double> tiou_thresholds = {0.3, 0.5, 0.7, 0.9};
  double captioning_threshold = 0.9;
  std::string soda_inner = "meteor_lite";  // or "cider_sentence"
  std::string soda_mode = "old";           // or "mr"
  double p_increase = 0.4;
  double p_reduce = 0.15;
  std::vector<std::uint64_t> audit_seeds = {1, 2, 3};
};

struct RunConfig {
  // vocab_size and feature_dim stay 0 here; they are read from the dataset
  // when a command builds the model.
  ModelConfig model;
  TrainSection train;
  DecodeConfig decode;
  DataSection data;
  EvalSection eval;

  void validate() const;
};

RunConfig default_run_config();

// Canonical pretty-printed JSON of the full document.
std::string serialize_run_config(const RunConfig& cfg);

// Defaults overlaid with the document's keys, then with `section.key=value`
// overrides. Unknown keys and type mismatches are rejected; values parse as
// JSON literals with a bare-string fallback. An empty text means defaults.
RunConfig parse_run_config(const std::string& json_text,
                           const std::vector<std::string>& overrides = {});

RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides = {});

// fnv1a64 over the file's bytes, as 16 hex digits.
std::string file_digest_hex(const std::string& path);

// Magics / schema revisions of every file format a run can touch.
const std::map<std::string, std::string>& format_versions();

struct RunProvenance {
  std::string command;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> input_digests;  // path -> digest
};

// Writes <out_dir>/config.json (the resolved document) and <out_dir>/run.json
// (command, seed, format versions, input digests). Creates the directory.
void write_provenance(const std::string& out_dir, const RunConfig& cfg,
                      const RunProvenance& prov);

}  // namespace seqdvc

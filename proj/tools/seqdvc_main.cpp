// Pipeline driver. Every subcommand resolves one RunConfig (defaults, then
// --config file, then --set overrides, then --seed), runs, and drops its
// outputs plus config.json / run.json provenance into --out.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "seqdvc/concept.hpp"
#include "seqdvc/config.hpp"
#include "seqdvc/data.hpp"
#include "seqdvc/generation.hpp"
#include "seqdvc/metrics.hpp"
#include "seqdvc/model.hpp"
#include "seqdvc/pretraining.hpp"
#include "seqdvc/rng.hpp"
#include "seqdvc/robustness.hpp"

namespace {

using json = nlohmann::json;
using namespace seqdvc;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  std::string out = "out";
};

bool quiet() {
  const char* q = std::getenv("SEQDVC_QUIET");
  return q != nullptr && q[0] != '\0';
}

void note(const std::string& line) {
  if (!quiet()) std::printf("%s\n", line.c_str());
}

void add_common(CLI::App* sub, CommonOpts& o) {
  sub->add_option("--config", o.config_path, "run configuration JSON file");
  sub->add_option("--set", o.sets, "config override, section.key=value (repeatable)");
  sub->add_option("--seed", o.seed, "overrides train.seed and data.synthetic.seed");
  sub->add_option("--out", o.out, "output directory");
}

RunConfig resolve_config(const CLI::App* sub, const CommonOpts& o) {
  std::vector<std::string> ov = o.sets;
  if (sub->count("--seed") > 0) {
    ov.push_back("train.seed=" + std::to_string(o.seed));
    ov.push_back("data.synthetic.seed=" + std::to_string(o.seed));
  }
  if (o.config_path.empty()) return parse_run_config("", ov);
  return load_run_config(o.config_path, ov);
}

void add_digest(std::map<std::string, std::string>& d, const std::string& path) {
  if (!path.empty()) d[path] = file_digest_hex(path);
}

std::string require_path(const std::string& value, const std::string& key) {
  if (value.empty()) {
    throw std::invalid_argument("config: data." + key + " is required for this command");
  }
  return value;
}

Dataset load_dataset(const RunConfig& cfg) {
  Dataset ds = load_dense_dataset(require_path(cfg.data.annotations, "annotations"),
                                  require_path(cfg.data.features, "features"));
  if (ds.records.empty()) throw std::runtime_error("dataset: no records");
  return ds;
}

int cpt_width(const RunConfig& cfg) { return std::max(1, cfg.model.hidden / 2); }

ConceptVocab load_concept_vocab_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("concept vocab: cannot open " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("labels") || !j["labels"].is_array()) {
    throw std::runtime_error("concept vocab: " + path + " lacks a labels array");
  }
  ConceptVocab v;
  v.labels = j["labels"].get<std::vector<std::string>>();
  if (v.labels.empty()) throw std::runtime_error("concept vocab: empty label list");
  return v;
}

// When a concept checkpoint is configured, every consumer sees the appearance
// features with the concept extractor's output appended.
Dataset maybe_augment(Dataset ds, const RunConfig& cfg) {
  if (cfg.data.cpt_checkpoint.empty()) return ds;
  const ConceptVocab vocab =
      load_concept_vocab_file(require_path(cfg.data.concept_vocab, "concept_vocab"));
  const int d_app = static_cast<int>(ds.records.front().features.cols());
  Cpt cpt = Cpt::load(d_app, cpt_width(cfg), vocab.size(), cfg.data.cpt_checkpoint);
  return augment_dataset(ds, cpt);
}

ModelConfig model_config_for(const RunConfig& cfg, const Dataset& ds) {
  ModelConfig mc = cfg.model;
  mc.vocab_size = ds.tokenizer.size();
  mc.feature_dim = static_cast<int>(ds.records.front().features.cols());
  mc.validate();
  return mc;
}

void write_json_doc(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

int run_gen_data(const CLI::App* sub, const CommonOpts& o) {
  RunConfig cfg = resolve_config(sub, o);
  std::filesystem::create_directories(o.out);
  generate_synthetic_corpus(cfg.data.synthetic, o.out);
  RunProvenance prov;
  prov.command = "gen-data";
  prov.seed = cfg.data.synthetic.seed;
  add_digest(prov.input_digests, o.config_path);
  write_provenance(o.out, cfg, prov);
  note("wrote " + o.out + "/annotations.json and features.bin");
  return 0;
}

int run_train_cpt(const CLI::App* sub, const CommonOpts& o) {
  RunConfig cfg = resolve_config(sub, o);
  Dataset ds = load_dataset(cfg);
  const ConceptVocab vocab = build_concept_vocab(ds, cfg.train.cpt_k);
  const int d_app = static_cast<int>(ds.records.front().features.cols());
  Cpt model = Cpt::init(d_app, cpt_width(cfg), vocab.size(), cfg.train.seed);
  CptConfig cc;
  cc.width = cpt_width(cfg);
  cc.steps = cfg.train.steps;
  cc.batch_size = cfg.train.batch_size;
  cc.lr = cfg.train.lr;
  cc.seed = cfg.train.seed;
  const CptTrainResult result = train_cpt(model, ds, vocab, cc);

  std::filesystem::create_directories(o.out);
  model.save(o.out + "/cpt.ckpt");
  write_json_doc(o.out + "/concept_vocab.json", json{{"labels", vocab.labels}});
  write_loss_curve_csv(o.out + "/cpt_curve.csv", result.curve);
  const CptEval ev = evaluate_cpt(model, ds, vocab);
  write_json_doc(o.out + "/cpt_eval.json", json{{"concept_f1", ev.concept_f1},
                                                {"boundary_accuracy", ev.boundary_accuracy}});

  RunProvenance prov;
  prov.command = "train-cpt";
  prov.seed = cfg.train.seed;
  add_digest(prov.input_digests, o.config_path);
  add_digest(prov.input_digests, cfg.data.annotations);
  add_digest(prov.input_digests, cfg.data.features);
  write_provenance(o.out, cfg, prov);
  note("wrote " + o.out + "/cpt.ckpt");
  return 0;
}

int run_pretrain(const CLI::App* sub, const CommonOpts& o) {
  RunConfig cfg = resolve_config(sub, o);
  Dataset ds = maybe_augment(load_dataset(cfg), cfg);
  const ModelConfig mc = model_config_for(cfg, ds);
  Model model = Model::init(mc, cfg.train.seed);

  PretrainConfig pc;
  pc.lambda = cfg.train.lambda;
  pc.steps = cfg.train.steps;
  pc.batch_size = cfg.train.batch_size;
  pc.lr = cfg.train.lr;
  pc.mask_rate = cfg.train.mask_rate;
  pc.seed = cfg.train.seed;
  pc.checkpoint_every = cfg.train.checkpoint_every;
  if (pc.checkpoint_every > 0) pc.checkpoint_dir = o.out;
  std::filesystem::create_directories(o.out);
  const PretrainResult result = pretrain(model, ds, pc);

  model.save(o.out + "/model.ckpt");
  write_loss_curve_csv(o.out + "/curve.csv", result.curve);

  RunProvenance prov;
  prov.command = "pretrain";
  prov.seed = cfg.train.seed;
  add_digest(prov.input_digests, o.config_path);
  add_digest(prov.input_digests, cfg.data.annotations);
  add_digest(prov.input_digests, cfg.data.features);
  add_digest(prov.input_digests, cfg.data.cpt_checkpoint);
  add_digest(prov.input_digests, cfg.data.concept_vocab);
  write_provenance(o.out, cfg, prov);
  note("wrote " + o.out + "/model.ckpt");
  return 0;
}

int run_finetune(const CLI::App* sub, const CommonOpts& o, bool event_generator) {
  RunConfig cfg = resolve_config(sub, o);
  Dataset ds = maybe_augment(load_dataset(cfg), cfg);
  const ModelConfig mc = model_config_for(cfg, ds);
  Model model = cfg.data.model_checkpoint.empty()
                    ? Model::init(mc, cfg.train.seed)
                    : Model::load(mc, cfg.data.model_checkpoint);

  FinetuneConfig fc;
  fc.steps = cfg.train.steps;
  fc.batch_size = cfg.train.batch_size;
  fc.lr = cfg.train.lr;
  fc.mask_rate = cfg.train.mask_rate;
  fc.seed = cfg.train.seed;
  fc.checkpoint_every = cfg.train.checkpoint_every;
  if (fc.checkpoint_every > 0) fc.checkpoint_dir = o.out;
  std::filesystem::create_directories(o.out);
  const FinetuneResult result =
      event_generator ? finetune_ed(model, ds, fc) : finetune_ec(model, ds, fc);

  model.save(o.out + "/model.ckpt");
  write_loss_curve_csv(o.out + "/curve.csv", result.curve);

  RunProvenance prov;
  prov.command = event_generator ? "finetune-ed" : "finetune-ec";
  prov.seed = cfg.train.seed;
  add_digest(prov.input_digests, o.config_path);
  add_digest(prov.input_digests, cfg.data.annotations);
  add_digest(prov.input_digests, cfg.data.features);
  add_digest(prov.input_digests, cfg.data.model_checkpoint);
  add_digest(prov.input_digests, cfg.data.cpt_checkpoint);
  add_digest(prov.input_digests, cfg.data.concept_vocab);
  write_provenance(o.out, cfg, prov);
  note("wrote " + o.out + "/model.ckpt");
  return 0;
}

int run_infer(const CLI::App* sub, const CommonOpts& o) {
  RunConfig cfg = resolve_config(sub, o);
  Dataset ds = maybe_augment(load_dataset(cfg), cfg);
  const ModelConfig mc = model_config_for(cfg, ds);
  const Model ed = Model::load(mc, require_path(cfg.data.ed_checkpoint, "ed_checkpoint"));
  const Model ec = Model::load(mc, require_path(cfg.data.ec_checkpoint, "ec_checkpoint"));

  Submission sub_out;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const DenseVideoRecord& rec = ds.records[i];
    Rng rng = derive_rng(cfg.train.seed, "infer", i);
    sub_out.results[rec.video_id] =
        detect_then_describe(ed, ec, rec.features, rec.duration_sec, ds.tokenizer,
                             cfg.decode, cfg.decode.sample_bits ? &rng : nullptr);
  }
  std::filesystem::create_directories(o.out);
  write_submission(o.out + "/submission.json", sub_out);

  RunProvenance prov;
  prov.command = "infer";
  prov.seed = cfg.train.seed;
  add_digest(prov.input_digests, o.config_path);
  add_digest(prov.input_digests, cfg.data.annotations);
  add_digest(prov.input_digests, cfg.data.features);
  add_digest(prov.input_digests, cfg.data.ed_checkpoint);
  add_digest(prov.input_digests, cfg.data.ec_checkpoint);
  add_digest(prov.input_digests, cfg.data.cpt_checkpoint);
  add_digest(prov.input_digests, cfg.data.concept_vocab);
  write_provenance(o.out, cfg, prov);
  note("wrote " + o.out + "/submission.json");
  return 0;
}

int run_evaluate(const CLI::App* sub, const CommonOpts& o) {
  RunConfig cfg = resolve_config(sub, o);
  const Submission sub_in = read_submission(require_path(cfg.data.submission, "submission"));
  const std::vector<AnnotationRecord> refs =
      load_annotations(require_path(cfg.data.annotations, "annotations"));

  const DetectionReport det = detection_pr(sub_in, refs, cfg.eval.tiou_thresholds);
  const CaptioningReport cap = captioning_at_tiou(sub_in, refs, cfg.eval.captioning_threshold);
  const SodaInner inner = cfg.eval.soda_inner == "cider_sentence" ? SodaInner::CiderSentence
                                                                  : SodaInner::MeteorLite;
  const SodaMode mode = cfg.eval.soda_mode == "mr" ? SodaMode::Mr : SodaMode::Old;
  const SodaReport sd = soda(sub_in, {refs}, inner, mode);

  json report;
  report["config"] = json::parse(serialize_run_config(cfg));
  json recall = json::object();
  json precision = json::object();
  for (const auto& [t, v] : det.recall) recall[json(t).dump()] = v;
  for (const auto& [t, v] : det.precision) precision[json(t).dump()] = v;
  report["detection"] = {{"recall", recall},
                         {"precision", precision},
                         {"avg_recall", det.avg_recall},
                         {"avg_precision", det.avg_precision},
                         {"self_tiou", det.self_tiou},
                         {"events_per_video", det.events_per_video}};
  report["captioning"] = {{"threshold", cap.threshold},
                          {"bleu4", cap.bleu4},
                          {"meteor_lite", cap.meteor_lite},
                          {"cider", cap.cider}};
  json videos = json::array();
  for (const SodaVideoScore& v : sd.videos) {
    videos.push_back({{"video_id", v.video_id},
                      {"precision", v.precision},
                      {"recall", v.recall},
                      {"f1", v.f1}});
  }
  report["soda"] = {{"mode", cfg.eval.soda_mode},
                    {"inner", cfg.eval.soda_inner},
                    {"precision", sd.precision},
                    {"recall", sd.recall},
                    {"f1", sd.f1},
                    {"videos", videos}};

  std::filesystem::create_directories(o.out);
  write_json_doc(o.out + "/eval_report.json", report);

  RunProvenance prov;
  prov.command = "evaluate";
  prov.seed = cfg.train.seed;
  add_digest(prov.input_digests, o.config_path);
  add_digest(prov.input_digests, cfg.data.submission);
  add_digest(prov.input_digests, cfg.data.annotations);
  write_provenance(o.out, cfg, prov);
  note("wrote " + o.out + "/eval_report.json");
  return 0;
}

int run_audit(const CLI::App* sub, const CommonOpts& o, const std::string& operation) {
  RunConfig cfg = resolve_config(sub, o);
  const Submission sub_in = read_submission(require_path(cfg.data.submission, "submission"));
  const std::vector<AnnotationRecord> refs =
      load_annotations(require_path(cfg.data.annotations, "annotations"));

  PerturbConfig pc;
  pc.p_increase = cfg.eval.p_increase;
  pc.p_reduce = cfg.eval.p_reduce;
  pc.seeds = cfg.eval.audit_seeds;

  std::vector<PerturbOp> ops = {PerturbOp::Increase, PerturbOp::Reduce, PerturbOp::Exchange,
                                PerturbOp::Extreme};
  if (!operation.empty()) {
    if (operation == "increase") ops = {PerturbOp::Increase};
    else if (operation == "reduce") ops = {PerturbOp::Reduce};
    else if (operation == "exchange") ops = {PerturbOp::Exchange};
    else if (operation == "extreme") ops = {PerturbOp::Extreme};
    else throw std::invalid_argument("audit: unknown operation '" + operation + "'");
  }
  const AuditReport report = audit(sub_in, refs, pc, ops);

  std::filesystem::create_directories(o.out);
  write_audit_csv(report, o.out + "/audit.csv");
  write_audit_json(report, o.out + "/audit.json");

  RunProvenance prov;
  prov.command = "audit";
  prov.seed = cfg.train.seed;
  add_digest(prov.input_digests, o.config_path);
  add_digest(prov.input_digests, cfg.data.submission);
  add_digest(prov.input_digests, cfg.data.annotations);
  write_provenance(o.out, cfg, prov);
  note("wrote " + o.out + "/audit.csv and audit.json");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dense video captioning: data, training, inference, evaluation"};
  app.require_subcommand(1);

  CommonOpts o;
  std::string audit_operation;

  CLI::App* c_gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  CLI::App* c_cpt = app.add_subcommand("train-cpt", "train the concept feature extractor");
  CLI::App* c_pre = app.add_subcommand("pretrain", "masked pre-training of the trunk");
  CLI::App* c_fed = app.add_subcommand("finetune-ed", "fine-tune the event generator");
  CLI::App* c_fec = app.add_subcommand("finetune-ec", "fine-tune the caption generator");
  CLI::App* c_inf = app.add_subcommand("infer", "detect-then-describe on a dataset");
  CLI::App* c_eval = app.add_subcommand("evaluate", "score a submission against references");
  CLI::App* c_aud = app.add_subcommand("audit", "metric robustness audit");
  for (CLI::App* sub : {c_gen, c_cpt, c_pre, c_fed, c_fec, c_inf, c_eval, c_aud}) {
    add_common(sub, o);
  }
  c_aud->add_option("--operation", audit_operation,
                    "restrict to one perturbation: increase|reduce|exchange|extreme");

  std::string command = "";
  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::Error& e) {
      throw std::invalid_argument(e.what());
    }
    CLI::App* sub = app.get_subcommands().front();
    command = sub->get_name();
    if (sub == c_gen) return run_gen_data(sub, o);
    if (sub == c_cpt) return run_train_cpt(sub, o);
    if (sub == c_pre) return run_pretrain(sub, o);
    if (sub == c_fed) return run_finetune(sub, o, true);
    if (sub == c_fec) return run_finetune(sub, o, false);
    if (sub == c_inf) return run_infer(sub, o);
    if (sub == c_eval) return run_evaluate(sub, o);
    return run_audit(sub, o, audit_operation);
  } catch (const std::exception& e) {
    nlohmann::json err = {{"error", e.what()}, {"command", command}};
    std::fprintf(stderr, "%s\n", err.dump().c_str());
    return 1;
  }
}

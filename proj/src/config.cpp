#include "seqdvc/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "seqdvc/numerics.hpp"
#include "seqdvc/rng.hpp"

namespace seqdvc {

using json = nlohmann::json;

namespace {

json tree_from_config(const RunConfig& c) {
  json j;
  j["model"] = {
      {"hidden", c.model.hidden},
      {"heads", c.model.heads},
      {"layers_video", c.model.layers_video},
      {"layers_event", c.model.layers_event},
      {"layers_text", c.model.layers_text},
      {"layers_cross", c.model.layers_cross},
      {"n_max", c.model.n_max},
      {"max_text_len", c.model.max_text_len},
      {"max_events", c.model.max_events},
      {"tie_mlm", c.model.tie_mlm},
  };
  j["train"] = {
      {"lr", c.train.lr},
      {"batch_size", c.train.batch_size},
      {"steps", c.train.steps},
      {"seed", c.train.seed},
      {"lambda", c.train.lambda},
      {"mask_rate", c.train.mask_rate},
      {"checkpoint_every", c.train.checkpoint_every},
      {"cpt_k", c.train.cpt_k},
  };
  j["decode"] = {
      {"frame_threshold", c.decode.frame_threshold},
      {"stop_threshold", c.decode.stop_threshold},
      {"max_events", c.decode.max_events},
      {"max_caption_len", c.decode.max_caption_len},
      {"text_decode", std::string("greedy")},
      {"sample_bits", c.decode.sample_bits},
  };
  j["data"] = {
      {"annotations", c.data.annotations},
      {"features", c.data.features},
      {"model_checkpoint", c.data.model_checkpoint},
      {"ed_checkpoint", c.data.ed_checkpoint},
      {"ec_checkpoint", c.data.ec_checkpoint},
      {"cpt_checkpoint", c.data.cpt_checkpoint},
      {"concept_vocab", c.data.concept_vocab},
      {"submission", c.data.submission},
      {"synthetic",
       {
           {"n_videos", c.data.synthetic.n_videos},
           {"n_frames", c.data.synthetic.n_frames},
           {"n_activities", c.data.synthetic.n_activities},
           {"events_min", c.data.synthetic.events_min},
           {"events_max", c.data.synthetic.events_max},
           {"noise_std", c.data.synthetic.noise_std},
           {"d_appearance", c.data.synthetic.d_appearance},
           {"frame_sec", c.data.synthetic.frame_sec},
           {"seed", c.data.synthetic.seed},
           {"allow_overlap", c.data.synthetic.allow_overlap},
       }},
  };
  j["eval"] = {
      {"tiou_thresholds", c.eval.tiou_thresholds},
      {"captioning_threshold", c.eval.captioning_threshold},
      {"soda_inner", c.eval.soda_inner},
      {"soda_mode", c.eval.soda_mode},
      {"p_increase", c.eval.p_increase},
      {"p_reduce", c.eval.p_reduce},
      {"audit_seeds", c.eval.audit_seeds},
  };
  return j;
}

std::string type_name(const json& v) {
  if (v.is_object()) return "object";
  if (v.is_array()) return "array";
  if (v.is_string()) return "string";
  if (v.is_boolean()) return "boolean";
  if (v.is_number()) return "number";
  return "null";
}

bool same_kind(const json& schema, const json& value) {
  if (schema.is_object()) return value.is_object();
  if (schema.is_array()) return value.is_array();
  if (schema.is_string()) return value.is_string();
  if (schema.is_boolean()) return value.is_boolean();
  if (schema.is_number()) return value.is_number();
  return false;
}

// The defaults tree doubles as the schema: every key must exist in it and
// carry the same JSON kind; array elements must match the first default
// element's kind.
void check_against_schema(const json& schema, const json& doc,
                          const std::string& path) {
  if (!same_kind(schema, doc)) {
    throw std::invalid_argument("config: key '" + path + "' expects " +
                                type_name(schema) + ", got " + type_name(doc));
  }
  if (schema.is_object()) {
    for (auto it = doc.begin(); it != doc.end(); ++it) {
      const std::string child = path.empty() ? it.key() : path + "." + it.key();
      if (!schema.contains(it.key())) {
        throw std::invalid_argument("config: unknown key '" + child + "'");
      }
      check_against_schema(schema.at(it.key()), it.value(), child);
    }
  } else if (schema.is_array() && !schema.empty()) {
    for (std::size_t i = 0; i < doc.size(); ++i) {
      if (!same_kind(schema.at(0), doc.at(i))) {
        throw std::invalid_argument(
            "config: element " + std::to_string(i) + " of '" + path +
            "' expects " + type_name(schema.at(0)) + ", got " +
            type_name(doc.at(i)));
      }
    }
  }
}

void apply_override(json& doc, const std::string& spec) {
  const std::size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("config: override '" + spec +
                                "' is not of the form key=value");
  }
  const std::string key = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);

  std::vector<std::string> parts;
  std::stringstream ss(key);
  std::string seg;
  while (std::getline(ss, seg, '.')) parts.push_back(seg);
  if (parts.empty()) {
    throw std::invalid_argument("config: override '" + spec + "' has no key");
  }

  json* cur = &doc;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!cur->is_object() || !cur->contains(parts[i])) {
      throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    cur = &cur->at(parts[i]);
  }
  if (!cur->is_object() || !cur->contains(parts.back())) {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }

  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;  // bare strings need no quotes
  cur->at(parts.back()) = value;
}

RunConfig config_from_tree(const json& j) {
  RunConfig c;
  const json& m = j.at("model");
  c.model.hidden = m.at("hidden").get<int>();
  c.model.heads = m.at("heads").get<int>();
  c.model.layers_video = m.at("layers_video").get<int>();
  c.model.layers_event = m.at("layers_event").get<int>();
  c.model.layers_text = m.at("layers_text").get<int>();
  c.model.layers_cross = m.at("layers_cross").get<int>();
  c.model.n_max = m.at("n_max").get<int>();
  c.model.max_text_len = m.at("max_text_len").get<int>();
  c.model.max_events = m.at("max_events").get<int>();
  c.model.tie_mlm = m.at("tie_mlm").get<bool>();

  const json& t = j.at("train");
  c.train.lr = t.at("lr").get<double>();
  c.train.batch_size = t.at("batch_size").get<int>();
  c.train.steps = t.at("steps").get<int>();
  c.train.seed = t.at("seed").get<std::uint64_t>();
  c.train.lambda = t.at("lambda").get<double>();
  c.train.mask_rate = t.at("mask_rate").get<double>();
  c.train.checkpoint_every = t.at("checkpoint_every").get<int>();
  c.train.cpt_k = t.at("cpt_k").get<int>();

  const json& d = j.at("decode");
  c.decode.frame_threshold = d.at("frame_threshold").get<double>();
  c.decode.stop_threshold = d.at("stop_threshold").get<double>();
  c.decode.max_events = d.at("max_events").get<int>();
  c.decode.max_caption_len = d.at("max_caption_len").get<int>();
  const std::string td = d.at("text_decode").get<std::string>();
  if (td != "greedy") {
    throw std::invalid_argument("config: decode.text_decode must be 'greedy'");
  }
  c.decode.text_decode = TextDecode::Greedy;
  c.decode.sample_bits = d.at("sample_bits").get<bool>();

  const json& da = j.at("data");
  c.data.annotations = da.at("annotations").get<std::string>();
  c.data.features = da.at("features").get<std::string>();
  c.data.model_checkpoint = da.at("model_checkpoint").get<std::string>();
  c.data.ed_checkpoint = da.at("ed_checkpoint").get<std::string>();
  c.data.ec_checkpoint = da.at("ec_checkpoint").get<std::string>();
  c.data.cpt_checkpoint = da.at("cpt_checkpoint").get<std::string>();
  c.data.concept_vocab = da.at("concept_vocab").get<std::string>();
  c.data.submission = da.at("submission").get<std::string>();
  const json& sy = da.at("synthetic");
  c.data.synthetic.n_videos = sy.at("n_videos").get<int>();
  c.data.synthetic.n_frames = sy.at("n_frames").get<int>();
  c.data.synthetic.n_activities = sy.at("n_activities").get<int>();
  c.data.synthetic.events_min = sy.at("events_min").get<int>();
  c.data.synthetic.events_max = sy.at("events_max").get<int>();
  c.data.synthetic.noise_std = sy.at("noise_std").get<double>();
  c.data.synthetic.d_appearance = sy.at("d_appearance").get<int>();
  c.data.synthetic.frame_sec = sy.at("frame_sec").get<double>();
  c.data.synthetic.seed = sy.at("seed").get<std::uint64_t>();
  c.data.synthetic.allow_overlap = sy.at("allow_overlap").get<bool>();

  const json& e = j.at("eval");
  c.eval.tiou_thresholds = e.at("tiou_thresholds").get<std::vector<double>>();
  c.eval.captioning_threshold = e.at("captioning_threshold").get<double>();
  c.eval.soda_inner = e.at("soda_inner").get<std::string>();
  c.eval.soda_mode = e.at("soda_mode").get<std::string>();
  c.eval.p_increase = e.at("p_increase").get<double>();
  c.eval.p_reduce = e.at("p_reduce").get<double>();
  c.eval.audit_seeds = e.at("audit_seeds").get<std::vector<std::uint64_t>>();
  return c;
}

}  // namespace

void RunConfig::validate() const {
  if (model.hidden < 1 || model.heads < 1 || model.hidden % model.heads != 0) {
    throw std::invalid_argument("config: model.hidden must be a positive multiple of model.heads");
  }
  if (model.layers_video < 0 || model.layers_event < 0 || model.layers_text < 0 ||
      model.layers_cross < 0) {
    throw std::invalid_argument("config: negative model layer count");
  }
  if (model.n_max < 1 || model.max_text_len < 3 || model.max_events < 1) {
    throw std::invalid_argument("config: model size fields out of range");
  }
  if (!(train.lr > 0.0)) throw std::invalid_argument("config: train.lr must be > 0");
  if (train.batch_size < 1 || train.steps < 1) {
    throw std::invalid_argument("config: train.batch_size and train.steps must be >= 1");
  }
  if (!(train.lambda >= 0.0 && train.lambda <= 1.0)) {
    throw std::invalid_argument("config: train.lambda must lie in [0,1]");
  }
  if (!(train.mask_rate > 0.0 && train.mask_rate < 1.0)) {
    throw std::invalid_argument("config: train.mask_rate must lie in (0,1)");
  }
  if (train.checkpoint_every < 0) {
    throw std::invalid_argument("config: train.checkpoint_every must be >= 0");
  }
  if (train.cpt_k < 1) throw std::invalid_argument("config: train.cpt_k must be >= 1");
  decode.validate();
  if (eval.tiou_thresholds.empty()) {
    throw std::invalid_argument("config: eval.tiou_thresholds must be non-empty");
  }
  for (double t : eval.tiou_thresholds) {
    if (!(t > 0.0 && t <= 1.0)) {
      throw std::invalid_argument("config: eval.tiou_thresholds entries must lie in (0,1]");
    }
  }
  if (!(eval.captioning_threshold > 0.0 && eval.captioning_threshold <= 1.0)) {
    throw std::invalid_argument("config: eval.captioning_threshold must lie in (0,1]");
  }
  if (eval.soda_inner != "meteor_lite" && eval.soda_inner != "cider_sentence") {
    throw std::invalid_argument("config: eval.soda_inner must be 'meteor_lite' or 'cider_sentence'");
  }
  if (eval.soda_mode != "old" && eval.soda_mode != "mr") {
    throw std::invalid_argument("config: eval.soda_mode must be 'old' or 'mr'");
  }
  if (!(eval.p_increase >= 0.0 && eval.p_increase <= 1.0) ||
      !(eval.p_reduce >= 0.0 && eval.p_reduce <= 1.0)) {
    throw std::invalid_argument("config: eval perturbation rates must lie in [0,1]");
  }
  if (eval.audit_seeds.empty()) {
    throw std::invalid_argument("config: eval.audit_seeds must be non-empty");
  }
  const SyntheticSpec& s = data.synthetic;
  if (s.n_videos < 1 || s.n_frames < 1 || s.n_activities < 1 || s.d_appearance < 1) {
    throw std::invalid_argument("config: data.synthetic size fields must be >= 1");
  }
  if (s.events_min < 1 || s.events_max < s.events_min) {
    throw std::invalid_argument("config: data.synthetic event range invalid");
  }
  if (!(s.frame_sec > 0.0) || s.noise_std < 0.0) {
    throw std::invalid_argument("config: data.synthetic frame_sec/noise_std out of range");
  }
}

RunConfig default_run_config() { return RunConfig{}; }

std::string serialize_run_config(const RunConfig& cfg) {
  return tree_from_config(cfg).dump(2) + "\n";
}

RunConfig parse_run_config(const std::string& json_text,
                           const std::vector<std::string>& overrides) {
  const json schema = tree_from_config(RunConfig{});
  json doc = schema;
  if (!json_text.empty()) {
    json file = json::parse(json_text, nullptr, false);
    if (file.is_discarded()) {
      throw std::invalid_argument("config: document is not valid JSON");
    }
    check_against_schema(schema, file, "");
    doc.merge_patch(file);
  }
  for (const std::string& o : overrides) apply_override(doc, o);
  check_against_schema(schema, doc, "");
  RunConfig cfg = config_from_tree(doc);
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), overrides);
}

std::string file_digest_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("digest: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  const std::uint64_t h = fnv1a64(bytes);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

const std::map<std::string, std::string>& format_versions() {
  static const std::map<std::string, std::string> v = {
      {"config", "1"},
      {"checkpoint", std::string(nn::kCheckpointMagic, sizeof(nn::kCheckpointMagic))},
      {"features", "SDVCFEA1"},
      {"annotations", "1"},
      {"submission", "1"},
      {"report", "1"},
  };
  return v;
}

void write_provenance(const std::string& out_dir, const RunConfig& cfg,
                      const RunProvenance& prov) {
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream out(out_dir + "/config.json", std::ios::binary);
    if (!out) throw std::runtime_error("provenance: cannot write config.json");
    out << serialize_run_config(cfg);
  }
  json j;
  j["command"] = prov.command;
  j["seed"] = prov.seed;
  j["format_versions"] = format_versions();
  j["input_digests"] = prov.input_digests;
  std::ofstream out(out_dir + "/run.json", std::ios::binary);
  if (!out) throw std::runtime_error("provenance: cannot write run.json");
  out << j.dump(2) << "\n";
}

}  // namespace seqdvc

#include "seqdvc/data.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "seqdvc/rng.hpp"

namespace seqdvc {

using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return j;
}

// Canonical JSON writes: nlohmann's object keys are sorted, indent 2, one
// trailing newline. Identical content always produces identical bytes.
void write_json_file(const std::string& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("write failed for " + path);
}

const std::vector<std::string> kSpecials = {"[PAD]", "[SOS]", "[EOS]", "[MASK]", "[UNK]"};

}  // namespace

std::vector<std::string> Tokenizer::split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
      cur += c;
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& captions, int min_freq) {
  std::map<std::string, long> freq;
  for (const auto& c : captions) {
    for (const auto& w : split_words(c)) freq[w] += 1;
  }
  std::vector<std::pair<std::string, long>> items(freq.begin(), freq.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Tokenizer t;
  t.id_to_token = kSpecials;
  for (const auto& [word, count] : items) {
    if (count < min_freq) continue;
    t.id_to_token.push_back(word);
  }
  for (std::size_t i = 0; i < t.id_to_token.size(); ++i) {
    t.token_to_id[t.id_to_token[i]] = static_cast<int>(i);
  }
  return t;
}

int Tokenizer::lookup(const std::string& word) const {
  auto it = token_to_id.find(word);
  return it == token_to_id.end() ? kUnk : it->second;
}

std::vector<int> Tokenizer::encode(const std::string& text, bool add_specials) const {
  std::vector<int> ids;
  if (add_specials) ids.push_back(kSos);
  for (const auto& w : split_words(text)) ids.push_back(lookup(w));
  if (add_specials) ids.push_back(kEos);
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= size()) throw std::out_of_range("decode: id out of range");
    if (id < static_cast<int>(kSpecials.size())) continue;
    if (!out.empty()) out += ' ';
    out += id_to_token[id];
  }
  return out;
}

void Tokenizer::save(const std::string& path) const {
  json j;
  j["format_version"] = 1;
  j["tokens"] = id_to_token;
  write_json_file(path, j);
}

Tokenizer Tokenizer::load(const std::string& path) {
  json j = read_json_file(path);
  if (!j.contains("tokens") || !j["tokens"].is_array()) {
    throw std::runtime_error(path + ": missing tokens array");
  }
  Tokenizer t;
  t.id_to_token = j["tokens"].get<std::vector<std::string>>();
  if (t.id_to_token.size() < kSpecials.size()) {
    throw std::runtime_error(path + ": token list shorter than the special set");
  }
  for (std::size_t i = 0; i < kSpecials.size(); ++i) {
    if (t.id_to_token[i] != kSpecials[i]) {
      throw std::runtime_error(path + ": special tokens out of order");
    }
  }
  for (std::size_t i = 0; i < t.id_to_token.size(); ++i) {
    t.token_to_id[t.id_to_token[i]] = static_cast<int>(i);
  }
  return t;
}

namespace {

AnnotationRecord parse_annotation(const std::string& id, const json& body,
                                  const std::string& path) {
  AnnotationRecord rec;
  rec.video_id = id;
  if (!body.contains("duration") || !body["duration"].is_number()) {
    throw std::runtime_error(path + ": video " + id + ": missing duration");
  }
  rec.duration_sec = body["duration"].get<double>();
  if (!(rec.duration_sec > 0.0)) {
    throw std::runtime_error(path + ": video " + id + ": non-positive duration");
  }
  if (!body.contains("timestamps") || !body.contains("sentences")) {
    throw std::runtime_error(path + ": video " + id + ": missing timestamps or sentences");
  }
  const auto& ts = body["timestamps"];
  const auto& ss = body["sentences"];
  if (!ts.is_array() || !ss.is_array() || ts.size() != ss.size() || ts.empty()) {
    throw std::runtime_error(path + ": video " + id +
                             ": timestamps/sentences must be equal-length non-empty arrays");
  }
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const auto& pair = ts[k];
    if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number() || !pair[1].is_number()) {
      throw std::runtime_error(path + ": video " + id + ": timestamp " +
                               std::to_string(k) + " must be [start, end]");
    }
    TimeInterval iv{pair[0].get<double>(), pair[1].get<double>(), rec.duration_sec};
    if (iv.start_sec < 0.0 || iv.start_sec > iv.end_sec || iv.end_sec > rec.duration_sec) {
      throw std::runtime_error(path + ": video " + id + ": timestamp " +
                               std::to_string(k) + " outside [0, duration]");
    }
    rec.events.push_back(iv);
    rec.sentences.push_back(ss[k].get<std::string>());
  }
  return rec;
}

}  // namespace

std::vector<AnnotationRecord> load_annotations(const std::string& path) {
  json j = read_json_file(path);
  const json* videos = &j;
  if (j.is_object() && j.contains("videos")) videos = &j["videos"];
  if (!videos->is_object()) throw std::runtime_error(path + ": expected an object of videos");
  std::vector<AnnotationRecord> out;
  for (const auto& [id, body] : videos->items()) {
    if (id == "format_version") continue;
    out.push_back(parse_annotation(id, body, path));
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.video_id < b.video_id; });
  return out;
}

void save_annotations(const std::string& path, const std::vector<AnnotationRecord>& records) {
  json videos = json::object();
  for (const auto& rec : records) {
    json body;
    body["duration"] = rec.duration_sec;
    json ts = json::array();
    json ss = json::array();
    for (std::size_t k = 0; k < rec.events.size(); ++k) {
      ts.push_back({rec.events[k].start_sec, rec.events[k].end_sec});
      ss.push_back(rec.sentences[k]);
    }
    body["timestamps"] = std::move(ts);
    body["sentences"] = std::move(ss);
    videos[rec.video_id] = std::move(body);
  }
  json j;
  j["format_version"] = 1;
  j["videos"] = std::move(videos);
  write_json_file(path, j);
}

namespace {
constexpr char kFeatureMagic[8] = {'S', 'D', 'V', 'C', 'F', 'E', 'A', '1'};
}

void write_features(const std::string& path, const std::map<std::string, Mat>& features) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(kFeatureMagic, 8);
  const std::uint32_t version = 1;
  const std::uint64_t count = features.size();
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  f.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& [id, mat] : features) {
    const std::uint32_t len = static_cast<std::uint32_t>(id.size());
    const std::uint32_t n = static_cast<std::uint32_t>(mat.rows());
    const std::uint32_t d = static_cast<std::uint32_t>(mat.cols());
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(id.data(), len);
    f.write(reinterpret_cast<const char*>(&n), sizeof(n));
    f.write(reinterpret_cast<const char*>(&d), sizeof(d));
    f.write(reinterpret_cast<const char*>(mat.data()),
            static_cast<std::streamsize>(sizeof(double) * mat.size()));
  }
  if (!f) throw std::runtime_error("write failed for " + path);
}

std::map<std::string, Mat> read_features(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kFeatureMagic, 8) != 0) {
    throw std::runtime_error(path + ": bad feature-file magic");
  }
  std::uint32_t version = 0;
  std::uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  f.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!f || version != 1) throw std::runtime_error(path + ": unsupported feature version");
  std::map<std::string, Mat> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t len = 0, n = 0, d = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string id(len, '\0');
    f.read(id.data(), len);
    f.read(reinterpret_cast<char*>(&n), sizeof(n));
    f.read(reinterpret_cast<char*>(&d), sizeof(d));
    Mat mat(n, d);
    f.read(reinterpret_cast<char*>(mat.data()),
           static_cast<std::streamsize>(sizeof(double) * mat.size()));
    if (!f) throw std::runtime_error(path + ": truncated feature file");
    out.emplace(std::move(id), std::move(mat));
  }
  return out;
}

Dataset load_dense_dataset(const std::string& annotations_path,
                           const std::string& features_path) {
  auto annotations = load_annotations(annotations_path);
  auto features = read_features(features_path);
  Dataset ds;
  std::vector<std::string> captions;
  for (auto& ann : annotations) {
    auto it = features.find(ann.video_id);
    if (it == features.end()) {
      throw std::runtime_error(features_path + ": no features for video " + ann.video_id);
    }
    if (!it->second.allFinite()) {
      throw std::runtime_error(features_path + ": non-finite features for " + ann.video_id);
    }
    DenseVideoRecord rec;
    rec.video_id = ann.video_id;
    rec.duration_sec = ann.duration_sec;
    rec.events = ann.events;
    rec.sentences = ann.sentences;
    rec.features = std::move(it->second);
    for (const auto& s : rec.sentences) captions.push_back(s);
    ds.records.push_back(std::move(rec));
  }
  ds.tokenizer = Tokenizer::build(captions);
  return ds;
}

Dataset ingest_clip_corpus(const std::string& annotations_path,
                           const std::string& features_path) {
  json j = read_json_file(annotations_path);
  const json* clips = &j;
  if (j.is_object() && j.contains("clips")) clips = &j["clips"];
  if (!clips->is_object()) {
    throw std::runtime_error(annotations_path + ": expected an object of clips");
  }
  auto features = read_features(features_path);
  Dataset ds;
  std::vector<std::string> captions;
  std::vector<std::pair<std::string, const json*>> ordered;
  for (const auto& [id, body] : clips->items()) {
    if (id == "format_version") continue;
    ordered.emplace_back(id, &body);
  }
  std::sort(ordered.begin(), ordered.end());
  for (const auto& [id, body] : ordered) {
    if (!body->contains("duration") || !body->contains("sentence")) {
      throw std::runtime_error(annotations_path + ": clip " + id +
                               ": missing duration or sentence");
    }
    const double d = (*body)["duration"].get<double>();
    if (!(d > 0.0)) throw std::runtime_error(annotations_path + ": clip " + id + ": non-positive duration");
    auto it = features.find(id);
    if (it == features.end()) {
      throw std::runtime_error(features_path + ": no features for clip " + id);
    }
    DenseVideoRecord rec;
    rec.video_id = id;
    rec.duration_sec = d;
    rec.events.push_back({0.0, d, d});
    rec.sentences.push_back((*body)["sentence"].get<std::string>());
    rec.features = std::move(it->second);
    rec.mefm_ok = false;  // a full-span pseudo-event carries no boundary signal
    captions.push_back(rec.sentences[0]);
    ds.records.push_back(std::move(rec));
  }
  ds.tokenizer = Tokenizer::build(captions);
  return ds;
}

Submission read_submission(const std::string& path) {
  json j = read_json_file(path);
  if (!j.contains("results") || !j["results"].is_object()) {
    throw std::runtime_error(path + ": missing results object");
  }
  Submission sub;
  for (const auto& [id, events] : j["results"].items()) {
    if (!events.is_array()) throw std::runtime_error(path + ": results for " + id + " must be an array");
    std::vector<SubmissionEvent> list;
    for (const auto& e : events) {
      if (!e.contains("sentence") || !e.contains("timestamp") || !e["timestamp"].is_array() ||
          e["timestamp"].size() != 2) {
        throw std::runtime_error(path + ": malformed event entry for " + id);
      }
      SubmissionEvent ev;
      ev.sentence = e["sentence"].get<std::string>();
      ev.start_sec = e["timestamp"][0].get<double>();
      ev.end_sec = e["timestamp"][1].get<double>();
      if (ev.start_sec > ev.end_sec) {
        throw std::runtime_error(path + ": inverted timestamp for " + id);
      }
      list.push_back(std::move(ev));
    }
    sub.results.emplace(id, std::move(list));
  }
  return sub;
}

void write_submission(const std::string& path, const Submission& sub) {
  json results = json::object();
  for (const auto& [id, events] : sub.results) {
    json arr = json::array();
    for (const auto& e : events) {
      json obj;
      obj["sentence"] = e.sentence;
      obj["timestamp"] = {e.start_sec, e.end_sec};
      arr.push_back(std::move(obj));
    }
    results[id] = std::move(arr);
  }
  json j;
  j["format_version"] = 1;
  j["results"] = std::move(results);
  write_json_file(path, j);
}

const std::vector<std::string>& activity_word_pool() {
  static const std::vector<std::string> pool = {
      "stretch", "jog",    "sprint", "squat",  "lunge", "climb",
      "swim",    "dive",   "paddle", "pedal",  "vault", "juggle",
      "march",   "twirl",  "skate",  "row"};
  return pool;
}

const std::vector<std::string>& caption_templates() {
  // Exactly one ACT slot each; all other words belong to the filler list.
  static const std::vector<std::string> templates = {
      "a person starts to ACT",
      "someone continues to ACT slowly",
      "the man tries to ACT again",
      "a woman learns to ACT outdoors"};
  return templates;
}

const std::vector<std::string>& generic_filler_words() {
  static const std::vector<std::string> words = {
      "a",      "person", "starts",   "to",    "someone", "continues",
      "slowly", "the",    "man",      "tries", "again",   "woman",
      "learns", "outdoors"};
  return words;
}

namespace {

std::string instantiate_template(const std::string& tpl, const std::string& activity) {
  std::string out = tpl;
  const auto pos = out.find("ACT");
  out.replace(pos, 3, activity);
  return out;
}

}  // namespace

std::vector<SyntheticVideo> generate_synthetic_videos(const SyntheticSpec& spec) {
  if (spec.n_videos < 1 || spec.n_frames < 1 || spec.d_appearance < 1) {
    throw std::invalid_argument("synthetic spec: counts must be positive");
  }
  if (spec.n_activities < 1 ||
      spec.n_activities > static_cast<int>(activity_word_pool().size())) {
    throw std::invalid_argument("synthetic spec: n_activities outside the word pool");
  }
  if (spec.events_min < 1 || spec.events_max < spec.events_min) {
    throw std::invalid_argument("synthetic spec: bad events range");
  }
  if (!spec.allow_overlap && 3 * spec.events_max - 1 > spec.n_frames) {
    throw std::invalid_argument("synthetic spec: infeasible packing of events into frames");
  }
  if (spec.noise_std < 0.0) throw std::invalid_argument("synthetic spec: negative noise");

  // One shared projection per corpus: rows are per-activity directions
  // (row 0 = background).
  Rng proj_rng = derive_rng(spec.seed, "proj", 0);
  Mat proj(spec.n_activities + 1, spec.d_appearance);
  for (Eigen::Index r = 0; r < proj.rows(); ++r)
    for (Eigen::Index c = 0; c < proj.cols(); ++c)
      proj(r, c) = proj_rng.normal() / std::sqrt(static_cast<double>(spec.d_appearance));

  const auto& templates = caption_templates();
  std::vector<SyntheticVideo> out;
  for (int vi = 0; vi < spec.n_videos; ++vi) {
    Rng rng = derive_rng(spec.seed, "video", vi);
    const int k = spec.events_min + rng.uniform_int(spec.events_max - spec.events_min + 1);

    // Segment lengths, then spare background frames split across the gaps.
    std::vector<int> lengths;
    int total = 0;
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 200) throw std::runtime_error("synthetic: packing retries exhausted");
      lengths.clear();
      total = 0;
      const int max_len = std::max(2, spec.n_frames / (2 * k));
      for (int e = 0; e < k; ++e) {
        const int len = 2 + rng.uniform_int(std::max(1, max_len - 1));
        lengths.push_back(len);
        total += len;
      }
      if (total + (k - 1) <= spec.n_frames) break;
    }
    std::vector<int> gaps(k + 1, 0);
    for (int g = 1; g < k; ++g) gaps[g] = 1;  // mandatory separator
    int free_frames = spec.n_frames - total - (k - 1);
    for (int u = 0; u < free_frames; ++u) gaps[rng.uniform_int(k + 1)] += 1;

    SyntheticVideo video;
    video.frame_activity.assign(spec.n_frames, 0);
    char idbuf[24];
    std::snprintf(idbuf, sizeof(idbuf), "synth_%05d", vi);
    video.annotation.video_id = idbuf;
    video.annotation.duration_sec = spec.n_frames * spec.frame_sec;

    int cursor = gaps[0];
    for (int e = 0; e < k; ++e) {
      const int a = cursor;
      const int b = cursor + lengths[e] - 1;
      cursor = b + 1 + gaps[e + 1];
      const int activity = 1 + rng.uniform_int(spec.n_activities);
      for (int t = a; t <= b; ++t) video.frame_activity[t] = activity;
      // The end margin keeps the encoded interval to exactly frames a..b.
      TimeInterval iv;
      iv.start_sec = a * spec.frame_sec;
      iv.end_sec = (b + 1 - 1e-3) * spec.frame_sec;
      iv.duration_sec = video.annotation.duration_sec;
      video.annotation.events.push_back(iv);
      const auto& tpl = templates[rng.uniform_int(static_cast<int>(templates.size()))];
      video.annotation.sentences.push_back(
          instantiate_template(tpl, activity_word_pool()[activity - 1]));
    }

    Rng noise = derive_rng(spec.seed, "noise", vi);
    video.features = Mat(spec.n_frames, spec.d_appearance);
    for (int t = 0; t < spec.n_frames; ++t) {
      for (int c = 0; c < spec.d_appearance; ++c) {
        video.features(t, c) = proj(video.frame_activity[t], c) +
                               (spec.noise_std > 0.0 ? spec.noise_std * noise.normal() : 0.0);
      }
    }
    out.push_back(std::move(video));
  }
  return out;
}

void generate_synthetic_corpus(const SyntheticSpec& spec, const std::string& out_dir) {
  auto videos = generate_synthetic_videos(spec);
  std::vector<AnnotationRecord> annotations;
  std::map<std::string, Mat> features;
  for (auto& v : videos) {
    annotations.push_back(v.annotation);
    features.emplace(v.annotation.video_id, std::move(v.features));
  }
  save_annotations(out_dir + "/annotations.json", annotations);
  write_features(out_dir + "/features.bin", features);
}

}  // namespace seqdvc

#include "crnkit/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "crnkit/errors.hpp"
#include "crnkit/rng.hpp"

namespace crnkit {
namespace {

using nlohmann::json;

GForm gform_from_name(const std::string& name) {
  if (name == "average_pool") return GForm::average_pool;
  if (name == "concat") return GForm::concat;
  throw ConfigError("unknown aggregation form '" + name + "'");
}

// Typed accessors over one JSON object. Every key a reader touches is marked;
// finish() rejects the object if any key was left unread, which is what makes
// unknown keys (typos included) hard errors instead of silent no-ops.
class StrictObject {
 public:
  StrictObject(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw FormatError(path_ + ": expected a JSON object");
  }

  bool has(const std::string& key) const { return node_.contains(key); }

  template <typename T, typename Pred>
  void read(const std::string& key, T& out, Pred ok, const char* want) {
    if (!node_.contains(key)) return;
    seen_.insert(key);
    const json& v = node_.at(key);
    if (!ok(v)) throw FormatError(path_ + "." + key + ": expected " + want);
    out = v.get<T>();
  }

  void number(const std::string& key, double& out) {
    read(key, out, [](const json& v) { return v.is_number(); }, "a number");
  }
  void integer(const std::string& key, int& out) {
    read(key, out, [](const json& v) { return v.is_number_integer(); }, "an integer");
  }
  void unsigned64(const std::string& key, std::uint64_t& out) {
    read(key, out, [](const json& v) { return v.is_number_unsigned(); },
         "a non-negative integer");
  }
  void boolean(const std::string& key, bool& out) {
    read(key, out, [](const json& v) { return v.is_boolean(); }, "a boolean");
  }
  void text(const std::string& key, std::string& out) {
    read(key, out, [](const json& v) { return v.is_string(); }, "a string");
  }

  const json& child(const std::string& key) {
    seen_.insert(key);
    return node_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : node_.items()) {
      (void)value;
      if (!seen_.contains(key)) throw FormatError("unknown config key '" + path_ + "." + key + "'");
    }
  }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_data(const json& node, DataSection& out) {
  StrictObject o(node, "data");
  o.text("bundle", out.bundle);
  o.text("eval_bundle", out.eval_bundle);
  o.integer("samples", out.samples);
  o.integer("eval_samples", out.eval_samples);
  o.integer("N", out.N);
  o.integer("T", out.T);
  o.integer("motif_lo", out.motif_lo);
  o.integer("motif_hi", out.motif_hi);
  o.number("noise", out.noise);
  o.integer("segments", out.segments);
  o.integer("segment_tokens", out.segment_tokens);
  o.integer("choices", out.choices);
  o.finish();
}

void read_model(const json& node, ModelSection& out) {
  StrictObject o(node, "model");
  o.integer("d", out.d);
  o.integer("k_max", out.k_max);
  o.integer("t", out.t);
  o.text("g", out.g);
  o.text("motion_form", out.motion_form);
  o.text("question_form", out.question_form);
  o.text("textual_form", out.textual_form);
  o.integer("answer_space", out.answer_space);
  o.text("levels", out.levels);
  o.integer("P", out.P);
  o.integer("Q", out.Q);
  o.boolean("long_form", out.long_form);
  o.boolean("visual_stream", out.visual_stream);
  o.boolean("textual_stream", out.textual_stream);
  o.boolean("clip_motion", out.clip_motion);
  o.boolean("clip_question", out.clip_question);
  o.boolean("video_motion", out.video_motion);
  o.boolean("video_question", out.video_question);
  o.integer("max_len", out.max_len);
  o.finish();
}

void read_optim(const json& node, OptimSection& out) {
  StrictObject o(node, "optimizer");
  o.number("lr", out.lr);
  o.integer("batch", out.batch);
  o.integer("decay_every", out.decay_every);
  o.integer("epochs", out.epochs);
  o.finish();
}

json write_data(const DataSection& d) {
  json o;
  o["bundle"] = d.bundle;
  o["eval_bundle"] = d.eval_bundle;
  o["samples"] = d.samples;
  o["eval_samples"] = d.eval_samples;
  o["N"] = d.N;
  o["T"] = d.T;
  o["motif_lo"] = d.motif_lo;
  o["motif_hi"] = d.motif_hi;
  o["noise"] = d.noise;
  o["segments"] = d.segments;
  o["segment_tokens"] = d.segment_tokens;
  o["choices"] = d.choices;
  return o;
}

json write_model(const ModelSection& m) {
  json o;
  o["d"] = m.d;
  o["k_max"] = m.k_max;
  o["t"] = m.t;
  o["g"] = m.g;
  o["motion_form"] = m.motion_form;
  o["question_form"] = m.question_form;
  o["textual_form"] = m.textual_form;
  o["answer_space"] = m.answer_space;
  o["levels"] = m.levels;
  o["P"] = m.P;
  o["Q"] = m.Q;
  o["long_form"] = m.long_form;
  o["visual_stream"] = m.visual_stream;
  o["textual_stream"] = m.textual_stream;
  o["clip_motion"] = m.clip_motion;
  o["clip_question"] = m.clip_question;
  o["video_motion"] = m.video_motion;
  o["video_question"] = m.video_question;
  o["max_len"] = m.max_len;
  return o;
}

json write_optim(const OptimSection& s) {
  json o;
  o["lr"] = s.lr;
  o["batch"] = s.batch;
  o["decay_every"] = s.decay_every;
  o["epochs"] = s.epochs;
  return o;
}

}  // namespace

RunConfig default_run_config(data::TaskKind task) {
  RunConfig cfg;
  cfg.task = task;
  switch (task) {
    case data::TaskKind::count:
      cfg.model.visual_stream = true;
      cfg.model.textual_stream = false;
      cfg.optim.decay_every = 5;
      break;
    case data::TaskKind::transition:
      cfg.model.visual_stream = true;
      cfg.model.textual_stream = false;
      cfg.model.answer_space = 2;
      break;
    case data::TaskKind::longform_choice:
      cfg.model.visual_stream = false;
      cfg.model.textual_stream = true;
      break;
  }
  return cfg;
}

RunConfig parse_run_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config is not valid JSON: ") + e.what());
  }
  StrictObject o(root, "config");
  std::string task_name = "count";
  o.text("task", task_name);
  RunConfig cfg = default_run_config(data::task_kind_from_name(task_name));
  o.unsigned64("seed", cfg.seed);
  o.text("out_dir", cfg.out_dir);
  o.integer("workers", cfg.workers);
  if (o.has("data")) read_data(o.child("data"), cfg.data);
  if (o.has("model")) read_model(o.child("model"), cfg.model);
  if (o.has("optimizer")) read_optim(o.child("optimizer"), cfg.optim);
  o.finish();
  validate_run_config(cfg);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str());
}

std::string serialize_run_config(const RunConfig& cfg) {
  json root;
  root["task"] = data::task_kind_name(cfg.task);
  root["seed"] = cfg.seed;
  root["out_dir"] = cfg.out_dir;
  root["workers"] = cfg.workers;
  root["data"] = write_data(cfg.data);
  root["model"] = write_model(cfg.model);
  root["optimizer"] = write_optim(cfg.optim);
  return root.dump(2) + "\n";
}

void validate_run_config(const RunConfig& cfg) {
  if (cfg.optim.epochs < 1) throw ConfigError("optimizer.epochs must be at least 1");
  if (cfg.optim.batch < 1) throw ConfigError("optimizer.batch must be at least 1");
  if (cfg.optim.decay_every < 1) throw ConfigError("optimizer.decay_every must be at least 1");
  if (!(cfg.optim.lr > 0.0) || !std::isfinite(cfg.optim.lr)) {
    throw ConfigError("optimizer.lr must be a positive finite number");
  }
  if (cfg.workers < 1) throw ConfigError("workers must be at least 1");
  if (cfg.data.samples < 1) throw ConfigError("data.samples must be at least 1");
  if (cfg.data.eval_samples < 1) throw ConfigError("data.eval_samples must be at least 1");
  if (!cfg.model.visual_stream && !cfg.model.textual_stream &&
      cfg.task != data::TaskKind::longform_choice) {
    throw ConfigError("the question-only ablation applies to the choice task");
  }
  switch (cfg.task) {
    case data::TaskKind::count:
    case data::TaskKind::transition:
      if (cfg.model.textual_stream) {
        throw ConfigError("visual tasks carry no subtitle features for a textual stream");
      }
      if (!cfg.model.visual_stream) {
        throw ConfigError("visual tasks need the visual stream enabled");
      }
      break;
    case data::TaskKind::longform_choice:
      if (cfg.model.visual_stream) {
        throw ConfigError("the choice task carries no frame features for a visual stream");
      }
      break;
  }
  // Form names, level names, and shape constraints are checked by the model
  // constructor; resolve them here so a bad config fails before any work.
  (void)model_config(cfg);
}

ModelConfig model_config(const RunConfig& cfg) {
  ModelConfig m;
  switch (cfg.task) {
    case data::TaskKind::count:
      m.task = AnswerKind::count;
      break;
    case data::TaskKind::transition:
      m.task = AnswerKind::open_ended;
      break;
    case data::TaskKind::longform_choice:
      m.task = AnswerKind::multi_choice;
      break;
  }
  m.answer_space = cfg.model.answer_space;
  m.d = cfg.model.d;
  m.k_max = cfg.model.k_max;
  m.t = cfg.model.t;
  m.g = gform_from_name(cfg.model.g);
  m.motion_form = hform_from_name(cfg.model.motion_form);
  m.question_form = hform_from_name(cfg.model.question_form);
  m.textual_form = hform_from_name(cfg.model.textual_form);
  m.visual.enabled = cfg.model.visual_stream;
  m.visual.levels = levels_from_name(cfg.model.levels);
  m.visual.N = cfg.data.N;
  m.visual.T = cfg.data.T;
  m.visual.P = cfg.model.P;
  m.visual.Q = cfg.model.Q;
  m.visual.long_form = cfg.model.long_form;
  m.visual.clip_motion = cfg.model.clip_motion;
  m.visual.clip_question = cfg.model.clip_question;
  m.visual.video_motion = cfg.model.video_motion;
  m.visual.video_question = cfg.model.video_question;
  m.textual.enabled = cfg.model.textual_stream;
  m.textual.M = cfg.data.segments;
  m.textual.max_len = cfg.model.max_len;
  return m;
}

data::SyntheticSpec synth_spec(const RunConfig& cfg, bool eval_split) {
  data::SyntheticSpec spec;
  spec.kind = cfg.task;
  spec.samples = eval_split ? cfg.data.eval_samples : cfg.data.samples;
  spec.N = cfg.data.N;
  spec.T = cfg.data.T;
  spec.d = cfg.model.d;
  spec.motif_lo = cfg.data.motif_lo;
  spec.motif_hi = cfg.data.motif_hi;
  spec.noise = cfg.data.noise;
  spec.segments = cfg.data.segments;
  spec.segment_tokens = cfg.data.segment_tokens;
  spec.choices = cfg.data.choices;
  spec.seed = mix_seed(cfg.seed, fnv1a64(eval_split ? "data.eval" : "data.train"));
  return spec;
}

}  // namespace crnkit

#pragma once

#include <cstdint>
#include <string>

#include "crnkit/data.hpp"
#include "crnkit/hcrn.hpp"

namespace crnkit {

// Run descriptions are UTF-8 JSON with one key per hyperparameter. Parsing is
// fail-closed: a key the schema does not know is an error, so a typo in an
// ablation sweep can never be silently ignored. Serialization writes every
// key; parse -> serialize -> parse is the identity.

struct DataSection {
  std::string bundle;       // path to a prebuilt training bundle; empty = synthesize
  std::string eval_bundle;  // path to a prebuilt eval bundle; empty = synthesize
  int samples = 2000;
  int eval_samples = 256;
  int N = 8;  // clips
  int T = 8;  // frames per clip
  int motif_lo = 0;
  int motif_hi = 4;
  double noise = 0.02;
  int segments = 6;
  int segment_tokens = 8;
  int choices = 4;
};

struct ModelSection {
  int d = 32;
  int k_max = 0;  // 0 = per-unit ceiling n-1; 1 = no-relation mode; >= 2 caps
  int t = 2;
  std::string g = "average_pool";
  std::string motion_form = "additive";
  std::string question_form = "multiplicative";
  std::string textual_form = "multiplicative";
  int answer_space = 2;
  std::string levels = "2";
  int P = 0;
  int Q = 0;
  bool long_form = false;
  bool visual_stream = true;
  bool textual_stream = false;
  bool clip_motion = true;
  bool clip_question = true;
  bool video_motion = true;
  bool video_question = true;
  int max_len = 256;
};

struct OptimSection {
  double lr = 1e-4;
  int batch = 32;
  int decay_every = 10;  // epochs between halvings of the learning rate
  int epochs = 25;
};

struct RunConfig {
  data::TaskKind task = data::TaskKind::count;
  std::uint64_t seed = 1;
  std::string out_dir = "run";
  int workers = 1;
  DataSection data;
  ModelSection model;
  OptimSection optim;
};

// Task-appropriate defaults: stream toggles, answer space, count's faster
// learning-rate decay (halved every 5 epochs instead of 10).
RunConfig default_run_config(data::TaskKind task);

// FormatError on malformed JSON, unknown keys, or wrong value types;
// ConfigError when the values violate an invariant (epochs >= 1, batch >= 1,
// positive learning rate, stream/task consistency).
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);  // IoError when unreadable

std::string serialize_run_config(const RunConfig& cfg);

void validate_run_config(const RunConfig& cfg);

// The assembled model description: answer kind follows the task, stream
// shapes follow the data section, forms and toggles follow the model section.
ModelConfig model_config(const RunConfig& cfg);

// Generator spec for the training split, or for the held-out eval split
// (fewer samples, a seed mixed with a dedicated stream tag).
data::SyntheticSpec synth_spec(const RunConfig& cfg, bool eval_split);

}  // namespace crnkit

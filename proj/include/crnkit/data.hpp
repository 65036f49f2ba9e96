#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "crnkit/tensor.hpp"

namespace crnkit::data {

// ---- feature container -------------------------------------------------------
//
// File layout: an ASCII decimal byte count terminated by '\n', then exactly
// that many bytes of UTF-8 manifest, then the binary payload. Manifest lines:
//
//   name dtype dim0,dim1,... offset
//
// Offsets are relative to the payload start and 8-byte aligned; payload
// scalars are little-endian IEEE-754 (binary32 for f32, binary64 for f64).
// Feature bundles are written as f32; parameter checkpoints as f64.

enum class Dtype { f32, f64 };

struct ManifestEntry {
  std::string name;
  Dtype dtype = Dtype::f32;
  Shape shape;
  std::uint64_t offset = 0;
};

class FeatureBundle {
 public:
  void add(const std::string& name, const Tensor& t, Dtype dtype = Dtype::f32);
  bool has(const std::string& name) const;
  Tensor tensor(const std::string& name) const;  // always widens to double
  const std::vector<ManifestEntry>& entries() const { return entries_; }
  const std::vector<unsigned char>& payload() const { return payload_; }

  // Raw access used by the loader.
  void add_raw(ManifestEntry entry);
  std::vector<unsigned char>& mutable_payload() { return payload_; }

 private:
  const ManifestEntry& entry(const std::string& name) const;
  std::vector<ManifestEntry> entries_;
  std::vector<unsigned char> payload_;
};

void save_feature_bundle(const FeatureBundle& bundle, const std::filesystem::path& path);
FeatureBundle load_feature_bundle(const std::filesystem::path& path);

// ---- segmentation --------------------------------------------------------------

// N clip windows of T frame indices over a video of L frames. Window i is
// centered on anchor floor((i+0.5)*L/N) and spans [anchor-floor(T/2),
// anchor+ceil(T/2)), with out-of-range indices clamped to 0 or L-1.
std::vector<std::vector<int>> segment_clips(int L, int N, int T);

// M spans [start, start+len) over S tokens, len = floor(S/M), consecutive
// starts stride max(1, len/2); every start is clamped so spans stay in [0,S).
std::vector<std::pair<int, int>> segment_subtitles(int S, int M);

// Learned linear map from raw feature width to the model width.
Tensor project_features(const Tensor& raw, const Tensor& W);

// ---- synthetic tasks -------------------------------------------------------------

enum class TaskKind { count, transition, longform_choice };

std::string task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

struct SyntheticSpec {
  TaskKind kind = TaskKind::count;
  int samples = 1000;
  int N = 8;           // clips
  int T = 8;           // frames per clip
  int d = 32;          // feature width
  int motif_lo = 0;    // count task: inclusive motif count range
  int motif_hi = 4;
  double noise = 0.02;
  int segments = 6;        // long-form: M
  int segment_tokens = 8;  // long-form: tokens per segment
  int choices = 4;         // long-form: answer candidates
  std::uint64_t seed = 1;
};

// Bundle tensor names:
//   count/transition: appearance [S,N,T,d], motion [S,N,d], question [S,d],
//                     labels [S], task_kind [1]
//   longform_choice:  segments [S,M,Ts,d], question [S,d], choices [S,A,d],
//                     labels [S], task_kind [1]
FeatureBundle gen_count_task(const SyntheticSpec& spec);
FeatureBundle gen_transition_task(const SyntheticSpec& spec);
FeatureBundle gen_longform_task(const SyntheticSpec& spec);
FeatureBundle generate(const SyntheticSpec& spec);

TaskKind bundle_task(const FeatureBundle& bundle);
std::size_t bundle_samples(const FeatureBundle& bundle);

// Label oracles recomputed from stored features alone (no generator state).
int count_oracle(const FeatureBundle& bundle, std::size_t sample);
int transition_oracle(const FeatureBundle& bundle, std::size_t sample);
int longform_oracle(const FeatureBundle& bundle, std::size_t sample);
int label_oracle(const FeatureBundle& bundle, std::size_t sample);

double stored_label(const FeatureBundle& bundle, std::size_t sample);

}  // namespace crnkit::data

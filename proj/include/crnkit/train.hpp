#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "crnkit/config.hpp"
#include "crnkit/data.hpp"
#include "crnkit/hcrn.hpp"
#include "crnkit/nn.hpp"

namespace crnkit::train {

// Per-sample view over a task bundle: slices the stacked feature tensors into
// the model's input form. For the choice task the passage is the segment
// tokens laid out end to end (the synthetic generator emits segments
// directly, so the passage is their concatenation).
class Dataset {
 public:
  explicit Dataset(data::FeatureBundle bundle);

  data::TaskKind task() const { return task_; }
  std::size_t size() const { return samples_; }
  std::size_t feature_width() const { return width_; }
  SampleInputs sample(std::size_t idx) const;
  int label(std::size_t idx) const;

 private:
  data::TaskKind task_ = data::TaskKind::count;
  std::size_t samples_ = 0;
  std::size_t width_ = 0;
  Tensor appearance_;  // count / transition: S x N x T x d
  Tensor motion_;      // count / transition: S x N x d
  Tensor segments_;    // choice: S x M x Ts x d
  Tensor choices_;     // choice: S x A x d
  Tensor question_;    // S x d
  Tensor labels_;      // S
};

struct EpochRow {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double eval_metric = 0.0;
};

struct EvalSummary {
  double loss = 0.0;
  double metric = 0.0;
  std::size_t samples = 0;
};

struct FitResult {
  std::string metric_name;  // "mse" for count, "accuracy" otherwise
  std::vector<EpochRow> epochs;
  EvalSummary final_eval;
};

// Learning rate for a 0-based epoch: halves after every decay_every epochs.
double epoch_lr(const OptimSection& optim, int epoch);

// Forward-only pass over a dataset. Per-sample subset draws come from a
// dedicated stream of `seed`, so the same call is repeatable and never
// advances training streams. Metric: mean squared error of the raw
// regression score for count, mean exact-answer accuracy otherwise.
EvalSummary evaluate(const HcrnModel& model, const Dataset& ds, std::uint64_t seed);

// Batched gradient descent per the config's optimizer section: gradients are
// averaged over each batch, one Adam step per batch, learning rate halved on
// the decay schedule, one shuffle per epoch from an epoch-derived stream.
// Per-sample subset draws depend only on (seed, epoch, sample index), so the
// trajectory is independent of batch boundaries' worker assignment. `model`
// must be the model built over `store`. Appends one JSON line per epoch to
// `jsonl` when given, and rewrites `checkpoint` after every epoch.
FitResult fit(const RunConfig& cfg, ParameterStore& store, const HcrnModel& model,
              const Dataset& train_set, const Dataset& eval_set, std::ostream* jsonl = nullptr,
              const std::filesystem::path* checkpoint = nullptr);

struct RunArtifacts {
  FitResult result;
  std::filesystem::path metrics;     // JSON lines; timestamps only on the header line
  std::filesystem::path checkpoint;  // final parameter values, 64-bit floats
};

// Full training run: resolves the train and eval bundles (loading them when
// the config names paths, synthesizing them otherwise), creates the output
// directory, streams metrics, and leaves the final checkpoint behind.
RunArtifacts run_training(const RunConfig& cfg);

// Loads a checkpoint into a fresh model of the config's shape and evaluates
// it on the config's eval split.
EvalSummary run_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint);

}  // namespace crnkit::train

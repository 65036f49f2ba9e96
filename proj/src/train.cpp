#include "crnkit/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <deque>
#include <fstream>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <thread>
#include <utility>

#include <json.hpp>

#include "crnkit/errors.hpp"
#include "crnkit/rng.hpp"

namespace crnkit::train {
namespace {

using nlohmann::json;

std::uint64_t stream_seed(std::uint64_t seed, const char* tag, std::uint64_t a,
                          std::uint64_t b = 0) {
  return mix_seed(mix_seed(seed, fnv1a64(tag), a), b);
}

std::vector<double> copy_span(const double* p, std::size_t n) {
  return std::vector<double>(p, p + n);
}

void check_extent(const Tensor& t, std::size_t rank, const char* name) {
  if (!t.defined() || t.rank() != rank) {
    throw FormatError(std::string("bundle tensor '") + name + "' has the wrong rank");
  }
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

data::FeatureBundle resolve_bundle(const RunConfig& cfg, bool eval_split) {
  const std::string& path = eval_split ? cfg.data.eval_bundle : cfg.data.bundle;
  if (path.empty()) return data::generate(synth_spec(cfg, eval_split));
  data::FeatureBundle bundle = data::load_feature_bundle(path);
  if (data::bundle_task(bundle) != cfg.task) {
    throw ConfigError("bundle '" + path + "' holds task '" +
                      data::task_kind_name(data::bundle_task(bundle)) +
                      "', config expects '" + data::task_kind_name(cfg.task) + "'");
  }
  return bundle;
}

// One sample's forward/backward with the gradient scaled by 1/batch size so
// accumulated batch gradients are means. Returns the unscaled loss.
double sample_step(const HcrnModel& model, const Dataset& ds, std::size_t idx,
                   std::uint64_t seed, int epoch, double inv_batch) {
  SampleInputs in = ds.sample(idx);
  Rng rng(stream_seed(seed, "train.sample", static_cast<std::uint64_t>(epoch), idx));
  Tape tape;
  const Prediction pred = model.forward(in, rng);
  const Tensor loss = model.loss(pred, ds.label(idx));
  tape.backward(scale(loss, inv_batch));
  return loss.value();
}

class BatchRunner {
 public:
  BatchRunner(const RunConfig& cfg, ParameterStore& store, const HcrnModel& model)
      : cfg_(cfg), store_(store), model_(model) {
    const int extra = std::min(cfg.workers, cfg.optim.batch) - 1;
    for (int w = 0; w < extra; ++w) {
      mirrors_.push_back(store.mirror());
      worker_models_.push_back(std::make_unique<HcrnModel>(mirrors_.back(), model.config()));
    }
  }

  // Mean-scaled gradients of one batch land in the owning store; the sum of
  // the batch's unscaled losses is returned.
  double run(const Dataset& ds, std::span<const std::size_t> batch, int epoch) {
    store_.zero_grad();
    const double inv = 1.0 / static_cast<double>(batch.size());
    if (mirrors_.empty()) {
      double sum = 0.0;
      for (std::size_t idx : batch) sum += sample_step(model_, ds, idx, cfg_.seed, epoch, inv);
      return sum;
    }
    for (auto& m : mirrors_) m.zero_grad();
    const std::size_t lanes = mirrors_.size() + 1;
    std::vector<double> lane_loss(lanes, 0.0);
    auto lane_work = [&](std::size_t lane) {
      const HcrnModel& m = lane == 0 ? model_ : *worker_models_[lane - 1];
      for (std::size_t i = lane; i < batch.size(); i += lanes) {
        lane_loss[lane] += sample_step(m, ds, batch[i], cfg_.seed, epoch, inv);
      }
    };
    std::vector<std::thread> threads;
    threads.reserve(lanes - 1);
    for (std::size_t lane = 1; lane < lanes; ++lane) threads.emplace_back(lane_work, lane);
    lane_work(0);
    for (auto& t : threads) t.join();
    for (const auto& m : mirrors_) store_.accumulate_grads_from(m);
    return std::accumulate(lane_loss.begin(), lane_loss.end(), 0.0);
  }

 private:
  const RunConfig& cfg_;
  ParameterStore& store_;
  const HcrnModel& model_;
  std::deque<ParameterStore> mirrors_;
  std::vector<std::unique_ptr<HcrnModel>> worker_models_;
};

void write_epoch_line(std::ostream& os, const EpochRow& row) {
  json line;
  line["type"] = "epoch";
  line["epoch"] = row.epoch;
  line["lr"] = row.lr;
  line["train_loss"] = row.train_loss;
  line["eval_loss"] = row.eval_loss;
  line["eval_metric"] = row.eval_metric;
  os << line.dump() << '\n';
}

}  // namespace

Dataset::Dataset(data::FeatureBundle bundle) {
  task_ = data::bundle_task(bundle);
  samples_ = data::bundle_samples(bundle);
  if (samples_ == 0) throw FormatError("bundle holds no samples");
  question_ = bundle.tensor("question");
  labels_ = bundle.tensor("labels");
  check_extent(question_, 2, "question");
  check_extent(labels_, 1, "labels");
  width_ = question_.extent(1);
  if (question_.extent(0) != samples_ || labels_.extent(0) != samples_) {
    throw FormatError("bundle tensors disagree on the sample count");
  }
  if (task_ == data::TaskKind::longform_choice) {
    segments_ = bundle.tensor("segments");
    choices_ = bundle.tensor("choices");
    check_extent(segments_, 4, "segments");
    check_extent(choices_, 3, "choices");
    if (segments_.extent(0) != samples_ || choices_.extent(0) != samples_ ||
        segments_.extent(3) != width_ || choices_.extent(2) != width_) {
      throw FormatError("choice-task tensors disagree on sample count or width");
    }
  } else {
    appearance_ = bundle.tensor("appearance");
    motion_ = bundle.tensor("motion");
    check_extent(appearance_, 4, "appearance");
    check_extent(motion_, 3, "motion");
    if (appearance_.extent(0) != samples_ || motion_.extent(0) != samples_ ||
        appearance_.extent(1) != motion_.extent(1) || appearance_.extent(3) != width_ ||
        motion_.extent(2) != width_) {
      throw FormatError("visual-task tensors disagree on sample count or layout");
    }
  }
}

SampleInputs Dataset::sample(std::size_t idx) const {
  if (idx >= samples_) throw IndexError("sample index out of range");
  SampleInputs in;
  const std::size_t d = width_;
  in.question = Tensor::from({d}, copy_span(question_.data() + idx * d, d));
  if (task_ == data::TaskKind::longform_choice) {
    const std::size_t M = segments_.extent(1), Ts = segments_.extent(2);
    const double* seg = segments_.data() + idx * M * Ts * d;
    in.segments.reserve(M);
    for (std::size_t m = 0; m < M; ++m) {
      in.segments.push_back(Tensor::from({Ts, d}, copy_span(seg + m * Ts * d, Ts * d)));
    }
    in.passage = Tensor::from({M * Ts, d}, copy_span(seg, M * Ts * d));
    const std::size_t A = choices_.extent(1);
    const double* ch = choices_.data() + idx * A * d;
    in.choices.reserve(A);
    for (std::size_t a = 0; a < A; ++a) {
      in.choices.push_back(Tensor::from({d}, copy_span(ch + a * d, d)));
    }
    return in;
  }
  const std::size_t N = appearance_.extent(1), T = appearance_.extent(2);
  const double* ap = appearance_.data() + idx * N * T * d;
  in.clip_frames.reserve(N);
  for (std::size_t i = 0; i < N; ++i) {
    in.clip_frames.push_back(Tensor::from({T, d}, copy_span(ap + i * T * d, T * d)));
  }
  const double* mp = motion_.data() + idx * N * d;
  std::vector<Tensor> motions;
  motions.reserve(N);
  for (std::size_t i = 0; i < N; ++i) {
    motions.push_back(Tensor::from({d}, copy_span(mp + i * d, d)));
  }
  in.set_clip_motions(std::move(motions));
  return in;
}

int Dataset::label(std::size_t idx) const {
  if (idx >= samples_) throw IndexError("sample index out of range");
  return static_cast<int>(std::llround(labels_.data()[idx]));
}

double epoch_lr(const OptimSection& optim, int epoch) {
  if (epoch < 0) throw ContractError("epoch index must be non-negative");
  return optim.lr * std::pow(0.5, epoch / optim.decay_every);
}

EvalSummary evaluate(const HcrnModel& model, const Dataset& ds, std::uint64_t seed) {
  EvalSummary out;
  out.samples = ds.size();
  for (std::size_t idx = 0; idx < ds.size(); ++idx) {
    SampleInputs in = ds.sample(idx);
    Rng rng(stream_seed(seed, "eval.sample", idx));
    const Prediction pred = model.forward(in, rng);
    const int label = ds.label(idx);
    out.loss += model.loss(pred, label).value();
    if (model.config().task == AnswerKind::count) {
      const double diff = pred.score.value() - static_cast<double>(label);
      out.metric += diff * diff;
    } else {
      out.metric += pred.answer == label ? 1.0 : 0.0;
    }
  }
  const auto n = static_cast<double>(ds.size());
  out.loss /= n;
  out.metric /= n;
  return out;
}

FitResult fit(const RunConfig& cfg, ParameterStore& store, const HcrnModel& model,
              const Dataset& train_set, const Dataset& eval_set, std::ostream* jsonl,
              const std::filesystem::path* checkpoint) {
  if (train_set.task() != cfg.task || eval_set.task() != cfg.task) {
    throw ConfigError("dataset task does not match the run config");
  }
  if (train_set.feature_width() != static_cast<std::size_t>(cfg.model.d) ||
      eval_set.feature_width() != static_cast<std::size_t>(cfg.model.d)) {
    throw ConfigError("bundle feature width does not match the model width");
  }
  if (cfg.optim.epochs < 1) throw ConfigError("optimizer.epochs must be at least 1");
  if (cfg.optim.batch < 1) throw ConfigError("optimizer.batch must be at least 1");
  FitResult out;
  out.metric_name = cfg.task == data::TaskKind::count ? "mse" : "accuracy";
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  BatchRunner runner(cfg, store, model);
  const auto batch_size = static_cast<std::size_t>(cfg.optim.batch);
  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    Rng shuffle_rng(stream_seed(cfg.seed, "train.shuffle", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.below(i))]);
    }
    AdamConfig adam;
    adam.lr = epoch_lr(cfg.optim, epoch);
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
      const std::size_t len = std::min(batch_size, order.size() - begin);
      loss_sum += runner.run(train_set, {order.data() + begin, len}, epoch);
      adam_step(store, adam);
    }
    EpochRow row;
    row.epoch = epoch;
    row.lr = adam.lr;
    row.train_loss = loss_sum / static_cast<double>(order.size());
    const EvalSummary ev = evaluate(model, eval_set, cfg.seed);
    row.eval_loss = ev.loss;
    row.eval_metric = ev.metric;
    out.epochs.push_back(row);
    out.final_eval = ev;
    if (jsonl) write_epoch_line(*jsonl, row);
    if (checkpoint) store.save(*checkpoint);
  }
  return out;
}

RunArtifacts run_training(const RunConfig& cfg) {
  validate_run_config(cfg);
  const Dataset train_set(resolve_bundle(cfg, false));
  const Dataset eval_set(resolve_bundle(cfg, true));
  const std::filesystem::path out_dir(cfg.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir.string() + "'");
  RunArtifacts artifacts;
  artifacts.metrics = out_dir / "metrics.jsonl";
  artifacts.checkpoint = out_dir / "checkpoint.bundle";
  std::ofstream os(artifacts.metrics, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + artifacts.metrics.string() + "' for writing");
  json header;
  header["type"] = "header";
  header["started"] = utc_timestamp();
  header["task"] = data::task_kind_name(cfg.task);
  header["metric"] = cfg.task == data::TaskKind::count ? "mse" : "accuracy";
  header["seed"] = cfg.seed;
  header["epochs"] = cfg.optim.epochs;
  header["train_samples"] = train_set.size();
  header["eval_samples"] = eval_set.size();
  os << header.dump() << '\n';
  ParameterStore store(cfg.seed);
  HcrnModel model(store, model_config(cfg));
  artifacts.result = fit(cfg, store, model, train_set, eval_set, &os, &artifacts.checkpoint);
  json footer;
  footer["type"] = "final";
  footer["eval_loss"] = artifacts.result.final_eval.loss;
  footer["eval_metric"] = artifacts.result.final_eval.metric;
  footer["samples"] = artifacts.result.final_eval.samples;
  footer["checkpoint"] = artifacts.checkpoint.filename().string();
  os << footer.dump() << '\n';
  return artifacts;
}

EvalSummary run_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint) {
  validate_run_config(cfg);
  const Dataset eval_set(resolve_bundle(cfg, true));
  ParameterStore store(cfg.seed);
  HcrnModel model(store, model_config(cfg));
  store.load(checkpoint);
  return evaluate(model, eval_set, cfg.seed);
}

}  // namespace crnkit::train

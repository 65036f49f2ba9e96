#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "crnkit/bench.hpp"
#include "crnkit/config.hpp"
#include "crnkit/crn.hpp"
#include "crnkit/data.hpp"
#include "crnkit/errors.hpp"
#include "crnkit/nn.hpp"
#include "crnkit/rng.hpp"
#include "crnkit/train.hpp"

namespace {

using namespace crnkit;

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

// CRNKIT_SEED overrides whatever seed a config file or flag supplied.
std::optional<std::uint64_t> env_seed() {
  const char* raw = std::getenv("CRNKIT_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(raw, &end, 10);
  if (errno != 0 || end == raw || *end != '\0') {
    throw ConfigError("CRNKIT_SEED must be a non-negative integer");
  }
  return static_cast<std::uint64_t>(v);
}

// ---- gradcheck --------------------------------------------------------------

struct GradcheckArgs {
  std::string form = "additive";
  std::vector<int> dims;  // n, K, d
  int t = 2;
  double eps = 1e-5;
  std::uint64_t seed = 1;
  bool corrupt = false;
};

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  double* p = t.data();
  for (std::size_t i = 0; i < t.size(); ++i) p[i] = rng.uniform(-1.0, 1.0);
  return t;
}

int run_gradcheck(const GradcheckArgs& args) {
  if (!(args.eps > 0.0)) throw ConfigError("--eps must be positive");
  int n = 6, K = 1, d = 16;
  if (!args.dims.empty()) {
    if (args.dims.size() != 3) throw ConfigError("--dims takes three values: n,K,d");
    n = args.dims[0];
    K = args.dims[1];
    d = args.dims[2];
  }
  if (n < 2 || K < 1 || d < 1) throw ConfigError("--dims values must satisfy n >= 2, K,d >= 1");
  const HForm form = hform_from_name(args.form);

  ParameterStore store(args.seed);
  const CrnUnit unit(store, "check", CrnConfig{n - 1, args.t, GForm::average_pool, form}, d);
  Rng rng(mix_seed(args.seed, fnv1a64("gradcheck.inputs")));
  std::vector<Tensor> objects;
  objects.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    objects.push_back(random_tensor({static_cast<std::size_t>(K), static_cast<std::size_t>(d)},
                                    rng));
  }
  ConditioningContext ctx;
  ctx.c1 = random_tensor({static_cast<std::size_t>(d)}, rng);
  if (hform_is_dual(form)) ctx.c2 = random_tensor({static_cast<std::size_t>(d)}, rng);
  Rng plan_rng(mix_seed(args.seed, fnv1a64("gradcheck.plan")));
  const SubsetPlan plan = unit.plan(n, plan_rng);

  // Fixed random targets turn the output array into one scalar objective.
  std::vector<Tensor> targets;
  {
    std::vector<Tensor> probe = unit.forward_with_plan(objects, ctx, plan);
    for (const Tensor& out : probe) targets.push_back(random_tensor(out.shape(), rng));
  }
  auto objective = [&]() {
    const std::vector<Tensor> outs = unit.forward_with_plan(objects, ctx, plan);
    Tensor total;
    for (std::size_t i = 0; i < outs.size(); ++i) {
      const Tensor term = mse(outs[i], targets[i]);
      total = total.defined() ? add(total, term) : term;
    }
    return total;
  };

  store.zero_grad();
  {
    Tape tape;
    tape.backward(objective());
  }
  bool first_param = true;
  double worst = 0.0;
  Rng probe_rng(mix_seed(args.seed, fnv1a64("gradcheck.probes")));
  for (auto& [name, param] : store.all()) {
    Tensor& value = param->tensor();
    std::vector<double> analytic(value.size(), 0.0);
    if (value.has_grad()) analytic.assign(value.grad().begin(), value.grad().end());
    if (args.corrupt && first_param) analytic[0] += 5e-2;
    first_param = false;

    std::set<std::size_t> probes;
    if (value.size() <= 24) {
      for (std::size_t i = 0; i < value.size(); ++i) probes.insert(i);
    } else {
      while (probes.size() < 24) probes.insert(probe_rng.below(value.size()));
    }
    double group_worst = 0.0;
    double* raw = value.data();
    for (std::size_t i : probes) {
      const double orig = raw[i];
      raw[i] = orig + args.eps;
      const double hi = objective().value();
      raw[i] = orig - args.eps;
      const double lo = objective().value();
      raw[i] = orig;
      const double fd = (hi - lo) / (2.0 * args.eps);
      const double rel =
          std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), 1.0});
      group_worst = std::max(group_worst, rel);
    }
    std::cout << name << " max_rel=" << group_worst << " probes=" << probes.size() << '\n';
    worst = std::max(worst, group_worst);
  }
  const bool pass = worst < 1e-4;
  std::cout << "gradcheck " << args.form << " max_rel=" << worst << (pass ? " PASS" : " FAIL")
            << '\n';
  return pass ? kExitOk : kExitCheckFailed;
}

// ---- train / eval -----------------------------------------------------------

RunConfig load_config_for_cli(const std::string& path) {
  try {
    RunConfig cfg = load_run_config(path);
    if (const auto seed = env_seed()) cfg.seed = *seed;
    validate_run_config(cfg);
    return cfg;
  } catch (const FormatError& e) {
    // A config the schema rejects is the user's mistake, not an I/O failure.
    throw ConfigError(e.what());
  }
}

int run_train(const std::string& config_path) {
  const RunConfig cfg = load_config_for_cli(config_path);
  const train::RunArtifacts artifacts = train::run_training(cfg);
  nlohmann::json line;
  line["type"] = "final";
  line["metric"] = artifacts.result.metric_name;
  line["eval_loss"] = artifacts.result.final_eval.loss;
  line["eval_metric"] = artifacts.result.final_eval.metric;
  line["samples"] = artifacts.result.final_eval.samples;
  line["metrics_file"] = artifacts.metrics.string();
  line["checkpoint"] = artifacts.checkpoint.string();
  std::cout << line.dump() << '\n';
  return kExitOk;
}

int run_eval(const std::string& config_path, const std::string& checkpoint) {
  const RunConfig cfg = load_config_for_cli(config_path);
  const train::EvalSummary summary = train::run_eval(cfg, checkpoint);
  nlohmann::json line;
  line["type"] = "eval";
  line["metric"] = cfg.task == data::TaskKind::count ? "mse" : "accuracy";
  line["eval_loss"] = summary.loss;
  line["eval_metric"] = summary.metric;
  line["samples"] = summary.samples;
  std::cout << line.dump() << '\n';
  return kExitOk;
}

// ---- bench ------------------------------------------------------------------

struct BenchArgs {
  std::vector<std::string> levels{"2", "3"};
  int N = 24, T = 16, P = 4, Q = 6;
  std::vector<int> F{8};
  int t = 2;
  int repeats = 7;
  std::uint64_t seed = 1;
  std::string out;
};

BenchConfig bench_config(const BenchArgs& args, Levels levels, int F) {
  BenchConfig cfg;
  cfg.levels = levels;
  cfg.N = args.N;
  cfg.T = args.T;
  cfg.P = levels == Levels::three ? args.P : 0;
  cfg.Q = levels == Levels::three ? args.Q : 0;
  cfg.F = F;
  cfg.t = args.t;
  cfg.repeats = args.repeats;
  cfg.seed = args.seed;
  std::ostringstream id;
  id << "L" << levels_name(levels) << "_N" << cfg.N << "_T" << cfg.T;
  if (levels == Levels::three) id << "_P" << cfg.P << "_Q" << cfg.Q;
  id << "_F" << F;
  cfg.config_id = id.str();
  return cfg;
}

int run_bench(BenchArgs args) {
  if (args.repeats < 3) throw ConfigError("--repeats must be at least 3");
  if (args.F.empty()) throw ConfigError("--F needs at least one width");
  bool two = false, three = false;
  for (const std::string& name : args.levels) {
    const Levels v = levels_from_name(name);
    if (v == Levels::two) {
      two = true;
    } else if (v == Levels::three) {
      three = true;
    } else {
      throw ConfigError("bench compares hierarchy depths 2 and 3");
    }
  }
  if (const auto seed = env_seed()) args.seed = *seed;

  std::ofstream file;
  if (!args.out.empty()) {
    file.open(args.out, std::ios::binary | std::ios::trunc);
    if (!file) throw IoError("cannot open '" + args.out + "' for writing");
  }
  std::ostream& csv = args.out.empty() ? std::cout : file;
  write_csv_header(csv);
  std::vector<std::string> summaries;
  for (int F : args.F) {
    if (two && three) {
      const auto [r2, r3] =
          measure_pair(bench_config(args, Levels::two, F), bench_config(args, Levels::three, F));
      write_csv_row(csv, r2);
      write_csv_row(csv, r3);
      summaries.push_back(depth_comparison_line(r2, r3));
    } else {
      write_csv_row(csv, measure(bench_config(args, two ? Levels::two : Levels::three, F)));
    }
  }
  for (const std::string& line : summaries) std::cout << line << '\n';
  return kExitOk;
}

// ---- gen / inspect ------------------------------------------------------------

struct GenArgs {
  std::string task = "count";
  std::string out;
  data::SyntheticSpec spec;
};

int run_gen(GenArgs args) {
  args.spec.kind = data::task_kind_from_name(args.task);
  if (const auto seed = env_seed()) args.spec.seed = *seed;
  const data::FeatureBundle bundle = data::generate(args.spec);
  data::save_feature_bundle(bundle, args.out);
  std::cout << "wrote " << args.out << ": " << data::task_kind_name(args.spec.kind) << ", "
            << data::bundle_samples(bundle) << " samples\n";
  return kExitOk;
}

int run_inspect(const std::string& path) {
  const data::FeatureBundle bundle = data::load_feature_bundle(path);
  std::cout << "task: " << data::task_kind_name(data::bundle_task(bundle)) << '\n';
  std::cout << "samples: " << data::bundle_samples(bundle) << '\n';
  for (const data::ManifestEntry& entry : bundle.entries()) {
    std::cout << entry.name << ' ' << (entry.dtype == data::Dtype::f32 ? "f32" : "f64") << ' ';
    for (std::size_t i = 0; i < entry.shape.size(); ++i) {
      std::cout << (i > 0 ? "x" : "") << entry.shape[i];
    }
    std::cout << " @" << entry.offset << '\n';
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relational video QA toolkit: gradient checks, synthetic training, benchmarks"};
  app.require_subcommand(1);

  GradcheckArgs gradcheck;
  CLI::App* cmd_gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  cmd_gradcheck->add_option("--form", gradcheck.form,
                            "Conditioning form (additive, multiplicative, sequential, dual-*)");
  cmd_gradcheck->add_option("--dims", gradcheck.dims, "Unit dimensions n,K,d")->delimiter(',');
  cmd_gradcheck->add_option("--t", gradcheck.t, "Subsets per relation size");
  cmd_gradcheck->add_option("--eps", gradcheck.eps, "Finite-difference step");
  cmd_gradcheck->add_option("--seed", gradcheck.seed, "Seed");
  cmd_gradcheck->add_flag("--corrupt", gradcheck.corrupt)->group("");

  std::string train_config;
  CLI::App* cmd_train = app.add_subcommand("train", "Train on a bundle or a synthetic task");
  cmd_train->add_option("--config", train_config, "Run config JSON")->required();

  std::string eval_config, eval_checkpoint;
  CLI::App* cmd_eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  cmd_eval->add_option("--config", eval_config, "Run config JSON")->required();
  cmd_eval->add_option("--checkpoint", eval_checkpoint, "Parameter checkpoint")->required();

  BenchArgs bench;
  CLI::App* cmd_bench = app.add_subcommand("bench", "Cost-model benchmark CSV");
  cmd_bench->add_option("--levels", bench.levels, "Hierarchy depths to run (2,3)")
      ->delimiter(',');
  cmd_bench->add_option("--N", bench.N, "Clips");
  cmd_bench->add_option("--T", bench.T, "Frames per clip");
  cmd_bench->add_option("--P", bench.P, "Sub-videos (3-level)");
  cmd_bench->add_option("--Q", bench.Q, "Clips per sub-video (3-level)");
  cmd_bench->add_option("--F", bench.F, "Feature width grid")->delimiter(',');
  cmd_bench->add_option("--t", bench.t, "Subsets per relation size");
  cmd_bench->add_option("--repeats", bench.repeats, "Timing repeats (>= 3)");
  cmd_bench->add_option("--seed", bench.seed, "Seed");
  cmd_bench->add_option("--out", bench.out, "CSV output path (default stdout)");

  GenArgs gen;
  CLI::App* cmd_gen = app.add_subcommand("gen", "Generate a synthetic feature bundle");
  cmd_gen->add_option("--task", gen.task, "count, transition, or longform-choice");
  cmd_gen->add_option("--out", gen.out, "Bundle output path")->required();
  cmd_gen->add_option("--samples", gen.spec.samples, "Sample count");
  cmd_gen->add_option("--N", gen.spec.N, "Clips");
  cmd_gen->add_option("--T", gen.spec.T, "Frames per clip");
  cmd_gen->add_option("--d", gen.spec.d, "Feature width");
  cmd_gen->add_option("--motif-lo", gen.spec.motif_lo, "Count task: smallest motif count");
  cmd_gen->add_option("--motif-hi", gen.spec.motif_hi, "Count task: largest motif count");
  cmd_gen->add_option("--noise", gen.spec.noise, "Noise scale");
  cmd_gen->add_option("--segments", gen.spec.segments, "Choice task: subtitle segments");
  cmd_gen->add_option("--segment-tokens", gen.spec.segment_tokens,
                      "Choice task: tokens per segment");
  cmd_gen->add_option("--choices", gen.spec.choices, "Choice task: answer candidates");
  cmd_gen->add_option("--seed", gen.spec.seed, "Seed");

  std::string inspect_path;
  CLI::App* cmd_inspect = app.add_subcommand("inspect", "Dump a bundle manifest");
  cmd_inspect->add_option("--bundle", inspect_path, "Bundle path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (cmd_gradcheck->parsed()) {
      if (const auto seed = env_seed()) gradcheck.seed = *seed;
      return run_gradcheck(gradcheck);
    }
    if (cmd_train->parsed()) return run_train(train_config);
    if (cmd_eval->parsed()) return run_eval(eval_config, eval_checkpoint);
    if (cmd_bench->parsed()) return run_bench(bench);
    if (cmd_gen->parsed()) return run_gen(gen);
    if (cmd_inspect->parsed()) return run_inspect(inspect_path);
    std::cerr << "no command selected\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const SamplingError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  }
}

#include "crnkit/hcrn.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>

#include "crnkit/errors.hpp"

namespace crnkit {
namespace {

const std::vector<Tensor> kNoMotions;

HForm dualize(HForm f) {
  switch (f) {
    case HForm::additive: return HForm::dual_additive;
    case HForm::multiplicative: return HForm::dual_multiplicative;
    case HForm::sequential: return HForm::dual_sequential;
    default: return f;
  }
}

std::vector<Tensor> unit_apply(const CrnUnit& unit, const std::vector<Tensor>& objects,
                               const ConditioningContext& ctx, Rng& rng, PlanLog* log) {
  if (log && log->replay) {
    if (log->next >= log->plans.size()) {
      throw ContractError("plan replay ran past the recorded log");
    }
    return unit.forward_with_plan(objects, ctx, log->plans[log->next++]);
  }
  SubsetPlan plan = unit.plan(static_cast<int>(objects.size()), rng);
  if (log) log->plans.push_back(plan);
  return unit.forward_with_plan(objects, ctx, plan);
}

// Unconditioned fallback for long-form levels whose question toggle is off:
// g (average) and p survive, h drops out.
std::vector<Tensor> relation_pool(const std::vector<Tensor>& objects, int k_max, int t, Rng& rng,
                                  PlanLog* log) {
  const int n = static_cast<int>(objects.size());
  SubsetPlan plan;
  if (log && log->replay) {
    if (log->next >= log->plans.size()) {
      throw ContractError("plan replay ran past the recorded log");
    }
    plan = log->plans[log->next++];
  } else {
    plan = make_subset_plan(n, k_max, t, rng);
    if (log) log->plans.push_back(plan);
  }
  std::vector<Tensor> out;
  out.reserve(plan.draws.size());
  std::vector<Tensor> pooled, gathered;
  for (const auto& draws : plan.draws) {
    pooled.clear();
    for (const auto& subset : draws) {
      gathered.clear();
      for (int idx : subset) gathered.push_back(objects.at(static_cast<std::size_t>(idx)));
      pooled.push_back(mean_of(gathered));
    }
    out.push_back(mean_of(pooled));
  }
  return out;
}

}  // namespace

Tensor stack_objects(const std::vector<Tensor>& objects) {
  if (objects.empty()) throw ContractError("cannot stack an empty object array");
  return objects.size() == 1 ? objects[0] : concat_rows(objects);
}

std::string levels_name(Levels v) {
  switch (v) {
    case Levels::one: return "1";
    case Levels::one_half: return "1.5";
    case Levels::two: return "2";
    case Levels::three: return "3";
  }
  throw ConfigError("unknown hierarchy depth");
}

Levels levels_from_name(const std::string& name) {
  if (name == "1") return Levels::one;
  if (name == "1.5") return Levels::one_half;
  if (name == "2") return Levels::two;
  if (name == "3") return Levels::three;
  throw ConfigError("unknown hierarchy depth: " + name);
}

std::string answer_kind_name(AnswerKind k) {
  switch (k) {
    case AnswerKind::open_ended: return "open-ended";
    case AnswerKind::multi_choice: return "multi-choice";
    case AnswerKind::count: return "count";
  }
  throw ConfigError("unknown answer kind");
}

AnswerKind answer_kind_from_name(const std::string& name) {
  if (name == "open-ended") return AnswerKind::open_ended;
  if (name == "multi-choice") return AnswerKind::multi_choice;
  if (name == "count") return AnswerKind::count;
  throw ConfigError("unknown answer kind: " + name);
}

int policy_kmax(int policy, int n) {
  if (policy < 0) throw ConfigError("k_max policy must be >= 0");
  if (policy == 1 || n <= 1) return 1;
  if (n == 2) return 2;
  const int full = n - 1;
  return policy == 0 ? full : std::min(policy, full);
}

int policy_out_len(int policy, int n) {
  const int km = policy_kmax(policy, n);
  if (km == 1 || n == 2) return 1;
  return km - 1;
}

int argmax_index(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw ContractError("argmax over an empty score list");
  int best = 0;
  double best_v = scalars.front().value();
  for (std::size_t i = 1; i < scalars.size(); ++i) {
    const double v = scalars[i].value();
    if (v > best_v) {
      best_v = v;
      best = static_cast<int>(i);
    }
  }
  return best;
}

HcrnModel::HcrnModel(ParameterStore& store, ModelConfig config) : cfg_(std::move(config)) {
  if (cfg_.d < 1) throw ConfigError("model width must be positive");
  if (cfg_.t < 1) throw ConfigError("t must be >= 1, got " + std::to_string(cfg_.t));
  if (cfg_.k_max < 0) throw ConfigError("k_max policy must be >= 0");
  dual_ = cfg_.task == AnswerKind::multi_choice;
  if (cfg_.task == AnswerKind::open_ended && cfg_.answer_space < 2) {
    throw ConfigError("open-ended decoding needs an answer space of at least 2");
  }
  if (cfg_.visual.enabled && cfg_.d % 2 != 0) {
    throw ConfigError("visual stream needs an even model width");
  }
  if (cfg_.visual.enabled) {
    build_visual(store);
    build_readout(store);
  }
  if (cfg_.textual.enabled) build_textual(store);
  build_decoder(store);
}

int HcrnModel::kmax_for(int n) const { return policy_kmax(cfg_.k_max, n); }

int HcrnModel::out_len_for(int n) const { return policy_out_len(cfg_.k_max, n); }

void HcrnModel::build_visual(ParameterStore& store) {
  const auto& v = cfg_.visual;
  if (v.N < 1 || v.T < 1) throw ConfigError("visual stream needs N >= 1 and T >= 1");
  const bool relations = cfg_.k_max != 1;
  const HForm qform = dual_ ? dualize(cfg_.question_form) : cfg_.question_form;
  const int d = cfg_.d;

  if (v.long_form) {
    lf_clip_kmax_ = kmax_for(v.T);
    lf_video_kmax_ = kmax_for(v.N);
    if (v.clip_question) {
      lf_clip_unit_.emplace(store, "visual.clip.question",
                            CrnConfig{lf_clip_kmax_, cfg_.t, cfg_.g, qform}, d);
    } else {
      lf_clip_pool_ = true;
    }
    if (v.video_question) {
      lf_video_unit_.emplace(store, "visual.video.question",
                             CrnConfig{lf_video_kmax_, cfg_.t, cfg_.g, qform}, d);
    } else {
      lf_video_pool_ = true;
    }
    return;
  }

  switch (v.levels) {
    case Levels::one:
      if (relations && v.N < 5) {
        throw ConfigError("video stack needs N >= 5: two stacked units shrink the array by 4");
      }
      break;
    case Levels::one_half:
      if (relations && v.T < 5) {
        throw ConfigError("clip stack needs T >= 5: two stacked units shrink the array by 4");
      }
      break;
    case Levels::two:
      if (relations && v.T < 5) {
        throw ConfigError("clip stack needs T >= 5: two stacked units shrink the array by 4");
      }
      if (relations && v.N < 5) {
        throw ConfigError("video stack needs N >= 5: two stacked units shrink the array by 4");
      }
      break;
    case Levels::three:
      if (v.P < 1 || v.Q < 1 || v.N != v.P * v.Q) {
        throw ConfigError("3-level grouping needs N = P*Q");
      }
      if (relations && v.T < 5) {
        throw ConfigError("clip stack needs T >= 5: two stacked units shrink the array by 4");
      }
      if (relations && v.Q < 5) {
        throw ConfigError("sub-video stack needs Q >= 5: two stacked units shrink the array by 4");
      }
      break;
  }

  if (v.levels != Levels::one) {
    int len = v.T;
    if (v.clip_motion) {
      clip_motion_unit_.emplace(store, "visual.clip.motion",
                                CrnConfig{kmax_for(len), cfg_.t, cfg_.g, cfg_.motion_form}, d);
      len = out_len_for(len);
    }
    if (v.clip_question) {
      clip_question_unit_.emplace(store, "visual.clip.question",
                                  CrnConfig{kmax_for(len), cfg_.t, cfg_.g, qform}, d);
    }
  }

  if (v.levels == Levels::one || v.levels == Levels::two) {
    int len = v.N;
    if (v.video_motion) {
      video_motion_unit_.emplace(store, "visual.video.motion",
                                 CrnConfig{kmax_for(len), cfg_.t, cfg_.g, cfg_.motion_form}, d);
      len = out_len_for(len);
    }
    if (v.video_question) {
      video_question_unit_.emplace(store, "visual.video.question",
                                   CrnConfig{kmax_for(len), cfg_.t, cfg_.g, qform}, d);
    }
  }

  if (v.levels == Levels::three) {
    int len = v.Q;
    if (v.video_motion) {
      sub_motion_unit_.emplace(store, "visual.sub.motion",
                               CrnConfig{kmax_for(len), cfg_.t, cfg_.g, cfg_.motion_form}, d);
      len = out_len_for(len);
    }
    if (v.video_question) {
      sub_question_unit_.emplace(store, "visual.sub.question",
                                 CrnConfig{kmax_for(len), cfg_.t, cfg_.g, qform}, d);
    }
    // P < 5 cannot host a shrink-by-4 stack at the top, so it falls back to
    // a single question-conditioned unit.
    int top_len = v.P;
    if (v.P >= 5 && v.video_motion) {
      top_motion_unit_.emplace(store, "visual.top.motion",
                               CrnConfig{kmax_for(top_len), cfg_.t, cfg_.g, cfg_.motion_form}, d);
      top_len = out_len_for(top_len);
    }
    if (v.video_question) {
      top_question_unit_.emplace(store, "visual.top.question",
                                 CrnConfig{kmax_for(top_len), cfg_.t, cfg_.g, qform}, d);
    }
  }

  if (v.video_motion && v.levels != Levels::one_half) {
    motion_lstm_ = make_lstm_params(store, "visual.motion_lstm", static_cast<std::size_t>(d),
                                    static_cast<std::size_t>(d));
  }
}

void HcrnModel::build_textual(ParameterStore& store) {
  const auto& x = cfg_.textual;
  if (x.M < 3) throw ConfigError("textual stream needs M >= 3 segments");
  if (x.max_len < 1) throw ConfigError("passage token cap must be positive");
  const auto d = static_cast<std::size_t>(cfg_.d);
  const std::size_t blocks = dual_ ? 3 : 2;
  tx_Wu_ = store.get_or_create("textual.preselect.Wu", {blocks * d, d}).tensor();
  tx_Wh_ = store.get_or_create("textual.preselect.Wh", {blocks * d, d}).tensor();
  textual_unit_.emplace(store, "textual.crn",
                        CrnConfig{kmax_for(x.M), cfg_.t, cfg_.g, cfg_.textual_form}, cfg_.d);
}

void HcrnModel::build_readout(ParameterStore& store) {
  const auto d = static_cast<std::size_t>(cfg_.d);
  ro_Wo_ = store.get_or_create("readout.Wo", {d, d}).tensor();
  ro_Wq_ = store.get_or_create("readout.Wq", {d, d}).tensor();
  if (dual_) ro_Wa_ = store.get_or_create("readout.Wa", {d, d}).tensor();
  const std::size_t blocks = dual_ ? 3 : 2;
  ro_WI_ = store.get_or_create("readout.WI", {blocks * d, d}).tensor();
  ro_bI_ = store.get_or_create("readout.bI", {d}, Init::zeros).tensor();
  ro_WIp_ = store.get_or_create("readout.WIp", {d, 1}).tensor();
  ro_bIp_ = store.get_or_create("readout.bIp", {1}, Init::zeros).tensor();
}

void HcrnModel::build_decoder(ParameterStore& store) {
  const auto d = static_cast<std::size_t>(cfg_.d);
  dec_Wq_ = store.get_or_create("decoder.Wq", {d, d}).tensor();
  dec_bq_ = store.get_or_create("decoder.bq", {d}, Init::zeros).tensor();
  if (dual_) {
    dec_Wa_ = store.get_or_create("decoder.Wa", {d, d}).tensor();
    dec_ba_ = store.get_or_create("decoder.ba", {d}, Init::zeros).tensor();
  }
  std::size_t blocks = 1;
  if (cfg_.visual.enabled) ++blocks;
  if (cfg_.textual.enabled) ++blocks;
  if (dual_) ++blocks;
  dec_Wo_ = store.get_or_create("decoder.Wo", {blocks * d, d}).tensor();
  dec_bo_ = store.get_or_create("decoder.bo", {d}, Init::zeros).tensor();
  dec_Wy_ = store.get_or_create("decoder.Wy", {d, d}).tensor();
  dec_by_ = store.get_or_create("decoder.by", {d}, Init::zeros).tensor();
  const std::size_t head =
      cfg_.task == AnswerKind::open_ended ? static_cast<std::size_t>(cfg_.answer_space) : 1;
  head_W_ = store.get_or_create("decoder.head.W", {d, head}).tensor();
  head_b_ = store.get_or_create("decoder.head.b", {head}, Init::zeros).tensor();
}

ConditioningContext HcrnModel::qa_ctx(const Tensor& q, const Tensor* a) const {
  if (dual_) {
    if (!a) throw ConfigError("multi-choice conditioning needs an answer choice feature");
    return ConditioningContext{q, *a};
  }
  if (a) throw ConfigError("answer-choice feature supplied to a single-query model");
  return ConditioningContext{q, std::nullopt};
}

const std::vector<Tensor>& HcrnModel::fetch_motions(const SampleInputs& in) const {
  const auto& motions = in.clip_motions();
  if (static_cast<int>(motions.size()) != cfg_.visual.N) {
    throw ConfigError("motion conditioning is enabled: sample must carry N clip motion vectors");
  }
  const auto d = static_cast<std::size_t>(cfg_.d);
  for (const Tensor& m : motions) {
    if (!m.defined() || m.rank() != 1 || m.cols() != d) {
      throw DimensionError("clip motion features must be length-d vectors");
    }
  }
  return motions;
}

std::vector<Tensor> HcrnModel::clip_encode(const Tensor& frames, const Tensor* clip_motion,
                                           const Tensor& q, const Tensor* a, Rng& rng,
                                           PlanLog* log) const {
  if (!cfg_.visual.enabled || cfg_.visual.long_form || cfg_.visual.levels == Levels::one) {
    throw ConfigError("clip_encode is a short-form stage of the 1.5-, 2- and 3-level stacks");
  }
  const auto d = static_cast<std::size_t>(cfg_.d);
  const auto T = static_cast<std::size_t>(cfg_.visual.T);
  if (!frames.defined() || frames.rank() != 2 || frames.rows() != T || frames.cols() != d) {
    throw DimensionError("clip frames must be a T x d tensor");
  }
  std::vector<Tensor> objects;
  objects.reserve(T);
  for (std::size_t r = 0; r < T; ++r) objects.push_back(slice_rows(frames, r, 1));
  if (clip_motion_unit_) {
    if (!clip_motion) throw ConfigError("clip motion conditioning needs a motion feature");
    objects = unit_apply(*clip_motion_unit_, objects,
                         ConditioningContext{*clip_motion, std::nullopt}, rng, log);
  }
  if (clip_question_unit_) {
    objects = unit_apply(*clip_question_unit_, objects, qa_ctx(q, a), rng, log);
  }
  return objects;
}

Tensor HcrnModel::video_motion_summary(const std::vector<Tensor>& clip_motions) const {
  if (!motion_lstm_) throw ConfigError("this configuration has no motion summary");
  if (clip_motions.empty()) throw ContractError("motion summary needs at least one clip motion");
  const auto d = static_cast<std::size_t>(cfg_.d);
  std::vector<Tensor> steps;
  steps.reserve(clip_motions.size());
  for (const Tensor& m : clip_motions) steps.push_back(reshape(m, {1, d}));
  return lstm_last(stack_objects(steps), *motion_lstm_, d);
}

std::vector<Tensor> HcrnModel::video_encode(const std::vector<Tensor>& clip_encodings,
                                            const Tensor* video_motion, const Tensor& q,
                                            const Tensor* a, Rng& rng, PlanLog* log) const {
  if (!cfg_.visual.enabled || cfg_.visual.long_form ||
      (cfg_.visual.levels != Levels::one && cfg_.visual.levels != Levels::two)) {
    throw ConfigError("video_encode is a 1- and 2-level stage");
  }
  if (static_cast<int>(clip_encodings.size()) != cfg_.visual.N) {
    throw DimensionError("video stack expects N input objects");
  }
  std::vector<Tensor> objects = clip_encodings;
  if (video_motion_unit_) {
    if (!video_motion) throw ConfigError("video motion conditioning needs a motion summary");
    objects = unit_apply(*video_motion_unit_, objects,
                         ConditioningContext{*video_motion, std::nullopt}, rng, log);
  }
  if (video_question_unit_) {
    objects = unit_apply(*video_question_unit_, objects, qa_ctx(q, a), rng, log);
  }
  return objects;
}

std::vector<Tensor> HcrnModel::hyperclip_encode(const std::vector<Tensor>& clip_encodings,
                                                const std::vector<Tensor>& clip_motions,
                                                const Tensor& q, const Tensor* a, Rng& rng,
                                                PlanLog* log, std::vector<Tensor>* sub_out) const {
  if (!cfg_.visual.enabled || cfg_.visual.long_form || cfg_.visual.levels != Levels::three) {
    throw ConfigError("hyperclip_encode is the 3-level stage");
  }
  const auto& v = cfg_.visual;
  if (static_cast<int>(clip_encodings.size()) != v.N) {
    throw DimensionError("hyper-clip stage expects N input objects");
  }
  const bool need_motion = sub_motion_unit_.has_value() || top_motion_unit_.has_value();
  if (need_motion && static_cast<int>(clip_motions.size()) != v.N) {
    throw ConfigError("motion conditioning is enabled: hyper-clip stage needs N clip motions");
  }
  const auto q_sz = static_cast<std::size_t>(v.Q);
  std::vector<Tensor> top_objects;
  top_objects.reserve(static_cast<std::size_t>(v.P));
  for (int p = 0; p < v.P; ++p) {
    const std::size_t begin = static_cast<std::size_t>(p) * q_sz;
    std::vector<Tensor> group(clip_encodings.begin() + static_cast<std::ptrdiff_t>(begin),
                              clip_encodings.begin() + static_cast<std::ptrdiff_t>(begin + q_sz));
    if (sub_motion_unit_) {
      const std::vector<Tensor> group_motions(
          clip_motions.begin() + static_cast<std::ptrdiff_t>(begin),
          clip_motions.begin() + static_cast<std::ptrdiff_t>(begin + q_sz));
      const Tensor summary = video_motion_summary(group_motions);
      group = unit_apply(*sub_motion_unit_, group, ConditioningContext{summary, std::nullopt},
                         rng, log);
    }
    if (sub_question_unit_) {
      group = unit_apply(*sub_question_unit_, group, qa_ctx(q, a), rng, log);
    }
    top_objects.push_back(stack_objects(group));
  }
  if (sub_out) *sub_out = top_objects;
  std::vector<Tensor> objects = std::move(top_objects);
  if (top_motion_unit_) {
    const Tensor summary = video_motion_summary(clip_motions);
    objects = unit_apply(*top_motion_unit_, objects, ConditioningContext{summary, std::nullopt},
                         rng, log);
  }
  if (top_question_unit_) {
    objects = unit_apply(*top_question_unit_, objects, qa_ctx(q, a), rng, log);
  }
  return objects;
}

Tensor HcrnModel::attention_readout(const std::vector<Tensor>& objects, const Tensor& q,
                                    const Tensor* a, Tensor* gamma_out) const {
  if (!ro_Wo_.defined()) throw ConfigError("attention readout belongs to the visual stream");
  if (objects.empty()) throw ContractError("attention readout needs a non-empty object array");
  const auto d = static_cast<std::size_t>(cfg_.d);
  for (const Tensor& o : objects) {
    if (!o.defined() || o.rank() != 2 || o.cols() != d) {
      throw DimensionError("readout objects must be K x d tensors");
    }
  }
  const Tensor o_prime = stack_objects(objects);
  const Tensor wo = linear(o_prime, ro_Wo_);
  std::vector<Tensor> blocks{wo, hadamard(wo, linear(q, ro_Wq_))};
  if (dual_) {
    if (!a) throw ConfigError("multi-choice readout needs an answer choice feature");
    blocks.push_back(hadamard(wo, linear(*a, ro_Wa_)));
  } else if (a) {
    throw ConfigError("answer-choice feature supplied to a single-query readout");
  }
  const Tensor fused = elu(linear(concat_cols(blocks), ro_WI_, &ro_bI_));
  const Tensor logits = linear(fused, ro_WIp_, &ro_bIp_);
  const Tensor gamma = softmax(reshape(logits, {o_prime.rows()}), 0);
  if (gamma_out) *gamma_out = gamma;
  return sum_pool(scale_rows(o_prime, gamma), 0);
}

Tensor HcrnModel::visual_forward(const SampleInputs& in, const Tensor* a, Rng& rng,
                                 PlanLog* log) const {
  if (!cfg_.visual.enabled) throw ConfigError("visual stream is disabled in this configuration");
  const auto& v = cfg_.visual;
  const Tensor& q = in.question;
  if (v.long_form) return longform_visual_forward(in, a, rng, log);

  const std::vector<Tensor>* motions = nullptr;
  if (clip_motion_unit_ || video_motion_unit_ || sub_motion_unit_ || top_motion_unit_) {
    motions = &fetch_motions(in);
  }

  if (v.levels == Levels::one) {
    std::vector<Tensor> keys;
    keys.reserve(static_cast<std::size_t>(v.N));
    for (int i = 0; i < v.N; ++i) {
      keys.push_back(
          slice_rows(in.clip_frames[static_cast<std::size_t>(i)],
                     static_cast<std::size_t>(v.T) / 2, 1));
    }
    Tensor summary;
    const Tensor* sp = nullptr;
    if (video_motion_unit_) {
      summary = video_motion_summary(*motions);
      sp = &summary;
    }
    return attention_readout(video_encode(keys, sp, q, a, rng, log), q, a);
  }

  std::vector<Tensor> encodings;
  encodings.reserve(static_cast<std::size_t>(v.N));
  for (int i = 0; i < v.N; ++i) {
    const Tensor* cm = clip_motion_unit_ ? &(*motions)[static_cast<std::size_t>(i)] : nullptr;
    encodings.push_back(
        stack_objects(clip_encode(in.clip_frames[static_cast<std::size_t>(i)], cm, q, a, rng,
                                  log)));
  }

  if (v.levels == Levels::one_half) {
    return attention_readout({mean_of(encodings)}, q, a);
  }
  if (v.levels == Levels::two) {
    Tensor summary;
    const Tensor* sp = nullptr;
    if (video_motion_unit_) {
      summary = video_motion_summary(*motions);
      sp = &summary;
    }
    return attention_readout(video_encode(encodings, sp, q, a, rng, log), q, a);
  }
  return attention_readout(
      hyperclip_encode(encodings, motions ? *motions : kNoMotions, q, a, rng, log), q, a);
}

std::vector<Tensor> HcrnModel::longform_clip_encode(const Tensor& frames, const Tensor& q,
                                                    const Tensor* a, Rng& rng,
                                                    PlanLog* log) const {
  if (!cfg_.visual.enabled || !cfg_.visual.long_form) {
    throw ConfigError("this stage belongs to the long-form visual stream");
  }
  const auto d = static_cast<std::size_t>(cfg_.d);
  const auto T = static_cast<std::size_t>(cfg_.visual.T);
  if (!frames.defined() || frames.rank() != 2 || frames.rows() != T || frames.cols() != d) {
    throw DimensionError("clip frames must be a T x d tensor");
  }
  std::vector<Tensor> objects;
  objects.reserve(T);
  for (std::size_t r = 0; r < T; ++r) objects.push_back(slice_rows(frames, r, 1));
  if (lf_clip_unit_) return unit_apply(*lf_clip_unit_, objects, qa_ctx(q, a), rng, log);
  if (lf_clip_pool_) return relation_pool(objects, lf_clip_kmax_, cfg_.t, rng, log);
  return objects;
}

std::vector<Tensor> HcrnModel::longform_video_encode(const std::vector<Tensor>& clip_objects,
                                                     const Tensor& q, const Tensor* a, Rng& rng,
                                                     PlanLog* log) const {
  if (!cfg_.visual.enabled || !cfg_.visual.long_form) {
    throw ConfigError("this stage belongs to the long-form visual stream");
  }
  if (static_cast<int>(clip_objects.size()) != cfg_.visual.N) {
    throw DimensionError("long-form video stage expects N input objects");
  }
  if (lf_video_unit_) return unit_apply(*lf_video_unit_, clip_objects, qa_ctx(q, a), rng, log);
  if (lf_video_pool_) return relation_pool(clip_objects, lf_video_kmax_, cfg_.t, rng, log);
  return clip_objects;
}

Tensor HcrnModel::longform_visual_forward(const SampleInputs& in, const Tensor* a, Rng& rng,
                                          PlanLog* log) const {
  const auto& v = cfg_.visual;
  const Tensor& q = in.question;
  std::vector<Tensor> video_objects;
  video_objects.reserve(static_cast<std::size_t>(v.N));
  for (int i = 0; i < v.N; ++i) {
    video_objects.push_back(stack_objects(
        longform_clip_encode(in.clip_frames[static_cast<std::size_t>(i)], q, a, rng, log)));
  }
  return attention_readout(longform_video_encode(video_objects, q, a, rng, log), q, a);
}

Tensor HcrnModel::textual_preselect(const Tensor& U, const Tensor& q, const Tensor* a,
                                    PreselectLevel level) const {
  if (!tx_Wu_.defined()) throw ConfigError("textual stream is disabled in this configuration");
  const auto d = static_cast<std::size_t>(cfg_.d);
  if (!U.defined() || U.rank() != 2 || U.cols() != d) {
    throw DimensionError("pre-selection input must be a rows x d tensor");
  }
  if (!q.defined() || q.rank() != 1 || q.cols() != d) {
    throw DimensionError("question feature must be a length-d vector");
  }
  std::vector<Tensor> blocks{U, hadamard(U, q)};
  if (dual_) {
    if (!a) throw ConfigError("multi-choice pre-selection needs an answer choice feature");
    blocks.push_back(hadamard(U, *a));
  } else if (a) {
    throw ConfigError("answer-choice feature supplied to a single-query pre-selection");
  }
  return linear(concat_cols(blocks), level == PreselectLevel::segment ? tx_Wu_ : tx_Wh_);
}

Tensor HcrnModel::textual_stream_forward(const SampleInputs& in, const Tensor* a, Rng& rng,
                                         PlanLog* log) const {
  if (!textual_unit_) throw ConfigError("textual stream is disabled in this configuration");
  const auto& x = cfg_.textual;
  const auto d = static_cast<std::size_t>(cfg_.d);
  if (static_cast<int>(in.segments.size()) != x.M) {
    throw DimensionError("sample must carry M segment tensors");
  }
  for (const Tensor& seg : in.segments) {
    if (!seg.defined() || seg.rank() != 2 || seg.cols() != d ||
        seg.shape() != in.segments.front().shape()) {
      throw DimensionError("segments must share one rows x d shape");
    }
  }
  if (!in.passage.defined() || in.passage.rank() != 2 || in.passage.cols() != d ||
      in.passage.rows() < 1) {
    throw DimensionError("passage must be a rows x d tensor");
  }
  const Tensor& q = in.question;
  Tensor passage = in.passage;
  if (passage.rows() > static_cast<std::size_t>(x.max_len)) {
    passage = slice_rows(passage, 0, static_cast<std::size_t>(x.max_len));
  }
  std::vector<Tensor> segments;
  segments.reserve(in.segments.size());
  for (const Tensor& seg : in.segments) {
    segments.push_back(textual_preselect(seg, q, a, PreselectLevel::segment));
  }
  const Tensor modulated_passage = textual_preselect(passage, q, a, PreselectLevel::passage);
  const Tensor condition = max_pool(modulated_passage, 0);
  const std::vector<Tensor> outputs = unit_apply(
      *textual_unit_, segments, ConditioningContext{condition, std::nullopt}, rng, log);
  return max_pool(stack_objects(outputs), 0);
}

Tensor HcrnModel::decode_joint(const Tensor* o_v, const Tensor* o_t, const Tensor& q,
                               const Tensor* a) const {
  std::vector<Tensor> blocks;
  if (cfg_.visual.enabled) {
    if (!o_v) throw ConfigError("decoder expects the visual stream output");
    blocks.push_back(*o_v);
  } else if (o_v) {
    throw ConfigError("visual stream is disabled in this configuration");
  }
  if (cfg_.textual.enabled) {
    if (!o_t) throw ConfigError("decoder expects the textual stream output");
    blocks.push_back(*o_t);
  } else if (o_t) {
    throw ConfigError("textual stream is disabled in this configuration");
  }
  blocks.push_back(linear(q, dec_Wq_, &dec_bq_));
  if (dual_) {
    if (!a) throw ConfigError("multi-choice decoding needs an answer choice feature");
    blocks.push_back(linear(*a, dec_Wa_, &dec_ba_));
  } else if (a) {
    throw ConfigError("answer-choice feature supplied to a single-query decoder");
  }
  const Tensor y = elu(linear(concat_cols(blocks), dec_Wo_, &dec_bo_));
  return elu(linear(y, dec_Wy_, &dec_by_));
}

Tensor HcrnModel::open_ended_probs(const Tensor& y_prime) const {
  if (cfg_.task != AnswerKind::open_ended) {
    throw ConfigError("probability decoding is the open-ended head");
  }
  return softmax(linear(y_prime, head_W_, &head_b_), 0);
}

Tensor HcrnModel::score_head(const Tensor& y_prime) const {
  if (cfg_.task == AnswerKind::open_ended) {
    throw ConfigError("score decoding is the multi-choice and count head");
  }
  return linear(y_prime, head_W_, &head_b_);
}

void HcrnModel::check_sample(const SampleInputs& in) const {
  const auto d = static_cast<std::size_t>(cfg_.d);
  if (!in.question.defined() || in.question.rank() != 1 || in.question.cols() != d) {
    throw DimensionError("question feature must be a length-d vector");
  }
  if (cfg_.visual.enabled) {
    if (static_cast<int>(in.clip_frames.size()) != cfg_.visual.N) {
      throw DimensionError("sample must carry N clip frame tensors");
    }
    const auto T = static_cast<std::size_t>(cfg_.visual.T);
    for (const Tensor& f : in.clip_frames) {
      if (!f.defined() || f.rank() != 2 || f.rows() != T || f.cols() != d) {
        throw DimensionError("clip frames must be T x d tensors");
      }
    }
  }
  if (cfg_.task == AnswerKind::multi_choice) {
    if (in.choices.size() < 2) throw ConfigError("multi-choice needs at least 2 encoded choices");
    for (const Tensor& c : in.choices) {
      if (!c.defined() || c.rank() != 1 || c.cols() != d) {
        throw DimensionError("choice features must be length-d vectors");
      }
    }
  }
}

Prediction HcrnModel::forward(const SampleInputs& in, Rng& rng) const {
  check_sample(in);
  const Tensor& q = in.question;
  Prediction pred;
  if (cfg_.task == AnswerKind::multi_choice) {
    PlanLog log;
    pred.scores.reserve(in.choices.size());
    for (std::size_t i = 0; i < in.choices.size(); ++i) {
      log.replay = i > 0;
      log.next = 0;
      const Tensor& a = in.choices[i];
      std::optional<Tensor> o_v, o_t;
      if (cfg_.visual.enabled) o_v = visual_forward(in, &a, rng, &log);
      if (cfg_.textual.enabled) o_t = textual_stream_forward(in, &a, rng, &log);
      const Tensor y_prime =
          decode_joint(o_v ? &*o_v : nullptr, o_t ? &*o_t : nullptr, q, &a);
      pred.scores.push_back(score_head(y_prime));
    }
    pred.answer = argmax_index(pred.scores);
    return pred;
  }
  std::optional<Tensor> o_v, o_t;
  if (cfg_.visual.enabled) o_v = visual_forward(in, nullptr, rng, nullptr);
  if (cfg_.textual.enabled) o_t = textual_stream_forward(in, nullptr, rng, nullptr);
  const Tensor y_prime = decode_joint(o_v ? &*o_v : nullptr, o_t ? &*o_t : nullptr, q, nullptr);
  if (cfg_.task == AnswerKind::open_ended) {
    pred.probs = open_ended_probs(y_prime);
    const double* p = pred.probs.data();
    int best = 0;
    for (std::size_t i = 1; i < pred.probs.size(); ++i) {
      if (p[i] > p[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    pred.answer = best;
  } else {
    pred.score = score_head(y_prime);
    pred.answer = static_cast<int>(std::llround(pred.score.value()));
  }
  return pred;
}

Tensor HcrnModel::loss(const Prediction& pred, int label) const {
  switch (cfg_.task) {
    case AnswerKind::open_ended: {
      if (label < 0 || label >= cfg_.answer_space) {
        throw IndexError("label outside the answer space");
      }
      return cross_entropy(pred.probs, static_cast<std::size_t>(label));
    }
    case AnswerKind::count: {
      if (!pred.score.defined()) throw ContractError("count loss needs the regression score");
      return mse(pred.score, Tensor::scalar(static_cast<double>(label)));
    }
    case AnswerKind::multi_choice: {
      if (label < 0 || static_cast<std::size_t>(label) >= pred.scores.size()) {
        throw IndexError("label outside the choice list");
      }
      const bool long_form = !cfg_.visual.enabled || cfg_.visual.long_form;
      if (long_form) {
        const Tensor stacked = concat_cols(pred.scores);
        return cross_entropy(softmax(stacked, 0), static_cast<std::size_t>(label));
      }
      Tensor total;
      for (std::size_t i = 0; i < pred.scores.size(); ++i) {
        if (i == static_cast<std::size_t>(label)) continue;
        const Tensor term =
            hinge_pair(pred.scores[static_cast<std::size_t>(label)], pred.scores[i]);
        total = total.defined() ? add(total, term) : term;
      }
      return total;
    }
  }
  throw ConfigError("unknown answer kind");
}

}  // namespace crnkit

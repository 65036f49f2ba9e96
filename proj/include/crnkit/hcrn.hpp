#pragma once

#include <optional>
#include <string>
#include <vector>

#include "crnkit/crn.hpp"
#include "crnkit/nn.hpp"
#include "crnkit/rng.hpp"
#include "crnkit/tensor.hpp"

namespace crnkit {

enum class Levels { one, one_half, two, three };

std::string levels_name(Levels v);
Levels levels_from_name(const std::string& name);  // "1", "1.5", "2", "3"

enum class AnswerKind { open_ended, multi_choice, count };

std::string answer_kind_name(AnswerKind k);
AnswerKind answer_kind_from_name(const std::string& name);

struct VisualStreamConfig {
  bool enabled = true;
  Levels levels = Levels::two;
  int N = 8;   // clips
  int T = 16;  // frames per clip
  int P = 0;   // hyper-clip grouping, 3-level only, N = P*Q
  int Q = 0;
  bool long_form = false;
  // Per-level conditioning toggles. Short form: a disabled toggle removes
  // that unit from the stack. Long form: disabling the question toggle
  // degrades that level to unconditioned relation pooling.
  bool clip_motion = true;
  bool clip_question = true;
  bool video_motion = true;
  bool video_question = true;
};

struct TextualStreamConfig {
  bool enabled = false;
  int M = 6;          // overlapping subtitle segments
  int max_len = 256;  // passage token cap; longer passages are truncated
};

struct ModelConfig {
  AnswerKind task = AnswerKind::open_ended;
  int answer_space = 2;  // open-ended class count
  int d = 64;
  // 0 = every unit uses k_max = n-1 for its own input length; 1 = no-relation
  // mode everywhere; >= 2 caps each unit at min(k_max, n-1).
  int k_max = 0;
  int t = 2;
  GForm g = GForm::average_pool;
  HForm motion_form = HForm::additive;
  HForm question_form = HForm::multiplicative;
  HForm textual_form = HForm::multiplicative;
  VisualStreamConfig visual;
  TextualStreamConfig textual;
};

// Per-unit subset ceiling under the model-wide k_max policy (see ModelConfig),
// and the unit's output array length at that ceiling.
int policy_kmax(int policy, int n);
int policy_out_len(int policy, int n);

// Stack an encoded object array into one matrix (row-concatenation; a single
// object passes through unchanged).
Tensor stack_objects(const std::vector<Tensor>& objects);

// One sample's encoded features. Motion features sit behind a counting
// accessor so tests can assert which paths touched them.
class SampleInputs {
 public:
  std::vector<Tensor> clip_frames;  // N tensors, each T x d
  Tensor question;                  // d
  std::vector<Tensor> choices;      // A tensors of width d (multi-choice)
  std::vector<Tensor> segments;     // M tensors, each T_s x d
  Tensor passage;                   // S x d

  void set_clip_motions(std::vector<Tensor> motions) { clip_motions_ = std::move(motions); }
  bool has_motion() const { return !clip_motions_.empty(); }
  const std::vector<Tensor>& clip_motions() const {
    ++motion_reads_;
    return clip_motions_;
  }
  int motion_reads() const { return motion_reads_; }
  void reset_motion_reads() { motion_reads_ = 0; }

 private:
  std::vector<Tensor> clip_motions_;
  mutable int motion_reads_ = 0;
};

struct Prediction {
  Tensor probs;                // open-ended: probability vector over the answer space
  std::vector<Tensor> scores;  // multi-choice: one scalar score per choice
  Tensor score;                // count: raw regression score
  int answer = 0;              // argmax class / argmax choice / rounded count
};

// Records every subset plan drawn during one forward pass so further passes
// (the remaining answer choices) replay identical subsets.
struct PlanLog {
  bool replay = false;
  std::size_t next = 0;
  std::vector<SubsetPlan> plans;
};

enum class PreselectLevel { segment, passage };

class HcrnModel {
 public:
  HcrnModel(ParameterStore& store, ModelConfig config);

  const ModelConfig& config() const { return cfg_; }

  Prediction forward(const SampleInputs& in, Rng& rng) const;
  Tensor loss(const Prediction& pred, int label) const;

  // ---- visual stream stages (public for white-box tests) ----
  std::vector<Tensor> clip_encode(const Tensor& frames, const Tensor* clip_motion,
                                  const Tensor& q, const Tensor* a, Rng& rng,
                                  PlanLog* log = nullptr) const;
  Tensor video_motion_summary(const std::vector<Tensor>& clip_motions) const;
  std::vector<Tensor> video_encode(const std::vector<Tensor>& clip_encodings,
                                   const Tensor* video_motion, const Tensor& q, const Tensor* a,
                                   Rng& rng, PlanLog* log = nullptr) const;
  // 3-level path; sub_out, when given, receives the P stacked sub-video objects.
  std::vector<Tensor> hyperclip_encode(const std::vector<Tensor>& clip_encodings,
                                       const std::vector<Tensor>& clip_motions, const Tensor& q,
                                       const Tensor* a, Rng& rng, PlanLog* log = nullptr,
                                       std::vector<Tensor>* sub_out = nullptr) const;
  Tensor attention_readout(const std::vector<Tensor>& objects, const Tensor& q, const Tensor* a,
                           Tensor* gamma_out = nullptr) const;
  Tensor visual_forward(const SampleInputs& in, const Tensor* a, Rng& rng,
                        PlanLog* log = nullptr) const;

  // ---- long-form visual stages ----
  std::vector<Tensor> longform_clip_encode(const Tensor& frames, const Tensor& q, const Tensor* a,
                                           Rng& rng, PlanLog* log = nullptr) const;
  std::vector<Tensor> longform_video_encode(const std::vector<Tensor>& clip_objects,
                                            const Tensor& q, const Tensor* a, Rng& rng,
                                            PlanLog* log = nullptr) const;
  Tensor longform_visual_forward(const SampleInputs& in, const Tensor* a, Rng& rng,
                                 PlanLog* log = nullptr) const;

  // ---- textual stream stages ----
  Tensor textual_preselect(const Tensor& U, const Tensor& q, const Tensor* a,
                           PreselectLevel level) const;
  Tensor textual_stream_forward(const SampleInputs& in, const Tensor* a, Rng& rng,
                                PlanLog* log = nullptr) const;

  // ---- decoder stages ----
  Tensor decode_joint(const Tensor* o_v, const Tensor* o_t, const Tensor& q,
                      const Tensor* a) const;              // y' of the joint embedding
  Tensor open_ended_probs(const Tensor& y_prime) const;    // softmax over the answer space
  Tensor score_head(const Tensor& y_prime) const;          // scalar score (choice / count)

 private:
  void build_visual(ParameterStore& store);
  void build_textual(ParameterStore& store);
  void build_readout(ParameterStore& store);
  void build_decoder(ParameterStore& store);
  int kmax_for(int n) const;
  int out_len_for(int n) const;  // array length after one unit at this n
  ConditioningContext qa_ctx(const Tensor& q, const Tensor* a) const;
  void check_sample(const SampleInputs& in) const;
  const std::vector<Tensor>& fetch_motions(const SampleInputs& in) const;

  ModelConfig cfg_;
  bool dual_ = false;  // multi-choice: question conditioning carries (q, a)

  std::optional<CrnUnit> clip_motion_unit_, clip_question_unit_;
  std::optional<CrnUnit> video_motion_unit_, video_question_unit_;
  std::optional<CrnUnit> sub_motion_unit_, sub_question_unit_;
  std::optional<CrnUnit> top_motion_unit_, top_question_unit_;
  std::optional<CrnUnit> lf_clip_unit_, lf_video_unit_;
  bool lf_clip_pool_ = false, lf_video_pool_ = false;
  int lf_clip_kmax_ = 0, lf_video_kmax_ = 0;
  std::optional<CrnUnit> textual_unit_;
  std::optional<LstmParams> motion_lstm_;

  Tensor ro_Wo_, ro_Wq_, ro_Wa_, ro_WI_, ro_bI_, ro_WIp_, ro_bIp_;
  Tensor tx_Wu_, tx_Wh_;
  Tensor dec_Wq_, dec_bq_, dec_Wa_, dec_ba_, dec_Wo_, dec_bo_, dec_Wy_, dec_by_;
  Tensor head_W_, head_b_;
};

// Largest element's index; ties resolve to the lowest index.
int argmax_index(const std::vector<Tensor>& scalars);

}  // namespace crnkit

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "crnkit/rng.hpp"
#include "crnkit/tensor.hpp"

namespace crnkit {

enum class Init { glorot, zeros };

struct AdamState {
  std::vector<double> m, v;
  long long step = 0;
};

class Parameter {
 public:
  Parameter(std::string name, Tensor tensor) : name_(std::move(name)), tensor_(std::move(tensor)) {
    tensor_.set_requires_grad(true);
  }

  const std::string& name() const { return name_; }
  Tensor& tensor() { return tensor_; }
  const Tensor& tensor() const { return tensor_; }
  AdamState& adam() { return adam_; }

 private:
  std::string name_;
  Tensor tensor_;
  AdamState adam_;
};

// Named parameter registry. Creation is idempotent per name; values are
// initialized from a stream derived from (store seed, name) so that the set
// of sibling parameters never shifts an existing parameter's init.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t init_seed) : init_seed_(init_seed) {}

  Parameter& get_or_create(const std::string& name, Shape shape, Init init = Init::glorot);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  std::uint64_t init_seed() const { return init_seed_; }

  // Ordered by name, so iteration order is deterministic.
  std::map<std::string, std::shared_ptr<Parameter>>& all() { return params_; }
  const std::map<std::string, std::shared_ptr<Parameter>>& all() const { return params_; }

  void zero_grad();

  // A store whose parameters share this store's value buffers but own their
  // gradient and moment state. Workers accumulate into mirrors; the owner
  // sums them back before stepping.
  ParameterStore mirror() const;
  void accumulate_grads_from(const ParameterStore& worker);

  void save(const std::filesystem::path& path) const;
  // Loads values into existing parameters by name (shapes must match).
  void load(const std::filesystem::path& path);

 private:
  std::uint64_t init_seed_;
  std::map<std::string, std::shared_ptr<Parameter>> params_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One update over every parameter with a gradient present. Parameters whose
// gradient buffer is absent are skipped entirely (moments untouched).
void adam_step(ParameterStore& store, const AdamConfig& cfg);

// ---- recurrent cells -------------------------------------------------------

// Gate layout along the packed width: input, forget, cell, output.
struct LstmParams {
  Tensor Wx;  // in x 4h
  Tensor Wh;  // h x 4h
  Tensor b;   // 4h
};

LstmParams make_lstm_params(ParameterStore& store, const std::string& prefix, std::size_t in,
                            std::size_t hidden);

struct LstmState {
  Tensor h, c;
};

LstmState lstm_cell(const Tensor& x, const LstmState& state, const LstmParams& p);

// Final hidden state after consuming seq rows left to right from zero state.
Tensor lstm_last(const Tensor& seq, const LstmParams& p, std::size_t hidden);

struct BilstmParams {
  LstmParams fwd, bwd;
  std::size_t hidden = 0;  // per direction; output width is 2*hidden
};

BilstmParams make_bilstm_params(ParameterStore& store, const std::string& prefix, std::size_t in,
                                std::size_t out_width);

struct BilstmOut {
  Tensor hiddens;      // T x out_width
  Tensor final_state;  // out_width: [fwd last, bwd last]
};

BilstmOut bilstm_encode(const Tensor& seq, const BilstmParams& p);

}  // namespace crnkit

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "duet/errors.hpp"
#include "duet/rng.hpp"
#include "duet/tokens.hpp"

namespace duet::router {

// Shape of the divergence router. Three inputs — the drafting model's top-k
// logit values (descending), its hidden state, and the embedding of its
// predicted token — are each projected to `width`, concatenated, fused back
// to `width`, then passed through residual feed-forward blocks
// (norm -> expand -> GELU -> contract, residual add) into a scalar
// sigmoid head.
struct RouterConfig {
  int topk = 100;
  int hidden_dim_in = 1;
  int embed_dim = 1;
  int width = 1024;
  int blocks = 6;
  int expansion = 4;
  double dropout = 0.1;

  void validate() const;
  std::size_t param_count() const;
  bool operator==(const RouterConfig&) const = default;
};

// Row-major dense matrix; rows index outputs for weight matrices.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }
  bool operator==(const Tensor&) const = default;
};

struct Linear {
  Tensor w;  // out x in
  Tensor b;  // 1 x out
};

struct Norm {
  Tensor gamma;  // 1 x dim
  Tensor beta;   // 1 x dim
};

struct Block {
  Norm norm;
  Linear fc1;  // width -> expansion*width
  Linear fc2;  // expansion*width -> width
};

// All router parameters plus the calibrated routing threshold.
struct RouterWeights {
  RouterConfig cfg;
  Linear proj_logits, proj_hidden, proj_embed;
  Linear fusion;  // 3*width -> width
  std::vector<Block> blocks;
  Norm final_norm;
  Linear head;  // width -> 1
  double p_th = 0.5;

  // All-zero parameters (forward gives exactly sigmoid(0) = 0.5).
  static RouterWeights zeros(const RouterConfig& cfg);
  // normal(0, 0.02) linear weights, zero biases, identity norms.
  static RouterWeights init(const RouterConfig& cfg, std::uint64_t seed);

  // Every parameter tensor with a stable name, in a fixed order shared by
  // the serializer, the optimizer state, and the gradient checks.
  std::vector<std::pair<std::string, Tensor*>> tensors();
  std::vector<std::pair<std::string, const Tensor*>> tensors() const;

  bool operator==(const RouterWeights& o) const;
};

// One example: top-k logit values sorted descending (values only — token
// identity enters through the embedding), hidden state, token embedding.
struct Sample {
  std::vector<double> logits;
  std::vector<double> hidden;
  std::vector<double> embed;
  bool divergent = false;
};

// Evaluation-mode forward; deterministic, output strictly in (0,1).
double forward(const RouterWeights& w, const Sample& s);
// Pre-sigmoid score, evaluation mode.
double forward_logit(const RouterWeights& w, const Sample& s);

// Gradients mirror the weights tensor-for-tensor (p_th has no gradient).
using Grads = RouterWeights;
Grads zero_grads(const RouterConfig& cfg);

// Forward pass that records activations (and dropout masks when training) so
// backward() can produce exact parameter and input gradients.
class Tape {
 public:
  // rng is only consulted when train && cfg.dropout > 0.
  Tape(const RouterWeights& w, bool train, Rng* rng);
  double run(const Sample& s);  // returns the pre-sigmoid logit
  void backward(double dlogit, Grads& g) const;

 private:
  const RouterWeights& w_;
  bool train_ = false;
  Rng* rng_ = nullptr;
  const Sample* sample_ = nullptr;

  struct BlockCache {
    std::vector<double> input;  // t_i
    std::vector<double> xhat;   // normalized input
    double inv_std = 0.0;
    std::vector<double> a1;     // fc1 pre-activation
    std::vector<double> g1;     // GELU(a1) after dropout
    std::vector<double> m1;     // dropout scale per unit (1/keep or 0)
    std::vector<double> a2;     // fc2 output after dropout
    std::vector<double> m2;
  };
  std::vector<double> xl_, xh_, xe_;  // projection outputs
  std::vector<double> trunk_in_;      // fusion output t_0
  std::vector<BlockCache> blocks_;
  std::vector<double> final_xhat_;
  double final_inv_std_ = 0.0;
  std::vector<double> final_out_;  // input to the head
};

// Inverse-frequency class weights: total / (2 * class_count), with 1.0 for a
// class that never occurs.
struct ClassWeights {
  double pos = 1.0;
  double neg = 1.0;
  static ClassWeights from_counts(std::size_t n_pos, std::size_t n_neg);
};

// Mean weighted binary cross-entropy over the batch and exact parameter
// gradients. Training mode applies dropout (rng required then).
std::pair<double, Grads> loss_and_grads(const RouterWeights& w,
                                        std::span<const Sample> batch,
                                        ClassWeights cw, bool train = false,
                                        Rng* rng = nullptr);
// Loss only, evaluation mode.
double loss(const RouterWeights& w, std::span<const Sample> batch,
            ClassWeights cw);

}  // namespace duet::router

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "duet/labeling.hpp"
#include "duet/router_net.hpp"
#include "duet/tokens.hpp"

namespace duet::router {

// Optimizer and loop settings. AdamW-style decoupled weight decay is applied
// to weight matrices only (biases and norm parameters are not decayed).
struct TrainConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 5e-4;
  int batch_size = 1024;
  int max_epochs = 50;  // 0 = no-op training, returns the initialized net
  int patience = 10;
  std::uint64_t seed = 0;
  bool quantize_f32 = false;  // round final weights through 32-bit floats

  void validate() const;
};

struct EpochStats {
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_recall = 0.0;  // at matched positive rate
};

struct TrainResult {
  RouterWeights weights;  // best validation epoch (or the init when 0 epochs)
  int best_epoch = -1;    // 0-based; -1 when no epoch ran
  std::vector<EpochStats> history;
};

// Turn labeled records into router samples. The embedding input is the
// drafting model's embedding row for its predicted token. Records without a
// hidden state (remote backends do not expose one) are skipped.
std::vector<Sample> make_samples(const label::LabelDataset& ds,
                                 const EmbeddingTable& embeddings,
                                 const RouterConfig& cfg);

// Binary labels as bytes (std::vector<bool> cannot back a span).
using Labels = std::vector<std::uint8_t>;

// Fraction of positives ranked inside the top-m scores, where m is the number
// of positives — recall when the predicted-positive rate matches the label
// rate. Defined as 1 when there are no positives.
double recall_at_matched_rate(std::span<const double> probs,
                              std::span<const std::uint8_t> labels);

// Rank-based ROC-AUC (Mann-Whitney; ties get average rank). 0.5 when a class
// is missing.
double roc_auc(std::span<const double> scores,
               std::span<const std::uint8_t> labels);

// Mini-batch AdamW with per-epoch validation, early stopping (no improvement
// for `patience` epochs), and best-epoch selection by highest matched-rate
// recall, ties broken by lower validation loss.
TrainResult train(const label::LabelDataset& train_ds,
                  const label::LabelDataset& val_ds, const TrainConfig& tc,
                  const RouterConfig& rc, const EmbeddingTable& embeddings);

enum class TargetKind { usage_max, params_max, recall_min };

struct CalibrationTarget {
  TargetKind kind = TargetKind::recall_min;
  double value = 0.95;
  // Model sizes (billions) enter only the params_max target.
  double slm_params_b = 0.0;
  double llm_params_b = 0.0;
  double router_params_b = 0.0;
};

struct SweepPoint {
  double threshold = 0.0;
  double usage = 0.0;    // fraction of samples routed above threshold
  double recall = 0.0;   // fraction of positives routed above threshold
  double params_b = 0.0; // slm + router + usage * llm
};

struct Calibration {
  double threshold = 1.0;
  double usage = 0.0;
  double recall = 0.0;
  double params_b = 0.0;
  std::vector<SweepPoint> sweep;  // the full grid, threshold ascending
};

// One forward pass per sample, then a 101-point grid sweep (0.00 .. 1.00).
// Returns the largest grid threshold meeting the target. Budget-style targets
// (usage, params) are loosest at high thresholds, so they degenerate to the
// top of the grid; the sweep output is what picks a useful operating point
// for them. Throws when no grid point qualifies, reporting the closest one.
Calibration calibrate_threshold(const RouterWeights& w,
                                const label::LabelDataset& val,
                                const CalibrationTarget& target,
                                const EmbeddingTable& embeddings);

// Same sweep over precomputed probabilities (also used by tests).
Calibration calibrate_probs(std::span<const double> probs,
                            std::span<const std::uint8_t> labels,
                            const CalibrationTarget& target);

std::string target_to_string(const CalibrationTarget& t);
// Parses "usage=0.2", "params=5.5", "recall=0.95".
CalibrationTarget target_from_string(const std::string& s);

// Binary weight container: magic + version + config + p_th + named tensors
// (row-major 32-bit floats, little-endian, shape-prefixed).
void save_weights(const RouterWeights& w, std::ostream& os);
void save_weights_file(const RouterWeights& w,
                       const std::filesystem::path& path);
RouterWeights load_weights(std::istream& is);
RouterWeights load_weights_file(const std::filesystem::path& path);

}  // namespace duet::router

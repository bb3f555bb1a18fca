#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dfx/nn.hpp"
#include "dfx/optim.hpp"

namespace dfx {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  std::string model = "mlp";          // mlp | cnn
  std::string dataset = "synthetic";  // synthetic | idx
  std::string data_dir;               // idx: directory holding the four MNIST-named files
  Index hidden = 256;
  int bit_width = 8;
  RoundingMode forward_rounding = RoundingMode::kStochastic;
  RoundingMode backward_rounding = RoundingMode::kStochastic;
  RoundingMode update_rounding = RoundingMode::kStochastic;
  std::uint64_t seed = 1;
  int epochs = 5;
  Index batch_size = 64;
  float lr = 0.05f;
  std::vector<int> lr_drops;  // epochs at which lr is multiplied by 0.1
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  std::filesystem::path out_dir = "dfx_out";
  bool paired = false;
  bool checkpoint = true;

  // Synthetic Gaussian blobs.
  Index synthetic_classes = 10;
  Index synthetic_train = 6000;
  Index synthetic_test = 2000;
  float synthetic_margin = 1.0f;  // distance scale between class centers
  float synthetic_noise = 1.0f;   // per-feature standard deviation

  // Divergence detection.
  double divergence_loss = 50.0;
  int divergence_patience = 20;
};

/// Parses flat `key = value` text ('#' starts a comment). Unknown keys and
/// invalid values throw ConfigInvalid.
RunConfig parse_run_config(std::istream& is);
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies DFX_SEED and DFX_OUT if set.
void apply_environment(RunConfig& config);

/// Throws ConfigInvalid on the first invalid field.
void validate(const RunConfig& config);

/// Every field as `key = value`, in a fixed order; parse_run_config inverts it.
std::string format_run_config(const RunConfig& config);

ModelConfig model_config(const RunConfig& config, const Shape& sample_shape, Index classes);

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct Dataset {
  FloatTensor images;  // [N, sample...]
  std::vector<int> labels;
  Index classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
  /// Rows `indices` stacked into a batch.
  FloatTensor gather(std::span<const Index> indices) const;
};

struct DataSplit {
  Dataset train;
  Dataset test;
};

/// Reads an IDX image/label pair (raw or gzip). Images become [N,rows,cols]
/// floats in [0,1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Gaussian blobs: class centers drawn once from the seed, samples scattered
/// around them with isotropic noise.
DataSplit make_synthetic(const RunConfig& config, const Shape& sample_shape);

/// Dataset named by the config, reshaped for the model preset.
DataSplit load_dataset(const RunConfig& config);

/// Fisher-Yates permutation of [0,n) keyed by (seed, epoch).
std::vector<Index> epoch_order(Index n, std::uint64_t seed, int epoch);

/// FNV-1a digest of a batch-order sequence.
std::uint64_t order_digest(std::span<const Index> order);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kOptimizerStateVersion = 1;

struct Checkpoint {
  RunConfig config;
  OptState state;
  NormStats stats;
};

/// Writes manifest.txt (key = value) and state.dfxc (tagged DFXT blobs).
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct ArmSummary {
  std::string arm;
  std::vector<double> epoch_loss;      // mean training loss per epoch
  std::vector<double> epoch_accuracy;  // training accuracy per epoch, percent
  std::vector<double> step_loss;
  std::vector<std::uint64_t> epoch_digest;
  double test_accuracy = 0.0;  // percent
  double test_loss = 0.0;
  bool diverged = false;
  std::string divergence_reason;
};

struct RunSummary {
  ArmSummary integer;
  std::optional<ArmSummary> reference;
};

/// Trains the integer arm and, if config.paired, the float arm from identical
/// initial weights over the identical batch sequence. Writes config.txt,
/// steps.csv, epochs.csv, summary.txt and a checkpoint into config.out_dir.
RunSummary run_training(const RunConfig& config);

struct AblationRow {
  int bits = 8;
  double test_accuracy = 0.0;
  double final_loss = 0.0;
  bool diverged = false;
};

/// One integer run per bit width with a shared seed; writes ablation.csv.
std::vector<AblationRow> run_ablation(const RunConfig& config, std::span<const int> bits);

/// Formats a double with 9 significant digits.
std::string fmt9(double v);

}  // namespace dfx

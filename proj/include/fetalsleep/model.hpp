#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fetalsleep/features.hpp"
#include "fetalsleep/layers.hpp"
#include "fetalsleep/metrics.hpp"
#include "fetalsleep/recording.hpp"

namespace fsn::model {

using layers::Mat;

struct ModelConfig {
  std::size_t input_channels = 2;
  double sample_rate_hz = 100.0;
  double epoch_len_s = 30.0;
  std::array<std::size_t, 4> conv_channels{128, 128, 128, 128};
  std::size_t conv_kernel = 8;  // layers 2-4, stride 1
  std::size_t pool1 = 8;
  std::size_t pool2 = 4;
  std::size_t lstm_hidden = 256;
  std::size_t lstm_layers = 2;
  bool bidirectional = false;
  std::size_t num_classes = 3;
  double dropout = 0.5;

  std::size_t epoch_samples() const { return static_cast<std::size_t>(std::llround(epoch_len_s * sample_rate_hz)); }
  std::size_t conv1_kernel() const { return static_cast<std::size_t>(std::llround(sample_rate_hz / 2.0)); }
  std::size_t conv1_stride() const { return static_cast<std::size_t>(std::llround(sample_rate_hz / 4.0)); }
  /// Per-epoch CNN output length after the second pool.
  std::size_t cnn_out_len() const;
  std::size_t cnn_features() const { return cnn_out_len() * conv_channels[3]; }
  std::size_t lstm_out() const { return bidirectional ? 2 * lstm_hidden : lstm_hidden; }

  /// Throws ShapeError on structural violations.
  void validate() const;
  /// True for the published size (256 hidden units, unidirectional).
  bool is_reference() const { return lstm_hidden == 256 && !bidirectional; }
};

/// The small configuration used for gradient checks (2 filters, 8 units).
ModelConfig tiny_config(std::size_t num_classes = 3);
/// Small but trainable on one core: 8 filters, 16 units, dropout 0.2.
ModelConfig compact_config(std::size_t num_classes = 3);

struct NamedTensor {
  std::string name;
  Mat value;
};

struct ModelWeights {
  static constexpr std::uint32_t kFormatVersion = 1;

  ModelConfig config;
  std::uint64_t init_seed = 0;
  std::vector<NamedTensor> tensors;

  Mat& at(std::string_view name);
  const Mat& at(std::string_view name) const;
  bool has(std::string_view name) const;
  /// Shapes match the config and every value is finite.
  void validate() const;
};

/// Tensor names and shapes in canonical order.
std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> tensor_shapes(const ModelConfig& config);

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed);

enum class TransferStrategy { kFrozenCNN, kPartialCNN, kFullCNN };

std::string_view strategy_name(TransferStrategy s);
TransferStrategy strategy_from_name(std::string_view name);
/// Names of tensors updated under a strategy.
std::vector<std::string> trainable_tensors(const ModelConfig& config, TransferStrategy strategy);

/// B sequences of T epochs; row (b*T + t)*E + i, one column per channel.
struct EpochBatch {
  std::size_t num_sequences = 0;
  std::size_t seq_len = 0;
  std::size_t epoch_samples = 0;
  Mat samples;
};

/// Per LSTM layer (and direction) B x H matrices.
struct LstmState {
  std::vector<Mat> h;
  std::vector<Mat> c;

  bool empty() const { return h.empty(); }
};

LstmState zero_state(const ModelConfig& config, std::size_t batch);

/// Everything backward() needs.
struct ForwardTrace {
  std::size_t batch = 0, steps = 0;
  layers::ConvCache conv[4];
  Mat conv_out[4];  // post-ReLU
  layers::PoolCache pool1, pool2;
  Mat drop1_mask, drop2_mask;
  std::vector<layers::LstmCache> lstm;  // layer-major, forward then reverse
  Mat lstm_top;                          // (B*T) x lstm_out
};

struct ForwardOptions {
  /// Training mode enables dropout drawn from this generator.
  std::mt19937_64* dropout_rng = nullptr;
};

/// Logits, (B*T) x num_classes. `state` is read (zero when empty) and
/// updated with the final state; the reverse direction always starts at zero.
Mat forward(const ModelWeights& weights, const EpochBatch& batch, LstmState* state = nullptr,
            const ForwardOptions& options = {}, ForwardTrace* trace = nullptr);

using Gradients = std::map<std::string, Mat>;

/// Gradients for the `trainable` tensors only. Throws NumericError naming the
/// first tensor with a non-finite entry.
Gradients backward(const ModelWeights& weights, const ForwardTrace& trace, const Mat& dlogits,
                   std::span<const std::string> trainable);

/// Balanced weights N / (C * n_c).
std::vector<double> class_weights(std::span<const long long> counts);

struct LossResult {
  double loss = 0.0;
  Mat dlogits;
};

/// sum_i ws_i * wc(y_i) * -log p_i,y_i / sum_i ws_i. Empty seq_weights means 1.
LossResult weighted_ce_loss(const Mat& logits, std::span<const int> labels, std::span<const double> class_weights,
                            std::span<const double> seq_weights = {});

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}
  /// One update of the tensors named in `grads`.
  void step(ModelWeights& weights, const Gradients& grads);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, Mat> m_, v_;
};

double global_norm(const Gradients& grads);
/// Rescales so the global norm is at most max_norm; returns the norm before.
double clip_global_norm(Gradients& grads, double max_norm);

/// One subject's consecutive scoring epochs.
struct SubjectSequence {
  std::string subject_id;
  std::size_t epoch_samples = 0;
  Mat samples;              // (N*E) x C
  std::vector<int> labels;  // class index per epoch

  std::size_t num_epochs() const { return labels.size(); }
};

SubjectSequence make_subject_sequence(std::span<const features::LabeledEpoch> epochs, LabelSpace space);

struct TrainConfig {
  std::size_t batch_size = 256;
  std::size_t max_epochs = 200;
  AdamConfig adam{};
  double grad_clip_norm = 5.0;
  std::size_t early_stop_patience = 30;
  std::size_t seq_len = 20;
  std::uint64_t seed = 0;

  void validate() const;
};

struct HistoryRow {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_acc = 0.0;
  double val_macro_f1 = 0.0;
  double test_macro_f1 = std::nan("");
  eval::ConfusionMatrix val_confusion;
  std::optional<eval::ConfusionMatrix> test_confusion;
};

struct TrainResult {
  ModelWeights best;
  std::vector<HistoryRow> history;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  bool early_stopped = false;
};

struct TrainData {
  std::vector<SubjectSequence> train;
  std::vector<SubjectSequence> val;
  /// Optional, only tracked in the history.
  std::vector<SubjectSequence> test;
};

using EpochCallback = std::function<void(const HistoryRow&)>;

TrainResult train(const ModelWeights& initial, const TrainData& data, const TrainConfig& config,
                  TransferStrategy strategy, const EpochCallback& on_epoch = {});

std::string history_csv(std::span<const HistoryRow> history);

/// Backbone copied, FC head re-drawn for `target_classes` from `seed`.
ModelWeights transfer_remap(const ModelWeights& pretrained, std::size_t target_classes = 3, std::uint64_t seed = 0);

struct Prediction {
  std::vector<int> labels;
  Mat posteriors;  // N x C
};

/// Stateful inference over a subject, `chunk` epochs per forward call.
Prediction predict(const ModelWeights& weights, const SubjectSequence& subject, std::size_t chunk = 64);
eval::FoldResult evaluate(const ModelWeights& weights, std::span<const SubjectSequence> subjects);

void save_checkpoint(const std::filesystem::path& path, const ModelWeights& weights);
ModelWeights load_checkpoint(const std::filesystem::path& path);
std::string encode_weights(const ModelWeights& weights);
/// `config` must describe the encoded tensors.
ModelWeights decode_weights(std::string_view bytes, const ModelConfig& config);
std::string config_json(const ModelConfig& config, std::uint64_t init_seed);
ModelConfig config_from_json(std::string_view json, std::uint64_t* init_seed = nullptr);

struct LatencyReport {
  std::size_t runs = 0;
  double avg_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
  double throughput_per_s = 0.0;
};

/// Single-epoch streaming inference timings (state carried between calls).
LatencyReport bench_latency(const ModelWeights& weights, std::size_t runs = 200, std::size_t warmup = 10,
                            std::uint64_t seed = 0);
std::string latency_table(const LatencyReport& report);

}  // namespace fsn::model

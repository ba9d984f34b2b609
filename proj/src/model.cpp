#include "fetalsleep/model.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "fetalsleep/container.hpp"
#include "fetalsleep/error.hpp"

namespace fsn::model {

namespace {

using layers::ConvGeometry;
using layers::same_padding;

std::string layer_name(std::size_t layer, bool reverse) {
  return "lstm" + std::to_string(layer + 1) + (reverse ? "_rev" : "");
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// Fisher-Yates driven by uniform01 so orderings do not depend on the library.
template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(layers::uniform01(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

void check_finite(const std::string& name, const Mat& m) {
  if (!m.allFinite()) throw NumericError("non-finite gradient in tensor '" + name + "'");
}

}  // namespace

std::size_t ModelConfig::cnn_out_len() const {
  const std::size_t l1 = ceil_div(epoch_samples(), conv1_stride());
  return ceil_div(ceil_div(l1, pool1), pool2);
}

void ModelConfig::validate() const {
  if (input_channels == 0) throw ShapeError("model needs at least one input channel");
  if (!(sample_rate_hz >= 4.0) || !(epoch_len_s > 0.0)) throw ShapeError("bad sample rate or epoch length");
  if (std::fabs(sample_rate_hz / 4.0 - std::round(sample_rate_hz / 4.0)) > 1e-9)
    throw ShapeError("sample rate must be a multiple of 4 so that kernel Fs/2 and stride Fs/4 are integral");
  if (epoch_samples() < conv1_kernel()) throw ShapeError("epoch shorter than the first conv kernel");
  for (auto c : conv_channels)
    if (c == 0) throw ShapeError("conv channel counts must be positive");
  if (conv_kernel == 0 || pool1 == 0 || pool2 == 0) throw ShapeError("kernel and pool sizes must be positive");
  if (lstm_layers != 2) throw ShapeError("the LSTM stack has exactly 2 layers");
  if (lstm_hidden == 0) throw ShapeError("LSTM hidden size must be positive");
  if (num_classes < 2) throw ShapeError("need at least 2 classes");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ShapeError("dropout must lie in [0, 1)");
}

ModelConfig tiny_config(std::size_t num_classes) {
  ModelConfig c;
  c.conv_channels = {2, 2, 2, 2};
  c.lstm_hidden = 8;
  c.num_classes = num_classes;
  return c;
}

ModelConfig compact_config(std::size_t num_classes) {
  ModelConfig c;
  c.conv_channels = {8, 8, 8, 8};
  c.lstm_hidden = 16;
  c.dropout = 0.2;
  c.num_classes = num_classes;
  return c;
}

Mat& ModelWeights::at(std::string_view name) {
  for (auto& t : tensors)
    if (t.name == name) return t.value;
  throw ShapeError("no tensor named '" + std::string(name) + "'");
}

const Mat& ModelWeights::at(std::string_view name) const { return const_cast<ModelWeights*>(this)->at(name); }

bool ModelWeights::has(std::string_view name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == name; });
}

void ModelWeights::validate() const {
  config.validate();
  const auto shapes = tensor_shapes(config);
  if (shapes.size() != tensors.size())
    throw ShapeError("expected " + std::to_string(shapes.size()) + " tensors, found " + std::to_string(tensors.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& [name, shape] = shapes[i];
    const auto& t = tensors[i];
    if (t.name != name) throw ShapeError("tensor " + std::to_string(i) + " is '" + t.name + "', expected '" + name + "'");
    if (static_cast<std::size_t>(t.value.rows()) != shape.first ||
        static_cast<std::size_t>(t.value.cols()) != shape.second)
      throw ShapeError("tensor '" + name + "' has shape " + std::to_string(t.value.rows()) + "x" +
                       std::to_string(t.value.cols()) + ", expected " + std::to_string(shape.first) + "x" +
                       std::to_string(shape.second));
    if (!t.value.allFinite()) throw NumericError("tensor '" + name + "' has non-finite values");
  }
}

std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> tensor_shapes(const ModelConfig& c) {
  std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> out;
  std::size_t in = c.input_channels;
  for (std::size_t l = 0; l < 4; ++l) {
    const std::size_t k = l == 0 ? c.conv1_kernel() : c.conv_kernel;
    const std::string p = "conv" + std::to_string(l + 1);
    out.push_back({p + ".weight", {k * in, c.conv_channels[l]}});
    out.push_back({p + ".bias", {1, c.conv_channels[l]}});
    in = c.conv_channels[l];
  }
  std::size_t d = c.cnn_features();
  const std::size_t g = 4 * c.lstm_hidden;
  for (std::size_t l = 0; l < c.lstm_layers; ++l) {
    for (int rev = 0; rev < (c.bidirectional ? 2 : 1); ++rev) {
      const auto p = layer_name(l, rev);
      out.push_back({p + ".w_ih", {d, g}});
      out.push_back({p + ".w_hh", {c.lstm_hidden, g}});
      out.push_back({p + ".bias", {1, g}});
    }
    d = c.lstm_out();
  }
  out.push_back({"fc.weight", {c.lstm_out(), c.num_classes}});
  out.push_back({"fc.bias", {1, c.num_classes}});
  return out;
}

namespace {

Mat init_tensor(const std::string& name, std::size_t rows, std::size_t cols, std::size_t hidden,
                std::mt19937_64& rng) {
  const bool is_bias = name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
  Mat m = Mat::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  if (is_bias) {
    if (name.rfind("lstm", 0) == 0)
      m.middleCols(static_cast<Eigen::Index>(hidden), static_cast<Eigen::Index>(hidden)).setOnes();
    return m;
  }
  // ReLU convs get the He bound; without normalisation layers the plain
  // 1/sqrt(fan_in) bound shrinks activations ~3x per layer.
  const double gain = name.rfind("conv", 0) == 0 ? std::sqrt(6.0) : 1.0;
  const double bound = gain / std::sqrt(static_cast<double>(rows));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (2.0 * layers::uniform01(rng) - 1.0) * bound;
  return m;
}

}  // namespace

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelWeights w;
  w.config = config;
  w.init_seed = seed;
  std::mt19937_64 rng(seed);
  for (const auto& [name, shape] : tensor_shapes(config))
    w.tensors.push_back({name, init_tensor(name, shape.first, shape.second, config.lstm_hidden, rng)});
  return w;
}

std::string_view strategy_name(TransferStrategy s) {
  switch (s) {
    case TransferStrategy::kFrozenCNN: return "frozen";
    case TransferStrategy::kPartialCNN: return "partial";
    case TransferStrategy::kFullCNN: return "full";
  }
  return "full";
}

TransferStrategy strategy_from_name(std::string_view name) {
  if (name == "frozen") return TransferStrategy::kFrozenCNN;
  if (name == "partial") return TransferStrategy::kPartialCNN;
  if (name == "full") return TransferStrategy::kFullCNN;
  throw ConfigError("unknown transfer strategy '" + std::string(name) + "' (frozen, partial, full)");
}

std::vector<std::string> trainable_tensors(const ModelConfig& config, TransferStrategy strategy) {
  std::vector<std::string> out;
  for (const auto& [name, shape] : tensor_shapes(config)) {
    const bool conv = name.rfind("conv", 0) == 0;
    const bool conv1 = name.rfind("conv1.", 0) == 0;
    if (!conv || strategy == TransferStrategy::kFullCNN ||
        (strategy == TransferStrategy::kPartialCNN && conv1))
      out.push_back(name);
  }
  return out;
}

LstmState zero_state(const ModelConfig& config, std::size_t batch) {
  LstmState s;
  for (std::size_t l = 0; l < config.lstm_layers; ++l) {
    s.h.push_back(Mat::Zero(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(config.lstm_hidden)));
    s.c.push_back(Mat::Zero(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(config.lstm_hidden)));
  }
  return s;
}

Mat forward(const ModelWeights& w, const EpochBatch& batch, LstmState* state, const ForwardOptions& options,
            ForwardTrace* trace) {
  const auto& cfg = w.config;
  const std::size_t n = batch.num_sequences * batch.seq_len;
  const std::size_t e = cfg.epoch_samples();
  if (batch.epoch_samples != e)
    throw ShapeError("epochs hold " + std::to_string(batch.epoch_samples) + " samples, model expects " +
                     std::to_string(e));
  if (static_cast<std::size_t>(batch.samples.cols()) != cfg.input_channels)
    throw ShapeError("input has " + std::to_string(batch.samples.cols()) + " channels, model expects " +
                     std::to_string(cfg.input_channels));
  if (static_cast<std::size_t>(batch.samples.rows()) != n * e) throw ShapeError("input row count mismatch");
  if (n == 0) throw ShapeError("empty batch");

  ForwardTrace local;
  ForwardTrace& tr = trace ? *trace : local;
  const bool keep = trace != nullptr;
  tr.batch = batch.num_sequences;
  tr.steps = batch.seq_len;
  std::mt19937_64* rng = options.dropout_rng;

  // CNN over all epochs at once.
  const ConvGeometry g1 = same_padding(e, cfg.conv1_kernel(), cfg.conv1_stride());
  Mat a = layers::relu_forward(layers::conv1d_forward(batch.samples, n, e, w.at("conv1.weight"), w.at("conv1.bias"),
                                                      g1, keep ? &tr.conv[0] : nullptr));
  std::size_t len = g1.out_len(e);
  if (keep) tr.conv_out[0] = a;
  a = layers::maxpool_forward(a, n, len, cfg.pool1, keep ? &tr.pool1 : nullptr);
  len = ceil_div(len, cfg.pool1);
  a = layers::dropout_forward(a, cfg.dropout, rng, keep ? &tr.drop1_mask : nullptr);
  for (std::size_t l = 1; l < 4; ++l) {
    const std::string p = "conv" + std::to_string(l + 1);
    const ConvGeometry g = same_padding(len, cfg.conv_kernel, 1);
    a = layers::relu_forward(
        layers::conv1d_forward(a, n, len, w.at(p + ".weight"), w.at(p + ".bias"), g, keep ? &tr.conv[l] : nullptr));
    if (keep) tr.conv_out[l] = a;
  }
  a = layers::maxpool_forward(a, n, len, cfg.pool2, keep ? &tr.pool2 : nullptr);
  a = layers::dropout_forward(a, cfg.dropout, rng, keep ? &tr.drop2_mask : nullptr);
  const std::size_t feat = cfg.cnn_features();
  // Row-major storage makes the flatten a reinterpretation.
  const Mat flat = Eigen::Map<const Mat>(a.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(feat));

  // Sequence layout for the LSTMs.
  const std::size_t B = batch.num_sequences, T = batch.seq_len;
  std::vector<Mat> xs(T, Mat(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(feat)));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) xs[t].row(static_cast<Eigen::Index>(b)) = flat.row(static_cast<Eigen::Index>(b * T + t));

  LstmState own;
  LstmState& st = state ? *state : own;
  if (st.empty()) st = zero_state(cfg, B);
  if (st.h.size() != cfg.lstm_layers || static_cast<std::size_t>(st.h[0].rows()) != B)
    throw ShapeError("LSTM state does not match the batch");

  const int dirs = cfg.bidirectional ? 2 : 1;
  if (keep) tr.lstm.assign(cfg.lstm_layers * dirs, {});
  for (std::size_t l = 0; l < cfg.lstm_layers; ++l) {
    const auto pf = layer_name(l, false);
    auto hs = layers::lstm_forward(xs, w.at(pf + ".w_ih"), w.at(pf + ".w_hh"), w.at(pf + ".bias"), st.h[l], st.c[l],
                                   keep ? &tr.lstm[l * dirs] : nullptr);
    if (cfg.bidirectional) {
      const auto pr = layer_name(l, true);
      std::vector<Mat> rx(xs.rbegin(), xs.rend());
      Mat h = Mat::Zero(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(cfg.lstm_hidden));
      Mat c = h;
      auto rh = layers::lstm_forward(rx, w.at(pr + ".w_ih"), w.at(pr + ".w_hh"), w.at(pr + ".bias"), h, c,
                                     keep ? &tr.lstm[l * dirs + 1] : nullptr);
      for (std::size_t t = 0; t < T; ++t) {
        Mat cat(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(2 * cfg.lstm_hidden));
        cat << hs[t], rh[T - 1 - t];
        hs[t] = std::move(cat);
      }
    }
    xs = std::move(hs);
  }

  Mat top(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cfg.lstm_out()));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) top.row(static_cast<Eigen::Index>(b * T + t)) = xs[t].row(static_cast<Eigen::Index>(b));
  Mat logits = layers::linear_forward(top, w.at("fc.weight"), w.at("fc.bias"));
  if (keep) tr.lstm_top = std::move(top);
  return logits;
}

Gradients backward(const ModelWeights& w, const ForwardTrace& tr, const Mat& dlogits,
                   std::span<const std::string> trainable) {
  const auto& cfg = w.config;
  auto wants = [&](const std::string& name) { return std::find(trainable.begin(), trainable.end(), name) != trainable.end(); };
  Gradients grads;
  auto slot = [&](const std::string& name) -> Mat* { return wants(name) ? &grads[name] : nullptr; };

  // Deepest conv layer that needs a gradient (0 = none).
  std::size_t lowest_conv = 0;
  for (std::size_t l = 4; l >= 1; --l)
    if (wants("conv" + std::to_string(l) + ".weight") || wants("conv" + std::to_string(l) + ".bias")) lowest_conv = l;

  const std::size_t B = tr.batch, T = tr.steps, n = B * T;
  const int dirs = cfg.bidirectional ? 2 : 1;
  const auto H = static_cast<Eigen::Index>(cfg.lstm_hidden);

  Mat dtop = layers::linear_backward(dlogits, tr.lstm_top, w.at("fc.weight"), slot("fc.weight"), slot("fc.bias"), true);
  std::vector<Mat> dout(T, Mat(static_cast<Eigen::Index>(B), dtop.cols()));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) dout[t].row(static_cast<Eigen::Index>(b)) = dtop.row(static_cast<Eigen::Index>(b * T + t));

  for (std::size_t l = cfg.lstm_layers; l-- > 0;) {
    const bool need_dx = l > 0 || lowest_conv > 0;
    std::vector<Mat> dfwd(T), drev(T);
    for (std::size_t t = 0; t < T; ++t) {
      dfwd[t] = dout[t].leftCols(H);
      if (dirs == 2) drev[T - 1 - t] = dout[t].rightCols(H);
    }
    const auto pf = layer_name(l, false);
    auto dx = layers::lstm_backward(dfwd, tr.lstm[l * dirs], w.at(pf + ".w_ih"), w.at(pf + ".w_hh"),
                                    slot(pf + ".w_ih"), slot(pf + ".w_hh"), slot(pf + ".bias"), need_dx);
    if (dirs == 2) {
      const auto pr = layer_name(l, true);
      auto dxr = layers::lstm_backward(drev, tr.lstm[l * dirs + 1], w.at(pr + ".w_ih"), w.at(pr + ".w_hh"),
                                       slot(pr + ".w_ih"), slot(pr + ".w_hh"), slot(pr + ".bias"), need_dx);
      if (need_dx)
        for (std::size_t t = 0; t < T; ++t) dx[t] += dxr[T - 1 - t];
    }
    if (!need_dx) break;
    dout = std::move(dx);
  }

  if (lowest_conv > 0) {
    const std::size_t feat = cfg.cnn_features();
    Mat dflat(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(feat));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t) dflat.row(static_cast<Eigen::Index>(b * T + t)) = dout[t].row(static_cast<Eigen::Index>(b));
    Mat da = Eigen::Map<const Mat>(dflat.data(), static_cast<Eigen::Index>(n * cfg.cnn_out_len()),
                                   static_cast<Eigen::Index>(cfg.conv_channels[3]));
    da = layers::dropout_backward(da, tr.drop2_mask);
    da = layers::maxpool_backward(da, tr.pool2);
    for (std::size_t l = 4; l >= lowest_conv; --l) {
      const std::string p = "conv" + std::to_string(l);
      da = layers::relu_backward(da, tr.conv_out[l - 1]);
      da = layers::conv1d_backward(da, w.at(p + ".weight"), tr.conv[l - 1], slot(p + ".weight"), slot(p + ".bias"),
                                   l > lowest_conv);
      if (l == 2 && lowest_conv == 1) {
        da = layers::dropout_backward(da, tr.drop1_mask);
        da = layers::maxpool_backward(da, tr.pool1);
      }
      if (l == 1) break;
    }
  }

  for (const auto& [name, g] : grads) check_finite(name, g);
  return grads;
}

std::vector<double> class_weights(std::span<const long long> counts) {
  if (counts.empty()) throw WeightError("no classes");
  long long total = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] <= 0) throw WeightError("class " + std::to_string(c) + " has no training epochs");
    total += counts[c];
  }
  std::vector<double> w;
  for (auto n : counts)
    w.push_back(static_cast<double>(total) / (static_cast<double>(counts.size()) * static_cast<double>(n)));
  return w;
}

LossResult weighted_ce_loss(const Mat& logits, std::span<const int> labels, std::span<const double> cw,
                            std::span<const double> seq_weights) {
  const auto n = static_cast<std::size_t>(logits.rows());
  if (labels.size() != n) throw ShapeError("label count does not match logits");
  if (cw.size() != static_cast<std::size_t>(logits.cols())) throw ShapeError("class weight count mismatch");
  if (!seq_weights.empty() && seq_weights.size() != n) throw ShapeError("sequence weight count mismatch");
  if (!logits.allFinite()) throw NumericError("non-finite logits");
  const Mat p = layers::softmax(logits);
  LossResult r;
  r.dlogits = p;
  double norm = 0.0, total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= logits.cols())
      throw LabelError("label " + std::to_string(y) + " at row " + std::to_string(i) + " outside [0, " +
                       std::to_string(logits.cols()) + ")");
    const double ws = seq_weights.empty() ? 1.0 : seq_weights[i];
    const double m = logits.row(static_cast<Eigen::Index>(i)).maxCoeff();
    const double lse = m + std::log((logits.row(static_cast<Eigen::Index>(i)).array() - m).exp().sum());
    total += ws * cw[static_cast<std::size_t>(y)] * (lse - logits(static_cast<Eigen::Index>(i), y));
    norm += ws;
    r.dlogits(static_cast<Eigen::Index>(i), y) -= 1.0;
    r.dlogits.row(static_cast<Eigen::Index>(i)) *= ws * cw[static_cast<std::size_t>(y)];
  }
  if (!(norm > 0.0)) throw WeightError("sequence weights sum to zero");
  r.loss = total / norm;
  r.dlogits /= norm;
  return r;
}

void Adam::step(ModelWeights& weights, const Gradients& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() == 0) {
      m = Mat::Zero(g.rows(), g.cols());
      v = Mat::Zero(g.rows(), g.cols());
    }
    m = config_.beta1 * m + (1.0 - config_.beta1) * g;
    v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
    auto& w = weights.at(name);
    w.array() -= config_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.eps);
  }
}

double global_norm(const Gradients& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads) s += g.squaredNorm();
  return std::sqrt(s);
}

double clip_global_norm(Gradients& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm && norm > 0.0)
    for (auto& [name, g] : grads) g *= max_norm / norm;
  return norm;
}

SubjectSequence make_subject_sequence(std::span<const features::LabeledEpoch> epochs, LabelSpace space) {
  SubjectSequence s;
  if (epochs.empty()) return s;
  s.subject_id = epochs.front().subject_id;
  s.epoch_samples = epochs.front().channels.at(0).size();
  const std::size_t ch = epochs.front().channels.size();
  s.samples.resize(static_cast<Eigen::Index>(epochs.size() * s.epoch_samples), static_cast<Eigen::Index>(ch));
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& e = epochs[i];
    if (e.channels.size() != ch) throw ShapeError("epochs differ in channel count");
    for (std::size_t c = 0; c < ch; ++c) {
      if (e.channels[c].size() != s.epoch_samples) throw ShapeError("epochs differ in length");
      for (std::size_t k = 0; k < s.epoch_samples; ++k)
        s.samples(static_cast<Eigen::Index>(i * s.epoch_samples + k), static_cast<Eigen::Index>(c)) = e.channels[c][k];
    }
    const auto idx = class_index(e.label, space);
    if (!idx) throw LabelError("stage " + std::string(stage_token(e.label)) + " is not a class of this label space");
    s.labels.push_back(*idx);
  }
  return s;
}

void TrainConfig::validate() const {
  if (!(adam.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (early_stop_patience < 1) throw ConfigError("patience must be at least 1");
  if (batch_size < 1 || seq_len < 1 || max_epochs < 1) throw ConfigError("batch size, sequence length and max epochs must be positive");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("gradient clip norm must be positive");
}

namespace {

struct Chunk {
  std::size_t subject;
  std::size_t start;
  std::size_t len;
};

std::vector<Chunk> make_chunks(const std::vector<SubjectSequence>& subjects, std::size_t seq_len) {
  std::vector<Chunk> out;
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    const std::size_t n = subjects[s].num_epochs();
    if (n == 0) continue;
    if (n <= seq_len) {
      out.push_back({s, 0, n});
      continue;
    }
    std::size_t start = 0;
    for (; start + seq_len <= n; start += seq_len) out.push_back({s, start, seq_len});
    if (start < n) out.push_back({s, n - seq_len, seq_len});
  }
  return out;
}

EpochBatch gather(const std::vector<SubjectSequence>& subjects, std::span<const Chunk> chunks,
                  std::vector<int>& labels) {
  EpochBatch b;
  b.num_sequences = chunks.size();
  b.seq_len = chunks.front().len;
  b.epoch_samples = subjects[chunks.front().subject].epoch_samples;
  const auto e = static_cast<Eigen::Index>(b.epoch_samples);
  const auto rows = static_cast<Eigen::Index>(b.seq_len) * e;
  b.samples.resize(static_cast<Eigen::Index>(b.num_sequences) * rows, subjects[chunks.front().subject].samples.cols());
  labels.clear();
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    const auto& ch = chunks[i];
    const auto& s = subjects[ch.subject];
    b.samples.middleRows(static_cast<Eigen::Index>(i) * rows, rows) =
        s.samples.middleRows(static_cast<Eigen::Index>(ch.start) * e, rows);
    labels.insert(labels.end(), s.labels.begin() + static_cast<std::ptrdiff_t>(ch.start),
                  s.labels.begin() + static_cast<std::ptrdiff_t>(ch.start + ch.len));
  }
  return b;
}

}  // namespace

TrainResult train(const ModelWeights& initial, const TrainData& data, const TrainConfig& config,
                  TransferStrategy strategy, const EpochCallback& on_epoch) {
  config.validate();
  initial.validate();
  const auto& mc = initial.config;
  auto chunks = make_chunks(data.train, config.seq_len);
  if (chunks.empty()) throw DataError("empty training set");
  if (data.val.empty()) throw DataError("no validation subjects");
  for (const auto& tr : data.train)
    for (const auto& v : data.val)
      if (tr.subject_id == v.subject_id) throw DataError("subject '" + tr.subject_id + "' is in both train and validation");

  std::vector<long long> counts(mc.num_classes, 0);
  for (const auto& s : data.train)
    for (int y : s.labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= mc.num_classes) throw LabelError("training label out of range");
      ++counts[static_cast<std::size_t>(y)];
    }
  const auto cw = class_weights(counts);
  const auto trainable = trainable_tensors(mc, strategy);
  const std::size_t per_step = std::max<std::size_t>(1, config.batch_size / config.seq_len);

  std::mt19937_64 order_rng(config.seed);
  std::mt19937_64 drop_rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
  Adam adam(config.adam);
  ModelWeights w = initial;
  TrainResult result;
  result.best = initial;
  double best_f1 = -1.0;
  std::size_t since_best = 0;
  std::vector<int> labels;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    shuffle(chunks, order_rng);
    // Equal-length chunks share a batch.
    std::map<std::size_t, std::vector<Chunk>> by_len;
    for (const auto& c : chunks) by_len[c.len].push_back(c);
    std::vector<std::vector<Chunk>> batches;
    for (auto& [len, list] : by_len)
      for (std::size_t i = 0; i < list.size(); i += per_step)
        batches.emplace_back(list.begin() + static_cast<std::ptrdiff_t>(i),
                             list.begin() + static_cast<std::ptrdiff_t>(std::min(list.size(), i + per_step)));
    shuffle(batches, order_rng);

    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (const auto& chunk_list : batches) {
      const auto batch = gather(data.train, chunk_list, labels);
      ForwardTrace trace;
      LstmState state;
      const Mat logits = forward(w, batch, &state, {&drop_rng}, &trace);
      const auto loss = weighted_ce_loss(logits, labels, cw);
      auto grads = backward(w, trace, loss.dlogits, trainable);
      clip_global_norm(grads, config.grad_clip_norm);
      adam.step(w, grads);
      loss_sum += loss.loss * static_cast<double>(labels.size());
      loss_n += labels.size();
    }

    HistoryRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(loss_n);
    const auto val = evaluate(w, data.val);
    row.val_acc = val.accuracy;
    row.val_macro_f1 = val.macro_f1;
    row.val_confusion = val.confusion;
    if (!data.test.empty()) {
      const auto test = evaluate(w, data.test);
      row.test_macro_f1 = test.macro_f1;
      row.test_confusion = test.confusion;
    }
    result.history.push_back(row);
    result.epochs_run = epoch;
    if (on_epoch) on_epoch(row);

    if (row.val_macro_f1 > best_f1) {
      best_f1 = row.val_macro_f1;
      result.best = w;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

std::string history_csv(std::span<const HistoryRow> history) {
  std::string out = "epoch,train_loss,val_acc,val_macro_f1,test_macro_f1\n";
  char buf[160];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g,", r.epoch, r.train_loss, r.val_acc, r.val_macro_f1);
    out += buf;
    if (!std::isnan(r.test_macro_f1)) {
      std::snprintf(buf, sizeof(buf), "%.10g", r.test_macro_f1);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

ModelWeights transfer_remap(const ModelWeights& pretrained, std::size_t target_classes, std::uint64_t seed) {
  pretrained.validate();
  ModelWeights out;
  out.config = pretrained.config;
  out.config.num_classes = target_classes;
  out.config.validate();
  out.init_seed = seed;
  std::mt19937_64 rng(seed);
  for (const auto& [name, shape] : tensor_shapes(out.config)) {
    if (name.rfind("fc.", 0) == 0) {
      out.tensors.push_back({name, init_tensor(name, shape.first, shape.second, out.config.lstm_hidden, rng)});
    } else {
      const auto& src = pretrained.at(name);
      if (static_cast<std::size_t>(src.rows()) != shape.first || static_cast<std::size_t>(src.cols()) != shape.second)
        throw ShapeError("backbone tensor '" + name + "' shape mismatch");
      out.tensors.push_back({name, src});
    }
  }
  return out;
}

Prediction predict(const ModelWeights& weights, const SubjectSequence& subject, std::size_t chunk) {
  const std::size_t n = subject.num_epochs();
  Prediction p;
  p.posteriors.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(weights.config.num_classes));
  LstmState state;
  const auto e = static_cast<Eigen::Index>(subject.epoch_samples);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t len = std::min(chunk, n - start);
    EpochBatch b;
    b.num_sequences = 1;
    b.seq_len = len;
    b.epoch_samples = subject.epoch_samples;
    b.samples = subject.samples.middleRows(static_cast<Eigen::Index>(start) * e, static_cast<Eigen::Index>(len) * e);
    p.posteriors.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(len)) =
        layers::softmax(forward(weights, b, &state));
  }
  for (Eigen::Index i = 0; i < p.posteriors.rows(); ++i) {
    Eigen::Index arg = 0;
    p.posteriors.row(i).maxCoeff(&arg);
    p.labels.push_back(static_cast<int>(arg));
  }
  return p;
}

eval::FoldResult evaluate(const ModelWeights& weights, std::span<const SubjectSequence> subjects) {
  std::vector<int> pred, truth;
  for (const auto& s : subjects) {
    const auto p = predict(weights, s);
    pred.insert(pred.end(), p.labels.begin(), p.labels.end());
    truth.insert(truth.end(), s.labels.begin(), s.labels.end());
  }
  return eval::metrics(pred, truth, weights.config.num_classes);
}

namespace {

constexpr char kMagic[4] = {'F', 'S', 'N', '1'};

template <typename T>
void put(std::string& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

struct Reader {
  std::string_view bytes;
  std::size_t pos = 0;

  template <typename T>
  T get() {
    if (pos + sizeof(T) > bytes.size()) throw ParseError("truncated checkpoint", pos);
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
};

}  // namespace

std::string encode_weights(const ModelWeights& weights) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, ModelWeights::kFormatVersion);
  put<std::uint64_t>(out, weights.init_seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(weights.tensors.size()));
  for (const auto& t : weights.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.cols()));
    for (Eigen::Index i = 0; i < t.value.size(); ++i) put<float>(out, static_cast<float>(t.value.data()[i]));
  }
  return out;
}

ModelWeights decode_weights(std::string_view bytes, const ModelConfig& config) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw ParseError("not an FSN1 checkpoint", 0);
  Reader r{bytes, 4};
  const auto version = r.get<std::uint32_t>();
  if (version != ModelWeights::kFormatVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  ModelWeights w;
  w.config = config;
  w.init_seed = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    if (r.pos + len > bytes.size()) throw ParseError("truncated tensor name", r.pos);
    std::string name(bytes.substr(r.pos, len));
    r.pos += len;
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    Mat m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = r.get<float>();
    w.tensors.push_back({std::move(name), std::move(m)});
  }
  if (r.pos != bytes.size()) throw ParseError("trailing bytes after the tensor table", r.pos);
  w.validate();
  return w;
}

std::string config_json(const ModelConfig& c, std::uint64_t init_seed) {
  nlohmann::json j;
  j["format_version"] = ModelWeights::kFormatVersion;
  j["init_seed"] = init_seed;
  j["input_channels"] = c.input_channels;
  j["sample_rate_hz"] = c.sample_rate_hz;
  j["epoch_len_s"] = c.epoch_len_s;
  j["conv_channels"] = c.conv_channels;
  j["conv_kernel"] = c.conv_kernel;
  j["pool1"] = c.pool1;
  j["pool2"] = c.pool2;
  j["lstm_hidden"] = c.lstm_hidden;
  j["lstm_layers"] = c.lstm_layers;
  j["bidirectional"] = c.bidirectional;
  j["num_classes"] = c.num_classes;
  j["dropout"] = c.dropout;
  return j.dump(2) + "\n";
}

ModelConfig config_from_json(std::string_view text, std::uint64_t* init_seed) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.input_channels = j.at("input_channels").get<std::size_t>();
    c.sample_rate_hz = j.at("sample_rate_hz").get<double>();
    c.epoch_len_s = j.at("epoch_len_s").get<double>();
    c.conv_channels = j.at("conv_channels").get<std::array<std::size_t, 4>>();
    c.conv_kernel = j.at("conv_kernel").get<std::size_t>();
    c.pool1 = j.at("pool1").get<std::size_t>();
    c.pool2 = j.at("pool2").get<std::size_t>();
    c.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
    c.lstm_layers = j.at("lstm_layers").get<std::size_t>();
    c.bidirectional = j.at("bidirectional").get<bool>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    if (init_seed) *init_seed = j.value("init_seed", std::uint64_t{0});
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad model config JSON: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const ModelWeights& weights) {
  weights.validate();
  const auto bytes = encode_weights(weights);
  container::write_file(path, {reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
  container::write_text(path.string() + ".json", config_json(weights.config, weights.init_seed));
}

ModelWeights load_checkpoint(const std::filesystem::path& path) {
  const auto side = container::read_file(path.string() + ".json");
  const auto config = config_from_json({reinterpret_cast<const char*>(side.data()), side.size()});
  const auto bytes = container::read_file(path);
  return decode_weights({reinterpret_cast<const char*>(bytes.data()), bytes.size()}, config);
}

LatencyReport bench_latency(const ModelWeights& weights, std::size_t runs, std::size_t warmup, std::uint64_t seed) {
  if (runs == 0) throw ArgumentError("need at least one timed run");
  const auto& c = weights.config;
  EpochBatch b;
  b.num_sequences = 1;
  b.seq_len = 1;
  b.epoch_samples = c.epoch_samples();
  b.samples.resize(static_cast<Eigen::Index>(b.epoch_samples), static_cast<Eigen::Index>(c.input_channels));
  std::mt19937_64 rng(seed);
  for (Eigen::Index i = 0; i < b.samples.size(); ++i) b.samples.data()[i] = 2.0 * layers::uniform01(rng) - 1.0;
  LstmState state;
  double sink = 0.0;
  for (std::size_t i = 0; i < warmup; ++i) sink += forward(weights, b, &state)(0, 0);
  LatencyReport r;
  r.runs = runs;
  r.min_ms = std::numeric_limits<double>::infinity();
  double total = 0.0;
  for (std::size_t i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const Mat logits = forward(weights, b, &state);
    const Mat p = layers::softmax(logits);
    const auto t1 = std::chrono::steady_clock::now();
    sink += p(0, 0);
    const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    total += ms;
    r.min_ms = std::min(r.min_ms, ms);
    r.max_ms = std::max(r.max_ms, ms);
  }
  if (!std::isfinite(sink)) throw NumericError("non-finite output during benchmark");
  r.avg_ms = total / static_cast<double>(runs);
  r.throughput_per_s = 1000.0 / r.avg_ms;
  return r;
}

std::string latency_table(const LatencyReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "Device | Avg (ms/epoch) | Throughput (epochs/s) | Min (ms) | Max (ms)\n"
                "CPU    | %.3f | %.1f | %.3f | %.3f\n",
                r.avg_ms, r.throughput_per_s, r.min_ms, r.max_ms);
  return buf;
}

}  // namespace fsn::model

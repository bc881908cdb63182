#pragma once

// Depth-aware conditional stereo translator: U-Net generator, PatchGAN
// critic, WGAN-GP objective with L1 and weighted-MSE reconstruction terms.
// Requires libtorch.

#include <stereoid/core.hpp>
#include <stereoid/dataset.hpp>
#include <stereoid/depth.hpp>
#include <stereoid/rng.hpp>

#include <ATen/CPUGeneratorImpl.h>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace stereoid {

struct GeneratorConfig {
  int ngf = 64;
  int depth_levels = 5;
  int in_channels = 9;
  int out_channels = 3;
  bool normalize_outermost = false;  // IN in the full-resolution encoder/decoder blocks

  void validate() const {
    if (ngf < 1) throw ConfigError("ngf must be >= 1");
    if (depth_levels < 1) throw ConfigError("depth_levels must be >= 1");
    if (512 % (1 << std::min(depth_levels, 10)) != 0 || depth_levels > 9)
      throw ConfigError("512 must be divisible by 2^depth_levels");
    if (in_channels != 9 || out_channels != 3) throw ConfigError("generator maps 9 channels to 3");
  }
  std::vector<int> encoder_widths() const {
    std::vector<int> w;
    for (int i = 0; i < depth_levels; ++i) w.push_back(ngf << i);
    return w;
  }
  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

struct CriticConfig {
  int ndf = 64;
  int n_layers = 3;  // stride-2 blocks; 3 gives a 70x70 receptive field
  double leaky_slope = 0.2;
  int in_channels = 12;

  void validate() const {
    if (ndf < 1) throw ConfigError("ndf must be >= 1");
    if (n_layers < 1 || n_layers > 8) throw ConfigError("n_layers must lie in [1, 8]");
    if (!(leaky_slope >= 0 && leaky_slope < 1)) throw ConfigError("leaky_slope must lie in [0, 1)");
    if (in_channels != 12) throw ConfigError("critic expects 12 input channels");
  }
  std::vector<int> widths() const {
    std::vector<int> w;
    for (int i = 0; i <= n_layers; ++i) w.push_back(ndf << i);
    return w;
  }
  friend bool operator==(const CriticConfig&, const CriticConfig&) = default;
};

struct LossWeights {
  double lambda_gp = 10.0;
  double loss_alpha = 100.0;
  double loss_beta = 1.0;

  void validate() const {
    if (!(lambda_gp >= 0 && loss_alpha >= 0 && loss_beta >= 0)) throw ConfigError("loss weights must be nonnegative");
  }
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct TrainConfig {
  int batch_size = 64;
  double learning_rate = 1e-3;
  int critic_iterations = 5;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.9;
  std::int64_t max_steps = 2000;
  int early_stop_patience = 5;  // epochs; 0 disables early stopping
  std::uint64_t seed = 0;
  std::string checkpoint_dir;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (critic_iterations < 1) throw ConfigError("critic_iterations must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    if (early_stop_patience < 0) throw ConfigError("early_stop_patience must be >= 0");
  }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

namespace nn_detail {

/// Instance normalization without affine parameters; a 1x1 map passes through.
inline torch::Tensor instance_norm(const torch::Tensor& x) {
  if (x.size(2) * x.size(3) <= 1) return x;
  return torch::instance_norm(x, {}, {}, {}, {}, true, 0.0, 1e-5, false);
}

inline torch::nn::Conv2d conv(int in, int out, int k, int stride, int pad, bool bias = false) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(pad).bias(bias));
}

}  // namespace nn_detail

/// conv3x3 -> IN -> ReLU, twice.
struct DoubleConvImpl : torch::nn::Module {
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  bool normalize = true;

  DoubleConvImpl(int in, int out, bool norm = true) : normalize(norm) {
    conv1 = register_module("conv1", nn_detail::conv(in, out, 3, 1, 1, !norm));
    conv2 = register_module("conv2", nn_detail::conv(out, out, 3, 1, 1, !norm));
  }
  torch::Tensor forward(torch::Tensor x) {
    auto n = [this](const torch::Tensor& t) { return normalize ? nn_detail::instance_norm(t) : t; };
    x = torch::relu(n(conv1->forward(x)));
    return torch::relu(n(conv2->forward(x)));
  }
};
TORCH_MODULE(DoubleConv);

/// Encoder blocks of width ngf*2^i each followed by 2x2 max pooling, a
/// bottleneck of width ngf*2^L, and a mirrored decoder with transposed-conv
/// up-sampling and skip concatenation. Output passes through tanh. The
/// full-resolution blocks skip normalization unless normalize_outermost is
/// set: instance norm there would hide per-channel intensity offsets of the
/// input, which the output has to reproduce.
struct UNetGeneratorImpl : torch::nn::Module {
  GeneratorConfig cfg;
  std::vector<DoubleConv> down;
  DoubleConv bottleneck{nullptr};
  std::vector<torch::nn::ConvTranspose2d> up;
  std::vector<DoubleConv> dec;
  torch::nn::Conv2d head{nullptr};

  explicit UNetGeneratorImpl(GeneratorConfig c) : cfg(c) {
    cfg.validate();
    const int L = cfg.depth_levels, f = cfg.ngf;
    for (int i = 0; i < L; ++i)
      down.push_back(register_module("down" + std::to_string(i), DoubleConv(i == 0 ? cfg.in_channels : f << (i - 1), f << i,
                                                                       i > 0 || cfg.normalize_outermost)));
    bottleneck = register_module("bottleneck", DoubleConv(f << (L - 1), f << L));
    for (int i = L - 1; i >= 0; --i) {
      up.push_back(register_module("up" + std::to_string(i), torch::nn::ConvTranspose2d(
                                                                  torch::nn::ConvTranspose2dOptions(f << (i + 1), f << i, 2).stride(2))));
      dec.push_back(register_module("dec" + std::to_string(i), DoubleConv(f << (i + 1), f << i, i > 0 || cfg.normalize_outermost)));
    }
    head = register_module("head", nn_detail::conv(f, cfg.out_channels, 1, 1, 0, true));
  }

  torch::Tensor forward(torch::Tensor x) {
    if (x.dim() != 4 || x.size(1) != cfg.in_channels)
      throw ShapeError("generator expects N x " + std::to_string(cfg.in_channels) + " x H x W input");
    const std::int64_t unit = std::int64_t{1} << cfg.depth_levels;
    if (x.size(2) % unit != 0 || x.size(3) % unit != 0)
      throw ShapeError("input " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) +
                       " is not divisible by 2^depth_levels = " + std::to_string(unit));
    std::vector<torch::Tensor> skips;
    for (auto& block : down) {
      x = block->forward(x);
      skips.push_back(x);
      x = torch::max_pool2d(x, 2, 2);
    }
    x = bottleneck->forward(x);
    for (std::size_t k = 0; k < up.size(); ++k) {
      x = up[k]->forward(x);
      x = torch::cat({skips[skips.size() - 1 - k], x}, 1);
      x = dec[k]->forward(x);
    }
    return torch::tanh(head->forward(x));
  }
};
TORCH_MODULE(UNetGenerator);

/// PatchGAN critic: n_layers stride-2 4x4 blocks (conv, IN, LeakyReLU), one
/// stride-1 block, then a 1-channel 4x4 head. No output squashing.
struct PatchCriticImpl : torch::nn::Module {
  CriticConfig cfg;
  std::vector<torch::nn::Conv2d> blocks;
  torch::nn::Conv2d head{nullptr};

  explicit PatchCriticImpl(CriticConfig c) : cfg(c) {
    cfg.validate();
    int in = cfg.in_channels;
    for (int n = 0; n < cfg.n_layers; ++n) {
      blocks.push_back(register_module("block" + std::to_string(n), nn_detail::conv(in, cfg.ndf << n, 4, 2, 1)));
      in = cfg.ndf << n;
    }
    blocks.push_back(register_module("block" + std::to_string(cfg.n_layers), nn_detail::conv(in, cfg.ndf << cfg.n_layers, 4, 1, 1)));
    head = register_module("head", nn_detail::conv(cfg.ndf << cfg.n_layers, 1, 4, 1, 1, true));
  }

  /// Output side length for an input side length; < 1 means the input is too small.
  std::int64_t output_extent(std::int64_t s) const {
    for (int n = 0; n < cfg.n_layers; ++n) s = (s + 2 - 4) / 2 + 1;
    s = s + 2 - 4 + 1;
    return s + 2 - 4 + 1;
  }

  torch::Tensor forward(torch::Tensor x) {
    if (x.dim() != 4 || x.size(1) != cfg.in_channels)
      throw ShapeError("critic expects N x " + std::to_string(cfg.in_channels) + " x H x W input");
    if (output_extent(x.size(2)) < 1 || output_extent(x.size(3)) < 1)
      throw ShapeError("critic input " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) + " is too small");
    for (auto& b : blocks) x = torch::leaky_relu(nn_detail::instance_norm(b->forward(x)), cfg.leaky_slope);
    return head->forward(x);
  }
  torch::Tensor forward(const torch::Tensor& condition, const torch::Tensor& candidate) {
    return forward(torch::cat({condition, candidate}, 1));
  }
};
TORCH_MODULE(PatchCritic);

/// Receptive field of one output unit, in input pixels.
inline int critic_receptive_field(const CriticConfig& cfg) {
  std::vector<std::pair<int, int>> layers;  // kernel, stride
  for (int n = 0; n < cfg.n_layers; ++n) layers.emplace_back(4, 2);
  layers.emplace_back(4, 1);
  layers.emplace_back(4, 1);
  int rf = 1;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) rf = (rf - 1) * it->second + it->first;
  return rf;
}

// ---- losses ----------------------------------------------------------------

/// Critic objective to maximize: mean(real) - mean(fake) - lambda * gp.
inline torch::Tensor critic_objective(const torch::Tensor& real_scores, const torch::Tensor& fake_scores,
                                      const torch::Tensor& gp, double lambda_gp) {
  return real_scores.mean() - fake_scores.mean() - lambda_gp * gp;
}

/// Critic loss to minimize: -mean(real) + mean(fake) + lambda * gp.
inline torch::Tensor loss_wgan(const torch::Tensor& real_scores, const torch::Tensor& fake_scores,
                               const torch::Tensor& gp, double lambda_gp) {
  if (!real_scores.sizes().equals(fake_scores.sizes())) throw ShapeError("critic score maps differ in shape");
  return -critic_objective(real_scores, fake_scores, gp, lambda_gp);
}

inline torch::Tensor generator_adversarial_loss(const torch::Tensor& fake_scores) { return -fake_scores.mean(); }

inline torch::Tensor loss_l1(const torch::Tensor& fake, const torch::Tensor& real) {
  if (!fake.sizes().equals(real.sizes())) throw ShapeError("l1: tensors differ in shape");
  return (real - fake).abs().mean();
}

/// w = sigmoid(|y - G(x)|).
inline torch::Tensor weight_map(const torch::Tensor& fake, const torch::Tensor& real) {
  return torch::sigmoid((real - fake).abs());
}

/// mean(w * (y - G(x))^2) with w held constant.
inline torch::Tensor loss_wmse(const torch::Tensor& fake, const torch::Tensor& real) {
  if (!fake.sizes().equals(real.sizes())) throw ShapeError("wmse: tensors differ in shape");
  auto w = weight_map(fake, real).detach();
  return (w * (real - fake).square()).mean();
}

template <typename T>
T total_generator_loss(const T& adv, const T& l1, const T& wmse, const LossWeights& w) {
  return adv + w.loss_alpha * l1 + w.loss_beta * wmse;
}

using CriticFn = std::function<torch::Tensor(const torch::Tensor& condition, const torch::Tensor& candidate)>;

/// Mean over the batch of (||grad_xhat D(condition, xhat)||_2 - 1)^2 with
/// xhat = eps*real + (1-eps)*fake, eps ~ U[0,1) per sample. D is reduced to one
/// value per sample by averaging its score map. Keeps the graph so the
/// penalty can be back-propagated into D.
inline torch::Tensor gradient_penalty(const CriticFn& critic, const torch::Tensor& condition, const torch::Tensor& real,
                                      const torch::Tensor& fake, at::Generator& gen) {
  if (!real.sizes().equals(fake.sizes())) throw ShapeError("gradient penalty: real and fake differ in shape");
  const auto n = real.size(0);
  auto eps = torch::rand({n, 1, 1, 1}, gen, real.options().requires_grad(false));
  auto xhat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(true);
  auto scores = critic(condition, xhat);
  auto per_sample = scores.reshape({n, -1}).mean(1);
  torch::Tensor grad;
  if (per_sample.requires_grad()) {
    grad = torch::autograd::grad({per_sample.sum()}, {xhat}, {}, true, true, true)[0];
  }
  if (!grad.defined()) grad = torch::zeros_like(xhat);
  if (!torch::isfinite(grad).all().item<bool>()) throw NumericError("gradient penalty: non-finite critic gradient");
  auto norm = grad.reshape({n, -1}).norm(2, 1);
  return (norm - 1).square().mean();
}

// ---- data ------------------------------------------------------------------

/// One training example in the signed model range.
struct PainterSample {
  TensorImage left;
  TensorImage depth_left;   // 3-channel depth context
  TensorImage depth_right;
  TensorImage right;
};

inline PainterSample make_sample(const StereoFrame& frame, const DepthMap& depth_left, const DepthMap& depth_right) {
  auto s = [](const TensorImage& img) { return convert_range(img, ValueRange::signed_unit); };
  return {s(frame.left), s(depth_to_context(depth_left)), s(depth_to_context(depth_right)), s(frame.right)};
}

/// Preprocesses the frame and both depth contexts with one shared crop window.
inline PainterSample preprocess_sample(const StereoFrame& frame, const DepthMap& depth_left, const DepthMap& depth_right,
                                       PreprocessMode mode, const PreprocessConfig& cfg, std::uint64_t seed) {
  StereoFrame eyes = preprocess(frame, mode, cfg, seed);
  StereoFrame depth = preprocess(StereoFrame(depth_to_context(depth_left), depth_to_context(depth_right), frame.frame_id),
                                 mode, cfg, seed);
  auto s = [](const TensorImage& img) { return convert_range(img, ValueRange::signed_unit); };
  return {s(eyes.left), s(depth.left), s(depth.right), s(eyes.right)};
}

/// Indexed sample provider; the seed drives any random cropping.
struct SampleSource {
  std::size_t size = 0;
  std::function<PainterSample(std::size_t index, std::uint64_t seed)> load;
};

inline SampleSource in_memory_source(std::shared_ptr<const std::vector<PainterSample>> samples) {
  SampleSource src;
  src.size = samples->size();
  src.load = [samples](std::size_t i, std::uint64_t) { return (*samples)[i]; };
  return src;
}

inline torch::Tensor image_to_tensor(const TensorImage& img) {
  auto t = torch::empty({img.channels(), img.height(), img.width()}, torch::kFloat32);
  std::memcpy(t.data_ptr<float>(), img.data().data(), img.size() * sizeof(float));
  return t;
}

inline TensorImage tensor_to_image(const torch::Tensor& t, ValueRange range) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  if (c.dim() == 4 && c.size(0) == 1) c = c[0];
  if (c.dim() != 3) throw ShapeError("expected a C x H x W tensor");
  const float lo = range_min(range), hi = range_max(range);
  c = c.clamp(lo, hi);
  std::vector<float> data(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
  return TensorImage(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)), static_cast<int>(c.size(2)), range,
                     std::move(data));
}

struct Batch {
  torch::Tensor condition;  // N x 9 x H x W
  torch::Tensor real;       // N x 3 x H x W
  torch::Tensor left;       // N x 3 x H x W
};

inline Batch stack_samples(const std::vector<PainterSample>& samples) {
  std::vector<torch::Tensor> cond, real, left;
  for (const auto& s : samples) {
    if (!s.left.same_extent(s.right) || !s.left.same_extent(s.depth_left) || !s.left.same_extent(s.depth_right))
      throw ShapeError("painter sample inputs differ in extent");
    auto l = image_to_tensor(s.left);
    left.push_back(l);
    cond.push_back(torch::cat({l, image_to_tensor(s.depth_left), image_to_tensor(s.depth_right)}, 0));
    real.push_back(image_to_tensor(s.right));
  }
  return {torch::stack(cond), torch::stack(real), torch::stack(left)};
}

// ---- model -----------------------------------------------------------------

struct TrainState {
  std::int64_t generator_steps = 0;
  std::int64_t critic_steps = 0;
  std::int64_t epochs = 0;
  double best_val_l1 = std::numeric_limits<double>::infinity();
  std::int64_t epochs_without_improvement = 0;
  friend bool operator==(const TrainState&, const TrainState&) = default;
};

/// Generator, critic, their optimizers and training counters. Parameter
/// initialization is a function of train_cfg.seed.
class PainterModel {
 public:
  GeneratorConfig generator_cfg;
  CriticConfig critic_cfg;
  LossWeights loss;
  TrainConfig train_cfg;
  TrainState state;
  UNetGenerator generator{nullptr};
  PatchCritic critic{nullptr};

  PainterModel(GeneratorConfig g, CriticConfig c, LossWeights w, TrainConfig t)
      : generator_cfg(g), critic_cfg(c), loss(w), train_cfg(std::move(t)) {
    generator_cfg.validate();
    critic_cfg.validate();
    loss.validate();
    train_cfg.validate();
    torch::manual_seed(derive_seed(train_cfg.seed, 0x9e11));
    generator = UNetGenerator(generator_cfg);
    critic = PatchCritic(critic_cfg);
    make_optimizers();
  }

  torch::optim::Adam& generator_optimizer() { return *opt_g_; }
  torch::optim::Adam& critic_optimizer() { return *opt_d_; }

  /// Rebuilds both optimizers (fresh moments) with the current train_cfg.
  void make_optimizers() {
    auto opts = torch::optim::AdamOptions(train_cfg.learning_rate).betas({train_cfg.adam_beta1, train_cfg.adam_beta2});
    opt_g_ = std::make_unique<torch::optim::Adam>(generator->parameters(), opts);
    opt_d_ = std::make_unique<torch::optim::Adam>(critic->parameters(), opts);
  }

  void to(torch::Dtype dtype) {
    generator->to(dtype);
    critic->to(dtype);
    make_optimizers();
  }

 private:
  std::unique_ptr<torch::optim::Adam> opt_g_;
  std::unique_ptr<torch::optim::Adam> opt_d_;
};

/// Synthetic right eye (signed range) from the left eye and both depth contexts.
inline TensorImage generator_forward(PainterModel& model, const TensorImage& left, const TensorImage& depth_left,
                                     const TensorImage& depth_right) {
  for (const TensorImage* t : {&left, &depth_left, &depth_right}) {
    if (t->range() != ValueRange::signed_unit) throw DataError("generator inputs must be in signed range");
    if (t->channels() != 3) throw ShapeError("generator inputs must have 3 channels, got " + t->dims_string());
    if (!t->same_extent(left)) throw ShapeError("generator inputs differ in extent");
  }
  torch::NoGradGuard guard;
  auto x = torch::cat({image_to_tensor(left), image_to_tensor(depth_left), image_to_tensor(depth_right)}, 0).unsqueeze(0);
  return tensor_to_image(model.generator->forward(x), ValueRange::signed_unit);
}

/// Unit-range synthetic right eye for a frame, the form the distance module consumes.
inline TensorImage translate_frame(PainterModel& model, const StereoFrame& frame, const DepthMap& depth_left,
                                   const DepthMap& depth_right) {
  auto s = make_sample(frame, depth_left, depth_right);
  return convert_range(generator_forward(model, s.left, s.depth_left, s.depth_right), ValueRange::unit);
}

// ---- checkpoint ------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'S', 'T', 'I', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

inline nlohmann::ordered_json configs_json(const PainterModel& m) {
  nlohmann::ordered_json j;
  j["generator"] = {{"ngf", m.generator_cfg.ngf}, {"depth_levels", m.generator_cfg.depth_levels},
                    {"in_channels", m.generator_cfg.in_channels}, {"out_channels", m.generator_cfg.out_channels},
                    {"normalize_outermost", m.generator_cfg.normalize_outermost}};
  j["critic"] = {{"ndf", m.critic_cfg.ndf}, {"n_layers", m.critic_cfg.n_layers},
                 {"leaky_slope", m.critic_cfg.leaky_slope}, {"in_channels", m.critic_cfg.in_channels}};
  j["loss"] = {{"lambda_gp", m.loss.lambda_gp}, {"loss_alpha", m.loss.loss_alpha}, {"loss_beta", m.loss.loss_beta}};
  const auto& t = m.train_cfg;
  j["train"] = {{"batch_size", t.batch_size},         {"learning_rate", t.learning_rate},
                {"critic_iterations", t.critic_iterations}, {"adam_beta1", t.adam_beta1},
                {"adam_beta2", t.adam_beta2},         {"max_steps", t.max_steps},
                {"early_stop_patience", t.early_stop_patience}, {"seed", t.seed},
                {"checkpoint_dir", t.checkpoint_dir}};
  const auto& s = m.state;
  j["state"] = {{"generator_steps", s.generator_steps},
                {"critic_steps", s.critic_steps},
                {"epochs", s.epochs},
                {"best_val_l1", std::isfinite(s.best_val_l1) ? nlohmann::ordered_json(s.best_val_l1) : nlohmann::ordered_json(nullptr)},
                {"epochs_without_improvement", s.epochs_without_improvement}};
  // Batch order and interpolation noise are pure functions of (seed, step).
  j["rng"] = {{"scheme", "derived-per-step"}, {"seed", t.seed}, {"next_generator_step", s.generator_steps}};
  return j;
}

struct NamedTensor {
  std::string name;
  torch::Tensor tensor;
};

inline std::vector<NamedTensor> parameter_tensors(PainterModel& m) {
  std::vector<NamedTensor> out;
  for (auto& p : m.generator->named_parameters()) out.push_back({"generator." + p.key(), p.value()});
  for (auto& p : m.critic->named_parameters()) out.push_back({"critic." + p.key(), p.value()});
  return out;
}

/// Adam moments keyed by parameter name; the step count travels in the header.
inline void collect_adam(torch::optim::Adam& opt, const torch::OrderedDict<std::string, torch::Tensor>& params,
                         const std::string& prefix, std::vector<NamedTensor>& tensors, nlohmann::ordered_json& steps) {
  auto& state = opt.state();
  for (auto& p : params) {
    auto it = state.find(p.value().unsafeGetTensorImpl());
    if (it == state.end()) continue;
    auto& s = static_cast<torch::optim::AdamParamState&>(*it->second);
    steps[p.key()] = s.step();
    tensors.push_back({prefix + p.key() + ".exp_avg", s.exp_avg()});
    tensors.push_back({prefix + p.key() + ".exp_avg_sq", s.exp_avg_sq()});
  }
}

inline std::string dtype_name(const torch::Tensor& t) {
  if (t.scalar_type() == torch::kFloat32) return "f32";
  if (t.scalar_type() == torch::kFloat64) return "f64";
  throw DataError("checkpoint: unsupported tensor dtype");
}

}  // namespace ckpt_detail

/// Magic, format version, JSON header, then raw little-endian tensor data.
/// Written to a temporary file and renamed into place.
inline void save_checkpoint(PainterModel& model, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little);
  using namespace ckpt_detail;
  auto tensors = parameter_tensors(model);
  nlohmann::ordered_json steps_g = nlohmann::ordered_json::object(), steps_d = nlohmann::ordered_json::object();
  collect_adam(model.generator_optimizer(), model.generator->named_parameters(), "adam_generator.", tensors, steps_g);
  collect_adam(model.critic_optimizer(), model.critic->named_parameters(), "adam_critic.", tensors, steps_d);

  nlohmann::ordered_json header = configs_json(model);
  header["adam_steps"] = {{"generator", steps_g}, {"critic", steps_d}};
  auto table = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  std::vector<torch::Tensor> blobs;
  for (auto& nt : tensors) {
    auto c = nt.tensor.detach().contiguous().cpu();
    const std::uint64_t bytes = c.numel() * c.element_size();
    table.push_back({{"name", nt.name}, {"dtype", dtype_name(c)}, {"shape", c.sizes().vec()}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
    blobs.push_back(c);
  }
  header["tensors"] = table;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + tmp.string() + "'");
    out.write(kCheckpointMagic, 8);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (auto& b : blobs) out.write(static_cast<const char*>(b.data_ptr()), static_cast<std::streamsize>(b.numel() * b.element_size()));
    if (!out) throw DataError("short write on checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

struct CheckpointContents {
  nlohmann::json header;
  std::string data;
};

inline CheckpointContents read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw DataError("checkpoint: bad magic in '" + path.string() + "'");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!in || version != kCheckpointVersion)
    throw DataError("checkpoint: field 'version' is " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("checkpoint: truncated header");
  CheckpointContents c;
  try {
    c.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: header is not JSON: ") + e.what());
  }
  c.data.assign(std::istreambuf_iterator<char>(in), {});
  return c;
}

namespace ckpt_detail {

inline void copy_into(const nlohmann::json& entry, const std::string& data, torch::Tensor& dst) {
  const auto name = entry.at("name").get<std::string>();
  auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
  if (!dst.sizes().equals(shape)) {
    std::ostringstream os;
    os << "checkpoint: field '" << name << "' has shape " << c10::IntArrayRef(shape) << ", model expects " << dst.sizes();
    throw DataError(os.str());
  }
  const auto dtype = entry.at("dtype").get<std::string>() == "f64" ? torch::kFloat64 : torch::kFloat32;
  const auto offset = entry.at("offset").get<std::uint64_t>(), bytes = entry.at("bytes").get<std::uint64_t>();
  if (offset + bytes > data.size()) throw DataError("checkpoint: field '" + name + "' is truncated");
  auto src = torch::empty(shape, dtype);
  std::memcpy(src.data_ptr(), data.data() + offset, bytes);
  torch::NoGradGuard g;
  dst.copy_(src.to(dst.scalar_type()));
}

inline void restore_adam(torch::optim::Adam& opt, const torch::OrderedDict<std::string, torch::Tensor>& params,
                         const std::string& prefix, const nlohmann::json& steps,
                         const std::map<std::string, nlohmann::json>& table, const std::string& data) {
  for (auto& p : params) {
    if (!steps.contains(p.key())) continue;
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(steps.at(p.key()).get<std::int64_t>());
    auto load = [&](const std::string& suffix) {
      auto it = table.find(prefix + p.key() + suffix);
      if (it == table.end()) throw DataError("checkpoint: missing field '" + prefix + p.key() + suffix + "'");
      auto t = torch::zeros_like(p.value());
      copy_into(it->second, data, t);
      return t;
    };
    s->exp_avg(load(".exp_avg"));
    s->exp_avg_sq(load(".exp_avg_sq"));
    opt.state()[p.value().unsafeGetTensorImpl()] = std::move(s);
  }
}

}  // namespace ckpt_detail

/// Rebuilds the model from the header's configs and restores every tensor.
/// When `expect` is given, a differing generator config is an error naming the field.
inline PainterModel load_checkpoint(const std::filesystem::path& path, const GeneratorConfig* expect = nullptr) {
  auto c = read_checkpoint_file(path);
  const auto& h = c.header;
  try {
    GeneratorConfig g{h.at("generator").at("ngf").get<int>(), h.at("generator").at("depth_levels").get<int>(),
                      h.at("generator").at("in_channels").get<int>(), h.at("generator").at("out_channels").get<int>(),
                      h.at("generator").at("normalize_outermost").get<bool>()};
    if (expect) {
      auto mismatch = [](const char* field, int got, int want) {
        if (got != want)
          throw DataError(std::string("checkpoint: field '") + field + "' is " + std::to_string(got) + ", expected " +
                          std::to_string(want));
      };
      mismatch("ngf", g.ngf, expect->ngf);
      mismatch("depth_levels", g.depth_levels, expect->depth_levels);
    }
    const auto& cj = h.at("critic");
    CriticConfig cc{cj.at("ndf").get<int>(), cj.at("n_layers").get<int>(), cj.at("leaky_slope").get<double>(),
                    cj.at("in_channels").get<int>()};
    const auto& lj = h.at("loss");
    LossWeights lw{lj.at("lambda_gp").get<double>(), lj.at("loss_alpha").get<double>(), lj.at("loss_beta").get<double>()};
    const auto& tj = h.at("train");
    TrainConfig tc;
    tc.batch_size = tj.at("batch_size").get<int>();
    tc.learning_rate = tj.at("learning_rate").get<double>();
    tc.critic_iterations = tj.at("critic_iterations").get<int>();
    tc.adam_beta1 = tj.at("adam_beta1").get<double>();
    tc.adam_beta2 = tj.at("adam_beta2").get<double>();
    tc.max_steps = tj.at("max_steps").get<std::int64_t>();
    tc.early_stop_patience = tj.at("early_stop_patience").get<int>();
    tc.seed = tj.at("seed").get<std::uint64_t>();
    tc.checkpoint_dir = tj.at("checkpoint_dir").get<std::string>();

    PainterModel model(g, cc, lw, tc);
    const auto& sj = h.at("state");
    model.state.generator_steps = sj.at("generator_steps").get<std::int64_t>();
    model.state.critic_steps = sj.at("critic_steps").get<std::int64_t>();
    model.state.epochs = sj.at("epochs").get<std::int64_t>();
    model.state.best_val_l1 =
        sj.at("best_val_l1").is_null() ? std::numeric_limits<double>::infinity() : sj.at("best_val_l1").get<double>();
    model.state.epochs_without_improvement = sj.at("epochs_without_improvement").get<std::int64_t>();

    std::map<std::string, nlohmann::json> table;
    for (const auto& e : h.at("tensors")) table[e.at("name").get<std::string>()] = e;
    for (auto& nt : ckpt_detail::parameter_tensors(model)) {
      auto it = table.find(nt.name);
      if (it == table.end()) throw DataError("checkpoint: missing field '" + nt.name + "'");
      ckpt_detail::copy_into(it->second, c.data, nt.tensor);
    }
    ckpt_detail::restore_adam(model.generator_optimizer(), model.generator->named_parameters(), "adam_generator.",
                              h.at("adam_steps").at("generator"), table, c.data);
    ckpt_detail::restore_adam(model.critic_optimizer(), model.critic->named_parameters(), "adam_critic.",
                              h.at("adam_steps").at("critic"), table, c.data);
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  }
}

// ---- training --------------------------------------------------------------

struct StepRecord {
  std::int64_t step = 0;
  double d_loss = 0;  // mean over the step's critic iterations
  double g_adv = 0;
  double g_l1 = 0;
  double g_wmse = 0;
  double g_total = 0;
  double gp = 0;  // mean over the step's critic iterations
  double lr = 0;
  double wall_ms = 0;
};

inline nlohmann::ordered_json step_record_json(const StepRecord& r) {
  return {{"step", r.step},     {"d_loss", r.d_loss}, {"g_adv", r.g_adv}, {"g_l1", r.g_l1}, {"g_wmse", r.g_wmse},
          {"g_total", r.g_total}, {"gp", r.gp},       {"lr", r.lr},       {"wall_ms", r.wall_ms}};
}

struct ValidationRecord {
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  double val_l1 = 0;  // unit range
  bool improved = false;
};

struct TrainResult {
  std::vector<StepRecord> log;
  std::vector<ValidationRecord> validation;
  double best_val_l1 = std::numeric_limits<double>::infinity();
  bool stopped_early = false;
  std::vector<torch::Tensor> best_generator;  // parameter snapshot at the best validation
};

namespace train_detail {

inline std::vector<std::size_t> draw_batch(std::size_t n, int batch, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  const std::size_t k = std::min<std::size_t>(n, static_cast<std::size_t>(batch));
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(k);
  return idx;
}

inline Batch load_batch(const SampleSource& src, const TrainConfig& cfg, std::int64_t step, int slot,
                        torch::Dtype dtype) {
  const std::uint64_t key = static_cast<std::uint64_t>(step) * (cfg.critic_iterations + 1) + slot;
  auto idx = draw_batch(src.size, cfg.batch_size, derive_seed(cfg.seed, 0xba7c4, key));
  std::vector<PainterSample> samples;
  for (std::size_t j = 0; j < idx.size(); ++j) samples.push_back(src.load(idx[j], derive_seed(cfg.seed, 0xc209 + j, key)));
  Batch b = stack_samples(samples);
  return {b.condition.to(dtype), b.real.to(dtype), b.left.to(dtype)};
}

inline void require_finite(double v, const char* what, std::int64_t step) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what + " at step " + std::to_string(step));
}

inline torch::Dtype model_dtype(PainterModel& m) { return m.generator->parameters().front().scalar_type(); }

}  // namespace train_detail

/// One generator step preceded by critic_iterations critic updates, each on a
/// fresh batch. Batches and interpolation noise depend only on (seed, step).
inline StepRecord train_step(PainterModel& model, const SampleSource& train) {
  using namespace train_detail;
  const auto& cfg = model.train_cfg;
  const auto dtype = model_dtype(model);
  const std::int64_t step = model.state.generator_steps;
  const auto t0 = std::chrono::steady_clock::now();
  StepRecord rec;
  rec.step = step + 1;
  rec.lr = cfg.learning_rate;
  CriticFn critic_fn = [&](const torch::Tensor& c, const torch::Tensor& x) { return model.critic->forward(c, x); };

  for (auto& p : model.critic->parameters()) p.requires_grad_(true);
  for (int k = 0; k < cfg.critic_iterations; ++k) {
    Batch b = load_batch(train, cfg, step, k, dtype);
    torch::Tensor fake;
    {
      torch::NoGradGuard g;
      fake = model.generator->forward(b.condition);
    }
    auto real_scores = model.critic->forward(b.condition, b.real);
    auto fake_scores = model.critic->forward(b.condition, fake);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(derive_seed(cfg.seed, 0xe95, static_cast<std::uint64_t>(step) * cfg.critic_iterations + k));
    auto gp = gradient_penalty(critic_fn, b.condition, b.real, fake, gen);
    auto d_loss = loss_wgan(real_scores, fake_scores, gp, model.loss.lambda_gp);
    const double dl = d_loss.item<double>();
    require_finite(dl, "critic loss", rec.step);
    model.critic_optimizer().zero_grad();
    d_loss.backward();
    model.critic_optimizer().step();
    ++model.state.critic_steps;
    rec.d_loss += dl / cfg.critic_iterations;
    rec.gp += gp.item<double>() / cfg.critic_iterations;
  }

  for (auto& p : model.critic->parameters()) p.requires_grad_(false);
  Batch b = load_batch(train, cfg, step, cfg.critic_iterations, dtype);
  auto fake = model.generator->forward(b.condition);
  auto adv = generator_adversarial_loss(model.critic->forward(b.condition, fake));
  auto l1 = loss_l1(fake, b.real);
  auto wmse = loss_wmse(fake, b.real);
  auto total = total_generator_loss(adv, l1, wmse, model.loss);
  rec.g_adv = adv.item<double>();
  rec.g_l1 = l1.item<double>();
  rec.g_wmse = wmse.item<double>();
  rec.g_total = total.item<double>();
  for (double v : {rec.g_adv, rec.g_l1, rec.g_wmse, rec.g_total}) require_finite(v, "generator loss", rec.step);
  model.generator_optimizer().zero_grad();
  total.backward();
  model.generator_optimizer().step();
  for (auto& p : model.critic->parameters()) p.requires_grad_(true);
  ++model.state.generator_steps;
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

/// Mean unit-range L1 between the generator output and the real right eye.
inline double validation_l1(PainterModel& model, const SampleSource& val, int batch_size = 16) {
  if (val.size == 0) throw DataError("validation split is empty");
  torch::NoGradGuard g;
  const auto dtype = train_detail::model_dtype(model);
  double acc = 0;
  for (std::size_t i = 0; i < val.size; i += batch_size) {
    std::vector<PainterSample> s;
    for (std::size_t j = i; j < std::min(val.size, i + batch_size); ++j) s.push_back(val.load(j, 0));
    Batch b = stack_samples(s);
    auto fake = model.generator->forward(b.condition.to(dtype));
    acc += ((fake - b.real.to(dtype)).abs().reshape({fake.size(0), -1}).mean(1) / 2).sum().item<double>();
  }
  return acc / static_cast<double>(val.size);
}

/// Same metric with the left eye standing in for the prediction.
inline double identity_l1(const SampleSource& val) {
  if (val.size == 0) throw DataError("validation split is empty");
  double acc = 0;
  for (std::size_t i = 0; i < val.size; ++i) {
    auto s = val.load(i, 0);
    double d = 0;
    for (std::size_t k = 0; k < s.left.size(); ++k) d += std::abs(static_cast<double>(s.left.data()[k]) - s.right.data()[k]);
    acc += d / static_cast<double>(s.left.size()) / 2;
  }
  return acc / static_cast<double>(val.size);
}

inline std::vector<torch::Tensor> snapshot(torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (auto& p : m.parameters()) out.push_back(p.detach().clone());
  return out;
}

inline void restore(torch::nn::Module& m, const std::vector<torch::Tensor>& snap) {
  torch::NoGradGuard g;
  auto params = m.parameters();
  if (params.size() != snap.size()) throw DataError("parameter snapshot does not match model");
  for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(snap[i]);
}

using StepCallback = std::function<void(const StepRecord&)>;

/// Alternating WGAN-GP training until max_steps generator steps or early stop.
/// Validation runs once per epoch (ceil(n_train / batch_size) steps) and at the
/// end; best.ckpt, last.ckpt and a snapshot on failure go to checkpoint_dir.
inline TrainResult train(PainterModel& model, const SampleSource& train_src, const SampleSource& val_src,
                         const StepCallback& on_step = {}) {
  if (train_src.size == 0) throw DataError("training split is empty");
  const auto& cfg = model.train_cfg;
  cfg.validate();
  torch::set_num_threads(1);
  const std::filesystem::path dir = cfg.checkpoint_dir;
  const std::int64_t per_epoch =
      static_cast<std::int64_t>((train_src.size + cfg.batch_size - 1) / static_cast<std::size_t>(cfg.batch_size));
  TrainResult result;
  result.best_val_l1 = model.state.best_val_l1;

  auto validate = [&] {
    if (val_src.size == 0) return;
    ValidationRecord v{model.state.epochs, model.state.generator_steps, validation_l1(model, val_src), false};
    if (v.val_l1 < model.state.best_val_l1) {
      model.state.best_val_l1 = v.val_l1;
      model.state.epochs_without_improvement = 0;
      v.improved = true;
      result.best_generator = snapshot(*model.generator);
      if (!dir.empty()) save_checkpoint(model, dir / "best.ckpt");
    } else {
      ++model.state.epochs_without_improvement;
    }
    result.best_val_l1 = model.state.best_val_l1;
    result.validation.push_back(v);
  };

  bool validated_last = false;
  while (model.state.generator_steps < cfg.max_steps) {
    StepRecord rec;
    try {
      rec = train_step(model, train_src);
    } catch (const NumericError&) {
      if (!dir.empty()) save_checkpoint(model, dir / ("nonfinite_step" + std::to_string(model.state.generator_steps + 1) + ".ckpt"));
      throw;
    }
    result.log.push_back(rec);
    if (on_step) on_step(rec);
    validated_last = false;
    if (model.state.generator_steps % per_epoch == 0) {
      ++model.state.epochs;
      validate();
      validated_last = true;
      if (cfg.early_stop_patience > 0 && model.state.epochs_without_improvement >= cfg.early_stop_patience) {
        result.stopped_early = true;
        break;
      }
    }
  }
  if (!validated_last) validate();
  if (!dir.empty()) save_checkpoint(model, dir / "last.ckpt");
  return result;
}

inline void write_training_log(const std::filesystem::path& path, const std::vector<StepRecord>& log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (const auto& r : log) out << step_record_json(r).dump() << '\n';
}

}  // namespace stereoid

#pragma once

// Pretrained relative-depth model loaded from a TorchScript file. Requires libtorch.

#include <stereoid/depth.hpp>
#include <stereoid/image_ops.hpp>

#include <torch/script.h>

#include <filesystem>
#include <mutex>
#include <string>

namespace stereoid {

/// Input: 1x3xSxS unit-range tensor (S = declared input size). Output: any
/// tensor with S*S elements, read as relative inverse depth. Results are
/// resized back to the source image extent.
class TorchScriptDepthBackend : public DepthBackend {
 public:
  explicit TorchScriptDepthBackend(const std::filesystem::path& model_file, int input_size = 512)
      : path_(model_file), input_size_(input_size) {
    if (input_size < 1) throw ConfigError("depth model input size must be positive");
    if (!std::filesystem::exists(model_file)) throw ConfigError("depth model '" + model_file.string() + "' not found");
    try {
      module_ = torch::jit::load(model_file.string());
    } catch (const c10::Error& e) {
      throw ConfigError("cannot load depth model '" + model_file.string() + "': " + e.what_without_backtrace());
    }
    module_.eval();
  }

  DepthMap infer(const TensorImage& image) const override {
    const TensorImage in = resize_bilinear(image, input_size_, input_size_);
    auto x = torch::from_blob(const_cast<float*>(in.data().data()), {1, 3, input_size_, input_size_}, torch::kFloat32).clone();
    torch::Tensor y;
    {
      std::lock_guard lock(mu_);
      torch::NoGradGuard g;
      try {
        y = module_.forward({x}).toTensor();
      } catch (const c10::Error& e) {
        throw NumericError("depth model inference failed: " + std::string(e.what_without_backtrace()));
      }
    }
    y = y.to(torch::kFloat32).contiguous();
    if (y.numel() != static_cast<std::int64_t>(input_size_) * input_size_)
      throw ShapeError("depth model returned " + std::to_string(y.numel()) + " values, expected " +
                       std::to_string(input_size_ * input_size_));
    if (!torch::isfinite(y).all().item<bool>()) throw NumericError("depth model returned non-finite values");
    // Shift to nonnegative before resampling so the unit-range resize accepts it.
    const float lo = y.min().item<float>(), hi = y.max().item<float>();
    const float span = hi > lo ? hi - lo : 1.0f;
    auto unit = ((y - lo) / span).clamp(0.0f, 1.0f);
    std::vector<float> v(unit.data_ptr<float>(), unit.data_ptr<float>() + unit.numel());
    TensorImage small(1, input_size_, input_size_, ValueRange::unit, std::move(v));
    TensorImage full = resize_bilinear(small, image.width(), image.height());
    auto p = full.plane(0);
    return DepthMap(image.height(), image.width(), std::vector<float>(p.begin(), p.end()), DepthConvention::relative_inverse,
                    false);
  }

  bool thread_safe() const override { return true; }  // calls are serialized internally
  std::string name() const override { return "torchscript:" + path_.filename().string(); }
  int input_size() const noexcept { return input_size_; }

 private:
  std::filesystem::path path_;
  int input_size_;
  mutable torch::jit::Module module_;
  mutable std::mutex mu_;
};

}  // namespace stereoid

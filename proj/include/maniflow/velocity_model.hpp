#pragma once

#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "maniflow/nn.hpp"
#include "maniflow/tensor.hpp"

namespace maniflow {

struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ModelVariant { kDitx, kPlainMlp };
enum class ProprioMode { kToken, kAdaln };

struct ModelConfig {
  ModelVariant variant = ModelVariant::kDitx;
  int token_dim = 128;  // d, divisible by heads (and by 4 for the time features)
  int depth = 4;
  int heads = 4;
  int ff_mult = 4;
  int action_horizon = 4;  // H
  int action_dim = 2;      // A
  int obs_history = 2;     // K
  int obs_dim = 0;         // raw observation width; 0 = no observation token
  int proprio_dim = 0;     // raw proprioception width (K steps stacked); 0 = absent
  int cond_token_budget = 8;
  float proprio_mask_prob = 0.25f;
  ProprioMode proprio_mode = ProprioMode::kToken;
  bool cross_attn_first = false;  // swap the self/cross branch order
  int mlp_hidden = 128;           // plain-MLP hidden width
  int time_embed_dim = 64;        // plain-MLP time embedding width

  int cond_token_count() const {
    int m = obs_dim > 0 ? 1 : 0;
    if (proprio_dim > 0 && proprio_mode == ProprioMode::kToken) ++m;
    return m;
  }

  void validate() const {
    if (action_horizon < 1) throw ModelError("model: action horizon must be >= 1");
    if (action_dim < 1) throw ModelError("model: action dim must be >= 1");
    if (proprio_mask_prob < 0.0f || proprio_mask_prob > 1.0f)
      throw ModelError("model: proprio mask probability must be in [0,1]");
    if (variant == ModelVariant::kDitx) {
      if (token_dim % heads != 0) throw ModelError("model: token dim must be divisible by heads");
      if (token_dim % 4 != 0) throw ModelError("model: token dim must be divisible by 4");
      if (depth < 1) throw ModelError("model: depth must be >= 1");
      if (cond_token_count() == 0)
        throw ModelError("model: DiT-X needs at least one condition token (cross-attention key)");
      if (cond_token_count() > cond_token_budget)
        throw ModelError("model: condition tokens exceed the configured budget");
      if (proprio_mode == ProprioMode::kAdaln && proprio_dim <= 0)
        throw ModelError("model: AdaLN proprio mode needs proprio inputs");
    } else {
      if (mlp_hidden < 1) throw ModelError("model: MLP hidden width must be >= 1");
      if (time_embed_dim % 4 != 0 || time_embed_dim < 4)
        throw ModelError("model: time embedding width must be a positive multiple of 4");
    }
  }
};

// Raw per-batch conditioning, host-side.
struct ConditionBatch {
  int batch = 0;
  std::vector<float> obs;      // [batch, obs_dim]
  std::vector<float> proprio;  // [batch, proprio_dim]
};

// The conditional velocity network v(x_t, t, dt | condition), evaluated with
// an explicit parameter set so the same architecture can run live or EMA
// shadow weights.
class VelocityModel {
public:
  virtual ~VelocityModel() = default;
  virtual const ModelConfig& config() const = 0;

  // x_t: [B, H, A]; t and dt hold one entry per instance; returns [B, H, A].
  // `training` enables proprioception masking, which draws from mask_rng.
  virtual Tensor forward(const ParamStore& ps, const Tensor& x_t, std::span<const float> t,
                         std::span<const float> dt, const ConditionBatch* cond, bool training,
                         RngStream* mask_rng) const = 0;

  virtual void init_params(ParamStore& ps, RngStream init_stream) const = 0;
};

std::unique_ptr<VelocityModel> make_velocity_model(const ModelConfig& cfg);

}  // namespace maniflow

#pragma once

// Heavy / light transformer encoders and the fusion of cached heavy
// activations into selected light layers.
//
// Every layer is pre-norm:
//   h1 = Norm(x);  a = SelfAttn(h1);  y = a + x;  h2 = Norm(y);  m = MLP(h2);  x' = m + y
// The heavy encoder extracts one of {h1, a, y, h2, m, x'} per mapped layer;
// the light encoder replaces the tensor at the same point with
// Fuse(tensor, heavy_c, heavy_a). At the default point (right after attention)
// the MLP reads Norm(a) in PreFusion mode and Norm(y) in PostFusion mode.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eave/config.hpp"
#include "eave/tensor.hpp"

namespace eave {

class Rng;

enum class SequenceKind : std::uint8_t { Context = 0, Attribute = 1 };

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;

// 1 for every non-pad token id.
Mask pad_mask(std::span<const int> ids);

// Heavy-layer index feeding each light layer. Throws std::invalid_argument
// when the scheme cannot produce exactly `light_layers` valid indices.
std::vector<std::size_t> layer_mapping(std::size_t heavy_layers, std::size_t light_layers,
                                       const LayerMapping& mapping);

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct LayerParams {
  Tensor<T> attn_norm;
  AttentionParams<T> attn;
  Tensor<T> mlp_norm;
  Tensor<T> w_in, b_in, w_out, b_out;
};

template <typename T>
struct EncoderParams {
  Tensor<T> token_embedding;
  Tensor<T> position_embedding;
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_norm;  // light encoder only
};

template <typename T>
struct FusionParams {
  std::vector<Tensor<T>> adaptor;                // [d_heavy, d_light] per light layer
  std::vector<Tensor<T>> learned_alpha;          // [1] per light layer, zero-initialised
  std::vector<AttentionParams<T>> cross_attn;    // per light layer
};

template <typename T>
struct TagHeadParams {
  Tensor<T> weight;  // [d_light, 3]
  Tensor<T> bias;    // [3]
};

enum class ParamGroup { Heavy, Light };

template <typename T>
struct ParamRef {
  std::string name;
  ParamGroup group;
  Tensor<T> tensor;
};

// Non-interacting per-layer activations of one padded token sequence.
// Padding rows are zero.
template <typename T>
struct HeavyReps {
  SequenceKind kind = SequenceKind::Context;
  std::uint64_t fingerprint = 0;
  std::size_t seq_len = 0;
  std::map<std::size_t, Tensor<T>> per_layer;
};

struct ForwardOptions {
  double dropout = 0.0;
  Rng* rng = nullptr;  // required when dropout > 0
  // When set, each fused light layer appends its fusion output, widened to
  // double, in layer order.
  std::vector<std::vector<double>>* fused_outputs = nullptr;
};

// Named parameters of one encoder, prefixed e.g. "heavy." or "light.".
template <typename T>
std::vector<ParamRef<T>> encoder_parameters(const EncoderParams<T>& enc, const std::string& prefix,
                                            ParamGroup group);

template <typename T>
struct EaveModel {
  EaveConfig config;
  EncoderParams<T> heavy;
  EncoderParams<T> light;
  FusionParams<T> fusion;
  TagHeadParams<T> head;

  // Truncated-normal(0.02) weights, zero biases, unit norm gains,
  // zero learned alphas.
  static EaveModel init(const EaveConfig& config, std::uint64_t seed);

  // Stable, named order used by checkpoints, the optimizer and grad checks.
  std::vector<ParamRef<T>> parameters() const;

  const std::vector<std::size_t>& mapping() const { return mapping_; }

  // Cached heavy-side fingerprint. Anything that writes parameter values
  // directly must call invalidate_fingerprint() afterwards.
  std::uint64_t fingerprint() const;
  void invalidate_fingerprint() { fingerprint_.reset(); }

  template <typename U>
  EaveModel<U> cast() const;

 private:
  std::vector<std::size_t> mapping_;
  mutable std::optional<std::uint64_t> fingerprint_;
};

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// Multi-head self-attention on already-normalised x with padding mask on keys.
template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                         std::span<const std::uint8_t> mask, std::size_t heads);

template <typename T>
struct HeavyLayerOutput {
  Tensor<T> next;
  Tensor<T> extracted;
};

template <typename T>
HeavyLayerOutput<T> heavy_layer_forward(const Tensor<T>& x_prev, const LayerParams<T>& layer,
                                        std::span<const std::uint8_t> mask, std::size_t heads,
                                        FusionLocation location, const ForwardOptions& opts = {});

// Runs every heavy layer over a padded sequence (length context_len or
// attribute_len by kind) and keeps the extracted tensors of mapped layers.
template <typename T>
HeavyReps<T> heavy_encode(std::span<const int> tokens, SequenceKind kind, const EaveModel<T>& model,
                          const ForwardOptions& opts = {});

// (1 - alpha) * y_light + alpha * Concat(heavy_c, heavy_a) * adaptor
template <typename T>
Tensor<T> fuse_linear(const Tensor<T>& y_light, const Tensor<T>& heavy_c, const Tensor<T>& heavy_a,
                      const Tensor<T>& adaptor, const Tensor<T>& alpha);
template <typename T>
Tensor<T> fuse_linear(const Tensor<T>& y_light, const Tensor<T>& heavy_c, const Tensor<T>& heavy_a,
                      const Tensor<T>& adaptor, double alpha);

// CrossAttn(query = y_light, key/value = Concat(heavy_c, heavy_a) * adaptor) + y_light.
// heavy_mask marks valid heavy rows; padded heavy rows never act as keys.
template <typename T>
Tensor<T> fuse_cross_attention(const Tensor<T>& y_light, const Tensor<T>& heavy_c,
                               const Tensor<T>& heavy_a, const Tensor<T>& adaptor,
                               const AttentionParams<T>& cross, std::span<const std::uint8_t> heavy_mask,
                               std::size_t heads);

// Fusion inputs for one light layer.
template <typename T>
struct LayerFusion {
  FusionMethod method = FusionMethod::FixedAlpha;
  Tensor<T> heavy_c;
  Tensor<T> heavy_a;
  Tensor<T> adaptor;
  Tensor<T> alpha;  // fixed constant or learned parameter
  const AttentionParams<T>* cross = nullptr;
  std::span<const std::uint8_t> heavy_mask;
  std::size_t heads = 1;
};

template <typename T>
Tensor<T> apply_fusion(const Tensor<T>& y_light, const LayerFusion<T>& fusion);

template <typename T>
Tensor<T> light_layer_forward(const Tensor<T>& x_prev, const LayerParams<T>& layer,
                              const LayerFusion<T>* fusion, FusionLocation location,
                              MlpInputMode mlp_mode, std::span<const std::uint8_t> mask,
                              std::size_t heads, const ForwardOptions& opts = {});

// Concatenates context and attribute ids, runs every light layer fused with
// heavy layer f(l), and returns final-normalised states [S_c + S_a, d_light].
// Throws StaleCacheError when a HeavyReps fingerprint differs from the model's.
template <typename T>
Tensor<T> light_encode(std::span<const int> context_tokens, std::span<const int> attribute_tokens,
                       const HeavyReps<T>& reps_c, const HeavyReps<T>& reps_a,
                       const EaveModel<T>& model, const ForwardOptions& opts = {});

// The same light encoder with the heavy path removed entirely.
template <typename T>
Tensor<T> light_encode_standalone(std::span<const int> context_tokens,
                                  std::span<const int> attribute_tokens, const EaveModel<T>& model,
                                  const ForwardOptions& opts = {});

template <typename T>
template <typename U>
EaveModel<U> EaveModel<T>::cast() const {
  EaveModel<U> out = EaveModel<U>::init(config, 0);
  const auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto values = dst[i].tensor.mutable_data();
    const auto from = src[i].tensor.data();
    for (std::size_t j = 0; j < values.size(); ++j) values[j] = static_cast<U>(from[j]);
    dst[i].tensor.set_requires_grad(src[i].tensor.requires_grad());
  }
  out.invalidate_fingerprint();
  return out;
}

}  // namespace eave

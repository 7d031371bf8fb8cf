#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

namespace eave {

struct EncoderConfig {
  std::size_t num_layers = 2;
  std::size_t hidden = 8;
  std::size_t heads = 2;
  std::size_t head_dim = 4;
  std::size_t ffn_hidden = 16;
  std::size_t vocab_size = 32;
  std::size_t max_len = 64;

  bool operator==(const EncoderConfig&) const = default;
};

enum class FusionMethod { FixedAlpha, LearnedAlphaPerLayer, CrossAttention };

// Where inside a pre-norm layer heavy activations are extracted and fused.
enum class FusionLocation {
  BeforeAttn,     // after the attention pre-norm, before self-attention
  AfterAttn,      // self-attention output, before its skip connection
  AfterAttnSkip,  // after the attention skip connection
  BeforeMlp,      // after the MLP pre-norm
  AfterMlp,       // MLP output, before its skip connection
  AfterMlpSkip,   // after the MLP skip connection (layer output)
};

enum class LayerMappingScheme { EvenOffset, LastLayerOnly, LastK, FirstK };

struct LayerMapping {
  LayerMappingScheme scheme = LayerMappingScheme::EvenOffset;
  std::size_t offset = 0;  // EvenOffset only

  bool operator==(const LayerMapping&) const = default;
};

// Which tensor feeds the MLP pre-norm when fusing right after attention:
// PreFusion uses the raw self-attention output, PostFusion the fused residual.
enum class MlpInputMode { PreFusion, PostFusion };

struct EaveConfig {
  EncoderConfig heavy;
  EncoderConfig light;
  std::size_t context_len = 6;
  std::size_t attribute_len = 2;
  FusionMethod fusion_method = FusionMethod::FixedAlpha;
  FusionLocation fusion_location = FusionLocation::AfterAttn;
  LayerMapping layer_mapping;
  double alpha = 0.7;
  double beta = 1.0;
  MlpInputMode mlp_input_mode = MlpInputMode::PreFusion;

  bool operator==(const EaveConfig&) const = default;
};

// Throws ValidationError describing the first violated invariant.
void validate(const EncoderConfig& config);
void validate(const EaveConfig& config);

std::string to_string(FusionMethod v);
std::string to_string(FusionLocation v);
std::string to_string(LayerMappingScheme v);
std::string to_string(MlpInputMode v);
FusionMethod parse_fusion_method(const std::string& s);
FusionLocation parse_fusion_location(const std::string& s);
LayerMappingScheme parse_layer_mapping_scheme(const std::string& s);
MlpInputMode parse_mlp_input_mode(const std::string& s);

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const LayerMapping& m);
void from_json(const nlohmann::json& j, LayerMapping& m);
void to_json(nlohmann::json& j, const EaveConfig& c);
void from_json(const nlohmann::json& j, EaveConfig& c);

// Sorted-key JSON text; stable across runs.
std::string canonical_serialization(const EaveConfig& c);

namespace presets {
EncoderConfig t5_small(std::size_t layers = 8);
EncoderConfig t5_base();
EncoderConfig t5_large();
// Heavy T5-large, light 8-layer T5-small, context 512, attribute 32.
EaveConfig mave_large_small();
// Heavy T5-base, light T5-small, context 128, attribute 16.
EaveConfig ae110k_base_small();
}  // namespace presets

}  // namespace eave

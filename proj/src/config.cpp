#include "eave/config.hpp"

#include "eave/encoder.hpp"
#include "eave/errors.hpp"

namespace eave {

namespace {

template <typename E, std::size_t N>
E parse_enum(const std::string& s, const std::pair<E, const char*> (&table)[N], const char* what) {
  for (const auto& [value, name] : table) {
    if (s == name) return value;
  }
  throw ValidationError(std::string("unknown ") + what + " '" + s + "'");
}

template <typename E, std::size_t N>
std::string enum_name(E v, const std::pair<E, const char*> (&table)[N]) {
  for (const auto& [value, name] : table) {
    if (v == value) return name;
  }
  return "unknown";
}

constexpr std::pair<FusionMethod, const char*> kFusionMethods[] = {
    {FusionMethod::FixedAlpha, "fixed_alpha"},
    {FusionMethod::LearnedAlphaPerLayer, "learned_alpha_per_layer"},
    {FusionMethod::CrossAttention, "cross_attention"},
};

constexpr std::pair<FusionLocation, const char*> kFusionLocations[] = {
    {FusionLocation::BeforeAttn, "before_attn"},
    {FusionLocation::AfterAttn, "after_attn"},
    {FusionLocation::AfterAttnSkip, "after_attn_skip"},
    {FusionLocation::BeforeMlp, "before_mlp"},
    {FusionLocation::AfterMlp, "after_mlp"},
    {FusionLocation::AfterMlpSkip, "after_mlp_skip"},
};

constexpr std::pair<LayerMappingScheme, const char*> kSchemes[] = {
    {LayerMappingScheme::EvenOffset, "even_offset"},
    {LayerMappingScheme::LastLayerOnly, "last_layer_only"},
    {LayerMappingScheme::LastK, "last_k"},
    {LayerMappingScheme::FirstK, "first_k"},
};

constexpr std::pair<MlpInputMode, const char*> kMlpModes[] = {
    {MlpInputMode::PreFusion, "pre_fusion"},
    {MlpInputMode::PostFusion, "post_fusion"},
};

void require_positive(std::size_t v, const char* field) {
  if (v == 0) throw ValidationError(std::string("config field '") + field + "' must be positive");
}

}  // namespace

std::string to_string(FusionMethod v) { return enum_name(v, kFusionMethods); }
std::string to_string(FusionLocation v) { return enum_name(v, kFusionLocations); }
std::string to_string(LayerMappingScheme v) { return enum_name(v, kSchemes); }
std::string to_string(MlpInputMode v) { return enum_name(v, kMlpModes); }

FusionMethod parse_fusion_method(const std::string& s) {
  return parse_enum(s, kFusionMethods, "fusion_method");
}
FusionLocation parse_fusion_location(const std::string& s) {
  return parse_enum(s, kFusionLocations, "fusion_location");
}
LayerMappingScheme parse_layer_mapping_scheme(const std::string& s) {
  return parse_enum(s, kSchemes, "layer_mapping scheme");
}
MlpInputMode parse_mlp_input_mode(const std::string& s) {
  return parse_enum(s, kMlpModes, "mlp_input_mode");
}

void validate(const EncoderConfig& c) {
  require_positive(c.num_layers, "num_layers");
  require_positive(c.hidden, "hidden");
  require_positive(c.heads, "heads");
  require_positive(c.head_dim, "head_dim");
  require_positive(c.ffn_hidden, "ffn_hidden");
  require_positive(c.vocab_size, "vocab_size");
  require_positive(c.max_len, "max_len");
  if (c.heads * c.head_dim != c.hidden) {
    throw ValidationError("heads (" + std::to_string(c.heads) + ") x head_dim (" +
                          std::to_string(c.head_dim) + ") must equal hidden (" +
                          std::to_string(c.hidden) + ")");
  }
}

void validate(const EaveConfig& c) {
  validate(c.heavy);
  validate(c.light);
  require_positive(c.context_len, "context_len");
  require_positive(c.attribute_len, "attribute_len");
  if (c.context_len > c.heavy.max_len || c.attribute_len > c.heavy.max_len) {
    throw ValidationError("heavy max_len " + std::to_string(c.heavy.max_len) +
                          " is shorter than context_len/attribute_len");
  }
  if (c.context_len + c.attribute_len > c.light.max_len) {
    throw ValidationError("light max_len " + std::to_string(c.light.max_len) +
                          " is shorter than context_len + attribute_len = " +
                          std::to_string(c.context_len + c.attribute_len));
  }
  if (c.fusion_method == FusionMethod::FixedAlpha && !(c.alpha >= 0.0 && c.alpha <= 1.0)) {
    throw ValidationError("fixed alpha must lie in [0, 1], got " + std::to_string(c.alpha));
  }
  if (!(c.beta >= 0.0)) throw ValidationError("beta must be >= 0");
  try {
    (void)layer_mapping(c.heavy.num_layers, c.light.num_layers, c.layer_mapping);
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers}, {"hidden", c.hidden},
                     {"heads", c.heads},           {"head_dim", c.head_dim},
                     {"ffn_hidden", c.ffn_hidden}, {"vocab_size", c.vocab_size},
                     {"max_len", c.max_len}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("num_layers").get_to(c.num_layers);
  j.at("hidden").get_to(c.hidden);
  j.at("heads").get_to(c.heads);
  j.at("head_dim").get_to(c.head_dim);
  j.at("ffn_hidden").get_to(c.ffn_hidden);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_len").get_to(c.max_len);
}

void to_json(nlohmann::json& j, const LayerMapping& m) {
  j = nlohmann::json{{"scheme", to_string(m.scheme)}};
  if (m.scheme == LayerMappingScheme::EvenOffset) j["offset"] = m.offset;
}

void from_json(const nlohmann::json& j, LayerMapping& m) {
  m.scheme = parse_layer_mapping_scheme(j.at("scheme").get<std::string>());
  m.offset = j.value("offset", std::size_t{0});
}

void to_json(nlohmann::json& j, const EaveConfig& c) {
  j = nlohmann::json{{"heavy", c.heavy},
                     {"light", c.light},
                     {"context_len", c.context_len},
                     {"attribute_len", c.attribute_len},
                     {"fusion_method", to_string(c.fusion_method)},
                     {"fusion_location", to_string(c.fusion_location)},
                     {"layer_mapping", c.layer_mapping},
                     {"alpha", c.alpha},
                     {"beta", c.beta},
                     {"mlp_input_mode", to_string(c.mlp_input_mode)}};
}

void from_json(const nlohmann::json& j, EaveConfig& c) {
  j.at("heavy").get_to(c.heavy);
  j.at("light").get_to(c.light);
  j.at("context_len").get_to(c.context_len);
  j.at("attribute_len").get_to(c.attribute_len);
  c.fusion_method = parse_fusion_method(j.at("fusion_method").get<std::string>());
  c.fusion_location = parse_fusion_location(j.at("fusion_location").get<std::string>());
  j.at("layer_mapping").get_to(c.layer_mapping);
  j.at("alpha").get_to(c.alpha);
  j.at("beta").get_to(c.beta);
  c.mlp_input_mode = parse_mlp_input_mode(j.value("mlp_input_mode", std::string("pre_fusion")));
}

std::string canonical_serialization(const EaveConfig& c) { return nlohmann::json(c).dump(); }

namespace presets {

EncoderConfig t5_small(std::size_t layers) {
  return EncoderConfig{layers, 512, 8, 64, 2048, 32128, 544};
}

EncoderConfig t5_base() { return EncoderConfig{12, 768, 12, 64, 3072, 32128, 544}; }

EncoderConfig t5_large() { return EncoderConfig{24, 1024, 16, 64, 4096, 32128, 544}; }

EaveConfig mave_large_small() {
  EaveConfig c;
  c.heavy = t5_large();
  c.light = t5_small(8);
  c.context_len = 512;
  c.attribute_len = 32;
  c.fusion_method = FusionMethod::FixedAlpha;
  c.fusion_location = FusionLocation::AfterAttn;
  c.layer_mapping = {LayerMappingScheme::EvenOffset, 0};
  c.alpha = 0.7;
  c.beta = 1.0;
  return c;
}

EaveConfig ae110k_base_small() {
  EaveConfig c;
  c.heavy = t5_base();
  c.light = t5_small(6);
  c.context_len = 128;
  c.attribute_len = 16;
  c.fusion_method = FusionMethod::FixedAlpha;
  c.fusion_location = FusionLocation::AfterAttn;
  c.layer_mapping = {LayerMappingScheme::EvenOffset, 0};
  c.alpha = 0.05;
  c.beta = 0.0;
  return c;
}

}  // namespace presets

}  // namespace eave

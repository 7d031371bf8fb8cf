#include "eave/encoder.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include "eave/errors.hpp"
#include "eave/fingerprint.hpp"
#include "eave/rng.hpp"

namespace eave {

namespace {

constexpr double kInitStd = 0.02;

template <typename T>
Tensor<T> init_weight(Shape shape, Rng& rng) {
  const auto n = shape_numel(shape);
  std::vector<T> data(n);
  for (auto& v : data) v = static_cast<T>(rng.truncated_normal(kInitStd));
  return Tensor<T>::from(std::move(shape), std::move(data), true);
}

template <typename T>
AttentionParams<T> init_attention(std::size_t d, Rng& rng) {
  AttentionParams<T> p;
  p.wq = init_weight<T>({d, d}, rng);
  p.bq = Tensor<T>::zeros({d}, true);
  p.wk = init_weight<T>({d, d}, rng);
  p.bk = Tensor<T>::zeros({d}, true);
  p.wv = init_weight<T>({d, d}, rng);
  p.bv = Tensor<T>::zeros({d}, true);
  p.wo = init_weight<T>({d, d}, rng);
  p.bo = Tensor<T>::zeros({d}, true);
  return p;
}

template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& c, Rng& rng, bool final_norm) {
  EncoderParams<T> enc;
  enc.token_embedding = init_weight<T>({c.vocab_size, c.hidden}, rng);
  enc.position_embedding = init_weight<T>({c.max_len, c.hidden}, rng);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    LayerParams<T> layer;
    layer.attn_norm = Tensor<T>::full({c.hidden}, T(1), true);
    layer.attn = init_attention<T>(c.hidden, rng);
    layer.mlp_norm = Tensor<T>::full({c.hidden}, T(1), true);
    layer.w_in = init_weight<T>({c.hidden, c.ffn_hidden}, rng);
    layer.b_in = Tensor<T>::zeros({c.ffn_hidden}, true);
    layer.w_out = init_weight<T>({c.ffn_hidden, c.hidden}, rng);
    layer.b_out = Tensor<T>::zeros({c.hidden}, true);
    enc.layers.push_back(std::move(layer));
  }
  if (final_norm) enc.final_norm = Tensor<T>::full({c.hidden}, T(1), true);
  return enc;
}

template <typename T>
void push_attention(std::vector<ParamRef<T>>& out, const AttentionParams<T>& p,
                    const std::string& prefix, ParamGroup group) {
  out.push_back({prefix + "wq", group, p.wq});
  out.push_back({prefix + "bq", group, p.bq});
  out.push_back({prefix + "wk", group, p.wk});
  out.push_back({prefix + "bk", group, p.bk});
  out.push_back({prefix + "wv", group, p.wv});
  out.push_back({prefix + "bv", group, p.bv});
  out.push_back({prefix + "wo", group, p.wo});
  out.push_back({prefix + "bo", group, p.bo});
}

template <typename T>
Tensor<T> embed(std::span<const int> ids, const EncoderParams<T>& enc) {
  const auto tokens = embedding(enc.token_embedding, ids);
  return add(tokens, take_rows(enc.position_embedding, ids.size()));
}

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, const ForwardOptions& opts) {
  if (opts.dropout <= 0.0) return x;
  if (!opts.rng) throw std::invalid_argument("dropout requested without a random generator");
  return dropout(x, opts.dropout, *opts.rng);
}

template <typename T>
Tensor<T> mlp(const Tensor<T>& h, const LayerParams<T>& layer) {
  return linear(gelu(linear(h, layer.w_in, layer.b_in)), layer.w_out, layer.b_out);
}

template <typename T>
void check_fusion_shapes(const Tensor<T>& y_light, const Tensor<T>& heavy_c, const Tensor<T>& heavy_a,
                         const Tensor<T>& adaptor) {
  const std::size_t rows = heavy_c.rows() + heavy_a.rows();
  if (rows != y_light.rows()) {
    throw ShapeError("fusion: heavy context (" + std::to_string(heavy_c.rows()) +
                     ") + attribute (" + std::to_string(heavy_a.rows()) +
                     ") rows do not align with " + std::to_string(y_light.rows()) +
                     " light positions");
  }
  if (adaptor.rank() != 2 || adaptor.dim(0) != heavy_c.cols() || adaptor.dim(1) != y_light.cols()) {
    throw ShapeError("fusion: adaptor " + shape_to_string(adaptor.shape()) + " cannot map heavy width " +
                     std::to_string(heavy_c.cols()) + " to light width " +
                     std::to_string(y_light.cols()));
  }
}

template <typename T>
Tensor<T> project_heavy(const Tensor<T>& heavy_c, const Tensor<T>& heavy_a, const Tensor<T>& adaptor) {
  return matmul(concat_rows(heavy_c, heavy_a), adaptor);
}

template <typename T>
void check_reps(const HeavyReps<T>& reps, SequenceKind kind, std::size_t len, std::uint64_t fp) {
  if (reps.kind != kind) throw std::invalid_argument("light_encode: HeavyReps of the wrong kind");
  if (reps.fingerprint != fp) {
    throw StaleCacheError("light_encode: heavy representations were produced by a different model");
  }
  if (reps.seq_len != len) {
    throw ShapeError("light_encode: HeavyReps cover " + std::to_string(reps.seq_len) +
                     " positions, expected " + std::to_string(len));
  }
}

template <typename T>
const Tensor<T>& reps_layer(const HeavyReps<T>& reps, std::size_t layer) {
  auto it = reps.per_layer.find(layer);
  if (it == reps.per_layer.end()) {
    throw std::invalid_argument("light_encode: heavy layer " + std::to_string(layer) +
                                " absent from HeavyReps");
  }
  return it->second;
}

template <typename T>
Tensor<T> run_light(std::span<const int> context_tokens, std::span<const int> attribute_tokens,
                    const HeavyReps<T>* reps_c, const HeavyReps<T>* reps_a, const EaveModel<T>& model,
                    const ForwardOptions& opts) {
  const auto& cfg = model.config;
  if (context_tokens.size() != cfg.context_len || attribute_tokens.size() != cfg.attribute_len) {
    throw ShapeError("light_encode: expected padded lengths " + std::to_string(cfg.context_len) + "/" +
                     std::to_string(cfg.attribute_len) + ", got " +
                     std::to_string(context_tokens.size()) + "/" +
                     std::to_string(attribute_tokens.size()));
  }
  std::vector<int> ids(context_tokens.begin(), context_tokens.end());
  ids.insert(ids.end(), attribute_tokens.begin(), attribute_tokens.end());
  const Mask mask = pad_mask(ids);

  Tensor<T> x = embed<T>(ids, model.light);
  for (std::size_t l = 0; l < model.light.layers.size(); ++l) {
    if (!reps_c) {
      x = light_layer_forward<T>(x, model.light.layers[l], nullptr, cfg.fusion_location,
                                 cfg.mlp_input_mode, mask, cfg.light.heads, opts);
      continue;
    }
    const std::size_t h = model.mapping()[l];
    LayerFusion<T> fusion;
    fusion.method = cfg.fusion_method;
    fusion.heavy_c = reps_layer(*reps_c, h);
    fusion.heavy_a = reps_layer(*reps_a, h);
    fusion.adaptor = model.fusion.adaptor[l];
    fusion.heavy_mask = mask;
    fusion.heads = cfg.light.heads;
    switch (cfg.fusion_method) {
      case FusionMethod::FixedAlpha:
        fusion.alpha = Tensor<T>::scalar(static_cast<T>(cfg.alpha));
        break;
      case FusionMethod::LearnedAlphaPerLayer:
        fusion.alpha = model.fusion.learned_alpha[l];
        break;
      case FusionMethod::CrossAttention:
        fusion.cross = &model.fusion.cross_attn[l];
        break;
    }
    x = light_layer_forward<T>(x, model.light.layers[l], &fusion, cfg.fusion_location,
                               cfg.mlp_input_mode, mask, cfg.light.heads, opts);
  }
  return rms_norm(x, model.light.final_norm);
}

}  // namespace

Mask pad_mask(std::span<const int> ids) {
  Mask m(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) m[i] = ids[i] != kPadId ? 1 : 0;
  return m;
}

std::vector<std::size_t> layer_mapping(std::size_t heavy_layers, std::size_t light_layers,
                                       const LayerMapping& mapping) {
  if (heavy_layers == 0 || light_layers == 0) {
    throw std::invalid_argument("layer_mapping: layer counts must be positive");
  }
  std::vector<std::size_t> out;
  switch (mapping.scheme) {
    case LayerMappingScheme::EvenOffset: {
      if (heavy_layers % light_layers != 0) {
        throw std::invalid_argument("layer_mapping: " + std::to_string(heavy_layers) +
                                    " heavy layers cannot be spread evenly over " +
                                    std::to_string(light_layers) + " light layers");
      }
      const std::size_t stride = heavy_layers / light_layers;
      if (mapping.offset >= stride) {
        throw std::invalid_argument("layer_mapping: offset " + std::to_string(mapping.offset) +
                                    " must be below stride " + std::to_string(stride));
      }
      for (std::size_t l = 0; l < light_layers; ++l) out.push_back(mapping.offset + l * stride);
      break;
    }
    case LayerMappingScheme::LastLayerOnly:
      out.assign(light_layers, heavy_layers - 1);
      break;
    case LayerMappingScheme::LastK:
    case LayerMappingScheme::FirstK: {
      if (light_layers > heavy_layers) {
        throw std::invalid_argument("layer_mapping: " + std::to_string(light_layers) +
                                    " light layers exceed " + std::to_string(heavy_layers) +
                                    " heavy layers");
      }
      const std::size_t first =
          mapping.scheme == LayerMappingScheme::LastK ? heavy_layers - light_layers : 0;
      for (std::size_t l = 0; l < light_layers; ++l) out.push_back(first + l);
      break;
    }
  }
  return out;
}

template <typename T>
std::vector<ParamRef<T>> encoder_parameters(const EncoderParams<T>& enc, const std::string& prefix,
                                            ParamGroup group) {
  std::vector<ParamRef<T>> out;
  out.push_back({prefix + "token_embedding", group, enc.token_embedding});
  out.push_back({prefix + "position_embedding", group, enc.position_embedding});
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    const auto& layer = enc.layers[l];
    const std::string p = prefix + "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", group, layer.attn_norm});
    push_attention(out, layer.attn, p + "attn.", group);
    out.push_back({p + "mlp_norm", group, layer.mlp_norm});
    out.push_back({p + "w_in", group, layer.w_in});
    out.push_back({p + "b_in", group, layer.b_in});
    out.push_back({p + "w_out", group, layer.w_out});
    out.push_back({p + "b_out", group, layer.b_out});
  }
  if (enc.final_norm.defined()) out.push_back({prefix + "final_norm", group, enc.final_norm});
  return out;
}

template <typename T>
EaveModel<T> EaveModel<T>::init(const EaveConfig& config, std::uint64_t seed) {
  validate(config);
  EaveModel<T> m;
  m.config = config;
  m.mapping_ = layer_mapping(config.heavy.num_layers, config.light.num_layers, config.layer_mapping);
  Rng rng(seed);
  m.heavy = init_encoder<T>(config.heavy, rng, false);
  m.light = init_encoder<T>(config.light, rng, true);
  for (std::size_t l = 0; l < config.light.num_layers; ++l) {
    m.fusion.adaptor.push_back(init_weight<T>({config.heavy.hidden, config.light.hidden}, rng));
    if (config.fusion_method == FusionMethod::LearnedAlphaPerLayer) {
      m.fusion.learned_alpha.push_back(Tensor<T>::zeros({1}, true));
    }
    if (config.fusion_method == FusionMethod::CrossAttention) {
      m.fusion.cross_attn.push_back(init_attention<T>(config.light.hidden, rng));
    }
  }
  m.head.weight = init_weight<T>({config.light.hidden, 3}, rng);
  m.head.bias = Tensor<T>::zeros({3}, true);
  return m;
}

template <typename T>
std::vector<ParamRef<T>> EaveModel<T>::parameters() const {
  auto out = encoder_parameters(heavy, "heavy.", ParamGroup::Heavy);
  auto light_params = encoder_parameters(light, "light.", ParamGroup::Light);
  out.insert(out.end(), light_params.begin(), light_params.end());
  for (std::size_t l = 0; l < fusion.adaptor.size(); ++l) {
    const std::string p = "fusion." + std::to_string(l) + ".";
    out.push_back({p + "adaptor", ParamGroup::Light, fusion.adaptor[l]});
    if (l < fusion.learned_alpha.size()) {
      out.push_back({p + "alpha", ParamGroup::Light, fusion.learned_alpha[l]});
    }
    if (l < fusion.cross_attn.size()) {
      push_attention(out, fusion.cross_attn[l], p + "cross.", ParamGroup::Light);
    }
  }
  out.push_back({"head.weight", ParamGroup::Light, head.weight});
  out.push_back({"head.bias", ParamGroup::Light, head.bias});
  return out;
}

template <typename T>
std::uint64_t EaveModel<T>::fingerprint() const {
  if (!fingerprint_) fingerprint_ = eave::fingerprint(config, heavy);
  return *fingerprint_;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                         std::span<const std::uint8_t> mask, std::size_t heads) {
  const auto q = linear(x, p.wq, p.bq);
  const auto k = linear(x, p.wk, p.bk);
  const auto v = linear(x, p.wv, p.bv);
  return linear(attention(q, k, v, mask, heads), p.wo, p.bo);
}

template <typename T>
HeavyLayerOutput<T> heavy_layer_forward(const Tensor<T>& x_prev, const LayerParams<T>& layer,
                                        std::span<const std::uint8_t> mask, std::size_t heads,
                                        FusionLocation location, const ForwardOptions& opts) {
  const auto h1 = rms_norm(x_prev, layer.attn_norm);
  const auto a = maybe_dropout(self_attention(h1, layer.attn, mask, heads), opts);
  const auto y = add(a, x_prev);
  const auto h2 = rms_norm(y, layer.mlp_norm);
  const auto m = maybe_dropout(mlp(h2, layer), opts);
  const auto next = add(m, y);
  switch (location) {
    case FusionLocation::BeforeAttn: return {next, h1};
    case FusionLocation::AfterAttn: return {next, a};
    case FusionLocation::AfterAttnSkip: return {next, y};
    case FusionLocation::BeforeMlp: return {next, h2};
    case FusionLocation::AfterMlp: return {next, m};
    case FusionLocation::AfterMlpSkip: return {next, next};
  }
  return {next, a};
}

template <typename T>
HeavyReps<T> heavy_encode(std::span<const int> tokens, SequenceKind kind, const EaveModel<T>& model,
                          const ForwardOptions& opts) {
  const auto& cfg = model.config;
  const std::size_t expected = kind == SequenceKind::Context ? cfg.context_len : cfg.attribute_len;
  if (tokens.size() != expected) {
    throw ShapeError(std::string("heavy_encode: ") +
                     (kind == SequenceKind::Context ? "context" : "attribute") + " has " +
                     std::to_string(tokens.size()) + " tokens, expected padded length " +
                     std::to_string(expected));
  }
  const Mask mask = pad_mask(tokens);
  const std::set<std::size_t> wanted(model.mapping().begin(), model.mapping().end());

  HeavyReps<T> reps;
  reps.kind = kind;
  reps.seq_len = tokens.size();
  reps.fingerprint = model.fingerprint();
  Tensor<T> x = embed<T>(tokens, model.heavy);
  for (std::size_t l = 0; l < model.heavy.layers.size(); ++l) {
    auto out = heavy_layer_forward(x, model.heavy.layers[l], mask, cfg.heavy.heads,
                                   cfg.fusion_location, opts);
    if (wanted.count(l)) reps.per_layer.emplace(l, mask_rows(out.extracted, mask));
    x = std::move(out.next);
  }
  return reps;
}

template <typename T>
Tensor<T> fuse_linear(const Tensor<T>& y_light, const Tensor<T>& heavy_c, const Tensor<T>& heavy_a,
                      const Tensor<T>& adaptor, const Tensor<T>& alpha) {
  check_fusion_shapes(y_light, heavy_c, heavy_a, adaptor);
  return lerp(y_light, project_heavy(heavy_c, heavy_a, adaptor), alpha);
}

template <typename T>
Tensor<T> fuse_linear(const Tensor<T>& y_light, const Tensor<T>& heavy_c, const Tensor<T>& heavy_a,
                      const Tensor<T>& adaptor, double alpha) {
  return fuse_linear(y_light, heavy_c, heavy_a, adaptor, Tensor<T>::scalar(static_cast<T>(alpha)));
}

template <typename T>
Tensor<T> fuse_cross_attention(const Tensor<T>& y_light, const Tensor<T>& heavy_c,
                               const Tensor<T>& heavy_a, const Tensor<T>& adaptor,
                               const AttentionParams<T>& cross, std::span<const std::uint8_t> heavy_mask,
                               std::size_t heads) {
  check_fusion_shapes(y_light, heavy_c, heavy_a, adaptor);
  const auto projected = project_heavy(heavy_c, heavy_a, adaptor);
  const auto q = linear(y_light, cross.wq, cross.bq);
  const auto k = linear(projected, cross.wk, cross.bk);
  const auto v = linear(projected, cross.wv, cross.bv);
  const auto attended = linear(attention(q, k, v, heavy_mask, heads), cross.wo, cross.bo);
  return add(attended, y_light);
}

template <typename T>
Tensor<T> apply_fusion(const Tensor<T>& y_light, const LayerFusion<T>& f) {
  if (f.method == FusionMethod::CrossAttention) {
    if (!f.cross) throw std::invalid_argument("apply_fusion: cross-attention parameters missing");
    return fuse_cross_attention(y_light, f.heavy_c, f.heavy_a, f.adaptor, *f.cross, f.heavy_mask,
                                f.heads);
  }
  return fuse_linear(y_light, f.heavy_c, f.heavy_a, f.adaptor, f.alpha);
}

template <typename T>
Tensor<T> light_layer_forward(const Tensor<T>& x_prev, const LayerParams<T>& layer,
                              const LayerFusion<T>* fusion, FusionLocation location,
                              MlpInputMode mlp_mode, std::span<const std::uint8_t> mask,
                              std::size_t heads, const ForwardOptions& opts) {
  auto hook = [&](FusionLocation here, const Tensor<T>& t) {
    if (!fusion || here != location) return t;
    auto fused = apply_fusion(t, *fusion);
    if (opts.fused_outputs) opts.fused_outputs->emplace_back(fused.data().begin(), fused.data().end());
    return fused;
  };
  const auto h1 = hook(FusionLocation::BeforeAttn, rms_norm(x_prev, layer.attn_norm));
  const auto a = maybe_dropout(self_attention(h1, layer.attn, mask, heads), opts);
  const auto y = hook(FusionLocation::AfterAttnSkip, add(hook(FusionLocation::AfterAttn, a), x_prev));
  const bool raw_attention_to_mlp =
      location == FusionLocation::AfterAttn && mlp_mode == MlpInputMode::PreFusion;
  const auto h2 = hook(FusionLocation::BeforeMlp, rms_norm(raw_attention_to_mlp ? a : y, layer.mlp_norm));
  const auto m = hook(FusionLocation::AfterMlp, maybe_dropout(mlp(h2, layer), opts));
  return hook(FusionLocation::AfterMlpSkip, add(m, y));
}

template <typename T>
Tensor<T> light_encode(std::span<const int> context_tokens, std::span<const int> attribute_tokens,
                       const HeavyReps<T>& reps_c, const HeavyReps<T>& reps_a,
                       const EaveModel<T>& model, const ForwardOptions& opts) {
  const auto fp = model.fingerprint();
  check_reps(reps_c, SequenceKind::Context, model.config.context_len, fp);
  check_reps(reps_a, SequenceKind::Attribute, model.config.attribute_len, fp);
  return run_light<T>(context_tokens, attribute_tokens, &reps_c, &reps_a, model, opts);
}

template <typename T>
Tensor<T> light_encode_standalone(std::span<const int> context_tokens,
                                  std::span<const int> attribute_tokens, const EaveModel<T>& model,
                                  const ForwardOptions& opts) {
  return run_light<T>(context_tokens, attribute_tokens, nullptr, nullptr, model, opts);
}

#define EAVE_INSTANTIATE(T)                                                                        \
  template struct EaveModel<T>;                                                                    \
  template std::vector<ParamRef<T>> encoder_parameters(const EncoderParams<T>&,                    \
                                                       const std::string&, ParamGroup);            \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> self_attention(const Tensor<T>&, const AttentionParams<T>&,                   \
                                    std::span<const std::uint8_t>, std::size_t);                   \
  template HeavyLayerOutput<T> heavy_layer_forward(const Tensor<T>&, const LayerParams<T>&,        \
                                                   std::span<const std::uint8_t>, std::size_t,     \
                                                   FusionLocation, const ForwardOptions&);         \
  template HeavyReps<T> heavy_encode(std::span<const int>, SequenceKind, const EaveModel<T>&,      \
                                     const ForwardOptions&);                                       \
  template Tensor<T> fuse_linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                 const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> fuse_linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                 const Tensor<T>&, double);                                        \
  template Tensor<T> fuse_cross_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                          const Tensor<T>&, const AttentionParams<T>&,             \
                                          std::span<const std::uint8_t>, std::size_t);             \
  template Tensor<T> apply_fusion(const Tensor<T>&, const LayerFusion<T>&);                        \
  template Tensor<T> light_layer_forward(const Tensor<T>&, const LayerParams<T>&,                  \
                                         const LayerFusion<T>*, FusionLocation, MlpInputMode,      \
                                         std::span<const std::uint8_t>, std::size_t,               \
                                         const ForwardOptions&);                                   \
  template Tensor<T> light_encode(std::span<const int>, std::span<const int>,                      \
                                  const HeavyReps<T>&, const HeavyReps<T>&, const EaveModel<T>&,   \
                                  const ForwardOptions&);                                          \
  template Tensor<T> light_encode_standalone(std::span<const int>, std::span<const int>,           \
                                             const EaveModel<T>&, const ForwardOptions&);

EAVE_INSTANTIATE(float)
EAVE_INSTANTIATE(double)

#undef EAVE_INSTANTIATE

}  // namespace eave

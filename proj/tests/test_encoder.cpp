#include <gtest/gtest.h>

#include <cmath>

#include "eave/encoder.hpp"
#include "eave/errors.hpp"
#include "eave/fingerprint.hpp"
#include "eave/grad_check.hpp"
#include "eave/tagging.hpp"
#include "test_util.hpp"

using namespace eave;
using namespace eave::testing;

namespace {

// Plain row-major matrices for an independent reimplementation of the
// layer math.
struct Mat {
  std::size_t r = 0, c = 0;
  std::vector<double> v;
  double& operator()(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

Mat of(const Tensor<double>& t) { return {t.rows(), t.cols(), {t.data().begin(), t.data().end()}}; }

Mat mm(const Mat& a, const Mat& b) {
  Mat out{a.r, b.c, std::vector<double>(a.r * b.c, 0.0)};
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t j = 0; j < b.c; ++j)
      for (std::size_t k = 0; k < a.c; ++k) out(i, j) += a(i, k) * b(k, j);
  return out;
}

Mat plus(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] += b.v[i];
  return out;
}

Mat affine(const Mat& x, const Tensor<double>& w, const Tensor<double>& b) {
  Mat out = mm(x, of(w));
  for (std::size_t i = 0; i < out.r; ++i)
    for (std::size_t j = 0; j < out.c; ++j) out(i, j) += b.data()[j];
  return out;
}

Mat rms(const Mat& x, const Tensor<double>& g) {
  Mat out = x;
  for (std::size_t i = 0; i < x.r; ++i) {
    double ms = 0;
    for (std::size_t j = 0; j < x.c; ++j) ms += x(i, j) * x(i, j);
    const double inv = 1.0 / std::sqrt(ms / double(x.c) + 1e-6);
    for (std::size_t j = 0; j < x.c; ++j) out(i, j) = x(i, j) * inv * g.data()[j];
  }
  return out;
}

Mat attend(const Mat& q, const Mat& k, const Mat& v, const Mask& mask, std::size_t heads) {
  const std::size_t hd = q.c / heads;
  Mat out{q.r, q.c, std::vector<double>(q.r * q.c, 0.0)};
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < q.r; ++i) {
      std::vector<double> w(k.r, 0.0);
      double z = 0;
      for (std::size_t j = 0; j < k.r; ++j) {
        if (!mask[j]) continue;
        double s = 0;
        for (std::size_t t = 0; t < hd; ++t) s += q(i, h * hd + t) * k(j, h * hd + t);
        w[j] = std::exp(s / std::sqrt(double(hd)));
        z += w[j];
      }
      for (std::size_t j = 0; j < k.r; ++j)
        for (std::size_t t = 0; t < hd; ++t) out(i, h * hd + t) += w[j] / z * v(j, h * hd + t);
    }
  }
  return out;
}

Mat self_attn(const Mat& x, const AttentionParams<double>& p, const Mask& mask, std::size_t heads) {
  return affine(attend(affine(x, p.wq, p.bq), affine(x, p.wk, p.bk), affine(x, p.wv, p.bv), mask, heads), p.wo, p.bo);
}

Mat mlp(const Mat& x, const LayerParams<double>& l) {
  Mat h = affine(x, l.w_in, l.b_in);
  for (auto& e : h.v) e = 0.5 * e * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (e + 0.044715 * e * e * e)));
  return affine(h, l.w_out, l.b_out);
}

struct LayerTrace {
  Mat h1, a, y, h2, m, out;
};

// Pre-norm layer with an optional replacement function applied at `loc`.
LayerTrace layer_oracle(const Mat& x, const LayerParams<double>& l, const Mask& mask, std::size_t heads,
                        std::optional<FusionLocation> loc, const std::function<Mat(const Mat&)>& fuse,
                        bool mlp_reads_raw_attention) {
  auto at = [&](FusionLocation here, const Mat& t) { return loc && *loc == here ? fuse(t) : t; };
  LayerTrace t;
  t.h1 = at(FusionLocation::BeforeAttn, rms(x, l.attn_norm));
  const Mat raw_a = self_attn(t.h1, l.attn, mask, heads);
  t.a = at(FusionLocation::AfterAttn, raw_a);
  t.y = at(FusionLocation::AfterAttnSkip, plus(t.a, x));
  t.h2 = at(FusionLocation::BeforeMlp, rms(mlp_reads_raw_attention ? raw_a : t.y, l.mlp_norm));
  t.m = at(FusionLocation::AfterMlp, mlp(t.h2, l));
  t.out = at(FusionLocation::AfterMlpSkip, plus(t.m, t.y));
  return t;
}

void expect_close(const Tensor<double>& got, const Mat& want, double tol = 1e-11) {
  ASSERT_EQ(got.rows(), want.r);
  ASSERT_EQ(got.cols(), want.c);
  for (std::size_t i = 0; i < want.v.size(); ++i) ASSERT_NEAR(got.data()[i], want.v[i], tol) << "index " << i;
}

const FusionLocation kLocations[] = {FusionLocation::BeforeAttn, FusionLocation::AfterAttn,
                                     FusionLocation::AfterAttnSkip, FusionLocation::BeforeMlp,
                                     FusionLocation::AfterMlp, FusionLocation::AfterMlpSkip};

std::vector<std::size_t> mapping_of(LayerMappingScheme s, std::size_t offset = 0) {
  return layer_mapping(24, 8, {s, offset});
}

}  // namespace

TEST(LayerMapping, ReproducesAblationRowsFor24To8) {
  using V = std::vector<std::size_t>;
  EXPECT_EQ(mapping_of(LayerMappingScheme::EvenOffset, 0), (V{0, 3, 6, 9, 12, 15, 18, 21}));
  EXPECT_EQ(mapping_of(LayerMappingScheme::EvenOffset, 1), (V{1, 4, 7, 10, 13, 16, 19, 22}));
  EXPECT_EQ(mapping_of(LayerMappingScheme::EvenOffset, 2), (V{2, 5, 8, 11, 14, 17, 20, 23}));
  EXPECT_EQ(mapping_of(LayerMappingScheme::LastLayerOnly), (V(8, 23)));
  EXPECT_EQ(mapping_of(LayerMappingScheme::LastK), (V{16, 17, 18, 19, 20, 21, 22, 23}));
  EXPECT_EQ(mapping_of(LayerMappingScheme::FirstK), (V{0, 1, 2, 3, 4, 5, 6, 7}));
}

TEST(LayerMapping, RejectsImpossibleSchemes) {
  EXPECT_THROW(layer_mapping(24, 7, {LayerMappingScheme::EvenOffset, 0}), std::invalid_argument);
  EXPECT_THROW(layer_mapping(24, 8, {LayerMappingScheme::EvenOffset, 3}), std::invalid_argument);
  EXPECT_THROW(layer_mapping(4, 8, {LayerMappingScheme::LastK, 0}), std::invalid_argument);
  EXPECT_THROW(layer_mapping(0, 1, {LayerMappingScheme::FirstK, 0}), std::invalid_argument);
  EXPECT_EQ(layer_mapping(4, 2, {LayerMappingScheme::EvenOffset, 1}), (std::vector<std::size_t>{1, 3}));
}

TEST(LayerMapping, EveryIndexIsAValidHeavyLayer) {
  for (std::size_t h = 1; h <= 12; ++h) {
    for (std::size_t l = 1; l <= h; ++l) {
      for (auto s : {LayerMappingScheme::LastLayerOnly, LayerMappingScheme::LastK, LayerMappingScheme::FirstK}) {
        const auto m = layer_mapping(h, l, {s, 0});
        ASSERT_EQ(m.size(), l);
        for (auto i : m) ASSERT_LT(i, h);
      }
      if (h % l == 0) {
        for (std::size_t k = 0; k < h / l; ++k) {
          const auto m = layer_mapping(h, l, {LayerMappingScheme::EvenOffset, k});
          for (std::size_t i = 0; i < l; ++i) ASSERT_EQ(m[i], k + i * (h / l));
        }
      }
    }
  }
}

TEST(HeavyLayer, MatchesReferenceAtEveryExtractionPoint) {
  Rng rng(1);
  auto model = EaveModel<double>::init(tiny_config(), 3);
  scramble(model, rng, 0.4);
  const auto& layer = model.heavy.layers[0];
  auto x = random_tensor<double>({6, 8}, rng);
  const Mask mask = {1, 1, 1, 1, 0, 0};
  const auto want = layer_oracle(of(x), layer, mask, 2, std::nullopt, nullptr, false);
  const Mat LayerTrace::*fields[] = {&LayerTrace::h1, &LayerTrace::a, &LayerTrace::y,
                                     &LayerTrace::h2, &LayerTrace::m, &LayerTrace::out};
  for (std::size_t i = 0; i < 6; ++i) {
    const auto got = heavy_layer_forward(x, layer, mask, 2, kLocations[i]);
    expect_close(got.next, want.out);
    expect_close(got.extracted, want.*fields[i]);
  }
}

TEST(LightLayer, FusionAtEachLocationMatchesTranscript) {
  Rng rng(2);
  auto model = EaveModel<double>::init(tiny_config(), 4);
  scramble(model, rng, 0.4);
  const auto& layer = model.light.layers[1];
  auto x = random_tensor<double>({8, 8}, rng);
  auto hc = random_tensor<double>({6, 8}, rng);
  auto ha = random_tensor<double>({2, 8}, rng);
  auto adaptor = random_tensor<double>({8, 8}, rng, 0.5);
  const Mask mask = {1, 1, 1, 1, 1, 0, 1, 0};
  const double alpha = 0.35;
  Mat heavy_cat{8, 8, {}};
  heavy_cat.v.assign(hc.data().begin(), hc.data().end());
  heavy_cat.v.insert(heavy_cat.v.end(), ha.data().begin(), ha.data().end());
  const Mat projected = mm(heavy_cat, of(adaptor));
  auto fuse = [&](const Mat& t) {
    Mat out = t;
    for (std::size_t i = 0; i < t.v.size(); ++i) out.v[i] = (1 - alpha) * t.v[i] + alpha * projected.v[i];
    return out;
  };
  for (auto loc : kLocations) {
    for (auto mode : {MlpInputMode::PreFusion, MlpInputMode::PostFusion}) {
      LayerFusion<double> f;
      f.method = FusionMethod::FixedAlpha;
      f.heavy_c = hc;
      f.heavy_a = ha;
      f.adaptor = adaptor;
      f.alpha = Tensor<double>::scalar(alpha);
      const auto got = light_layer_forward(x, layer, &f, loc, mode, mask, 2);
      const bool raw = loc == FusionLocation::AfterAttn && mode == MlpInputMode::PreFusion;
      expect_close(got, layer_oracle(of(x), layer, mask, 2, loc, fuse, raw).out);
    }
  }
}

TEST(LightLayer, WithoutFusionMatchesHeavyLayerMath) {
  Rng rng(3);
  auto model = EaveModel<double>::init(tiny_config(), 5);
  scramble(model, rng, 0.4);
  auto x = random_tensor<double>({8, 8}, rng);
  const Mask mask = {1, 1, 1, 1, 1, 1, 1, 1};
  const auto got = light_layer_forward<double>(x, model.light.layers[0], nullptr, FusionLocation::AfterMlp,
                                               MlpInputMode::PostFusion, mask, 2);
  expect_close(got, layer_oracle(of(x), model.light.layers[0], mask, 2, std::nullopt, nullptr, false).out);
}

TEST(FuseLinear, MatchesInterpolationOfProjectedHeavy) {
  Rng rng(4);
  auto y = random_tensor<double>({5, 3}, rng);
  auto hc = random_tensor<double>({3, 4}, rng);
  auto ha = random_tensor<double>({2, 4}, rng);
  auto w = random_tensor<double>({4, 3}, rng);
  const auto out = fuse_linear(y, hc, ha, w, 0.25);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double p = 0;
      for (std::size_t k = 0; k < 4; ++k) p += (i < 3 ? hc.at(i, k) : ha.at(i - 3, k)) * w.at(k, j);
      EXPECT_NEAR(out.at(i, j), 0.75 * y.at(i, j) + 0.25 * p, 1e-12);
    }
  }
}

TEST(FuseLinear, MisalignedOrMisshapenInputsThrow) {
  const auto y = Tensor<float>::zeros({5, 3});
  EXPECT_THROW(fuse_linear(y, Tensor<float>::zeros({3, 4}), Tensor<float>::zeros({1, 4}), Tensor<float>::zeros({4, 3}), 0.5),
               ShapeError);
  EXPECT_THROW(fuse_linear(y, Tensor<float>::zeros({3, 4}), Tensor<float>::zeros({2, 4}), Tensor<float>::zeros({3, 3}), 0.5),
               ShapeError);
}

TEST(FuseCrossAttention, MatchesOracleAndIgnoresPaddedHeavyRows) {
  Rng rng(5);
  auto model = EaveModel<double>::init(tiny_config(FusionMethod::CrossAttention), 6);
  scramble(model, rng, 0.4);
  const auto& cross = model.fusion.cross_attn[0];
  auto y = random_tensor<double>({8, 8}, rng);
  auto hc = random_tensor<double>({6, 8}, rng);
  auto ha = random_tensor<double>({2, 8}, rng);
  auto w = random_tensor<double>({8, 8}, rng, 0.5);
  const Mask mask = {1, 1, 1, 0, 0, 0, 1, 0};
  const auto out = fuse_cross_attention(y, hc, ha, w, cross, mask, 2);
  Mat cat{8, 8, {}};
  cat.v.assign(hc.data().begin(), hc.data().end());
  cat.v.insert(cat.v.end(), ha.data().begin(), ha.data().end());
  const Mat proj = mm(cat, of(w));
  const Mat attended = affine(attend(affine(of(y), cross.wq, cross.bq), affine(proj, cross.wk, cross.bk),
                                     affine(proj, cross.wv, cross.bv), mask, 2),
                              cross.wo, cross.bo);
  expect_close(out, plus(attended, of(y)));

  auto hc2 = hc.detach();
  for (std::size_t c = 0; c < 8; ++c) hc2.mutable_data()[4 * 8 + c] = 50.0;
  const auto out2 = fuse_cross_attention(y, hc2, ha, w, cross, mask, 2);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out.data()[i], out2.data()[i]);
}

TEST(HeavyEncode, ZeroesPaddingRowsAndKeepsOnlyMappedLayers) {
  auto cfg = tiny_config();
  cfg.heavy.num_layers = 4;
  cfg.layer_mapping = {LayerMappingScheme::EvenOffset, 1};
  auto model = EaveModel<float>::init(cfg, 7);
  const std::vector<int> ids = {5, 6, 7, 0, 0, 0};
  const auto reps = heavy_encode<float>(ids, SequenceKind::Context, model);
  EXPECT_EQ(reps.kind, SequenceKind::Context);
  EXPECT_EQ(reps.seq_len, 6u);
  EXPECT_EQ(reps.fingerprint, model.fingerprint());
  ASSERT_EQ(reps.per_layer.size(), 2u);
  EXPECT_TRUE(reps.per_layer.count(1) && reps.per_layer.count(3));
  for (const auto& [_, t] : reps.per_layer) {
    for (std::size_t r = 3; r < 6; ++r)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(t.at(r, c), 0.0f);
  }
  const std::vector<int> wrong = {5, 6, 7};
  EXPECT_THROW(heavy_encode<float>(wrong, SequenceKind::Context, model), ShapeError);
}

TEST(LightEncode, AlphaZeroIsBitIdenticalToStandalone) {
  auto cfg = tiny_config();
  cfg.alpha = 0.0;
  Rng rng(8);
  for (auto loc : kLocations) {
    cfg.fusion_location = loc;
    auto model = EaveModel<float>::init(cfg, 9);
    scramble(model, rng, 0.3);
    const auto ctx = random_ids(6, 2, 20, rng);
    const auto attr = random_ids(2, 1, 20, rng);
    const auto rc = heavy_encode<float>(ctx, SequenceKind::Context, model);
    const auto ra = heavy_encode<float>(attr, SequenceKind::Attribute, model);
    const auto fused = light_encode<float>(ctx, attr, rc, ra, model);
    const auto plain = light_encode_standalone<float>(ctx, attr, model);
    for (std::size_t i = 0; i < fused.numel(); ++i) ASSERT_EQ(fused.data()[i], plain.data()[i]);
  }
}

TEST(LightEncode, StaleWrongKindAndWrongLengthRepsAreRejected) {
  auto model = EaveModel<float>::init(tiny_config(), 10);
  const std::vector<int> ctx = {3, 4, 5, 0, 0, 0}, attr = {7, 0};
  const auto rc = heavy_encode<float>(ctx, SequenceKind::Context, model);
  const auto ra = heavy_encode<float>(attr, SequenceKind::Attribute, model);
  EXPECT_NO_THROW(light_encode<float>(ctx, attr, rc, ra, model));
  EXPECT_THROW(light_encode<float>(ctx, attr, ra, rc, model), std::invalid_argument);
  model.heavy.layers[0].w_in.mutable_data()[0] += 1e-3f;
  model.invalidate_fingerprint();
  EXPECT_THROW(light_encode<float>(ctx, attr, rc, ra, model), StaleCacheError);
}

TEST(Fingerprint, CoversHeavySideOnly) {
  const auto cfg = tiny_config();
  auto model = EaveModel<float>::init(cfg, 11);
  const auto base = fingerprint(cfg, model.heavy);
  EXPECT_EQ(base, fingerprint(cfg, model.heavy));
  EXPECT_EQ(base, model.fingerprint());

  auto alpha_changed = cfg;
  alpha_changed.alpha = 0.1;
  alpha_changed.beta = 0.0;
  alpha_changed.light.ffn_hidden = 32;
  EXPECT_EQ(base, fingerprint(alpha_changed, model.heavy));

  auto loc_changed = cfg;
  loc_changed.fusion_location = FusionLocation::BeforeMlp;
  EXPECT_NE(base, fingerprint(loc_changed, model.heavy));
  auto map_changed = cfg;
  map_changed.layer_mapping = {LayerMappingScheme::LastLayerOnly, 0};
  EXPECT_NE(base, fingerprint(map_changed, model.heavy));

  model.light.layers[0].attn.wq.mutable_data()[0] += 1.0f;
  EXPECT_EQ(base, fingerprint(cfg, model.heavy));
}

TEST(Fingerprint, SingleWeightPerturbationChangesIt) {
  const auto cfg = tiny_config();
  auto model = EaveModel<float>::init(cfg, 12);
  const auto base = model.fingerprint();
  Rng rng(13);
  const auto params = model.parameters();
  for (int trial = 0; trial < 20; ++trial) {
    const auto& p = params[rng.below(params.size())];
    if (p.group != ParamGroup::Heavy) continue;
    auto t = p.tensor;
    const auto i = rng.below(t.numel());
    const float saved = t.mutable_data()[i];
    t.mutable_data()[i] = saved + 1e-6f;
    model.invalidate_fingerprint();
    EXPECT_NE(base, model.fingerprint()) << p.name;
    t.mutable_data()[i] = saved;
    model.invalidate_fingerprint();
    EXPECT_EQ(base, model.fingerprint());
  }
}

TEST(Init, FollowsStatedScheme) {
  auto model = EaveModel<float>::init(tiny_config(FusionMethod::LearnedAlphaPerLayer), 14);
  for (const auto& p : model.parameters()) {
    const auto& n = p.name;
    const auto data = p.tensor.data();
    auto ends_with = [&](const std::string& s) { return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0; };
    if (ends_with("norm")) {
      for (float v : data) EXPECT_EQ(v, 1.0f) << n;
    } else if (ends_with("alpha") || ends_with(".bq") || ends_with(".bk") || ends_with(".bv") || ends_with(".bo") ||
               ends_with("b_in") || ends_with("b_out") || ends_with("bias")) {
      for (float v : data) EXPECT_EQ(v, 0.0f) << n;
    } else {
      for (float v : data) EXPECT_LE(std::abs(v), 0.04f + 1e-7f) << n;
    }
    EXPECT_TRUE(p.tensor.requires_grad()) << n;
  }
  EXPECT_EQ(model.fusion.learned_alpha.size(), 2u);
}

TEST(Init, SameSeedSameWeightsAndCastRoundTrips) {
  const auto a = EaveModel<float>::init(tiny_config(), 15);
  const auto b = EaveModel<float>::init(tiny_config(), 15);
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
  }
  const auto d = a.cast<double>();
  const auto pd = d.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i].tensor.numel(); ++j)
      ASSERT_EQ(static_cast<double>(pa[i].tensor.data()[j]), pd[i].tensor.data()[j]);
}

TEST(Gradients, EachFusionMethodMatchesFiniteDifferences) {
  for (auto method : {FusionMethod::FixedAlpha, FusionMethod::LearnedAlphaPerLayer, FusionMethod::CrossAttention}) {
    auto cfg = tiny_config(method, FusionLocation::BeforeMlp);
    auto model = EaveModel<double>::init(cfg, 16);
    Rng rng(17);
    scramble(model, rng, 0.3);
    const auto ctx = random_ids(6, 1, 20, rng);
    const auto attr = random_ids(2, 0, 20, rng);
    const TagSequence gold = {Tag::O, Tag::B, Tag::I, Tag::O, Tag::B, Tag::O};
    const auto mask = pad_mask(ctx);
    auto loss_fn = [&] {
      const auto rc = heavy_encode<double>(ctx, SequenceKind::Context, model);
      const auto ra = heavy_encode<double>(attr, SequenceKind::Attribute, model);
      return tagging_loss(tag_logits(light_encode<double>(ctx, attr, rc, ra, model), model.head, 6), gold, mask);
    };
    std::vector<NamedTensor> params;
    for (const auto& p : model.parameters()) params.push_back({p.name, p.tensor});
    const auto report = finite_diff_check(
        [&] {
          model.invalidate_fingerprint();
          return loss_fn();
        },
        params, {1e-5, 150, 3});
    // Central differences at h = 1e-5 carry ~1e-11 of roundoff, so gradients
    // below 1e-6 are held to an absolute bound instead of a relative one.
    for (const auto& s : report.samples) {
      const double diff = std::abs(s.analytic - s.numeric);
      const double scale = std::max(std::abs(s.analytic), std::abs(s.numeric));
      if (scale > 1e-6) {
        EXPECT_LT(diff / scale, 1e-5) << to_string(method) << " " << s.coordinate;
      } else {
        EXPECT_LT(diff, 1e-10) << to_string(method) << " " << s.coordinate;
      }
    }
  }
}


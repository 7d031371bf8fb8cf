#include "eave/cost_model.hpp"

#include <stdexcept>
#include <string>

namespace eave {

double encoder_flops(const EncoderConfig& c, std::size_t seq_len) {
  if (seq_len > c.max_len) {
    throw std::invalid_argument("encoder_flops: seq_len " + std::to_string(seq_len) + " exceeds max_len " +
                                std::to_string(c.max_len));
  }
  const double s = static_cast<double>(seq_len);
  const double d = static_cast<double>(c.hidden);
  const double ff = static_cast<double>(c.ffn_hidden);
  const double per_layer = 8.0 * s * d * d + 4.0 * s * s * d + 4.0 * s * d * ff;
  return per_layer * static_cast<double>(c.num_layers);
}

double fusion_flops(const EaveConfig& c, bool identity_adaptor) {
  if (identity_adaptor && c.heavy.hidden != c.light.hidden) {
    throw std::invalid_argument("fusion_flops: identity adaptor needs equal heavy and light widths");
  }
  const double s = static_cast<double>(c.context_len + c.attribute_len);
  const double dh = static_cast<double>(c.heavy.hidden);
  const double dl = static_cast<double>(c.light.hidden);
  const double adaptor = identity_adaptor ? 0.0 : 2.0 * s * dh * dl;
  double combine = 0.0;
  if (c.fusion_method == FusionMethod::CrossAttention) {
    combine = 8.0 * s * dl * dl + 4.0 * s * s * dl + s * dl;
  } else {
    combine = 3.0 * s * dl;
  }
  return (adaptor + combine) * static_cast<double>(c.light.num_layers);
}

CostReport amortized_cost(const EaveConfig& c, std::size_t n, bool include_precompute) {
  if (n == 0) throw std::invalid_argument("amortized_cost: n_attributes must be >= 1");
  CostReport r;
  r.n_attributes = n;
  const double nn = static_cast<double>(n);
  if (include_precompute) {
    r.c_ctx_heavy = encoder_flops(c.heavy, c.context_len);
    r.c_attr_heavy = encoder_flops(c.heavy, c.attribute_len);
  }
  r.c_joint_heavy = encoder_flops(c.heavy, c.context_len + c.attribute_len);
  r.c_light = encoder_flops(c.light, c.context_len + c.attribute_len);
  r.c_fusion = fusion_flops(c);
  r.amortized_per_product = r.c_ctx_heavy / nn + r.c_attr_heavy + r.c_light + r.c_fusion;
  r.baseline_per_product = r.c_joint_heavy;
  r.amortized_total = r.c_ctx_heavy + nn * (r.c_attr_heavy + r.c_light + r.c_fusion);
  r.baseline_total = nn * r.c_joint_heavy;
  r.speedup = r.baseline_per_product / r.amortized_per_product;
  return r;
}

std::vector<SpeedupRow> speedup_report(const EaveConfig& c, const std::vector<std::size_t>& ns,
                                       bool include_precompute) {
  std::vector<SpeedupRow> rows;
  rows.reserve(ns.size());
  for (auto n : ns) {
    const auto r = amortized_cost(c, n, include_precompute);
    rows.push_back({n, r.amortized_per_product, r.baseline_per_product, r.speedup});
  }
  return rows;
}

void to_json(nlohmann::json& j, const CostReport& r) {
  j = nlohmann::json{{"c_ctx_heavy", r.c_ctx_heavy},
                     {"c_attr_heavy", r.c_attr_heavy},
                     {"c_joint_heavy", r.c_joint_heavy},
                     {"c_light", r.c_light},
                     {"c_fusion", r.c_fusion},
                     {"n_attributes", r.n_attributes},
                     {"amortized_per_product", r.amortized_per_product},
                     {"baseline_per_product", r.baseline_per_product},
                     {"amortized_total", r.amortized_total},
                     {"baseline_total", r.baseline_total},
                     {"speedup", r.speedup}};
}

void to_json(nlohmann::json& j, const SpeedupRow& r) {
  j = nlohmann::json{{"n_attributes", r.n_attributes},
                     {"amortized", r.amortized},
                     {"baseline", r.baseline},
                     {"speedup", r.speedup}};
}

}  // namespace eave

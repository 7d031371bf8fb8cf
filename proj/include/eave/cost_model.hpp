#pragma once

// Analytical FLOP counts, 2 FLOPs per multiply-add. Embeddings,
// normalisation, softmax and the tagging head are not counted.

#include <cstddef>
#include <vector>

#include <json.hpp>

#include "eave/config.hpp"

namespace eave {

struct CostReport {
  double c_ctx_heavy = 0.0;    // heavy encoder over the context alone
  double c_attr_heavy = 0.0;   // heavy encoder over the attribute alone
  double c_joint_heavy = 0.0;  // heavy encoder over context + attribute (baseline)
  double c_light = 0.0;
  double c_fusion = 0.0;
  std::size_t n_attributes = 1;
  double amortized_per_product = 0.0;  // per product-attribute example
  double baseline_per_product = 0.0;   // per product-attribute example
  double amortized_total = 0.0;        // whole product, all N attributes
  double baseline_total = 0.0;
  double speedup = 0.0;
};

// Per layer 8*S*d^2 + 4*S^2*d + 4*S*d*d_ff, times num_layers.
// Throws std::invalid_argument if seq_len exceeds max_len.
double encoder_flops(const EncoderConfig& config, std::size_t seq_len);

// Heavy-to-light fusion over S = context_len + attribute_len, summed over
// light layers. identity_adaptor drops the projection (requires equal widths).
double fusion_flops(const EaveConfig& config, bool identity_adaptor = false);

// include_precompute = false zeroes the cacheable heavy context and attribute
// terms. Throws std::invalid_argument for n_attributes == 0.
CostReport amortized_cost(const EaveConfig& config, std::size_t n_attributes, bool include_precompute);

struct SpeedupRow {
  std::size_t n_attributes = 0;
  double amortized = 0.0;
  double baseline = 0.0;
  double speedup = 0.0;
};

std::vector<SpeedupRow> speedup_report(const EaveConfig& config, const std::vector<std::size_t>& ns,
                                       bool include_precompute);

void to_json(nlohmann::json& j, const CostReport& r);
void to_json(nlohmann::json& j, const SpeedupRow& r);

}  // namespace eave

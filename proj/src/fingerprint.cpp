#include "eave/fingerprint.hpp"

#include <json.hpp>

#include "eave/hash.hpp"

namespace eave {

template <typename T>
std::uint64_t fingerprint(const EaveConfig& config, const EncoderParams<T>& heavy) {
  Fnv1a64 h;
  const nlohmann::json identity = {
      {"heavy", config.heavy},
      {"layer_mapping", config.layer_mapping},
      {"fusion_location", to_string(config.fusion_location)},
  };
  h.update(identity.dump());
  for (const auto& p : encoder_parameters(heavy, "heavy.", ParamGroup::Heavy)) {
    h.update(p.name);
    for (auto d : p.tensor.shape()) h.update_value(static_cast<std::uint64_t>(d));
    h.update_span(p.tensor.data());
  }
  return h.digest();
}

template std::uint64_t fingerprint(const EaveConfig&, const EncoderParams<float>&);
template std::uint64_t fingerprint(const EaveConfig&, const EncoderParams<double>&);

}  // namespace eave

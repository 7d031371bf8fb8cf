#pragma once

#include <cstdint>

#include "eave/config.hpp"
#include "eave/encoder.hpp"

namespace eave {

// Identity of everything that determines cached heavy activations: heavy
// encoder config and weights, layer mapping and fusion location. Light-side
// settings (alpha, beta, light encoder) are deliberately excluded.
template <typename T>
std::uint64_t fingerprint(const EaveConfig& config, const EncoderParams<T>& heavy);

}  // namespace eave

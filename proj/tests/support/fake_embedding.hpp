#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bbgc/store.hpp"

namespace fake {

// Deterministic stand-in descriptor: a fixed smooth map from z to the sphere.
inline std::vector<float> embed(const std::vector<double>& z, std::size_t embed_dim) {
  std::vector<double> e(embed_dim);
  double sq = 0.0;
  for (std::size_t k = 0; k < embed_dim; ++k) {
    e[k] = std::sin(z[k % z.size()] * static_cast<double>(k + 1)) + 0.5;
    sq += e[k] * e[k];
  }
  std::vector<float> out(embed_dim);
  for (std::size_t k = 0; k < embed_dim; ++k) out[k] = static_cast<float>(e[k] / std::sqrt(sq));
  return out;
}

// Response batch for a decoded request. `scale` multiplies every embedding
// (1 keeps them unit norm); `drop` removes that many records.
inline std::string respond(const bbgc::DecodedBatch& request, double scale = 1.0, std::size_t drop = 0) {
  bbgc::StoreHeader h = request.header;
  const std::size_t n = request.samples.size() - std::min(drop, request.samples.size());
  h.count = n;
  std::string out;
  bbgc::encode_header(h, out);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& z = request.samples[i].latent;
    for (double v : z.values()) {
      const float f = static_cast<float>(v);
      out.append(reinterpret_cast<const char*>(&f), 4);
    }
    for (float f : embed({z.values().begin(), z.values().end()}, h.embed_dim)) {
      f = static_cast<float>(f * scale);
      out.append(reinterpret_cast<const char*>(&f), 4);
    }
    const std::string ref = "fake/" + std::to_string(i);
    const auto len = static_cast<std::uint32_t>(ref.size());
    out.append(reinterpret_cast<const char*>(&len), 4);
    out += ref;
  }
  return out;
}

}  // namespace fake

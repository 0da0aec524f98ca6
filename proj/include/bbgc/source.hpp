#pragma once

// Black-box sample sources: the standard-normal latent sampler, the synthetic
// planted-collapse model, and the factory for subprocess/remote adapters.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bbgc/embedding.hpp"
#include "bbgc/sample.hpp"

namespace bbgc {

enum class SourceKind { synthetic, subprocess, remote };

std::string_view to_string(SourceKind kind);

struct SourceSpec {
  SourceKind kind = SourceKind::synthetic;
  std::uint32_t latent_dim = 0;
  std::uint32_t embed_dim = 0;
  nlohmann::json parameters = nlohmann::json::object();
  std::uint64_t seed = 0;

  // Throws InvalidConfig unless latent_dim >= 1 and embed_dim >= 2.
  void validate() const;

  static SourceSpec from_json(const nlohmann::json& j);
  static SourceSpec load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

// n standard-normal latents; draw i depends only on (seed, latent_dim,
// first_index + i). Components are rounded to f32 so a latent survives the
// store unchanged.
std::vector<LatentCode> sample_latents(std::size_t n, std::size_t latent_dim, std::uint64_t seed,
                                       std::uint64_t first_index = 0);
LatentCode sample_latent(std::size_t latent_dim, std::uint64_t seed, std::uint64_t index);

struct BackgroundComponent {
  std::vector<double> center;
  double spread = 0.0;  // radians of tangent-space noise
  double weight = 0.0;
};

struct PlantedMode {
  std::vector<double> center;
  double mass = 0.0;
  double spread = 0.0;
};

// Rectangle of the planted-mode chart, in (radial quantile, angle fraction)
// coordinates of (z0, z1). For L = 1 only the rho interval is used, over the
// normal CDF of z0.
struct ChartRegion {
  double rho_lo = 0.0;
  double rho_hi = 0.0;
  double phi_lo = 0.0;
  double phi_hi = 0.0;
};

// Planted modes own fixed regions of the latent chart, each of probability
// exactly its mass under the standard-normal prior. Every other latent is
// hashed with the seed to pick a background component by weight. Embeddings
// are a tangent-space Gaussian perturbation of the component centre.
class SyntheticModel {
 public:
  SyntheticModel(std::size_t latent_dim, std::vector<BackgroundComponent> background,
                 std::vector<PlantedMode> planted);

  // Builds the model from SourceSpec parameters:
  //   "background": {"components": n, "spread": s} or a list of
  //                 {"center": [...], "spread": s, "weight": w}
  //   "planted":    list of {"mass": q, "spread": s, "center"?: [...]}
  // Missing centres are random unit vectors drawn from the spec seed.
  static SyntheticModel from_spec(const SourceSpec& spec);

  std::size_t latent_dim() const noexcept { return latent_dim_; }
  std::size_t embed_dim() const noexcept { return embed_dim_; }
  const std::vector<BackgroundComponent>& background() const noexcept { return background_; }
  const std::vector<PlantedMode>& planted() const noexcept { return planted_; }
  const std::vector<ChartRegion>& regions() const noexcept { return regions_; }

  // Index of the component that generates z: planted modes first, then
  // background components.
  std::size_t component_of(const LatentCode& z, std::uint64_t seed) const;
  std::size_t planted_index(const LatentCode& z, std::uint64_t seed) const;  // npos if background
  bool is_planted(std::size_t component) const noexcept { return component < planted_.size(); }

  EmbeddingVector embed(const LatentCode& z, std::uint64_t seed) const;

  // A latent from the planted region of mode i, by rejection from the prior.
  LatentCode planted_latent(std::size_t mode, std::uint64_t seed, std::uint64_t index) const;

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  void layout();
  double phase(std::uint64_t seed) const noexcept;

  std::size_t latent_dim_;
  std::size_t embed_dim_ = 0;
  std::vector<BackgroundComponent> background_;
  std::vector<PlantedMode> planted_;
  std::vector<ChartRegion> regions_;
  std::vector<double> cumulative_weight_;
};

EmbeddingVector synthesize_model(const SyntheticModel& model, const LatentCode& z, std::uint64_t seed);

class Generator {
 public:
  virtual ~Generator() = default;
  // One Sample per latent, in input order.
  virtual std::vector<Sample> generate(std::span<const LatentCode> latents) = 0;
};

std::unique_ptr<Generator> make_generator(const SourceSpec& spec);

std::vector<Sample> generate(const SourceSpec& spec, std::span<const LatentCode> latents);

}  // namespace bbgc

#include "bbgc/source.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

#include "bbgc/adapters.hpp"
#include "bbgc/parallel.hpp"
#include "bbgc/rng.hpp"

namespace bbgc {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Planted patches are centred on this radial quantile of (z0, z1).
constexpr double kRhoCentre = 0.4;
// At that quantile a radial-quantile band of width h is about as thick as an
// angle-fraction band of width h / 3.8 is long, so this ratio keeps patches
// roughly square in the latent plane.
constexpr double kPatchAspect = 3.8;

double round_f32(double v) noexcept { return static_cast<double>(static_cast<float>(v)); }

double normal_cdf(double x) noexcept { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double normal_quantile(double p) noexcept {
  double lo = -40.0;
  double hi = 40.0;
  for (int i = 0; i < 200 && hi - lo > 1e-15; ++i) {
    const double mid = 0.5 * (lo + hi);
    (normal_cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double frac(double x) noexcept { return x - std::floor(x); }

std::uint64_t latent_hash(const LatentCode& z) noexcept {
  std::uint64_t h = 0x5BD1E9955BD1E995ULL;
  for (double v : z.values()) {
    float f = static_cast<float>(v);
    if (f == 0.0f) f = 0.0f;
    h = hash_combine(h, std::bit_cast<std::uint32_t>(f));
  }
  return h;
}

std::vector<double> unit_center(const std::vector<double>& values, std::size_t dim, const char* what) {
  if (values.size() != dim) {
    throw Error(ErrorKind::InvalidConfig, std::string(what) + " centre has dimension " +
                                              std::to_string(values.size()) + ", expected " + std::to_string(dim));
  }
  double sq = 0.0;
  for (double v : values) sq += v * v;
  if (!std::isfinite(sq) || std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
    throw Error(ErrorKind::InvalidConfig, std::string(what) + " centre is not unit norm");
  }
  std::vector<double> out = values;
  const double norm = std::sqrt(sq);
  for (double& v : out) v = round_f32(v / norm);
  return out;
}

std::vector<double> random_center(std::size_t dim, std::uint64_t seed, std::uint64_t index) {
  CounterRng rng(seed, index);
  std::vector<double> v(dim);
  for (double& x : v) x = rng.normal();
  const EmbeddingVector e = normalize(v);
  std::vector<double> out(e.values().begin(), e.values().end());
  for (double& x : out) x = round_f32(x);
  return out;
}

// (radial quantile, angle fraction) of (z0, z1); both Uniform(0, 1) under
// the standard-normal prior and independent of each other.
void chart_position(const LatentCode& z, double& rho, double& phi) noexcept {
  const double z0 = round_f32(z[0]);
  if (z.dim() == 1) {
    rho = normal_cdf(z0);
    phi = 0.0;
    return;
  }
  const double z1 = round_f32(z[1]);
  rho = -std::expm1(-0.5 * (z0 * z0 + z1 * z1));
  phi = (std::atan2(z1, z0) + std::numbers::pi) / kTwoPi;
}

}  // namespace

std::string_view to_string(SourceKind kind) {
  switch (kind) {
    case SourceKind::synthetic:
      return "synthetic";
    case SourceKind::subprocess:
      return "subprocess";
    case SourceKind::remote:
      return "remote";
  }
  return "unknown";
}

void SourceSpec::validate() const {
  if (latent_dim < 1) throw Error(ErrorKind::InvalidConfig, "latent_dim must be at least 1");
  if (embed_dim < 2) throw Error(ErrorKind::InvalidConfig, "embed_dim must be at least 2");
  if (!parameters.is_object()) throw Error(ErrorKind::InvalidConfig, "parameters must be an object");
}

SourceSpec SourceSpec::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorKind::InvalidConfig, "source spec must be a JSON object");
  SourceSpec spec;
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "synthetic") {
      spec.kind = SourceKind::synthetic;
    } else if (kind == "subprocess") {
      spec.kind = SourceKind::subprocess;
    } else if (kind == "remote") {
      spec.kind = SourceKind::remote;
    } else {
      throw Error(ErrorKind::InvalidConfig, "unknown source kind '" + kind + "'");
    }
    spec.latent_dim = j.at("latent_dim").get<std::uint32_t>();
    spec.embed_dim = j.at("embed_dim").get<std::uint32_t>();
    spec.seed = j.value("seed", std::uint64_t{0});
    spec.parameters = j.value("parameters", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("source spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

SourceSpec SourceSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open source spec " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, path.string() + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json SourceSpec::to_json() const {
  nlohmann::json j;
  j["kind"] = std::string(to_string(kind));
  j["latent_dim"] = latent_dim;
  j["embed_dim"] = embed_dim;
  j["seed"] = seed;
  j["parameters"] = parameters;
  return j;
}

LatentCode sample_latent(std::size_t latent_dim, std::uint64_t seed, std::uint64_t index) {
  CounterRng rng(seed, index);
  std::vector<double> z(latent_dim);
  for (double& v : z) v = round_f32(rng.normal());
  return LatentCode(std::move(z));
}

std::vector<LatentCode> sample_latents(std::size_t n, std::size_t latent_dim, std::uint64_t seed,
                                       std::uint64_t first_index) {
  if (latent_dim == 0) throw Error(ErrorKind::InvalidConfig, "latent_dim must be at least 1");
  std::vector<LatentCode> out(n);
  parallel_for(
      n,
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) out[i] = sample_latent(latent_dim, seed, first_index + i);
      },
      1024);
  return out;
}

// ---------------------------------------------------------------------------

SyntheticModel::SyntheticModel(std::size_t latent_dim, std::vector<BackgroundComponent> background,
                               std::vector<PlantedMode> planted)
    : latent_dim_(latent_dim), background_(std::move(background)), planted_(std::move(planted)) {
  if (latent_dim_ < 1) throw Error(ErrorKind::InvalidConfig, "latent_dim must be at least 1");
  if (!background_.empty()) {
    embed_dim_ = background_.front().center.size();
  } else if (!planted_.empty()) {
    embed_dim_ = planted_.front().center.size();
  }
  if (embed_dim_ < 2) throw Error(ErrorKind::InvalidConfig, "synthetic model needs embed_dim >= 2");

  double total_mass = 0.0;
  for (auto& m : planted_) {
    if (!(m.mass >= 0.0 && m.mass <= 1.0)) throw Error(ErrorKind::InvalidConfig, "planted mass must lie in [0, 1]");
    if (!(m.spread >= 0.0) || !std::isfinite(m.spread)) {
      throw Error(ErrorKind::InvalidConfig, "planted spread must be >= 0");
    }
    m.center = unit_center(m.center, embed_dim_, "planted");
    total_mass += m.mass;
  }
  if (total_mass > 1.0 + 1e-12) throw Error(ErrorKind::InvalidConfig, "planted masses sum above 1");

  double total_weight = 0.0;
  for (auto& c : background_) {
    if (!(c.spread > 0.0) || !std::isfinite(c.spread)) {
      throw Error(ErrorKind::InvalidConfig, "background spread must be > 0");
    }
    if (!(c.weight >= 0.0) || !std::isfinite(c.weight)) {
      throw Error(ErrorKind::InvalidConfig, "background weight must be >= 0");
    }
    c.center = unit_center(c.center, embed_dim_, "background");
    total_weight += c.weight;
  }
  if (total_mass < 1.0 && !(total_weight > 0.0)) {
    throw Error(ErrorKind::InvalidConfig, "background weights must be positive when planted masses sum below 1");
  }
  double running = 0.0;
  for (auto& c : background_) {
    c.weight = total_weight > 0.0 ? c.weight / total_weight : 0.0;
    running += c.weight;
    cumulative_weight_.push_back(running);
  }
  if (!cumulative_weight_.empty()) cumulative_weight_.back() = 1.0;
  layout();
}

void SyntheticModel::layout() {
  regions_.assign(planted_.size(), ChartRegion{});
  if (planted_.empty()) return;
  if (latent_dim_ == 1) {
    double total = 0.0;
    for (const auto& m : planted_) total += m.mass;
    double lo = 0.5 * (1.0 - total);
    for (std::size_t i = 0; i < planted_.size(); ++i) {
      regions_[i] = {lo, lo + planted_[i].mass, 0.0, 1.0};
      lo += planted_[i].mass;
    }
    return;
  }
  std::vector<double> h_rho(planted_.size());
  std::vector<double> h_phi(planted_.size());
  double phi_total = 0.0;
  for (std::size_t i = 0; i < planted_.size(); ++i) {
    const double q = planted_[i].mass;
    h_rho[i] = std::min(1.0, std::sqrt(kPatchAspect * q));
    h_phi[i] = h_rho[i] > 0.0 ? q / h_rho[i] : 0.0;
    phi_total += h_phi[i];
  }
  if (phi_total > 1.0) {
    // Patches do not fit side by side; fall back to full radial bands.
    phi_total = 0.0;
    for (std::size_t i = 0; i < planted_.size(); ++i) {
      h_rho[i] = 1.0;
      h_phi[i] = planted_[i].mass;
      phi_total += h_phi[i];
    }
  }
  const double gap = std::max(0.0, 1.0 - phi_total) / static_cast<double>(planted_.size());
  double phi = 0.0;
  for (std::size_t i = 0; i < planted_.size(); ++i) {
    const double rho_lo = std::clamp(kRhoCentre - 0.5 * h_rho[i], 0.0, 1.0 - h_rho[i]);
    regions_[i] = {rho_lo, rho_lo + h_rho[i], phi, phi + h_phi[i]};
    phi += h_phi[i] + gap;
  }
}

double SyntheticModel::phase(std::uint64_t seed) const noexcept {
  return CounterRng(derive_seed(seed, "synthetic-chart")).uniform();
}

std::size_t SyntheticModel::planted_index(const LatentCode& z, std::uint64_t seed) const {
  if (z.dim() != latent_dim_) throw Error(ErrorKind::DimensionMismatch, "latent dimension mismatch");
  if (planted_.empty()) return npos;
  double rho = 0.0;
  double phi = 0.0;
  chart_position(z, rho, phi);
  if (latent_dim_ > 1) phi = frac(phi + phase(seed));
  for (std::size_t i = 0; i < regions_.size(); ++i) {
    const ChartRegion& r = regions_[i];
    if (rho >= r.rho_lo && rho < r.rho_hi && phi >= r.phi_lo && phi < r.phi_hi) return i;
  }
  return npos;
}

std::size_t SyntheticModel::component_of(const LatentCode& z, std::uint64_t seed) const {
  const std::size_t p = planted_index(z, seed);
  if (p != npos) return p;
  if (background_.empty()) {
    // Only reachable through boundary rounding when the planted masses sum to 1.
    return planted_.size() - 1;
  }
  CounterRng rng(derive_seed(seed, "synthetic-component"), latent_hash(z));
  const double u = rng.uniform();
  const auto it = std::upper_bound(cumulative_weight_.begin(), cumulative_weight_.end(), u);
  const auto j = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
      it - cumulative_weight_.begin(), static_cast<std::ptrdiff_t>(background_.size()) - 1));
  return planted_.size() + j;
}

EmbeddingVector SyntheticModel::embed(const LatentCode& z, std::uint64_t seed) const {
  const std::size_t comp = component_of(z, seed);
  const std::vector<double>& c = is_planted(comp) ? planted_[comp].center : background_[comp - planted_.size()].center;
  const double spread = is_planted(comp) ? planted_[comp].spread : background_[comp - planted_.size()].spread;
  if (spread == 0.0) return EmbeddingVector::from_unit(c);

  CounterRng rng(derive_seed(seed, "synthetic-noise"), latent_hash(z));
  std::vector<double> t(embed_dim_);
  for (double& v : t) v = rng.normal();
  const double along = dot(t, c);
  const double scale = spread / std::sqrt(static_cast<double>(embed_dim_ - 1));
  for (std::size_t k = 0; k < embed_dim_; ++k) t[k] = c[k] + scale * (t[k] - along * c[k]);
  const EmbeddingVector e = normalize(t);
  std::vector<double> out(e.values().begin(), e.values().end());
  for (double& v : out) v = round_f32(v);
  return EmbeddingVector::from_unit(std::move(out));
}

LatentCode SyntheticModel::planted_latent(std::size_t mode, std::uint64_t seed, std::uint64_t index) const {
  if (mode >= planted_.size()) throw Error(ErrorKind::InvalidConfig, "no such planted mode");
  if (!(planted_[mode].mass > 0.0)) throw Error(ErrorKind::InvalidConfig, "planted mode has zero mass");
  const ChartRegion& r = regions_[mode];
  const double ph = phase(seed);
  for (std::uint64_t attempt = 0; attempt < 1000; ++attempt) {
    CounterRng rng(derive_seed(seed, "planted-latent"), hash_combine(index, attempt));
    std::vector<double> z(latent_dim_);
    const double rho = r.rho_lo + (r.rho_hi - r.rho_lo) * rng.uniform();
    if (latent_dim_ == 1) {
      z[0] = normal_quantile(rho);
    } else {
      const double phi = frac(r.phi_lo + (r.phi_hi - r.phi_lo) * rng.uniform() - ph);
      const double radius = std::sqrt(-2.0 * std::log1p(-rho));
      const double angle = phi * kTwoPi - std::numbers::pi;
      z[0] = radius * std::cos(angle);
      z[1] = radius * std::sin(angle);
      for (std::size_t k = 2; k < latent_dim_; ++k) z[k] = rng.normal();
    }
    for (double& v : z) v = round_f32(v);
    LatentCode code(std::move(z));
    if (planted_index(code, seed) == mode) return code;
  }
  throw Error(ErrorKind::InvalidConfig, "planted region is too thin to sample");
}

SyntheticModel SyntheticModel::from_spec(const SourceSpec& spec) {
  spec.validate();
  const nlohmann::json& p = spec.parameters;
  const std::uint64_t center_seed = derive_seed(spec.seed, "synthetic-centers");
  std::uint64_t next_center = 0;
  std::vector<BackgroundComponent> background;
  std::vector<PlantedMode> planted;
  try {
    const nlohmann::json bg = p.value("background", nlohmann::json::object());
    if (bg.is_array()) {
      for (const auto& item : bg) {
        BackgroundComponent c;
        c.spread = item.value("spread", 0.25);
        c.weight = item.value("weight", 1.0);
        c.center = item.contains("center") ? item.at("center").get<std::vector<double>>()
                                           : random_center(spec.embed_dim, center_seed, next_center);
        ++next_center;
        background.push_back(std::move(c));
      }
    } else if (bg.is_object()) {
      const auto n = bg.value("components", std::size_t{100});
      const double spread = bg.value("spread", 0.25);
      for (std::size_t i = 0; i < n; ++i) {
        background.push_back({random_center(spec.embed_dim, center_seed, next_center++), spread, 1.0});
      }
    } else {
      throw Error(ErrorKind::InvalidConfig, "background must be an object or a list");
    }
    // Planted centres come from their own stream so that changing the
    // background does not move them.
    const std::uint64_t planted_seed = derive_seed(spec.seed, "synthetic-planted-centers");
    std::uint64_t next_planted = 0;
    for (const auto& item : p.value("planted", nlohmann::json::array())) {
      PlantedMode m;
      m.mass = item.at("mass").get<double>();
      m.spread = item.value("spread", 0.0);
      m.center = item.contains("center") ? item.at("center").get<std::vector<double>>()
                                         : random_center(spec.embed_dim, planted_seed, next_planted);
      ++next_planted;
      planted.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("synthetic parameters: ") + e.what());
  }
  SyntheticModel model(spec.latent_dim, std::move(background), std::move(planted));
  if (model.embed_dim() != spec.embed_dim) {
    throw Error(ErrorKind::InvalidConfig, "synthetic centres do not match embed_dim");
  }
  return model;
}

EmbeddingVector synthesize_model(const SyntheticModel& model, const LatentCode& z, std::uint64_t seed) {
  return model.embed(z, seed);
}

// ---------------------------------------------------------------------------

namespace {

class SyntheticGenerator final : public Generator {
 public:
  explicit SyntheticGenerator(const SourceSpec& spec) : model_(SyntheticModel::from_spec(spec)), seed_(spec.seed) {}

  std::vector<Sample> generate(std::span<const LatentCode> latents) override {
    for (const auto& z : latents) {
      if (z.dim() != model_.latent_dim()) {
        throw Error(ErrorKind::DimensionMismatch, "latent dimension " + std::to_string(z.dim()) + ", source expects " +
                                                      std::to_string(model_.latent_dim()));
      }
    }
    std::vector<Sample> out(latents.size());
    parallel_for(
        latents.size(),
        [&](std::size_t begin, std::size_t end) {
          for (std::size_t i = begin; i < end; ++i) {
            out[i].latent = latents[i];
            out[i].embedding = model_.embed(latents[i], seed_);
          }
        },
        256);
    return out;
  }

 private:
  SyntheticModel model_;
  std::uint64_t seed_;
};

}  // namespace

std::unique_ptr<Generator> make_generator(const SourceSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case SourceKind::synthetic:
      return std::make_unique<SyntheticGenerator>(spec);
    case SourceKind::subprocess:
      return make_subprocess_generator(spec);
    case SourceKind::remote:
      return make_remote_generator(spec);
  }
  throw Error(ErrorKind::InvalidConfig, "unknown source kind");
}

std::vector<Sample> generate(const SourceSpec& spec, std::span<const LatentCode> latents) {
  return make_generator(spec)->generate(latents);
}

}  // namespace bbgc

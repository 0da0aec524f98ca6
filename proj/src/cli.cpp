#include "bbgc/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "bbgc/calibrate_gmm.hpp"
#include "bbgc/calibrate_is.hpp"
#include "bbgc/codec.hpp"
#include "bbgc/diagnosis.hpp"
#include "bbgc/rng.hpp"
#include "bbgc/source.hpp"
#include "bbgc/store.hpp"

namespace bbgc {

namespace {

constexpr std::size_t kGenerateChunk = 8192;

struct Options {
  std::string source;
  std::size_t n = 0;
  bool n_given = false;
  std::string anchors;
  std::string pool;
  double theta = 0.3;
  double radius = 0.25;
  std::size_t k = 24;
  std::size_t hull_size = 100;
  std::size_t kmeans_k = 64;
  std::uint64_t seed = 0;
  std::string out;
  std::string stream = "pool";
  std::string report;
  std::string model;
  std::size_t modes = 1;
  std::string curve_sizes;
  std::string format = "csv";
  std::string fields = "latent,embedding";
  std::string store;
  std::string tables;
  std::size_t reference_samples = 1;
};

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string partial = path + ".partial";
  {
    std::ofstream f(partial, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorKind::IoError, "cannot open " + partial + " for writing");
    f << text;
    if (!f) throw Error(ErrorKind::IoError, "write to " + partial + " failed");
  }
  std::error_code ec;
  std::filesystem::rename(partial, path, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot rename " + partial + ": " + ec.message());
}

void write_json(const std::string& path, const nlohmann::ordered_json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, path + ": " + e.what());
  }
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw Error(ErrorKind::Usage, std::string(flag) + " is required");
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> sizes;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || !(v >= 1.0) || v != std::floor(v)) {
      throw Error(ErrorKind::Usage, "bad size '" + item + "' in --curve-sizes");
    }
    sizes.push_back(static_cast<std::size_t>(v));
  }
  return sizes;
}

std::string fmt9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// Streams n generated samples into a store, chunk by chunk.
template <class LatentFn>
std::uint64_t generate_store(Generator& generator, const SourceSpec& spec, std::size_t n, std::uint64_t seed,
                             const std::string& out, LatentFn&& latents_for) {
  StoreWriter writer(out, spec.latent_dim, spec.embed_dim, seed);
  for (std::size_t first = 0; first < n; first += kGenerateChunk) {
    const std::size_t count = std::min(kGenerateChunk, n - first);
    const std::vector<LatentCode> latents = latents_for(first, count);
    for (const auto& s : generator.generate(latents)) writer.append(s);
  }
  return writer.close();
}

SimilarityConfig similarity_config(const Options& o) {
  SimilarityConfig cfg{o.theta, o.radius};
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::Usage, e.what());
  }
  return cfg;
}

int cmd_sample(const Options& o, std::ostream& out) {
  require(o.source, "--source");
  require(o.out, "--out");
  if (o.n < 1) throw Error(ErrorKind::Usage, "--n must be at least 1");
  const SourceSpec spec = SourceSpec::load(o.source);
  auto generator = make_generator(spec);
  const std::uint64_t seed = derive_seed(o.seed, o.stream);
  std::uint64_t count = 0;
  if (o.model.empty()) {
    count = generate_store(*generator, spec, o.n, seed, o.out, [&](std::size_t first, std::size_t c) {
      return sample_latents(c, spec.latent_dim, seed, first);
    });
  } else {
    const nlohmann::json model = read_json(o.model);
    const std::string type = model.value("type", std::string());
    if (type == "gmm") {
      const MixtureModel mix = MixtureModel::from_json(model);
      if (mix.latent_dim() != spec.latent_dim) throw Error(ErrorKind::DimensionMismatch, "model latent dimension");
      count = generate_store(*generator, spec, o.n, seed, o.out, [&](std::size_t first, std::size_t c) {
        return sample_calibrated(mix, c, seed, first);
      });
    } else if (type == "is") {
      const ImportanceSamplingPlan plan = ImportanceSamplingPlan::from_json(model);
      const auto latents = sample_calibrated_is(plan, spec.latent_dim, o.n, seed);
      count = generate_store(*generator, spec, o.n, seed, o.out, [&](std::size_t first, std::size_t c) {
        return std::vector<LatentCode>(latents.begin() + static_cast<std::ptrdiff_t>(first),
                                       latents.begin() + static_cast<std::ptrdiff_t>(first + c));
      });
    } else {
      throw Error(ErrorKind::InvalidConfig, "unknown model type '" + type + "'");
    }
  }
  out << "wrote " << count << " samples to " << o.out << "\n";
  return 0;
}

int cmd_diagnose(const Options& o, std::ostream& out) {
  require(o.anchors, "--anchors");
  require(o.pool, "--pool");
  require(o.out, "--out");
  DiagnoseOptions opt;
  opt.cfg = similarity_config(o);
  opt.k = o.k;
  opt.seed = o.seed;
  opt.curve_sizes = parse_sizes(o.curve_sizes);
  if (o.k < 1) throw Error(ErrorKind::Usage, "--k must be at least 1");
  const Collection anchors = Collection::load(o.anchors);
  const Collection pool = Collection::load(o.pool);
  const DiagnosisReport report = diagnose(anchors, pool, opt);
  write_json(o.out, report.to_json());
  if (!o.tables.empty()) {
    std::string csv = "anchor_index,neighbor_count,mean_similarity,mccs\r\n";
    for (std::size_t a = 0; a < report.per_anchor.size(); ++a) {
      csv += std::to_string(a) + "," + std::to_string(report.counts[a]) + "," +
             fmt9(report.per_anchor[a].mean_similarity) + "," + fmt9(report.per_anchor[a].value) + "\r\n";
    }
    write_text_atomic(o.tables, csv);
  }
  out << "mu_mccs " << fmt9(report.mu) << " sigma_mccs " << fmt9(report.sigma) << " worst anchor "
      << report.worst.anchor_index << " (" << report.worst.neighbor_count << " neighbours)\n";
  return 0;
}

int cmd_find_modes(const Options& o, std::ostream& out) {
  require(o.anchors, "--anchors");
  require(o.pool, "--pool");
  require(o.out, "--out");
  if (o.k < 1) throw Error(ErrorKind::Usage, "--k must be at least 1");
  similarity_config(o);
  const Collection anchors = Collection::load(o.anchors);
  const Collection pool = Collection::load(o.pool);
  const auto modes = top_k_modes(anchors, pool, o.radius, o.k);
  if (o.format == "csv") {
    std::string csv = "rank,anchor_index,neighbor_count\r\n";
    for (std::size_t i = 0; i < modes.size(); ++i) {
      csv += std::to_string(i + 1) + "," + std::to_string(modes[i].anchor_index) + "," +
             std::to_string(modes[i].neighbor_count) + "\r\n";
    }
    write_text_atomic(o.out, csv);
  } else if (o.format == "json") {
    nlohmann::ordered_json j;
    j["radius"] = round9(o.radius);
    auto list = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < modes.size(); ++i) {
      nlohmann::ordered_json m;
      m["rank"] = i + 1;
      m["anchor_index"] = modes[i].anchor_index;
      m["neighbor_count"] = modes[i].neighbor_count;
      list.push_back(std::move(m));
    }
    j["modes"] = std::move(list);
    write_json(o.out, j);
  } else {
    throw Error(ErrorKind::Usage, "--format must be csv or json");
  }
  out << "worst anchor " << modes.front().anchor_index << " (" << modes.front().neighbor_count << " neighbours)\n";
  return 0;
}

std::vector<EmbeddingVector> dense_modes_from_report(const DiagnosisReport& report, std::size_t modes) {
  if (report.no_dense_mode || modes == 0) return {};
  std::vector<EmbeddingVector> out;
  for (const auto& e : report.top_k) {
    if (out.size() == modes) break;
    if (e.neighbor_count > 0) out.push_back(e.embedding);
  }
  if (out.empty()) out.push_back(report.worst.embedding);
  return out;
}

nlohmann::ordered_json provenance(const Options& o, const char* method) {
  nlohmann::ordered_json p;
  p["method"] = method;
  p["seed"] = o.seed;
  p["modes"] = o.modes;
  p["source_sha256"] = sha256_file(o.source);
  p["report_sha256"] = sha256_file(o.report);
  if (!o.pool.empty()) p["pool_sha256"] = sha256_file(o.pool);
  return p;
}

int cmd_calibrate_gmm(const Options& o, std::ostream& out) {
  require(o.source, "--source");
  require(o.report, "--report");
  require(o.out, "--out");
  similarity_config(o);
  const SourceSpec spec = SourceSpec::load(o.source);
  const DiagnosisReport report = DiagnosisReport::from_json(read_json(o.report));
  const auto modes = dense_modes_from_report(report, o.modes);
  auto generator = make_generator(spec);
  GmmOptions opt;
  opt.k = o.kmeans_k;
  opt.r0 = o.radius;
  opt.n_fit = o.n_given ? o.n : 100000;
  opt.seed = derive_seed(o.seed, "calibrate-gmm");
  if (opt.n_fit < 1) throw Error(ErrorKind::Usage, "--n must be at least 1");
  const GmmFit fit = calibrate_gmm(*generator, spec.latent_dim, modes, opt);
  nlohmann::ordered_json j = fit.model.to_json();
  j["raw_counts"] = fit.weights.raw_counts;
  j["provenance"] = provenance(o, "gmm");
  write_json(o.out, j);
  if (fit.covariance_floored) out << "warning: some latent variances were floored to 1e-12\n";
  out << "fitted " << fit.model.k() << "-component mixture\n";
  return 0;
}

int cmd_calibrate_is(const Options& o, std::ostream& out) {
  require(o.source, "--source");
  require(o.report, "--report");
  require(o.pool, "--pool");
  require(o.out, "--out");
  similarity_config(o);
  const DiagnosisReport report = DiagnosisReport::from_json(read_json(o.report));
  const auto modes = dense_modes_from_report(report, o.modes);
  if (modes.empty()) throw Error(ErrorKind::EmptyDenseModeList, "the report has no dense mode");
  const Collection store = Collection::load(o.pool);
  PlanOptions opt;
  opt.r0 = o.radius;
  opt.hull_size = o.hull_size;
  opt.seed = derive_seed(o.seed, "calibrate-is");
  opt.reference_samples = o.reference_samples;
  const ImportanceSamplingPlan plan = build_plan(store, modes, opt);
  nlohmann::ordered_json j = plan.to_json();
  j["provenance"] = provenance(o, "is");
  write_json(o.out, j);
  for (const auto& e : plan.entries) {
    out << "entry p " << fmt9(e.p) << " dense " << e.dense_count << " ref " << fmt9(e.ref_count) << " vertices "
        << e.vertices.rows() << "\n";
  }
  return 0;
}

nlohmann::ordered_json deltas(const DiagnosisReport& before, const DiagnosisReport& after, std::size_t before_mode,
                              std::size_t after_mode) {
  nlohmann::ordered_json d;
  d["d_mu"] = round9(after.mu - before.mu);
  d["d_sigma"] = round9(after.sigma - before.sigma);
  d["d_worst_mccs"] = round9(after.worst.mccs - before.worst.mccs);
  d["worst_count_ratio"] = before.worst.neighbor_count > 0
                               ? nlohmann::ordered_json(round9(static_cast<double>(after.worst.neighbor_count) /
                                                               static_cast<double>(before.worst.neighbor_count)))
                               : nlohmann::ordered_json(nullptr);
  d["dense_mode_count_before"] = before_mode;
  d["dense_mode_count_after"] = after_mode;
  return d;
}

std::string top_k_csv(const DiagnosisReport& r) {
  std::string csv = "rank,anchor_index,neighbor_count,mccs\r\n";
  for (std::size_t i = 0; i < r.top_k.size(); ++i) {
    csv += std::to_string(i + 1) + "," + std::to_string(r.top_k[i].anchor_index) + "," +
           std::to_string(r.top_k[i].neighbor_count) + "," + fmt9(r.top_k[i].mccs) + "\r\n";
  }
  return csv;
}

int cmd_evaluate(const Options& o, std::ostream& out) {
  require(o.source, "--source");
  require(o.model, "--model");
  require(o.anchors, "--anchors");
  require(o.pool, "--pool");
  require(o.out, "--out");
  DiagnoseOptions opt;
  opt.cfg = similarity_config(o);
  opt.k = o.k;
  opt.seed = o.seed;
  const SourceSpec spec = SourceSpec::load(o.source);
  const nlohmann::json model = read_json(o.model);
  const std::string type = model.value("type", std::string());

  const Collection anchors = Collection::load(o.anchors);
  const Collection pool = Collection::load(o.pool);
  const DiagnosisReport before = diagnose(anchors, pool, opt);

  auto draw = [&](std::size_t n, const char* stream) {
    const std::uint64_t seed = derive_seed(o.seed, stream);
    if (type == "gmm") return sample_calibrated(MixtureModel::from_json(model), n, seed);
    if (type == "is") return sample_calibrated_is(ImportanceSamplingPlan::from_json(model), spec.latent_dim, n, seed);
    throw Error(ErrorKind::InvalidConfig, "unknown model type '" + type + "'");
  };
  auto generator = make_generator(spec);
  const auto fresh_anchors = generator->generate(draw(anchors.size(), "evaluate-anchors"));
  const auto fresh_pool = generator->generate(draw(pool.size(), "evaluate-pool"));
  const Collection after_anchors = Collection::from_samples(fresh_anchors);
  const Collection after_pool = Collection::from_samples(fresh_pool);
  const DiagnosisReport after = diagnose(after_anchors, after_pool, opt);

  const std::size_t mode_before = neighbor_count(before.worst.embedding.values(), pool.embeddings(), o.radius);
  const std::size_t mode_after = neighbor_count(before.worst.embedding.values(), after_pool.embeddings(), o.radius);

  nlohmann::ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["model_type"] = type;
  j["model_sha256"] = sha256_file(o.model);
  j["seed"] = o.seed;
  j["before"] = before.to_json();
  j["after"] = after.to_json();
  j["deltas"] = deltas(before, after, mode_before, mode_after);
  write_json(o.out, j);
  if (!o.tables.empty()) {
    write_text_atomic(o.tables + "_before_top_k.csv", top_k_csv(before));
    write_text_atomic(o.tables + "_after_top_k.csv", top_k_csv(after));
  }
  out << "mu_mccs " << fmt9(before.mu) << " -> " << fmt9(after.mu) << ", sigma_mccs " << fmt9(before.sigma) << " -> "
      << fmt9(after.sigma) << ", dense mode neighbours " << mode_before << " -> " << mode_after << "\n";
  return 0;
}

int cmd_report(const Options& o, std::ostream& out) {
  require(o.out, "--out");
  if (!o.store.empty() == !o.report.empty()) throw Error(ErrorKind::Usage, "give exactly one of --store or --report");
  if (!o.store.empty()) {
    TableFormat format;
    if (o.format == "csv") {
      format = TableFormat::csv;
    } else if (o.format == "jsonl") {
      format = TableFormat::json_lines;
    } else {
      throw Error(ErrorKind::Usage, "--format must be csv or jsonl");
    }
    const std::uint64_t rows = export_table(o.store, o.out, format, TableFields::parse(o.fields));
    out << "wrote " << rows << " rows to " << o.out << "\n";
    return 0;
  }
  const DiagnosisReport report = DiagnosisReport::from_json(read_json(o.report));
  std::string csv = "statistic,axis,anchor_index,size,value\r\n";
  for (const auto& c : report.curves) {
    for (const auto& [size, value] : c.points) {
      csv += std::string(to_string(c.kind)) + "," + std::string(to_string(c.axis)) + "," +
             (c.anchor_index ? std::to_string(*c.anchor_index) : std::string()) + "," + std::to_string(size) + "," +
             fmt9(value) + "\r\n";
    }
  }
  write_text_atomic(o.out, csv);
  out << "wrote curves of " << o.report << " to " << o.out << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Black-box intra-mode collapse diagnosis and latent calibration"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Run seed"); };
  auto add_similarity = [&](CLI::App* c) {
    c->add_option("--theta", o.theta, "Maximum same-identity distance")->capture_default_str();
    c->add_option("--radius", o.radius, "Neighbour radius r (and r0)")->capture_default_str();
  };

  CLI::App* sample = app.add_subcommand("sample", "Draw samples into a store");
  sample->add_option("--source", o.source, "Source spec JSON");
  sample->add_option("--n", o.n, "Number of samples");
  sample->add_option("--stream", o.stream, "Seed stream name (anchors, pool, ...)")->capture_default_str();
  sample->add_option("--model", o.model, "Calibrated sampler (gmm or is model JSON)");
  sample->add_option("--out", o.out, "Output store");
  add_common(sample);

  CLI::App* diag = app.add_subcommand("diagnose", "MCCS statistics, worst mode and top-k");
  diag->add_option("--anchors", o.anchors, "Anchor store A");
  diag->add_option("--pool", o.pool, "Sample store C");
  diag->add_option("--k", o.k, "Number of dense modes listed")->capture_default_str();
  diag->add_option("--curve-sizes", o.curve_sizes, "Comma-separated pool sizes for convergence curves");
  diag->add_option("--tables", o.tables, "Per-anchor CSV output");
  diag->add_option("--out", o.out, "Report JSON");
  add_similarity(diag);
  add_common(diag);

  CLI::App* find = app.add_subcommand("find-modes", "Top-k dense modes");
  find->add_option("--anchors", o.anchors, "Anchor store A");
  find->add_option("--pool", o.pool, "Sample store C");
  find->add_option("--k", o.k, "Number of modes")->capture_default_str();
  find->add_option("--format", o.format, "csv or json")->capture_default_str();
  find->add_option("--out", o.out, "Output table");
  add_similarity(find);
  add_common(find);

  CLI::App* calibrate = app.add_subcommand("calibrate", "Fit a calibrated latent sampler");
  calibrate->require_subcommand(1);
  CLI::App* gmm = calibrate->add_subcommand("gmm", "Gaussian-mixture reweighting");
  CLI::App* is = calibrate->add_subcommand("is", "Hull-gated importance sampling");
  for (CLI::App* c : {gmm, is}) {
    c->add_option("--source", o.source, "Source spec JSON");
    c->add_option("--report", o.report, "Diagnosis report JSON");
    c->add_option("--modes", o.modes, "Number of dense modes to calibrate")->capture_default_str();
    c->add_option("--out", o.out, "Model JSON");
    add_similarity(c);
    add_common(c);
  }
  gmm->add_option("--kmeans-k", o.kmeans_k, "Mixture components K")->capture_default_str();
  gmm->add_option("--n", o.n, "Fit sample count (default 100000)");
  is->add_option("--pool", o.pool, "Store the hulls and counts come from");
  is->add_option("--hull-size", o.hull_size, "Latent codes per hull")->capture_default_str();
  is->add_option("--reference-samples", o.reference_samples, "References averaged for ref_count")
      ->capture_default_str();

  CLI::App* eval = app.add_subcommand("evaluate", "Before/after statistics for a calibrated sampler");
  eval->add_option("--source", o.source, "Source spec JSON");
  eval->add_option("--model", o.model, "Model JSON");
  eval->add_option("--anchors", o.anchors, "Anchor store A (before)");
  eval->add_option("--pool", o.pool, "Sample store C (before)");
  eval->add_option("--k", o.k, "Number of dense modes listed")->capture_default_str();
  eval->add_option("--tables", o.tables, "Prefix for top-k CSV tables");
  eval->add_option("--out", o.out, "Evaluation JSON");
  add_similarity(eval);
  add_common(eval);

  CLI::App* report = app.add_subcommand("report", "Export a store or report curves as tables");
  report->add_option("--store", o.store, "Store to export");
  report->add_option("--report", o.report, "Diagnosis report whose curves are exported");
  report->add_option("--format", o.format, "csv or jsonl")->capture_default_str();
  report->add_option("--fields", o.fields, "latent,embedding,image_ref")->capture_default_str();
  report->add_option("--out", o.out, "Output table");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  }
  o.n_given = sample->count("--n") > 0 || gmm->count("--n") > 0;

  try {
    if (*sample) return cmd_sample(o, out);
    if (*diag) return cmd_diagnose(o, out);
    if (*find) return cmd_find_modes(o, out);
    if (*gmm) return cmd_calibrate_gmm(o, out);
    if (*is) return cmd_calibrate_is(o, out);
    if (*eval) return cmd_evaluate(o, out);
    if (*report) return cmd_report(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}

}  // namespace bbgc

#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Eigenvalues>
#include <fmt/format.h>

#include "klr/config.hpp"
#include "klr/error.hpp"
#include "klr/generate.hpp"
#include "klr/personalize.hpp"
#include "klr/pipeline.hpp"
#include "klr/store.hpp"

namespace klr::cli {
namespace {

namespace fs = std::filesystem;

std::string real(double v) { return fmt::format("{:.17g}", v); }

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

// Files produced by one command. Unless committed, every registered file is
// removed on destruction, and so is the output directory if this run created it.
class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) {
    if (dir_.empty()) return;
    if (fs::exists(dir_)) {
      if (!fs::is_directory(dir_)) throw IoError(dir_.string() + ": exists and is not a directory");
      return;
    }
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError(dir_.string() + ": cannot create directory: " + ec.message());
    created_ = true;
  }
  Outputs(const Outputs&) = delete;
  Outputs& operator=(const Outputs&) = delete;
  ~Outputs() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& p : paths_) {
      fs::remove(p, ec);
      fs::remove(fs::path(p) += ".partial", ec);
    }
    if (created_) fs::remove(dir_, ec);  // fails harmlessly if anything else lives there
  }

  bool enabled() const noexcept { return !dir_.empty(); }
  fs::path add(const std::string& name) {
    if (!enabled()) throw ContractError("--out is required for this command");
    paths_.push_back(dir_ / name);
    names_.push_back(name);
    return paths_.back();
  }
  std::string listing() const {
    std::string s;
    for (std::size_t i = 0; i < names_.size(); ++i) s += (i ? "," : "") + names_[i];
    return s;
  }
  void commit() noexcept { committed_ = true; }

 private:
  fs::path dir_;
  bool created_ = false;
  bool committed_ = false;
  std::vector<fs::path> paths_;
  std::vector<std::string> names_;
};

void write_text(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(tmp.string() + ": cannot open for writing");
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw IoError(tmp.string() + ": write failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError(path.string() + ": " + ec.message());
}

// Everything a subcommand can be told on the command line. Unset optionals
// leave the config value alone.
struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> prompt;
  std::vector<std::string> concepts;
  std::optional<std::string> lock;
  std::optional<double> beta;
  std::optional<double> tau;
  std::optional<double> guidance;
  std::optional<int> ddim_steps;
  std::optional<int> steps;
  std::optional<std::string> select_step;
  std::optional<std::string> precision;
  std::optional<std::string> superclass;
  std::optional<std::string> name;
  std::optional<std::string> covariance;
  std::optional<double> mix_strength;
  std::vector<double> betas;
  std::vector<double> taus;
  std::optional<int> seeds;
  bool save_cache = false;
  std::string path;
  std::string grid;
};

std::uint64_t parse_env_seed(const char* text) {
  const std::string s(text);
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("KLR1_SEED is not an unsigned integer: '" + s + "'");
  return v;
}

// Precedence: defaults < config file < KLR1_SEED (seed only) < flags.
RunConfig resolve(const Flags& f) {
  RunConfig cfg;
  if (!f.config.empty()) merge_run_config(cfg, f.config);
  if (const char* env = std::getenv("KLR1_SEED"); env != nullptr && *env != '\0') cfg.seed = parse_env_seed(env);
  if (f.seed) cfg.seed = *f.seed;
  if (f.prompt) cfg.prompt = *f.prompt;
  if (!f.concepts.empty()) cfg.concepts = f.concepts;
  if (f.lock) cfg.lock = parse_lock_mode(*f.lock);
  if (f.beta) cfg.beta = *f.beta;
  if (f.tau) cfg.tau = *f.tau;
  if (f.guidance) cfg.guidance = *f.guidance;
  if (f.ddim_steps) cfg.ddim_steps = *f.ddim_steps;
  if (f.steps) cfg.train.steps = *f.steps;
  if (f.select_step) {
    if (*f.select_step == "final") {
      cfg.train.select_step.reset();
    } else {
      try {
        cfg.train.select_step = std::stoi(*f.select_step);
      } catch (const std::exception&) {
        throw ConfigError("--select-step expects an integer or 'final'");
      }
    }
  }
  if (f.precision) cfg.precision = parse_precision(*f.precision);
  if (f.superclass) cfg.superclass = *f.superclass;
  if (f.name) cfg.concept_name = *f.name;
  if (f.covariance) cfg.covariance = *f.covariance;
  if (f.mix_strength) cfg.pipeline.mix_strength = *f.mix_strength;
  if (!f.betas.empty()) cfg.sweep_betas = f.betas;
  if (!f.taus.empty()) cfg.sweep_taus = f.taus;
  if (f.seeds) cfg.seeds = *f.seeds;
  cfg.sync_seed();
  return cfg;
}

ToyPipeline make_pipeline(const RunConfig& cfg) {
  if (cfg.covariance.empty()) return ToyPipeline(cfg.pipeline);
  auto metric = load_covariance(cfg.covariance);
  if (metric.dim() != cfg.pipeline.d_e) {
    throw LoadError(cfg.covariance.string() + ": covariance dimension is " + std::to_string(metric.dim()) +
                    ", pipeline d_e is " + std::to_string(cfg.pipeline.d_e));
  }
  return ToyPipeline(cfg.pipeline, std::move(metric));
}

void write_manifest(Outputs& outputs, const RunConfig& cfg, const std::string& command) {
  const fs::path path = outputs.add("manifest.ini");
  write_text(path, manifest_text(cfg, {{"command", command}, {"files", outputs.listing()}}));
}

// Concepts named on the command line, loaded and bound to their prompt tokens.
struct LoadedConcepts {
  std::vector<Concept> concepts;  // never resized after binding
  std::vector<BoundConcept> bound;
};

LoadedConcepts load_concepts(RunConfig& cfg, const ToyPipeline& pipeline) {
  LoadedConcepts out;
  const std::size_t n = cfg.concepts.size();
  std::vector<std::string> tokens;
  std::vector<std::string> paths;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& spec = cfg.concepts[i];
    const auto eq = spec.find('=');
    std::string token;
    std::string path = spec;
    if (eq != std::string::npos) {
      token = spec.substr(0, eq);
      path = spec.substr(eq + 1);
      if (!is_placeholder(token)) throw ContractError("concept token '" + token + "' must end in '*'");
    } else {
      token = n == 1 ? std::string(kPlaceholder) : fmt::format("S{}*", i + 1);
    }
    if (path.empty()) throw ContractError("concept spec '" + spec + "' has no path");
    tokens.push_back(token);
    paths.push_back(path);
  }
  if (std::set<std::string>(tokens.begin(), tokens.end()).size() != tokens.size()) {
    throw ContractError("two concepts are bound to the same token");
  }
  out.concepts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.concepts.push_back(load_concept(paths[i], pipeline.encoder().vocabulary()));
    check_compatible(out.concepts.back(), pipeline);
    cfg.concepts[i] = tokens[i] + "=" + paths[i];
  }
  for (std::size_t i = 0; i < n; ++i) out.bound.push_back({&out.concepts[i], tokens[i], std::nullopt});
  return out;
}

void require_tokens_in_prompt(const std::vector<std::string>& prompt, const std::vector<BoundConcept>& bound) {
  for (const auto& b : bound) {
    if (std::find(prompt.begin(), prompt.end(), b.token) == prompt.end()) {
      throw ContractError("concept token '" + b.token + "' does not occur in the prompt");
    }
  }
}

ConditionOptions condition_options(const RunConfig& cfg) {
  ConditionOptions o;
  o.lock = cfg.lock;
  o.tau = cfg.tau;
  o.beta = cfg.resolved_beta();
  return o;
}

GenerateRequest make_request(const RunConfig& cfg, const LoadedConcepts& lc) {
  GenerateRequest req;
  req.tokens = tokenize(cfg.prompt);
  require_tokens_in_prompt(req.tokens, lc.bound);
  req.concepts = lc.bound;
  req.options = condition_options(cfg);
  req.guidance = cfg.guidance;
  req.steps = cfg.ddim_steps;
  req.seed = cfg.seed;
  return req;
}

std::string attention_csv(const Denoiser& den, const Denoiser::Trace& trace, const std::vector<std::string>& tokens) {
  std::string s = "layer,token_index,token,x,y,weight,spread\n";
  for (std::size_t l = 0; l < trace.attention.size(); ++l) {
    const Matrix& a = trace.attention[l];
    for (int m = 0; m < a.cols(); ++m) {
      const Matrix map = attention_map(a, m, den.height(), den.width());
      const std::string spread = real(attention_spread(map));
      const std::string token = csv_field(tokens.at(static_cast<std::size_t>(m)));
      for (int y = 0; y < den.height(); ++y)
        for (int x = 0; x < den.width(); ++x)
          s += fmt::format("{},{},{},{},{},{},{}\n", l, m, token, x, y, real(map(y, x)), spread);
    }
  }
  return s;
}

std::string gates_csv(const GenerateResult& r) {
  std::string s = "concept,token_index,token,ratio,gate\n";
  for (const auto& g : r.gates) {
    for (int m = 0; m < g.report.ratios.size(); ++m) {
      s += fmt::format("{},{},{},{},{}\n", csv_field(g.token), m,
                       csv_field(r.conditioned.prompt.tokens.at(static_cast<std::size_t>(m))), real(g.report.ratios(m)),
                       real(g.report.gates(m)));
    }
  }
  return s;
}

// ---------------------------------------------------------------- commands

int cmd_covstats(const Flags& f, std::ostream& out) {
  RunConfig cfg = resolve(f);
  Outputs outputs(f.out);
  const ToyPipeline pipeline = make_pipeline(cfg);
  // Eigenvalues of C are the reciprocals of those of C^-1.
  Eigen::SelfAdjointEigenSolver<Matrix> es(pipeline.metric().c_inv(), Eigen::EigenvaluesOnly);
  const double eig_min = 1.0 / es.eigenvalues().maxCoeff();
  const double eig_max = 1.0 / es.eigenvalues().minCoeff();
  const std::size_t samples = cfg.covariance.empty() ? pipeline.covariance_corpus().size() : 0;
  const std::string csv = fmt::format("d_e,samples,ridge,eig_min,eig_max,condition\n{},{},{},{},{},{}\n",
                                      pipeline.metric().dim(), samples, real(pipeline.ridge_used()), real(eig_min),
                                      real(eig_max), real(eig_max / eig_min));
  out << csv;
  if (outputs.enabled()) {
    write_text(outputs.add("covstats.csv"), csv);
    if (f.save_cache) save_covariance(pipeline.metric(), outputs.add("covariance.klr"));
    write_manifest(outputs, cfg, "covstats");
  } else if (f.save_cache) {
    throw ContractError("--save-cache needs --out");
  }
  outputs.commit();
  return 0;
}

int cmd_train(const Flags& f, std::ostream& out) {
  RunConfig cfg = resolve(f);
  Outputs outputs(f.out);
  if (!outputs.enabled()) throw ContractError("train needs --out");
  const ToyPipeline pipeline = make_pipeline(cfg);
  const auto dataset = synthetic_dataset(pipeline, cfg.superclass, cfg.seed, cfg.data);
  const Concept init = init_concept(cfg.concept_name, cfg.superclass, pipeline);
  const TrainResult result = train_concept(init, dataset, cfg.train, pipeline);

  std::string log = "step,loss,gate_mean,i_star_norm\n";
  for (const auto& r : result.log) {
    log += fmt::format("{},{},{},{}\n", r.step, real(r.loss), real(r.gate_mean), real(r.i_star_norm));
  }
  const std::size_t bytes =
      save_concept(result.concept_state, pipeline.encoder().vocabulary(), outputs.add(cfg.concept_name + ".klc"),
                   cfg.precision);
  write_text(outputs.add("train_log.csv"), log);
  write_manifest(outputs, cfg, "train");
  outputs.commit();
  out << fmt::format("concept {} ({} bytes), {} steps, final loss {}\n", cfg.concept_name, bytes, result.log.size(),
                     result.log.empty() ? "n/a" : real(result.log.back().loss));
  return 0;
}

int generate_common(const Flags& f, std::ostream& out, const std::string& command, bool combine) {
  RunConfig cfg = resolve(f);
  Outputs outputs(f.out);
  if (!outputs.enabled()) throw ContractError(command + " needs --out");
  const ToyPipeline pipeline = make_pipeline(cfg);
  if (combine && cfg.concepts.size() < 2) throw ContractError("combine needs at least two --concept flags");
  LoadedConcepts lc = load_concepts(cfg, pipeline);
  if (combine && !f.prompt && cfg.prompt == RunConfig{}.prompt) {
    std::string p = "a photo of";
    for (std::size_t i = 0; i < lc.bound.size(); ++i) p += (i ? " and a " : " a ") + lc.bound[i].token;
    cfg.prompt = p;
  }
  const GenerateResult r = generate(pipeline, make_request(cfg, lc));
  save_grid(r.sample, outputs.add("sample.klg"));
  write_text(outputs.add("attention.csv"), attention_csv(pipeline.denoiser(), r.final_trace, r.conditioned.prompt.tokens));
  write_text(outputs.add("gates.csv"), gates_csv(r));
  write_manifest(outputs, cfg, command);
  outputs.commit();
  out << fmt::format("{}: '{}' with {} concept(s), lock {}, beta {}, tau {}\n", command, cfg.prompt, lc.bound.size(),
                     to_string(cfg.lock), real(cfg.resolved_beta()), real(cfg.tau));
  return 0;
}

int cmd_sweep(const Flags& f, std::ostream& out) {
  RunConfig cfg = resolve(f);
  Outputs outputs(f.out);
  if (!outputs.enabled()) throw ContractError("sweep needs --out");
  if (cfg.concepts.size() != 1) throw ContractError("sweep needs exactly one --concept");
  if (cfg.sweep_betas.empty()) cfg.sweep_betas = {0.5, 0.6, 0.675, 0.75, 0.9};
  if (cfg.sweep_taus.empty()) {
    cfg.sweep_taus = {cfg.train.gate.tau};
    if (cfg.tau != cfg.train.gate.tau) cfg.sweep_taus.push_back(cfg.tau);
  }
  const ToyPipeline pipeline = make_pipeline(cfg);
  LoadedConcepts lc = load_concepts(cfg, pipeline);
  const Concept& cpt = lc.concepts.front();
  const std::string token = lc.bound.front().token;

  // Reconstruction target: the synthetic dataset of the same seed, prompts bound to the default placeholder.
  const auto dataset = synthetic_dataset(pipeline, cpt.superclass, cfg.seed, cfg.data);
  const auto items = validation_items(dataset, pipeline, cfg.seed);
  const EmbeddingOverrides overrides{{std::string(kPlaceholder), cpt.embedding}};
  const std::vector<BoundConcept> recon_bound{{&cpt, std::string(kPlaceholder), std::nullopt}};

  std::string csv = "beta,tau,gate_mean,spread,recon_error\n";
  for (double tau : cfg.sweep_taus) {
    for (double beta : cfg.sweep_betas) {
      RunConfig point = cfg;
      point.beta = beta;
      point.tau = tau;
      const GenerateResult r = generate(pipeline, make_request(point, lc));
      const auto positions = r.conditioned.prompt.positions_of(token);
      double gate_sum = 0.0;
      for (int p : positions) gate_sum += r.gates.front().report.gates(p);
      const double gate_mean = gate_sum / static_cast<double>(positions.size());
      const double spread = mean_token_spread(pipeline.denoiser(), r.final_trace, positions.front());
      const ConditionOptions opts = condition_options(point);
      const double recon = validation_loss(pipeline, dataset, items, overrides, [&](const EncodedPrompt& ep) {
        return condition_prompt(pipeline, ep.tokens, recon_bound, opts).conditioning;
      });
      csv += fmt::format("{},{},{},{},{}\n", real(beta), real(tau), real(gate_mean), real(spread), real(recon));
    }
  }
  write_text(outputs.add("sweep.csv"), csv);
  write_manifest(outputs, cfg, "sweep");
  outputs.commit();
  out << csv;
  return 0;
}

int cmd_inspect(const Flags& f, std::ostream& out) {
  RunConfig cfg = resolve(f);
  const ConceptHeader h = read_concept_header(f.path);
  std::error_code ec;
  const auto bytes = fs::file_size(f.path, ec);
  if (ec) throw IoError(f.path + ": " + ec.message());
  const Vocabulary vocab = cfg.pipeline.vocabulary_file.empty()
                               ? Vocabulary(Vocabulary::default_tokens(), 1, 0)
                               : Vocabulary::from_file(cfg.pipeline.vocabulary_file, 1, 0);
  std::string s;
  auto line = [&](std::string_view k, const std::string& v) { s += fmt::format("{} = {}\n", k, v); };
  line("file", f.path);
  line("version", std::to_string(h.version));
  line("precision", to_string(h.precision));
  line("d_w", std::to_string(h.dims.d_w));
  line("d_e", std::to_string(h.dims.d_e));
  line("layers", std::to_string(h.dims.layers.size()));
  for (std::size_t l = 0; l < h.dims.layers.size(); ++l) {
    line(fmt::format("layer{}.d_k", l), std::to_string(h.dims.layers[l].d_k));
    line(fmt::format("layer{}.d_v", l), std::to_string(h.dims.layers[l].d_v));
  }
  line("superclass_index", std::to_string(h.superclass_index));
  if (h.superclass_index < static_cast<std::uint32_t>(vocab.size())) {
    line("superclass", vocab.token(static_cast<int>(h.superclass_index)));
  }
  line("bytes", std::to_string(bytes));
  line("predicted_bytes", std::to_string(predicted_size(h.dims, h.precision)));
  out << s;
  Outputs outputs(f.out);
  if (outputs.enabled()) {
    write_text(outputs.add("inspect.txt"), s);
    write_manifest(outputs, cfg, "inspect");
  }
  outputs.commit();
  return 0;
}

int cmd_inspect_gates(const Flags& f, std::ostream& out) {
  RunConfig cfg = resolve(f);
  if (cfg.concepts.size() != 1) throw ContractError("inspect-gates needs exactly one --concept");
  const ToyPipeline pipeline = make_pipeline(cfg);
  LoadedConcepts lc = load_concepts(cfg, pipeline);
  const auto tokens = tokenize(cfg.prompt);
  require_tokens_in_prompt(tokens, lc.bound);
  const Concept& cpt = lc.concepts.front();
  const EncodedPrompt ep = pipeline.encoder().encode(tokens, {{lc.bound.front().token, cpt.embedding}});
  const GateReport g = gate_report(pipeline, ep, cpt, {cfg.resolved_beta(), cfg.tau});
  std::string csv = "token_index,ratio,gate\n";
  for (int m = 0; m < g.ratios.size(); ++m) csv += fmt::format("{},{},{}\n", m, real(g.ratios(m)), real(g.gates(m)));
  out << csv;
  Outputs outputs(f.out);
  if (outputs.enabled()) {
    write_text(outputs.add("gates.csv"), csv);
    write_manifest(outputs, cfg, "inspect-gates");
  }
  outputs.commit();
  return 0;
}

int cmd_attn_dump(const Flags& f, std::ostream& out) {
  RunConfig cfg = resolve(f);
  Outputs outputs(f.out);
  if (!outputs.enabled()) throw ContractError("attn-dump needs --out");
  const ToyPipeline pipeline = make_pipeline(cfg);
  LoadedConcepts lc = load_concepts(cfg, pipeline);
  std::string csv;
  if (f.grid.empty()) {
    const GenerateResult r = generate(pipeline, make_request(cfg, lc));
    csv = attention_csv(pipeline.denoiser(), r.final_trace, r.conditioned.prompt.tokens);
  } else {
    // Attention of the given grid under the prompt, without sampling.
    const FeatureGrid grid = load_grid(f.grid);
    const auto& den = pipeline.denoiser();
    if (grid.height != den.height() || grid.width != den.width() || grid.channels != den.channels()) {
      throw LoadError(fmt::format("{}: grid is {}x{}x{}, pipeline expects {}x{}x{}", f.grid, grid.height, grid.width,
                                  grid.channels, den.height(), den.width(), den.channels()));
    }
    const auto tokens = tokenize(cfg.prompt);
    require_tokens_in_prompt(tokens, lc.bound);
    const ConditionedPrompt cp = condition_prompt(pipeline, tokens, lc.bound, condition_options(cfg));
    Denoiser::Trace trace;
    den.predict_x0(grid, cp.conditioning, &trace);
    csv = attention_csv(den, trace, cp.prompt.tokens);
  }
  write_text(outputs.add("attention.csv"), csv);
  write_manifest(outputs, cfg, "attn-dump");
  outputs.commit();
  out << fmt::format("attn-dump: '{}'\n", cfg.prompt);
  return 0;
}

int cmd_mismatch(const Flags& f, std::ostream& out) {
  RunConfig cfg = resolve(f);
  Outputs outputs(f.out);
  if (!outputs.enabled()) throw ContractError("mismatch needs --out");
  if (cfg.seeds < 1) throw ConfigError("seeds must be positive");
  std::string csv = "seed,loss_a_train,loss_a_eval,loss_b,gap\n";
  for (int k = 0; k < cfg.seeds; ++k) {
    RunConfig run = cfg;
    run.seed = cfg.seed + static_cast<std::uint64_t>(k);
    run.sync_seed();
    const ToyPipeline pipeline = make_pipeline(run);
    const auto dataset = synthetic_dataset(pipeline, run.superclass, run.seed, run.data);
    const MismatchReport r = reproduce_mismatch(dataset, run.train, pipeline, run.superclass);
    csv += fmt::format("{},{},{},{},{}\n", run.seed, real(r.loss_a_train), real(r.loss_a_eval), real(r.loss_b),
                       real(r.gap()));
  }
  write_text(outputs.add("mismatch.csv"), csv);
  write_manifest(outputs, cfg, "mismatch");
  outputs.commit();
  out << csv;
  return 0;
}

// ---------------------------------------------------------------- parsing

void add_common(CLI::App* app, Flags& f, bool needs_out) {
  app->add_option("--config", f.config, "Config or manifest file")->check(CLI::ExistingFile);
  app->add_option("--seed", f.seed, "Seed for every random draw (overrides KLR1_SEED and the config)");
  auto* o = app->add_option("--out", f.out, "Output directory");
  if (needs_out) o->required();
  app->add_option("--covariance", f.covariance, "Cached covariance file to use instead of estimating");
  app->add_option("--mix-strength", f.mix_strength, "Text encoder mixing strength");
}

void add_inference(CLI::App* app, Flags& f) {
  app->add_option("--prompt", f.prompt, "Prompt text");
  app->add_option("--concept", f.concepts, "Concept file, optionally bound to a token: [TOKEN=]PATH")
      ->allow_extra_args(false);
  app->add_option("--lock", f.lock, "Key lock: none, local or global");
  app->add_option("--beta", f.beta, "Gate bias");
  app->add_option("--tau", f.tau, "Gate temperature");
  app->add_option("--guidance", f.guidance, "Classifier-free guidance scale");
  app->add_option("--ddim-steps", f.ddim_steps, "Sampler steps");
}

void add_training(CLI::App* app, Flags& f) {
  app->add_option("--steps", f.steps, "Optimizer steps");
  app->add_option("--select-step", f.select_step, "Step whose parameters are kept, or 'final'");
  app->add_option("--precision", f.precision, "Stored scalar width: f32 or f64");
  app->add_option("--superclass", f.superclass, "Superclass word");
  app->add_option("--name", f.name, "Concept name (file stem)");
}

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Key-locked rank-1 concept editing on a toy text-to-grid diffusion model"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");
  Flags f;

  auto* covstats = app.add_subcommand("covstats", "Estimate the covariance and report its spectrum");
  add_common(covstats, f, false);
  covstats->add_flag("--save-cache", f.save_cache, "Also write covariance.klr into --out");

  auto* train = app.add_subcommand("train", "Train a concept on its synthetic dataset");
  add_common(train, f, true);
  add_training(train, f);

  auto* generate_cmd = app.add_subcommand("generate", "Sample a grid for a prompt");
  add_common(generate_cmd, f, true);
  add_inference(generate_cmd, f);

  auto* combine = app.add_subcommand("combine", "Sample with two or more concepts");
  add_common(combine, f, true);
  add_inference(combine, f);

  auto* sweep = app.add_subcommand("sweep", "Gate bias/temperature sweep for one concept");
  add_common(sweep, f, true);
  add_inference(sweep, f);
  sweep->add_option("--betas", f.betas, "Comma-separated gate biases")->delimiter(',');
  sweep->add_option("--taus", f.taus, "Comma-separated gate temperatures")->delimiter(',');

  auto* inspect = app.add_subcommand("inspect", "Print a concept file header");
  add_common(inspect, f, false);
  inspect->add_option("path", f.path, "Concept file")->required();

  auto* inspect_gates = app.add_subcommand("inspect-gates", "Per-token gate ratios and values");
  add_common(inspect_gates, f, false);
  add_inference(inspect_gates, f);

  auto* attn = app.add_subcommand("attn-dump", "Dump per-layer attention maps as CSV");
  add_common(attn, f, true);
  add_inference(attn, f);
  attn->add_option("--grid", f.grid, "Evaluate attention on this grid instead of sampling");

  auto* mismatch = app.add_subcommand("mismatch", "Train-versus-inference mismatch experiment");
  add_common(mismatch, f, true);
  add_training(mismatch, f);
  mismatch->add_option("--seeds", f.seeds, "Number of consecutive seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kContract);
  }

  if (*covstats) return cmd_covstats(f, out);
  if (*train) return cmd_train(f, out);
  if (*generate_cmd) return generate_common(f, out, "generate", false);
  if (*combine) return generate_common(f, out, "combine", true);
  if (*sweep) return cmd_sweep(f, out);
  if (*inspect) return cmd_inspect(f, out);
  if (*inspect_gates) return cmd_inspect_gates(f, out);
  if (*attn) return cmd_attn_dump(f, out);
  if (*mismatch) return cmd_mismatch(f, out);
  return static_cast<int>(ExitCode::kContract);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(argc, argv, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kIo);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kNumerical);
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace klr::cli

#include "klr/config.hpp"

#include <charconv>
#include <functional>
#include <map>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "klr/error.hpp"

namespace klr {

namespace pt = boost::property_tree;

double default_inference_beta(LockMode lock) {
  return lock == LockMode::kGlobal ? kGlobalLockBeta : kLocalLockBeta;
}

void RunConfig::sync_seed() {
  pipeline.seed = seed;
  train.seed = seed;
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) throw ConfigError("'" + key + "' has invalid value '" + text + "'");
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + text + "'");
}

std::string real(double v) { return fmt::format("{:.17g}", v); }

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = text.find(',', start);
    std::string item = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
    const auto first = item.find_first_not_of(" \t");
    const auto last = item.find_last_not_of(" \t");
    item = first == std::string::npos ? std::string() : item.substr(first, last - first + 1);
    if (!item.empty()) out.push_back(item);
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return out;
}

std::vector<double> real_list(const std::string& key, const std::string& text) {
  std::vector<double> out;
  for (const auto& item : split_list(text)) out.push_back(parse_number<double>(key, item));
  return out;
}

std::string join_reals(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + real(v[i]);
  return s;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <typename T>
Setter number(T RunConfig::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_number<T>(k, v); };
}

template <typename Sub, typename T>
Setter number(Sub RunConfig::*sub, T Sub::*field) {
  return [sub, field](RunConfig& c, const std::string& k, const std::string& v) {
    (c.*sub).*field = parse_number<T>(k, v);
  };
}

const std::map<std::string, std::map<std::string, Setter>>& setters() {
  static const std::map<std::string, std::map<std::string, Setter>> table = {
      {"run",
       {
           {"seed", number(&RunConfig::seed)},
           {"seeds", number(&RunConfig::seeds)},
           {"superclass", [](RunConfig& c, const std::string&, const std::string& v) { c.superclass = v; }},
           {"name", [](RunConfig& c, const std::string&, const std::string& v) { c.concept_name = v; }},
           {"covariance", [](RunConfig& c, const std::string&, const std::string& v) { c.covariance = v; }},
           {"precision",
            [](RunConfig& c, const std::string&, const std::string& v) { c.precision = parse_precision(v); }},
       }},
      {"pipeline",
       {
           {"d_w", number(&RunConfig::pipeline, &PipelineConfig::d_w)},
           {"d_e", number(&RunConfig::pipeline, &PipelineConfig::d_e)},
           {"d_f", number(&RunConfig::pipeline, &PipelineConfig::d_f)},
           {"d_k", number(&RunConfig::pipeline, &PipelineConfig::d_k)},
           {"d_v", number(&RunConfig::pipeline, &PipelineConfig::d_v)},
           {"layers", number(&RunConfig::pipeline, &PipelineConfig::layers)},
           {"height", number(&RunConfig::pipeline, &PipelineConfig::height)},
           {"width", number(&RunConfig::pipeline, &PipelineConfig::width)},
           {"diffusion_steps", number(&RunConfig::pipeline, &PipelineConfig::diffusion_steps)},
           {"max_tokens", number(&RunConfig::pipeline, &PipelineConfig::max_tokens)},
           {"mix_strength", number(&RunConfig::pipeline, &PipelineConfig::mix_strength)},
           {"corpus_prompts", number(&RunConfig::pipeline, &PipelineConfig::corpus_prompts)},
           {"cov_ridge",
            [](RunConfig& c, const std::string& k, const std::string& v) {
              if (v == "auto") {
                c.pipeline.cov_ridge.reset();
              } else {
                c.pipeline.cov_ridge = parse_number<double>(k, v);
              }
            }},
           {"query_gain", number(&RunConfig::pipeline, &PipelineConfig::query_gain)},
           {"key_gain", number(&RunConfig::pipeline, &PipelineConfig::key_gain)},
           {"value_gain", number(&RunConfig::pipeline, &PipelineConfig::value_gain)},
           {"out_gain", number(&RunConfig::pipeline, &PipelineConfig::out_gain)},
           {"vocabulary",
            [](RunConfig& c, const std::string&, const std::string& v) { c.pipeline.vocabulary_file = v; }},
       }},
      {"train",
       {
           {"lr_o", number(&RunConfig::train, &TrainConfig::lr_o)},
           {"lr_embed", number(&RunConfig::train, &TrainConfig::lr_embed)},
           {"steps", number(&RunConfig::train, &TrainConfig::steps)},
           {"batch", number(&RunConfig::train, &TrainConfig::batch)},
           {"beta", [](RunConfig& c, const std::string& k,
                       const std::string& v) { c.train.gate.beta = parse_number<double>(k, v); }},
           {"tau", [](RunConfig& c, const std::string& k,
                      const std::string& v) { c.train.gate.tau = parse_number<double>(k, v); }},
           {"ema_decay", number(&RunConfig::train, &TrainConfig::ema_decay)},
           {"train_keys",
            [](RunConfig& c, const std::string& k, const std::string& v) { c.train.train_keys = parse_bool(k, v); }},
           {"select_step",
            [](RunConfig& c, const std::string& k, const std::string& v) {
              if (v == "final") {
                c.train.select_step.reset();
              } else {
                c.train.select_step = parse_number<int>(k, v);
              }
            }},
       }},
      {"data",
       {
           {"images", number(&RunConfig::data, &SyntheticConfig::images)},
           {"amplitude", number(&RunConfig::data, &SyntheticConfig::amplitude)},
           {"appearance", number(&RunConfig::data, &SyntheticConfig::appearance)},
           {"background", number(&RunConfig::data, &SyntheticConfig::background)},
           {"texture", number(&RunConfig::data, &SyntheticConfig::texture)},
           {"one_shot",
            [](RunConfig& c, const std::string& k, const std::string& v) { c.data.one_shot = parse_bool(k, v); }},
       }},
      {"inference",
       {
           {"beta",
            [](RunConfig& c, const std::string& k, const std::string& v) {
              if (v == "auto") {
                c.beta.reset();
              } else {
                c.beta = parse_number<double>(k, v);
              }
            }},
           {"tau", number(&RunConfig::tau)},
           {"lock", [](RunConfig& c, const std::string&, const std::string& v) { c.lock = parse_lock_mode(v); }},
           {"guidance", number(&RunConfig::guidance)},
           {"ddim_steps", number(&RunConfig::ddim_steps)},
           {"prompt", [](RunConfig& c, const std::string&, const std::string& v) { c.prompt = v; }},
           {"concepts",
            [](RunConfig& c, const std::string&, const std::string& v) { c.concepts = split_list(v); }},
       }},
      {"sweep",
       {
           {"betas", [](RunConfig& c, const std::string& k,
                        const std::string& v) { c.sweep_betas = real_list(k, v); }},
           {"taus", [](RunConfig& c, const std::string& k,
                       const std::string& v) { c.sweep_taus = real_list(k, v); }},
       }},
  };
  return table;
}

}  // namespace

void merge_run_config(RunConfig& base, const std::filesystem::path& path) {
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    if (!std::filesystem::exists(path)) throw IoError(path.string() + ": cannot open config");
    throw ConfigError(path.string() + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  const auto& table = setters();
  for (const auto& [section, keys] : tree) {
    const auto sec = table.find(section);
    if (sec == table.end()) {
      if (keys.empty()) throw ConfigError("key '" + section + "' outside any section");
      if (section == "outputs") continue;  // informational block written into manifests
      throw ConfigError("unknown section [" + section + "]");
    }
    for (const auto& [key, node] : keys) {
      const auto setter = sec->second.find(key);
      if (setter == sec->second.end()) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
      setter->second(base, section + "." + key, node.get_value<std::string>());
    }
  }
  base.sync_seed();
}

RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig cfg;
  merge_run_config(cfg, path);
  return cfg;
}

std::string manifest_text(const RunConfig& c, const std::vector<std::pair<std::string, std::string>>& extra) {
  const auto& p = c.pipeline;
  const auto& t = c.train;
  const auto& d = c.data;
  std::string s;
  auto line = [&](std::string_view k, const std::string& v) { s += fmt::format("{} = {}\n", k, v); };
  s += "[run]\n";
  line("seed", std::to_string(c.seed));
  line("seeds", std::to_string(c.seeds));
  line("superclass", c.superclass);
  line("name", c.concept_name);
  if (!c.covariance.empty()) line("covariance", c.covariance.string());
  line("precision", to_string(c.precision));
  s += "\n[pipeline]\n";
  line("d_w", std::to_string(p.d_w));
  line("d_e", std::to_string(p.d_e));
  line("d_f", std::to_string(p.d_f));
  line("d_k", std::to_string(p.d_k));
  line("d_v", std::to_string(p.d_v));
  line("layers", std::to_string(p.layers));
  line("height", std::to_string(p.height));
  line("width", std::to_string(p.width));
  line("diffusion_steps", std::to_string(p.diffusion_steps));
  line("max_tokens", std::to_string(p.max_tokens));
  line("mix_strength", real(p.mix_strength));
  line("corpus_prompts", std::to_string(p.corpus_prompts));
  line("cov_ridge", p.cov_ridge ? real(*p.cov_ridge) : "auto");
  line("query_gain", real(p.query_gain));
  line("key_gain", real(p.key_gain));
  line("value_gain", real(p.value_gain));
  line("out_gain", real(p.out_gain));
  if (!p.vocabulary_file.empty()) line("vocabulary", p.vocabulary_file.string());
  s += "\n[train]\n";
  line("lr_o", real(t.lr_o));
  line("lr_embed", real(t.lr_embed));
  line("steps", std::to_string(t.steps));
  line("batch", std::to_string(t.batch));
  line("beta", real(t.gate.beta));
  line("tau", real(t.gate.tau));
  line("ema_decay", real(t.ema_decay));
  line("train_keys", t.train_keys ? "true" : "false");
  line("select_step", t.select_step ? std::to_string(*t.select_step) : "final");
  s += "\n[data]\n";
  line("images", std::to_string(d.images));
  line("amplitude", real(d.amplitude));
  line("appearance", real(d.appearance));
  line("background", real(d.background));
  line("texture", real(d.texture));
  line("one_shot", d.one_shot ? "true" : "false");
  s += "\n[inference]\n";
  line("beta", real(c.resolved_beta()));
  line("tau", real(c.tau));
  line("lock", to_string(c.lock));
  line("guidance", real(c.guidance));
  line("ddim_steps", std::to_string(c.ddim_steps));
  line("prompt", c.prompt);
  {
    std::string joined;
    for (std::size_t i = 0; i < c.concepts.size(); ++i) joined += (i ? "," : "") + c.concepts[i];
    line("concepts", joined);
  }
  s += "\n[sweep]\n";
  line("betas", join_reals(c.sweep_betas));
  line("taus", join_reals(c.sweep_taus));
  if (!extra.empty()) {
    s += "\n[outputs]\n";
    for (const auto& [k, v] : extra) line(k, v);
  }
  return s;
}

}  // namespace klr

#include "domix/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <limits>

namespace domix {

namespace {

using nlohmann::json;

struct Field {
  std::string key;
  std::function<void(const json&)> set;
  std::function<json()> get;
};

std::size_t as_size(const std::string& key, const json& v) {
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer()) {
    if (v.get<long long>() < 0) throw ConfigError(key, "must be a non-negative integer");
    return static_cast<std::size_t>(v.get<long long>());
  }
  throw ConfigError(key, "expected an integer, got " + v.dump());
}

double as_double(const std::string& key, const json& v) {
  if (!v.is_number()) throw ConfigError(key, "expected a number, got " + v.dump());
  return v.get<double>();
}

bool as_bool(const std::string& key, const json& v) {
  if (!v.is_boolean()) throw ConfigError(key, "expected true or false, got " + v.dump());
  return v.get<bool>();
}

std::string as_string(const std::string& key, const json& v) {
  if (!v.is_string()) throw ConfigError(key, "expected a string, got " + v.dump());
  return v.get<std::string>();
}

template <typename Parse>
auto as_enum(const std::string& key, const json& v, Parse parse) {
  try {
    return parse(as_string(key, v));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, e.what());
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& value) {
  if (value.empty()) return {};
  std::filesystem::path p(value);
  if (p.is_relative() && !base.empty()) p = base / p;
  return p.lexically_normal();
}

std::vector<Field> fields(RunConfig& c, const std::filesystem::path& base) {
  std::vector<Field> f;
  auto size_field = [&](std::string key, std::size_t& ref) {
    f.push_back({key, [&ref, key](const json& v) { ref = as_size(key, v); }, [&ref] { return json(ref); }});
  };
  auto double_field = [&](std::string key, double& ref) {
    f.push_back({key, [&ref, key](const json& v) { ref = as_double(key, v); }, [&ref] { return json(ref); }});
  };
  auto bool_field = [&](std::string key, bool& ref) {
    f.push_back({key, [&ref, key](const json& v) { ref = as_bool(key, v); }, [&ref] { return json(ref); }});
  };
  auto path_field = [&](std::string key, std::filesystem::path& ref) {
    f.push_back({key, [&ref, key, base](const json& v) { ref = resolve(base, as_string(key, v)); },
                 [&ref] { return json(ref.string()); }});
  };
  auto seed_field = [&](std::string key, std::uint64_t& ref) {
    f.push_back({key, [&ref, key](const json& v) { ref = as_size(key, v); }, [&ref] { return json(ref); }});
  };

  ModelConfig& m = c.model;
  size_field("model.d", m.d_model);
  size_field("model.heads", m.heads);
  size_field("model.enc_layers", m.enc_layers);
  size_field("model.dec_layers", m.dec_layers);
  size_field("model.d_ff", m.d_ff);
  size_field("model.vocab_size", m.vocab_size);
  size_field("model.max_len", m.max_len);
  f.push_back({"model.norm", [&m](const json& v) { m.norm = as_enum("model.norm", v, parse_norm_position); },
               [&m] { return json(std::string(to_string(m.norm))); }});
  double_field("model.dropout", m.dropout);
  bool_field("model.positional", m.positional);
  seed_field("model.seed", m.seed);

  f.push_back({"mixing.scope", [&m](const json& v) { m.scope = as_enum("mixing.scope", v, parse_mixing_scope); },
               [&m] { return json(std::string(to_string(m.scope))); }});
  size_field("mixing.domains", m.domains);
  double_field("mixing.epsilon", m.epsilon);

  TrainConfig& t = c.train;
  f.push_back({"train.baseline", [&m](const json& v) { m.baseline = as_enum("train.baseline", v, parse_baseline); },
               [&m] { return json(std::string(to_string(m.baseline))); }});
  bool_field("train.wl", m.wl_head);
  f.push_back({"train.detach", [&t](const json& v) { t.detach = as_enum("train.detach", v, parse_detach_mode); },
               [&t] { return json(std::string(to_string(t.detach))); }});
  double_field("train.lr_peak", t.lr_peak);
  size_field("train.warmup_steps", t.warmup_steps);
  double_field("train.warmup_init_lr", t.warmup_init_lr);
  double_field("train.beta1", t.beta1);
  double_field("train.beta2", t.beta2);
  double_field("train.adam_eps", t.adam_eps);
  double_field("train.weight_decay", t.weight_decay);
  double_field("train.label_smoothing", t.label_smoothing);
  size_field("train.max_steps", t.max_steps);
  size_field("train.batch_size", t.batch_size);
  seed_field("train.seed", t.seed);
  bool_field("train.use_mix_loss", t.use_mix_loss);
  f.push_back({"train.mix_loss_reduction",
               [&t](const json& v) {
                 const std::string s = as_string("train.mix_loss_reduction", v);
                 if (s != "mean" && s != "sum") throw ConfigError("train.mix_loss_reduction", "expected mean or sum");
                 t.mix_loss_sum = s == "sum";
               },
               [&t] { return json(t.mix_loss_sum ? "sum" : "mean"); }});
  f.push_back({"train.precision",
               [&t](const json& v) { t.precision = as_enum("train.precision", v, parse_precision); },
               [&t] { return json(std::string(to_string(t.precision))); }});
  size_field("train.checkpoint_every", t.checkpoint_every);
  bool_field("train.log_elapsed", t.log_elapsed);

  size_field("decode.beam", c.decode.beam);
  size_field("decode.max_len", c.decode.max_len);
  double_field("decode.alpha", c.decode.alpha);

  path_field("data.train", c.paths.train);
  path_field("data.valid", c.paths.valid);
  path_field("data.test", c.paths.test);
  path_field("data.vocab", c.paths.vocab);
  f.push_back({"data.min_freq",
               [&c](const json& v) {
                 const std::size_t n = as_size("data.min_freq", v);
                 if (n < 1 || n > static_cast<std::size_t>(std::numeric_limits<int>::max())) {
                   throw ConfigError("data.min_freq", "must be >= 1");
                 }
                 c.min_freq = static_cast<int>(n);
               },
               [&c] { return json(c.min_freq); }});
  path_field("out.dir", c.paths.out_dir);
  return f;
}

}  // namespace

void RunConfig::validate() const {
  const ModelConfig& m = model;
  auto positive = [](const char* key, std::size_t v) {
    if (v == 0) throw ConfigError(key, "must be positive");
  };
  positive("model.d", m.d_model);
  positive("model.heads", m.heads);
  positive("model.d_ff", m.d_ff);
  positive("mixing.domains", m.domains);
  positive("train.batch_size", train.batch_size);
  positive("train.warmup_steps", train.warmup_steps);
  positive("decode.beam", decode.beam);
  if (m.d_model % m.heads != 0) {
    throw ConfigError("model.heads", "model.d = " + std::to_string(m.d_model) + " is not divisible by " +
                                         std::to_string(m.heads) + " heads");
  }
  if (m.max_len < 2) throw ConfigError("model.max_len", "must be >= 2");
  if (!(m.dropout >= 0.0 && m.dropout < 1.0)) throw ConfigError("model.dropout", "must lie in [0, 1)");
  if (!(m.epsilon > 0.0 && m.epsilon < 1.0)) throw ConfigError("mixing.epsilon", "must lie in (0, 1)");
  if (!(train.lr_peak > 0.0)) throw ConfigError("train.lr_peak", "must be positive");
  if (train.warmup_init_lr < 0.0) throw ConfigError("train.warmup_init_lr", "must be non-negative");
  if (!(train.beta1 >= 0.0 && train.beta1 < 1.0)) throw ConfigError("train.beta1", "must lie in [0, 1)");
  if (!(train.beta2 >= 0.0 && train.beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
  if (!(train.adam_eps > 0.0)) throw ConfigError("train.adam_eps", "must be positive");
  if (train.weight_decay < 0.0) throw ConfigError("train.weight_decay", "must be non-negative");
  if (!(train.label_smoothing >= 0.0 && train.label_smoothing < 1.0)) {
    throw ConfigError("train.label_smoothing", "must lie in [0, 1)");
  }
  if (m.wl_head && m.domains < 2) throw ConfigError("train.wl", "needs mixing.domains >= 2");
  if (m.baseline != Baseline::none && m.domains < 2) throw ConfigError("train.baseline", "needs mixing.domains >= 2");
  if (!(decode.alpha >= 0.0)) throw ConfigError("decode.alpha", "must be non-negative");
}

RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
  if (!doc.is_object()) throw std::invalid_argument("config must be a JSON object with dotted keys");
  RunConfig config;
  auto table = fields(config, base_dir);
  for (const auto& [key, value] : doc.items()) {
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
    if (it == table.end()) {
      if (value.is_object()) throw ConfigError(key, "nested objects are not supported; use dotted keys");
      throw ConfigError(key, "unknown key");
    }
    it->set(value);
  }
  config.validate();
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(doc, path.parent_path());
}

nlohmann::ordered_json to_json(const RunConfig& config) {
  RunConfig copy = config;
  nlohmann::ordered_json out;
  for (const auto& f : fields(copy, {})) out[f.key] = f.get();
  return out;
}

}  // namespace domix

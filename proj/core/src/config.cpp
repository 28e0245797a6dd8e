#include "gfprune/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "gfprune/error.hpp"

namespace gfprune::harness {

namespace {

enum class Type { kInt, kFloat, kBool, kString, kInts };

std::string_view type_name(Type t) {
  switch (t) {
    case Type::kInt: return "int";
    case Type::kFloat: return "float";
    case Type::kBool: return "bool";
    case Type::kString: return "string";
    case Type::kInts: return "ints";
  }
  return "?";
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t parse_uint(const std::string& s, const std::string& key) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("key '" + key + "': '" + s + "' is not a non-negative integer");
  }
  return v;
}

double parse_double(const std::string& s, const std::string& key) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': '" + s + "' is not a number");
  }
}

/// One configurable field: how to read it from and write it to a RunConfig.
struct Field {
  Type type;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <typename T>
Field int_field(T RunConfig::*outer) = delete;

Field size_field(std::function<std::size_t&(RunConfig&)> ref) {
  return {Type::kInt,
          [ref](const RunConfig& c) {
            return std::to_string(ref(const_cast<RunConfig&>(c)));
          },
          [ref](RunConfig& c, const std::string& v, const std::string& k) {
            ref(c) = static_cast<std::size_t>(parse_uint(v, k));
          }};
}

Field u64_field(std::function<std::uint64_t&(RunConfig&)> ref) {
  return {Type::kInt,
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
          [ref](RunConfig& c, const std::string& v, const std::string& k) { ref(c) = parse_uint(v, k); }};
}

Field float_field(std::function<double&(RunConfig&)> ref) {
  return {Type::kFloat,
          [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); },
          [ref](RunConfig& c, const std::string& v, const std::string& k) { ref(c) = parse_double(v, k); }};
}

Field bool_field(std::function<bool&(RunConfig&)> ref) {
  return {Type::kBool,
          [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)) ? "true" : "false"; },
          [ref](RunConfig& c, const std::string& v, const std::string& k) {
            if (v == "true") {
              ref(c) = true;
            } else if (v == "false") {
              ref(c) = false;
            } else {
              throw ConfigError("key '" + k + "': '" + v + "' is not true/false");
            }
          }};
}

/// String-valued enum or text field.
Field string_field(std::function<std::string(const RunConfig&)> get,
                   std::function<void(RunConfig&, const std::string&)> set) {
  return {Type::kString, std::move(get),
          [set](RunConfig& c, const std::string& v, const std::string& k) {
            try {
              set(c, v);
            } catch (const ConfigError&) {
              throw;
            } catch (const Error& e) {
              throw ConfigError("key '" + k + "': " + e.what());
            }
          }};
}

std::string join(const std::vector<std::uint64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::uint64_t> split_ints(const std::string& s, const std::string& key) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_uint(trim(item), key));
  if (out.empty()) throw ConfigError("key '" + key + "': empty list");
  return out;
}

const std::vector<std::pair<std::string, Field>>& fields() {
  using C = RunConfig;
  static const std::vector<std::pair<std::string, Field>> table = {
      {"dataset.kind",
       string_field([](const C& c) { return std::string(data::kind_name(c.dataset.kind)); },
                    [](C& c, const std::string& v) {
                      c.dataset.kind = data::parse_kind(v);
                      c.model.data_dim = data::kind_dim(c.dataset.kind);
                    })},
      {"dataset.size", size_field([](C& c) -> std::size_t& { return c.dataset.size; })},
      {"dataset.seed", u64_field([](C& c) -> std::uint64_t& { return c.dataset.seed; })},
      {"model.hidden",
       {Type::kInts,
        [](const C& c) {
          std::vector<std::uint64_t> v(c.model.hidden.begin(), c.model.hidden.end());
          return join(v);
        },
        [](C& c, const std::string& v, const std::string& k) {
          const auto ints = split_ints(v, k);
          c.model.hidden.assign(ints.begin(), ints.end());
        }}},
      {"model.temb_dim", size_field([](C& c) -> std::size_t& { return c.model.temb_dim; })},
      {"model.activation",
       string_field(
           [](const C& c) {
             return std::string(c.model.activation == ad::Activation::kSiLU ? "silu" : "tanh");
           },
           [](C& c, const std::string& v) {
             if (v == "silu") {
               c.model.activation = ad::Activation::kSiLU;
             } else if (v == "tanh") {
               c.model.activation = ad::Activation::kTanh;
             } else {
               throw ConfigError("unknown activation '" + v + "'");
             }
           })},
      {"diffusion.T", size_field([](C& c) -> std::size_t& { return c.diffusion.T; })},
      {"diffusion.beta_start", float_field([](C& c) -> double& { return c.diffusion.beta_start; })},
      {"diffusion.beta_end", float_field([](C& c) -> double& { return c.diffusion.beta_end; })},
      {"train.lr", float_field([](C& c) -> double& { return c.adam.lr; })},
      {"train.beta1", float_field([](C& c) -> double& { return c.adam.beta1; })},
      {"train.beta2", float_field([](C& c) -> double& { return c.adam.beta2; })},
      {"train.eps", float_field([](C& c) -> double& { return c.adam.eps; })},
      {"train.batch_size", size_field([](C& c) -> std::size_t& { return c.adam.batch_size; })},
      {"train.pretrain_steps", size_field([](C& c) -> std::size_t& { return c.pretrain_steps; })},
      {"train.log_interval", size_field([](C& c) -> std::size_t& { return c.log_interval; })},
      {"plan.s", float_field([](C& c) -> double& { return c.plan.s; })},
      {"plan.K", size_field([](C& c) -> std::size_t& { return c.plan.K; })},
      {"plan.M_iters", size_field([](C& c) -> std::size_t& { return c.plan.M_iters; })},
      {"plan.N", size_field([](C& c) -> std::size_t& { return c.plan.N; })},
      {"plan.interval", size_field([](C& c) -> std::size_t& { return c.plan.interval; })},
      {"plan.criterion",
       string_field([](const C& c) { return std::string(criterion_name(c.plan.criterion)); },
                    [](C& c, const std::string& v) { c.plan.criterion = parse_criterion(v); })},
      {"plan.mode",
       string_field([](const C& c) { return std::string(pruning::mode_name(c.plan.mode)); },
                    [](C& c, const std::string& v) { c.plan.mode = pruning::parse_mode(v); })},
      {"plan.granularity",
       string_field([](const C& c) { return std::string(mask::granularity_name(c.plan.granularity)); },
                    [](C& c, const std::string& v) { c.plan.granularity = mask::parse_granularity(v); })},
      {"plan.per_layer", bool_field([](C& c) -> bool& { return c.plan.per_layer; })},
      {"plan.final_criterion",
       string_field([](const C& c) { return std::string(criterion_name(c.plan.final_criterion)); },
                    [](C& c, const std::string& v) { c.plan.final_criterion = parse_criterion(v); })},
      {"plan.final_granularity",
       string_field(
           [](const C& c) { return std::string(mask::granularity_name(c.plan.final_granularity)); },
           [](C& c, const std::string& v) { c.plan.final_granularity = mask::parse_granularity(v); })},
      {"plan.final_per_layer", bool_field([](C& c) -> bool& { return c.plan.final_per_layer; })},
      {"score.batches", size_field([](C& c) -> std::size_t& { return c.scoring.batches; })},
      {"score.batch_size", size_field([](C& c) -> std::size_t& { return c.scoring.batch_size; })},
      {"score.hvp",
       string_field([](const C& c) { return std::string(ad::hvp_method_name(c.scoring.hvp)); },
                    [](C& c, const std::string& v) { c.scoring.hvp = ad::parse_hvp_method(v); })},
      {"score.fd_step", float_field([](C& c) -> double& { return c.scoring.fd_step; })},
      {"eval.samples", size_field([](C& c) -> std::size_t& { return c.eval.samples; })},
      {"eval.seed", u64_field([](C& c) -> std::uint64_t& { return c.eval.seed; })},
      {"eval.ddim_steps", size_field([](C& c) -> std::size_t& { return c.eval.ddim_steps; })},
      {"eval.trace_samples", size_field([](C& c) -> std::size_t& { return c.eval.trace_samples; })},
      {"eval.trace_ddim_steps", size_field([](C& c) -> std::size_t& { return c.eval.trace_ddim_steps; })},
      {"eval.raster", size_field([](C& c) -> std::size_t& { return c.eval.raster; })},
      {"eval.bandwidth", float_field([](C& c) -> double& { return c.eval.bandwidth; })},
      {"seeds",
       {Type::kInts, [](const C& c) { return join(c.seeds); },
        [](C& c, const std::string& v, const std::string& k) { c.seeds = split_ints(v, k); }}},
      {"out_dir", string_field([](const C& c) { return c.out_dir; },
                               [](C& c, const std::string& v) { c.out_dir = v; })},
      {"stage.pretrain", bool_field([](C& c) -> bool& { return c.stages.pretrain; })},
      {"stage.prune", bool_field([](C& c) -> bool& { return c.stages.prune; })},
      {"stage.evaluate", bool_field([](C& c) -> bool& { return c.stages.evaluate; })},
  };
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return &f;
  }
  return nullptr;
}

std::optional<Type> parse_type(const std::string& s) {
  for (Type t : {Type::kInt, Type::kFloat, Type::kBool, Type::kString, Type::kInts}) {
    if (type_name(t) == s) return t;
  }
  return std::nullopt;
}

}  // namespace

bool operator==(const RunConfig& a, const RunConfig& b) { return format_config(a) == format_config(b); }

RunConfig parse_config(std::string_view text) {
  RunConfig c;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    std::string line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (auto hash = line.find(" #"); hash != std::string::npos) line = trim(line.substr(0, hash));
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected '<type> <key> = <value>'");
    const std::string lhs = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto space = lhs.find_first_of(" \t");
    if (space == std::string::npos) throw ConfigError(where + "missing type before key");
    const std::string type_s = lhs.substr(0, space);
    const std::string key = trim(lhs.substr(space));
    const auto type = parse_type(type_s);
    if (!type) throw ConfigError(where + "unknown type '" + type_s + "'");
    const Field* f = find_field(key);
    if (!f) throw ConfigError(where + "unknown key '" + key + "'");
    if (f->type != *type) {
      throw ConfigError(where + "key '" + key + "' has type " + std::string(type_name(f->type)) +
                        ", not " + type_s);
    }
    if (value.empty() && *type != Type::kString) throw ConfigError(where + "empty value for '" + key + "'");
    try {
      f->set(c, value, key);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return c;
}

std::string format_config(const RunConfig& config) {
  std::string out;
  for (const auto& [key, f] : fields()) {
    out += std::string(type_name(f.type)) + " " + key + " = " + f.get(config) + "\n";
  }
  return out;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void save_config(const std::filesystem::path& path, const RunConfig& config) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config '" + path.string() + "'");
  out << format_config(config);
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h) {
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {
std::uint64_t hash_text(const std::string& s) {
  return fnv1a64({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}
}  // namespace

std::uint64_t config_hash(const RunConfig& config) { return hash_text(format_config(config)); }

std::uint64_t pretrain_hash(const RunConfig& config) {
  std::string s;
  for (const auto& [key, f] : fields()) {
    if (key.starts_with("dataset.") || key.starts_with("model.") || key.starts_with("diffusion.") ||
        key.starts_with("train.")) {
      s += key + "=" + f.get(config) + "\n";
    }
  }
  return hash_text(s);
}

}  // namespace gfprune::harness

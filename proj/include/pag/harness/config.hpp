#pragma once

// Run configuration: plain-text `key = value` lines, `#` starts a comment.
// Unknown keys are errors; PAG_SEED in the environment overrides `seed`.

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pag/objectives.hpp"
#include "pag/tensor.hpp"

namespace pag::harness {

enum class Policy { Dense, Pag, LayerSkip, StaticPerforation, Truncated };
enum class PoolSetting { None, Hard, Soft };

inline const char* policy_name(Policy p) {
  switch (p) {
    case Policy::Dense: return "dense";
    case Policy::Pag: return "pag";
    case Policy::LayerSkip: return "layer-skip";
    case Policy::StaticPerforation: return "static-perforation";
    case Policy::Truncated: return "truncated";
  }
  return "?";
}

inline Policy parse_policy(const std::string& s) {
  for (Policy p : {Policy::Dense, Policy::Pag, Policy::LayerSkip, Policy::StaticPerforation,
                   Policy::Truncated}) {
    if (s == policy_name(p)) return p;
  }
  throw Error("unknown policy '" + s + "'");
}

inline bool is_gated(Policy p) {
  return p == Policy::Pag || p == Policy::LayerSkip || p == Policy::StaticPerforation;
}

inline const char* pool_setting_name(PoolSetting p) {
  switch (p) {
    case PoolSetting::None: return "none";
    case PoolSetting::Hard: return "hard";
    case PoolSetting::Soft: return "soft";
  }
  return "?";
}

inline PoolSetting parse_pool_setting(const std::string& s) {
  if (s == "none") return PoolSetting::None;
  if (s == "hard") return PoolSetting::Hard;
  if (s == "soft") return PoolSetting::Soft;
  throw Error("unknown multipool setting '" + s + "'");
}

struct RunConfig {
  // data
  std::string task = "shapes-semantic";
  std::size_t image_size = 32;
  std::size_t classes = 4;
  std::size_t train_images = 200;
  std::size_t eval_images = 50;

  // network
  std::size_t blocks = 6;
  std::size_t width = 16;
  std::size_t bottleneck = 2;
  std::size_t head_width = 8;
  Policy policy = Policy::Pag;
  PoolSetting multipool = PoolSetting::None;
  std::vector<std::size_t> pool_rates{0, 1, 2, 4, 6, 8, 10};
  bool dense_f3 = false;
  // Blocks kept by the truncated policy; 0 picks the count whose FLOP ratio
  // is nearest the one predicted for rho.
  std::size_t truncate_blocks = 0;

  // sparsity
  double rho = 0.5;
  std::vector<double> rho_steps;  // decreasing, ends at rho; empty means {rho}
  double lambda = 1e-4;
  SparsityScope scope = SparsityScope::PerLayer;
  std::size_t skip_window = 16;  // layer-skip density window, in images
  double tau_start = 1.0;
  double tau_end = 0.1;

  // optimisation
  double base_lr = 2e-4;
  double lr_power = 0.9;
  double momentum = 0.0;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
  // Policy comparison.
  std::vector<Policy> compare_policies{Policy::Dense, Policy::Pag, Policy::LayerSkip,
                                       Policy::StaticPerforation, Policy::Truncated};
  std::vector<double> compare_budgets{0.9, 0.7, 0.5};
  std::vector<std::size_t> compare_seeds{1};
  std::size_t crop_margin = 4;
  std::size_t base_iters = 2000;
  std::size_t multipool_iters = 1000;
  std::size_t gate_iters = 200;      // per inserted gate
  std::size_t sparsify_iters = 1000;  // per rho step
  std::size_t log_every = 10;

  std::uint64_t seed = 1;
  std::string output = "run";

  std::vector<double> rho_schedule() const {
    return rho_steps.empty() ? std::vector<double>{rho} : rho_steps;
  }

  void validate() const;
  std::string to_text() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw Error("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  if (pos != v.size()) throw Error("config key '" + key + "': trailing characters in '" + v + "'");
  return static_cast<std::size_t>(x);
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw Error("config key '" + key + "': expected a number, got '" + v + "'");
  }
  if (pos != v.size()) throw Error("config key '" + key + "': trailing characters in '" + v + "'");
  return x;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error("config key '" + key + "': expected true or false, got '" + v + "'");
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class T, class F>
std::string join(const std::vector<T>& xs, F&& fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + fmt(xs[i]);
  return out;
}

}  // namespace detail

inline void apply_config_value(RunConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "task") c.task = v;
  else if (key == "image_size") c.image_size = to_size(key, v);
  else if (key == "classes") c.classes = to_size(key, v);
  else if (key == "train_images") c.train_images = to_size(key, v);
  else if (key == "eval_images") c.eval_images = to_size(key, v);
  else if (key == "blocks") c.blocks = to_size(key, v);
  else if (key == "width") c.width = to_size(key, v);
  else if (key == "bottleneck") c.bottleneck = to_size(key, v);
  else if (key == "head_width") c.head_width = to_size(key, v);
  else if (key == "policy") c.policy = parse_policy(v);
  else if (key == "multipool") c.multipool = parse_pool_setting(v);
  else if (key == "pool_rates") {
    c.pool_rates.clear();
    for (const auto& r : split(v, ',')) c.pool_rates.push_back(to_size(key, r));
  } else if (key == "dense_f3") c.dense_f3 = to_bool(key, v);
  else if (key == "truncate_blocks") c.truncate_blocks = v == "auto" ? 0 : to_size(key, v);
  else if (key == "rho") c.rho = to_double(key, v);
  else if (key == "rho_steps") {
    c.rho_steps.clear();
    for (const auto& r : split(v, ',')) c.rho_steps.push_back(to_double(key, r));
  } else if (key == "lambda") c.lambda = to_double(key, v);
  else if (key == "sparsity_scope") {
    if (v == "per-layer") c.scope = SparsityScope::PerLayer;
    else if (v == "total") c.scope = SparsityScope::Total;
    else throw Error("config key 'sparsity_scope': expected per-layer or total");
  } else if (key == "skip_window") c.skip_window = to_size(key, v);
  else if (key == "tau_start") c.tau_start = to_double(key, v);
  else if (key == "tau_end") c.tau_end = to_double(key, v);
  else if (key == "base_lr") c.base_lr = to_double(key, v);
  else if (key == "lr_power") c.lr_power = to_double(key, v);
  else if (key == "momentum") c.momentum = to_double(key, v);
  else if (key == "grad_clip") c.grad_clip = to_double(key, v);
  else if (key == "compare_policies") {
    c.compare_policies.clear();
    for (const auto& r : split(v, ',')) c.compare_policies.push_back(parse_policy(r));
  } else if (key == "compare_budgets") {
    c.compare_budgets.clear();
    for (const auto& r : split(v, ',')) c.compare_budgets.push_back(to_double(key, r));
  } else if (key == "compare_seeds") {
    c.compare_seeds.clear();
    for (const auto& r : split(v, ',')) c.compare_seeds.push_back(to_size(key, r));
  }
  else if (key == "crop_margin") c.crop_margin = to_size(key, v);
  else if (key == "base_iters") c.base_iters = to_size(key, v);
  else if (key == "multipool_iters") c.multipool_iters = to_size(key, v);
  else if (key == "gate_iters") c.gate_iters = to_size(key, v);
  else if (key == "sparsify_iters") c.sparsify_iters = to_size(key, v);
  else if (key == "log_every") c.log_every = to_size(key, v);
  else if (key == "seed") c.seed = to_size(key, v);
  else if (key == "output") c.output = v;
  else throw Error("unknown config key '" + key + "'");
}

inline bool known_task(const std::string& t) {
  return t == "shapes-semantic" || t == "shapes-boundary" || t == "ramp-depth" ||
         t == "facet-normal";
}

inline void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error("invalid config: " + m); };
  if (!known_task(task)) fail("unknown task '" + task + "'");
  if (image_size < 8 || image_size % 2 != 0) fail("image_size must be even and at least 8");
  if (task == "shapes-semantic" && (classes < 2 || classes > 8)) fail("classes must be in [2, 8]");
  if (train_images == 0 || eval_images == 0) fail("image counts must be positive");
  if (blocks == 0 || blocks > 16) fail("blocks must be in [1, 16]");
  if (width == 0 || head_width == 0) fail("widths must be positive");
  if (bottleneck == 0 || width % bottleneck != 0) fail("bottleneck must divide width");
  if (!(rho > 0.0 && rho <= 1.0)) fail("rho must be in (0, 1]");
  const auto steps = rho_schedule();
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (!(steps[i] > 0.0 && steps[i] <= 1.0)) fail("rho_steps must lie in (0, 1]");
    if (i && steps[i] >= steps[i - 1]) fail("rho_steps must be strictly decreasing");
  }
  if (steps.back() != rho) fail("rho_steps must end at rho");
  if (!(lambda >= 0.0)) fail("lambda must be non-negative");
  if (policy == Policy::LayerSkip && skip_window == 0) fail("skip_window must be positive");
  if (!(tau_start > 0.0 && tau_end > 0.0 && tau_end <= tau_start)) {
    fail("need 0 < tau_end <= tau_start");
  }
  if (!(base_lr > 0.0) || !(lr_power > 0.0)) fail("base_lr and lr_power must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must be in [0, 1)");
  if (!(grad_clip >= 0.0)) fail("grad_clip must be non-negative");
  if (compare_policies.empty() || compare_budgets.empty() || compare_seeds.empty()) {
    fail("compare_policies, compare_budgets and compare_seeds must be non-empty");
  }
  for (std::size_t i = 0; i < compare_budgets.size(); ++i) {
    if (!(compare_budgets[i] > 0.0 && compare_budgets[i] <= 1.0)) {
      fail("compare_budgets must lie in (0, 1]");
    }
    if (i && compare_budgets[i] >= compare_budgets[i - 1]) {
      fail("compare_budgets must be strictly decreasing");
    }
  }
  if (base_iters == 0) fail("base_iters must be positive");
  if (multipool != PoolSetting::None) {
    if (blocks < 2) fail("multipool needs at least two blocks");
    if (pool_rates.empty()) fail("pool_rates is empty");
    for (std::size_t i = 1; i < pool_rates.size(); ++i) {
      if (pool_rates[i] <= pool_rates[i - 1]) fail("pool_rates must be strictly increasing");
    }
    // A dilated 3x3 tap must stay within twice the trunk extent.
    if (2 * pool_rates.back() + 1 > image_size) fail("largest pool rate too big for image_size");
  }
  if (truncate_blocks > blocks) fail("truncate_blocks exceeds blocks");
  if (log_every == 0) fail("log_every must be positive");
  if (output.empty()) fail("output is empty");
}

inline std::string RunConfig::to_text() const {
  using detail::format_double;
  std::ostringstream os;
  os << "task = " << task << "\n"
     << "image_size = " << image_size << "\n"
     << "classes = " << classes << "\n"
     << "train_images = " << train_images << "\n"
     << "eval_images = " << eval_images << "\n"
     << "blocks = " << blocks << "\n"
     << "width = " << width << "\n"
     << "bottleneck = " << bottleneck << "\n"
     << "head_width = " << head_width << "\n"
     << "policy = " << policy_name(policy) << "\n"
     << "multipool = " << pool_setting_name(multipool) << "\n"
     << "pool_rates = "
     << detail::join(pool_rates, [](std::size_t r) { return std::to_string(r); }) << "\n"
     << "dense_f3 = " << (dense_f3 ? "true" : "false") << "\n"
     << "truncate_blocks = " << truncate_blocks << "\n"
     << "rho = " << format_double(rho) << "\n";
  if (!rho_steps.empty()) {
    os << "rho_steps = " << detail::join(rho_steps, format_double) << "\n";
  }
  os << "lambda = " << format_double(lambda) << "\n"
     << "sparsity_scope = " << (scope == SparsityScope::PerLayer ? "per-layer" : "total") << "\n"
     << "skip_window = " << skip_window << "\n"
     << "tau_start = " << format_double(tau_start) << "\n"
     << "tau_end = " << format_double(tau_end) << "\n"
     << "base_lr = " << format_double(base_lr) << "\n"
     << "lr_power = " << format_double(lr_power) << "\n"
     << "momentum = " << format_double(momentum) << "\n"
     << "grad_clip = " << format_double(grad_clip) << "\n"
     << "compare_policies = "
     << detail::join(compare_policies, [](Policy p) { return std::string(policy_name(p)); })
     << "\n"
     << "compare_budgets = " << detail::join(compare_budgets, format_double) << "\n"
     << "compare_seeds = "
     << detail::join(compare_seeds, [](std::size_t r) { return std::to_string(r); }) << "\n"
     << "crop_margin = " << crop_margin << "\n"
     << "base_iters = " << base_iters << "\n"
     << "multipool_iters = " << multipool_iters << "\n"
     << "gate_iters = " << gate_iters << "\n"
     << "sparsify_iters = " << sparsify_iters << "\n"
     << "log_every = " << log_every << "\n"
     << "seed = " << seed << "\n"
     << "output = " << output << "\n";
  return os.str();
}

// Parses config text. Later assignments of a key override earlier ones.
inline RunConfig parse_config(std::istream& in, const std::string& origin = "config") {
  RunConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    try {
      apply_config_value(c, key, value);
    } catch (const Error& e) {
      throw Error(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

inline RunConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

// Reads, applies the PAG_SEED override and validates.
inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  RunConfig c = parse_config(in, path);
  if (const char* s = std::getenv("PAG_SEED"); s && *s) c.seed = detail::to_size("PAG_SEED", s);
  c.validate();
  return c;
}

}  // namespace pag::harness

#pragma once

// Checkpoint directory layout:
//   config.txt    the run configuration
//   state.txt     kept_blocks and whether the MultiPool module was added
//   manifest.txt  one line per tensor: name file dims trainable
//   <name>.ptsr   tensor payloads

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "pag/harness/config.hpp"
#include "pag/harness/model.hpp"

namespace pag::harness {

namespace fs = std::filesystem;

inline std::string dims_token(const Dims& d) {
  std::string s;
  for (std::size_t i = 0; i < d.size(); ++i) s += (i ? "x" : "") + std::to_string(d[i]);
  return s;
}

// `config` overrides the model's own, e.g. to record the rho of a stage.
inline void save_checkpoint(const Model& model, const std::string& dir,
                            const RunConfig* config = nullptr) {
  fs::create_directories(dir);
  {
    std::ofstream os(fs::path(dir) / "config.txt");
    os << (config ? *config : model.config()).to_text();
  }
  {
    std::ofstream os(fs::path(dir) / "state.txt");
    os << "kept_blocks = " << model.kept_blocks() << "\n"
       << "multipool_added = " << (model.pool_active() ? 1 : 0) << "\n";
  }
  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  for (const auto& [name, e] : model.params().entries()) {
    const std::string file = name + ".ptsr";
    save_ptsr((fs::path(dir) / file).string(), e.value);
    manifest << name << " " << file << " " << dims_token(e.value.dims()) << " "
             << (e.trainable ? 1 : 0) << "\n";
  }
  if (!manifest) throw Error("failed writing checkpoint manifest in " + dir);
}

inline RunConfig load_checkpoint_config(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "config.txt");
  if (!in) throw Error("checkpoint " + dir + " has no config.txt");
  RunConfig c = parse_config(in, (fs::path(dir) / "config.txt").string());
  c.validate();
  return c;
}

namespace detail {

// Parameters a model with this config, pool flag and gate set must hold.
inline std::map<std::string, Dims> expected_params(const RunConfig& config, bool pool,
                                                   const std::vector<std::size_t>& gated) {
  RngStream rng(0);
  Model ref = Model::create(config, rng);
  if (pool) ref.add_multipool(rng);
  for (std::size_t i : gated) ref.add_gate(i, rng);
  std::map<std::string, Dims> out;
  for (const auto& [name, e] : ref.params().entries()) out.emplace(name, e.value.dims());
  return out;
}

}  // namespace detail

inline Model load_checkpoint(const std::string& dir) {
  RunConfig config = load_checkpoint_config(dir);
  std::size_t kept = config.blocks;
  bool pool = false;
  {
    std::ifstream in(fs::path(dir) / "state.txt");
    if (!in) throw Error("checkpoint " + dir + " has no state.txt");
    std::string key, eq;
    std::size_t value = 0;
    while (in >> key >> eq >> value) {
      if (key == "kept_blocks") kept = value;
      else if (key == "multipool_added") pool = value != 0;
      else throw Error("unknown state key '" + key + "' in " + dir);
    }
  }

  std::ifstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw Error("checkpoint " + dir + " has no manifest.txt");
  struct Line {
    std::string file, dims;
    bool trainable;
  };
  std::map<std::string, Line> lines;
  std::string name, file, dims;
  int trainable = 0;
  while (manifest >> name >> file >> dims >> trainable) {
    if (!lines.emplace(name, Line{file, dims, trainable != 0}).second) {
      throw Error("manifest lists '" + name + "' twice");
    }
  }

  std::vector<std::size_t> gated;
  for (std::size_t i = 0; i < config.blocks; ++i) {
    const std::string b = "block" + std::to_string(i);
    if (lines.count(b + ".gate.kernel") || lines.count(b + ".static")) gated.push_back(i);
  }
  if (!gated.empty() && !is_gated(config.policy)) {
    throw Error("manifest mismatch: gates present but policy is " +
                std::string(policy_name(config.policy)));
  }
  if (pool && config.multipool == PoolSetting::None) {
    throw Error("manifest mismatch: multipool module present but config disables it");
  }
  const auto expected = detail::expected_params(config, pool, gated);
  for (const auto& [n, d] : expected) {
    auto it = lines.find(n);
    if (it == lines.end()) throw Error("manifest mismatch: missing parameter '" + n + "'");
    if (it->second.dims != dims_token(d)) {
      throw Error("manifest mismatch: '" + n + "' has dims " + it->second.dims + ", expected " +
                  dims_token(d));
    }
  }
  for (const auto& [n, l] : lines) {
    if (!expected.count(n)) throw Error("manifest mismatch: unexpected parameter '" + n + "'");
  }

  Model model(config);
  for (const auto& [n, l] : lines) {
    Tensor t = load_ptsr((fs::path(dir) / l.file).string());
    if (dims_token(t.dims()) != l.dims) {
      throw Error("tensor file " + l.file + " does not match its manifest dims");
    }
    model.params().add(n, std::move(t), l.trainable);
  }
  model.set_pool_added(pool);
  model.set_kept_blocks(kept);
  return model;
}

}  // namespace pag::harness

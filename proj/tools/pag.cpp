#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "pag/harness/checkpoint.hpp"
#include "pag/harness/compare.hpp"
#include "pag/harness/evaluate.hpp"
#include "pag/harness/trainer.hpp"
#include "pag/pano_normals.hpp"

namespace fs = std::filesystem;
using namespace pag;
using namespace pag::harness;

namespace {

void write_eval(const Model& model, const EvalResult& r, const fs::path& out) {
  std::ofstream csv(out / "eval.csv");
  csv << kEvalCsvHeader << eval_csv_row(model.config(), r);
  if (!csv) throw Error("failed writing " + (out / "eval.csv").string());
  write_flop_csv((out / "flops.csv").string(), r.flops);
  if (!r.pool_shares.empty()) {
    std::ofstream mp(out / "multipool_shares.csv");
    mp << "branch,rate,share\n";
    std::size_t j = 0;
    for (std::size_t b = 0; b < model.config().pool_rates.size(); ++b) {
      if (model.config().pool_rates[b] == 0) continue;
      mp << csv_row({std::to_string(b), std::to_string(model.config().pool_rates[b]),
                     csv_number(r.pool_shares[j++])});
    }
  }
}

void print_eval(const EvalResult& r) {
  std::cout << "images " << r.images << "  metric " << csv_number(r.primary) << "  flop ratio "
            << csv_number(r.flops.ratio);
  if (!std::isnan(r.mean_density)) std::cout << "  mean density " << csv_number(r.mean_density);
  std::cout << "\n";
}

int cmd_train(const std::string& config_path) {
  const RunConfig c = load_config(config_path);
  const TrainResult tr = train(c, &std::cerr);
  for (const auto& s : tr.stages) {
    std::cout << s.name << "  loss " << csv_number(s.task_loss);
    if (!std::isnan(s.mean_density)) std::cout << "  density " << csv_number(s.mean_density);
    std::cout << "\n";
  }
  const Model m = load_checkpoint((fs::path(c.output) / "final").string());
  const EvalResult r = evaluate(m, evaluation_data(c), (fs::path(c.output) / "images").string());
  write_eval(m, r, c.output);
  print_eval(r);
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_spec, std::string out) {
  const Model m = load_checkpoint(checkpoint);
  const DataSpec spec = parse_data_spec(data_spec);
  const SyntheticDataset data =
      gen_dataset(spec.kind, spec.size, spec.n, spec.seed, m.config().classes);
  if (out.empty()) out = (fs::path(checkpoint) / "eval").string();
  fs::create_directories(out);
  const EvalResult r = evaluate(m, data, (fs::path(out) / "images").string());
  write_eval(m, r, out);
  print_eval(r);
  return 0;
}

int cmd_compare(const std::string& config_path) {
  const RunConfig c = load_config(config_path);
  const auto rows = compare_policies(c, &std::cerr);
  std::cout << kCompareCsvHeader;
  for (const auto& r : rows) std::cout << compare_csv_row(r);
  return 0;
}

int cmd_ponder(const std::string& checkpoint, const std::string& image, const std::string& out) {
  const Model m = load_checkpoint(checkpoint);
  if (m.gated_blocks().empty()) throw Error("checkpoint " + checkpoint + " has no gated blocks");
  const InferenceResult r = infer(m, load_ptsr(image));
  write_pgm(out, ponder_image(r.gates));
  return 0;
}

int cmd_pano(const std::string& in, long long column, const std::string& out,
             const std::string& ppm) {
  const Tensor map = load_ptsr(in);
  const Tensor local = globals_to_locals(map, column);
  save_ptsr(out, local);
  if (!ppm.empty()) write_ppm(ppm, normals_to_rgb(local));
  return 0;
}

int cmd_gen_data(const std::string& data_spec, std::size_t classes, const std::string& out) {
  const DataSpec spec = parse_data_spec(data_spec);
  const SyntheticDataset d = gen_dataset(spec.kind, spec.size, spec.n, spec.seed, classes);
  fs::create_directories(out);
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    save_ptsr((fs::path(out) / ("image_" + std::to_string(i) + ".ptsr")).string(),
              d.samples[i].image);
    save_ptsr((fs::path(out) / ("target_" + std::to_string(i) + ".ptsr")).string(),
              d.samples[i].target);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pixel-wise attentional gating toolkit"};
  app.require_subcommand(1);

  std::string config, checkpoint, data, out, image, in, ppm;
  long long column = 0;
  std::size_t classes = 4;

  auto* train = app.add_subcommand("train", "Stage-wise training from a config file");
  train->add_option("--config", config, "key = value config file")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a synthetic dataset");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--data", data, "kind:size:count:seed")->required();
  eval->add_option("--out", out, "output directory (default <checkpoint>/eval)");

  auto* compare = app.add_subcommand("compare", "Compare routing policies at matched budgets");
  compare->add_option("--config", config)->required();

  auto* ponder = app.add_subcommand("ponder", "Ponder map of one image as a PGM");
  ponder->add_option("--checkpoint", checkpoint)->required();
  ponder->add_option("--image", image, "3 x H x W tensor file")->required();
  ponder->add_option("--out", out)->required();

  auto* pano = app.add_subcommand("pano-normals", "Panoramic normals to the local frame");
  pano->add_option("--in", in)->required();
  pano->add_option("--canonical-column", column)->required();
  pano->add_option("--out", out)->required();
  pano->add_option("--ppm", ppm, "false-colour visualisation");

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as tensor files");
  gen->add_option("--data", data, "kind:size:count:seed")->required();
  gen->add_option("--classes", classes);
  gen->add_option("--out", out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(config);
    if (*eval) return cmd_eval(checkpoint, data, out);
    if (*compare) return cmd_compare(config);
    if (*ponder) return cmd_ponder(checkpoint, image, out);
    if (*pano) return cmd_pano(in, column, out, ppm);
    if (*gen) return cmd_gen_data(data, classes, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

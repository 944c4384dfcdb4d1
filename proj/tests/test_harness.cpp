#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "pag/harness/checkpoint.hpp"
#include "pag/harness/compare.hpp"
#include "pag/harness/evaluate.hpp"
#include "pag/harness/trainer.hpp"

namespace pag::harness {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("pag_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

RunConfig tiny(const fs::path& out, Policy policy = Policy::Pag) {
  RunConfig c;
  c.image_size = 16;
  c.train_images = 6;
  c.eval_images = 3;
  c.blocks = 3;
  c.width = 8;
  c.head_width = 4;
  c.pool_rates = {0, 1, 2};
  c.policy = policy;
  c.rho_steps = {0.8, 0.6};
  c.rho = 0.6;
  c.lambda = 10;
  c.grad_clip = 1000;
  c.base_iters = 12;
  c.multipool_iters = 0;
  c.gate_iters = 3;
  c.sparsify_iters = 8;
  c.log_every = 1;
  c.output = out.string();
  return c;
}

// ---- config --------------------------------------------------------------

TEST(Config, ParsesKeysCommentsAndLists) {
  const RunConfig c = parse_config_text(
      "# toy\n"
      "policy = layer-skip   # trailing comment\n"
      "rho = 0.5\n"
      "rho_steps = 0.9, 0.7, 0.5\n"
      "multipool = hard\n"
      "pool_rates = 0,1,2\n"
      "\n"
      "lambda = 2.5\n");
  EXPECT_EQ(c.policy, Policy::LayerSkip);
  EXPECT_EQ(c.rho, 0.5);
  EXPECT_EQ(c.rho_steps, (std::vector<double>{0.9, 0.7, 0.5}));
  EXPECT_EQ(c.multipool, PoolSetting::Hard);
  EXPECT_EQ(c.pool_rates, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(c.lambda, 2.5);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, DefaultsMatchPublishedOptimizer) {
  const RunConfig c;
  EXPECT_EQ(c.base_lr, 2e-4);
  EXPECT_EQ(c.lr_power, 0.9);
  EXPECT_EQ(c.lambda, 1e-4);
  EXPECT_EQ(c.crop_margin, 4u);
}

TEST(Config, UnknownKeyIsAnErrorWithLineNumber) {
  try {
    parse_config_text("rho = 0.5\nbogus = 1\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
}

TEST(Config, MalformedValuesAreErrors) {
  EXPECT_THROW(parse_config_text("rho = abc\n"), Error);
  EXPECT_THROW(parse_config_text("blocks = -3\n"), Error);
  EXPECT_THROW(parse_config_text("policy = greedy\n"), Error);
  EXPECT_THROW(parse_config_text("just text\n"), Error);
  EXPECT_THROW(parse_config_text("dense_f3 = maybe\n"), Error);
}

TEST(Config, InvariantViolationsFailValidation) {
  auto bad = [](const std::string& text) { EXPECT_THROW(parse_config_text(text).validate(), Error) << text; };
  bad("rho = 0\n");
  bad("rho = 1.5\n");
  bad("rho = 0.5\nrho_steps = 0.5,0.7\n");
  bad("rho = 0.6\nrho_steps = 0.9,0.7\n");
  bad("image_size = 31\n");
  bad("task = sky\n");
  bad("momentum = 1\n");
  bad("compare_budgets = 0.5,0.7\n");
  bad("bottleneck = 3\n");
}

TEST(Config, TextRoundTrip) {
  RunConfig c = tiny("/tmp/x", Policy::StaticPerforation);
  c.compare_policies = {Policy::Pag, Policy::Truncated};
  c.compare_seeds = {4, 5};
  const RunConfig back = parse_config_text(c.to_text());
  EXPECT_EQ(back.to_text(), c.to_text());
}

TEST(Config, SeedEnvironmentOverride) {
  const fs::path dir = scratch("seed_env");
  {
    std::ofstream os(dir / "c.cfg");
    os << "seed = 3\n";
  }
  ::setenv("PAG_SEED", "77", 1);
  const RunConfig c = load_config((dir / "c.cfg").string());
  ::unsetenv("PAG_SEED");
  EXPECT_EQ(c.seed, 77u);
  EXPECT_EQ(load_config((dir / "c.cfg").string()).seed, 3u);
}

// ---- data ----------------------------------------------------------------

TEST(Dataset, SameArgumentsGiveIdenticalTensors) {
  for (const std::string kind : {"shapes-semantic", "shapes-boundary", "ramp-depth", "facet-normal"}) {
    const auto a = gen_dataset(kind, 16, 4, 11);
    const auto b = gen_dataset(kind, 16, 4, 11);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_EQ(a.samples[i].image.storage(), b.samples[i].image.storage()) << kind;
      EXPECT_EQ(a.samples[i].target.storage(), b.samples[i].target.storage()) << kind;
    }
  }
}

TEST(Dataset, SemanticLabelsInRange) {
  const auto d = gen_dataset("shapes-semantic", 32, 20, 2, 4);
  std::set<double> seen;
  for (const auto& s : d.samples)
    for (double v : s.target.storage()) seen.insert(v);
  for (double v : seen) EXPECT_TRUE(v == kIgnoreLabel || (v >= 0 && v <= 3 && v == std::floor(v))) << v;
  for (double v : {0.0, 1.0, 2.0, 3.0}) EXPECT_TRUE(seen.count(v)) << v;
}

TEST(Dataset, FacetNormalsAreUnit) {
  const auto d = gen_dataset("facet-normal", 24, 5, 3);
  for (const auto& s : d.samples) {
    const std::size_t plane = 24 * 24;
    for (std::size_t p = 0; p < plane; ++p) {
      double n2 = 0.0;
      for (std::size_t c = 0; c < 3; ++c) n2 += s.target[c * plane + p] * s.target[c * plane + p];
      EXPECT_NEAR(n2, 1.0, 1e-12);
    }
  }
}

TEST(Dataset, BoundaryTargetsBinaryAndDepthFinite) {
  for (const auto& s : gen_dataset("shapes-boundary", 16, 5, 4).samples)
    for (double v : s.target.storage()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  for (const auto& s : gen_dataset("ramp-depth", 16, 5, 4).samples)
    for (double v : s.target.storage()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Dataset, UnknownKindAndEmptyAreErrors) {
  EXPECT_THROW(gen_dataset("clouds", 16, 2, 1), Error);
  EXPECT_THROW(gen_dataset("ramp-depth", 16, 0, 1), Error);
}

TEST(Dataset, TrainAndEvalSplitsDiffer) {
  RunConfig c = tiny("/tmp/x");
  const auto train = gen_dataset(c.task, c.image_size, 8, c.seed, c.classes);
  const auto eval = evaluation_data(c);
  for (const auto& e : eval.samples)
    for (const auto& t : train.samples) EXPECT_NE(e.image.storage(), t.image.storage());
}

TEST(Dataset, DataSpecParsing) {
  const DataSpec d = parse_data_spec("ramp-depth:24:7:9");
  EXPECT_EQ(d.kind, "ramp-depth");
  EXPECT_EQ(d.size, 24u);
  EXPECT_EQ(d.n, 7u);
  EXPECT_EQ(d.seed, 9u);
  EXPECT_THROW(parse_data_spec("ramp-depth:24:7"), Error);
  EXPECT_THROW(parse_data_spec("ramp-depth:x:7:1"), Error);
}

TEST(Dataset, AugmentCropsAndFlipsNormalsConsistently) {
  const Sample s = gen_dataset("facet-normal", 20, 1, 5).samples[0];
  RngStream rng(1);
  bool flipped = false, plain = false;
  for (int t = 0; t < 20; ++t) {
    const Sample a = augment(s, "facet-normal", 16, rng);
    ASSERT_EQ(a.image.dims(), (Dims{3, 16, 16}));
    ASSERT_EQ(a.target.dims(), (Dims{3, 16, 16}));
    // Find the crop offset and orientation that reproduce the image.
    bool matched = false;
    for (std::size_t y0 = 0; y0 <= 4 && !matched; ++y0)
      for (std::size_t x0 = 0; x0 <= 4 && !matched; ++x0) {
        const Sample c{crop(s.image, y0, x0, 16), crop(s.target, y0, x0, 16)};
        if (c.image.storage() == a.image.storage()) {
          EXPECT_EQ(c.target.storage(), a.target.storage());
          matched = plain = true;
        } else if (flip_lr(c.image).storage() == a.image.storage()) {
          EXPECT_EQ(flip_lr(c.target, true).storage(), a.target.storage());
          matched = flipped = true;
        }
      }
    EXPECT_TRUE(matched);
  }
  EXPECT_TRUE(flipped && plain);
  // Mirroring negates the x component only.
  const Tensor f = flip_lr(s.target, true);
  EXPECT_EQ(f.at(0, 3, 0), -s.target.at(0, 3, 19));
  EXPECT_EQ(f.at(1, 3, 0), s.target.at(1, 3, 19));
}

// ---- optimiser -----------------------------------------------------------

TEST(PolyLr, PublishedScheduleValues) {
  EXPECT_EQ(poly_lr(0, 100), 2e-4);
  EXPECT_NEAR(poly_lr(50, 100), 1.0718e-4, 1e-8);
  EXPECT_DOUBLE_EQ(poly_lr(50, 100), 2e-4 * std::pow(0.5, 0.9));
  EXPECT_LT(poly_lr(999999, 1000000), 1e-8);
  EXPECT_THROW(poly_lr(100, 100), Error);
  EXPECT_THROW(poly_lr(101, 100), Error);
}

TEST(Sgd, MomentumUpdateAndClip) {
  ParamStore store;
  store.add("w", Tensor({2}, 1.0));
  Sgd sgd(0.5);
  const std::map<std::string, Tensor> g{{"w", Tensor({2}, 2.0)}};
  sgd.step(store, g, 0.1);  // v = -0.2
  EXPECT_DOUBLE_EQ(store.get("w")[0], 0.8);
  sgd.step(store, g, 0.1);  // v = -0.1 - 0.2
  EXPECT_DOUBLE_EQ(store.get("w")[0], 0.5);

  ParamStore s2;
  s2.add("w", Tensor({2}, 0.0));
  Sgd clipped(0.0, 1.0);
  const double norm = clipped.step(s2, {{"w", Tensor({2}, 3.0)}}, 1.0);
  EXPECT_DOUBLE_EQ(norm, 3.0 * std::sqrt(2.0));
  EXPECT_NEAR(s2.get("w")[0], -1.0 / std::sqrt(2.0), 1e-15);
}

// ---- metrics -------------------------------------------------------------

TEST(Metrics, PerfectSemanticPrediction) {
  SemanticAccumulator acc(4);
  Tensor labels({4, 4});
  for (std::size_t i = 0; i < 16; ++i) labels[i] = double(i % 4);
  acc.add_labels(labels, labels);
  EXPECT_EQ(acc.miou(), 1.0);
  EXPECT_EQ(acc.pixel_accuracy(), 1.0);
}

TEST(Metrics, ConstantPredictionOnBalancedClasses) {
  SemanticAccumulator acc(4);
  Tensor labels({8, 8}), pred({8, 8});
  for (std::size_t i = 0; i < 64; ++i) labels[i] = double(i % 4);
  acc.add_labels(pred, labels);
  EXPECT_NEAR(acc.pixel_accuracy(), 0.25, 1e-15);
  // Only class 0 has any overlap: IoU 16 / 64, others 0.
  EXPECT_NEAR(acc.miou(), 0.25 / 4.0, 1e-15);
}

TEST(Metrics, IgnoredPixelsDoNotCount) {
  SemanticAccumulator acc(2);
  Tensor labels({1, 2}), pred({1, 2});
  labels[0] = 1;
  labels[1] = kIgnoreLabel;
  pred[0] = 1;
  acc.add_labels(pred, labels);
  EXPECT_EQ(acc.pixel_accuracy(), 1.0);
}

TEST(Metrics, DepthThresholds) {
  Tensor g({1, 2, 2}, 2.0), over({1, 2, 2}, 2.4), under({1, 2, 2}, 2.0 / 1.3);
  DepthAccumulator a, b;
  a.add_depths(over, g);
  b.add_depths(under, g);
  EXPECT_EQ(a.delta(1), 1.0);
  EXPECT_EQ(b.delta(1), 0.0);
  EXPECT_EQ(b.delta(2), 1.0);
}

TEST(Metrics, NormalAngleSkipsVoid) {
  Tensor t({3, 1, 2}), p({3, 1, 2});
  t.at(2, 0, 0) = 1.0;  // pixel 1 stays void
  p.at(0, 0, 0) = 1.0;  // 90 degrees off
  p.at(0, 0, 1) = 1.0;
  NormalAccumulator n;
  n.add(p, t);
  EXPECT_NEAR(n.mean_angle_deg(), 90.0, 1e-12);
}

TEST(Metrics, BoundaryPerfectAndEmpty) {
  Tensor edges({6, 6});
  for (std::size_t x = 0; x < 6; ++x) edges.at(3, x) = 1.0;
  Tensor logits({1, 6, 6}, -20.0);
  for (std::size_t x = 0; x < 6; ++x) logits.at(0, 3, x) = 20.0;
  BoundaryAccumulator b;
  b.add(logits, edges);
  EXPECT_NEAR(b.ods_f(), 1.0, 1e-12);
  BoundaryAccumulator none;
  none.add(Tensor({1, 6, 6}, -20.0), edges);
  EXPECT_EQ(none.ods_f(), 0.0);
}

// ---- io ------------------------------------------------------------------

TEST(Io, PgmRoundTripAndClamping) {
  const fs::path dir = scratch("pgm");
  Tensor g({2, 3});
  const double vals[] = {0, 12.4, 12.6, 255, 300, -5};
  for (std::size_t i = 0; i < 6; ++i) g[i] = vals[i];
  write_pgm((dir / "a.pgm").string(), g);
  const Tensor back = read_pgm((dir / "a.pgm").string());
  EXPECT_EQ(back.storage(), (std::vector<double>{0, 12, 13, 255, 255, 0}));
  EXPECT_EQ(slurp(dir / "a.pgm").substr(0, 11), "P5\n3 2\n255\n");
}

TEST(Io, CsvNumbers) {
  EXPECT_EQ(csv_number(kNoMetric), "");
  EXPECT_EQ(csv_number(0.5), "0.5");
  EXPECT_EQ(csv_row({"a", "", "1"}), "a,,1\n");
}

TEST(Io, PonderImageScaling) {
  Tensor a({2, 2}), b({2, 2});
  a[0] = a[1] = 1;
  b[0] = 1;
  const Tensor img = ponder_image({a, b});
  ASSERT_EQ(img.dims(), (Dims{4, 4}));
  EXPECT_EQ(img.at(0, 0), 255.0);
  EXPECT_EQ(img.at(0, 2), 128.0);  // round(127.5)
  EXPECT_EQ(img.at(3, 3), 0.0);
}

// ---- stages and training -------------------------------------------------

TEST(Stages, OrderFollowsStageWiseSchedule) {
  RunConfig c = tiny("/tmp/x");
  c.multipool = PoolSetting::Hard;
  c.multipool_iters = 4;
  const auto plan = plan_stages(c);
  std::vector<std::string> names;
  for (const auto& p : plan) names.push_back(p.name);
  EXPECT_EQ(names, (std::vector<std::string>{"base", "multipool", "gate0", "gate1", "gate2",
                                             "rho0.8", "rho0.6"}));
  EXPECT_TRUE(plan[1].add_pool);
  EXPECT_EQ(plan[2].insert_gate, std::optional<std::size_t>(0));
  EXPECT_EQ(plan[4].insert_gate, std::optional<std::size_t>(2));
  EXPECT_EQ(plan[2].rho, 0.8);
  EXPECT_TRUE(plan[5].checkpoint && plan[6].checkpoint);

  c.policy = Policy::Truncated;
  const auto t = plan_stages(c);
  EXPECT_EQ(t.size(), plan.size());
  EXPECT_TRUE(t[2].truncate);
  EXPECT_FALSE(t[2].insert_gate.has_value());
}

TEST(Stages, TruncationTracksBudget) {
  RunConfig c = tiny("/tmp/x", Policy::Truncated);
  c.blocks = 6;
  std::size_t prev = 99;
  double prev_ratio = 2.0;
  for (double b : {1.0, 0.9, 0.7, 0.5, 0.2}) {
    double achieved = 0.0, target = 0.0;
    const std::size_t k = truncation_for_budget(c, b, &achieved, &target);
    EXPECT_LE(k, prev);
    EXPECT_LE(achieved, prev_ratio);
    prev = k;
    prev_ratio = achieved;
  }
  EXPECT_EQ(truncation_for_budget(c, 1.0), 6u);
}

TEST(Training, StageTransitionsNeverDropParameters) {
  RunConfig c = tiny(scratch("transitions"));
  c.multipool = PoolSetting::Hard;
  c.multipool_iters = 3;
  const auto data = training_data(c);
  RngStream init(1);
  Model m = Model::create(c, init);
  Trainer t(m, data);
  std::set<std::string> before;
  for (const auto& p : plan_stages(c)) {
    t.run_stage(p);
    std::set<std::string> after;
    for (const auto& [n, e] : m.params().entries()) after.insert(n);
    for (const auto& n : before) EXPECT_TRUE(after.count(n)) << n << " lost in " << p.name;
    EXPECT_GE(after.size(), before.size());
    before = after;
  }
  EXPECT_TRUE(before.count("block2.gate.kernel"));
  EXPECT_TRUE(before.count("mp.selector.kernel"));
}

TEST(Training, DenseTrajectoryIgnoresSparsityWeight) {
  // Without gates the sparsity term has nothing to act on: lambda 0 and a
  // large lambda, and a gated policy whose gates are never inserted, all
  // follow the same trajectory bit for bit.
  auto run = [](Policy p, double lambda) {
    RunConfig c = tiny("/tmp/x", p);
    c.lambda = lambda;
    c.gate_iters = 0;
    c.sparsify_iters = 0;
    const auto data = training_data(c);
    RngStream init(1);
    Model m = Model::create(c, init);
    Trainer t(m, data);
    for (const auto& s : plan_stages(c)) t.run_stage(s);
    return m.params().entries();
  };
  const auto a = run(Policy::Dense, 0.0);
  const auto b = run(Policy::Dense, 50.0);
  const auto c = run(Policy::Pag, 0.0);
  ASSERT_EQ(a.size(), b.size());
  ASSERT_EQ(a.size(), c.size());
  for (const auto& [n, e] : a) {
    EXPECT_EQ(e.value.storage(), b.at(n).value.storage()) << n;
    EXPECT_EQ(e.value.storage(), c.at(n).value.storage()) << n;
  }
}

TEST(Training, RhoOneMeansNoGatingLoss) {
  auto run = [](double lambda) {
    RunConfig c = tiny("/tmp/x");
    c.rho = 1.0;
    c.rho_steps = {1.0};
    c.lambda = lambda;
    const auto data = training_data(c);
    RngStream init(1);
    Model m = Model::create(c, init);
    Trainer t(m, data);
    for (const auto& s : plan_stages(c)) t.run_stage(s);
    return m.params().entries();
  };
  const auto a = run(0.0), b = run(5.0);
  for (const auto& [n, e] : a) EXPECT_EQ(e.value.storage(), b.at(n).value.storage()) << n;
}

TEST(Training, EqualSeedsGiveIdenticalFiles) {
  const fs::path d1 = scratch("det1"), d2 = scratch("det2");
  RunConfig c1 = tiny(d1), c2 = tiny(d2);
  c1.multipool = c2.multipool = PoolSetting::Hard;
  c1.multipool_iters = c2.multipool_iters = 3;
  train(c1);
  train(c2);
  EXPECT_EQ(slurp(d1 / "train_metrics.csv"), slurp(d2 / "train_metrics.csv"));
  EXPECT_FALSE(slurp(d1 / "train_metrics.csv").empty());
  const Model m1 = load_checkpoint((d1 / "final").string());
  const Model m2 = load_checkpoint((d2 / "final").string());
  const auto ev = evaluation_data(c1);
  evaluate(m1, ev, (d1 / "img").string());
  evaluate(m2, ev, (d2 / "img").string());
  for (const char* f : {"ponder_0.pgm", "multipool_2.pgm"}) {
    EXPECT_EQ(slurp(d1 / "img" / f), slurp(d2 / "img" / f)) << f;
    EXPECT_FALSE(slurp(d1 / "img" / f).empty()) << f;
  }

  RunConfig c3 = tiny(scratch("det3"));
  c3.seed = 2;
  c3.multipool = PoolSetting::Hard;
  c3.multipool_iters = 3;
  train(c3);
  EXPECT_NE(slurp(d1 / "train_metrics.csv"), slurp(fs::path(c3.output) / "train_metrics.csv"));
}

TEST(Training, StageCheckpointsRecordTheirRho) {
  const fs::path dir = scratch("stage_rho");
  const RunConfig c = tiny(dir);
  const TrainResult r = train(c);
  ASSERT_EQ(r.checkpoints.size(), 2u);
  EXPECT_EQ(load_checkpoint_config(r.checkpoints[0].second).rho, 0.8);
  EXPECT_EQ(load_checkpoint_config(r.checkpoints[1].second).rho, 0.6);
  EXPECT_EQ(load_checkpoint_config((dir / "final").string()).rho, 0.6);
}

// ---- checkpoints ---------------------------------------------------------

Model gated_model(const RunConfig& c) {
  RngStream rng(3);
  Model m = Model::create(c, rng);
  for (std::size_t i = 0; i < c.blocks; ++i) m.add_gate(i, rng);
  for (auto& [n, e] : m.params().entries())
    for (auto& v : e.value.storage()) v += 0.01 * rng.normal();
  return m;
}

TEST(Checkpoint, RoundTripIsExact) {
  const fs::path dir = scratch("ckpt");
  RunConfig c = tiny(dir);
  c.multipool = PoolSetting::Soft;
  Model m = gated_model(c);
  RngStream rng(4);
  m.add_multipool(rng);
  m.set_kept_blocks(2);
  save_checkpoint(m, (dir / "a").string());
  const Model back = load_checkpoint((dir / "a").string());
  EXPECT_EQ(back.kept_blocks(), 2u);
  EXPECT_TRUE(back.pool_active());
  ASSERT_EQ(back.params().size(), m.params().size());
  for (const auto& [n, e] : m.params().entries()) {
    EXPECT_EQ(e.value.storage(), back.params().get(n).storage()) << n;
    EXPECT_EQ(e.trainable, back.params().trainable(n)) << n;
  }
  const Tensor img = gen_dataset(c.task, c.image_size, 1, 9).samples[0].image;
  EXPECT_EQ(infer(m, img).output.storage(), infer(back, img).output.storage());
}

TEST(Checkpoint, ManifestMismatchesAreErrors) {
  const fs::path dir = scratch("ckpt_bad");
  const RunConfig c = tiny(dir);
  const Model m = gated_model(c);
  const std::string good = (dir / "good").string();
  save_checkpoint(m, good);

  auto variant = [&](const std::string& name, auto&& edit) {
    const fs::path d = dir / name;
    fs::copy(good, d, fs::copy_options::recursive);
    edit(d);
    EXPECT_THROW(load_checkpoint(d.string()), Error) << name;
  };
  auto rewrite_manifest = [](const fs::path& d, auto&& line_filter) {
    std::ifstream in(d / "manifest.txt");
    std::string text, line;
    while (std::getline(in, line)) text += line_filter(line);
    in.close();
    std::ofstream(d / "manifest.txt") << text;
  };
  variant("missing", [&](const fs::path& d) {
    rewrite_manifest(d, [](const std::string& l) {
      return l.starts_with("stem.kernel ") ? std::string() : l + "\n";
    });
  });
  variant("extra", [&](const fs::path& d) {
    save_ptsr((d / "x.ptsr").string(), Tensor({1}));
    std::ofstream(d / "manifest.txt", std::ios::app) << "extra.param x.ptsr 1 1\n";
  });
  variant("dims", [&](const fs::path& d) {
    rewrite_manifest(d, [](const std::string& l) {
      if (!l.starts_with("head.out.bias ")) return l + "\n";
      return std::string("head.out.bias head.out.bias.ptsr 5 1\n");
    });
  });
  variant("policy", [&](const fs::path& d) {
    RunConfig dense = c;
    dense.policy = Policy::Dense;
    std::ofstream(d / "config.txt") << dense.to_text();
  });
  variant("no_manifest", [&](const fs::path& d) { fs::remove(d / "manifest.txt"); });
  EXPECT_NO_THROW(load_checkpoint(good));
}

// ---- evaluation ----------------------------------------------------------

TEST(Evaluation, FlopRatioIsDensityFoldedThroughCount) {
  RunConfig c = tiny("/tmp/x");
  Model m = gated_model(c);
  // Unbiased, strongly weighted gate heads so each layer ends up part on.
  RngStream rng(8);
  for (std::size_t i = 0; i < c.blocks; ++i) {
    const std::string g = "block" + std::to_string(i) + ".gate.";
    m.params().get(g + "bias").fill(0.0);
    for (auto& v : m.params().get(g + "kernel").storage()) v = rng.normal();
  }
  const auto data = evaluation_data(c);
  const EvalResult r = evaluate(m, data);
  ASSERT_EQ(r.layer_densities.size(), c.blocks);
  for (double d : r.layer_densities) {
    EXPECT_GT(d, 0.0);
    EXPECT_LT(d, 1.0);
  }
  const auto net = m.describe();
  double gated = 0.0;
  for (const auto& l : net.layers) {
    const double dense = 2.0 * double(l.height * l.width * l.in_channels * l.out_channels * l.kh * l.kw);
    gated += l.gate_index ? dense * r.layer_densities[*l.gate_index] : dense;
  }
  EXPECT_NEAR(r.flops.ratio, gated / m.full_dense_flops(), 1e-9);
  EXPECT_NEAR(r.flops.ratio,
              count_flops(net, r.layer_densities, c.rho, m.full_dense_flops()).ratio, 1e-12);
}

TEST(Evaluation, GatesAreDeterministicAndBinary) {
  RunConfig c = tiny("/tmp/x");
  const Model m = gated_model(c);
  const Tensor img = gen_dataset(c.task, c.image_size, 1, 5).samples[0].image;
  const auto a = infer(m, img), b = infer(m, img);
  ASSERT_EQ(a.gates.size(), c.blocks);
  for (std::size_t k = 0; k < a.gates.size(); ++k) {
    EXPECT_EQ(a.gates[k].storage(), b.gates[k].storage());
    for (double v : a.gates[k].storage()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  }
}

TEST(Evaluation, RejectsMismatchedData) {
  const RunConfig c = tiny("/tmp/x");
  const Model m = gated_model(c);
  EXPECT_THROW(evaluate(m, gen_dataset("ramp-depth", 16, 1, 1)), Error);
  EXPECT_THROW(evaluate(m, gen_dataset("shapes-semantic", 16, 1, 1, 5)), Error);

  RunConfig s = tiny("/tmp/x", Policy::StaticPerforation);
  RngStream rng(1);
  Model sm = Model::create(s, rng);
  sm.add_gate(0, rng);
  EXPECT_THROW(evaluate(sm, gen_dataset(s.task, 24, 1, 1)), Error);
  EXPECT_NO_THROW(evaluate(sm, gen_dataset(s.task, 16, 1, 1)));
}

TEST(Evaluation, DenseReportsFullCost) {
  const RunConfig c = tiny("/tmp/x", Policy::Dense);
  RngStream rng(1);
  const Model m = Model::create(c, rng);
  const EvalResult r = evaluate(m, evaluation_data(c));
  EXPECT_EQ(r.flops.ratio, 1.0);
  EXPECT_TRUE(std::isnan(r.mean_density));
  EXPECT_NEAR(r.primary, r.metrics.miou, 0.0);
}

// ---- comparison ----------------------------------------------------------

TEST(Compare, RowsNotesAndFiles) {
  const fs::path dir = scratch("compare");
  RunConfig c = tiny(dir);
  c.compare_budgets = {0.8, 0.6};
  c.compare_seeds = {1, 2};
  const auto rows = compare_policies(c);
  // dense 1 + pag 2 + layer-skip 2 + static 2 + truncated 2, per seed.
  ASSERT_EQ(rows.size(), 18u);
  std::map<std::string, std::size_t> per_policy;
  for (const auto& r : rows) {
    ++per_policy[policy_name(r.policy)];
    if (r.policy == Policy::StaticPerforation) EXPECT_NE(r.note.find("fixed input size"), std::string::npos);
    if (r.policy == Policy::Dense) EXPECT_EQ(r.flop_ratio, 1.0);
    EXPECT_TRUE(std::isfinite(r.metric));
  }
  EXPECT_EQ(per_policy["truncated"], 4u);
  for (std::size_t seed : {1u, 2u}) {
    std::size_t k08 = 0, k06 = 0;
    for (const auto& r : rows) {
      if (r.policy != Policy::Truncated || r.seed != seed) continue;
      (r.budget == 0.8 ? k08 : k06) = r.kept_blocks;
    }
    EXPECT_GE(k08, k06);
  }
  const std::string csv = slurp(dir / "compare.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n') + 1), kCompareCsvHeader);
  EXPECT_FALSE(slurp(dir / "compare_summary.csv").empty());
}

TEST(Compare, SummaryStatistics) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_NEAR(sample_std({1.0, 2.0, 3.0}), 1.0, 1e-15);
  EXPECT_EQ(sample_std({5.0}), 0.0);
  std::vector<CompareRow> rows(3);
  for (std::size_t i = 0; i < 3; ++i) {
    rows[i].policy = Policy::Pag;
    rows[i].budget = 0.7;
    rows[i].metric = double(i);
  }
  const auto s = summarize(rows);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(find_summary(s, Policy::Pag, 0.7)->median_metric, 1.0);
  EXPECT_EQ(find_summary(s, Policy::Dense, 0.7), nullptr);
}

}  // namespace
}  // namespace pag::harness

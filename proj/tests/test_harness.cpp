#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace unirep;
namespace fs = std::filesystem;

namespace {

DatasetManifest toy(std::size_t n, std::size_t size = 16, std::uint64_t seed = 5) {
  DatasetManifest m;
  m.name = "brats-toy";
  m.modalities = canonical_modalities();
  m.samples = n;
  m.height = m.width = size;
  m.seed = seed;
  return m;
}

DatasetManifest healthy(std::size_t n, std::size_t size = 16) {
  DatasetManifest m;
  m.name = "hcp-toy";
  m.modalities = {"T1", "T2"};
  m.samples = n;
  m.height = m.width = size;
  m.seed = 9;
  m.tumors = false;
  return m;
}

TrainConfig small(Scenario s, std::size_t epochs = 2) {
  TrainConfig c;
  c.scenario = s;
  c.levels = 2;
  c.base_width = 4;
  c.rep_channels = 4;
  c.decoder_blocks = 1;
  c.epochs_seg = epochs;
  c.max_pre_epochs = 2;
  c.seed = 3;
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("unirep-harness-" + tag)) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

std::vector<std::vector<float>> snapshot(const std::vector<Parameter<Real>*>& ps) {
  std::vector<std::vector<float>> out;
  for (auto* p : ps) out.emplace_back(p->value.data().begin(), p->value.data().end());
  return out;
}

std::vector<Parameter<Real>*> encoder_params(UrnModel<Real>& m) {
  ParameterCollector<Real> c;
  for (std::size_t i = 0; i < m.modality_count(); ++i) m.encoder(i).visit(c, "e" + std::to_string(i));
  return c.out;
}

}  // namespace

TEST(Dice, SetArithmeticExamples) {
  const Region tumor{"X", {1}};
  const std::vector<std::uint8_t> a{1, 1, 1, 1, 0, 0, 0, 0}, b{0, 0, 1, 1, 1, 1, 0, 0}, z(8, 0);
  EXPECT_DOUBLE_EQ(dice(a, a, tumor), 1.0);
  EXPECT_DOUBLE_EQ(dice(a, b, tumor), 0.5);
  const std::vector<std::uint8_t> c{0, 0, 0, 0, 1, 1, 1, 1};
  EXPECT_DOUBLE_EQ(dice(a, c, tumor), 0.0);
  EXPECT_DOUBLE_EQ(dice(z, z, tumor), 1.0);
  EXPECT_DOUBLE_EQ(dice(z, a, tumor), 0.0);
  EXPECT_THROW(dice(a, std::vector<std::uint8_t>(7, 0), tumor), ShapeError);
}

TEST(Dice, RegionsAreLabelSets) {
  const auto& r = tumor_regions();
  const std::vector<std::uint8_t> pred{1, 2, 3, 0}, gt{3, 2, 1, 0};
  EXPECT_DOUBLE_EQ(dice(pred, gt, r[0]), 1.0);  // WT: {1,2,3} on both
  EXPECT_DOUBLE_EQ(dice(pred, gt, r[1]), 1.0);  // TC: {1,3} at positions 0 and 2 on both
  EXPECT_DOUBLE_EQ(dice(pred, gt, r[2]), 0.0);  // ET: position 2 vs position 0
}

TEST(Psnr, FormulaExamples) {
  const std::vector<float> zero(16, 0.0f), one(16, 1.0f), half(16, 0.5f);
  EXPECT_DOUBLE_EQ(psnr(zero, zero, 1.0), kPsnrCap);
  EXPECT_NEAR(psnr(one, zero, 1.0), 0.0, 1e-12);
  EXPECT_NEAR(psnr(half, zero, 1.0), 10.0 * std::log10(4.0), 1e-12);
  EXPECT_NEAR(psnr(half, zero, 1.0), 6.0206, 1e-4);
  EXPECT_THROW(psnr(half, zero, 0.0), ConfigError);
}

TEST(Patterns, FifteenInDisplayOrder) {
  const auto p = all_patterns(4);
  ASSERT_EQ(p.size(), 15u);
  std::set<std::string> seen;
  for (const auto& m : p) seen.insert(m.pattern());
  EXPECT_EQ(seen.size(), 15u);
  EXPECT_EQ(p.front().pattern(), "1000");
  EXPECT_EQ(p[3].pattern(), "0001");
  EXPECT_EQ(p[4].pattern(), "1100");
  EXPECT_EQ(p.back().pattern(), "1111");
}

TEST(Interleave, ProportionalToDatasetSizes) {
  const auto s = interleave({6, 3});
  ASSERT_EQ(s.size(), 9u);
  std::size_t a = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    a += s[i] == 0;
    const double share = 6.0 / 9.0 * static_cast<double>(i + 1);
    EXPECT_LE(std::abs(static_cast<double>(a) - share), 1.0) << "step " << i;
  }
  EXPECT_EQ(a, 6u);
  EXPECT_EQ(interleave({2, 2}), (std::vector<std::size_t>{0, 1, 0, 1}));
}

TEST(TrainSegmentation, ZeroLearningRateKeepsParameters) {
  const auto data = generate_dataset(toy(8));
  for (auto s : {Scenario::Baseline, Scenario::UrnMD}) {
    auto cfg = small(s);
    cfg.lr_seg = 0.0;
    auto model = make_model(cfg, data.manifest.modalities);
    auto params = std::visit([](auto& m) { return model_parameters<Real>(m); }, model.net);
    const auto before = snapshot(params);
    train_segmentation(model, data, cfg);
    EXPECT_EQ(snapshot(params), before) << to_string(s);
  }
}

TEST(TrainSegmentation, SameSeedSameTrace) {
  const auto data = generate_dataset(toy(8));
  for (auto s : {Scenario::BaselineMD, Scenario::UrnMD}) {
    const auto cfg = small(s);
    auto m1 = make_model(cfg, data.manifest.modalities), m2 = make_model(cfg, data.manifest.modalities);
    const auto t1 = train_segmentation(m1, data, cfg), t2 = train_segmentation(m2, data, cfg);
    ASSERT_EQ(t1.trace.size(), t2.trace.size());
    EXPECT_EQ(t1.steps, 4u);
    for (std::size_t i = 0; i < t1.trace.size(); ++i) {
      EXPECT_EQ(t1.trace[i].step, i);
      EXPECT_NEAR(t1.trace[i].loss, t2.trace[i].loss, 1e-6);
    }
  }
}

TEST(TrainSegmentation, NanInputAbortsWithDiagnostic) {
  auto data = generate_dataset(toy(4));
  data.samples[2].images[1][5] = std::numeric_limits<float>::quiet_NaN();
  auto cfg = small(Scenario::Baseline, 1);
  auto model = make_model(cfg, data.manifest.modalities);
  try {
    train_segmentation(model, data, cfg);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("lr="), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch seed="), std::string::npos) << msg;
  }
}

TEST(TrainSegmentation, FiftyEpochsHalveCrossEntropy) {
  const auto data = generate_dataset(toy(200, 32, 7));
  TrainConfig cfg;
  cfg.scenario = Scenario::Baseline;
  cfg.base_width = 8;
  cfg.seed = 1;
  auto model = make_model(cfg, data.manifest.modalities);
  const auto r = train_segmentation(model, data, cfg);
  double last = 0.0;
  std::size_t n = 0;
  for (const auto& e : r.trace) {
    if (e.epoch + 1 == cfg.epochs_seg) {
      last += e.loss;
      ++n;
    }
  }
  EXPECT_LT(last / static_cast<double>(n), 0.5 * std::log(4.0));
}

TEST(RunScenario, PretrainedEncodersStayBitIdentical) {
  const auto brats = generate_dataset(toy(12));
  const auto hcp = generate_dataset(healthy(8));
  auto cfg = small(Scenario::UrnMDPretrained);
  auto model = make_model(cfg, brats.manifest.modalities);
  pretrain_synthesis(model.urn(), {&brats, &hcp}, cfg);
  model.urn().freeze_encoders(true);
  const auto enc = encoder_params(model.urn());
  const auto head = parameters_of<Real>(model.urn().head());
  const auto enc_before = snapshot(enc), head_before = snapshot(head);
  train_segmentation(model, brats, cfg);
  EXPECT_EQ(snapshot(enc), enc_before);
  EXPECT_NE(snapshot(head), head_before);

  const auto r = run_scenario(cfg, brats, {&brats, &hcp});
  EXPECT_TRUE(r.model.decoders_trained);
  ASSERT_TRUE(r.pretraining.has_value());
  EXPECT_EQ(r.pretraining->epochs, 2u);
  EXPECT_THROW(run_scenario(cfg, brats), ConfigError);
  EXPECT_THROW(run_scenario(small(Scenario::UrnMD), brats, {&hcp}), ConfigError);
}

TEST(Pretrain, PooledDatasetsOnlyLossOnPresentModalities) {
  const auto brats = generate_dataset(toy(12));
  const auto hcp = generate_dataset(healthy(20));
  auto cfg = small(Scenario::UrnMDPretrained);
  auto model = make_model(cfg, brats.manifest.modalities);
  std::vector<std::size_t> steps(2, 0);
  pretrain_synthesis(model.urn(), {&brats, &hcp}, cfg, [&](std::size_t d, const std::vector<std::size_t>& mods) {
    ++steps[d];
    if (d == 0) {
      EXPECT_EQ(mods, (std::vector<std::size_t>{0, 1, 2, 3}));
    } else {
      EXPECT_EQ(mods, (std::vector<std::size_t>{1, 3}));  // T1, T2
    }
  });
  // Train splits of 8 and 14 samples, batches of 4, two epochs.
  EXPECT_EQ(steps[0], 4u);
  EXPECT_EQ(steps[1], 8u);
}

TEST(Pretrain, DatasetWithOneSharedModalityIsRejected) {
  const auto brats = generate_dataset(toy(8));
  auto m = healthy(8);
  m.modalities = {"T2"};
  const auto single = generate_dataset(m);
  auto cfg = small(Scenario::UrnMDPretrained);
  auto model = make_model(cfg, brats.manifest.modalities);
  EXPECT_THROW(pretrain_synthesis(model.urn(), {&brats, &single}, cfg), ConfigError);
}

TEST(Pretrain, SameImageThroughOneEncoderHasZeroVariance) {
  const auto data = generate_dataset(toy(4));
  auto cfg = small(Scenario::UrnMDPretrained);
  auto model = make_model(cfg, data.manifest.modalities);
  pretrain_synthesis(model.urn(), {&data}, cfg);
  const auto b = make_batch(data, {0, 1, 2, 3}, model.modalities());
  NoGradGuard ng;
  const auto z1 = model.urn().encode(2, b.images[2], Phase::Eval);
  const auto z2 = model.urn().encode(2, b.images[2], Phase::Eval);
  EXPECT_EQ(variance_penalty(std::vector{z1, z2}).item(), 0.0f);
}

TEST(Pretrain, ConvergesOnPlateau) {
  const auto data = generate_dataset(toy(12));
  auto cfg = small(Scenario::UrnMDPretrained);
  cfg.lr_pre = 0.0;
  cfg.max_pre_epochs = 50;
  auto model = make_model(cfg, data.manifest.modalities);
  const auto r = pretrain_synthesis(model.urn(), {&data}, cfg);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.epochs, cfg.converge_window + 1);
}

TEST(Urn, InferenceInvariantToModalityPresentationOrder) {
  const auto data = generate_dataset(toy(4));
  auto cfg = small(Scenario::UrnMD, 1);
  auto model = make_model(cfg, data.manifest.modalities);
  train_segmentation(model, data, cfg);
  const auto b = make_batch(data, {0, 1, 2, 3}, model.modalities());
  NoGradGuard ng;
  auto& urn = model.urn();
  const std::vector<std::size_t> avail{0, 2, 3};
  UrnForwardOptions o;
  o.encoder_phase = o.head_phase = Phase::Eval;
  o.decode = false;
  o.compute_penalty = false;
  const auto ref = urn_forward(urn, b.images, std::vector<ModalityMask>(4, ModalityMask::from_pattern("1011")), o);
  std::vector<std::size_t> order = avail;
  do {
    std::vector<std::pair<std::size_t, Tensor<Real>>> encoded;
    for (auto m : order) encoded.emplace_back(m, urn.encode(m, b.images[m], Phase::Eval));
    const auto logits = urn.segment(fuse(encoded, FusionF{}), Phase::Eval);
    ASSERT_TRUE(std::equal(logits.data().begin(), logits.data().end(), ref.logits.data().begin()));
  } while (std::next_permutation(order.begin(), order.end()));
}

TEST(Sweep, BaselineRowsMatchDirectEvaluation) {
  const auto train = generate_dataset(toy(8));
  auto em = toy(6);
  em.seed = 77;
  const auto eval = generate_dataset(em);
  auto cfg = small(Scenario::BaselineMD);
  auto model = make_model(cfg, train.manifest.modalities);
  train_segmentation(model, train, cfg);
  const auto report = sweep(model, eval);
  EXPECT_EQ(report.patterns().size(), 15u);
  EXPECT_EQ(report.entries.size(), 45u);

  // Direct oracle: one full-batch forward, hand-computed argmax and Dice.
  const std::size_t plane = 16 * 16, N = 6;
  std::vector<Real> input(N * 4 * plane);
  for (std::size_t s = 0; s < N; ++s)
    for (std::size_t c = 0; c < 4; ++c)
      std::copy_n(eval.samples[s].images[c].begin(), plane, input.begin() + (s * 4 + c) * plane);
  NoGradGuard ng;
  const auto logits = model.baseline().net.forward(Tensor<Real>({N, 4, 16, 16}, std::move(input)), Phase::Eval);
  const auto lv = logits.data();
  double wt = 0.0;
  for (std::size_t s = 0; s < N; ++s) {
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t v = 0; v < plane; ++v) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < 4; ++k) {
        if (lv[(s * 4 + k) * plane + v] > lv[(s * 4 + best) * plane + v]) best = k;
      }
      const bool a = best != 0, t = eval.samples[s].labels[v] != 0;
      p += a;
      g += t;
      both += a && t;
    }
    wt += p + g == 0 ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
  }
  EXPECT_DOUBLE_EQ(*report.find("1111", "WT", "dice"), wt / static_cast<double>(N));
}

TEST(Sweep, UrnReportsPsnrOnlyForAbsentModalities) {
  const auto data = generate_dataset(toy(8));
  auto cfg = small(Scenario::UrnMDPretrained, 1);
  auto r = run_scenario(cfg, data, {&data});
  const auto report = sweep(r.model, data);
  EXPECT_EQ(report.patterns().size(), 15u);
  std::size_t psnr_rows = 0;
  for (const auto& e : report.entries) {
    if (e.metric != "psnr") continue;
    ++psnr_rows;
    const auto mi = modality_index(e.key);
    EXPECT_EQ(e.pattern[mi], '0') << e.pattern << " " << e.key;
    EXPECT_TRUE(std::isfinite(e.value));
  }
  EXPECT_EQ(psnr_rows, 28u);  // absent modalities over all patterns: 4*3 + 6*2 + 4*1
  EXPECT_FALSE(report.find("1111", "F", "psnr").has_value());

  auto plain = make_model(small(Scenario::UrnMD), data.manifest.modalities);
  for (const auto& e : sweep(plain, data).entries) EXPECT_EQ(e.metric, "dice");
}

TEST(Sweep, MissingEvalModalityIsConfigError) {
  auto model = make_model(small(Scenario::Baseline), canonical_modalities());
  EXPECT_THROW(sweep(model, generate_dataset(healthy(4))), ConfigError);
}

TEST(SweepCsv, RoundTripIsExact) {
  SweepReport r;
  r.modalities = canonical_modalities();
  r.entries = {{"1000", "WT", "dice", 0.1 + 0.2}, {"1000", "T1", "psnr", 23.456789012345678},
               {"1111", "ET", "dice", 1.0 / 3.0}, {"0110", "F", "psnr", kPsnrCap}};
  std::stringstream ss;
  write_sweep_csv(ss, r);
  EXPECT_EQ(ss.str().substr(0, ss.str().find('\n')), "pattern,region_or_modality,metric,value");
  const auto back = read_sweep_csv(ss, "mem");
  EXPECT_EQ(back, r);
  for (std::size_t i = 0; i < r.entries.size(); ++i) EXPECT_EQ(back.entries[i].value, r.entries[i].value);
}

TEST(SweepCsv, MalformedInputIsFormatError) {
  const std::string header = std::string(kSweepHeader) + "\n";
  for (const std::string body : {"1000,WT,dice\n", "10x0,WT,dice,0.5\n", "1000,WT,dice,abc\n",
                                 "1000,WT,iou,0.5\n", "1000,WT,dice,0.5\n100,WT,dice,0.5\n"}) {
    std::istringstream in(header + body);
    EXPECT_THROW(read_sweep_csv(in, "mem"), FormatError) << body;
  }
  std::istringstream nohdr("1000,WT,dice,0.5\n");
  EXPECT_THROW(read_sweep_csv(nohdr, "mem"), FormatError);
}

TEST(Svg, OneGroupPerPatternAndDeterministic) {
  SweepReport r;
  r.modalities = canonical_modalities();
  for (const auto& p : all_patterns(4)) r.entries.push_back({p.pattern(), "WT", "dice", 0.25 * p.count()});
  const std::vector<std::pair<std::string, SweepReport>> one{{"a<b", r}};
  const auto svg = render_svg(one);
  EXPECT_EQ(svg, render_svg(one));
  std::size_t circles = 0, bars = 0;
  for (std::size_t at = 0; (at = svg.find("<circle", at)) != std::string::npos; ++at) ++circles;
  for (std::size_t at = 0; (at = svg.find("<title>", at)) != std::string::npos; ++at) ++bars;
  EXPECT_EQ(circles, 15u * 4u);
  EXPECT_EQ(bars, 15u);
  EXPECT_NE(svg.find("a&lt;b"), std::string::npos);
  const std::vector<std::pair<std::string, SweepReport>> three{{"x", r}, {"y", r}, {"z", r}};
  std::size_t bars3 = 0;
  const auto svg3 = render_svg(three);
  for (std::size_t at = 0; (at = svg3.find("<title>", at)) != std::string::npos; ++at) ++bars3;
  EXPECT_EQ(bars3, 45u);
}

TEST(Checkpoint, RoundTripIsByteExact) {
  const auto data = generate_dataset(toy(4));
  for (auto s : {Scenario::BaselineMD, Scenario::UrnMDPretrained}) {
    auto cfg = small(s, 1);
    TrainedModel model = s == Scenario::BaselineMD ? make_model(cfg, data.manifest.modalities)
                                                   : run_scenario(cfg, data, {&data}).model;
    if (s == Scenario::BaselineMD) train_segmentation(model, data, cfg);
    TempDir a("ckpt-a" + to_string(s)), b("ckpt-b" + to_string(s));
    save_trained(a.path, model);
    auto back = load_trained(a.path);
    EXPECT_EQ(back.scenario, s);
    EXPECT_EQ(back.decoders_trained, model.decoders_trained);
    save_trained(b.path, back);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(a.path)) {
      ++files;
      EXPECT_EQ(file_bytes(e.path()), file_bytes(b.path / e.path().filename())) << e.path();
    }
    EXPECT_EQ(files, static_cast<std::size_t>(std::distance(fs::directory_iterator(b.path), {})));
    EXPECT_EQ(sweep(back, data), sweep(model, data));
    if (s == Scenario::UrnMDPretrained) {
      EXPECT_TRUE(back.urn().encoders_frozen());
    }
  }
}

TEST(Checkpoint, CorruptionGivesFormatErrors) {
  const auto data = generate_dataset(toy(4));
  auto model = make_model(small(Scenario::UrnMD), data.manifest.modalities);
  TempDir dir("ckpt-corrupt");
  save_trained(dir.path, model);
  const auto manifest = dir.path / "checkpoint.txt";
  std::string text;
  {
    std::ifstream f(manifest);
    text.assign(std::istreambuf_iterator<char>(f), {});
  }
  auto expect_error = [&](const std::string& edited, const std::string& fragment) {
    std::ofstream(manifest, std::ios::trunc) << edited;
    try {
      load_trained(dir.path);
      ADD_FAILURE() << "expected FormatError containing '" << fragment << "'";
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  auto replace = [&](const std::string& from, const std::string& to) {
    auto s = text;
    const auto at = s.find(from);
    EXPECT_NE(at, std::string::npos) << from;
    return s.replace(at, from.size(), to);
  };
  expect_error(replace("version=1", "version=2"), "version");
  expect_error(replace("format=unirep-checkpoint", "format=other"), "not a unirep checkpoint");
  expect_error(replace("config.rep_channels=4", "config.rep_channels=5"), "shape");
  expect_error(replace("meta.scenario=urn-md", "meta.scenario=baseline"), "scenario");
  expect_error(replace("kind=urn", "kind=baseline"), "scenario");
  expect_error(text + "param.extra.weight=2 extra.f32\n", "does not have");
  expect_error(text + "version=1\n", "duplicate");

  std::ofstream(manifest, std::ios::trunc) << text;
  const auto victim = dir.path / "head.out.weight.f32";
  ASSERT_TRUE(fs::exists(victim));
  fs::resize_file(victim, 3);
  try {
    load_trained(dir.path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.path(), victim.string());
  }
}

#include "halos/evaluator.hpp"
#include "halos/phantom.hpp"
#include "metric_oracle.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <fstream>
#include <random>

using namespace halos;

namespace {

const std::vector<std::string>& names() { return default_class_names(); }

LabelMap random_map(GridShape g, std::mt19937& rng, int classes = 7, double fg = 0.3) {
  LabelMap l(g, names());
  std::uniform_real_distribution<double> u(0, 1);
  for (Index i = 0; i < l.data.size(); ++i)
    l.data[i] = u(rng) < fg ? 1 + static_cast<int>(rng() % static_cast<unsigned>(classes - 1)) : 0;
  return l;
}

ExistenceVector gb(int present) { return ExistenceVector({"gallbladder"}, {present}); }

}  // namespace

TEST_CASE("dice score conventions") {
  std::mt19937 rng(1);
  LabelMap g = random_map({4, 4, 4}, rng);
  g.data[0] = 1;
  CHECK(dice_score(g, g, "liver") == 1.0);

  LabelMap empty({4, 4, 4}, names());
  empty.data.setZero();
  CHECK(dice_score(empty, empty, "gallbladder") == 1.0);
  LabelMap one = empty;
  one.data[5] = 6;
  CHECK(dice_score(one, empty, "gallbladder") == 0.0);
  CHECK(dice_score(empty, one, "gallbladder") == 0.0);

  CHECK_THROWS(dice_score(g, g, "heart"));
  CHECK_THROWS(dice_score(g, LabelMap({4, 4, 2}, names()), "liver"));
}

TEST_CASE("sample-level FPR") {
  LabelMap clean({3, 3, 3}, names());
  clean.data.setZero();
  LabelMap halluc = clean;
  halluc.data[4] = 6;

  std::vector<LabelMap> preds(10, clean);
  std::vector<ExistenceVector> flags(10, gb(0));
  CHECK(*sample_fpr(preds, flags, "gallbladder") == 0.0);
  preds[2] = preds[7] = halluc;
  CHECK(*sample_fpr(preds, flags, "gallbladder") == doctest::Approx(0.2));
  CHECK_FALSE(sample_fpr(preds, std::vector<ExistenceVector>(10, gb(1)), "gallbladder").has_value());
}

TEST_CASE("classification metrics") {
  const std::vector<int> truth{1, 1, 0, 0, 1, 0};
  auto perfect = classification_metrics(truth, truth);
  CHECK(*perfect.f1 == 1.0);
  CHECK(perfect.balanced_accuracy == 1.0);
  CHECK_FALSE(perfect.degenerate);

  const std::vector<int> half{1, 1, 1, 0, 0, 0};
  const auto always = classification_metrics(std::vector<int>(6, 1), half);
  CHECK(always.balanced_accuracy == 0.5);
  CHECK(always.tp == 3);
  CHECK(always.fp == 3);
  CHECK(*always.fpr() == 1.0);

  const auto single = classification_metrics({1, 0, 1}, {1, 1, 1});
  CHECK(single.degenerate);
  CHECK(single.balanced_accuracy == doctest::Approx(2.0 / 3));

  // fold averaging of integer counts gives fractional means
  const auto a = classification_metrics({1, 1, 0}, {1, 1, 1});
  const auto b = classification_metrics({1, 1, 1}, {1, 1, 1});
  CHECK((a.tp + b.tp) / 2.0 == 2.5);
  CHECK_THROWS(classification_metrics({}, {}));
}

TEST_CASE("post-processing removes absent organs") {
  Tensor5<float> p(1, 7, GridShape{2, 2, 2});
  for (Index v = 0; v < 8; ++v) {
    p.item(0)(6, v) = 0.6f;
    p.item(0)(1, v) = 0.3f;
    p.item(0)(0, v) = 0.1f;
  }
  const LabelMap plain = argmax_labels(p, 0, names());
  CHECK((post_process(p, gb(1), names()).data == plain.data).all());
  const LabelMap fixed = post_process(p, gb(0), names());
  CHECK(fixed.count(6) == 0);
  CHECK(fixed.count(1) == 8);  // runner-up is liver, not background

  std::mt19937 rng(3);
  std::uniform_real_distribution<float> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor5<float> r(1, 7, GridShape{4, 3, 5});
    for (Index i = 0; i < r.size(); ++i) r.array()[i] = u(rng);
    ExistenceVector flags({"l_kidney", "gallbladder"}, {static_cast<int>(rng() % 2), 0});
    const LabelMap out = post_process(r, flags, names());
    CHECK(out.count(6) == 0);
    CHECK(*voxel_fp_count(out, flags, "gallbladder") == 0);
    CHECK((out.data == oracle::post_process(r, flags, names()).data).all());
  }
}

TEST_CASE("voxel FP counts") {
  LabelMap l({2, 2, 2}, names());
  l.data.setZero();
  CHECK(*voxel_fp_count(l, gb(0), "gallbladder") == 0);
  l.data[0] = l.data[3] = l.data[5] = 6;
  CHECK(*voxel_fp_count(l, gb(0), "gallbladder") == 3);
  CHECK_FALSE(voxel_fp_count(l, gb(1), "gallbladder").has_value());
}

TEST_CASE("metrics agree with the brute-force oracle") {
  std::mt19937 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const GridShape g{1 + static_cast<Index>(rng() % 8), 1 + static_cast<Index>(rng() % 8), 1 + static_cast<Index>(rng() % 8)};
    const LabelMap p = random_map(g, rng, 7, 0.5), t = random_map(g, rng, 7, 0.5);
    for (std::size_t c = 1; c < names().size(); ++c) CHECK(dice_score(p, t, names()[c]) == oracle::dice(p, t, names()[c]));
  }
}

TEST_CASE("window placement and blending weights") {
  CHECK(window_starts(64, 32, 0.5) == std::vector<Index>{0, 16, 32});
  CHECK(window_starts(32, 32, 0.5) == std::vector<Index>{0});
  CHECK(window_starts(40, 32, 0.5) == std::vector<Index>{0, 8});
  CHECK(window_starts(70, 32, 0.5) == std::vector<Index>{0, 13, 25, 38});
  const auto w = gaussian_importance({8, 8, 8}, 1.0 / 8);
  CHECK(w.maxCoeff() == 1.0f);
  CHECK(w.minCoeff() > 0.0f);
  CHECK(w[(4 * 8 + 4) * 8 + 4] == 1.0f);
}

TEST_CASE("sliding-window inference") {
  std::mt19937 rng(5);
  NetworkConfig c;
  c.base_channels = 2;
  c.num_levels = 2;
  c.classifier_block = 2;
  UNet<float> m(c);
  Volume v({8, 8, 8});
  for (Index i = 0; i < v.data.size(); ++i) v.data[i] = std::normal_distribution<float>()(rng);
  InferenceConfig cfg;
  cfg.patch = {8, 8, 8};

  SUBCASE("single window is plain softmax") {
    const Matrix<float> e = Matrix<float>::Ones(1, 1);
    const auto probs = sliding_window_probabilities(m, v, &e, cfg);
    Tensor5<float> x(1, 1, v.shape);
    x.array() = v.data;
    const auto direct = softmax_channels(m.forward(x, &e).logits);
    CHECK((probs.array() - direct.array()).abs().maxCoeff() < 1e-6f);
    CHECK((probs.item(0).colwise().sum().array() - 1.f).abs().maxCoeff() < 1e-5f);
  }
  SUBCASE("overlapping windows and padding keep the grid") {
    Volume big({12, 6, 16});
    big.data.setRandom();
    const Matrix<float> e = Matrix<float>::Zero(1, 1);
    const auto probs = sliding_window_probabilities(m, big, &e, cfg);
    CHECK(probs.grid() == big.shape);
    CHECK((probs.item(0).colwise().sum().array() - 1.f).abs().maxCoeff() < 1e-5f);
  }
  SUBCASE("existence sources") {
    const Prediction a = predict_volume(m, v, ExistenceSource::ground_truth, gb(1), names(), cfg);
    CHECK(a.labels.shape == v.shape);
    CHECK(*a.fusion_input == gb(1));
    // the untrained classifier returns 0.5 on some inputs; whatever it says,
    // classifier mode feeds the thresholded output
    const Prediction b = predict_volume(m, v, ExistenceSource::classifier, gb(0), names(), cfg);
    const double p = classifier_probabilities(m, v)[0];
    CHECK(b.fusion_input->flag("gallbladder") == (p >= 0.5 ? 1 : 0));
    const Prediction n = predict_volume(m, v, ExistenceSource::none, gb(0), names(), cfg);
    CHECK(n.fusion_input->all_present());

    NetworkConfig pc = baseline_config(c, BaselineKind::plain);
    UNet<float> plain(pc);
    CHECK_THROWS(predict_volume(plain, v, ExistenceSource::classifier, gb(1), names(), cfg));
    CHECK_NOTHROW(predict_volume(plain, v, ExistenceSource::ground_truth, gb(1), names(), cfg));
  }
}

TEST_CASE("evaluation over a phantom split") {
  TempDir dir("eval");
  PhantomConfig pc = default_phantom_config();
  pc.grid_size = 16;
  pc.resection_probability["gallbladder"] = 0.5;
  pc.seed = 3;
  const Manifest m = generate_dataset(pc, {1, 1, 6}, 0.5, dir / "data");

  SUBCASE("perfect predictions") {
    const auto pred_dir = dir / "pred";
    std::filesystem::create_directories(pred_dir);
    for (const auto* r : m.split(Split::test)) {
      const Phantom p = generate_phantom(pc, static_cast<std::uint64_t>(std::stoi(r->id.substr(8))));
      save_labelmap(p.labels, pred_dir / (r->id + "_pred.nii.gz"));
      save_probabilities(one_hot<float>(p.labels, 7), pred_dir / (r->id + "_prob.nii.gz"));
    }
    const auto res = evaluate_predictions(pred_dir, m, Split::test, true);
    for (const auto& [organ, d] : res["modes"]["raw"]["dice"].items()) CHECK(d["mean"].get<double>() == 1.0);
    const auto& gbm = res["modes"]["postproc"]["removable"]["gallbladder"];
    if (!gbm["fpr"].is_null()) CHECK(gbm["fpr"].get<double>() == 0.0);
    CHECK(res["modes"]["raw"]["num_samples"] == 6);

    std::filesystem::remove(pred_dir / (m.split(Split::test).front()->id + "_pred.nii.gz"));
    CHECK_THROWS_AS(evaluate_predictions(pred_dir, m, Split::test, false), FormatError);
  }
  SUBCASE("random predictions match the oracle") {
    std::mt19937 rng(6);
    std::vector<LabelMap> preds;
    std::vector<ExistenceVector> flags;
    std::vector<SampleResult> samples;
    for (const auto* r : m.split(Split::test)) {
      LabelMap p = random_map({16, 16, 16}, rng, 7, 0.01 * static_cast<double>(rng() % 3));
      std::optional<LabelMap> gt;
      if (r->labelmap_path) gt = load_labelmap(*r->labelmap_path, names());
      samples.push_back({r->id, r->existence, gt, p});
      preds.push_back(p);
      flags.push_back(r->existence);
    }
    const auto res = aggregate_metrics(samples, names(), {"gallbladder"});
    const auto fpr = oracle::fpr(preds, flags, "gallbladder");
    const auto& rj = res["removable"]["gallbladder"];
    if (fpr) CHECK(rj["fpr"].get<double>() == *fpr);
    else CHECK(rj["fpr"].is_null());
    std::vector<int> pp, tt;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      pp.push_back(oracle::count_voxels(preds[i], 6) > 0);
      tt.push_back(flags[i].flag("gallbladder"));
    }
    const auto conf = oracle::confusion(pp, tt);
    CHECK(rj["tp"] == conf.tp);
    CHECK(rj["fp"] == conf.fp);
    CHECK(rj["tn"] == conf.tn);
    CHECK(rj["fn"] == conf.fn);
    double liver = 0;
    int n = 0;
    for (const auto& s : samples)
      if (s.gt) liver += oracle::dice(s.pred, *s.gt, "liver"), ++n;
    CHECK(res["dice"]["liver"]["mean"].get<double>() == doctest::Approx(liver / n).epsilon(1e-12));
  }
  SUBCASE("model evaluation writes a report") {
    NetworkConfig c;
    c.base_channels = 2;
    c.num_levels = 2;
    c.classifier_block = 2;
    UNet<float> model(c);
    EvalOptions opts;
    opts.inference.patch = {8, 8, 8};
    opts.dump_dir = dir / "dump";
    const auto res = evaluate_model(model, m, opts);
    CHECK(res["modes"].size() == 4);
    CHECK(res["classifier"]["organs"].contains("gallbladder"));
    CHECK(std::filesystem::exists(dir / "dump" / "gt" / (m.split(Split::test).front()->id + "_pred.nii.gz")));
    CHECK(res["modes"]["postproc"]["removable"]["gallbladder"]["fp"] == 0);

    const nlohmann::json config = {{"variant", "halos"}};
    write_report(res, config, dir / "report");
    std::ifstream in(dir / "report" / "results.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j["config_hash"] == config_hash(config));
    CHECK(std::filesystem::exists(dir / "report" / "results.md"));

    opts.modes = {EvalMode::pred};
    UNet<float> plain(baseline_config(c, BaselineKind::plain));
    CHECK_THROWS(evaluate_model(plain, m, opts));
  }
}

TEST_CASE("config hash is git blob compatible") {
  CHECK(config_hash(nlohmann::json::object()) == "9e26dfeeb6e641a33dae4961196235bdb965b21b");
  CHECK(config_hash({{"a", 1}}) == "daa5053ecf5f9a37b2de733d0751cc1ab53ac010");
  CHECK(eval_mode_from_string("postproc") == EvalMode::postproc);
  CHECK_THROWS(eval_mode_from_string("oracle"));
}

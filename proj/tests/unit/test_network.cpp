#include "halos/network.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <fstream>
#include <random>
#include <set>

using namespace halos;
using halos::testing::central_difference;
using halos::testing::relative_error;

namespace {

NetworkConfig tiny_config(int levels = 2, Index base = 2) {
  NetworkConfig c;
  c.base_channels = base;
  c.num_levels = levels;
  c.classifier_block = levels;
  c.num_classes = 3;
  c.seed = 3;
  return c;
}

template <typename Scalar>
Tensor5<Scalar> random_input(Index batch, GridShape g, std::mt19937& rng) {
  Tensor5<Scalar> x(batch, 1, g);
  std::normal_distribution<double> n(0.0, 1.0);
  for (Index i = 0; i < x.size(); ++i) x.array()[i] = static_cast<Scalar>(n(rng));
  return x;
}

Matrix<double> flags(std::initializer_list<double> v) {
  Matrix<double> m(static_cast<Index>(v.size()), 1);
  Index i = 0;
  for (double f : v) m(i++, 0) = f;
  return m;
}

std::set<std::string> parameter_names(UNet<float>& m) {
  std::set<std::string> s;
  for (auto* p : m.parameters()) s.insert(p->name);
  return s;
}

}  // namespace

TEST_CASE("channel schedule and fusion sites") {
  NetworkConfig c;
  std::vector<Index> ch;
  for (int s = 0; s <= c.num_levels; ++s) ch.push_back(c.stage_channels(s));
  CHECK(ch == std::vector<Index>{32, 64, 128, 256, 320, 320});

  c.base_channels = 2;
  CHECK(UNet<float>(c).fusion_site_count() == 6);
  c.fusion_enabled = false;
  CHECK(UNet<float>(c).fusion_site_count() == 0);
}

TEST_CASE("config validation") {
  NetworkConfig c = tiny_config();
  c.num_levels = 1;
  CHECK_THROWS(c.validate());
  c = tiny_config();
  c.classifier_block = 3;
  CHECK_THROWS(c.validate());
  c = tiny_config();
  c.base_channels = 0;
  CHECK_THROWS(c.validate());
  c = tiny_config();
  CHECK(network_config_from_json(to_json(c)).base_channels == c.base_channels);
  CHECK(to_json(network_config_from_json(to_json(c))) == to_json(c));
}

TEST_CASE("output shapes") {
  std::mt19937 rng(1);
  NetworkConfig c = tiny_config(5);
  c.num_classes = 7;
  UNet<float> m(c);
  const auto x = random_input<float>(1, {32, 32, 32}, rng);
  const Matrix<float> e = Matrix<float>::Ones(1, 1);
  const auto out = m.forward(x, &e);
  CHECK(out.logits.shape() == Shape5{1, 7, {32, 32, 32}});
  REQUIRE(out.deep_supervision_logits.size() == 4);
  for (std::size_t k = 0; k < 4; ++k) CHECK(out.deep_supervision_logits[k].grid().depth == (32 >> k));
  CHECK(out.existence_logits.rows() == 1);
  CHECK(out.existence_logits.cols() == 1);

  for (int levels : {3, 5})
    for (Index n : {32, 64}) {
      NetworkConfig cc = tiny_config(levels, 1);
      cc.deep_supervision = false;
      UNet<float> mm(cc);
      const auto xi = random_input<float>(1, {n, n, n}, rng);
      const auto o = mm.forward(xi, &e);
      CHECK(o.logits.grid() == xi.grid());
      CHECK(o.deep_supervision_logits.size() == 1);
    }
}

TEST_CASE("forward rejects bad input") {
  std::mt19937 rng(2);
  UNet<float> m(tiny_config());
  const Matrix<float> e = Matrix<float>::Ones(1, 1);
  CHECK_THROWS(m.forward(random_input<float>(1, {8, 8, 6}, rng), &e));
  CHECK_THROWS(m.forward(random_input<float>(1, {8, 8, 8}, rng), nullptr));
  const Matrix<float> wrong = Matrix<float>::Ones(1, 2);
  CHECK_THROWS(m.forward(random_input<float>(1, {8, 8, 8}, rng), &wrong));
  Tensor5<float> two(1, 2, GridShape{8, 8, 8});
  CHECK_THROWS(m.forward(two, &e));
}

TEST_CASE("daft transform closed forms") {
  FusionModule<double> f(1, 1, 4, "f");
  f.init(1);
  Tensor5<double> x(1, 1, GridShape{1, 1, 2});
  x(0, 0, 0, 0, 0) = 2;
  x(0, 0, 0, 0, 1) = -1;
  const auto e = flags({1});
  CHECK((daft_transform(x, e, f).array() == x.array()).all());  // identity at init
  CHECK(f.output_width() == 2);
  CHECK(f.hidden_width() == 1);

  f.force_affine(Eigen::VectorXd::Constant(1, 0.0), Eigen::VectorXd::Constant(1, 0.0));
  CHECK((daft_transform(x, e, f).array() == 0.0).all());
  f.force_affine(Eigen::VectorXd::Constant(1, 0.5), Eigen::VectorXd::Constant(1, 1.0));
  const auto y = daft_transform(x, e, f);
  CHECK(y(0, 0, 0, 0, 0) == 2.0);
  CHECK(y(0, 0, 0, 0, 1) == 0.5);

  // per-channel closed form on several channels
  FusionModule<double> g(3, 2, 2, "g");
  Eigen::VectorXd a(3), b(3);
  a << 0.5, -2, 3;
  b << 1, 0, -1;
  g.force_affine(a, b);
  std::mt19937 rng(5);
  Tensor5<double> z(2, 3, GridShape{2, 2, 2});
  for (Index i = 0; i < z.size(); ++i) z.array()[i] = std::normal_distribution<double>()(rng);
  Matrix<double> e2(2, 2);
  e2 << 1, 0, 0, 1;
  const auto zz = daft_transform(z, e2, g);
  for (Index n = 0; n < 2; ++n)
    for (Index c = 0; c < 3; ++c)
      CHECK(((zz.channel(n, c) - (a[c] * z.channel(n, c) + b[c])).abs() < 1e-15).all());
  CHECK_THROWS(daft_transform(z, flags({1, 0}), g));
}

TEST_CASE("fused and plain networks agree at initialisation") {
  std::mt19937 rng(3);
  for (NormType norm : {NormType::instance, NormType::batch}) {
    NetworkConfig c = tiny_config(3);
    c.norm = norm;
    UNet<float> halos_net(c);
    UNet<float> plain = build_baseline<float>(c, BaselineKind::plain);
    for (int trial = 0; trial < 3; ++trial) {
      const auto x = random_input<float>(2, {8, 8, 8}, rng);
      Matrix<float> e(2, 1);
      e << 0, 1;
      const auto a = halos_net.forward(x, &e).logits;
      const auto b = plain.forward(x).logits;
      CHECK((a.array() - b.array()).abs().maxCoeff() <= 1e-5f);
    }
  }
}

TEST_CASE("baselines") {
  NetworkConfig c = tiny_config(3);
  UNet<float> full(c);
  UNet<float> plain = build_baseline<float>(c, BaselineKind::plain);
  std::set<std::string> expected;
  for (auto* p : full.parameters())
    if (p->name.rfind("fusion", 0) != 0 && p->group != ParamGroup::classifier) expected.insert(p->name);
  CHECK(parameter_names(plain) == expected);
  CHECK(plain.fusion_site_count() == 0);

  UNet<float> dec = build_baseline<float>(c, BaselineKind::decoder_classifier);
  CHECK(dec.fusion_site_count() == 0);
  std::mt19937 rng(4);
  const auto x = random_input<float>(1, {16, 16, 16}, rng);
  const auto out = dec.forward(x);
  CHECK(dec.classifier_input_grid() == x.grid());
  CHECK(out.logits.grid() == x.grid());
  CHECK(out.existence_logits.cols() == 1);
  CHECK(baseline_from_string("plain") == BaselineKind::plain);
  CHECK_THROWS(baseline_from_string("unet++"));
}

TEST_CASE("classifier probabilities") {
  std::mt19937 rng(6);
  UNet<float> m(tiny_config(3));
  const auto p = classify(m, random_input<float>(3, {8, 8, 8}, rng));
  CHECK((p.array() >= 0.f).all());
  CHECK((p.array() <= 1.f).all());
  const auto zero = classify(m, Tensor5<float>(1, 1, GridShape{8, 8, 8}));
  CHECK(zero(0, 0) == 0.5f);
  UNet<float> plain = build_baseline<float>(tiny_config(3), BaselineKind::plain);
  CHECK_THROWS(classify(plain, Tensor5<float>(1, 1, GridShape{8, 8, 8})));
}

TEST_CASE("analytic gradients match finite differences") {
  std::mt19937 rng(7);
  for (NormType norm : {NormType::instance, NormType::batch}) {
    for (ClassifierSite site : {ClassifierSite::encoder, ClassifierSite::decoder}) {
      NetworkConfig c = tiny_config(2);
      c.norm = norm;
      c.classifier_site = site;
      c.classifier_block = 1;
      c.deep_supervision = true;
      UNet<double> m(c);
      m.set_training(true);
      // perturb fusion so the conditioning path carries gradient
      for (auto* p : m.parameters())
        if (p->name.find(".fc2.weight") != std::string::npos)
          for (Index i = 0; i < p->value.size(); ++i) p->value[i] = 0.3 * std::normal_distribution<double>()(rng);

      // 8^3 keeps the bottleneck at 2^3; instance norm over a single voxel
      // outputs exactly its bias, which sits on the activation kink.
      const auto x = random_input<double>(2, {8, 8, 8}, rng);
      Matrix<double> e(2, 1);
      e << 1, 0;
      auto probe = m.forward(x, &e);
      std::vector<Tensor5<double>> w;
      for (const auto& t : probe.deep_supervision_logits) {
        w.emplace_back(t.shape());
        w.back().array() = Eigen::ArrayXd::Random(t.size());
      }
      const Matrix<double> we = Matrix<double>::Random(2, 1);
      auto objective = [&] {
        const auto o = m.forward(x, &e);
        double s = (o.existence_logits.array() * we.array()).sum();
        for (std::size_t k = 0; k < w.size(); ++k) s += (o.deep_supervision_logits[k].array() * w[k].array()).sum();
        return s;
      };
      m.zero_grad();
      objective();
      m.backward({w, we});

      double worst = 0;
      int checked = 0;
      for (auto* p : m.parameters()) {
        // a few coordinates from every parameter
        for (Index k = 0; k < std::min<Index>(3, p->value.size()); ++k) {
          const Index i = (k * 7919) % p->value.size();
          const double analytic = p->grad[i];
          const double numeric = central_difference(&p->value[i], objective, 1e-5);
          if (std::abs(analytic) < 1e-7 && std::abs(numeric) < 1e-7) continue;
          const double err = relative_error(analytic, numeric, 1e-6);
          if (err > worst) worst = err;
          ++checked;
          if (err > 1e-3) MESSAGE(to_string(norm) << " site " << int(site) << " " << p->name << "[" << i << "] analytic " << analytic << " numeric " << numeric);
        }
      }
      CHECK(checked > 20);
      CHECK(worst < 1e-3);
    }
  }
}

TEST_CASE("existence input changes logits after a fusion update") {
  std::mt19937 rng(8);
  NetworkConfig c = tiny_config(2);
  UNet<double> m(c);
  m.set_training(true);
  const auto x = random_input<double>(1, {4, 4, 4}, rng);
  const auto one = flags({1});
  const auto zero = flags({0});
  CHECK((m.forward(x, &one).logits.array() == m.forward(x, &zero).logits.array()).all());

  const auto out = m.forward(x, &zero);
  OutputGradient<double> g;
  for (const auto& t : out.deep_supervision_logits) {
    g.deep_supervision.push_back(t);
    g.deep_supervision.back().array() = 1.0;
  }
  g.existence = Matrix<double>::Zero(1, 1);
  m.zero_grad();
  m.backward(g);
  for (auto* q : m.parameters())
    if (q->name.rfind("fusion", 0) == 0) q->value -= 0.1 * q->grad;
  const auto a = m.forward(x, &one).logits;
  const auto b = m.forward(x, &zero).logits;
  CHECK((a.array() - b.array()).abs().maxCoeff() > 0.0);
}

TEST_CASE("weight archives round-trip") {
  TempDir dir("archive");
  std::mt19937 rng(9);
  NetworkConfig c = tiny_config(3);
  c.norm = NormType::batch;
  UNet<float> m(c);
  m.set_training(true);
  const auto x = random_input<float>(2, {8, 8, 8}, rng);
  Matrix<float> e(2, 1);
  e << 1, 0;
  m.forward(x, &e);  // moves the running statistics
  m.set_training(false);
  WeightArchive a;
  a.meta["note"] = "test";
  export_model(m, a);
  write_archive(dir / "w.ckpt", a);
  const WeightArchive r = read_archive(dir / "w.ckpt");
  CHECK(r.meta["note"] == "test");
  UNet<float> back = model_from_archive<float>(r);
  const auto o1 = m.forward(x, &e);
  const auto o2 = back.forward(x, &e);
  CHECK((o1.logits.array() == o2.logits.array()).all());
  CHECK((o1.existence_logits.array() == o2.existence_logits.array()).all());

  std::ofstream(dir / "junk.ckpt") << "nope";
  CHECK_THROWS(read_archive(dir / "junk.ckpt"));
  WeightArchive wrong = r;
  wrong.tensors.erase(wrong.tensors.begin());
  CHECK_THROWS(model_from_archive<float>(wrong));
}

#include "fgsd/net.h"

#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "fgsd/autodiff.h"
#include "fgsd/rng.h"
#include "fgsd/tensor.h"

using namespace fgsd;

namespace {

Tensor randn_tensor(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(shape, rng);
}

// spatial means of a [N,C,H,W] (or identity for [N,F]) tensor, computed
// independently of the graph ops
Tensor plain_means(const Tensor& a) {
  if (a.rank() == 2) return a;
  Tensor out({a.dim(0), a.dim(1)});
  const std::int64_t hw = a.dim(2) * a.dim(3);
  for (std::int64_t n = 0; n < a.dim(0); ++n)
    for (std::int64_t c = 0; c < a.dim(1); ++c) {
      double acc = 0;
      for (std::int64_t i = 0; i < hw; ++i) acc += a.data()[(n * a.dim(1) + c) * hw + i];
      out.at(n, c) = acc / double(hw);
    }
  return out;
}

}  // namespace

TEST_CASE("feature dimensions of the stock configurations") {
  CHECK(desk_unet_config().feature_dim() == 352);
  CHECK(full_scale_unet_config().feature_dim() == 1344);
  CHECK(mixture_mlp_config(2).feature_dim() == 256);
  CHECK_NOTHROW(desk_unet_config().validate());
  CHECK_NOTHROW(full_scale_unet_config().validate());
  CHECK_NOTHROW(mixture_mlp_config(7).validate());
}

TEST_CASE("desk unet parameter count matches a hand count of the layer shapes") {
  // 3x3 convs, each followed by a per-channel norm (2C affine params):
  //   enc1 (1->16,16->16):      160 + 2320 + 2*32   = 2544
  //   enc2 (16->32,32->32):     4640 + 9248 + 2*64  = 14016
  //   enc3 (32->64,64->64):     18496 + 36928 + 128 = 55680
  //   mid  (64->128,128->128):  73856 + 147584 + 512 = 221952
  //   dec1 (192->64, 3x 64->64):  110656 + 3*36928 + 4*128 = 221952
  //   dec2 (96->32,  3x 32->32):  27680 + 3*9248 + 4*64    = 55680
  //   dec3 (48->16,  3x 16->16):  6928 + 3*2320 + 4*32     = 14016
  //   out  (16->1):             145
  //   injection gains:          352
  const std::int64_t hand =
      2544 + 14016 + 55680 + 221952 + 221952 + 55680 + 14016 + 145 + 352;
  CHECK(hand == 586337);
  CHECK(param_count(desk_unet_config()) == hand);

  DenoiserNet net = build_net(desk_unet_config(), 7);
  CHECK(net.total_params() == hand);
}

TEST_CASE("mlp parameter count follows the width chain") {
  ArchConfig cfg = mixture_mlp_config(2);
  // (2*256+256) + (256*256+256)*2 + (256*2+2) + gains 256
  std::int64_t expect = (2 * 256 + 256) + 2 * (256 * 256 + 256) + (256 * 2 + 2) + 256;
  CHECK(param_count(cfg) == expect);
  CHECK(build_net(cfg, 3).total_params() == expect);
}

TEST_CASE("building is deterministic in the seed and initializes as documented") {
  ArchConfig cfg = mixture_mlp_config(3);
  DenoiserNet a = build_net(cfg, 42);
  DenoiserNet b = build_net(cfg, 42);
  DenoiserNet c = build_net(cfg, 43);
  bool identical = true, differs = false;
  for (std::size_t i = 0; i < a.param_values.size(); ++i) {
    if (std::memcmp(a.param_values[i].data(), b.param_values[i].data(),
                    sizeof(double) * std::size_t(a.param_values[i].numel())) != 0)
      identical = false;
    if (std::memcmp(a.param_values[i].data(), c.param_values[i].data(),
                    sizeof(double) * std::size_t(a.param_values[i].numel())) != 0)
      differs = true;
  }
  CHECK(identical);
  CHECK(differs);

  // gains start at exactly 1, biases at exactly 0
  CHECK((a.param("gain_h2").array() == 1.0).all());
  CHECK((a.param("b1").array() == 0.0).all());

  DenoiserNet u = build_net(desk_unet_config(), 5);
  CHECK((u.param("gain_mid").array() == 1.0).all());
  CHECK((u.param("enc1_conv1_gamma").array() == 1.0).all());
  CHECK((u.param("enc1_conv1_beta").array() == 0.0).all());
  CHECK(u.gains().numel() == 352);
  CHECK((u.gains().array() == 1.0).all());
}

TEST_CASE("config validation rejects malformed architectures") {
  ArchConfig cfg = desk_unet_config();
  cfg.input_size = 30;  // not divisible by 2^3
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS_AS(build_net(cfg, 1), std::invalid_argument);

  cfg = desk_unet_config();
  cfg.tap_spec = {{"enc9", 16}};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = desk_unet_config();
  cfg.tap_spec = {{"mid", 128}, {"enc1", 16}};  // out of traversal order
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = desk_unet_config();
  cfg.tap_spec = {{"enc1", 99}};  // wrong channel count
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = desk_unet_config();
  cfg.kernel = 4;  // even kernel
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  ArchConfig m = mixture_mlp_config(2);
  m.tap_spec = {{"h4", 256}};  // only 3 hidden layers exist
  CHECK_THROWS_AS(m.validate(), std::invalid_argument);

  m = mixture_mlp_config(2);
  m.widths = {2, 2};  // no hidden layer to tap
  CHECK_THROWS_AS(m.validate(), std::invalid_argument);
}

TEST_CASE("mlp forward pass equals an independent dense-algebra evaluation") {
  ArchConfig cfg;
  cfg.kind = ArchConfig::Kind::Mlp;
  cfg.widths = {3, 5, 5, 5, 3};
  cfg.tap_spec = {{"h2", 5}};
  DenoiserNet net = build_net(cfg, 11);

  Tensor x = randn_tensor({4, 3}, 21);
  auto out = score_forward(net, x, Injection{});

  // replay with plain Eigen maps
  Eigen::MatrixXd cur = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                       Eigen::RowMajor>>(x.data(), 4, 3);
  for (int l = 1; l <= 4; ++l) {
    const Tensor& w = net.param("w" + std::to_string(l));
    const Tensor& b = net.param("b" + std::to_string(l));
    Eigen::MatrixXd wm =
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                       Eigen::RowMajor>>(w.data(), w.dim(0), w.dim(1));
    Eigen::VectorXd bv = Eigen::Map<const Eigen::VectorXd>(b.data(), b.numel());
    cur = (cur * wm).rowwise() + bv.transpose();
    if (l < 4) cur = cur.cwiseMax(0.0);
  }
  for (std::int64_t n = 0; n < 4; ++n)
    for (std::int64_t f = 0; f < 3; ++f)
      CHECK(out.noise_estimate.at(n, f) ==
            doctest::Approx(cur(Eigen::Index(n), Eigen::Index(f))).epsilon(1e-12));
}

TEST_CASE("weighted score is the negated noise estimate") {
  Tensor t = Tensor::from_data({2, 2}, {1.0, -2.0, 0.0, 3.5});
  Tensor w = weighted_score(t);
  CHECK(w.at(0, 0) == -1.0);
  CHECK(w.at(0, 1) == 2.0);
  CHECK(w.at(1, 0) == 0.0);
  CHECK(w.at(1, 1) == -3.5);
}

TEST_CASE("tap consistency: extract_features equals the score_forward phi") {
  DenoiserNet net = build_net(mixture_mlp_config(2), 9);
  Tensor x = randn_tensor({3, 2}, 33);
  Tensor phi_a = extract_features(net, x);
  auto fwd = score_forward(net, x, Injection{});
  CHECK(phi_a.shape() == Shape{3, 256});
  CHECK(std::memcmp(phi_a.data(), fwd.phi.data(), sizeof(double) * 3 * 256) == 0);
}

TEST_CASE("unet forward: shapes, finiteness, and tap consistency") {
  DenoiserNet net = build_net(desk_unet_config(), 2);
  Tensor x = randn_tensor({2, 1, 32, 32}, 5);
  auto fwd = score_forward(net, x, Injection{});
  CHECK(fwd.noise_estimate.shape() == Shape{2, 1, 32, 32});
  CHECK(fwd.phi.shape() == Shape{2, 352});
  for (std::int64_t i = 0; i < fwd.noise_estimate.numel(); ++i)
    CHECK(std::isfinite(fwd.noise_estimate.data()[i]));
  Tensor phi2 = extract_features(net, x);
  CHECK(std::memcmp(phi2.data(), fwd.phi.data(), sizeof(double) * 2 * 352) == 0);
}

TEST_CASE("zero-deviation neutrality: injecting a pass's own phi is a no-op") {
  // holds for arbitrary gains, so randomize them away from 1
  for (bool unet : {false, true}) {
    ArchConfig cfg = unet ? [] {
      ArchConfig c = desk_unet_config();
      c.input_size = 16;  // keep the test fast; still 3 levels deep
      return c;
    }()
                          : mixture_mlp_config(2);
    DenoiserNet net = build_net(cfg, 17);
    Rng rng(71);
    for (const auto& [id, c] : cfg.tap_spec) {
      Tensor& g = net.param_values[std::size_t(net.param_index("gain_" + id))];
      for (std::int64_t i = 0; i < g.numel(); ++i) g.data()[i] = 2.0 * rng.normal();
    }
    Tensor x = unet ? randn_tensor({2, 1, 16, 16}, 100) : randn_tensor({2, 2}, 100);
    auto plain = score_forward(net, x, Injection{});
    Injection inj;
    inj.enabled = true;
    inj.target = plain.phi;  // [N, D] — each row injects its own features
    auto injected = score_forward(net, x, inj);
    CHECK(std::memcmp(plain.noise_estimate.data(), injected.noise_estimate.data(),
                      sizeof(double) * std::size_t(x.numel())) == 0);
  }
}

TEST_CASE("projection property: unit gains pin post-injection means to the target") {
  DenoiserNet net = build_net(desk_unet_config(), 23);  // gains are 1.0 at init
  Tensor x = randn_tensor({2, 1, 32, 32}, 51);
  Tensor target = randn_tensor({std::int64_t(352)}, 52);

  TapeT<double> tape;
  NetPassT<double> pass(net, tape, false);
  std::vector<VarT<double>> tvars;
  for (auto& part : split_features(net.config, target, 2))
    tvars.push_back(tape.constant(std::move(part)));
  auto out = pass.run_injected(tape.constant(x), tvars);

  REQUIRE(out.injected_layers.size() == 7);
  std::int64_t off = 0;
  for (std::size_t li = 0; li < out.injected_layers.size(); ++li) {
    Tensor means = plain_means(out.injected_layers[li].value());
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t c = 0; c < means.dim(1); ++c)
        CHECK(means.at(n, c) == doctest::Approx(target.data()[off + c]).epsilon(1e-10));
    off += means.dim(1);
  }
}

TEST_CASE("injection with a [D] target broadcasts across the batch") {
  DenoiserNet net = build_net(mixture_mlp_config(2), 31);
  Tensor x = randn_tensor({3, 2}, 61);
  Tensor target_vec = randn_tensor({std::int64_t(256)}, 62);

  Injection shared;
  shared.enabled = true;
  shared.target = target_vec;
  auto a = score_forward(net, x, shared);

  Tensor tiled({3, 256});
  for (int n = 0; n < 3; ++n)
    std::copy(target_vec.data(), target_vec.data() + 256, tiled.data() + n * 256);
  Injection per_row;
  per_row.enabled = true;
  per_row.target = tiled;
  auto b = score_forward(net, x, per_row);
  CHECK(std::memcmp(a.noise_estimate.data(), b.noise_estimate.data(),
                    sizeof(double) * std::size_t(x.numel())) == 0);
}

TEST_CASE("injection layout mismatches are rejected") {
  DenoiserNet net = build_net(mixture_mlp_config(2), 1);
  Tensor x = randn_tensor({2, 2}, 1);
  Injection inj;
  inj.enabled = true;
  inj.target = randn_tensor({std::int64_t(255)}, 2);  // wrong D
  CHECK_THROWS_AS(score_forward(net, x, inj), std::invalid_argument);
  inj.target = randn_tensor({3, 256}, 2);  // wrong batch
  CHECK_THROWS_AS(score_forward(net, x, inj), std::invalid_argument);
}

TEST_CASE("gradients flow through both passes of an injected forward") {
  // conditioning pass phi(x_ref) feeds the injected pass; finite differences
  // on sampled coordinates of every parameter must match the tape gradients.
  ArchConfig cfg;
  cfg.kind = ArchConfig::Kind::Mlp;
  cfg.widths = {2, 6, 6, 6, 2};
  cfg.tap_spec = {{"h2", 6}};
  DenoiserNet net = build_net(cfg, 77);
  Tensor x = randn_tensor({3, 2}, 81);
  Tensor x_ref = randn_tensor({3, 2}, 82);

  auto loss_value = [&](const DenoiserNetT<double>& n) {
    TapeT<double> tape;
    NetPassT<double> pass(n, tape, false);
    auto ref = pass.run(tape.constant(x_ref));
    auto inj = pass.run_injected(tape.constant(x), ref.phi_layers);
    return squared_norm(inj.output).value()[0];
  };

  TapeT<double> tape;
  NetPassT<double> pass(net, tape, true);
  auto ref = pass.run(tape.constant(x_ref));
  auto inj = pass.run_injected(tape.constant(x), ref.phi_layers);
  auto loss = squared_norm(inj.output);
  tape.backward(loss);

  Rng pick(99);
  const double eps = 1e-5;
  for (std::size_t pi = 0; pi < net.param_values.size(); ++pi) {
    Tensor& p = net.param_values[pi];
    const Tensor& g = pass.param_vars()[pi].grad();
    for (int probe = 0; probe < 3; ++probe) {
      std::int64_t j = std::int64_t(pick.uniform_int(std::uint64_t(p.numel())));
      double keep = p.data()[j];
      p.data()[j] = keep + eps;
      double up = loss_value(net);
      p.data()[j] = keep - eps;
      double down = loss_value(net);
      p.data()[j] = keep;
      double fd = (up - down) / (2 * eps);
      double scale = std::max({1.0, std::abs(fd), std::abs(g[j])});
      CHECK(std::abs(fd - g[j]) / scale < 1e-5);
    }
  }
}

TEST_CASE("gradients flow through an injected unet pass") {
  ArchConfig cfg;
  cfg.kind = ArchConfig::Kind::Unet;
  cfg.n_levels = 1;
  cfg.base_channels = 2;
  cfg.convs_per_encoder_block = 1;
  cfg.convs_per_decoder_block = 1;
  cfg.input_size = 4;
  cfg.tap_spec = {{"enc1", 2}, {"mid", 4}, {"dec1", 2}};
  DenoiserNet net = build_net(cfg, 13);
  Tensor x = randn_tensor({2, 1, 4, 4}, 14);
  Tensor x_ref = randn_tensor({2, 1, 4, 4}, 15);

  auto loss_value = [&](const DenoiserNetT<double>& n) {
    TapeT<double> tape;
    NetPassT<double> pass(n, tape, false);
    auto ref = pass.run(tape.constant(x_ref));
    auto inj = pass.run_injected(tape.constant(x), ref.phi_layers);
    return squared_norm(inj.output).value()[0];
  };

  TapeT<double> tape;
  NetPassT<double> pass(net, tape, true);
  auto ref = pass.run(tape.constant(x_ref));
  auto inj = pass.run_injected(tape.constant(x), ref.phi_layers);
  auto loss = squared_norm(inj.output);
  tape.backward(loss);

  Rng pick(7);
  const double eps = 1e-5;
  for (std::size_t pi = 0; pi < net.param_values.size(); ++pi) {
    Tensor& p = net.param_values[pi];
    const Tensor& g = pass.param_vars()[pi].grad();
    for (int probe = 0; probe < 2; ++probe) {
      std::int64_t j = std::int64_t(pick.uniform_int(std::uint64_t(p.numel())));
      double keep = p.data()[j];
      p.data()[j] = keep + eps;
      double up = loss_value(net);
      p.data()[j] = keep - eps;
      double down = loss_value(net);
      p.data()[j] = keep;
      double fd = (up - down) / (2 * eps);
      double scale = std::max({1.0, std::abs(fd), std::abs(g[j])});
      CHECK(std::abs(fd - g[j]) / scale < 1e-5);
    }
  }
}

TEST_CASE("periodic padding makes features invariant to cyclic shifts") {
  ArchConfig cfg = desk_unet_config();
  cfg.input_size = 16;
  ArchConfig periodic = cfg;
  periodic.pad = PadMode::Periodic;

  // shift by multiples of 2^n_levels so pooling grids stay aligned
  const int dy = 8, dx = 8;
  Tensor x = randn_tensor({1, 1, 16, 16}, 3);
  Tensor shifted({1, 1, 16, 16});
  for (int h = 0; h < 16; ++h)
    for (int w = 0; w < 16; ++w)
      shifted.at(0, 0, (h + dy) % 16, (w + dx) % 16) = x.at(0, 0, h, w);

  DenoiserNet net_p = build_net(periodic, 19);
  Tensor phi_a = extract_features(net_p, x);
  Tensor phi_b = extract_features(net_p, shifted);
  double max_rel = 0;
  for (std::int64_t i = 0; i < phi_a.numel(); ++i) {
    double scale = std::max(1.0, std::abs(phi_a.data()[i]));
    max_rel = std::max(max_rel, std::abs(phi_a.data()[i] - phi_b.data()[i]) / scale);
  }
  CHECK(max_rel < 1e-12);

  // zero padding sees the boundary move, so features must differ
  DenoiserNet net_z = build_net(cfg, 19);
  Tensor za = extract_features(net_z, x);
  Tensor zb = extract_features(net_z, shifted);
  double diff = 0;
  for (std::int64_t i = 0; i < za.numel(); ++i)
    diff = std::max(diff, std::abs(za.data()[i] - zb.data()[i]));
  CHECK(diff > 1e-6);
}

TEST_CASE("zero input through a zero-bias relu net gives a zero feature vector") {
  ArchConfig cfg = mixture_mlp_config(2);
  DenoiserNet net = build_net(cfg, 41);  // biases are zero at init
  Tensor x = Tensor::zeros({2, 2});
  Tensor phi = extract_features(net, x);
  CHECK((phi.array() == 0.0).all());
}

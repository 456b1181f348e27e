#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fgsd/autodiff.h"
#include "fgsd/rng.h"
#include "fgsd/tensor.h"

// Denoiser networks with feature taps and projected-score injection. A net is
// blind (noise level is never an input) and predicts the noise sigma*z; the
// sampler-facing "weighted score" is the negation, an estimate of
// sigma^2 * grad log p_sigma = xhat - x_sigma.
//
// Feature taps: at designated blocks the per-channel spatial means are
// recorded (their concatenation is the feature vector phi). When an injection
// target is supplied, tapped activations a are shifted by
// g (.) (phi_target - mean(a)), broadcast over space, with per-channel learned
// gains g initialized at 1.

namespace fgsd {

struct ArchConfig {
  enum class Kind { Mlp, Unet };
  Kind kind = Kind::Unet;

  // unet fields
  int n_levels = 3;
  int base_channels = 16;
  int channel_growth = 2;
  int convs_per_encoder_block = 2;
  int convs_per_decoder_block = 4;
  int kernel = 3;
  bool skip_connections = true;
  int in_channels = 1;
  int input_size = 32;
  PadMode pad = PadMode::Zero;

  // mlp fields: widths[0] = input dim, widths.back() = output dim
  std::vector<int> widths;

  // ordered (layer-id, channel-count) taps; ids follow builder traversal order
  std::vector<std::pair<std::string, int>> tap_spec;

  int feature_dim() const {
    int d = 0;
    for (const auto& [id, c] : tap_spec) d += c;
    return d;
  }

  // channels produced by each unet block, in traversal order enc1..encN, mid,
  // dec1..decN (dec1 is the deepest decoder block)
  int enc_channels(int i) const {  // i in [1, n_levels]
    int c = base_channels;
    for (int k = 1; k < i; ++k) c *= channel_growth;
    return c;
  }
  int mid_channels() const { return enc_channels(n_levels) * channel_growth; }
  int dec_channels(int i) const { return enc_channels(n_levels - i + 1); }

  void validate() const {
    if (kind == Kind::Mlp) {
      if (widths.size() < 3)
        throw std::invalid_argument("ArchConfig: mlp needs at least one hidden layer");
      for (int w : widths)
        if (w <= 0) throw std::invalid_argument("ArchConfig: non-positive mlp width");
      for (const auto& [id, c] : tap_spec) {
        int hidden = mlp_hidden_index(id);
        if (hidden < 1 || hidden + 1 >= int(widths.size()))
          throw std::invalid_argument("ArchConfig: unknown mlp tap layer '" + id + "'");
        if (c != widths[std::size_t(hidden)])
          throw std::invalid_argument("ArchConfig: tap '" + id + "' channel count " +
                                      std::to_string(c) + " != width " +
                                      std::to_string(widths[std::size_t(hidden)]));
      }
    } else {
      if (n_levels < 1 || base_channels < 1 || channel_growth < 1 || in_channels < 1)
        throw std::invalid_argument("ArchConfig: non-positive unet dimension");
      if (convs_per_encoder_block < 1 || convs_per_decoder_block < 1)
        throw std::invalid_argument("ArchConfig: blocks need at least one conv");
      if (kernel < 1 || kernel % 2 == 0)
        throw std::invalid_argument("ArchConfig: kernel must be odd");
      int div = 1;
      for (int k = 0; k < n_levels; ++k) div *= 2;
      if (input_size < div || input_size % div != 0)
        throw std::invalid_argument("ArchConfig: input size " + std::to_string(input_size) +
                                    " not divisible by 2^" + std::to_string(n_levels));
      for (const auto& [id, c] : tap_spec) {
        int expect = unet_block_channels(id);
        if (c != expect)
          throw std::invalid_argument("ArchConfig: tap '" + id + "' channel count " +
                                      std::to_string(c) + " != block width " +
                                      std::to_string(expect));
      }
    }
    if (tap_spec.empty() || feature_dim() <= 0)
      throw std::invalid_argument("ArchConfig: at least one feature tap is required");
    // taps must appear in traversal order (enc1..encN, mid, dec1..decN / h1..hK)
    auto order = traversal_order();
    std::size_t cursor = 0;
    for (const auto& [id, c] : tap_spec) {
      while (cursor < order.size() && order[cursor] != id) ++cursor;
      if (cursor == order.size())
        throw std::invalid_argument("ArchConfig: tap '" + id +
                                    "' out of traversal order or duplicated");
      ++cursor;
    }
  }

  std::vector<std::string> traversal_order() const {
    std::vector<std::string> order;
    if (kind == Kind::Mlp) {
      for (std::size_t l = 1; l + 1 < widths.size(); ++l)
        order.push_back("h" + std::to_string(l));
    } else {
      for (int i = 1; i <= n_levels; ++i) order.push_back("enc" + std::to_string(i));
      order.push_back("mid");
      for (int i = 1; i <= n_levels; ++i) order.push_back("dec" + std::to_string(i));
    }
    return order;
  }

  // "h1".."hK" -> hidden index (1-based position in widths); 0 if malformed
  static int mlp_hidden_index(const std::string& id) {
    if (id.size() < 2 || id[0] != 'h') return 0;
    int v = 0;
    for (std::size_t i = 1; i < id.size(); ++i) {
      if (id[i] < '0' || id[i] > '9') return 0;
      v = v * 10 + (id[i] - '0');
    }
    return v;
  }

  int unet_block_channels(const std::string& id) const {
    auto num = [&](std::size_t prefix) {
      int v = 0;
      for (std::size_t i = prefix; i < id.size(); ++i) {
        if (id[i] < '0' || id[i] > '9') return 0;
        v = v * 10 + (id[i] - '0');
      }
      return v;
    };
    if (id == "mid") return mid_channels();
    if (id.rfind("enc", 0) == 0) {
      int i = num(3);
      if (i >= 1 && i <= n_levels) return enc_channels(i);
    }
    if (id.rfind("dec", 0) == 0) {
      int i = num(3);
      if (i >= 1 && i <= n_levels) return dec_channels(i);
    }
    throw std::invalid_argument("ArchConfig: unknown unet tap layer '" + id + "'");
  }
};

// Desk-scale UNet: 3 levels, base 16, growth x2, 32x32 inputs, taps at the
// last conv of all 7 blocks -> D = 16+32+64+128+64+32+16 = 352.
inline ArchConfig desk_unet_config() {
  ArchConfig c;
  c.kind = ArchConfig::Kind::Unet;
  c.tap_spec = {{"enc1", 16}, {"enc2", 32}, {"enc3", 64}, {"mid", 128},
                {"dec1", 64}, {"dec2", 32}, {"dec3", 16}};
  return c;
}

// Full-scale configuration: base 64 on 80x80 inputs. Feature dimension 1344 =
// 64+128+256+512+256+128 — the final decoder block is untapped (its statistics
// are essentially the output's); this is the only six-tap assignment of the
// doubling ladder that yields 1344.
inline ArchConfig full_scale_unet_config() {
  ArchConfig c;
  c.kind = ArchConfig::Kind::Unet;
  c.base_channels = 64;
  c.input_size = 80;
  c.tap_spec = {{"enc1", 64},  {"enc2", 128}, {"enc3", 256},
                {"mid", 512},  {"dec1", 256}, {"dec2", 128}};
  return c;
}

// MLP for the Gaussian-mixture experiments: widths [d,256,256,256,d], feature
// tap at the middle hidden layer (D = 256).
inline ArchConfig mixture_mlp_config(int d) {
  ArchConfig c;
  c.kind = ArchConfig::Kind::Mlp;
  c.widths = {d, 256, 256, 256, d};
  c.tap_spec = {{"h2", 256}};
  return c;
}

namespace detail_net {

struct ParamSpec {
  std::string name;
  Shape shape;
  enum class Init { HeNormal, Zero, One } init;
};

struct ConvUnit {
  std::string wname, bname, gname, betaname;  // gname/betaname empty => no norm
  int cin = 0, cout = 0;
};

struct BlockPlan {
  std::string id;
  std::vector<ConvUnit> convs;
  int out_channels = 0;
};

struct UnetPlan {
  std::vector<BlockPlan> enc;
  BlockPlan mid;
  std::vector<BlockPlan> dec;
  ConvUnit out;
};

inline UnetPlan make_unet_plan(const ArchConfig& cfg) {
  UnetPlan plan;
  auto block = [&](const std::string& id, int cin, int cout, int n_convs) {
    BlockPlan b;
    b.id = id;
    b.out_channels = cout;
    for (int j = 0; j < n_convs; ++j) {
      ConvUnit u;
      u.cin = j == 0 ? cin : cout;
      u.cout = cout;
      std::string stem = id + "_conv" + std::to_string(j + 1);
      u.wname = stem + "_w";
      u.bname = stem + "_b";
      u.gname = stem + "_gamma";
      u.betaname = stem + "_beta";
      b.convs.push_back(std::move(u));
    }
    return b;
  };
  int prev = cfg.in_channels;
  for (int i = 1; i <= cfg.n_levels; ++i) {
    plan.enc.push_back(block("enc" + std::to_string(i), prev, cfg.enc_channels(i),
                             cfg.convs_per_encoder_block));
    prev = cfg.enc_channels(i);
  }
  plan.mid = block("mid", prev, cfg.mid_channels(), cfg.convs_per_encoder_block);
  prev = cfg.mid_channels();
  for (int i = 1; i <= cfg.n_levels; ++i) {
    int skip = cfg.skip_connections ? cfg.enc_channels(cfg.n_levels - i + 1) : 0;
    plan.dec.push_back(block("dec" + std::to_string(i), prev + skip, cfg.dec_channels(i),
                             cfg.convs_per_decoder_block));
    prev = cfg.dec_channels(i);
  }
  plan.out.cin = prev;
  plan.out.cout = cfg.in_channels;
  plan.out.wname = "out_w";
  plan.out.bname = "out_b";
  return plan;
}

inline std::vector<ParamSpec> enumerate_params(const ArchConfig& cfg) {
  std::vector<ParamSpec> out;
  auto push_conv = [&](const ConvUnit& u, int k) {
    out.push_back({u.wname, {u.cout, u.cin, k, k}, ParamSpec::Init::HeNormal});
    out.push_back({u.bname, {u.cout}, ParamSpec::Init::Zero});
    if (!u.gname.empty()) {
      out.push_back({u.gname, {u.cout}, ParamSpec::Init::One});
      out.push_back({u.betaname, {u.cout}, ParamSpec::Init::Zero});
    }
  };
  if (cfg.kind == ArchConfig::Kind::Mlp) {
    for (std::size_t l = 0; l + 1 < cfg.widths.size(); ++l) {
      out.push_back({"w" + std::to_string(l + 1),
                     {cfg.widths[l], cfg.widths[l + 1]},
                     ParamSpec::Init::HeNormal});
      out.push_back(
          {"b" + std::to_string(l + 1), {cfg.widths[l + 1]}, ParamSpec::Init::Zero});
    }
  } else {
    UnetPlan plan = make_unet_plan(cfg);
    for (const auto& b : plan.enc)
      for (const auto& u : b.convs) push_conv(u, cfg.kernel);
    for (const auto& u : plan.mid.convs) push_conv(u, cfg.kernel);
    for (const auto& b : plan.dec)
      for (const auto& u : b.convs) push_conv(u, cfg.kernel);
    push_conv(plan.out, cfg.kernel);
  }
  for (const auto& [id, c] : cfg.tap_spec)
    out.push_back({"gain_" + id, {c}, ParamSpec::Init::One});
  return out;
}

}  // namespace detail_net

// Closed-form parameter count implied by a config (weights + biases + norm
// affines + injection gains), for cross-checking built nets.
inline std::int64_t param_count(const ArchConfig& cfg) {
  std::int64_t total = 0;
  for (const auto& p : detail_net::enumerate_params(cfg)) total += numel_of(p.shape);
  return total;
}

template <class S>
struct DenoiserNetT {
  ArchConfig config;
  std::vector<std::string> param_names;
  std::vector<TensorT<S>> param_values;

  int param_index(const std::string& name) const {
    for (std::size_t i = 0; i < param_names.size(); ++i)
      if (param_names[i] == name) return int(i);
    throw std::invalid_argument("DenoiserNet: no parameter named '" + name + "'");
  }
  const TensorT<S>& param(const std::string& name) const {
    return param_values[std::size_t(param_index(name))];
  }
  std::vector<TensorT<S>*> trainable() {
    std::vector<TensorT<S>*> out;
    out.reserve(param_values.size());
    for (auto& t : param_values) out.push_back(&t);
    return out;
  }
  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& t : param_values) n += t.numel();
    return n;
  }
  // concatenated injection gains, tap order
  TensorT<S> gains() const {
    TensorT<S> g({std::int64_t(config.feature_dim())});
    std::int64_t off = 0;
    for (const auto& [id, c] : config.tap_spec) {
      const TensorT<S>& part = param(("gain_" + id));
      std::copy(part.data(), part.data() + part.numel(), g.data() + off);
      off += part.numel();
    }
    return g;
  }
};

using DenoiserNet = DenoiserNetT<double>;

// Deterministic construction: He-normal weights, zero biases, unit norm scales
// and injection gains. Each parameter draws from its own seed substream, so
// the layout is stable under enumeration-order refactors of consumers.
template <class S = double>
DenoiserNetT<S> build_net(const ArchConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DenoiserNetT<S> net;
  net.config = cfg;
  Rng root(seed);
  auto specs = detail_net::enumerate_params(cfg);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    TensorT<S> t(specs[i].shape);
    switch (specs[i].init) {
      case detail_net::ParamSpec::Init::Zero:
        break;
      case detail_net::ParamSpec::Init::One:
        t.array() = S(1);
        break;
      case detail_net::ParamSpec::Init::HeNormal: {
        Rng sub = root.substream(i);
        // fan-in: conv [cout,cin,k,k] -> cin*k*k; linear [fin,fout] -> fin
        std::int64_t fan_in = t.rank() == 4 ? t.dim(1) * t.dim(2) * t.dim(3) : t.dim(0);
        double std_dev = std::sqrt(2.0 / double(fan_in));
        for (std::int64_t j = 0; j < t.numel(); ++j) t.data()[j] = S(std_dev * sub.normal());
        break;
      }
    }
    net.param_names.push_back(specs[i].name);
    net.param_values.push_back(std::move(t));
  }
  return net;
}

template <class S>
struct NetPassOut {
  VarT<S> output;                    // noise estimate, same shape as input
  std::vector<VarT<S>> phi_layers;   // pre-injection tap means, [N, C_L] each
  VarT<S> phi;                       // concatenation, [N, D]
  std::vector<VarT<S>> injected_layers;  // post-injection tap activations (injected runs)
};

// One or more forward passes of a net on a shared tape. Parameters are bound
// as leaves once per pass object, so gradients from several passes (e.g. a
// conditioning pass and an injected pass) accumulate into the same leaves.
template <class S>
class NetPassT {
public:
  NetPassT(const DenoiserNetT<S>& net, TapeT<S>& tape, bool trainable)
      : net_(&net), tape_(&tape) {
    vars_.reserve(net.param_values.size());
    for (const auto& t : net.param_values)
      vars_.push_back(trainable ? tape.leaf(t, true) : tape.constant(t));
  }

  const std::vector<VarT<S>>& param_vars() const { return vars_; }
  VarT<S> var(const std::string& name) const {
    return vars_[std::size_t(net_->param_index(name))];
  }

  // Plain pass: taps recorded, no injection.
  NetPassOut<S> run(VarT<S> x) { return run_impl(x, nullptr); }

  // Injected pass: target_layers holds one [N, C_L] var per tap, in tap order.
  NetPassOut<S> run_injected(VarT<S> x, const std::vector<VarT<S>>& target_layers) {
    if (target_layers.size() != net_->config.tap_spec.size())
      throw std::invalid_argument("NetPass: injection target has " +
                                  std::to_string(target_layers.size()) + " layers, net taps " +
                                  std::to_string(net_->config.tap_spec.size()));
    return run_impl(x, &target_layers);
  }

private:
  NetPassOut<S> run_impl(VarT<S> x, const std::vector<VarT<S>>* target) {
    const ArchConfig& cfg = net_->config;
    NetPassOut<S> out{VarT<S>{}, {}, VarT<S>{}};
    std::size_t tap_idx = 0;

    // Tap bookkeeping shared by both architectures. `mu_fn` produces the
    // feature slice of the current activations (computed only when tapped);
    // returns the (possibly injected) activations.
    auto process_tap = [&](const std::string& id, VarT<S> a, auto mu_fn) {
      if (tap_idx >= cfg.tap_spec.size() || cfg.tap_spec[tap_idx].first != id) return a;
      VarT<S> mu = mu_fn(a);
      out.phi_layers.push_back(mu);
      if (target) {
        VarT<S> dev = scale_channels(subtract((*target)[tap_idx], mu),
                                     var("gain_" + id));
        if (a.value().rank() == 4)
          a = add(a, broadcast_spatial(dev, a.value().dim(2), a.value().dim(3)));
        else
          a = add(a, dev);
        out.injected_layers.push_back(a);
      }
      ++tap_idx;
      return a;
    };

    if (cfg.kind == ArchConfig::Kind::Mlp) {
      VarT<S> cur = x;
      const int n_layers = int(cfg.widths.size()) - 1;
      for (int l = 1; l <= n_layers; ++l) {
        cur = linear(cur, var("w" + std::to_string(l)), var("b" + std::to_string(l)));
        if (l < n_layers) {
          cur = relu(cur);
          cur = process_tap("h" + std::to_string(l), cur, [](VarT<S> a) { return a; });
        }
      }
      out.output = cur;
    } else {
      detail_net::UnetPlan plan = detail_net::make_unet_plan(cfg);
      auto run_block = [&](const detail_net::BlockPlan& b, VarT<S> cur) {
        for (const auto& u : b.convs) {
          cur = conv2d(cur, var(u.wname), var(u.bname), cfg.pad);
          cur = relu(layer_norm(cur, var(u.gname), var(u.betaname)));
        }
        return process_tap(b.id, cur, [](VarT<S> a) { return spatial_mean(a); });
      };
      VarT<S> cur = x;
      std::vector<VarT<S>> skips;
      for (const auto& b : plan.enc) {
        cur = run_block(b, cur);
        skips.push_back(cur);
        cur = avg_downsample_2x2(cur);
      }
      cur = run_block(plan.mid, cur);
      for (std::size_t i = 0; i < plan.dec.size(); ++i) {
        cur = nearest_upsample_2x2(cur);
        if (cfg.skip_connections) cur = concat_channels(cur, skips[skips.size() - 1 - i]);
        cur = run_block(plan.dec[i], cur);
      }
      out.output = conv2d(cur, var(plan.out.wname), var(plan.out.bname), cfg.pad);
    }

    if (tap_idx != cfg.tap_spec.size())
      throw std::logic_error("NetPass: tap_spec order does not match traversal");
    out.phi = out.phi_layers[0];
    for (std::size_t i = 1; i < out.phi_layers.size(); ++i)
      out.phi = concat_channels(out.phi, out.phi_layers[i]);
    return out;
  }

  const DenoiserNetT<S>* net_;
  TapeT<S>* tape_;
  std::vector<VarT<S>> vars_;
};

// --- tensor-level inference wrappers ----------------------------------------

template <class S>
struct InjectionT {
  bool enabled = false;
  TensorT<S> target;  // [D] shared across the batch, or [N, D] per row
};

using Injection = InjectionT<double>;

// Splits a [D] or [N,D] feature tensor into per-tap [N,C_L] blocks (tiling a
// single vector across the batch).
template <class S>
std::vector<TensorT<S>> split_features(const ArchConfig& cfg, const TensorT<S>& t,
                                       std::int64_t n) {
  const std::int64_t d = cfg.feature_dim();
  bool shared = t.rank() == 1;
  if (shared ? t.dim(0) != d : (t.rank() != 2 || t.dim(1) != d || t.dim(0) != n))
    throw std::invalid_argument("split_features: target shape " + shape_str(t.shape()) +
                                " does not match D=" + std::to_string(d) + ", N=" +
                                std::to_string(n));
  std::vector<TensorT<S>> out;
  std::int64_t off = 0;
  for (const auto& [id, c] : cfg.tap_spec) {
    TensorT<S> part({n, c});
    for (std::int64_t row = 0; row < n; ++row) {
      const S* src = shared ? t.data() + off : t.data() + row * d + off;
      std::copy(src, src + c, part.data() + row * c);
    }
    out.push_back(std::move(part));
    off += c;
  }
  return out;
}

template <class S>
struct ScoreForwardOut {
  TensorT<S> noise_estimate;
  TensorT<S> phi;  // [N, D], pre-injection tap means
};

template <class S>
ScoreForwardOut<S> score_forward(const DenoiserNetT<S>& net, const TensorT<S>& x,
                                 const InjectionT<S>& injection) {
  TapeT<S> tape;
  NetPassT<S> pass(net, tape, /*trainable=*/false);
  VarT<S> xv = tape.constant(x);
  NetPassOut<S> o;
  if (injection.enabled) {
    std::vector<VarT<S>> target;
    for (auto& part : split_features(net.config, injection.target, x.dim(0)))
      target.push_back(tape.constant(std::move(part)));
    o = pass.run_injected(xv, target);
  } else {
    o = pass.run(xv);
  }
  return {o.output.value(), o.phi.value()};
}

// Feature extraction is an injection-free pass.
template <class S>
TensorT<S> extract_features(const DenoiserNetT<S>& net, const TensorT<S>& x) {
  return score_forward(net, x, InjectionT<S>{}).phi;
}

// The net predicts sigma*z; its negation estimates xhat - x_sigma, the
// sigma^2-weighted score the samplers consume.
template <class S>
TensorT<S> weighted_score(const TensorT<S>& noise_estimate) {
  TensorT<S> out(noise_estimate.shape());
  out.array() = -noise_estimate.array();
  return out;
}

}  // namespace fgsd

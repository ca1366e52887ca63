#include "modac/nets.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace modac::nets {

using ad::Tensor;

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

const char* role_name(Role r) {
  switch (r) {
    case Role::kManager: return "manager";
    case Role::kOptionPolicy: return "option_policy";
    case Role::kOptionReward: return "option_reward";
    case Role::kOptionTermination: return "option_termination";
    case Role::kBaseline: return "baseline";
  }
  return "?";
}

Role role_from_name(const std::string& s) {
  for (Role r : {Role::kManager, Role::kOptionPolicy, Role::kOptionReward,
                 Role::kOptionTermination, Role::kBaseline})
    if (s == role_name(r)) return r;
  throw std::runtime_error("unknown role: " + s);
}

void ParamSet::add(const std::string& name, Tensor t) {
  if (has(name)) throw std::runtime_error("duplicate parameter name: " + name);
  entries.emplace_back(name, std::move(t));
}

const Tensor& ParamSet::at(const std::string& name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return t;
  throw std::runtime_error("no parameter named " + name);
}

bool ParamSet::has(const std::string& name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return true;
  return false;
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries.size());
  for (const auto& [n, t] : entries) out.push_back(t);
  return out;
}

ParamSet ParamSet::with_tensors(std::span<const Tensor> ts) const {
  if (ts.size() != entries.size())
    throw std::runtime_error("with_tensors: count mismatch");
  ParamSet out;
  out.role = role;
  for (size_t i = 0; i < entries.size(); ++i) {
    if (ts[i].shape() != entries[i].second.shape())
      throw ad::ShapeError("with_tensors: shape change for " + entries[i].first);
    out.entries.emplace_back(entries[i].first, ts[i]);
  }
  return out;
}

ParamSet ParamSet::detached() const {
  ParamSet out;
  out.role = role;
  for (const auto& [n, t] : entries) {
    out.entries.emplace_back(
        n, Tensor::param(t.shape(), {t.data().begin(), t.data().end()}));
  }
  return out;
}

int ParamSet::num_params() const {
  int n = 0;
  for (const auto& [name, t] : entries) n += t.size();
  return n;
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> out;
  out.reserve(static_cast<size_t>(num_params()));
  for (const auto& [n, t] : entries) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

void ParamSet::unflatten(std::span<const double> flat) {
  if (static_cast<int>(flat.size()) != num_params())
    throw std::runtime_error("unflatten: size mismatch");
  size_t off = 0;
  for (auto& [n, t] : entries) {
    auto d = t.mutable_data();
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + d.size()), d.begin());
    off += d.size();
  }
}

std::uint64_t param_hash(const ParamSet& p) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : p.entries) {
    mix(name.data(), name.size());
    mix(t.data().data(), t.data().size_bytes());
  }
  return h;
}

// ---- construction ----

int NetworkSpec::torso_out_dim(int in_channels) const {
  if (torso == Torso::kMlp)
    return mlp_hidden.empty() ? grid_h * grid_w * in_channels : mlp_hidden.back();
  (void)in_channels;
  const int h = grid_h - 2 * (conv_kernel - 1);
  const int w = grid_w - 2 * (conv_kernel - 1);
  if (h <= 0 || w <= 0) throw ad::ShapeError("conv torso: grid too small for two valid convs");
  return dense;
}

int NetworkSpec::manager_feature_dim() const {
  int d = torso_out_dim(manager_in_channels());
  if (task_encoding == TaskEncoding::kOneHot) d += task_embed;
  return d;
}

namespace {

Tensor init_weight(ad::Shape shape, int fan_in, rng::Stream& rng) {
  std::vector<double> v(static_cast<size_t>(ad::shape_size(shape)));
  const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& x : v) x = rng.truncated_normal(stddev);
  return Tensor::param(std::move(shape), std::move(v));
}

Tensor init_bias(int n) {
  return Tensor::param({n}, std::vector<double>(static_cast<size_t>(n), 0.0));
}

void add_torso_params(ParamSet& p, const NetworkSpec& s, int in_channels, rng::Stream& rng) {
  if (s.torso == Torso::kConv2) {
    const int k = s.conv_kernel, f = s.conv_filters;
    p.add("conv1.w", init_weight({f, in_channels, k, k}, in_channels * k * k, rng));
    p.add("conv1.b", init_bias(f));
    p.add("conv2.w", init_weight({f, f, k, k}, f * k * k, rng));
    p.add("conv2.b", init_bias(f));
    const int h = s.grid_h - 2 * (k - 1), w = s.grid_w - 2 * (k - 1);
    p.add("dense.w", init_weight({h * w * f, s.dense}, h * w * f, rng));
    p.add("dense.b", init_bias(s.dense));
  } else {
    int in = s.grid_h * s.grid_w * in_channels;
    for (size_t i = 0; i < s.mlp_hidden.size(); ++i) {
      const std::string tag = "fc" + std::to_string(i + 1);
      p.add(tag + ".w", init_weight({in, s.mlp_hidden[i]}, in, rng));
      p.add(tag + ".b", init_bias(s.mlp_hidden[i]));
      in = s.mlp_hidden[i];
    }
  }
}

Tensor torso_forward(const ParamSet& p, const NetworkSpec& s, const Tensor& obs) {
  if (s.torso == Torso::kConv2) {
    Tensor h = ad::relu(ad::conv2d(obs, p.at("conv1.w"), p.at("conv1.b"), ad::Padding::kValid));
    h = ad::relu(ad::conv2d(h, p.at("conv2.w"), p.at("conv2.b"), ad::Padding::kValid));
    h = ad::reshape(h, {h.dim(0), h.dim(1) * h.dim(2) * h.dim(3)});
    return ad::relu(ad::add_row(ad::matmul(h, p.at("dense.w")), p.at("dense.b")));
  }
  Tensor h = ad::reshape(obs, {obs.dim(0), obs.dim(1) * obs.dim(2) * obs.dim(3)});
  for (size_t i = 0; i < s.mlp_hidden.size(); ++i) {
    const std::string tag = "fc" + std::to_string(i + 1);
    h = ad::relu(ad::add_row(ad::matmul(h, p.at(tag + ".w")), p.at(tag + ".b")));
  }
  return h;
}

void check_obs(const NetworkSpec& s, const Tensor& obs, int channels, const char* who) {
  if (obs.rank() != 4 || obs.dim(1) != s.grid_h || obs.dim(2) != s.grid_w ||
      obs.dim(3) != channels) {
    std::ostringstream os;
    os << who << ": observation " << ad::shape_str(obs.shape()) << " does not match ["
       << "B," << s.grid_h << "," << s.grid_w << "," << channels << "]";
    throw ad::ShapeError(os.str());
  }
}

}  // namespace

ParamSet make_manager_params(const NetworkSpec& s, rng::Stream& rng) {
  ParamSet p;
  p.role = Role::kManager;
  add_torso_params(p, s, s.manager_in_channels(), rng);
  if (s.task_encoding == TaskEncoding::kOneHot) {
    if (s.num_tasks <= 0) throw std::runtime_error("one-hot task encoding needs num_tasks");
    p.add("embed.w", init_weight({s.num_tasks, s.task_embed}, s.num_tasks, rng));
  }
  const int d = s.manager_feature_dim();
  const int choices = s.num_options + s.num_actions;
  p.add("pi.w", init_weight({d, choices}, d, rng));
  p.add("pi.b", init_bias(choices));
  p.add("v.w", init_weight({d, 1}, d, rng));
  p.add("v.b", init_bias(1));
  return p;
}

ParamSet make_option_policy_params(const NetworkSpec& s, rng::Stream& rng) {
  ParamSet p;
  p.role = Role::kOptionPolicy;
  add_torso_params(p, s, s.option_in_channels(), rng);
  const int d = s.torso_out_dim(s.option_in_channels());
  for (int i = 0; i < s.num_options; ++i) {
    const std::string tag = std::to_string(i);
    p.add("pi" + tag + ".w", init_weight({d, s.num_actions}, d, rng));
    p.add("pi" + tag + ".b", init_bias(s.num_actions));
    p.add("v" + tag + ".w", init_weight({d, 1}, d, rng));
    p.add("v" + tag + ".b", init_bias(1));
  }
  return p;
}

ParamSet make_option_reward_params(const NetworkSpec& s, rng::Stream& rng) {
  ParamSet p;
  p.role = Role::kOptionReward;
  add_torso_params(p, s, s.option_in_channels(), rng);
  const int d = s.torso_out_dim(s.option_in_channels());
  for (int i = 0; i < s.num_options; ++i) {
    const std::string tag = std::to_string(i);
    p.add("r" + tag + ".w", init_weight({d, s.num_actions}, d, rng));
    p.add("r" + tag + ".b", init_bias(s.num_actions));
  }
  return p;
}

ParamSet make_option_termination_params(const NetworkSpec& s, rng::Stream& rng) {
  ParamSet p;
  p.role = Role::kOptionTermination;
  add_torso_params(p, s, s.option_in_channels(), rng);
  const int d = s.torso_out_dim(s.option_in_channels());
  for (int i = 0; i < s.num_options; ++i) {
    const std::string tag = std::to_string(i);
    p.add("beta" + tag + ".w", init_weight({d, 1}, d, rng));
    p.add("beta" + tag + ".b", init_bias(1));
  }
  return p;
}

Tensor torso_features(const ParamSet& p, const NetworkSpec& s, const OptionView& v) {
  check_obs(s, v.obs, s.option_in_channels(), "torso_features");
  return torso_forward(p, s, v.obs);
}

Tensor manager_features(const ParamSet& p, const NetworkSpec& s, const ManagerView& v) {
  check_obs(s, v.obs, s.manager_in_channels(), "manager_features");
  Tensor feats = torso_forward(p, s, v.obs);
  if (s.task_encoding == TaskEncoding::kOneHot) {
    if (static_cast<int>(v.task_ids.size()) != v.batch())
      throw ad::ShapeError("manager_features: task id count != batch");
    Tensor emb = ad::take_rows(p.at("embed.w"), v.task_ids);
    const Tensor parts[2] = {feats, emb};
    feats = ad::concat(parts, 1);
  }
  return feats;
}

Tensor option_policy_head(const ParamSet& p, const NetworkSpec&, const Tensor& feats, int head) {
  const std::string tag = std::to_string(head);
  return ad::add_row(ad::matmul(feats, p.at("pi" + tag + ".w")), p.at("pi" + tag + ".b"));
}

Tensor option_value_head(const ParamSet& p, const NetworkSpec&, const Tensor& feats, int head) {
  const std::string tag = std::to_string(head);
  return ad::reshape(
      ad::add_row(ad::matmul(feats, p.at("v" + tag + ".w")), p.at("v" + tag + ".b")),
      {feats.dim(0)});
}

Tensor option_reward_head(const ParamSet& p, const NetworkSpec&, const Tensor& feats, int head) {
  const std::string tag = std::to_string(head);
  return ad::arctan(
      ad::add_row(ad::matmul(feats, p.at("r" + tag + ".w")), p.at("r" + tag + ".b")));
}

Tensor option_termination_head(const ParamSet& p, const NetworkSpec&, const Tensor& feats,
                               int head) {
  const std::string tag = std::to_string(head);
  return ad::reshape(
      ad::sigmoid(ad::add_row(ad::matmul(feats, p.at("beta" + tag + ".w")),
                              p.at("beta" + tag + ".b"))),
      {feats.dim(0)});
}

Tensor manager_policy_head(const ParamSet& p, const Tensor& feats) {
  return ad::add_row(ad::matmul(feats, p.at("pi.w")), p.at("pi.b"));
}

Tensor manager_value_head(const ParamSet& p, const Tensor& feats) {
  return ad::reshape(ad::add_row(ad::matmul(feats, p.at("v.w")), p.at("v.b")),
                     {feats.dim(0)});
}

PolicyValue manager_forward(const ParamSet& p, const NetworkSpec& s, const ManagerView& v) {
  Tensor feats = manager_features(p, s, v);
  return {manager_policy_head(p, feats), manager_value_head(p, feats)};
}

OptionHeads option_forward(const ParamSet& p, const NetworkSpec& s, const OptionView& v) {
  Tensor feats = torso_features(p, s, v);
  OptionHeads out;
  for (int i = 0; i < s.num_options; ++i) {
    out.logits.push_back(option_policy_head(p, s, feats, i));
    out.values.push_back(option_value_head(p, s, feats, i));
  }
  return out;
}

std::vector<Tensor> option_reward_forward(const ParamSet& p, const NetworkSpec& s,
                                          const OptionView& v) {
  Tensor feats = torso_features(p, s, v);
  std::vector<Tensor> out;
  for (int i = 0; i < s.num_options; ++i) out.push_back(option_reward_head(p, s, feats, i));
  return out;
}

std::vector<Tensor> option_termination_forward(const ParamSet& p, const NetworkSpec& s,
                                               const OptionView& v) {
  Tensor feats = torso_features(p, s, v);
  std::vector<Tensor> out;
  for (int i = 0; i < s.num_options; ++i)
    out.push_back(option_termination_head(p, s, feats, i));
  return out;
}

// ---- RMSProp ----

RmsPropState RmsPropState::init(const ParamSet& p) {
  RmsPropState st;
  for (const auto& [n, t] : p.entries) {
    st.acc.emplace_back(static_cast<size_t>(t.size()), 0.0);
    st.mom.emplace_back(static_cast<size_t>(t.size()), 0.0);
  }
  return st;
}

ParamSet rmsprop_step(const ParamSet& params, std::span<const Tensor> grads,
                      RmsPropState& state, const RmsPropConfig& cfg,
                      const std::vector<std::vector<double>>* step_scale_override,
                      std::vector<std::vector<double>>* step_scale_out) {
  const size_t n = params.entries.size();
  if (grads.size() != n || state.acc.size() != n)
    throw std::runtime_error("rmsprop_step: grads/state do not match params");
  for (size_t i = 0; i < n; ++i) {
    if (grads[i].shape() != params.entries[i].second.shape())
      throw ad::ShapeError("rmsprop_step: grad shape mismatch for " + params.entries[i].first);
    for (double v : grads[i].data())
      if (!std::isfinite(v))
        throw ad::NumericError("rmsprop_step: non-finite gradient for parameter " +
                               params.entries[i].first);
  }

  double scale = 1.0;
  if (cfg.clip_norm > 0.0) {
    const double norm = ad::l2_norm(grads);
    if (norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
  }

  bool differentiable = false;
  for (const auto& g : grads)
    if (g.requires_grad()) differentiable = true;
  if (differentiable && cfg.momentum != 0.0)
    throw std::runtime_error("rmsprop_step: momentum unsupported on the differentiable path");

  std::vector<Tensor> stepped;
  stepped.reserve(n);
  if (step_scale_out) step_scale_out->assign(n, {});
  for (size_t i = 0; i < n; ++i) {
    const auto& p = params.entries[i].second;
    auto g = grads[i].data();
    auto& acc = state.acc[i];
    std::vector<double> mult(acc.size());  // clip_factor / sqrt(acc + eps)
    for (size_t j = 0; j < acc.size(); ++j) {
      const double gc = g[j] * scale;
      acc[j] = cfg.decay * acc[j] + (1.0 - cfg.decay) * gc * gc;
      mult[j] = scale / std::sqrt(acc[j] + cfg.epsilon);
    }
    if (step_scale_override) mult = (*step_scale_override)[i];
    if (step_scale_out) (*step_scale_out)[i] = mult;

    if (differentiable) {
      std::vector<double> sc(mult.size());
      for (size_t j = 0; j < sc.size(); ++j) sc[j] = cfg.lr * mult[j];
      Tensor step = ad::mul(grads[i], Tensor::from(p.shape(), std::move(sc)));
      stepped.push_back(ad::sub(p, step));
    } else {
      std::vector<double> out(p.data().begin(), p.data().end());
      auto& mom = state.mom[i];
      for (size_t j = 0; j < out.size(); ++j) {
        const double step = cfg.lr * g[j] * mult[j];
        if (cfg.momentum != 0.0) {
          mom[j] = cfg.momentum * mom[j] + step;
          out[j] -= mom[j];
        } else {
          out[j] -= step;
        }
      }
      stepped.push_back(Tensor::param(p.shape(), std::move(out)));
    }
  }
  return params.with_tensors(stepped);
}

// ---- checkpoints ----

const ParamSet* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, p] : sets)
    if (n == name) return &p;
  return nullptr;
}

void save_checkpoint(const std::string& dir, const Checkpoint& ckpt) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = ckpt.format;
  manifest["sets"] = nlohmann::json::array();
  for (const auto& [name, pset] : ckpt.sets) {
    nlohmann::json js;
    js["name"] = name;
    js["role"] = role_name(pset.role);
    js["file"] = name + ".bin";
    js["dtype"] = "f64le";
    js["params"] = nlohmann::json::array();
    std::ofstream bin(fs::path(dir) / (name + ".bin"), std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write checkpoint blob in " + dir);
    std::int64_t offset = 0;
    for (const auto& [pname, t] : pset.entries) {
      nlohmann::json pj;
      pj["name"] = pname;
      pj["shape"] = t.shape();
      pj["offset"] = offset;
      js["params"].push_back(pj);
      bin.write(reinterpret_cast<const char*>(t.data().data()),
                static_cast<std::streamsize>(t.data().size_bytes()));
      offset += static_cast<std::int64_t>(t.data().size_bytes());
    }
    manifest["sets"].push_back(js);
  }
  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("no checkpoint manifest in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(mf);
  Checkpoint ckpt;
  ckpt.format = manifest.at("format").get<int>();
  if (ckpt.format != 1)
    throw std::runtime_error("unsupported checkpoint format " + std::to_string(ckpt.format));
  for (const auto& js : manifest.at("sets")) {
    ParamSet pset;
    pset.role = role_from_name(js.at("role").get<std::string>());
    std::ifstream bin(fs::path(dir) / js.at("file").get<std::string>(), std::ios::binary);
    if (!bin)
      throw std::runtime_error("missing checkpoint blob for " +
                               js.at("name").get<std::string>());
    for (const auto& pj : js.at("params")) {
      ad::Shape shape = pj.at("shape").get<ad::Shape>();
      std::vector<double> data(static_cast<size_t>(ad::shape_size(shape)));
      bin.seekg(pj.at("offset").get<std::int64_t>());
      bin.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(double)));
      if (!bin) throw std::runtime_error("truncated checkpoint blob in " + dir);
      pset.add(pj.at("name").get<std::string>(),
               Tensor::param(std::move(shape), std::move(data)));
    }
    ckpt.sets.emplace_back(js.at("name").get<std::string>(), std::move(pset));
  }
  return ckpt;
}

}  // namespace modac::nets

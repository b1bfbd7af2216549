#include "composer/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <vector>

#include "composer/errors.hpp"
#include "composer/serialize.hpp"

namespace composer {

namespace fs = std::filesystem;

namespace {

std::string shape_token(const Shape& s) {
  if (s.empty()) return "scalar";
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_shape_token(const std::string& tok) {
  if (tok == "scalar") return {};
  Shape s;
  std::string cur;
  for (char c : tok + "x") {
    if (c == 'x') {
      s.push_back(std::stoll(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return s;
}

void save_tensor_entry(const fs::path& dir, std::ostream& manifest,
                       const std::string& name, const Tensor& t) {
  fs::path file = dir / "tensors" / (name + ".ctsr");
  save_ctsr(file, t);
  manifest << name << ' ' << shape_token(t.shape()) << " f32 "
           << sha256_file(file) << '\n';
}

Tensor tensor_from_vec(const std::vector<float>& v) {
  auto t = Tensor::zeros({int64_t(v.size())});
  std::copy(v.begin(), v.end(), t.ptr());
  return t;
}

}  // namespace

std::map<std::string, std::string> read_kv_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("malformed key=value line in " + path.string() + ": " +
                    line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

void write_kv_file(const fs::path& path,
                   const std::map<std::string, std::string>& kv) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ck) {
  fs::create_directories(dir / "tensors");
  std::ostringstream manifest;
  for (const auto& [name, t] : ck.live.tensors)
    save_tensor_entry(dir, manifest, "live." + name, t);
  for (const auto& [name, t] : ck.ema.tensors)
    save_tensor_entry(dir, manifest, "ema." + name, t);
  for (const auto& [name, v] : ck.adam.m)
    save_tensor_entry(dir, manifest, "adam_m." + name, tensor_from_vec(v));
  for (const auto& [name, v] : ck.adam.v)
    save_tensor_entry(dir, manifest, "adam_v." + name, tensor_from_vec(v));

  std::ofstream mf(dir / "manifest.txt", std::ios::trunc);
  if (!mf) throw IoError("cannot write " + (dir / "manifest.txt").string());
  mf << manifest.str();

  auto config = ck.config;
  config["step"] = std::to_string(ck.step);
  config["adam_step"] = std::to_string(ck.adam.step);
  write_kv_file(dir / "config.txt", config);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.txt");
  if (!mf) throw IoError("cannot open " + (dir / "manifest.txt").string());

  Checkpoint ck;
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, shape_tok, dtype, digest;
    if (!(ls >> name >> shape_tok >> dtype >> digest))
      throw CorruptionError("checkpoint: malformed manifest line: " + line);
    if (dtype != "f32")
      throw CorruptionError("checkpoint: unsupported dtype for " + name);
    fs::path file = dir / "tensors" / (name + ".ctsr");
    if (!fs::exists(file))
      throw CorruptionError("checkpoint: missing tensor file for " + name);
    if (sha256_file(file) != digest)
      throw CorruptionError("checkpoint: digest mismatch for tensor " + name);
    Tensor t = load_ctsr(file);
    if (t.shape() != parse_shape_token(shape_tok))
      throw CorruptionError("checkpoint: shape mismatch for tensor " + name);

    auto strip = [&](const char* prefix) {
      return name.substr(std::string(prefix).size());
    };
    if (name.rfind("live.", 0) == 0) {
      ck.live.create(strip("live."), std::move(t));
    } else if (name.rfind("ema.", 0) == 0) {
      ck.ema.create(strip("ema."), std::move(t));
    } else if (name.rfind("adam_m.", 0) == 0) {
      ck.adam.m[strip("adam_m.")] =
          std::vector<float>(t.ptr(), t.ptr() + t.numel());
    } else if (name.rfind("adam_v.", 0) == 0) {
      ck.adam.v[strip("adam_v.")] =
          std::vector<float>(t.ptr(), t.ptr() + t.numel());
    } else {
      throw CorruptionError("checkpoint: unknown tensor group in " + name);
    }
  }
  if (ck.live.tensors.empty() || ck.ema.tensors.empty())
    throw CorruptionError("checkpoint: live/ema parameter maps incomplete");

  ck.config = read_kv_file(dir / "config.txt");
  if (auto it = ck.config.find("step"); it != ck.config.end())
    ck.step = std::stoll(it->second);
  if (auto it = ck.config.find("adam_step"); it != ck.config.end())
    ck.adam.step = std::stoll(it->second);
  return ck;
}

namespace {

std::string join_list(const std::vector<int64_t>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<int64_t> parse_list(const std::string& s) {
  std::vector<int64_t> out;
  if (s.empty() || s == "none") return out;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      out.push_back(std::stoll(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

const std::string& require(const std::map<std::string, std::string>& kv,
                           const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ContractError("config: missing key " + key);
  return it->second;
}

}  // namespace

std::map<std::string, std::string> encode_unet_config(const UNetConfig& c) {
  return {
      {"unet.base_channels", std::to_string(c.base_channels)},
      {"unet.channel_mults", join_list(c.channel_mults)},
      {"unet.blocks_per_level", std::to_string(c.blocks_per_level)},
      {"unet.attention_levels", c.attention_levels.empty()
                                    ? "none"
                                    : join_list(c.attention_levels)},
      {"unet.head_channels", std::to_string(c.head_channels)},
      {"unet.model_dim", std::to_string(c.model_dim)},
      {"unet.image_size", std::to_string(c.image_size)},
      {"unet.local_channels", std::to_string(c.local_channels)},
      {"unet.norm_groups", std::to_string(c.norm_groups)},
  };
}

UNetConfig decode_unet_config(const std::map<std::string, std::string>& kv) {
  UNetConfig c;
  c.base_channels = std::stoll(require(kv, "unet.base_channels"));
  c.channel_mults = parse_list(require(kv, "unet.channel_mults"));
  c.blocks_per_level = std::stoll(require(kv, "unet.blocks_per_level"));
  c.attention_levels = parse_list(require(kv, "unet.attention_levels"));
  c.head_channels = std::stoll(require(kv, "unet.head_channels"));
  c.model_dim = std::stoll(require(kv, "unet.model_dim"));
  c.image_size = std::stoll(require(kv, "unet.image_size"));
  c.local_channels = std::stoll(require(kv, "unet.local_channels"));
  c.norm_groups = std::stoll(require(kv, "unet.norm_groups"));
  c.validate();
  return c;
}

std::map<std::string, std::string> encode_train_config(const TrainConfig& c) {
  std::ostringstream lr, b1, b2, eps, ema, wd, clip;
  lr << c.lr;
  b1 << c.adam_beta1;
  b2 << c.adam_beta2;
  eps << c.adam_eps;
  ema << c.ema_decay;
  wd << c.weight_dropout;
  clip << c.grad_clip;
  return {
      {"train.steps", std::to_string(c.steps)},
      {"train.batch_size", std::to_string(c.batch_size)},
      {"train.lr", lr.str()},
      {"train.adam_beta1", b1.str()},
      {"train.adam_beta2", b2.str()},
      {"train.adam_eps", eps.str()},
      {"train.ema_decay", ema.str()},
      {"train.weight_dropout", wd.str()},
      {"train.grad_clip", clip.str()},
      {"train.diffusion_steps", std::to_string(c.diffusion_steps)},
      {"train.schedule", schedule_kind_name(c.schedule)},
      {"train.seed", std::to_string(c.seed)},
      {"train.checkpoint_every", std::to_string(c.checkpoint_every)},
  };
}

TrainConfig decode_train_config(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  c.steps = std::stoll(require(kv, "train.steps"));
  c.batch_size = std::stoll(require(kv, "train.batch_size"));
  c.lr = std::stod(require(kv, "train.lr"));
  c.adam_beta1 = std::stod(require(kv, "train.adam_beta1"));
  c.adam_beta2 = std::stod(require(kv, "train.adam_beta2"));
  c.adam_eps = std::stod(require(kv, "train.adam_eps"));
  c.ema_decay = std::stod(require(kv, "train.ema_decay"));
  c.weight_dropout = std::stod(require(kv, "train.weight_dropout"));
  c.grad_clip = std::stod(require(kv, "train.grad_clip"));
  c.diffusion_steps = std::stoll(require(kv, "train.diffusion_steps"));
  c.schedule = parse_schedule_kind(require(kv, "train.schedule"));
  c.seed = std::stoull(require(kv, "train.seed"));
  c.checkpoint_every = std::stoll(require(kv, "train.checkpoint_every"));
  c.validate();
  return c;
}

}  // namespace composer

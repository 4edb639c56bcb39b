#include "revnet/io.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace revnet {

using nlohmann::json;

// ---- XYZ text clouds -----------------------------------------------------------

PointCloud read_cloud(const std::string& path) {
  std::ifstream in(path);
  REVNET_CHECK(in.good(), "cannot open cloud file: " + path);
  std::vector<std::array<double, 3>> pts;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;  // blank
    if (line[first] == '#') continue;          // comment
    std::istringstream iss(line);
    double x, y, z;
    if (!(iss >> x >> y >> z)) {
      REVNET_CHECK(false, path + ":" + std::to_string(line_no) +
                              ": malformed point line");
    }
    std::string rest;
    if (iss >> rest)
      REVNET_CHECK(false, path + ":" + std::to_string(line_no) +
                              ": trailing tokens after coordinates");
    REVNET_CHECK(std::isfinite(x) && std::isfinite(y) && std::isfinite(z),
                 path + ":" + std::to_string(line_no) +
                     ": non-finite coordinate");
    pts.push_back({x, y, z});
  }
  REVNET_CHECK(!pts.empty(), path + ": no points found");
  return PointCloud::from_points(pts);
}

void write_cloud(const std::string& path, const PointCloud& cloud) {
  REVNET_CHECK(cloud.valid_count >= 1, "write_cloud: empty cloud");
  std::ofstream out(path);
  REVNET_CHECK(out.good(), "cannot open cloud file for writing: " + path);
  char buf[128];
  for (int i = 0; i < cloud.valid_count; ++i) {
    const auto p = cloud.point(i);
    std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g\n", p[0], p[1], p[2]);
    out << buf;
  }
  REVNET_CHECK(out.good(), "write failed: " + path);
}

// ---- binary checkpoint ------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'R', 'V', 'N', 'T', '\0'};

void put_bytes(std::string& out, const void* p, size_t n) {
  out.append(static_cast<const char*>(p), n);
}

void put_u32(std::string& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 4);
}

void put_u64(std::string& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 8);
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

void put_string(std::string& out, const std::string& s) {
  put_u64(out, s.size());
  put_bytes(out, s.data(), s.size());
}

void put_f64_array(std::string& out, const std::vector<double>& v) {
  put_u64(out, v.size());
  for (double d : v) put_f64(out, d);
}

struct Reader {
  const std::string& data;
  size_t pos = 0;
  const std::string& path;

  void need(size_t n) const {
    REVNET_CHECK(pos + n <= data.size(),
                 path + ": truncated or corrupt checkpoint");
  }
  void raw(void* p, size_t n) {
    need(n);
    std::memcpy(p, data.data() + pos, n);
    pos += n;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(
               static_cast<unsigned char>(data[pos + i]))
           << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(
               static_cast<unsigned char>(data[pos + i]))
           << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(data.data() + pos, n);
    pos += n;
    return s;
  }
  std::vector<double> f64_array() {
    const std::uint64_t n = u64();
    std::vector<double> v(n);
    for (auto& d : v) d = f64();
    return v;
  }
};

void put_named_arrays(
    std::string& out,
    const std::vector<std::pair<std::string, std::vector<double>>>& arrays) {
  put_u64(out, arrays.size());
  for (const auto& [name, v] : arrays) {
    put_string(out, name);
    put_f64_array(out, v);
  }
}

std::vector<std::pair<std::string, std::vector<double>>> read_named_arrays(
    Reader& r) {
  std::vector<std::pair<std::string, std::vector<double>>> out;
  const std::uint64_t n = r.u64();
  out.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    out.emplace_back(std::move(name), r.f64_array());
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string out;
  put_bytes(out, kMagic, 5);
  put_u32(out, Checkpoint::kVersion);
  put_string(out, config_to_json(ckpt.config));
  put_u64(out, ckpt.params.size());
  for (const auto& [name, tensor] : ckpt.params) {
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(tensor.ndim()));
    for (int d : tensor.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    for (double v : tensor.values()) put_f64(out, v);
  }
  out.push_back(ckpt.has_optimizer ? 1 : 0);
  if (ckpt.has_optimizer) {
    put_u64(out, static_cast<std::uint64_t>(ckpt.optimizer_step));
    put_f64(out, ckpt.optimizer_cfg.lr);
    put_f64(out, ckpt.optimizer_cfg.beta1);
    put_f64(out, ckpt.optimizer_cfg.beta2);
    put_f64(out, ckpt.optimizer_cfg.eps);
    put_f64(out, ckpt.optimizer_cfg.weight_decay);
    put_f64(out, ckpt.optimizer_cfg.decay_factor);
    put_u64(out, static_cast<std::uint64_t>(ckpt.optimizer_cfg.decay_interval));
    put_f64(out, ckpt.optimizer_cfg.clip_norm);
    put_named_arrays(out, ckpt.optimizer_m);
    put_named_arrays(out, ckpt.optimizer_v);
  }
  put_u64(out, ckpt.rng_seed);

  std::ofstream f(path, std::ios::binary);
  REVNET_CHECK(f.good(), "cannot open checkpoint for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  REVNET_CHECK(f.good(), "checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REVNET_CHECK(f.good(), "cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string data = ss.str();
  Reader r{data, 0, path};

  char magic[5];
  r.raw(magic, 5);
  REVNET_CHECK(std::memcmp(magic, kMagic, 5) == 0,
               path + ": not a checkpoint file (bad magic)");
  const std::uint32_t version = r.u32();
  REVNET_CHECK(version == Checkpoint::kVersion,
               path + ": unsupported checkpoint version " +
                   std::to_string(version));

  Checkpoint ckpt;
  ckpt.config = config_from_json(r.str());
  const std::uint64_t n_params = r.u64();
  ckpt.params.reserve(n_params);
  for (std::uint64_t i = 0; i < n_params; ++i) {
    std::string name = r.str();
    const std::uint32_t ndim = r.u32();
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<int>(r.u64());
    std::vector<double> vals(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : vals) v = r.f64();
    ckpt.params.emplace_back(std::move(name),
                             Tensor::from(std::move(shape), std::move(vals)));
  }
  char has_opt = 0;
  r.raw(&has_opt, 1);
  ckpt.has_optimizer = has_opt != 0;
  if (ckpt.has_optimizer) {
    ckpt.optimizer_step = static_cast<long>(r.u64());
    ckpt.optimizer_cfg.lr = r.f64();
    ckpt.optimizer_cfg.beta1 = r.f64();
    ckpt.optimizer_cfg.beta2 = r.f64();
    ckpt.optimizer_cfg.eps = r.f64();
    ckpt.optimizer_cfg.weight_decay = r.f64();
    ckpt.optimizer_cfg.decay_factor = r.f64();
    ckpt.optimizer_cfg.decay_interval = static_cast<long>(r.u64());
    ckpt.optimizer_cfg.clip_norm = r.f64();
    ckpt.optimizer_m = read_named_arrays(r);
    ckpt.optimizer_v = read_named_arrays(r);
  }
  ckpt.rng_seed = r.u64();
  REVNET_CHECK(r.pos == data.size(), path + ": trailing bytes in checkpoint");
  return ckpt;
}

Checkpoint make_checkpoint(const REVNet& model, std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  for (const auto& [name, tensor] : model.parameters())
    ckpt.params.emplace_back(
        name, Tensor::from(tensor.shape(), tensor.values()));
  ckpt.rng_seed = seed;
  return ckpt;
}

REVNet restore_model(const Checkpoint& ckpt) {
  REVNet model(ckpt.config, ckpt.rng_seed);
  model.load_parameters(ckpt.params);
  return model;
}

// ---- config JSON -------------------------------------------------------------------

std::string config_to_json(const ModelConfig& cfg) {
  json j;
  j["k0"] = cfg.k0;
  j["c0"] = cfg.c0;
  json stages = json::array();
  for (const auto& s : cfg.stages)
    stages.push_back({{"size", s.size},
                      {"channels", s.channels},
                      {"resmlps", s.resmlps}});
  j["stages"] = stages;
  j["k_group"] = cfg.k_group;
  j["n_observed"] = cfg.n_observed;
  j["m_missing"] = cfg.m_missing;
  j["anchor_channels"] = cfg.anchor_channels;
  j["global_channels"] = cfg.global_channels;
  j["n_enc"] = cfg.n_enc;
  j["n_dec"] = cfg.n_dec;
  j["heads"] = cfg.heads;
  j["k_attn"] = cfg.k_attn;
  j["ff_channels"] = cfg.ff_channels;
  j["points_per_anchor"] = cfg.points_per_anchor;
  j["predictor_hidden"] = cfg.predictor_hidden;
  j["fine_hidden"] = cfg.fine_hidden;
  j["inv_hidden"] = cfg.inv_hidden;
  return j.dump();
}

ModelConfig config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const std::exception& e) {
    REVNET_CHECK(false, std::string("config: invalid JSON: ") + e.what());
  }
  ModelConfig cfg = ModelConfig::toy();  // defaults for omitted fields
  auto get = [&](const char* key, int& slot) {
    if (j.contains(key)) slot = j.at(key).get<int>();
  };
  get("k0", cfg.k0);
  get("c0", cfg.c0);
  if (j.contains("stages")) {
    cfg.stages.clear();
    for (const auto& s : j.at("stages"))
      cfg.stages.push_back({s.at("size").get<int>(),
                            s.at("channels").get<int>(),
                            s.value("resmlps", 1)});
  }
  get("k_group", cfg.k_group);
  get("n_observed", cfg.n_observed);
  get("m_missing", cfg.m_missing);
  get("anchor_channels", cfg.anchor_channels);
  get("global_channels", cfg.global_channels);
  get("n_enc", cfg.n_enc);
  get("n_dec", cfg.n_dec);
  get("heads", cfg.heads);
  get("k_attn", cfg.k_attn);
  get("ff_channels", cfg.ff_channels);
  get("points_per_anchor", cfg.points_per_anchor);
  get("predictor_hidden", cfg.predictor_hidden);
  get("fine_hidden", cfg.fine_hidden);
  get("inv_hidden", cfg.inv_hidden);
  cfg.validate();
  return cfg;
}

ModelConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  REVNET_CHECK(in.good(), "cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

}  // namespace revnet

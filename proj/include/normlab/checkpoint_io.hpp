#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "normlab/model.hpp"

// Versioned model container, magic "NCKT1", little-endian throughout:
// a JSON header (config + named tensor table) followed by raw 64-bit float
// parameter data, the calibration scales, and the training RNG state. The
// round trip is bit-exact because every float travels in binary.

namespace normlab {

namespace detail {

constexpr char kMagic[5] = {'N', 'C', 'K', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {
      {"n_freq", c.n_freq},
      {"n_emb", c.n_emb},
      {"n_layer", c.n_layer},
      {"heads", c.heads},
      {"n_qkv", c.n_qkv},
      {"n_ff", c.n_ff},
      {"mlp_widths", c.mlp_widths},
      {"strategy", static_cast<int>(c.strategy)},
      {"strategy_norm", static_cast<int>(c.strategy_norm)},
      {"seed", c.seed},
      {"offset_range", c.offset_range},
      {"sigma_type", c.sigma_type},
      {"sigma_x", c.sigma_x},
      {"sigma_w", c.sigma_w},
      {"sigma_dx", c.sigma_dx},
  };
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_freq = j.at("n_freq").get<std::size_t>();
  c.n_emb = j.at("n_emb").get<std::size_t>();
  c.n_layer = j.at("n_layer").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.n_qkv = j.at("n_qkv").get<std::size_t>();
  c.n_ff = j.at("n_ff").get<std::size_t>();
  c.mlp_widths = j.at("mlp_widths").get<std::vector<std::size_t>>();
  c.strategy = static_cast<StrategyKind>(j.at("strategy").get<int>());
  c.strategy_norm =
      static_cast<NormVariant>(j.at("strategy_norm").get<int>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.offset_range = j.at("offset_range").get<long long>();
  c.sigma_type = j.at("sigma_type").get<double>();
  c.sigma_x = j.at("sigma_x").get<double>();
  c.sigma_w = j.at("sigma_w").get<double>();
  c.sigma_dx = j.at("sigma_dx").get<double>();
  return c;
}

// Scales in calibration/file order: type, x, then per layer q, k, v, w, dx.
inline std::vector<CheckpointLayer*> checkpoint_list(ModelState& st) {
  std::vector<CheckpointLayer*> out = {&st.ckpt_type, &st.ckpt_x};
  for (auto& att : st.layers) {
    out.push_back(&att.ckpt_q);
    out.push_back(&att.ckpt_k);
    out.push_back(&att.ckpt_v);
    out.push_back(&att.ckpt_w);
    out.push_back(&att.ckpt_dx);
  }
  return out;
}

template <typename T>
void write_raw(std::ofstream& f, const T* data, std::size_t count) {
  f.write(reinterpret_cast<const char*>(data),
          static_cast<std::streamsize>(sizeof(T) * count));
}

template <typename T>
void read_raw(std::ifstream& f, T* data, std::size_t count) {
  f.read(reinterpret_cast<char*>(data),
         static_cast<std::streamsize>(sizeof(T) * count));
  if (!f) throw std::runtime_error("checkpoint: file truncated");
}

}  // namespace detail

inline void save_checkpoint(const ModelState& state, const std::string& path) {
  ModelState& st = const_cast<ModelState&>(state);
  nlohmann::json header;
  header["schema_version"] = 1;
  header["config"] = detail::config_to_json(st.config);
  header["calibrated"] = st.calibrated;
  auto params = st.parameters();
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [name, tensor] : params)
    table.push_back({{"name", name}, {"shape", tensor.shape()}});
  header["tensors"] = table;
  const auto ckpts = detail::checkpoint_list(st);
  header["checkpoint_count"] = ckpts.size();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  f.write(detail::kMagic, 5);
  detail::write_raw(f, &detail::kVersion, 1);
  const std::string head_str = header.dump();
  const std::uint64_t head_len = head_str.size();
  detail::write_raw(f, &head_len, 1);
  f.write(head_str.data(), static_cast<std::streamsize>(head_len));
  for (const auto& [name, tensor] : params)
    detail::write_raw(f, tensor.data(), tensor.size());
  for (const auto* ck : ckpts) {
    const std::uint8_t has = ck->scale.has_value() ? 1 : 0;
    detail::write_raw(f, &has, 1);
    const double v = ck->scale.value_or(0.0);
    detail::write_raw(f, &v, 1);
    detail::write_raw(f, &ck->target_sigma, 1);
  }
  detail::write_raw(f, st.train_rng_state.data(), 4);
  if (!f) throw std::runtime_error("checkpoint: write failed");
}

inline ModelState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[5];
  detail::read_raw(f, magic, 5);
  if (std::memcmp(magic, detail::kMagic, 5) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  std::uint32_t version = 0;
  detail::read_raw(f, &version, 1);
  if (version != detail::kVersion)
    throw std::runtime_error("checkpoint: unsupported version");
  std::uint64_t head_len = 0;
  detail::read_raw(f, &head_len, 1);
  std::string head_str(head_len, '\0');
  detail::read_raw(f, head_str.data(), head_len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head_str);
  } catch (const nlohmann::json::exception&) {
    throw std::runtime_error("checkpoint: corrupt header");
  }

  ModelState st = init(detail::config_from_json(header.at("config")));
  auto params = st.parameters();
  const auto& table = header.at("tensors");
  if (table.size() != params.size())
    throw std::runtime_error("checkpoint: tensor table mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = table.at(i);
    if (entry.at("name").get<std::string>() != params[i].first ||
        entry.at("shape").get<std::vector<std::size_t>>() !=
            params[i].second.shape())
      throw std::runtime_error("checkpoint: tensor table mismatch");
    detail::read_raw(f, params[i].second.data(), params[i].second.size());
  }
  const auto ckpts = detail::checkpoint_list(st);
  if (header.at("checkpoint_count").get<std::size_t>() != ckpts.size())
    throw std::runtime_error("checkpoint: calibration table mismatch");
  for (auto* ck : ckpts) {
    std::uint8_t has = 0;
    double v = 0.0, target = 0.0;
    detail::read_raw(f, &has, 1);
    detail::read_raw(f, &v, 1);
    detail::read_raw(f, &target, 1);
    ck->target_sigma = target;
    ck->scale = has ? std::optional<double>(v) : std::nullopt;
  }
  detail::read_raw(f, st.train_rng_state.data(), 4);
  st.calibrated = header.at("calibrated").get<bool>();
  return st;
}

}  // namespace normlab

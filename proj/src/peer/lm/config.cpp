// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/lm/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "peer/core/error.hpp"

namespace peer {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    // Allow integral values in scientific form such as 1e6.
    try {
      std::size_t used = 0;
      const double d = std::stod(std::string(v), &used);
      if (used == v.size() && d >= 0 && d == static_cast<double>(static_cast<std::uint64_t>(d))) {
        return static_cast<std::uint64_t>(d);
      }
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + std::string(key) + "': expected a non-negative integer, got '" +
                      std::string(v) + "'");
  }
  return out;
}

double to_f64(std::string_view key, std::string_view v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(std::string(v), &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + std::string(key) + "': expected a number, got '" +
                    std::string(v) + "'");
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + std::string(key) + "': expected a boolean, got '" +
                    std::string(v) + "'");
}

template <typename T>
std::string list_str(const std::vector<T>& items, std::function<std::string(const T&)> f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ',';
    out += f(items[i]);
  }
  return out;
}

std::vector<std::string_view> split_list(std::string_view v) {
  std::vector<std::string_view> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    const auto item = trim(v.substr(0, comma));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

std::string fmt_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define PEER_U64(KEY, MEMBER)                                                          \
  Field{KEY, [](RunConfig& c, std::string_view v) { c.MEMBER = to_u64(KEY, v); },     \
        [](const RunConfig& c) { return std::to_string(c.MEMBER); }}
#define PEER_F64(KEY, MEMBER)                                                          \
  Field{KEY, [](RunConfig& c, std::string_view v) { c.MEMBER = to_f64(KEY, v); },     \
        [](const RunConfig& c) { return fmt_double(c.MEMBER); }}
#define PEER_BOOL(KEY, MEMBER)                                                         \
  Field{KEY, [](RunConfig& c, std::string_view v) { c.MEMBER = to_bool(KEY, v); },    \
        [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }}
#define PEER_ACT(KEY, MEMBER)                                                              \
  Field{KEY, [](RunConfig& c, std::string_view v) { c.MEMBER = parse_activation(v); },    \
        [](const RunConfig& c) { return std::string(activation_name(c.MEMBER)); }}
#define PEER_NORM(KEY, MEMBER)                                                             \
  Field{KEY, [](RunConfig& c, std::string_view v) { c.MEMBER = parse_score_norm(v); },    \
        [](const RunConfig& c) { return std::string(score_norm_name(c.MEMBER)); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      PEER_U64("model.n_blocks", model.n_blocks),
      PEER_U64("model.d_model", model.d_model),
      PEER_U64("model.n_heads", model.n_heads),
      PEER_U64("model.d_ff", model.d_ff),
      PEER_U64("model.seq_len", model.seq_len),
      PEER_ACT("model.activation", model.activation),
      Field{"model.middle",
            [](RunConfig& c, std::string_view v) { c.model.middle = parse_middle_kind(v); },
            [](const RunConfig& c) { return std::string(middle_kind_name(c.model.middle)); }},
      PEER_U64("model.seed", model.seed),

      PEER_U64("peer.n_experts", model.peer.n_experts),
      PEER_U64("peer.heads", model.peer.heads),
      PEER_U64("peer.topk", model.peer.topk),
      PEER_U64("peer.query_dim", model.peer.query_dim),
      PEER_ACT("peer.activation", model.peer.activation),
      PEER_NORM("peer.score_norm", model.peer.score_norm),
      PEER_BOOL("peer.query_bn", model.peer.query_bn),
      PEER_BOOL("peer.glu", model.peer.glu),
      PEER_F64("peer.bn_momentum", model.peer.bn_momentum),
      PEER_F64("peer.bn_eps", model.peer.bn_eps),

      PEER_U64("pkm.n_memories", model.pkm.n_memories),
      PEER_U64("pkm.heads", model.pkm.heads),
      PEER_U64("pkm.topk", model.pkm.topk),
      PEER_U64("pkm.query_dim", model.pkm.query_dim),
      PEER_NORM("pkm.score_norm", model.pkm.score_norm),
      PEER_BOOL("pkm.query_bn", model.pkm.query_bn),

      PEER_U64("moe.n_experts", model.moe.n_experts),
      PEER_U64("moe.d_ff", model.moe.d_ff),
      PEER_F64("moe.granularity", model.moe.granularity),
      PEER_U64("moe.capacity", model.moe.capacity),

      PEER_U64("train.steps", train.steps),
      PEER_U64("train.batch", train.batch),
      PEER_F64("train.lr", train.lr),
      PEER_U64("train.warmup", train.warmup),
      PEER_F64("train.beta1", train.beta1),
      PEER_F64("train.beta2", train.beta2),
      PEER_F64("train.eps", train.eps),
      PEER_U64("train.checkpoint_interval", train.checkpoint_interval),
      PEER_U64("train.seed", train.seed),

      Field{"data.path", [](RunConfig& c, std::string_view v) { c.data.path = std::string(v); },
            [](const RunConfig& c) { return c.data.path; }},
      PEER_F64("data.val_fraction", data.val_fraction),

      PEER_F64("sweep.budget", sweep.budget),
      Field{"sweep.methods",
            [](RunConfig& c, std::string_view v) {
              c.sweep.methods.clear();
              for (auto item : split_list(v)) c.sweep.methods.push_back(parse_middle_kind(item));
            },
            [](const RunConfig& c) {
              return list_str<MiddleKind>(c.sweep.methods, [](const MiddleKind& k) {
                return std::string(middle_kind_name(k));
              });
            }},
      Field{"sweep.d_models",
            [](RunConfig& c, std::string_view v) {
              c.sweep.d_models.clear();
              for (auto item : split_list(v)) c.sweep.d_models.push_back(to_u64("sweep.d_models", item));
            },
            [](const RunConfig& c) {
              return list_str<std::size_t>(c.sweep.d_models,
                                           [](const std::size_t& d) { return std::to_string(d); });
            }},
      PEER_F64("sweep.wall_clock_cap", sweep.wall_clock_cap),

      PEER_BOOL("accounting.bias", bias_accounting),
  };
  return table;
}

#undef PEER_U64
#undef PEER_F64
#undef PEER_BOOL
#undef PEER_ACT
#undef PEER_NORM

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::string_view text) {
  KeyValueConfig cfg;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const auto line = trim(text.substr(0, nl));
    ++line_no;
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    cfg.entries_[std::string(key)] = std::string(trim(line.substr(eq + 1)));
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string KeyValueConfig::to_string() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
  return out;
}

void KeyValueConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write config file " + path.string());
  out << to_string();
}

MiddleKind parse_middle_kind(std::string_view name) {
  if (name == "dense") return MiddleKind::kDense;
  if (name == "pkm") return MiddleKind::kPkm;
  if (name == "peer") return MiddleKind::kPeer;
  if (name == "moe") return MiddleKind::kMoe;
  throw ConfigError("unknown middle layer '" + std::string(name) +
                    "' (expected dense|pkm|peer|moe)");
}

std::string_view middle_kind_name(MiddleKind kind) {
  switch (kind) {
    case MiddleKind::kDense: return "dense";
    case MiddleKind::kPkm: return "pkm";
    case MiddleKind::kPeer: return "peer";
    case MiddleKind::kMoe: return "moe";
  }
  return "dense";
}

void ModelConfig::sync() {
  peer.d_model = d_model;
  pkm.d_model = d_model;
  moe.d_model = d_model;
  moe.activation = activation;
}

void ModelConfig::validate() const {
  if (n_blocks < 1) throw ConfigError("model needs at least one block");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(n_heads) + " attention heads");
  }
  if (d_ff == 0 || seq_len == 0) throw ConfigError("d_ff and seq_len must be positive");
  if (vocab != 256) throw ConfigError("the byte-level model has a fixed vocabulary of 256");
  const auto check_width = [&](std::size_t w, const char* what) {
    if (w != d_model) {
      throw ConfigError(std::string(what) + " d_model " + std::to_string(w) +
                        " does not match model d_model " + std::to_string(d_model));
    }
  };
  switch (middle) {
    case MiddleKind::kDense:
      break;
    case MiddleKind::kPeer:
      check_width(peer.d_model, "peer");
      peer.validate();
      break;
    case MiddleKind::kPkm:
      check_width(pkm.d_model, "pkm");
      pkm.router().validate();
      break;
    case MiddleKind::kMoe:
      check_width(moe.d_model, "moe");
      if (moe.n_experts < 1 || moe.n_experts > 16) {
        throw ConfigError("desk-scale MoE supports 1..16 experts, got " +
                          std::to_string(moe.n_experts));
      }
      if (moe.d_ff == 0) throw ConfigError("moe.d_ff must be positive");
      if (moe.capacity == 0 && !(moe.granularity > 0.0)) {
        throw ConfigError("moe.granularity must be positive");
      }
      break;
  }
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train.steps must be at least 1");
  if (batch < 1) throw ConfigError("train.batch must be at least 1");
  if (!(lr >= 0.0)) throw ConfigError("train.lr must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0)) {
    throw ConfigError("Adam hyperparameters out of range");
  }
}

RunConfig RunConfig::from(const KeyValueConfig& kv) {
  RunConfig cfg;
  bool moe_dff_set = false;
  for (const auto& [key, value] : kv.entries()) {
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->set(cfg, value);
    moe_dff_set |= key == "moe.d_ff";
  }
  if (!moe_dff_set) cfg.model.moe.d_ff = cfg.model.d_ff;
  cfg.model.sync();
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  return from(KeyValueConfig::load(path));
}

KeyValueConfig RunConfig::to_kv() const {
  KeyValueConfig kv;
  for (const auto& f : fields()) kv.set(f.key, f.get(*this));
  return kv;
}

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return keys;
}

}  // namespace peer

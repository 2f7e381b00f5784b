#pragma once

// checkpoint.json: versioned snapshot of the training config, every network
// parameter and the memory keys. Doubles are written in shortest round-trip
// form, so save -> load reproduces the state bit for bit.

#include <cstddef>
#include <string>

#include "ecn/json_config.hpp"
#include "ecn/memory.hpp"
#include "ecn/model.hpp"
#include "ecn/trainer.hpp"

namespace ecn {

inline constexpr const char* kCheckpointFormat = "ecn-checkpoint";
inline constexpr int kCheckpointVersion = 1;
/// Names the generator behind every seeded draw; part of the format contract.
inline constexpr const char* kPrngName = "xoshiro256**/splitmix64";

struct Checkpoint {
  TrainConfig config;
  std::size_t epoch = 0;
  EmbeddingNet net;
  ExemplarMemory memory{1, 1};
};

inline Json to_json(const Checkpoint& c) {
  Json params = Json::object();
  const auto tensors = c.net.params.tensors();
  for (std::size_t t = 0; t < kNumParamTensors; ++t) {
    params[std::string(kParamNames[t])] = Vec(tensors[t].begin(), tensors[t].end());
  }
  return Json{{"format", kCheckpointFormat},
              {"version", kCheckpointVersion},
              {"prng", kPrngName},
              {"epoch", c.epoch},
              {"config", to_json(c.config)},
              {"net",
               {{"input_dim", c.net.input_dim()},
                {"hidden_dim", c.net.hidden_dim()},
                {"embed_dim", c.net.embed_dim()},
                {"n_classes", c.net.n_classes()},
                {"dropout_rate", c.net.dropout_rate},
                {"params", params}}},
              {"memory",
               {{"n_slots", c.memory.n_slots()},
                {"dim", c.memory.dim()},
                {"alpha", c.memory.alpha() ? Json(*c.memory.alpha()) : Json(nullptr)},
                {"keys", c.memory.keys().data()}}}};
}

namespace detail {

template <typename T>
T require(const Json& j, const char* key, const std::string& where) {
  const auto it = j.find(key);
  if (it == j.end()) throw ConfigError(where + ": missing field '" + key + "'");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline Checkpoint checkpoint_from_json(const Json& j) {
  const std::string where = "checkpoint";
  if (!j.is_object() || detail::require<std::string>(j, "format", where) != kCheckpointFormat) {
    throw ConfigError(where + ": not an ecn checkpoint");
  }
  const int version = detail::require<int>(j, "version", where);
  if (version != kCheckpointVersion) {
    throw ConfigError(where + ": unsupported version " + std::to_string(version));
  }

  Checkpoint c;
  c.epoch = detail::require<std::size_t>(j, "epoch", where);
  c.config = train_config_from_json(detail::require<Json>(j, "config", where), where + ".config");

  const Json net = detail::require<Json>(j, "net", where);
  const auto input = detail::require<std::size_t>(net, "input_dim", where + ".net");
  const auto hidden = detail::require<std::size_t>(net, "hidden_dim", where + ".net");
  const auto embed = detail::require<std::size_t>(net, "embed_dim", where + ".net");
  const auto classes = detail::require<std::size_t>(net, "n_classes", where + ".net");
  c.net = init_params(input, hidden, embed, classes, 0, detail::require<double>(net, "dropout_rate", where + ".net"));
  const Json params = detail::require<Json>(net, "params", where + ".net");
  auto tensors = c.net.params.tensors();
  for (std::size_t t = 0; t < kNumParamTensors; ++t) {
    const std::string name(kParamNames[t]);
    const auto values = detail::require<Vec>(params, name.c_str(), where + ".net.params");
    if (values.size() != tensors[t].size()) {
      throw ConfigError(where + ".net.params: tensor '" + name + "' has " + std::to_string(values.size()) +
                        " entries, expected " + std::to_string(tensors[t].size()));
    }
    std::copy(values.begin(), values.end(), tensors[t].begin());
  }

  const Json mem = detail::require<Json>(j, "memory", where);
  const auto n_slots = detail::require<std::size_t>(mem, "n_slots", where + ".memory");
  const auto dim = detail::require<std::size_t>(mem, "dim", where + ".memory");
  c.memory = ExemplarMemory(n_slots, dim);
  Mat keys(n_slots, dim);
  keys.data() = detail::require<Vec>(mem, "keys", where + ".memory");
  if (keys.data().size() != n_slots * dim) throw ConfigError(where + ".memory: keys have the wrong length");
  c.memory.load_keys(keys);
  if (const auto a = mem.find("alpha"); a != mem.end() && !a->is_null()) c.memory.set_alpha(a->get<double>());
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  write_text_file(path, to_json(c).dump() + "\n");
}

inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_json(load_json_file(path)); }

}  // namespace ecn

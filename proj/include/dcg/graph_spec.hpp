#pragma once

// Graph specification document ("dcg-spec/1"):
//
//   {
//     "version": "dcg-spec/1",
//     "seed": 0,
//     "nodes": [
//       {"name": "U", "kind": "confounder", "parents": []},
//       {"name": "age", "kind": "flow", "parents": ["U"],
//        "hidden": [32, 32], "flow_layers": 2, "flow_units": 8},
//       {"name": "grade", "kind": "categorical", "parents": ["age"], "classes": 4}
//     ]
//   }
//
// Optional keys fall back to UnitHyper defaults.

#include "dcg/units.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcg {

inline constexpr const char* kSpecVersion = "dcg-spec/1";

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NodeSpec {
  std::string name;
  UnitKind kind = UnitKind::Flow;
  std::vector<std::string> parents;
  UnitHyper hyper;
};

struct GraphSpec {
  std::vector<NodeSpec> nodes;
  std::uint64_t seed = 0;

  [[nodiscard]] const NodeSpec* find(const std::string& name) const {
    for (const auto& n : nodes)
      if (n.name == name) return &n;
    return nullptr;
  }
  [[nodiscard]] std::size_t edge_count() const {
    std::size_t e = 0;
    for (const auto& n : nodes) e += n.parents.size();
    return e;
  }
};

inline nlohmann::ordered_json to_json(const GraphSpec& spec) {
  nlohmann::ordered_json j;
  j["version"] = kSpecVersion;
  j["seed"] = spec.seed;
  auto& nodes = j["nodes"] = nlohmann::ordered_json::array();
  for (const auto& n : spec.nodes) {
    nlohmann::ordered_json jn;
    jn["name"] = n.name;
    jn["kind"] = unit_kind_name(n.kind);
    jn["parents"] = n.parents;
    if (n.kind != UnitKind::Confounder) jn["hidden"] = n.hyper.hidden;
    if (n.kind == UnitKind::Categorical) jn["classes"] = n.hyper.classes;
    if (n.kind == UnitKind::Flow) {
      jn["flow_layers"] = n.hyper.flow_layers;
      jn["flow_units"] = n.hyper.flow_units;
      jn["init_jitter"] = n.hyper.init_jitter;
    }
    nodes.push_back(std::move(jn));
  }
  return j;
}

inline GraphSpec graph_spec_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object()) throw FormatError("graph spec must be a JSON object");
    const std::string version = j.at("version").get<std::string>();
    if (version != kSpecVersion)
      throw FormatError("unsupported graph spec version '" + version + "'");
    GraphSpec spec;
    spec.seed = j.value("seed", std::uint64_t{0});
    for (const auto& jn : j.at("nodes")) {
      NodeSpec n;
      n.name = jn.at("name").get<std::string>();
      n.kind = parse_unit_kind(jn.at("kind").get<std::string>());
      n.parents = jn.value("parents", std::vector<std::string>{});
      if (jn.contains("hidden")) n.hyper.hidden = jn.at("hidden").get<std::vector<int>>();
      if (n.kind == UnitKind::GLM) n.hyper.hidden.clear();
      n.hyper.classes = jn.value("classes", n.kind == UnitKind::Bernoulli ? 2 : 0);
      n.hyper.flow_layers = jn.value("flow_layers", n.hyper.flow_layers);
      n.hyper.flow_units = jn.value("flow_units", n.hyper.flow_units);
      n.hyper.init_jitter = jn.value("init_jitter", n.hyper.init_jitter);
      spec.nodes.push_back(std::move(n));
    }
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed graph spec: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("malformed graph spec: ") + e.what());
  }
}

inline std::string dump_spec(const GraphSpec& spec) { return to_json(spec).dump(2) + "\n"; }

inline GraphSpec load_graph_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open graph spec '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed graph spec '" + path + "': " + e.what());
  }
  return graph_spec_from_json(j);
}

inline void save_graph_spec(const GraphSpec& spec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write graph spec '" + path + "'");
  out << dump_spec(spec);
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t x) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << x;
  return os.str();
}

inline std::string spec_hash(const GraphSpec& spec) { return hex64(fnv1a(to_json(spec).dump())); }

}  // namespace dcg

#pragma once

// Run provenance: one manifest per command invocation under runs/<id>/manifests/.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "rng.hpp"

namespace forgetmark {

inline constexpr std::string_view tool_version = "0.3.0";

struct ArtifactRef {
  std::string path;
  std::string hash;  // fnv1a64 of the file bytes, hex
};

inline std::string file_hash(const std::string& path) { return hex64(fnv1a64(io_detail::read_file(path))); }

inline ArtifactRef artifact_ref(const std::string& path) { return {path, file_hash(path)}; }

inline std::string utc_timestamp() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  int schema_version = 1;
  std::string command;
  std::vector<std::string> argv;
  std::string config_text;  // canonical key=value lines
  std::string config_hash;
  std::uint64_t root_seed = 0;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<ArtifactRef> inputs;
  std::vector<ArtifactRef> outputs;
  std::string started;
  std::string finished;
  std::string version{tool_version};
  nlohmann::json summary = nlohmann::json::object();

  void add_input(const std::string& path) { inputs.push_back(artifact_ref(path)); }
  void add_output(const std::string& path) { outputs.push_back(artifact_ref(path)); }
};

inline nlohmann::json to_json(const ArtifactRef& a) { return {{"path", a.path}, {"hash", a.hash}}; }

inline nlohmann::json to_json(const RunManifest& m) {
  nlohmann::json in = nlohmann::json::array(), out = nlohmann::json::array();
  for (const auto& a : m.inputs) in.push_back(to_json(a));
  for (const auto& a : m.outputs) out.push_back(to_json(a));
  return {{"schema_version", m.schema_version}, {"command", m.command},       {"argv", m.argv},
          {"config", m.config_text},            {"config_hash", m.config_hash}, {"root_seed", m.root_seed},
          {"seeds", m.seeds},                   {"inputs", in},               {"outputs", out},
          {"started", m.started},               {"finished", m.finished},     {"tool_version", m.version},
          {"summary", m.summary}};
}

inline RunManifest run_manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  try {
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != 1)
      fail(ErrorKind::schema, "manifest schema_version " + std::to_string(m.schema_version) + ", expected 1");
    m.command = j.at("command").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.config_text = j.at("config").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.root_seed = j.at("root_seed").get<std::uint64_t>();
    m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    for (const auto& a : j.at("inputs")) m.inputs.push_back({a.at("path").get<std::string>(), a.at("hash").get<std::string>()});
    for (const auto& a : j.at("outputs")) m.outputs.push_back({a.at("path").get<std::string>(), a.at("hash").get<std::string>()});
    m.started = j.at("started").get<std::string>();
    m.finished = j.at("finished").get<std::string>();
    m.version = j.at("tool_version").get<std::string>();
    m.summary = j.value("summary", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("malformed run manifest: ") + e.what());
  }
  return m;
}

inline void save_manifest(const std::string& path, const RunManifest& m) {
  io_detail::write_file(path, to_json(m).dump(2) + "\n");
}

inline RunManifest load_manifest(const std::string& path) {
  try {
    return run_manifest_from_json(nlohmann::json::parse(io_detail::read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::schema, path + ": " + e.what());
  }
}

/// Paths of outputs whose current bytes no longer match the recorded hash.
inline std::vector<std::string> stale_outputs(const RunManifest& m) {
  std::vector<std::string> bad;
  for (const auto& a : m.outputs)
    if (!std::filesystem::exists(a.path) || file_hash(a.path) != a.hash) bad.push_back(a.path);
  return bad;
}

}  // namespace forgetmark

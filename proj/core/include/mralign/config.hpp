#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mralign/trainer.hpp"

namespace mralign {

// Flat key=value run configuration. The key set is closed: exactly the keys
// config_dump(TrainConfig) emits, so dump/parse round-trips by construction.
// '#' starts a comment; blank lines are ignored.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::string& path);
void save_config(const std::string& path, const TrainConfig& cfg);

// one key=value override on an existing config (CLI --set)
void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value);

inline constexpr const char* kToolVersion = "mralign 0.1.0";

// every file a tool run produced, plus the inputs that produced it
struct RunManifest {
    std::string command;
    uint64_t config_hash = 0;
    uint64_t seed = 0;
    std::string tool = kToolVersion;
    std::vector<std::pair<std::string, std::string>> files; // (kind, path)
};

void save_manifest(const std::string& path, const RunManifest& m);
RunManifest load_manifest(const std::string& path);

} // namespace mralign

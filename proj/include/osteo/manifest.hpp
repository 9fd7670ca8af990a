#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

namespace osteo {

/// Provenance record for one command invocation. The hash covers the
/// command, config path and resolved config snapshot, not the timestamps, so
/// identical invocations produce identical artifacts.
struct RunManifest {
    std::string command;
    std::string config_path;
    nlohmann::json config;
    std::string hash;
    std::string started_at;
    std::string finished_at;
    int exit_code = -1;

    static RunManifest begin(std::string command, std::string config_path, nlohmann::json config);
    void finish(int code);
    nlohmann::json to_json() const;
    /// Writes <dir>/manifests/<hash>.json and returns the path.
    std::filesystem::path save(const std::filesystem::path& dir) const;
};

/// Writes `<path>.manifest` holding the hash, for formats without a metadata slot.
void write_manifest_sidecar(const std::filesystem::path& path, const std::string& hash);

std::string utc_timestamp();

}  // namespace osteo

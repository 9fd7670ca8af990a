#include "osteo/manifest.hpp"

#include <chrono>
#include <fstream>

#include <fmt/chrono.h>
#include <fmt/format.h>

#include "osteo/errors.hpp"
#include "osteo/hashing.hpp"

namespace osteo {

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(now));
}

RunManifest RunManifest::begin(std::string command, std::string config_path, nlohmann::json config) {
    RunManifest m;
    m.command = std::move(command);
    m.config_path = std::move(config_path);
    m.config = std::move(config);
    const nlohmann::json keyed = {{"command", m.command}, {"config_path", m.config_path}, {"config", m.config}};
    m.hash = sha256_hex(keyed.dump());
    m.started_at = utc_timestamp();
    return m;
}

void RunManifest::finish(int code) {
    exit_code = code;
    finished_at = utc_timestamp();
}

nlohmann::json RunManifest::to_json() const {
    return {{"command", command},   {"config_path", config_path}, {"config", config},
            {"hash", hash},         {"started_at", started_at},   {"finished_at", finished_at},
            {"exit_code", exit_code}};
}

std::filesystem::path RunManifest::save(const std::filesystem::path& dir) const {
    const auto path = dir / "manifests" / (hash + ".json");
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << to_json().dump(2) << '\n';
    return path;
}

void write_manifest_sidecar(const std::filesystem::path& path, const std::string& hash) {
    std::ofstream out(path.string() + ".manifest", std::ios::binary);
    if (!out) throw IoError("cannot write manifest sidecar for " + path.string());
    out << hash << '\n';
}

}  // namespace osteo

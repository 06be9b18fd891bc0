#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "corn/config.hpp"

namespace corn {

// Exit codes: 0 success (and --help), 1 runtime failure, 2 usage error.
int dispatch(int argc, const char* const* argv);
int dispatch(const std::vector<std::string>& args);  // args[0] is the program name

// Provenance record written before a subcommand starts its work.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  KeyValues config;  // fully resolved, defaults included
  uint64_t seed = 0;
  std::string version;
  std::string started_at;  // UTC, ISO 8601
  std::vector<std::string> outputs;

  std::string to_json() const;
};

void write_run_manifest(const RunManifest& manifest, const std::filesystem::path& path);

// Seed used when no --seed flag is given: $CORN_SEED if set, else 0.
uint64_t default_seed();

}  // namespace corn

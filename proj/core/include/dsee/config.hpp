#pragma once

#include <string>

#include "dsee/pipeline.hpp"

namespace dsee {

/// Parses a pipeline config from JSON text. Missing keys take library
/// defaults; unknown keys are rejected (ParameterError) to keep runs
/// reproducible against the documented schema.
PipelineConfig config_from_json_text(const std::string& text);

/// Fully resolved config back to JSON (every field explicit).
std::string config_to_json_text(const PipelineConfig& cfg);

/// Loads a config file and applies the DSEE_SEED environment override (the
/// only environment variable the library honors).
PipelineConfig load_config(const std::string& path);

/// Reads/writes whole text files; writes are atomic (temp + rename).
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

} // namespace dsee

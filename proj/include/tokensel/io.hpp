#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

namespace tokensel {

// I/O failure tied to a path; the CLI reports these with exit code 3.
struct IoError : std::runtime_error {
  IoError(const std::string& what, const std::filesystem::path& path)
      : std::runtime_error(what + ": " + path.string()), path(path) {}
  std::filesystem::path path;
};

std::ifstream open_input(const std::filesystem::path& path);
std::ofstream open_output(const std::filesystem::path& path);

// RFC 4180 field quoting.
std::string csv_field(std::string_view text);

// Shortest round-trippable decimal representation.
std::string format_double(double x);

}  // namespace tokensel

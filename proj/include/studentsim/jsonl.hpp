#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "studentsim/errors.hpp"

namespace studentsim {

/// Writes `content` to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

/// Canonical single-line encoding used for every JSONL artifact.
inline std::string dump_line(const nlohmann::json& j) { return j.dump(); }

/// One JSON object per line; an empty list writes an empty file.
template <typename T>
void save_records(const std::vector<T>& records, const std::filesystem::path& path) {
  std::string out;
  for (const auto& r : records) {
    out += dump_line(nlohmann::json(r));
    out += '\n';
  }
  write_file_atomic(path, out);
}

/// Throws ParseError("<path>:<line>: ...") on the first malformed line.
template <typename T>
std::vector<T> load_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<T> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<T>());
    } catch (const std::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

/// Appends one line and flushes; used by append-only logs.
void append_line(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace studentsim

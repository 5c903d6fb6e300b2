#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace leaf {

struct TextRecord {
  std::string id;
  std::string text;

  friend bool operator==(const TextRecord&, const TextRecord&) = default;
};

// JSON-lines with one {"id": ..., "text": ...} object per line.
std::vector<TextRecord> read_text_records(const std::filesystem::path& path);
void write_text_records(const std::filesystem::path& path, const std::vector<TextRecord>& records);

std::vector<std::string> texts_of(const std::vector<TextRecord>& records);

}  // namespace leaf

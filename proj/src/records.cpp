#include "leaf/records.hpp"

#include <fstream>

#include "json.hpp"
#include "leaf/error.hpp"

namespace leaf {

std::vector<TextRecord> read_text_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::vector<TextRecord> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

void write_text_records(const std::filesystem::path& path, const std::vector<TextRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  for (const auto& r : records) out << nlohmann::json{{"id", r.id}, {"text", r.text}}.dump() << '\n';
}

std::vector<std::string> texts_of(const std::vector<TextRecord>& records) {
  std::vector<std::string> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.text);
  return out;
}

}  // namespace leaf

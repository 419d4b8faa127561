#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qalign/common.hpp"

namespace qalign {

using json = nlohmann::json;

// JSON Lines files. The first line may be a meta record {"_meta": {...}}
// carrying the producing run's config fingerprint; loaders return it
// separately from the data records.
struct JsonlFile {
    json meta;  // null when the file has no meta line
    std::vector<json> records;
};

inline void write_jsonl(const std::string& path, const std::vector<json>& records,
                        const json& meta = json()) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_jsonl: cannot open '" + path + "' for writing");
    if (!meta.is_null()) out << json{{"_meta", meta}}.dump() << "\n";
    for (const auto& r : records) out << r.dump() << "\n";
    if (!out) throw IoError("write_jsonl: write failed for '" + path + "'");
}

inline JsonlFile read_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_jsonl: cannot open '" + path + "'");
    JsonlFile file;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw UsageError("read_jsonl: '" + path + "' line " + std::to_string(lineno) +
                             ": " + e.what());
        }
        if (lineno == 1 && j.is_object() && j.contains("_meta")) {
            file.meta = j["_meta"];
        } else {
            file.records.push_back(std::move(j));
        }
    }
    return file;
}

}  // namespace qalign

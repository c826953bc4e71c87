// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "maskkv/common.hpp"

// Run report text: "[section]" headers, each followed by "key<TAB>value" rows;
// sections are separated by one blank line. Keys never contain tabs or
// newlines; values never contain newlines.

namespace maskkv {

struct ReportSection {
    std::string name;
    std::vector<std::pair<std::string, std::string>> rows;

    void add(std::string key, std::string value) { rows.emplace_back(std::move(key), std::move(value)); }
    const std::string* find(const std::string& key) const {
        for (const auto& [k, v] : rows) {
            if (k == key) return &v;
        }
        return nullptr;
    }

    bool operator==(const ReportSection&) const = default;
};

struct Report {
    std::vector<ReportSection> sections;

    ReportSection& section(std::string name) {
        sections.push_back({std::move(name), {}});
        return sections.back();
    }
    const ReportSection* find(const std::string& name) const {
        for (const auto& s : sections) {
            if (s.name == name) return &s;
        }
        return nullptr;
    }

    bool operator==(const Report&) const = default;
};

inline std::string report_to_text(const Report& r) {
    std::string out;
    for (std::size_t i = 0; i < r.sections.size(); ++i) {
        const ReportSection& s = r.sections[i];
        if (s.name.find_first_of("[]\n") != std::string::npos) throw ConfigError("bad report section name");
        if (i > 0) out += "\n";
        out += "[" + s.name + "]\n";
        for (const auto& [k, v] : s.rows) {
            if (k.empty() || k.find_first_of("\t\n") != std::string::npos || v.find('\n') != std::string::npos) {
                throw ConfigError("bad report row '" + k + "'");
            }
            out += k + "\t" + v + "\n";
        }
    }
    return out;
}

inline Report parse_report(const std::string& text) {
    Report r;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t nl = text.find('\n', pos);
        const std::size_t end = nl == std::string::npos ? text.size() : nl;
        const std::string line = text.substr(pos, end - pos);
        if (line.empty()) {
            // blank separator
        } else if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3) throw ParseError(pos, "malformed section header");
            r.section(line.substr(1, line.size() - 2));
        } else {
            const std::size_t tab = line.find('\t');
            if (tab == std::string::npos || tab == 0) throw ParseError(pos, "expected key<TAB>value");
            if (r.sections.empty()) throw ParseError(pos, "row before any section");
            r.sections.back().add(line.substr(0, tab), line.substr(tab + 1));
        }
        pos = end + 1;
    }
    return r;
}

/// Human-readable rendering with keys padded to a common width per section.
inline std::string pretty_report(const Report& r) {
    std::string out;
    for (std::size_t i = 0; i < r.sections.size(); ++i) {
        const ReportSection& s = r.sections[i];
        if (i > 0) out += "\n";
        out += s.name + "\n";
        std::size_t width = 0;
        for (const auto& row : s.rows) width = std::max(width, row.first.size());
        for (const auto& [k, v] : s.rows) out += "  " + k + std::string(width - k.size() + 2, ' ') + v + "\n";
    }
    return out;
}

}  // namespace maskkv

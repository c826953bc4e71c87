// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cerrno>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "maskkv/budgeting.hpp"
#include "maskkv/common.hpp"

// Text profile:
//   maskkv-profile v1 D=<int> H=<int> samples=<int>
//   layer <l> importance <%.9g>        (D lines, l ascending)
//   heads <l> <%.9g> x H               (D lines, l ascending)
// Values are written to 9 significant digits; parsing that text and writing
// it again reproduces it byte for byte.

namespace maskkv {

inline std::string profile_to_text(const CalibrationProfile& p) {
    p.validate();
    std::string out = "maskkv-profile v1 D=" + std::to_string(p.num_layers()) + " H=" + std::to_string(p.num_heads()) +
                      " samples=" + std::to_string(p.samples) + "\n";
    for (std::size_t l = 0; l < p.num_layers(); ++l) {
        out += "layer " + std::to_string(l) + " importance " + format_g(p.layer_importance[l], 9) + "\n";
    }
    for (std::size_t l = 0; l < p.num_layers(); ++l) {
        out += "heads " + std::to_string(l);
        for (double v : p.head_preference[l]) out += " " + format_g(v, 9);
        out += "\n";
    }
    return out;
}

namespace detail {

struct LineCursor {
    const std::string& text;
    std::size_t pos = 0;
    std::size_t line_start = 0;

    bool next(std::string& line) {
        if (pos >= text.size()) return false;
        line_start = pos;
        const std::size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) {
            line = text.substr(pos);
            pos = text.size();
        } else {
            line = text.substr(pos, nl - pos);
            pos = nl + 1;
        }
        return true;
    }
};

inline std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream in(line);
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

inline double parse_double(const std::string& s, std::size_t offset) {
    if (s.empty()) throw ParseError(offset, "expected a number");
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v)) {
        throw ParseError(offset, "invalid number '" + s + "'");
    }
    return v;
}

inline std::size_t parse_count(const std::string& s, std::size_t offset) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos || s.size() > 12) {
        throw ParseError(offset, "invalid count '" + s + "'");
    }
    return static_cast<std::size_t>(std::stoull(s));
}

inline std::size_t header_field(const std::string& tok, const std::string& key, std::size_t offset) {
    if (tok.rfind(key + "=", 0) != 0) {
        throw ParseError(offset, "expected " + key + "=<int> in profile header");
    }
    return parse_count(tok.substr(key.size() + 1), offset);
}

}  // namespace detail

inline CalibrationProfile parse_profile(const std::string& text) {
    detail::LineCursor cur{text};
    std::string line;
    if (!cur.next(line)) throw ParseError(0, "empty profile");
    auto tok = detail::split_ws(line);
    if (tok.size() != 5 || tok[0] != "maskkv-profile" || tok[1] != "v1") {
        throw ParseError(0, "expected 'maskkv-profile v1' header");
    }
    const std::size_t d = detail::header_field(tok[2], "D", 0);
    const std::size_t h = detail::header_field(tok[3], "H", 0);
    CalibrationProfile p;
    p.samples = detail::header_field(tok[4], "samples", 0);
    if (d == 0 || h == 0) throw ParseError(0, "profile needs D > 0 and H > 0");

    for (std::size_t l = 0; l < d; ++l) {
        if (!cur.next(line)) throw ParseError(text.size(), "missing layer line " + std::to_string(l));
        tok = detail::split_ws(line);
        if (tok.size() != 4 || tok[0] != "layer" || tok[2] != "importance" ||
            detail::parse_count(tok[1], cur.line_start) != l) {
            throw ParseError(cur.line_start, "expected 'layer " + std::to_string(l) + " importance <value>'");
        }
        p.layer_importance.push_back(detail::parse_double(tok[3], cur.line_start));
    }
    for (std::size_t l = 0; l < d; ++l) {
        if (!cur.next(line)) throw ParseError(text.size(), "missing heads line " + std::to_string(l));
        tok = detail::split_ws(line);
        if (tok.size() != h + 2 || tok[0] != "heads" || detail::parse_count(tok[1], cur.line_start) != l) {
            throw ParseError(cur.line_start,
                             "expected 'heads " + std::to_string(l) + "' followed by " + std::to_string(h) + " values");
        }
        p.head_preference.emplace_back();
        for (std::size_t i = 0; i < h; ++i) p.head_preference.back().push_back(detail::parse_double(tok[i + 2], cur.line_start));
    }
    while (cur.next(line)) {
        if (!detail::split_ws(line).empty()) throw ParseError(cur.line_start, "unexpected content after profile");
    }
    try {
        p.validate();
    } catch (const ConfigError& e) {
        throw ParseError(0, e.what());
    }
    p.source = "profile";
    return p;
}

inline void save_profile(const CalibrationProfile& p, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot write '" + path + "'");
    out << profile_to_text(p);
    if (!out) throw InputError("short write to '" + path + "'");
}

inline CalibrationProfile load_profile(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    CalibrationProfile p = parse_profile(ss.str());
    p.source = path;
    return p;
}

}  // namespace maskkv

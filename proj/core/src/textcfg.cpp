#include "mmcl/textcfg.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "mmcl/errors.hpp"

namespace mmcl {

namespace {
std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}
}  // namespace

bool TextConfig::has(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key);
}

const std::string& TextConfig::get(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    if (it == sections_.end())
        throw ConfigError("missing section [" + section + "]");
    auto kt = it->second.find(key);
    if (kt == it->second.end())
        throw ConfigError("missing key '" + key + "' in section [" + section + "]");
    return kt->second;
}

std::string TextConfig::get_or(const std::string& section, const std::string& key,
                               const std::string& fallback) const {
    return has(section, key) ? get(section, key) : fallback;
}

void TextConfig::set(const std::string& section, const std::string& key, std::string value) {
    sections_[section][key] = std::move(value);
}

std::int64_t TextConfig::get_int(const std::string& section, const std::string& key) const {
    return std::stoll(get(section, key));
}
double TextConfig::get_double(const std::string& section, const std::string& key) const {
    return std::stod(get(section, key));
}
std::uint64_t TextConfig::get_u64(const std::string& section, const std::string& key) const {
    return std::stoull(get(section, key));
}

std::string TextConfig::write() const {
    std::ostringstream os;
    bool first = true;
    for (const auto& [name, sec] : sections_) {
        if (!first) os << "\n";
        first = false;
        os << "[" << name << "]\n";
        for (const auto& [k, v] : sec) os << k << " = " << v << "\n";
    }
    return os.str();
}

TextConfig TextConfig::parse(const std::string& text) {
    TextConfig cfg;
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": malformed section");
            section = trim(t.substr(1, t.size() - 2));
            cfg.sections_[section];  // keep empty sections
            continue;
        }
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        if (section.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": key outside any section");
        cfg.sections_[section][trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return cfg;
}

TextConfig TextConfig::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

void TextConfig::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << write();
}

std::string TextConfig::format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> TextConfig::split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : csv) {
        if (c == ',') {
            std::string t = trim(cur);
            if (!t.empty()) out.push_back(t);
            cur.clear();
        } else {
            cur += c;
        }
    }
    std::string t = trim(cur);
    if (!t.empty()) out.push_back(t);
    return out;
}

std::string TextConfig::join_list(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += ",";
        out += items[i];
    }
    return out;
}

}  // namespace mmcl

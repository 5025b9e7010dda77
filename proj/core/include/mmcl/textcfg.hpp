#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mmcl {

// Minimal human-diffable key/value format with [section] headers. Sections
// and keys are kept sorted so that writing is deterministic.
class TextConfig {
  public:
    using Section = std::map<std::string, std::string>;

    bool has(const std::string& section, const std::string& key) const;
    const std::string& get(const std::string& section, const std::string& key) const;
    std::string get_or(const std::string& section, const std::string& key,
                       const std::string& fallback) const;
    void set(const std::string& section, const std::string& key, std::string value);

    std::int64_t get_int(const std::string& section, const std::string& key) const;
    double get_double(const std::string& section, const std::string& key) const;
    std::uint64_t get_u64(const std::string& section, const std::string& key) const;

    const std::map<std::string, Section>& sections() const { return sections_; }
    bool has_section(const std::string& section) const { return sections_.count(section); }

    std::string write() const;
    static TextConfig parse(const std::string& text);
    static TextConfig load(const std::string& path);
    void save(const std::string& path) const;

    // Full-precision decimal text for doubles, and comma-list helpers.
    static std::string format_double(double v);
    static std::vector<std::string> split_list(const std::string& csv);
    static std::string join_list(const std::vector<std::string>& items);

  private:
    std::map<std::string, Section> sections_;
};

}  // namespace mmcl

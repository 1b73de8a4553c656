#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffem/em_diff.hpp"
#include "diffem/gmm.hpp"

namespace diffem::cli {

// Typed access to one JSON object that remembers which keys were read; finish() rejects the
// rest. Nested objects get their own reader and must be finished separately.
class ConfigReader {
public:
    ConfigReader(const nlohmann::json& doc, std::string path);

    bool has(const std::string& key) const;
    template <class T>
    T get(const std::string& key, const T& fallback);
    template <class T>
    T require(const std::string& key);
    const nlohmann::json& raw(const std::string& key);
    ConfigReader child(const std::string& key);
    void finish() const;

private:
    template <class T>
    T convert(const std::string& key);

    const nlohmann::json& doc_;
    std::string path_;
    std::set<std::string> used_;
};

// {"T", "fix_weights", "update_covariances", "eps_r"} on top of the given defaults.
EmConfig read_em(ConfigReader& cfg, const EmConfig& defaults);

// A GMM given inline as an object or as a path to a GMM JSON file.
GmmParams read_gmm_value(const nlohmann::json& value, const std::string& what);

// Runs one subcommand. Exit codes: 0 success, 1 invalid input, 2 numerical failure.
int cli_main(int argc, char** argv);

}  // namespace diffem::cli

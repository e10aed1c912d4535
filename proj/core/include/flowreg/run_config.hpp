#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "flowreg/flow.hpp"
#include "flowreg/losses.hpp"
#include "flowreg/network.hpp"
#include "flowreg/synth.hpp"
#include "flowreg/train.hpp"

namespace flowreg {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat key=value run configuration validated against a fixed schema:
/// unknown keys are rejected, every value must parse to its declared type.
/// File syntax: one key=value per line, '#' comments, blank lines ignored.
class RunConfig {
public:
    RunConfig();  // schema defaults

    static RunConfig from_file(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value);
    void load_file(const std::filesystem::path& path);

    std::int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    const std::string& get_string(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key) const;
    std::uint64_t seed() const { return std::uint64_t(get_int("seed")); }

    /// Sorted key=value dump of the effective configuration.
    std::string echo() const;
    void write_echo(const std::filesystem::path& path) const;

    // typed views over the relevant key groups
    PhantomConfig phantom_config() const;
    NetworkConfig network_config() const;
    LossConfig loss_config() const;
    TrainConfig train_config() const;
    SamplerConfig sampler_config() const;

private:
    std::map<std::string, std::string> values_;
    const std::string& raw(const std::string& key) const;
};

}  // namespace flowreg

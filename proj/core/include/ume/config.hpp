#pragma once

#include <filesystem>
#include <functional>
#include <istream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ume/data.hpp"
#include "ume/trainer.hpp"

/// Flat `key=value` configuration: one registry of named fields with
/// documented defaults, used by the config file, the command-line flags and
/// the config echo written next to every output.
namespace ume::config {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Field {
    std::string key;
    std::string doc;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;  // throws ConfigError on a bad value
};

/// Paths and analysis options on top of the training and generator settings.
struct RunConfig {
    trainer::TrainConfig train;
    data::GeneratorConfig generator;

    std::string data_dir = "data";
    std::string corpus;       // empty: <data-dir>/corpus.jsonl
    std::string tree;         // empty: <data-dir>/tree.tsv
    std::string splits;       // empty: <data-dir>/splits.json
    std::string out_dir = "run";
    std::string checkpoint;   // empty: <out-dir>/model.ckpt
    std::string split = "test";
    std::string tail_n = "auto";  // comma list of N, or auto for ceil(K/4)
    std::string bucketing = "level";
    bool ignore_empty_classes = false;
    std::string axis = "eta";
    std::string values = "0.5,0.9,1.3";

    // Accepted for parity with the reference parameter table; unused.
    std::string graph = "true";
    std::string multi = "true";
    std::string wandb = "false";

    [[nodiscard]] std::filesystem::path corpus_path() const;
    [[nodiscard]] std::filesystem::path tree_path() const;
    [[nodiscard]] std::filesystem::path splits_path() const;
    [[nodiscard]] std::filesystem::path checkpoint_path() const;
};

std::vector<Field> train_fields(trainer::TrainConfig& cfg);
std::vector<Field> generator_fields(data::GeneratorConfig& cfg);
/// Union of the above plus paths and analysis options. `seed` and `vocab`
/// drive both the generator and the model.
std::vector<Field> run_fields(RunConfig& cfg);

/// Parses `key=value` lines; `#` starts a comment; blank lines are skipped.
/// Throws ConfigError naming the source and line on malformed or repeated keys.
std::map<std::string, std::string> parse_key_values(std::istream& in, const std::string& source);
std::map<std::string, std::string> read_key_values(const std::filesystem::path& path);

/// Applies values to the registry. Unknown keys are rejected.
void apply_values(const std::vector<Field>& fields, const std::map<std::string, std::string>& values);

/// `key=value` lines in registry order.
std::string echo(const std::vector<Field>& fields);

trainer::TrainConfig train_config_from_echo(const std::string& text);

std::string fusion_name(evidential::FusionMode mode);
evidential::FusionMode parse_fusion(const std::string& text);

/// Checks cross-field constraints; throws ConfigError.
void validate(RunConfig& cfg);

}  // namespace ume::config

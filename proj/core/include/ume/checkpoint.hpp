#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "ume/encoder.hpp"
#include "ume/trainer.hpp"

/// Binary checkpoint: magic, format version, the training config echo, the
/// label tree, and every parameter tensor as little-endian float64.
namespace ume::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    encoder::ExpertEnsemble ensemble;
    trainer::TrainConfig config;
    int trained_experts = 0;  // experts whose stage has completed
};

std::string encode(const encoder::ExpertEnsemble& ensemble, const trainer::TrainConfig& config, int trained_experts);
/// Throws CheckpointError on a bad magic, a version mismatch, truncation or trailing bytes.
Checkpoint decode(const std::string& bytes);

void save(const std::filesystem::path& path, const encoder::ExpertEnsemble& ensemble,
          const trainer::TrainConfig& config, int trained_experts);
Checkpoint load(const std::filesystem::path& path);

}  // namespace ume::checkpoint

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "flowdisagg/adam.hpp"
#include "flowdisagg/data.hpp"
#include "flowdisagg/model.hpp"

namespace flowdisagg {

// On-disk layout: 8-byte magic "PFVAECKP", u64 little-endian header length,
// JSON header, then the payload of concatenated little-endian f32 arrays.
// The header's parameter index (name, shape, byte offset) exactly covers
// the payload; optimizer moments ride in the same index under adam.m/adam.v
// prefixes so a resumed run continues step-for-step.

struct LoadedCheckpoint {
    ModelConfig config;
    NormStats stats;
    std::string rng_state;
    std::int64_t epoch = 0;
    std::vector<bool> actnorm_initialized;  // per flow block
    bool has_adam = false;
    std::int64_t adam_step_count = 0;
    std::vector<std::pair<std::string, std::vector<float>>> params;
    std::vector<std::pair<std::string, std::vector<float>>> adam_m, adam_v;
};

void save_checkpoint(const std::string& path, PfvaeModel& model, const NormStats& stats,
                     const std::string& rng_state, std::int64_t epoch,
                     const Adam* adam = nullptr);

LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies parameters and actnorm flags into a model built from the same
// config. Name, order, and shape must match exactly.
void restore_model(const LoadedCheckpoint& checkpoint, PfvaeModel& model);

// Restores moments and step count into an optimizer over the restored
// model's parameters.
void restore_adam(const LoadedCheckpoint& checkpoint, Adam& adam);

}  // namespace flowdisagg

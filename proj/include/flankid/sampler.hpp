#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "flankid/ingest.hpp"

namespace flankid {

struct SamplerConfig {
    int exemplars_per_id = 4;  // N
    int batch_size = 64;
    // Triplet training keeps single-image flanks as extra negatives; angular
    // training drops them.
    bool include_singletons = false;
    std::uint64_t seed = 0;

    int flanks_per_batch() const { return batch_size / exemplars_per_id; }
    // Throws ConfigError unless N >= 2 and batch_size is a positive multiple of N.
    void validate() const;
};

struct BatchItem {
    std::string image_id;
    std::string flank_id;
    int label = 0;  // manifest class index
};

using Batch = std::vector<BatchItem>;

// Flank ids that may be drawn into a batch under the config.
std::vector<std::string> eligible_flanks(const Manifest& manifest, const SamplerConfig& cfg);

// batch_size / N distinct flanks, each contributing N exemplars (drawn without
// replacement, topped up with duplicates for flanks with fewer than N images),
// or a single image for a singleton flank.
Batch next_batch(const Manifest& manifest, const SamplerConfig& cfg, std::mt19937_64& rng);

// One epoch: ceil(eligible / flanks_per_batch) batches covering every eligible
// flank at least once. The final batch is padded with other flanks.
std::vector<Batch> epoch_plan(const Manifest& manifest, const SamplerConfig& cfg, std::mt19937_64& rng);

}  // namespace flankid

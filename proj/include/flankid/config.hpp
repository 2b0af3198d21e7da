#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "flankid/encoder.hpp"
#include "flankid/preprocess.hpp"
#include "flankid/sampler.hpp"

namespace flankid {

enum class LossKind { triplet, normalized_softmax, cosface, modified_cosface };
enum class LrSchedule { fixed, plateau };

std::string_view to_string(LossKind loss);
std::optional<LossKind> parse_loss(std::string_view text);
std::string_view to_string(LrSchedule schedule);
std::optional<LrSchedule> parse_schedule(std::string_view text);

struct TrainConfig {
    LossKind loss = LossKind::modified_cosface;
    // Unset values take the per-loss defaults: angular 0.001 with a plateau
    // schedule and batches of 64, triplet 0.0008 fixed with batches of 32.
    std::optional<double> lr;
    std::optional<LrSchedule> schedule;
    std::optional<int> batch_size;
    int epochs = 30;
    double s = 64.0;
    double m = 0.28;
    double alpha = 10.0;  // triplet margin
    int mining_start_epoch = 4;
    std::uint64_t seed = 0;
    double validation_fraction = 0.1;
    double plateau_factor = 0.5;
    int plateau_patience = 5;
    bool augment = true;

    bool angular() const noexcept { return loss != LossKind::triplet; }
    double effective_lr() const;
    LrSchedule effective_schedule() const;
    int effective_batch_size() const;
    void validate() const;
};

struct RunConfig {
    PreprocessConfig preprocess;
    EncoderConfig encoder;
    TrainConfig train;
    int exemplars_per_id = 4;
    // Defaults to true for triplet training and false for angular training.
    std::optional<bool> include_singletons;
    std::filesystem::path cache_dir;   // preprocess cache, relative to the config file
    std::filesystem::path detections;  // optional detector output

    SamplerConfig sampler() const;
    void validate() const;
};

// Strict parse: unknown sections or keys are a ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& cfg);
// Throws ConfigError when the file is missing or invalid. Relative paths in
// the file resolve against its directory.
RunConfig load_run_config(const std::filesystem::path& path);

// Applies "section.key=value"; the value is read as JSON and falls back to a
// plain string.
void apply_override(RunConfig& cfg, std::string_view assignment);

// 16 hex digits of FNV-1a over the canonical JSON of the config, paths excluded.
std::string config_fingerprint(const RunConfig& cfg);

}  // namespace flankid

#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "flankid/config.hpp"
#include "flankid/evaluate.hpp"
#include "flankid/synthetic.hpp"
#include "flankid/trainer.hpp"

namespace flankid {

// Synthetic end-to-end run: render, preprocess, split by flank, train, embed
// the held-out flanks and evaluate them next to the random-vector baseline.
struct ToyRunResult {
    TrainResult training;
    EmbeddingSet test_embeddings;
    std::vector<std::string> test_labels;
    EvalReport test;
    EvalReport naive;
    double seconds = 0.0;
};

ToyRunResult run_toy_experiment(const SyntheticConfig& data, const RunConfig& run, double test_fraction,
                                std::uint64_t split_seed, std::ostream* progress = nullptr);

// Three-dimensional CosFace run on a handful of toy classes; the embeddings
// are those of the training images themselves.
struct SphereDemoOptions {
    int classes = 5;
    int views = 12;
    int epochs = 120;
    double margin = 0.3;
    std::uint64_t seed = 0;
};

struct SphereDemoResult {
    EmbeddingSet embeddings;
    std::vector<std::string> labels;
    double ccdr = 0.0;
};

// `base` supplies preprocessing and optimizer settings; loss, dimension,
// margin, epochs and seed are overwritten from `options`.
RunConfig sphere_toy_defaults(int classes);
SphereDemoResult run_sphere_toy(RunConfig base, const SphereDemoOptions& options, std::ostream* progress = nullptr);

}  // namespace flankid

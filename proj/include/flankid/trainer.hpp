#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "flankid/config.hpp"
#include "flankid/embedding_set.hpp"
#include "flankid/encoder.hpp"
#include "flankid/ingest.hpp"
#include "flankid/optim.hpp"
#include "flankid/sampler.hpp"

namespace flankid {

// Supplies the preprocessed (unnormalized) input of an image.
class InputSource {
public:
    virtual ~InputSource() = default;
    virtual bool contains(const std::string& image_id) const = 0;
    // Throws NotFoundError when the image has no input.
    virtual StackedInput get(const std::string& image_id) const = 0;
};

class MemorySource : public InputSource {
public:
    MemorySource() = default;
    explicit MemorySource(std::map<std::string, StackedInput> inputs) : inputs_(std::move(inputs)) {}
    void put(const std::string& image_id, StackedInput input) { inputs_[image_id] = std::move(input); }
    bool contains(const std::string& image_id) const override { return inputs_.count(image_id) != 0; }
    StackedInput get(const std::string& image_id) const override;

private:
    std::map<std::string, StackedInput> inputs_;
};

// Reads the preprocess cache written by the `preprocess` step.
class CacheSource : public InputSource {
public:
    explicit CacheSource(std::filesystem::path cache_dir) : dir_(std::move(cache_dir)) {}
    bool contains(const std::string& image_id) const override;
    StackedInput get(const std::string& image_id) const override;

private:
    std::filesystem::path dir_;
};

struct Checkpoint {
    RunConfig config;
    std::string fingerprint;
    int epoch = 0;
    std::optional<double> dt5ap;
    std::optional<double> t5rmd;
    std::unique_ptr<Encoder> encoder;
    Eigen::MatrixXf head;  // C x D, angular losses only

    bool angular() const { return config.train.angular(); }
};

// Binary file: "FKCK", uint32 version, uint32 header length, JSON header,
// then every named tensor as raw little-endian float32 in header order.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws ParseError on a corrupt file or a fingerprint that does not match the
// stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct EpochMetrics {
    int epoch = 0;
    double loss = 0.0;  // mean over the epoch's batches
    double lr = 0.0;
    std::optional<double> dt5ap;
    std::optional<double> t5rmd;
    std::optional<double> ccdr;
    std::string mining;  // triplet only: "random negatives" or "semi-hard"
    std::size_t semi_hard = 0;
    std::size_t random = 0;
    double seconds = 0.0;
};

std::string epoch_metrics_json(const EpochMetrics& m);

struct TrainOptions {
    std::filesystem::path metrics_log;  // JSONL, one line per epoch
    std::filesystem::path checkpoint;   // best checkpoint, rewritten on improvement
    std::ostream* progress = nullptr;   // human-readable per-epoch lines
};

// Owns the encoder, head and optimizer for one training run over the train
// split of a manifest. Labels index the run's training flanks.
class Trainer {
public:
    Trainer(const Manifest& train_set, const InputSource& inputs, const RunConfig& cfg);

    // One optimizer step. Returns the batch loss before the update.
    double step(const Batch& batch, int epoch);
    // Batch loss without updating anything; augmentation is skipped.
    double loss_on(const Batch& batch, int epoch);
    // Runs one epoch of sampler batches.
    EpochMetrics run_epoch(int epoch);

    Encoder& encoder() { return *encoder_; }
    const Manifest& train_set() const { return train_; }
    Adam& optimizer() { return *adam_; }
    const nn::Parameter& head() const { return head_; }
    Checkpoint checkpoint(int epoch) const;

private:
    Manifest train_;
    const InputSource& inputs_;
    RunConfig cfg_;
    std::unique_ptr<Encoder> encoder_;
    nn::Parameter head_;
    std::unique_ptr<Adam> adam_;
    std::mt19937_64 rng_;
    std::map<std::string, int> labels_;

    double forward_backward(const Batch& batch, int epoch, bool augment, bool update, EpochMetrics* stats);
};

// Splits training flanks into train and validation, trains for the configured
// epochs and returns the checkpoint with the best validation DT5AP (the last
// epoch when there is no usable validation shard).
struct TrainResult {
    Checkpoint best;
    std::vector<EpochMetrics> history;
};

TrainResult train(const Manifest& manifest, const InputSource& inputs, const RunConfig& cfg,
                  const TrainOptions& options = {});

// One vector per image in shard order; unit-norm for angular checkpoints.
EmbeddingSet embed_all(Encoder& encoder, bool normalize_output, const Manifest& shard, const InputSource& inputs,
                       const PreprocessConfig& preprocess, int batch_size = 32);
EmbeddingSet embed_all(const Checkpoint& ckpt, const Manifest& shard, const InputSource& inputs,
                       int batch_size = 32);

}  // namespace flankid

#include "flankid/experiment.hpp"

#include <algorithm>
#include <chrono>

namespace flankid {

ToyRunResult run_toy_experiment(const SyntheticConfig& data, const RunConfig& run, double test_fraction,
                                std::uint64_t split_seed, std::ostream* progress) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto views = render_synthetic(data);
    const MemorySource inputs(preprocess_views(views, run.preprocess));
    const Manifest split = split_by_flank(synthetic_manifest(views), test_fraction, split_seed);

    ToyRunResult out;
    TrainOptions options;
    options.progress = progress;
    out.training = train(split, inputs, run, options);

    const Manifest test = split.with_split(Split::test);
    out.test_embeddings = embed_all(out.training.best, test, inputs);
    for (const auto& r : test.records()) out.test_labels.push_back(r.flank_id);
    const SimilarityMetric metric =
        run.train.angular() ? SimilarityMetric::cosine_similarity : SimilarityMetric::negative_euclidean;
    out.test = evaluate_embeddings(out.test_embeddings, out.test_labels, metric);
    out.naive = naive_baseline(out.test_embeddings.image_ids, out.test_labels, split_seed + 1);
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

SphereDemoResult run_sphere_toy(RunConfig base, const SphereDemoOptions& options, std::ostream* progress) {
    base.encoder.embedding_dim = 3;
    base.train.loss = LossKind::cosface;
    base.train.m = options.margin;
    base.train.epochs = options.epochs;
    base.train.validation_fraction = 0.0;
    base.train.seed = options.seed;
    base.validate();

    SyntheticConfig data;
    data.individuals = options.classes;
    data.views = options.views;
    data.seed = options.seed;
    const auto views = render_synthetic(data);
    const MemorySource inputs(preprocess_views(views, base.preprocess));
    const Manifest manifest = synthetic_manifest(views);
    TrainOptions train_options;
    train_options.progress = progress;
    const TrainResult trained = train(manifest, inputs, base, train_options);

    SphereDemoResult out;
    out.embeddings = embed_all(trained.best, manifest, inputs);
    for (const auto& r : manifest.records()) out.labels.push_back(r.flank_id);
    out.ccdr = ccdr(out.embeddings, out.labels);
    return out;
}

// Small inputs and batches sized for a few classes.
RunConfig sphere_toy_defaults(int classes) {
    RunConfig cfg;
    cfg.preprocess.height = 32;
    cfg.preprocess.width = 64;
    cfg.train.batch_size = cfg.exemplars_per_id * std::min(classes, 4);
    return cfg;
}

}  // namespace flankid

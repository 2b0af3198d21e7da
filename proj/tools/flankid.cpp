// flankid command line: preprocess, train, embed, evaluate, serve, sphere-demo, synth.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "flankid/config.hpp"
#include "flankid/error.hpp"
#include "flankid/evaluate.hpp"
#include "flankid/experiment.hpp"
#include "flankid/service.hpp"
#include "flankid/synthetic.hpp"
#include "flankid/tensor_io.hpp"
#include "flankid/trainer.hpp"

// After Eigen: <resolv.h> defines _res.
#include <httplib.h>

using namespace flankid;
using nlohmann::json;

namespace {

constexpr int kUsage = 2;

// Usage problems detected after CLI parsing.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string error_type(const std::exception& e) {
    if (dynamic_cast<const ParseError*>(&e)) return "parse_error";
    if (dynamic_cast<const ConfigError*>(&e)) return "config_error";
    if (dynamic_cast<const ValidationError*>(&e)) return "validation_error";
    if (dynamic_cast<const ShapeError*>(&e)) return "shape_error";
    if (dynamic_cast<const NotFoundError*>(&e)) return "not_found";
    if (dynamic_cast<const ConflictError*>(&e)) return "conflict";
    if (dynamic_cast<const Error*>(&e)) return "error";
    return "internal_error";
}

void print_error(const std::exception& e) {
    std::cerr << json{{"error", {{"type", error_type(e)}, {"message", e.what()}}}}.dump() << std::endl;
}

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
    for (const auto& o : overrides) apply_override(cfg, o);
    cfg.validate();
    return cfg;
}

Manifest select_split(const Manifest& m, const std::string& split) {
    if (split == "all") return m;
    const auto s = parse_split(split);
    if (!s) throw UsageError("--split must be train, test, unassigned or all");
    return m.with_split(*s);
}

// --- verbs ---------------------------------------------------------------------

struct Common {
    std::string config;
    std::vector<std::string> overrides;
};

int run_preprocess(const Common& common, const std::string& manifest_path, std::string out_dir,
                   std::string detections_path, bool force) {
    const RunConfig cfg = resolve_config(common.config, common.overrides);
    if (out_dir.empty()) out_dir = cfg.cache_dir.string();
    if (out_dir.empty()) throw UsageError("preprocess needs --out or paths.cache_dir in the config");
    if (detections_path.empty()) detections_path = cfg.detections.string();
    const Manifest manifest = load_manifest(manifest_path, LoadOptions{.require_readable_uris = true});
    std::filesystem::create_directories(out_dir);

    std::optional<DetectionTable> detections;
    if (!detections_path.empty()) detections = load_detections(detections_path);
    std::unique_ptr<MattingStage> matting;
    if (cfg.preprocess.use_background_removal) matting = std::make_unique<ExternalMattingStage>(cfg.preprocess.background_stage);

    std::size_t written = 0, skipped = 0, matting_failed = 0;
    std::vector<std::string> no_box;
    for (const auto& r : manifest.records()) {
        const auto target = cache_path(out_dir, r.image_id);
        if (!force && std::filesystem::exists(target)) {
            ++skipped;
            continue;
        }
        std::optional<BoundingBox> box;
        if (detections) {
            box = best_box(*detections, r.image_id);
            if (!box) {
                no_box.push_back(r.image_id);
                continue;
            }
        }
        const auto outcome = preprocess_image(load_rgb(manifest.resolve(r)), box, cfg.preprocess, matting.get());
        matting_failed += outcome.matting_failed;
        write_stacked(target, outcome.input);
        ++written;
    }
    std::cout << json{{"written", written}, {"skipped", skipped}, {"matting_failed", matting_failed},
                      {"missing_detections", no_box}}
                     .dump(2)
              << std::endl;
    if (!no_box.empty()) throw ValidationError(std::to_string(no_box.size()) + " images have no detection box");
    return 0;
}

int run_train(const Common& common, const std::string& manifest_path, std::string cache_dir, const std::string& out,
              const std::string& metrics_log, bool quiet) {
    const RunConfig cfg = resolve_config(common.config, common.overrides);
    if (cache_dir.empty()) cache_dir = cfg.cache_dir.string();
    if (cache_dir.empty()) throw UsageError("train needs --cache or paths.cache_dir in the config");
    const Manifest manifest = load_manifest(manifest_path);
    TrainOptions options;
    options.checkpoint = out;
    options.metrics_log = metrics_log;
    options.progress = quiet ? nullptr : &std::cerr;
    const CacheSource inputs(cache_dir);
    const TrainResult result = train(manifest, inputs, cfg, options);
    std::cout << json{{"checkpoint", out},
                      {"epoch", result.best.epoch},
                      {"dt5ap", result.best.dt5ap ? json(*result.best.dt5ap) : json(nullptr)},
                      {"t5rmd", result.best.t5rmd ? json(*result.best.t5rmd) : json(nullptr)},
                      {"fingerprint", result.best.fingerprint}}
                     .dump(2)
              << std::endl;
    return 0;
}

int run_embed(const std::string& checkpoint, const std::string& manifest_path, std::string cache_dir,
              const std::string& split, const std::string& out) {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    if (cache_dir.empty()) cache_dir = ckpt.config.cache_dir.string();
    if (cache_dir.empty()) throw UsageError("embed needs --cache");
    const Manifest shard = select_split(load_manifest(manifest_path), split);
    const EmbeddingSet set = embed_all(ckpt, shard, CacheSource(cache_dir));
    write_embedding_set(out, set);
    std::cout << json{{"embeddings", out}, {"count", set.size()}, {"dim", set.dim()}, {"normalized", set.normalized}}.dump(2)
              << std::endl;
    return 0;
}

std::vector<std::string> labels_for(const EmbeddingSet& set, const Manifest& manifest) {
    std::vector<std::string> labels;
    for (const auto& id : set.image_ids) {
        const auto* r = manifest.find(id);
        if (!r) throw NotFoundError("image '" + id + "' is not in the manifest");
        labels.push_back(r->flank_id);
    }
    return labels;
}

int run_evaluate(const std::string& embeddings, const std::string& manifest_path, int k, std::string metric_name,
                 const std::string& curve_csv, bool naive, std::uint64_t seed, bool diagnostics) {
    const EmbeddingSet set = read_embedding_set(embeddings);
    const auto labels = labels_for(set, load_manifest(manifest_path));
    if (metric_name.empty()) metric_name = set.normalized ? "cosine_similarity" : "negative_euclidean";
    const auto metric = parse_metric(metric_name);
    if (!metric) throw UsageError("--metric must be cosine_similarity or negative_euclidean");
    const EvalReport report =
        naive ? naive_baseline(set.image_ids, labels, seed, k) : evaluate_embeddings(set, labels, *metric, k);
    if (!curve_csv.empty()) write_rank_curve_csv(report, curve_csv);
    std::cout << report_to_json(report, diagnostics) << std::endl;
    return 0;
}

volatile std::sig_atomic_t g_stop = 0;
httplib::Server* g_server = nullptr;

int run_serve(const ServiceConfig& scfg, const std::string& host, int port) {
    ReviewService service(scfg);
    httplib::Server server;
    service.register_routes(server);
    g_server = &server;
    std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (g_server) g_server->stop();
    });
    const int bound = port == 0 ? server.bind_to_any_port(host) : (server.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
    std::cout << json{{"listening", host + ":" + std::to_string(bound)}, {"gallery", service.gallery().size()}}.dump()
              << std::endl;
    server.listen_after_bind();
    return 0;
}

int run_sphere_demo(const Common& common, int dim, const std::string& embeddings, const std::string& manifest_path,
                    const std::string& out, double margin, int classes, int views, int epochs, std::uint64_t seed,
                    bool quiet) {
    if (dim != 3) throw ValidationError("the sphere demo needs --dim 3, got " + std::to_string(dim));
    if (!embeddings.empty()) {
        if (manifest_path.empty()) throw UsageError("--embeddings needs --manifest for labels");
        const EmbeddingSet set = read_embedding_set(embeddings);
        const auto labels = labels_for(set, load_manifest(manifest_path));
        sphere_demo_export(set, labels, out);
        std::cout << json{{"csv", out}, {"rows", set.size()}}.dump(2) << std::endl;
        return 0;
    }

    RunConfig cfg = common.config.empty() ? sphere_toy_defaults(classes) : load_run_config(common.config);
    for (const auto& o : common.overrides) apply_override(cfg, o);
    SphereDemoOptions options;
    options.classes = classes;
    options.views = views;
    options.epochs = epochs;
    options.margin = margin;
    options.seed = seed;
    const SphereDemoResult result = run_sphere_toy(cfg, options, quiet ? nullptr : &std::cerr);
    sphere_demo_export(result.embeddings, result.labels, out);
    std::cout << json{{"csv", out}, {"rows", result.embeddings.size()}, {"margin", margin}, {"ccdr", result.ccdr}}.dump(2)
              << std::endl;
    return 0;
}

int run_synth(const std::string& out, int individuals, int views, std::uint64_t seed) {
    SyntheticConfig cfg;
    cfg.individuals = individuals;
    cfg.views = views;
    cfg.seed = seed;
    const Manifest m = write_synthetic(cfg, out);
    std::cout << json{{"dir", out},
                      {"images", m.size()},
                      {"manifest", (std::filesystem::path(out) / "manifest.jsonl").string()},
                      {"detections", (std::filesystem::path(out) / "detections.jsonl").string()}}
                     .dump(2)
              << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flankid: open-set flank re-identification toolkit"};
    app.require_subcommand(1);
    app.fallthrough(false);

    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "run config JSON")->check(CLI::ExistingFile);
        sub->add_option("--set", common.overrides, "override, section.key=value (repeatable)");
    };

    std::string manifest, cache, out, detections, checkpoint, split = "all", embeddings, metric, curve_csv,
        metrics_log, host = "127.0.0.1", data_dir, background_stage;
    bool force = false, quiet = false, naive = false, diagnostics = false;
    int k = 5, port = 8080, dim = 3, classes = 5, views = 12, epochs = 120, individuals = 40;
    double margin = 0.3;
    std::uint64_t seed = 0;

    auto* pre = app.add_subcommand("preprocess", "crop, edge channel and resize every manifest image into the cache");
    add_common(pre);
    pre->add_option("--manifest", manifest, "manifest JSONL")->required()->check(CLI::ExistingFile);
    pre->add_option("--out", out, "cache directory");
    pre->add_option("--detections", detections, "detector output JSONL")->check(CLI::ExistingFile);
    pre->add_flag("--force", force, "overwrite cached inputs");

    auto* tr = app.add_subcommand("train", "train an encoder and keep the best validation checkpoint");
    add_common(tr);
    tr->add_option("--manifest", manifest, "manifest JSONL")->required()->check(CLI::ExistingFile);
    tr->add_option("--cache", cache, "preprocess cache directory");
    tr->add_option("--out", out, "checkpoint path")->required();
    tr->add_option("--metrics-log", metrics_log, "per-epoch JSONL log");
    tr->add_flag("--quiet", quiet, "no per-epoch progress on stderr");

    auto* em = app.add_subcommand("embed", "embed a manifest shard with a checkpoint");
    em->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
    em->add_option("--manifest", manifest, "manifest JSONL")->required()->check(CLI::ExistingFile);
    em->add_option("--cache", cache, "preprocess cache directory");
    em->add_option("--split", split, "train, test, unassigned or all");
    em->add_option("--out", out, "embedding set file")->required();

    auto* ev = app.add_subcommand("evaluate", "rank metrics for an embedding set");
    ev->add_option("--embeddings", embeddings, "embedding set file")->required()->check(CLI::ExistingFile);
    ev->add_option("--manifest", manifest, "manifest JSONL")->required()->check(CLI::ExistingFile);
    ev->add_option("--k", k, "k_max")->check(CLI::PositiveNumber);
    ev->add_option("--metric", metric, "cosine_similarity or negative_euclidean");
    ev->add_option("--curve-csv", curve_csv, "write the rank-match curve");
    ev->add_flag("--naive", naive, "evaluate random unit vectors instead");
    ev->add_option("--seed", seed, "seed for --naive");
    ev->add_flag("--diagnostics", diagnostics, "include per-query diagnostics");

    auto* sv = app.add_subcommand("serve", "HTTP review service");
    sv->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
    sv->add_option("--data-dir", data_dir, "service state directory")->required();
    sv->add_option("--manifest", manifest, "starting gallery")->check(CLI::ExistingFile);
    sv->add_option("--cache", cache, "preprocess cache of the starting gallery");
    sv->add_option("--detections", detections, "detector output for uploads")->check(CLI::ExistingFile);
    sv->add_option("--background-stage", background_stage, "matting executable for uploads");
    sv->add_option("--host", host, "bind address");
    sv->add_option("--port", port, "port, 0 picks a free one")->check(CLI::Range(0, 65535));

    auto* sd = app.add_subcommand("sphere-demo", "unit-sphere CSV of 3-dimensional embeddings");
    add_common(sd);
    sd->add_option("--dim", dim, "embedding dimension (must be 3)");
    sd->add_option("--embeddings", embeddings, "export this set instead of training")->check(CLI::ExistingFile);
    sd->add_option("--manifest", manifest, "labels for --embeddings")->check(CLI::ExistingFile);
    sd->add_option("--out", out, "CSV path")->required();
    sd->add_option("--margin", margin, "CosFace margin for the toy run");
    sd->add_option("--classes", classes, "toy classes")->check(CLI::PositiveNumber);
    sd->add_option("--views", views, "views per class")->check(CLI::PositiveNumber);
    sd->add_option("--epochs", epochs, "epochs")->check(CLI::PositiveNumber);
    sd->add_option("--seed", seed, "seed");
    sd->add_flag("--quiet", quiet, "no per-epoch progress on stderr");

    auto* sy = app.add_subcommand("synth", "write a synthetic rosette dataset");
    sy->add_option("--out", out, "output directory")->required();
    sy->add_option("--individuals", individuals, "individuals")->check(CLI::PositiveNumber);
    sy->add_option("--views", views, "views per individual")->check(CLI::PositiveNumber);
    sy->add_option("--seed", seed, "seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << app.help() << '\n';
        std::cerr << json{{"error", {{"type", "usage"}, {"message", e.what()}}}}.dump() << std::endl;
        return kUsage;
    }

    try {
        if (*pre) return run_preprocess(common, manifest, out, detections, force);
        if (*tr) return run_train(common, manifest, cache, out, metrics_log, quiet);
        if (*em) return run_embed(checkpoint, manifest, cache, split, out);
        if (*ev) return run_evaluate(embeddings, manifest, k, metric, curve_csv, naive, seed, diagnostics);
        if (*sv) {
            ServiceConfig scfg;
            scfg.checkpoint = checkpoint;
            scfg.data_dir = data_dir;
            scfg.manifest = manifest;
            scfg.cache_dir = cache;
            scfg.detections = detections;
            scfg.background_stage = background_stage;
            return run_serve(scfg, host, port);
        }
        if (*sd) return run_sphere_demo(common, dim, embeddings, manifest, out, margin, classes, views, epochs, seed, quiet);
        if (*sy) return run_synth(out, individuals, views, seed);
    } catch (const UsageError& e) {
        std::cerr << app.help() << '\n';
        std::cerr << json{{"error", {{"type", "usage"}, {"message", e.what()}}}}.dump() << std::endl;
        return kUsage;
    } catch (const ConfigError& e) {
        print_error(e);
        return kUsage;
    } catch (const std::exception& e) {
        print_error(e);
        return 1;
    }
    return kUsage;
}

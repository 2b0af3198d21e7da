#include "flankid/trainer.hpp"

#include "flankid/error.hpp"
#include "flankid/evaluate.hpp"
#include "flankid/losses.hpp"
#include "flankid/tensor_io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace flankid {

using nlohmann::json;

StackedInput MemorySource::get(const std::string& image_id) const {
    auto it = inputs_.find(image_id);
    if (it == inputs_.end()) throw NotFoundError("no preprocessed input for '" + image_id + "'");
    return it->second;
}

bool CacheSource::contains(const std::string& image_id) const {
    return std::filesystem::exists(cache_path(dir_, image_id));
}

StackedInput CacheSource::get(const std::string& image_id) const {
    const auto path = cache_path(dir_, image_id);
    if (!std::filesystem::exists(path)) throw NotFoundError("no preprocessed input for '" + image_id + "'");
    return read_stacked(path);
}

namespace {

constexpr char kCheckpointMagic[4] = {'F', 'K', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void copy_state(const Encoder& from, Encoder& to) {
    const auto& fp = from.parameters();
    const auto& tp = to.parameters();
    const auto& fb = from.buffers();
    const auto& tb = to.buffers();
    if (fp.size() != tp.size() || fb.size() != tb.size()) throw ShapeError("encoder layouts differ");
    for (std::size_t i = 0; i < fp.size(); ++i) tp[i]->value = fp[i]->value;
    for (std::size_t i = 0; i < fb.size(); ++i) tb[i]->value = fb[i]->value;
}

Eigen::MatrixXd to_matrix(const nn::Tensor& y) {
    Eigen::MatrixXd m(y.n(), static_cast<Eigen::Index>(y.stride()));
    for (int i = 0; i < y.n(); ++i)
        for (std::size_t d = 0; d < y.stride(); ++d) m(i, static_cast<Eigen::Index>(d)) = y.sample(i)[d];
    return m;
}

nn::Tensor to_tensor(const Eigen::MatrixXd& m, const nn::Tensor& like) {
    nn::Tensor t(like.n(), like.c(), like.h(), like.w());
    for (int i = 0; i < t.n(); ++i)
        for (std::size_t d = 0; d < t.stride(); ++d) t.sample(i)[d] = static_cast<float>(m(i, static_cast<Eigen::Index>(d)));
    return t;
}

losses::MarginMode margin_mode(LossKind loss) {
    switch (loss) {
        case LossKind::normalized_softmax: return losses::MarginMode::none;
        case LossKind::cosface: return losses::MarginMode::constant;
        default: return losses::MarginMode::adaptive;
    }
}

Manifest training_records(const Manifest& manifest) {
    const bool any_split = std::any_of(manifest.records().begin(), manifest.records().end(),
                                       [](const ImageRecord& r) { return r.split != Split::unassigned; });
    return any_split ? manifest.with_split(Split::train) : manifest;
}

std::string join_ids(const std::vector<std::string>& ids, std::size_t limit = 20) {
    std::string out;
    for (std::size_t i = 0; i < ids.size() && i < limit; ++i) out += (i ? ", " : "") + ids[i];
    if (ids.size() > limit) out += ", ... (" + std::to_string(ids.size()) + " total)";
    return out;
}

}  // namespace

std::string epoch_metrics_json(const EpochMetrics& m) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    json j{{"epoch", m.epoch},     {"loss", m.loss}, {"lr", m.lr},       {"dt5ap", opt(m.dt5ap)},
           {"t5rmd", opt(m.t5rmd)}, {"ccdr", opt(m.ccdr)}, {"seconds", m.seconds}};
    if (!m.mining.empty()) {
        j["mining"] = m.mining;
        j["semi_hard"] = m.semi_hard;
        j["random"] = m.random;
    }
    return j.dump();
}

// ---- checkpoints --------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    if (!ckpt.encoder) throw Error("checkpoint has no encoder");
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    json tensors = json::array();
    std::string payload;
    auto add = [&](const std::string& name, const nn::Tensor& t) {
        tensors.push_back({{"name", name}, {"shape", t.shape()}});
        for (float v : t.values()) le::put_f32(payload, v);
    };
    for (const auto* p : ckpt.encoder->parameters()) add(p->name, p->value);
    for (const auto* b : ckpt.encoder->buffers()) add("buffer:" + b->name, b->value);
    if (ckpt.head.size() > 0) {
        nn::Tensor h(static_cast<int>(ckpt.head.rows()), static_cast<int>(ckpt.head.cols()), 1, 1);
        for (Eigen::Index r = 0; r < ckpt.head.rows(); ++r)
            for (Eigen::Index c = 0; c < ckpt.head.cols(); ++c) h.at(static_cast<int>(r), static_cast<int>(c), 0, 0) = ckpt.head(r, c);
        add("head", h);
    }
    const json header{{"config", to_json(ckpt.config)}, {"fingerprint", ckpt.fingerprint}, {"epoch", ckpt.epoch},
                      {"dt5ap", opt(ckpt.dt5ap)},       {"t5rmd", opt(ckpt.t5rmd)},      {"tensors", tensors}};
    const std::string head_text = header.dump();
    std::string out;
    out.append(kCheckpointMagic, 4);
    le::put_u32(out, kCheckpointVersion);
    le::put_u32(out, static_cast<std::uint32_t>(head_text.size()));
    out += head_text;
    out += payload;
    atomic_write(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    le::Reader r(bytes);
    if (bytes.size() < 12 || r.bytes(4) != std::string(kCheckpointMagic, 4))
        throw ParseError("not a checkpoint: " + path.string());
    if (r.u32() != kCheckpointVersion) throw ParseError("unsupported checkpoint version in " + path.string());
    json header;
    try {
        header = json::parse(r.bytes(r.u32()));
    } catch (const json::parse_error& e) {
        throw ParseError("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.config = run_config_from_json(header.at("config"));
    } catch (const ConfigError& e) {
        throw ParseError("checkpoint config is invalid: " + std::string(e.what()));
    }
    ckpt.fingerprint = header.at("fingerprint").get<std::string>();
    if (ckpt.fingerprint != config_fingerprint(ckpt.config))
        throw ParseError("checkpoint fingerprint does not match its config in " + path.string());
    ckpt.epoch = header.at("epoch").get<int>();
    if (!header.at("dt5ap").is_null()) ckpt.dt5ap = header.at("dt5ap").get<double>();
    if (!header.at("t5rmd").is_null()) ckpt.t5rmd = header.at("t5rmd").get<double>();
    ckpt.encoder = build_encoder(ckpt.config.encoder, 0);

    std::map<std::string, nn::Tensor*> slots;
    for (auto* p : ckpt.encoder->parameters()) slots[p->name] = &p->value;
    for (auto* b : ckpt.encoder->buffers()) slots["buffer:" + b->name] = &b->value;
    std::set<std::string> filled;
    for (const auto& t : header.at("tensors")) {
        const auto name = t.at("name").get<std::string>();
        const auto shape = t.at("shape").get<std::array<int, 4>>();
        nn::Tensor value(shape[0], shape[1], shape[2], shape[3]);
        for (auto& v : value.values()) v = r.f32();
        if (name == "head") {
            ckpt.head.resize(shape[0], shape[1]);
            for (int i = 0; i < shape[0]; ++i)
                for (int d = 0; d < shape[1]; ++d) ckpt.head(i, d) = value.at(i, d, 0, 0);
            continue;
        }
        auto it = slots.find(name);
        if (it == slots.end()) throw ParseError("checkpoint tensor '" + name + "' does not belong to the encoder");
        if (!it->second->same_shape(value)) throw ParseError("checkpoint tensor '" + name + "' has the wrong shape");
        *it->second = std::move(value);
        filled.insert(name);
    }
    if (filled.size() != slots.size()) throw ParseError("checkpoint is missing encoder tensors");
    if (r.remaining() != 0) throw ParseError("trailing bytes in checkpoint " + path.string());
    return ckpt;
}

// ---- trainer ------------------------------------------------------------------

Trainer::Trainer(const Manifest& train_set, const InputSource& inputs, const RunConfig& cfg)
    : train_(train_set), inputs_(inputs), cfg_(cfg), rng_(cfg.train.seed) {
    cfg_.validate();
    if (train_.empty()) throw ValidationError("train split is empty");
    encoder_ = build_encoder(cfg_.encoder, cfg_.train.seed);
    std::vector<nn::Parameter*> params = encoder_->parameters();
    if (cfg_.train.angular()) {
        const int classes = static_cast<int>(train_.num_classes());
        head_.name = "head";
        head_.value = nn::Tensor(classes, cfg_.encoder.embedding_dim, 1, 1);
        head_.grad = nn::Tensor(classes, cfg_.encoder.embedding_dim, 1, 1);
        std::normal_distribution<float> normal(0.0f, 1.0f);
        std::mt19937_64 head_rng(cfg_.train.seed ^ 0x9e3779b97f4a7c15ull);
        for (auto& v : head_.value.values()) v = normal(head_rng);
        params.push_back(&head_);
    }
    adam_ = std::make_unique<Adam>(params, cfg_.train.effective_lr());
}

double Trainer::forward_backward(const Batch& batch, int epoch, bool augment_inputs, bool update, EpochMetrics* stats) {
    if (batch.empty()) throw ValidationError("empty batch");
    std::vector<StackedInput> xs;
    std::vector<int> labels;
    xs.reserve(batch.size());
    for (const auto& item : batch) {
        if (item.label < 0 || static_cast<std::size_t>(item.label) >= train_.num_classes())
            throw ValidationError("label " + std::to_string(item.label) + " of '" + item.image_id +
                                  "' is outside the training classes");
        StackedInput s = inputs_.get(item.image_id);
        if (!std::all_of(s.data().begin(), s.data().end(), [](float v) { return std::isfinite(v); }))
            throw ValidationError("non-finite values in the input of '" + item.image_id + "'");
        if (augment_inputs) s = augment(s, cfg_.preprocess, rng_);
        xs.push_back(normalize(s, cfg_.preprocess));
        labels.push_back(item.label);
    }
    const nn::Tensor x = to_batch(xs);
    if (update) {
        encoder_->zero_grad();
        head_.grad.fill(0.0f);
    }
    auto non_finite = [&] {
        std::vector<std::string> ids;
        for (const auto& item : batch) ids.push_back(item.image_id);
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << " (lr " << adam_->lr() << "); batch: " << join_ids(ids, 64);
        throw Error(msg.str());
    };
    const nn::Tensor y = encoder_->forward(x, true);
    losses::BatchLabels bl{to_matrix(y), labels};
    if (!bl.embeddings.allFinite()) non_finite();

    losses::LossWithGrad result;
    if (cfg_.train.angular()) {
        losses::AngularHead head;
        head.weights.resize(head_.value.n(), head_.value.c());
        for (int c = 0; c < head_.value.n(); ++c)
            for (int d = 0; d < head_.value.c(); ++d) head.weights(c, d) = head_.value.at(c, d, 0, 0);
        head.scale = cfg_.train.s;
        head.margin = cfg_.train.loss == LossKind::normalized_softmax ? 0.0 : cfg_.train.m;
        result = losses::angular_loss(bl, head, margin_mode(cfg_.train.loss));
    } else {
        losses::TripletConfig tc;
        tc.margin = cfg_.train.alpha;
        tc.mining_start_epoch = cfg_.train.mining_start_epoch;
        const auto mined = losses::mine_batch_triplets(bl, tc, epoch, rng_);
        if (stats) {
            stats->semi_hard += mined.semi_hard;
            stats->random += mined.random;
        }
        if (mined.triplets.empty()) return 0.0;
        result = losses::batch_triplet_loss(bl.embeddings, mined.triplets, tc.margin);
    }

    if (!std::isfinite(result.value)) non_finite();
    if (update) {
        encoder_->backward(to_tensor(result.grad_embeddings, y));
        if (cfg_.train.angular())
            for (int c = 0; c < head_.grad.n(); ++c)
                for (int d = 0; d < head_.grad.c(); ++d)
                    head_.grad.at(c, d, 0, 0) = static_cast<float>(result.grad_weights(c, d));
        adam_->step();
    }
    return result.value;
}

double Trainer::step(const Batch& batch, int epoch) {
    return forward_backward(batch, epoch, cfg_.train.augment, true, nullptr);
}

double Trainer::loss_on(const Batch& batch, int epoch) { return forward_backward(batch, epoch, false, false, nullptr); }

EpochMetrics Trainer::run_epoch(int epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = adam_->lr();
    const auto plan = epoch_plan(train_, cfg_.sampler(), rng_);
    double total = 0.0;
    for (const auto& batch : plan) total += forward_backward(batch, epoch, cfg_.train.augment, true, &m);
    m.loss = plan.empty() ? 0.0 : total / static_cast<double>(plan.size());
    if (!cfg_.train.angular()) m.mining = epoch < cfg_.train.mining_start_epoch ? "random negatives" : "semi-hard";
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return m;
}

Checkpoint Trainer::checkpoint(int epoch) const {
    Checkpoint ckpt;
    ckpt.config = cfg_;
    ckpt.fingerprint = config_fingerprint(cfg_);
    ckpt.epoch = epoch;
    ckpt.encoder = build_encoder(cfg_.encoder, 0);
    copy_state(*encoder_, *ckpt.encoder);
    if (cfg_.train.angular()) {
        ckpt.head.resize(head_.value.n(), head_.value.c());
        for (int c = 0; c < head_.value.n(); ++c)
            for (int d = 0; d < head_.value.c(); ++d) ckpt.head(c, d) = head_.value.at(c, d, 0, 0);
    }
    return ckpt;
}

// ---- full run -------------------------------------------------------------------

TrainResult train(const Manifest& manifest, const InputSource& inputs, const RunConfig& cfg,
                  const TrainOptions& options) {
    cfg.validate();
    Manifest pool = training_records(manifest);
    if (pool.empty()) throw ValidationError("train split is empty");
    if (cfg.train.angular()) {
        std::size_t singletons = 0;
        for (const auto& [flank, count] : pool.flank_counts()) singletons += count == 1;
        if (singletons > 0)
            throw ValidationError(std::string(to_string(cfg.train.loss)) + " training needs a singleton-dropped manifest; " +
                                  std::to_string(singletons) + " flanks have a single image");
    }

    // Hold out whole flanks for checkpoint selection.
    Manifest train_set = pool, validation;
    const auto flanks = static_cast<double>(pool.num_classes());
    const auto held = std::llround(cfg.train.validation_fraction * flanks);
    if (held >= 1 && held < static_cast<long long>(pool.num_classes())) {
        const Manifest split = split_by_flank(pool, cfg.train.validation_fraction, cfg.train.seed);
        train_set = split.with_split(Split::train);
        validation = split.with_split(Split::test);
    }

    Trainer trainer(train_set, inputs, cfg);
    std::optional<PlateauScheduler> scheduler;
    if (cfg.train.effective_schedule() == LrSchedule::plateau)
        scheduler.emplace(cfg.train.plateau_factor, cfg.train.plateau_patience);

    std::ofstream log;
    if (!options.metrics_log.empty()) {
        log.open(options.metrics_log, std::ios::trunc);
        if (!log) throw Error("cannot write metrics log " + options.metrics_log.string());
    }

    const SimilarityMetric metric =
        cfg.train.angular() ? SimilarityMetric::cosine_similarity : SimilarityMetric::negative_euclidean;
    TrainResult result;
    std::optional<double> best_score;
    for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
        EpochMetrics m = trainer.run_epoch(epoch);
        if (!validation.empty()) {
            const EmbeddingSet emb =
                embed_all(trainer.encoder(), cfg.train.angular(), validation, inputs, cfg.preprocess);
            std::vector<std::string> labels;
            for (const auto& r : validation.records()) labels.push_back(r.flank_id);
            try {
                const SimilarityMatrix sim = similarity_matrix(emb, labels, metric);
                m.dt5ap = dtkap(sim, 5);
                m.t5rmd = tkrmd(sim, 5);
            } catch (const ValidationError&) {
                // No flank in the shard has two images.
            }
            try {
                m.ccdr = ccdr(emb, labels);
            } catch (const ValidationError&) {
            }
        }
        result.history.push_back(m);
        if (log) log << epoch_metrics_json(m) << '\n' << std::flush;
        if (options.progress) {
            auto& out = *options.progress;
            out << "epoch " << epoch << " loss " << m.loss << " lr " << m.lr;
            if (m.dt5ap) out << " dt5ap " << *m.dt5ap << " t5rmd " << *m.t5rmd;
            if (m.ccdr) out << " ccdr " << *m.ccdr;
            if (!m.mining.empty()) out << " mining " << m.mining;
            out << " (" << m.seconds << " s)\n" << std::flush;
        }

        // Ties go to the later epoch, as does every epoch without a usable validation shard.
        const bool improved = m.dt5ap ? (!best_score || *m.dt5ap >= *best_score) : !best_score;
        if (improved) {
            if (m.dt5ap) best_score = m.dt5ap;
            result.best = trainer.checkpoint(epoch);
            result.best.dt5ap = m.dt5ap;
            result.best.t5rmd = m.t5rmd;
            if (!options.checkpoint.empty()) save_checkpoint(options.checkpoint, result.best);
        }
        if (scheduler && m.dt5ap) trainer.optimizer().set_lr(scheduler->observe(*m.dt5ap, trainer.optimizer().lr()));
    }
    return result;
}

// ---- embedding ------------------------------------------------------------------

EmbeddingSet embed_all(Encoder& encoder, bool normalize_output, const Manifest& shard, const InputSource& inputs,
                       const PreprocessConfig& preprocess, int batch_size) {
    if (batch_size < 1) throw ValidationError("batch size must be >= 1");
    std::vector<std::string> missing;
    for (const auto& r : shard.records())
        if (!inputs.contains(r.image_id)) missing.push_back(r.image_id);
    if (!missing.empty()) throw NotFoundError("missing preprocessed inputs for: " + join_ids(missing));

    EmbeddingSet set;
    set.normalized = normalize_output;
    set.vectors.resize(static_cast<Eigen::Index>(shard.size()), encoder.config().embedding_dim);
    const auto& records = shard.records();
    for (std::size_t start = 0; start < records.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(records.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<StackedInput> xs;
        for (std::size_t i = start; i < end; ++i) xs.push_back(normalize(inputs.get(records[i].image_id), preprocess));
        const Eigen::MatrixXd y = to_matrix(encoder.forward(to_batch(xs), false));
        for (std::size_t i = start; i < end; ++i) {
            Eigen::RowVectorXd v = y.row(static_cast<Eigen::Index>(i - start));
            if (normalize_output) {
                const double n = v.norm();
                if (n > 0.0) v /= n;
            }
            set.vectors.row(static_cast<Eigen::Index>(i)) = v;
            set.image_ids.push_back(records[i].image_id);
        }
    }
    return set;
}

EmbeddingSet embed_all(const Checkpoint& ckpt, const Manifest& shard, const InputSource& inputs, int batch_size) {
    if (!ckpt.encoder) throw Error("checkpoint has no encoder");
    return embed_all(*ckpt.encoder, ckpt.angular(), shard, inputs, ckpt.config.preprocess, batch_size);
}

}  // namespace flankid

#include "flankid/sampler.hpp"

#include "flankid/error.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>

namespace flankid {

void SamplerConfig::validate() const {
    if (exemplars_per_id < 2) throw ConfigError("exemplars_per_id must be >= 2");
    if (batch_size <= 0 || batch_size % exemplars_per_id != 0)
        throw ConfigError("batch_size must be a positive multiple of exemplars_per_id");
}

namespace {

using FlankImages = std::map<std::string, std::vector<std::string>>;

FlankImages images_by_flank(const Manifest& manifest) {
    FlankImages out;
    for (const auto& r : manifest.records()) out[r.flank_id].push_back(r.image_id);
    return out;
}

void draw_flank(const Manifest& manifest, const std::string& flank, const std::vector<std::string>& images,
                int quota, std::mt19937_64& rng, Batch& batch) {
    const int label = manifest.class_of(flank);
    const auto count = static_cast<int>(images.size());
    if (count == 1) {
        batch.push_back({images.front(), flank, label});
        return;
    }
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const int distinct = std::min(count, quota);
    for (int i = 0; i < distinct; ++i) batch.push_back({images[order[i]], flank, label});
    std::uniform_int_distribution<std::size_t> any(0, images.size() - 1);
    for (int i = distinct; i < quota; ++i) batch.push_back({images[any(rng)], flank, label});
}

void require_enough(std::size_t eligible, const SamplerConfig& cfg) {
    const auto need = static_cast<std::size_t>(cfg.flanks_per_batch());
    if (eligible < need)
        throw ValidationError("too few eligible flanks: batch needs " + std::to_string(need) + ", manifest has " +
                              std::to_string(eligible) + " (short by " + std::to_string(need - eligible) + ")");
}

}  // namespace

std::vector<std::string> eligible_flanks(const Manifest& manifest, const SamplerConfig& cfg) {
    std::vector<std::string> out;
    for (const auto& [flank, count] : manifest.flank_counts())
        if (count >= 2 || (count == 1 && cfg.include_singletons)) out.push_back(flank);
    return out;
}

Batch next_batch(const Manifest& manifest, const SamplerConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    auto flanks = eligible_flanks(manifest, cfg);
    require_enough(flanks.size(), cfg);
    const auto images = images_by_flank(manifest);

    std::shuffle(flanks.begin(), flanks.end(), rng);
    Batch batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int i = 0; i < cfg.flanks_per_batch(); ++i)
        draw_flank(manifest, flanks[i], images.at(flanks[i]), cfg.exemplars_per_id, rng, batch);
    return batch;
}

std::vector<Batch> epoch_plan(const Manifest& manifest, const SamplerConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    auto flanks = eligible_flanks(manifest, cfg);
    require_enough(flanks.size(), cfg);
    const auto images = images_by_flank(manifest);
    const auto per_batch = static_cast<std::size_t>(cfg.flanks_per_batch());

    std::shuffle(flanks.begin(), flanks.end(), rng);
    const std::size_t n_batches = (flanks.size() + per_batch - 1) / per_batch;
    std::vector<Batch> plan;
    plan.reserve(n_batches);
    for (std::size_t b = 0; b < n_batches; ++b) {
        std::vector<std::string> group(flanks.begin() + static_cast<std::ptrdiff_t>(b * per_batch),
                                       flanks.begin() + static_cast<std::ptrdiff_t>(std::min(flanks.size(), (b + 1) * per_batch)));
        if (group.size() < per_batch) {
            std::set<std::string> taken(group.begin(), group.end());
            std::vector<std::string> pool;
            for (const auto& f : flanks)
                if (!taken.count(f)) pool.push_back(f);
            std::shuffle(pool.begin(), pool.end(), rng);
            pool.resize(per_batch - group.size());
            group.insert(group.end(), pool.begin(), pool.end());
        }
        Batch batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (const auto& f : group) draw_flank(manifest, f, images.at(f), cfg.exemplars_per_id, rng, batch);
        plan.push_back(std::move(batch));
    }
    return plan;
}

}  // namespace flankid

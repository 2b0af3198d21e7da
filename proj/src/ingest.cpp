#include "flankid/ingest.hpp"

#include "flankid/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

namespace flankid {

using nlohmann::json;

std::string_view to_string(Side side) {
    switch (side) {
        case Side::left: return "left";
        case Side::right: return "right";
        case Side::unknown: return "unknown";
    }
    return "unknown";
}

std::string_view to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::test: return "test";
        case Split::unassigned: return "unassigned";
    }
    return "unassigned";
}

std::optional<Side> parse_side(std::string_view text) {
    if (text == "left") return Side::left;
    if (text == "right") return Side::right;
    if (text == "unknown") return Side::unknown;
    return std::nullopt;
}

std::optional<Split> parse_split(std::string_view text) {
    if (text == "train") return Split::train;
    if (text == "test") return Split::test;
    if (text == "unassigned") return Split::unassigned;
    return std::nullopt;
}

std::string make_flank_id(std::string_view individual_id, Side side) {
    std::string id(individual_id);
    id += '_';
    id += to_string(side);
    return id;
}

Manifest::Manifest(std::vector<ImageRecord> records, std::filesystem::path base_dir)
    : records_(std::move(records)), base_dir_(std::move(base_dir)) {
    std::set<std::string> flanks;
    for (std::size_t i = 0; i < records_.size(); ++i) {
        auto& r = records_[i];
        r.flank_id = make_flank_id(r.individual_id, r.side);
        if (!by_image_id_.emplace(r.image_id, i).second)
            throw ValidationError("duplicate image_id '" + r.image_id + "'");
        flanks.insert(r.flank_id);
    }
    int next = 0;
    for (const auto& f : flanks) class_index_.emplace(f, next++);
}

int Manifest::class_of(const std::string& flank_id) const {
    auto it = class_index_.find(flank_id);
    if (it == class_index_.end()) throw NotFoundError("unknown flank_id '" + flank_id + "'");
    return it->second;
}

const ImageRecord* Manifest::find(const std::string& image_id) const {
    auto it = by_image_id_.find(image_id);
    return it == by_image_id_.end() ? nullptr : &records_[it->second];
}

std::map<std::string, std::size_t> Manifest::flank_counts() const {
    std::map<std::string, std::size_t> counts;
    for (const auto& r : records_) ++counts[r.flank_id];
    return counts;
}

std::filesystem::path Manifest::resolve(const ImageRecord& record) const {
    std::filesystem::path p(record.uri);
    if (p.is_absolute() || base_dir_.empty()) return p;
    return base_dir_ / p;
}

Manifest Manifest::filter(const std::function<bool(const ImageRecord&)>& keep) const {
    std::vector<ImageRecord> kept;
    for (const auto& r : records_)
        if (keep(r)) kept.push_back(r);
    return Manifest(std::move(kept), base_dir_);
}

Manifest Manifest::with_split(Split split) const {
    return filter([split](const ImageRecord& r) { return r.split == split; });
}

namespace {

std::string required_string(const json& j, const char* key, std::size_t line) {
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(std::string("missing key '") + key + "'", line);
    if (!it->is_string()) throw ParseError(std::string("key '") + key + "' must be a string", line);
    return it->get<std::string>();
}

}  // namespace

Manifest parse_manifest(std::istream& in, std::filesystem::path base_dir, const LoadOptions& options) {
    std::vector<ImageRecord> records;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); }))
            continue;
        json j;
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("malformed JSON: ") + e.what(), line);
        }
        if (!j.is_object()) throw ParseError("record must be a JSON object", line);

        ImageRecord r;
        r.image_id = required_string(j, "image_id", line);
        r.individual_id = required_string(j, "individual_id", line);
        r.uri = required_string(j, "uri", line);
        const auto side = required_string(j, "side", line);
        auto parsed_side = parse_side(side);
        if (!parsed_side) throw ParseError("unknown side value '" + side + "'", line);
        r.side = *parsed_side;
        if (j.contains("split")) {
            const auto split = required_string(j, "split", line);
            auto parsed_split = parse_split(split);
            if (!parsed_split) throw ParseError("unknown split value '" + split + "'", line);
            r.split = *parsed_split;
        }
        if (r.image_id.empty()) throw ParseError("empty image_id", line);
        records.push_back(std::move(r));
    }

    // Report duplicates with the offending line rather than the generic message.
    std::map<std::string, std::size_t> seen;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!seen.emplace(records[i].image_id, i).second)
            throw ValidationError("duplicate image_id '" + records[i].image_id + "' (record " +
                                  std::to_string(i + 1) + ")");
    }

    Manifest manifest(std::move(records), std::move(base_dir));
    if (options.require_readable_uris) {
        for (const auto& r : manifest.records()) {
            if (r.split == Split::unassigned) continue;
            std::ifstream probe(manifest.resolve(r), std::ios::binary);
            if (!probe) throw ValidationError("unreadable uri for image '" + r.image_id + "': " + r.uri);
        }
    }
    return manifest;
}

Manifest load_manifest(const std::filesystem::path& path, const LoadOptions& options) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open manifest " + path.string());
    return parse_manifest(in, path.parent_path(), options);
}

void write_manifest(const Manifest& manifest, std::ostream& out) {
    for (const auto& r : manifest.records()) {
        json j = {{"image_id", r.image_id},
                  {"individual_id", r.individual_id},
                  {"side", to_string(r.side)},
                  {"uri", r.uri},
                  {"split", to_string(r.split)}};
        out << j.dump() << '\n';
    }
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write manifest " + path.string());
    write_manifest(manifest, out);
}

Manifest split_by_flank(const Manifest& manifest, double test_fraction, std::uint64_t seed) {
    if (manifest.empty()) throw ValidationError("cannot split an empty manifest");
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw ValidationError("test_fraction must lie in (0, 1)");

    std::vector<std::string> flanks;
    for (const auto& [flank, _] : manifest.class_index()) flanks.push_back(flank);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(flanks.size())));
    if (n_test == 0) throw ValidationError("test_fraction yields 0 test flanks");
    if (n_test >= flanks.size()) throw ValidationError("test_fraction leaves no training flanks");

    std::mt19937_64 rng(seed);
    std::shuffle(flanks.begin(), flanks.end(), rng);
    std::set<std::string> test(flanks.begin(), flanks.begin() + static_cast<std::ptrdiff_t>(n_test));

    std::vector<ImageRecord> records = manifest.records();
    for (auto& r : records) r.split = test.count(r.flank_id) ? Split::test : Split::train;
    return Manifest(std::move(records), manifest.base_dir());
}

Manifest drop_singletons(const Manifest& manifest) {
    const auto counts = manifest.flank_counts();
    return manifest.filter([&](const ImageRecord& r) { return counts.at(r.flank_id) > 1; });
}

}  // namespace flankid

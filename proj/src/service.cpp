#include "flankid/service.hpp"

#include "flankid/error.hpp"
#include "flankid/tensor_io.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <httplib.h>
#include <opencv2/imgproc.hpp>

namespace flankid {

using nlohmann::json;

std::string file_stem(const std::string& image_id) {
    static constexpr char hex[] = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : image_id) {
        if (std::isalnum(c) || c == '.' || c == '_' || c == '-') {
            out.push_back(static_cast<char>(c));
        } else {
            out.push_back('~');
            out.push_back(hex[c >> 4]);
            out.push_back(hex[c & 0xF]);
        }
    }
    if (out == "." || out == "..") out = "~2E" + out.substr(1);
    return out;
}

namespace {

std::string fnv_hex(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void check_image_id(const std::string& id) {
    if (id.empty() || id.size() > 200) throw ServiceError(400, "image_id must be 1 to 200 characters");
    for (unsigned char c : id)
        if (c < 0x20 || c == 0x7f) throw ServiceError(400, "image_id contains control characters");
}

// HTTP status for an exception raised by a service operation.
int status_of(const std::exception& e) {
    if (const auto* s = dynamic_cast<const ServiceError*>(&e)) return s->status();
    if (dynamic_cast<const NotFoundError*>(&e)) return 404;
    if (dynamic_cast<const ConflictError*>(&e)) return 409;
    if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const ParseError*>(&e)) return 400;
    return 500;
}

void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, const std::exception& e) {
    reply(res, status_of(e), json{{"error", e.what()}});
}

std::optional<BoundingBox> parse_box(const std::string& text) {
    if (text.empty()) return std::nullopt;
    std::vector<int> v;
    try {
        const json j = json::parse(text);
        v = j.get<std::vector<int>>();
    } catch (const json::exception&) {
        std::string s = text;
        std::replace(s.begin(), s.end(), ',', ' ');
        std::istringstream in(s);
        int x;
        while (in >> x) v.push_back(x);
        if (!in.eof()) throw ServiceError(400, "box must be four integers x_min,y_min,x_max,y_max");
    }
    if (v.size() != 4) throw ServiceError(400, "box must be four integers x_min,y_min,x_max,y_max");
    return BoundingBox{v[0], v[1], v[2], v[3]};
}

cv::Mat thumbnail_rgb(const StackedInput& input) {
    cv::Mat out(input.height(), input.width(), CV_8UC3);
    for (int y = 0; y < input.height(); ++y)
        for (int x = 0; x < input.width(); ++x)
            for (int c = 0; c < 3; ++c)
                out.at<cv::Vec3b>(y, x)[c] = cv::saturate_cast<std::uint8_t>(input.at(c, y, x) * 255.0f + 0.5f);
    return out;
}

}  // namespace

ReviewService::ReviewService(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.data_dir.empty()) throw ConfigError("service needs a data directory");
    for (const char* sub : {"cache", "thumbnails", "originals", "embeddings"})
        std::filesystem::create_directories(cfg_.data_dir / sub);
    graph_ = std::make_unique<MatchGraph>(cfg_.data_dir / "graph");
    if (!cfg_.detections.empty()) detections_ = load_detections(cfg_.detections);
    if (!cfg_.background_stage.empty()) matting_ = std::make_unique<ExternalMattingStage>(cfg_.background_stage);
    std::lock_guard lock(model_mutex_);
    load_checkpoint_locked(cfg_.checkpoint);
    rebuild_gallery();
}

ReviewService::~ReviewService() = default;

std::filesystem::path ReviewService::cache_dir() const { return cfg_.data_dir / "cache"; }

void ReviewService::load_checkpoint_locked(const std::filesystem::path& path) {
    ckpt_ = load_checkpoint(path);
    ckpt_id_ = fnv_hex(read_file(path));
}

Eigen::VectorXd ReviewService::embed(const StackedInput& input) const {
    nn::Tensor y = ckpt_.encoder->forward(to_batch({normalize(input, ckpt_.config.preprocess)}), false);
    Eigen::VectorXd v(static_cast<Eigen::Index>(y.stride()));
    for (std::size_t d = 0; d < y.stride(); ++d) v(static_cast<Eigen::Index>(d)) = y.sample(0)[d];
    if (ckpt_.angular() && v.norm() > 0.0) v.normalize();
    return v;
}

double ReviewService::score(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const {
    if (ckpt_.angular()) return std::clamp(a.dot(b) / (a.norm() * b.norm()), -1.0, 1.0);
    return -(a - b).norm();
}

// Caller holds model_mutex_.
void ReviewService::rebuild_gallery() {
    std::vector<std::pair<std::string, std::filesystem::path>> sources;  // id, cache directory
    if (!cfg_.manifest.empty()) {
        const Manifest m = load_manifest(cfg_.manifest);
        for (const auto& r : m.records()) sources.emplace_back(r.image_id, cfg_.cache_dir);
    }
    const auto uploads = cfg_.data_dir / "uploads.jsonl";
    if (std::filesystem::exists(uploads)) {
        std::ifstream in(uploads);
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) sources.emplace_back(json::parse(line).at("image_id").get<std::string>(), cache_dir());
    }

    std::map<std::string, Eigen::VectorXd> known;
    const auto stored = cfg_.data_dir / "embeddings" / (ckpt_id_ + ".fkem");
    if (std::filesystem::exists(stored)) {
        const EmbeddingSet set = read_embedding_set(stored);
        for (std::size_t i = 0; i < set.size(); ++i)
            known[set.image_ids[i]] = set.vectors.row(static_cast<Eigen::Index>(i)).transpose();
    }

    std::vector<std::string> order;
    std::map<std::string, Eigen::VectorXd> embeddings;
    for (const auto& [id, dir] : sources) {
        if (embeddings.count(id)) continue;
        auto it = known.find(id);
        if (it != known.end() && it->second.size() == ckpt_.config.encoder.embedding_dim) {
            embeddings[id] = it->second;
        } else {
            const StackedInput input = CacheSource(dir).get(id);
            embeddings[id] = embed(input);
            if (!std::filesystem::exists(cfg_.data_dir / "thumbnails" / (file_stem(id) + ".png")))
                write_thumbnail(id, input);
        }
        order.push_back(id);
        graph_->add_node(id);
    }
    {
        std::unique_lock lock(gallery_mutex_);
        order_ = std::move(order);
        embeddings_ = std::move(embeddings);
    }
    persist_embeddings();
}

void ReviewService::persist_embeddings() const {
    EmbeddingSet set;
    std::shared_lock lock(gallery_mutex_);
    set.normalized = ckpt_.angular();
    set.vectors.resize(static_cast<Eigen::Index>(order_.size()), ckpt_.config.encoder.embedding_dim);
    for (std::size_t i = 0; i < order_.size(); ++i) {
        set.image_ids.push_back(order_[i]);
        set.vectors.row(static_cast<Eigen::Index>(i)) = embeddings_.at(order_[i]).transpose();
    }
    write_embedding_set(cfg_.data_dir / "embeddings" / (ckpt_id_ + ".fkem"), set);
}

void ReviewService::write_thumbnail(const std::string& image_id, const StackedInput& input) const {
    save_rgb(thumbnail_rgb(input), cfg_.data_dir / "thumbnails" / (file_stem(image_id) + ".png"));
}

void ReviewService::audit(const json& line) {
    std::lock_guard lock(audit_mutex_);
    std::ofstream out(cfg_.data_dir / "audit.jsonl", std::ios::app);
    out << line.dump() << '\n';
    std::cerr << "audit: " << line.dump() << '\n';
}

std::string ReviewService::add_image(std::string image_id, std::span<const std::uint8_t> bytes,
                                     std::optional<BoundingBox> box) {
    if (image_id.empty())
        image_id = "img-" + fnv_hex(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    check_image_id(image_id);
    {
        std::shared_lock lock(gallery_mutex_);
        if (embeddings_.count(image_id)) throw ServiceError(409, "image '" + image_id + "' already exists");
    }
    cv::Mat rgb;
    try {
        rgb = decode_rgb(bytes);
    } catch (const Error& e) {
        throw ServiceError(400, e.what());
    }
    if (!box) box = best_box(detections_, image_id);
    if (!box) throw ServiceError(422, "no bounding box supplied and none in the detections for '" + image_id + "'");

    PreprocessConfig pcfg = ckpt_.config.preprocess;
    pcfg.use_background_removal = matting_ != nullptr;
    PreprocessOutcome outcome;
    try {
        outcome = preprocess_image(rgb, box, pcfg, matting_.get());
    } catch (const ValidationError& e) {
        throw ServiceError(422, std::string("unusable box: ") + e.what());
    }

    std::lock_guard model_lock(model_mutex_);
    const Eigen::VectorXd v = embed(outcome.input);
    {
        std::unique_lock lock(gallery_mutex_);
        if (embeddings_.count(image_id)) throw ServiceError(409, "image '" + image_id + "' already exists");
        write_stacked(cache_path(cache_dir(), image_id), outcome.input);
        write_thumbnail(image_id, outcome.input);
        save_rgb(rgb, cfg_.data_dir / "originals" / (file_stem(image_id) + ".png"));
        std::ofstream(cfg_.data_dir / "uploads.jsonl", std::ios::app) << json{{"image_id", image_id}}.dump() << '\n';
        embeddings_[image_id] = v;
        order_.push_back(image_id);
        graph_->add_node(image_id);
    }
    persist_embeddings();
    if (outcome.matting_failed) audit(json{{"event", "matting_empty_mask"}, {"image_id", image_id}});
    return image_id;
}

CandidateList ReviewService::candidates(const std::string& image_id, int k) const {
    if (k < 1) throw ServiceError(400, "k must be >= 1");
    CandidateQuery query;
    query.anchor = image_id;
    query.top_k = k;
    {
        std::shared_lock lock(gallery_mutex_);
        auto anchor = embeddings_.find(image_id);
        if (anchor == embeddings_.end()) throw NotFoundError("unknown image '" + image_id + "'");
        for (const auto& [id, v] : embeddings_)
            if (id != image_id) query.pool.push_back({id, score(anchor->second, v)});
    }
    CandidateList out;
    out.anchor = image_id;
    const auto excluded = graph_->exclusion_set(image_id);
    out.excluded.assign(excluded.begin(), excluded.end());
    out.component_size = graph_->component_size(image_id);
    for (const auto& c : filter_candidates(query, *graph_)) {
        const std::string stem = file_stem(c.image_id);
        const bool has_original = std::filesystem::exists(cfg_.data_dir / "originals" / (stem + ".png"));
        out.candidates.push_back({c.image_id, c.score, "/thumbnails/" + stem + ".png",
                                  has_original ? "/originals/" + stem + ".png" : ""});
    }
    return out;
}

VerdictSummary ReviewService::record_verdict(const std::string& a, const std::string& b, Verdict verdict,
                                             const std::string& reviewer) {
    if (a == b) throw ServiceError(409, "cannot record a verdict between '" + a + "' and itself");
    const RecordOutcome outcome = graph_->record_verdict(a, b, verdict, reviewer);
    VerdictSummary s;
    s.a = a;
    s.b = b;
    s.verdict = verdict;
    s.component_size = outcome.component_size;
    s.merged_components = outcome.merged_components;
    const auto excluded = graph_->exclusion_set(a);
    s.excluded.assign(excluded.begin(), excluded.end());
    if (outcome.merged_components)
        audit(json{{"event", "components_merged"}, {"a", a}, {"b", b}, {"component_size", s.component_size}});
    return s;
}

json ReviewService::export_individuals() const {
    json components = json::object();
    std::size_t n = 0;
    char key[16];
    for (const auto& members : graph_->components()) {
        std::snprintf(key, sizeof key, "c%04zu", ++n);
        components[key] = members;
    }
    return json{{"count", n}, {"components", components}};
}

std::vector<std::string> ReviewService::gallery() const {
    std::shared_lock lock(gallery_mutex_);
    return order_;
}

void ReviewService::swap_checkpoint(const std::filesystem::path& checkpoint) {
    std::lock_guard lock(model_mutex_);
    load_checkpoint_locked(checkpoint);
    {
        std::unique_lock g(gallery_mutex_);
        embeddings_.clear();
    }
    rebuild_gallery();
}

std::string ReviewService::checkpoint_id() const {
    std::lock_guard lock(model_mutex_);
    return ckpt_id_;
}

std::optional<Eigen::VectorXd> ReviewService::embedding(const std::string& image_id) const {
    std::shared_lock lock(gallery_mutex_);
    auto it = embeddings_.find(image_id);
    if (it == embeddings_.end()) return std::nullopt;
    return it->second;
}

void ReviewService::register_routes(httplib::Server& server) {
    server.set_mount_point("/thumbnails", (cfg_.data_dir / "thumbnails").string());
    server.set_mount_point("/originals", (cfg_.data_dir / "originals").string());

    server.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
        reply(res, 200, json{{"status", "ok"}, {"checkpoint", checkpoint_id()}});
    });

    server.Get("/images", [this](const httplib::Request&, httplib::Response& res) {
        reply(res, 200, json{{"images", gallery()}});
    });

    server.Post("/images", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            if (!req.is_multipart_form_data() || !req.has_file("file"))
                throw ServiceError(400, "expected multipart form data with a 'file' part");
            const auto file = req.get_file_value("file");
            const std::string id = req.has_file("image_id") ? req.get_file_value("image_id").content : "";
            const auto box = req.has_file("box") ? parse_box(req.get_file_value("box").content) : std::nullopt;
            const auto* data = reinterpret_cast<const std::uint8_t*>(file.content.data());
            const std::string created = add_image(id, {data, file.content.size()}, box);
            reply(res, 201, json{{"image_id", created}, {"status", "preprocessed"},
                                 {"thumbnail", "/thumbnails/" + file_stem(created) + ".png"}});
        } catch (const std::exception& e) {
            reply_error(res, e);
        }
    });

    server.Get("/candidates/:image_id", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            int k = 5;
            if (req.has_param("k")) {
                const std::string text = req.get_param_value("k");
                std::size_t used = 0;
                try {
                    k = std::stoi(text, &used);
                } catch (const std::exception&) {
                    used = 0;
                }
                if (used == 0 || used != text.size()) throw ServiceError(400, "k must be an integer");
            }
            const CandidateList list = candidates(req.path_params.at("image_id"), k);
            json items = json::array();
            for (const auto& c : list.candidates)
                items.push_back({{"image_id", c.image_id}, {"score", c.score}, {"thumbnail", c.thumbnail},
                                 {"original", c.original.empty() ? json(nullptr) : json(c.original)}});
            reply(res, 200, json{{"anchor", list.anchor},
                                 {"k", k},
                                 {"candidates", items},
                                 {"excluded", list.excluded},
                                 {"component_size", list.component_size}});
        } catch (const std::exception& e) {
            reply_error(res, e);
        }
    });

    server.Post("/verdicts", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            json body;
            try {
                body = json::parse(req.body);
            } catch (const json::parse_error&) {
                throw ServiceError(400, "body must be JSON");
            }
            if (!body.is_object() || !body.contains("a") || !body.contains("b") || !body.contains("verdict") ||
                !body["a"].is_string() || !body["b"].is_string() || !body["verdict"].is_string())
                throw ServiceError(400, "body needs string fields a, b and verdict");
            const auto verdict = parse_verdict(body["verdict"].get<std::string>());
            if (!verdict) throw ServiceError(400, "verdict must be 'confirmed' or 'rejected'");
            const std::string reviewer = body.value("reviewer", std::string("anonymous"));
            const VerdictSummary s =
                record_verdict(body["a"].get<std::string>(), body["b"].get<std::string>(), *verdict, reviewer);
            reply(res, 200, json{{"a", s.a},
                                 {"b", s.b},
                                 {"verdict", to_string(s.verdict)},
                                 {"component_size", s.component_size},
                                 {"excluded", s.excluded},
                                 {"merged_components", s.merged_components}});
        } catch (const std::exception& e) {
            reply_error(res, e);
        }
    });

    server.Get("/export/individuals", [this](const httplib::Request&, httplib::Response& res) {
        reply(res, 200, export_individuals());
    });

    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            reply_error(res, e);
        } catch (...) {
            reply(res, 500, json{{"error", "unknown failure"}});
        }
    });
}

}  // namespace flankid

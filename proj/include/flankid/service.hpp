#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "flankid/config.hpp"
#include "flankid/error.hpp"
#include "flankid/matchdb.hpp"
#include "flankid/trainer.hpp"

namespace httplib {
class Server;
}

namespace flankid {

// Raised by service operations; carries the HTTP status the facade answers with.
class ServiceError : public Error {
public:
    ServiceError(int status, const std::string& what) : Error(what), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

struct ServiceConfig {
    std::filesystem::path checkpoint;
    // Holds graph/, cache/, thumbnails/, originals/, embeddings/ and audit.jsonl.
    std::filesystem::path data_dir;
    // Optional starting gallery; its images must already be in `cache_dir`.
    std::filesystem::path manifest;
    std::filesystem::path cache_dir;
    std::filesystem::path detections;
    // Matting executable; empty disables background removal for uploads.
    std::string background_stage;
};

struct CandidateEntry {
    std::string image_id;
    double score = 0.0;
    std::string thumbnail;
    std::string original;
};

struct CandidateList {
    std::string anchor;
    std::vector<CandidateEntry> candidates;
    std::vector<std::string> excluded;  // ids withheld because of verdicts
    std::size_t component_size = 1;
};

struct VerdictSummary {
    std::string a, b;
    Verdict verdict = Verdict::confirmed;
    std::size_t component_size = 1;
    std::vector<std::string> excluded;
    bool merged_components = false;
};

// Review workflow state: the loaded checkpoint, the embedded gallery and the
// match graph. Operations are safe to call from concurrent request threads.
class ReviewService {
public:
    explicit ReviewService(ServiceConfig cfg);
    ~ReviewService();

    // Decodes, preprocesses, embeds and registers an upload. An empty id is
    // replaced by one derived from the bytes.
    std::string add_image(std::string image_id, std::span<const std::uint8_t> bytes,
                          std::optional<BoundingBox> box);
    CandidateList candidates(const std::string& image_id, int k) const;
    VerdictSummary record_verdict(const std::string& a, const std::string& b, Verdict verdict,
                                  const std::string& reviewer);
    nlohmann::json export_individuals() const;
    std::vector<std::string> gallery() const;

    // Loads another checkpoint and re-embeds the gallery under it.
    void swap_checkpoint(const std::filesystem::path& checkpoint);
    std::string checkpoint_id() const;
    std::optional<Eigen::VectorXd> embedding(const std::string& image_id) const;

    void register_routes(httplib::Server& server);

private:
    ServiceConfig cfg_;
    std::unique_ptr<MatchGraph> graph_;
    DetectionTable detections_;
    std::unique_ptr<MattingStage> matting_;

    mutable std::mutex model_mutex_;  // the encoder caches activations, one forward at a time
    Checkpoint ckpt_;
    std::string ckpt_id_;

    mutable std::shared_mutex gallery_mutex_;
    std::vector<std::string> order_;
    std::map<std::string, Eigen::VectorXd> embeddings_;
    std::mutex audit_mutex_;

    std::filesystem::path cache_dir() const;
    Eigen::VectorXd embed(const StackedInput& input) const;
    void load_checkpoint_locked(const std::filesystem::path& path);
    void rebuild_gallery();
    void persist_embeddings() const;
    void write_thumbnail(const std::string& image_id, const StackedInput& input) const;
    double score(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const;
    void audit(const nlohmann::json& line);
};

// Path component used for thumbnails and originals of an image id.
std::string file_stem(const std::string& image_id);

}  // namespace flankid

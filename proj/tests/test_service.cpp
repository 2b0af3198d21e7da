#include <doctest.h>

#include <thread>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "flankid/error.hpp"
#include "flankid/service.hpp"
#include "flankid/synthetic.hpp"
#include "flankid/trainer.hpp"
#include "support.hpp"

// After Eigen: <resolv.h> defines _res.
#include <httplib.h>

using namespace flankid;
using nlohmann::json;
using testing_support::TempDir;

namespace {

struct Upload {
    std::string id;
    std::string png;
    BoundingBox box;
};

// A tiny trained checkpoint plus encoded toy views to upload.
struct World {
    TempDir dir;
    std::filesystem::path checkpoint;
    std::vector<Upload> uploads;

    World() {
        RunConfig cfg;
        cfg.preprocess.height = 32;
        cfg.preprocess.width = 64;
        cfg.encoder.embedding_dim = 8;
        cfg.train.batch_size = 8;
        cfg.train.augment = false;
        SyntheticConfig data;
        data.individuals = 3;
        data.views = 4;
        data.seed = 2;
        const auto views = render_synthetic(data);
        MemorySource inputs(preprocess_views(views, cfg.preprocess));
        const Manifest m = synthetic_manifest(views);
        Trainer t(m, inputs, cfg);
        std::mt19937_64 rng(0);
        for (int i = 0; i < 3; ++i) t.step(next_batch(m, cfg.sampler(), rng), 1);
        checkpoint = dir / "model.fkck";
        save_checkpoint(checkpoint, t.checkpoint(1));
        for (const auto& v : views) {
            std::vector<std::uint8_t> buf;
            cv::Mat bgr;
            cv::cvtColor(v.rgb, bgr, cv::COLOR_RGB2BGR);
            cv::imencode(".png", bgr, buf);
            uploads.push_back({v.record.image_id, std::string(buf.begin(), buf.end()), v.box});
        }
    }

    ServiceConfig config(const std::string& name) const {
        ServiceConfig c;
        c.checkpoint = checkpoint;
        c.data_dir = dir / name;
        return c;
    }
};

World& world() {
    static World w;
    return w;
}

std::span<const std::uint8_t> bytes(const std::string& s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

int status_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const ServiceError& e) {
        return e.status();
    } catch (const NotFoundError&) {
        return 404;
    }
    return 200;
}

std::string box_text(const BoundingBox& b) {
    return json{b.x_min, b.y_min, b.x_max, b.y_max}.dump();
}

}  // namespace

TEST_CASE("review service operations") {
    World& w = world();
    ReviewService svc(w.config("ops"));
    for (int i = 0; i < 6; ++i) svc.add_image(w.uploads[i].id, bytes(w.uploads[i].png), w.uploads[i].box);
    CHECK(svc.gallery().size() == 6);

    CHECK(status_of([&] { svc.add_image(w.uploads[0].id, bytes(w.uploads[0].png), w.uploads[0].box); }) == 409);
    CHECK(status_of([&] { svc.add_image("junk", bytes("not an image"), w.uploads[0].box); }) == 400);
    CHECK(status_of([&] { svc.add_image("nobox", bytes(w.uploads[6].png), std::nullopt); }) == 422);
    CHECK(status_of([&] { svc.add_image("offcanvas", bytes(w.uploads[6].png), BoundingBox{900, 900, 950, 950}); }) ==
          422);
    CHECK(status_of([&] { svc.candidates("missing", 3); }) == 404);
    CHECK(status_of([&] { svc.candidates(w.uploads[0].id, 0); }) == 400);
    CHECK(status_of([&] { svc.record_verdict("x", "x", Verdict::confirmed, "r"); }) == 409);
    CHECK(status_of([&] { svc.record_verdict(w.uploads[0].id, "missing", Verdict::confirmed, "r"); }) == 404);

    const std::string anchor = w.uploads[0].id;
    auto list = svc.candidates(anchor, 10);
    REQUIRE(list.candidates.size() == 5);
    for (std::size_t i = 1; i < list.candidates.size(); ++i)
        CHECK(list.candidates[i - 1].score >= list.candidates[i].score);
    const auto v0 = *svc.embedding(anchor);
    CHECK(std::abs(v0.norm() - 1.0) < 1e-6);
    CHECK(list.candidates[0].thumbnail.rfind("/thumbnails/", 0) == 0);

    const std::string top = list.candidates[0].image_id;
    auto s = svc.record_verdict(anchor, top, Verdict::rejected, "r");
    CHECK(s.excluded == std::vector<std::string>{top});
    list = svc.candidates(anchor, 10);
    CHECK(list.candidates.size() == 4);
    for (const auto& c : list.candidates) CHECK(c.image_id != top);

    // Chain of three: a-b, b-c confirmed; a sees neither.
    const std::string b = w.uploads[1].id, c = w.uploads[2].id;
    svc.record_verdict(anchor, b, Verdict::confirmed, "r");
    s = svc.record_verdict(b, c, Verdict::confirmed, "r");
    CHECK(s.component_size == 3);
    list = svc.candidates(anchor, 10);
    CHECK(list.component_size == 3);
    for (const auto& cand : list.candidates) {
        CHECK(cand.image_id != b);
        CHECK(cand.image_id != c);
    }

    const json ex = svc.export_individuals();
    CHECK(ex["count"] == 4);
    bool found = false;
    for (const auto& [key, members] : ex["components"].items())
        if (members.size() == 3) found = true;
    CHECK(found);
}

TEST_CASE("service state survives a restart") {
    World& w = world();
    std::vector<std::string> gallery;
    Eigen::VectorXd before;
    {
        ReviewService svc(w.config("restart"));
        for (int i = 0; i < 3; ++i) svc.add_image(w.uploads[i].id, bytes(w.uploads[i].png), w.uploads[i].box);
        svc.record_verdict(w.uploads[0].id, w.uploads[1].id, Verdict::confirmed, "r");
        gallery = svc.gallery();
        before = *svc.embedding(w.uploads[2].id);
    }
    ReviewService svc(w.config("restart"));
    CHECK(svc.gallery() == gallery);
    CHECK(svc.embedding(w.uploads[2].id)->isApprox(before, 1e-6));
    CHECK(svc.candidates(w.uploads[0].id, 5).component_size == 2);
    CHECK(std::filesystem::exists(w.dir / "restart" / "thumbnails"));
    // Same checkpoint, same id.
    const auto id = svc.checkpoint_id();
    svc.swap_checkpoint(w.checkpoint);
    CHECK(svc.checkpoint_id() == id);
    CHECK(svc.gallery().size() == 3);
}

TEST_CASE("http api") {
    World& w = world();
    ReviewService svc(w.config("http"));
    httplib::Server server;
    svc.register_routes(server);
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);

    auto health = cli.Get("/health");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(json::parse(health->body)["status"] == "ok");

    auto upload = [&](const Upload& u, const std::string& id, bool with_box = true) {
        httplib::MultipartFormDataItems items{{"file", u.png, "view.png", "image/png"}};
        if (!id.empty()) items.push_back({"image_id", id, "", ""});
        if (with_box) items.push_back({"box", box_text(u.box), "", ""});
        return cli.Post("/images", items);
    };

    for (int i = 0; i < 5; ++i) {
        auto r = upload(w.uploads[i], w.uploads[i].id);
        REQUIRE(r);
        CHECK(r->status == 201);
        const auto j = json::parse(r->body);
        CHECK(j["image_id"] == w.uploads[i].id);
        CHECK(j["status"] == "preprocessed");
        auto thumb = cli.Get(j["thumbnail"].get<std::string>());
        REQUIRE(thumb);
        CHECK(thumb->status == 200);
    }
    auto dup = upload(w.uploads[0], w.uploads[0].id);
    CHECK(dup->status == 409);
    CHECK(json::parse(dup->body).contains("error"));
    CHECK(upload(w.uploads[5], "nobox", false)->status == 422);
    CHECK(upload({"", "garbage bytes", w.uploads[0].box}, "garbage")->status == 400);
    CHECK(cli.Post("/images", "{}", "application/json")->status == 400);

    auto images = cli.Get("/images");
    CHECK(json::parse(images->body)["images"].size() == 5);

    const std::string anchor = w.uploads[0].id;
    auto cand = cli.Get("/candidates/" + anchor + "?k=3");
    REQUIRE(cand);
    CHECK(cand->status == 200);
    auto cj = json::parse(cand->body);
    CHECK(cj["anchor"] == anchor);
    CHECK(cj["k"] == 3);
    REQUIRE(cj["candidates"].size() == 3);
    for (std::size_t i = 1; i < 3; ++i) CHECK(cj["candidates"][i - 1]["score"] >= cj["candidates"][i]["score"]);
    CHECK(cj["candidates"][0].contains("original"));
    CHECK(cj["component_size"] == 1);
    CHECK(cli.Get("/candidates/unknown")->status == 404);
    CHECK(cli.Get("/candidates/" + anchor + "?k=0")->status == 400);
    CHECK(cli.Get("/candidates/" + anchor + "?k=two")->status == 400);

    const std::string other = cj["candidates"][0]["image_id"];
    auto verdict = [&](const json& body) { return cli.Post("/verdicts", body.dump(), "application/json"); };
    auto v = verdict({{"a", anchor}, {"b", other}, {"verdict", "confirmed"}, {"reviewer", "tester"}});
    REQUIRE(v);
    CHECK(v->status == 200);
    auto vj = json::parse(v->body);
    CHECK(vj["component_size"] == 2);
    CHECK(vj["excluded"] == json::array({other}));
    CHECK(vj["merged_components"] == false);
    CHECK(verdict({{"a", anchor}, {"b", anchor}, {"verdict", "confirmed"}})->status == 409);
    CHECK(verdict({{"a", anchor}, {"b", other}, {"verdict", "perhaps"}})->status == 400);
    CHECK(verdict({{"a", anchor}})->status == 400);
    CHECK(cli.Post("/verdicts", "nope", "application/json")->status == 400);
    CHECK(verdict({{"a", anchor}, {"b", "ghost"}, {"verdict", "rejected"}})->status == 404);

    cj = json::parse(cli.Get("/candidates/" + anchor + "?k=10")->body);
    CHECK(cj["candidates"].size() == 3);
    for (const auto& c : cj["candidates"]) CHECK(c["image_id"] != other);
    CHECK(cj["component_size"] == 2);

    auto ex = json::parse(cli.Get("/export/individuals")->body);
    CHECK(ex["count"] == 4);

    server.stop();
    thread.join();
}

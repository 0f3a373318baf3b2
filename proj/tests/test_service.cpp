// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <thread>

#include <splatfield/service.hpp>
#include <splatfield/synthetic.hpp>

#include "support.hpp"

using namespace splatfield;
using splatfield::testing::TempDir;
using splatfield::testing::decode_png;

namespace {

struct Fixture {
    SceneBundle scene;
    FeatureStore store;
    PromptBank prompts;
};

/// Five blobs; each Gaussian's feature is its blob's one-hot code plus noise, and prompts are the codes.
Fixture make_fixture() {
    const auto blobs = synth::blob_scene({.gaussians_per_blob = 100, .training_views = 3, .heldout_views = 0,
                                          .width = 64, .height = 64, .seed = 1});
    Fixture f{blobs.scene, FeatureStore(blobs.scene.cloud.count(), 8), {}};
    std::mt19937 rng(2);
    std::normal_distribution<float> n(0.0f, 0.25f);
    for (std::size_t k = 0; k < f.store.count; ++k) {
        auto row = f.store.row(k);
        for (auto &v : row) {
            v = n(rng);
        }
        row[blobs.object[k]] += 1.0f;
    }
    f.prompts.dim = 8;
    for (std::size_t b = 0; b < blobs.objects; ++b) {
        std::vector<float> e(8, 0.0f);
        e[b] = 1.0f;
        f.prompts.entries.push_back({"object_" + std::to_string(b), e});
    }
    return f;
}

class Server {
public:
    explicit Server(ServiceOptions options = {}) : service(std::move(options)) {
        port = service.bind("127.0.0.1", 0);
        thread = std::thread([this] { service.run(); });
        while (!service.http().is_running()) {
            std::this_thread::sleep_for(std::chrono::milliseconds(1));
        }
    }
    ~Server() {
        service.stop();
        thread.join();
    }
    [[nodiscard]] httplib::Client client() const { return httplib::Client("127.0.0.1", port); }

    Service service;
    int port = -1;
    std::thread thread;
};

nlohmann::json post_json(httplib::Client &cli, const std::string &path, const nlohmann::json &body, int expect = 200) {
    auto res = cli.Post(path, body.dump(), "application/json");
    EXPECT_TRUE(res);
    if (!res) {
        return {};
    }
    EXPECT_EQ(res->status, expect) << res->body;
    return nlohmann::json::parse(res->body);
}

std::string get_png(httplib::Client &cli, std::uint64_t id, std::size_t view, const std::string &mode) {
    auto res = cli.Get("/api/render?queryId=" + std::to_string(id) + "&view=" + std::to_string(view) + "&mode=" + mode);
    EXPECT_TRUE(res);
    if (!res) {
        return {};
    }
    EXPECT_EQ(res->status, 200) << res->body;
    EXPECT_EQ(res->get_header_value("Content-Type"), "image/png");
    return res->body;
}

std::size_t non_background_pixels(const std::string &png) {
    const auto img = decode_png(png);
    std::size_t n = 0;
    for (std::size_t p = 0; p < img.pixel_count(); ++p) {
        const auto px = img.pixel(p);
        n += px[0] != 0 || px[1] != 0 || px[2] != 0;
    }
    return n;
}

class ServiceTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        fixture_ = new Fixture(make_fixture());
        export_dir_ = new TempDir();
        server_ = new Server({.export_dir = export_dir_->path() / "exports"});
        server_->service.load(fixture_->scene, fixture_->store, fixture_->prompts);
    }
    static void TearDownTestSuite() {
        delete server_;
        delete export_dir_;
        delete fixture_;
    }

    static Fixture *fixture_;
    static TempDir *export_dir_;
    static Server *server_;
};

Fixture *ServiceTest::fixture_ = nullptr;
TempDir *ServiceTest::export_dir_ = nullptr;
Server *ServiceTest::server_ = nullptr;

} // namespace

TEST(ServiceLoading, UnavailableUntilLoaded) {
    Server server;
    auto cli = server.client();
    auto res = cli.Get("/api/scene");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 503);
    EXPECT_EQ(res->get_header_value("Retry-After"), "1");
    EXPECT_TRUE(nlohmann::json::parse(res->body).contains("error"));
    res = cli.Post("/api/query", R"({"positive":[1,0]})", "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 503);

    const auto f = make_fixture();
    server.service.load(f.scene, f.store, f.prompts);
    res = cli.Get("/api/scene");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
}

TEST(ServiceLoading, RejectsInconsistentSessions) {
    Service service;
    const auto f = make_fixture();
    EXPECT_THROW(service.load(f.scene, FeatureStore(3, 8), f.prompts), ValidationError);
    PromptBank wrong{4, {{"a", {1, 0, 0, 0}}}};
    EXPECT_THROW(service.load(f.scene, f.store, wrong), ValidationError);
    EXPECT_FALSE(service.ready());
}

TEST_F(ServiceTest, SceneDocumentMatchesLoader) {
    auto cli = server_->client();
    auto res = cli.Get("/api/scene");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200);
    const auto doc = nlohmann::json::parse(res->body);
    EXPECT_EQ(doc["gaussians"], fixture_->scene.cloud.count());
    EXPECT_EQ(doc["gaussians"], 500);
    EXPECT_EQ(doc["featureDim"], 8);
    EXPECT_EQ(doc["views"], 3);
    EXPECT_EQ(doc["pruned"], 0);
    EXPECT_EQ(doc["prompts"].size(), 5u);
    EXPECT_EQ(doc["thetaDefault"], 0.0);
}

TEST_F(ServiceTest, UnknownRouteIs404) {
    auto cli = server_->client();
    auto res = cli.Get("/api/nothing");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 404);
    EXPECT_NE(nlohmann::json::parse(res->body)["error"].get<std::string>().find("/api/nothing"), std::string::npos);
}

TEST_F(ServiceTest, QueryMatchesLibrary) {
    auto cli = server_->client();
    const auto doc = post_json(cli, "/api/query", {{"positive", "object_2"}, {"theta", 0.5}});
    const auto expect = segment_3d(fixture_->store, {.positive = fixture_->prompts.embedding("object_2"), .theta = 0.5});
    EXPECT_EQ(doc["memberCount"], expect.members.size());
    EXPECT_GT(expect.members.size(), 50u);
    EXPECT_EQ(doc["scoreHistogram"].size(), 32u);
    EXPECT_EQ(doc["scoreHistogram"].get<std::vector<std::uint64_t>>(), score_histogram(expect, fixture_->store));
    EXPECT_TRUE(doc["latencyMs"].is_number());

    std::vector<float> raw(8, 0.0f);
    raw[2] = 3.0f;
    const auto by_vector = post_json(cli, "/api/query", {{"positive", raw}, {"theta", 0.5}});
    EXPECT_EQ(by_vector["memberCount"], expect.members.size());
    EXPECT_GT(by_vector["queryId"].get<std::uint64_t>(), doc["queryId"].get<std::uint64_t>());
}

TEST_F(ServiceTest, ThetaAboveOneSelectsNothing) {
    auto cli = server_->client();
    EXPECT_EQ(post_json(cli, "/api/query", {{"positive", "object_0"}, {"theta", 1.1}})["memberCount"], 0);
}

TEST_F(ServiceTest, RepeatedQueriesAreDeterministic) {
    auto cli = server_->client();
    const nlohmann::json body = {{"positive", "object_1"}, {"negatives", {"object_0", "object_3"}}, {"theta", 0.2}};
    const auto a = post_json(cli, "/api/query", body);
    const auto b = post_json(cli, "/api/query", body);
    EXPECT_EQ(a["memberCount"], b["memberCount"]);
    EXPECT_EQ(a["scoreHistogram"], b["scoreHistogram"]);
    EXPECT_NE(a["queryId"], b["queryId"]);
}

TEST_F(ServiceTest, BadQueriesAre400) {
    auto cli = server_->client();
    const auto unknown = post_json(cli, "/api/query", {{"positive", "sofa"}}, 400);
    EXPECT_NE(unknown["error"].get<std::string>().find("object_0"), std::string::npos);
    post_json(cli, "/api/query", {{"positive", {1, 2}}}, 400);
    post_json(cli, "/api/query", {{"theta", 0.2}}, 400);
    auto res = cli.Post("/api/query", "{not json", "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
}

TEST_F(ServiceTest, MonotoneThetaSweep) {
    auto cli = server_->client();
    std::mt19937 rng(5);
    std::normal_distribution<float> n;
    for (int q = 0; q < 3; ++q) {
        std::vector<float> v(8);
        for (auto &x : v) {
            x = n(rng);
        }
        long previous = -1;
        for (double theta : {-1.0, -0.5, 0.0, 0.25, 0.5, 0.75, 0.9, 1.0}) {
            const long count = post_json(cli, "/api/query", {{"positive", v}, {"theta", theta}})["memberCount"];
            if (previous >= 0) {
                EXPECT_LE(count, previous);
            }
            previous = count;
        }
    }
}

TEST_F(ServiceTest, RenderModes) {
    auto cli = server_->client();
    const std::uint64_t id = post_json(cli, "/api/query", {{"positive", "object_3"}, {"theta", 0.5}})["queryId"];
    const auto color = get_png(cli, id, 0, "color");
    const auto heat = get_png(cli, id, 0, "heatmap");
    const auto extraction = get_png(cli, id, 0, "extraction");
    const auto deletion = get_png(cli, id, 0, "deletion");
    EXPECT_EQ(decode_png(color).channels, 3u);
    EXPECT_EQ(decode_png(heat).channels, 1u);
    EXPECT_LE(non_background_pixels(extraction), non_background_pixels(color));
    EXPECT_LE(non_background_pixels(deletion), non_background_pixels(color));
    EXPECT_GT(non_background_pixels(extraction), 0u);
    EXPECT_NE(extraction, color);

    // Heatmap pixels are 255 * (sim + 1) / 2 of the rendered feature against the positive prompt.
    const auto features = *render_features(fixture_->scene, 0, fixture_->store).features;
    const auto sim = similarity_map(features, fixture_->prompts.embedding("object_3"));
    const auto gray = decode_png(heat);
    for (std::size_t p = 0; p < gray.pixel_count(); ++p) {
        EXPECT_NEAR(gray.data[p], 255.0 * 0.5 * (sim.data[p] + 1.0), 0.51);
    }
}

TEST_F(ServiceTest, EmptySelectionRenders) {
    auto cli = server_->client();
    const std::uint64_t id = post_json(cli, "/api/query", {{"positive", "object_3"}, {"theta", 1.1}})["queryId"];
    EXPECT_EQ(non_background_pixels(get_png(cli, id, 1, "extraction")), 0u);
    EXPECT_EQ(get_png(cli, id, 1, "deletion"), get_png(cli, id, 1, "color"));
}

TEST_F(ServiceTest, RenderErrors) {
    auto cli = server_->client();
    const std::uint64_t id = post_json(cli, "/api/query", {{"positive", "object_3"}})["queryId"];
    auto status = [&](const std::string &q) {
        auto res = cli.Get("/api/render?" + q);
        return res ? res->status : -1;
    };
    EXPECT_EQ(status("queryId=999999&view=0&mode=color"), 404);
    EXPECT_EQ(status("queryId=" + std::to_string(id) + "&view=7&mode=color"), 400);
    EXPECT_EQ(status("queryId=" + std::to_string(id) + "&view=0&mode=sepia"), 400);
    EXPECT_EQ(status("queryId=" + std::to_string(id) + "&mode=color"), 400);
    EXPECT_EQ(status("queryId=abc&view=0&mode=color"), 400);
}

TEST_F(ServiceTest, CacheIsCoherentAndSingleFlight) {
    auto cli = server_->client();
    const std::uint64_t id = post_json(cli, "/api/query", {{"positive", "object_4"}, {"theta", 0.3}})["queryId"];
    const std::size_t before = server_->service.render_count();
    std::vector<std::thread> threads;
    std::vector<std::string> bodies(6);
    for (int t = 0; t < 6; ++t) {
        threads.emplace_back([&, t] {
            auto c = server_->client();
            bodies[t] = get_png(c, id, 2, "extraction");
        });
    }
    for (auto &t : threads) {
        t.join();
    }
    EXPECT_EQ(server_->service.render_count(), before + 1);
    for (const auto &b : bodies) {
        EXPECT_EQ(b, bodies[0]);
    }
    EXPECT_EQ(bodies[0], server_->service.render_uncached(id, 2, RenderMode::extraction));
    get_png(cli, id, 2, "extraction");
    EXPECT_EQ(server_->service.render_count(), before + 1);
}

TEST_F(ServiceTest, ExportRoundTrips) {
    auto cli = server_->client();
    const auto q = post_json(cli, "/api/query", {{"positive", "object_1"}, {"theta", 0.5}});
    const std::uint64_t id = q["queryId"];
    const auto ex = post_json(cli, "/api/export", {{"queryId", id}, {"what", "extraction"}});
    EXPECT_EQ(ex["gaussians"], q["memberCount"]);
    const std::string path = ex["path"];
    EXPECT_EQ(load_ply(path).count(), q["memberCount"].get<std::size_t>());
    const std::string first = read_file(path);
    post_json(cli, "/api/export", {{"queryId", id}, {"what", "extraction"}});
    EXPECT_EQ(read_file(path), first);

    const auto del = post_json(cli, "/api/export", {{"queryId", std::to_string(id)}, {"what", "deletion"}});
    EXPECT_EQ(del["gaussians"].get<std::size_t>() + q["memberCount"].get<std::size_t>(), 500u);
    post_json(cli, "/api/export", {{"queryId", id}, {"what", "both"}}, 400);
    post_json(cli, "/api/export", {{"what", "deletion"}}, 400);
    post_json(cli, "/api/export", {{"queryId", 424242}, {"what", "deletion"}}, 404);
}

TEST_F(ServiceTest, EmptyExtractionExportIs422) {
    auto cli = server_->client();
    const std::uint64_t id = post_json(cli, "/api/query", {{"positive", "object_1"}, {"theta", 1.1}})["queryId"];
    const auto doc = post_json(cli, "/api/export", {{"queryId", id}, {"what", "extraction"}}, 422);
    EXPECT_TRUE(doc.contains("error"));
}

TEST(ServiceExport, UnwritableDirectoryIs507) {
    TempDir dir;
    write_file(dir / "blocker", "x");
    Service service({.export_dir = dir / "blocker" / "exports"});
    const auto f = make_fixture();
    service.load(f.scene, f.store, f.prompts);
    const std::uint64_t id = service.query({{"positive", "object_0"}})["queryId"];
    try {
        (void)service.export_ply(id, "deletion");
        FAIL() << "export into a non-directory succeeded";
    } catch (const HttpError &e) {
        EXPECT_EQ(e.status(), 507);
    }
}

TEST_F(ServiceTest, ConcurrentQueriesMatchSerial) {
    std::vector<nlohmann::json> bodies;
    std::vector<std::size_t> serial;
    for (int i = 0; i < 8; ++i) {
        const std::string name = "object_" + std::to_string(i % 5);
        const double theta = 0.1 * i;
        bodies.push_back({{"positive", name}, {"theta", theta}});
        serial.push_back(segment_3d(fixture_->store, {.positive = fixture_->prompts.embedding(name), .theta = theta})
                             .members.size());
    }
    std::vector<std::size_t> got(bodies.size());
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < bodies.size(); ++i) {
        threads.emplace_back([&, i] {
            auto c = server_->client();
            got[i] = post_json(c, "/api/query", bodies[i])["memberCount"];
        });
    }
    for (auto &t : threads) {
        t.join();
    }
    EXPECT_EQ(got, serial);
}

TEST_F(ServiceTest, CorsForLocalOrigins) {
    auto cli = server_->client();
    auto res = cli.Get("/api/scene", {{"Origin", "http://localhost:5173"}});
    ASSERT_TRUE(res);
    EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "http://localhost:5173");
    res = cli.Get("/api/scene", {{"Origin", "http://evil.example"}});
    ASSERT_TRUE(res);
    EXPECT_FALSE(res->has_header("Access-Control-Allow-Origin"));
    res = cli.Options("/api/query", {{"Origin", "http://127.0.0.1:3000"}});
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 204);
}

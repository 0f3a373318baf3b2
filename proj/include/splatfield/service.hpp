// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

// HTTP front end over one loaded scene and feature store. Routes:
//   GET  /api/scene
//   POST /api/query   {positive: name|vector, negatives: [name|vector...], theta, argmax}
//   GET  /api/render?queryId=&view=&mode=color|heatmap|extraction|deletion
//   POST /api/export  {queryId, what: extraction|deletion}

#include "splatfield/backprojection.hpp"
#include "splatfield/error.hpp"
#include "splatfield/query.hpp"
#include "splatfield/rasterizer.hpp"
#include "splatfield/scene_io.hpp"

// httplib's default backlog of 5 drops SYNs under a burst of viewer requests.
#ifndef CPPHTTPLIB_LISTEN_BACKLOG
#define CPPHTTPLIB_LISTEN_BACKLOG 128
#endif
#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace splatfield {

/// Error carrying the HTTP status it should be reported with.
class HttpError : public Error {
public:
    HttpError(int status, const std::string &what) : Error(what), status_(status) {}
    [[nodiscard]] int status() const { return status_; }

private:
    int status_;
};

enum class RenderMode { color, heatmap, extraction, deletion };

inline RenderMode parse_render_mode(const std::string &s) {
    if (s == "color") {
        return RenderMode::color;
    }
    if (s == "heatmap") {
        return RenderMode::heatmap;
    }
    if (s == "extraction") {
        return RenderMode::extraction;
    }
    if (s == "deletion") {
        return RenderMode::deletion;
    }
    throw HttpError(400, "unknown mode '" + s + "' (expected color, heatmap, extraction or deletion)");
}

struct ServiceOptions {
    std::filesystem::path export_dir = "exports";
    double theta_default = 0.0;
    /// Static files served at / (the viewer build), if set.
    std::optional<std::filesystem::path> static_dir;
    /// Allow any origin instead of localhost only.
    bool cors_any_origin = false;
    std::size_t cache_entries = 256;
    RenderOptions render;
};

/// Scene, store and prompts; never mutated once published.
struct Session {
    SceneBundle scene;
    FeatureStore store;
    PromptBank prompts;
};

struct QueryRecord {
    std::uint64_t id = 0;
    SegmentationResult result;
    std::vector<std::uint64_t> histogram;
};

class Service {
public:
    explicit Service(ServiceOptions options = {}) : options_(std::move(options)) { install_routes(); }

    Service(const Service &) = delete;
    Service &operator=(const Service &) = delete;

    /// Publishes the session; requests before this get 503.
    void load(SceneBundle scene, FeatureStore store, PromptBank prompts) {
        scene.validate();
        store.validate();
        if (store.count != scene.cloud.count()) {
            throw ValidationError("feature store has " + std::to_string(store.count) + " rows, scene has " +
                                  std::to_string(scene.cloud.count()) + " Gaussians");
        }
        if (!prompts.entries.empty() && prompts.dim != store.dim) {
            throw ValidationError("prompt dimension " + std::to_string(prompts.dim) + " != feature dimension " +
                                  std::to_string(store.dim));
        }
        auto s = std::make_shared<const Session>(Session{std::move(scene), std::move(store), std::move(prompts)});
        std::lock_guard lock(mutex_);
        session_ = std::move(s);
    }

    [[nodiscard]] bool ready() const { return session() != nullptr; }

    [[nodiscard]] nlohmann::json scene_document() const {
        const auto s = require_session();
        return {{"gaussians", s->scene.cloud.count()},
                {"pruned", s->store.pruned_count()},
                {"featureDim", s->store.dim},
                {"views", s->scene.cameras.size()},
                {"prompts", s->prompts.names()},
                {"thetaDefault", options_.theta_default}};
    }

    /// Runs a query body and records it; returns the result document.
    nlohmann::json query(const nlohmann::json &body) {
        const auto s = require_session();
        QuerySpec spec;
        try {
            if (!body.is_object()) {
                throw HttpError(400, "query body must be a JSON object");
            }
            if (!body.contains("positive")) {
                throw HttpError(400, "query body needs 'positive'");
            }
            spec.positive = prompt_vector(*s, body.at("positive"), "positive");
            if (body.contains("negatives")) {
                const auto &negs = body.at("negatives");
                if (!negs.is_array()) {
                    throw HttpError(400, "'negatives' must be an array");
                }
                for (std::size_t i = 0; i < negs.size(); ++i) {
                    spec.negatives.push_back(prompt_vector(*s, negs[i], "negatives[" + std::to_string(i) + "]"));
                }
            }
            spec.theta = body.value("theta", options_.theta_default);
            spec.require_argmax = body.value("argmax", true);
        } catch (const nlohmann::json::exception &ex) {
            throw HttpError(400, std::string("bad query body: ") + ex.what());
        }
        try {
            spec.validate(s->store.dim);
        } catch (const ValidationError &ex) {
            throw HttpError(400, ex.what());
        }

        auto record = std::make_shared<QueryRecord>();
        const auto t0 = std::chrono::steady_clock::now();
        record->result = segment_3d(s->store, spec);
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        record->histogram = score_histogram(record->result, s->store);
        {
            std::lock_guard lock(mutex_);
            record->id = ++query_counter_;
            queries_[record->id] = record;
        }
        return {{"queryId", record->id},
                {"memberCount", record->result.members.size()},
                {"scoreHistogram", record->histogram},
                {"theta", spec.theta},
                {"latencyMs", ms}};
    }

    /// PNG for (query, view, mode); cached, and computed once per key even under concurrent requests.
    std::shared_ptr<const std::string> render_png(std::uint64_t query_id, std::size_t view, RenderMode mode) {
        const auto s = require_session();
        const auto record = find_query(query_id);
        if (view >= s->scene.cameras.size()) {
            throw HttpError(400, "view " + std::to_string(view) + " out of range [0, " +
                                     std::to_string(s->scene.cameras.size()) + ")");
        }
        // Color does not depend on the query, so all queries share its entries.
        const CacheKey key{mode == RenderMode::color ? 0 : query_id, view, mode};
        std::promise<std::shared_ptr<const std::string>> promise;
        std::shared_future<std::shared_ptr<const std::string>> future;
        bool owner = false;
        {
            std::lock_guard lock(mutex_);
            auto it = cache_.find(key);
            if (it != cache_.end()) {
                future = it->second;
            } else {
                future = promise.get_future().share();
                cache_.emplace(key, future);
                cache_order_.push_back(key);
                owner = true;
            }
        }
        if (owner) {
            try {
                promise.set_value(std::make_shared<const std::string>(render_uncached(*s, *record, view, mode)));
                ++renders_;
            } catch (...) {
                promise.set_exception(std::current_exception());
                std::lock_guard lock(mutex_);
                cache_.erase(key);
                std::erase(cache_order_, key);
            }
            evict();
        }
        return future.get();
    }

    /// Renders without touching the cache.
    [[nodiscard]] std::string render_uncached(std::uint64_t query_id, std::size_t view, RenderMode mode) const {
        const auto s = require_session();
        return render_uncached(*s, *find_query(query_id), view, mode);
    }

    /// Writes the edited cloud as PLY under the export directory and returns its path.
    nlohmann::json export_ply(std::uint64_t query_id, const std::string &what) {
        const auto s = require_session();
        const auto record = find_query(query_id);
        RenderMode mode;
        if (what == "extraction") {
            mode = RenderMode::extraction;
        } else if (what == "deletion") {
            mode = RenderMode::deletion;
        } else {
            throw HttpError(400, "'what' must be extraction or deletion, got '" + what + "'");
        }
        const EditResult edit = edited(*s, *record, mode);
        if (edit.cloud.empty()) {
            throw HttpError(422, "the " + what + " of query " + std::to_string(query_id) +
                                     " has zero Gaussians; nothing to export");
        }
        const auto path = options_.export_dir / ("query-" + std::to_string(query_id) + "-" + what + ".ply");
        try {
            save_ply(edit.cloud, path);
        } catch (const IoError &ex) {
            throw HttpError(507, ex.what());
        }
        return {{"path", path.string()}, {"gaussians", edit.cloud.count()}};
    }

    /// Number of renders performed (cache misses).
    [[nodiscard]] std::size_t render_count() const { return renders_.load(); }

    httplib::Server &http() { return server_; }

    /// Binds to `host`:`port` (0 = any free port) and returns the bound port, or -1.
    int bind(const std::string &host, int port) {
        if (port == 0) {
            return server_.bind_to_any_port(host);
        }
        return server_.bind_to_port(host, port) ? port : -1;
    }
    /// Serves until stop(); call after bind().
    bool run() { return server_.listen_after_bind(); }
    void stop() { server_.stop(); }

private:
    using CacheKey = std::tuple<std::uint64_t, std::size_t, RenderMode>;

    [[nodiscard]] std::shared_ptr<const Session> session() const {
        std::lock_guard lock(mutex_);
        return session_;
    }

    [[nodiscard]] std::shared_ptr<const Session> require_session() const {
        auto s = session();
        if (!s) {
            throw HttpError(503, "scene is still loading");
        }
        return s;
    }

    [[nodiscard]] std::shared_ptr<const QueryRecord> find_query(std::uint64_t id) const {
        std::lock_guard lock(mutex_);
        auto it = queries_.find(id);
        if (it == queries_.end()) {
            throw HttpError(404, "unknown queryId " + std::to_string(id));
        }
        return it->second;
    }

    static std::vector<float> prompt_vector(const Session &s, const nlohmann::json &v, const std::string &field) {
        if (v.is_string()) {
            const auto name = v.get<std::string>();
            try {
                return s.prompts.embedding(name);
            } catch (const ValidationError &ex) {
                throw HttpError(400, field + ": " + ex.what());
            }
        }
        if (v.is_array()) {
            std::vector<float> out;
            for (const auto &x : v) {
                if (!x.is_number()) {
                    throw HttpError(400, field + ": vector entries must be numbers");
                }
                out.push_back(x.get<float>());
            }
            return out;
        }
        throw HttpError(400, field + ": expected a prompt name or a vector");
    }

    static EditResult edited(const Session &s, const QueryRecord &q, RenderMode mode) {
        return mode == RenderMode::extraction ? extract_members(s.scene.cloud, s.store, q.result)
                                              : delete_members(s.scene.cloud, s.store, q.result);
    }

    [[nodiscard]] std::string render_uncached(const Session &s, const QueryRecord &q, std::size_t view,
                                              RenderMode mode) const {
        const Camera &cam = s.scene.cameras[view];
        switch (mode) {
        case RenderMode::color:
            return encode_png(render(s.scene.cloud, cam, s.scene.background, options_.render).color);
        case RenderMode::heatmap: {
            const auto features = *render(s.scene.cloud, cam, s.scene.background, options_.render, &s.store).features;
            const Raster<float> sim = similarity_map(features, q.result.spec.positive);
            Image gray(sim.height, sim.width, 1);
            for (std::size_t i = 0; i < sim.data.size(); ++i) {
                gray.data[i] = 0.5f * (sim.data[i] + 1.0f);
            }
            return encode_png(gray);
        }
        case RenderMode::extraction:
        case RenderMode::deletion:
            return encode_png(render(edited(s, q, mode).cloud, cam, s.scene.background, options_.render).color);
        }
        throw HttpError(400, "unknown mode");
    }

    void evict() {
        std::lock_guard lock(mutex_);
        while (cache_order_.size() > options_.cache_entries) {
            cache_.erase(cache_order_.front());
            cache_order_.pop_front();
        }
    }

    [[nodiscard]] bool origin_allowed(const std::string &origin) const {
        if (options_.cors_any_origin) {
            return true;
        }
        for (const char *prefix : {"http://localhost", "http://127.0.0.1", "http://[::1]"}) {
            const std::string p = prefix;
            if (origin.compare(0, p.size(), p) == 0 &&
                (origin.size() == p.size() || origin[p.size()] == ':' || origin[p.size()] == '/')) {
                return true;
            }
        }
        return false;
    }

    static void send_json(httplib::Response &res, int status, const nlohmann::json &doc) {
        res.status = status;
        res.set_content(doc.dump(), "application/json");
    }

    static void send_error(httplib::Response &res, int status, const std::string &message) {
        send_json(res, status, {{"error", message}});
        if (status == 503) {
            res.set_header("Retry-After", "1");
        }
    }

    template <typename Fn>
    static void guarded(httplib::Response &res, Fn &&fn) {
        try {
            fn();
        } catch (const HttpError &ex) {
            send_error(res, ex.status(), ex.what());
        } catch (const EmptySceneError &ex) {
            send_error(res, 422, ex.what());
        } catch (const IoError &ex) {
            send_error(res, 507, ex.what());
        } catch (const Error &ex) {
            send_error(res, 400, ex.what());
        } catch (const std::exception &ex) {
            send_error(res, 500, ex.what());
        }
    }

    static nlohmann::json parse_body(const httplib::Request &req) {
        try {
            return nlohmann::json::parse(req.body);
        } catch (const nlohmann::json::parse_error &ex) {
            throw HttpError(400, std::string("malformed JSON: ") + ex.what());
        }
    }

    static std::uint64_t query_id_of(const nlohmann::json &v) {
        if (!v.is_number_unsigned() && !(v.is_string() && !v.get<std::string>().empty())) {
            throw HttpError(400, "queryId must be a non-negative integer");
        }
        if (v.is_number_unsigned()) {
            return v.get<std::uint64_t>();
        }
        return parse_uint(v.get<std::string>(), "queryId");
    }

    static std::uint64_t parse_uint(const std::string &s, const std::string &field) {
        if (s.empty() || s.size() > 19 || s.find_first_not_of("0123456789") != std::string::npos) {
            throw HttpError(400, field + " must be a non-negative integer, got '" + s + "'");
        }
        return std::stoull(s);
    }

    void install_routes() {
        server_.set_pre_routing_handler([this](const httplib::Request &req, httplib::Response &res) {
            const auto origin = req.get_header_value("Origin");
            if (!origin.empty() && origin_allowed(origin)) {
                res.set_header("Access-Control-Allow-Origin", origin);
                res.set_header("Vary", "Origin");
                res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
                res.set_header("Access-Control-Allow-Headers", "Content-Type");
            }
            if (req.method == "OPTIONS") {
                res.status = 204;
                return httplib::Server::HandlerResponse::Handled;
            }
            return httplib::Server::HandlerResponse::Unhandled;
        });
        server_.set_error_handler([](const httplib::Request &req, httplib::Response &res) {
            if (!res.body.empty()) {
                return httplib::Server::HandlerResponse::Unhandled;
            }
            send_error(res, res.status, res.status == 404 ? "no route for " + req.method + " " + req.path
                                                          : "request failed");
            return httplib::Server::HandlerResponse::Handled;
        });

        server_.Get("/api/scene", [this](const httplib::Request &, httplib::Response &res) {
            guarded(res, [&] { send_json(res, 200, scene_document()); });
        });
        server_.Post("/api/query", [this](const httplib::Request &req, httplib::Response &res) {
            guarded(res, [&] {
                static_cast<void>(require_session());
                send_json(res, 200, query(parse_body(req)));
            });
        });
        server_.Get("/api/render", [this](const httplib::Request &req, httplib::Response &res) {
            guarded(res, [&] {
                static_cast<void>(require_session());
                for (const char *p : {"queryId", "view", "mode"}) {
                    if (!req.has_param(p)) {
                        throw HttpError(400, std::string("missing query parameter '") + p + "'");
                    }
                }
                const auto id = parse_uint(req.get_param_value("queryId"), "queryId");
                const auto view = parse_uint(req.get_param_value("view"), "view");
                const auto mode = parse_render_mode(req.get_param_value("mode"));
                const auto png = render_png(id, static_cast<std::size_t>(view), mode);
                res.status = 200;
                res.set_content(*png, "image/png");
            });
        });
        server_.Post("/api/export", [this](const httplib::Request &req, httplib::Response &res) {
            guarded(res, [&] {
                static_cast<void>(require_session());
                const auto body = parse_body(req);
                if (!body.is_object() || !body.contains("queryId") || !body.contains("what") ||
                    !body.at("what").is_string()) {
                    throw HttpError(400, "export body needs queryId and what");
                }
                send_json(res, 200, export_ply(query_id_of(body.at("queryId")), body.at("what").get<std::string>()));
            });
        });
        if (options_.static_dir) {
            server_.set_mount_point("/", options_.static_dir->string());
        }
    }

    ServiceOptions options_;
    httplib::Server server_;
    mutable std::mutex mutex_;
    std::shared_ptr<const Session> session_;
    std::uint64_t query_counter_ = 0;
    std::map<std::uint64_t, std::shared_ptr<const QueryRecord>> queries_;
    std::map<CacheKey, std::shared_future<std::shared_ptr<const std::string>>> cache_;
    std::deque<CacheKey> cache_order_;
    std::atomic<std::size_t> renders_{0};
};

} // namespace splatfield

// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Every command prints one JSON summary line on stdout ("schema": 1);
// progress and human-readable notes go to stderr. Errors exit with status 1.

#include <splatfield/splatfield.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace splatfield;

namespace {

class CliError : public Error {
public:
    using Error::Error;
};

std::string numbered(const std::string &prefix, std::size_t view, const std::string &ext) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%05zu", view);
    return prefix + buf + ext;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void emit(json summary) {
    summary["schema"] = 1;
    std::cout << summary.dump() << std::endl;
}

void write_json(const fs::path &path, const json &doc) { write_file(path, doc.dump(2) + "\n"); }

json read_json(const fs::path &path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error &ex) {
        throw ParseError(path.string() + ": " + ex.what());
    }
}

/// "0,2,5-7" -> {0,2,5,6,7}; empty -> every view in [0, count).
std::vector<std::size_t> parse_views(const std::string &spec, std::size_t count) {
    std::vector<std::size_t> out;
    if (spec.empty()) {
        for (std::size_t v = 0; v < count; ++v) {
            out.push_back(v);
        }
        return out;
    }
    std::stringstream ss(spec);
    std::string item;
    std::set<std::size_t> seen;
    while (std::getline(ss, item, ',')) {
        std::size_t lo = 0, hi = 0;
        try {
            const auto dash = item.find('-');
            lo = std::stoul(item.substr(0, dash));
            hi = dash == std::string::npos ? lo : std::stoul(item.substr(dash + 1));
        } catch (const std::exception &) {
            throw CliError("bad view list entry '" + item + "'");
        }
        for (std::size_t v = lo; v <= hi; ++v) {
            if (v >= count) {
                throw CliError("view " + std::to_string(v) + " does not exist (scene has " + std::to_string(count) +
                               " views)");
            }
            if (seen.insert(v).second) {
                out.push_back(v);
            }
        }
    }
    return out;
}

Rgb parse_background(const std::string &s) {
    Rgb rgb{0.0, 0.0, 0.0};
    std::stringstream ss(s);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
        if (i >= 3) {
            throw CliError("background needs three comma-separated values");
        }
        rgb[i++] = std::stod(item);
    }
    if (i != 3) {
        throw CliError("background needs three comma-separated values");
    }
    return rgb;
}

BackprojectionMode parse_mode(const std::string &s) {
    if (s == "expected") {
        return BackprojectionMode::expected;
    }
    if (s == "accumulated") {
        return BackprojectionMode::accumulated;
    }
    throw CliError("--mode must be expected or accumulated");
}

// ---------------------------------------------------------------------------------------------------------------

struct Common {
    int threads = 0;
};

struct BackprojectArgs {
    std::string scene, cameras, features, out, views, mode = "expected";
    bool normalize = true;
    double prune_epsilon = 1e-8;
};

int cmd_backproject(const BackprojectArgs &a) {
    const auto t0 = std::chrono::steady_clock::now();
    const SceneBundle scene = load_scene(a.scene, a.cameras);
    const auto views = parse_views(a.views, scene.cameras.size());
    BackprojectionConfig config;
    config.mode = parse_mode(a.mode);
    config.normalize = a.normalize;
    config.prune_epsilon = a.prune_epsilon;

    std::optional<Backprojector> bp;
    for (std::size_t i = 0; i < views.size(); ++i) {
        const fs::path file = fs::path(a.features) / numbered("feat_", views[i], ".ftn1");
        if (!fs::exists(file)) {
            throw CliError("missing feature map for view " + std::to_string(views[i]) + " (" + file.string() + ")");
        }
        const FeatureMap map = load_feature_map(file);
        if (!bp) {
            bp.emplace(scene, map.channels);
        }
        bp->add_view(views[i], map);
        std::cerr << "view " << views[i] << " (" << i + 1 << "/" << views.size() << ")\n";
    }
    if (!bp) {
        throw CliError("no views to back-project");
    }
    const FeatureStore store = bp->finish(config);
    const fs::path out(a.out);
    save_feature_store(store, out / "store.sfs");
    const json report = {{"schema", 1},
                         {"gaussians", store.count},
                         {"pruned", store.pruned_count()},
                         {"featureDim", store.dim},
                         {"views", views},
                         {"mode", a.mode},
                         {"normalize", a.normalize},
                         {"pruneEpsilon", a.prune_epsilon}};
    write_json(out / "backproject.json", report);
    const double secs = seconds_since(t0);
    std::cerr << "back-projected " << views.size() << " views into " << store.count << " Gaussians ("
              << store.pruned_count() << " pruned) in " << secs << " s\n";
    emit({{"command", "backproject"},
          {"gaussians", store.count},
          {"pruned", store.pruned_count()},
          {"featureDim", store.dim},
          {"views", views.size()},
          {"store", (out / "store.sfs").string()},
          {"wallSeconds", secs}});
    return 0;
}

struct RenderArgs {
    std::string scene, cameras, store, out, views, background = "0,0,0";
};

int cmd_render(const RenderArgs &a) {
    const SceneBundle scene = load_scene(a.scene, a.cameras, parse_background(a.background), true);
    const auto views = parse_views(a.views, scene.cameras.size());
    std::optional<FeatureStore> store;
    if (!a.store.empty()) {
        store = load_feature_store(a.store, scene.cloud.count());
    }
    const fs::path out(a.out);
    std::vector<std::string> files;
    for (std::size_t v : views) {
        const RenderOutput r = render(scene.cloud, scene.cameras[v], scene.background, {}, store ? &*store : nullptr);
        const fs::path png = out / numbered("render_", v, ".png");
        save_png(r.color, png);
        files.push_back(png.string());
        if (store) {
            const fs::path f = out / numbered("features_", v, ".ftn1");
            save_feature_map(*r.features, f);
            files.push_back(f.string());
        }
        std::cerr << "rendered view " << v << "\n";
    }
    emit({{"command", "render"}, {"gaussians", scene.cloud.count()}, {"views", views.size()}, {"files", files}});
    return 0;
}

struct SegmentArgs {
    std::string store, prompts, positive, out, scene, cameras, views;
    std::vector<std::string> negatives;
    double theta = 0.0;
    bool argmax = true;
    bool extract = false, remove = false, masks = false;
};

int cmd_segment(const SegmentArgs &a) {
    const FeatureStore store = load_feature_store(a.store);
    const PromptBank bank = load_prompt_bank(a.prompts);
    QuerySpec spec;
    spec.positive = bank.embedding(a.positive);
    for (const auto &n : a.negatives) {
        spec.negatives.push_back(bank.embedding(n));
    }
    spec.theta = a.theta;
    spec.require_argmax = a.argmax;
    spec.validate(store.dim);

    const auto t0 = std::chrono::steady_clock::now();
    const SegmentationResult result = segment_3d(store, spec);
    const double ms = 1000.0 * seconds_since(t0);

    const fs::path out(a.out);
    json doc = segmentation_to_json(result, store);
    doc["positive"] = a.positive;
    doc["negativeNames"] = a.negatives;
    write_json(out / "segment.json", doc);
    std::vector<std::string> files = {(out / "segment.json").string()};

    if (a.extract || a.remove || a.masks) {
        if (a.scene.empty() || a.cameras.empty()) {
            throw CliError("--extract, --delete and --masks need --scene and --cameras");
        }
        const SceneBundle scene = load_scene(a.scene, a.cameras);
        if (scene.cloud.count() != store.count) {
            throw ValidationError("store has " + std::to_string(store.count) + " rows, scene has " +
                                  std::to_string(scene.cloud.count()) + " Gaussians");
        }
        if (a.extract) {
            save_ply(extract_members(scene.cloud, store, result).cloud, out / "extraction.ply", true);
            files.push_back((out / "extraction.ply").string());
        }
        if (a.remove) {
            save_ply(delete_members(scene.cloud, store, result).cloud, out / "deletion.ply", true);
            files.push_back((out / "deletion.ply").string());
        }
        if (a.masks) {
            for (std::size_t v : parse_views(a.views, scene.cameras.size())) {
                const FeatureMap features = *render_features(scene, v, store).features;
                save_mask(segment_2d(features, spec), out / numbered("mask_", v, ".pgm"));
                const Raster<float> sim = similarity_map(features, spec.positive);
                Image gray(sim.height, sim.width, 1);
                for (std::size_t i = 0; i < sim.data.size(); ++i) {
                    gray.data[i] = 0.5f * (sim.data[i] + 1.0f);
                }
                save_png(gray, out / numbered("heatmap_", v, ".png"));
                files.push_back((out / numbered("mask_", v, ".pgm")).string());
                files.push_back((out / numbered("heatmap_", v, ".png")).string());
            }
        }
    }
    std::cerr << "members: " << result.members.size() << "\nquery latency: " << ms << " ms\n";
    emit({{"command", "segment"},
          {"memberCount", result.members.size()},
          {"gaussians", store.count},
          {"pruned", store.pruned_count()},
          {"theta", a.theta},
          {"latencyMs", ms},
          {"files", files}});
    return 0;
}

struct TransferArgs {
    std::string store, exemplars, truth, out;
    std::size_t k = 5;
    double background_threshold = 0.0;
};

int cmd_transfer(const TransferArgs &a) {
    const FeatureStore store = load_feature_store(a.store);
    const AffordanceSource source = load_affordance_source(a.exemplars);
    const auto t0 = std::chrono::steady_clock::now();
    const auto labels = knn_transfer(store, source, a.k, a.background_threshold);
    const double secs = seconds_since(t0);

    std::vector<std::size_t> counts(source.label_names.size(), 0);
    std::size_t background = 0;
    for (auto l : labels) {
        l >= 0 ? ++counts[static_cast<std::size_t>(l)] : ++background;
    }
    json doc = {{"schema", 1},     {"k", a.k},         {"backgroundThreshold", a.background_threshold},
                {"labelNames", source.label_names}, {"labels", labels}, {"counts", counts},
                {"background", background}};
    json summary = {{"command", "transfer"}, {"gaussians", store.count}, {"counts", counts}, {"seconds", secs}};
    if (!a.truth.empty()) {
        const auto truth = read_json(a.truth).at("labels").get<std::vector<std::int32_t>>();
        if (truth.size() != labels.size()) {
            throw ValidationError("truth has " + std::to_string(truth.size()) + " labels for " +
                                  std::to_string(labels.size()) + " Gaussians");
        }
        std::vector<std::int32_t> ids(source.label_names.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            ids[i] = static_cast<std::int32_t>(i);
        }
        const double miou = mean_iou(labels, truth, ids);
        double recall = 0.0;
        std::size_t used = 0;
        for (auto c : ids) {
            std::size_t hit = 0, total = 0;
            for (std::size_t g = 0; g < truth.size(); ++g) {
                total += truth[g] == c;
                hit += truth[g] == c && labels[g] == c;
            }
            if (total) {
                recall += double(hit) / double(total);
                ++used;
            }
        }
        recall = used ? recall / double(used) : 1.0;
        doc["miou"] = miou;
        doc["recall"] = recall;
        summary["miou"] = miou;
        summary["recall"] = recall;
        std::cerr << "mIoU " << miou << ", recall " << recall << "\n";
    }
    write_json(fs::path(a.out) / "transfer.json", doc);
    std::cerr << "transferred " << source.exemplars.size() << " exemplars to " << store.count << " Gaussians in "
              << secs << " s\n";
    emit(summary);
    return 0;
}

struct IdentityArgs {
    std::string scene, cameras, labels, out, views, classify, encoding = "orthogonal";
    std::size_t classes = 0, dim = 16, epochs = 2000;
    double lr = 0.05, reject = 0.1;
    std::uint64_t seed = 0;
};

int cmd_identity(const IdentityArgs &a) {
    const SceneBundle scene = load_scene(a.scene, a.cameras);
    const auto views = parse_views(a.views, scene.cameras.size());
    std::vector<LabeledView> labeled;
    std::int32_t max_label = -1;
    for (std::size_t v : views) {
        const fs::path file = fs::path(a.labels) / numbered("labels_", v, ".pgm");
        if (!fs::exists(file)) {
            throw CliError("missing label image for view " + std::to_string(v) + " (" + file.string() + ")");
        }
        LabeledView lv{v, load_labels(file)};
        for (auto l : lv.labels.data) {
            max_label = std::max(max_label, l);
        }
        labeled.push_back(std::move(lv));
    }
    const std::size_t classes = a.classes ? a.classes : static_cast<std::size_t>(max_label + 1);
    if (classes == 0) {
        throw CliError("label images contain no labeled pixels; pass --classes");
    }
    IdentityCodebook cb;
    const auto t0 = std::chrono::steady_clock::now();
    if (a.encoding == "orthogonal") {
        cb = orthogonal_codes(classes, a.dim);
    } else if (a.encoding == "contrastive") {
        cb = train_contrastive(classes, a.dim, ContrastiveConfig{a.epochs, a.lr, a.seed, false});
    } else {
        throw CliError("--encoding must be orthogonal or contrastive");
    }
    const double train_secs = seconds_since(t0);
    const FeatureStore store = encode_scene(scene, labeled, cb);
    const fs::path out(a.out);
    save_codebook(cb, out / "codebook.json");
    save_feature_store(store, out / "identity.sfs");
    std::vector<std::string> files = {(out / "codebook.json").string(), (out / "identity.sfs").string()};
    if (!a.classify.empty()) {
        for (std::size_t v : parse_views(a.classify, scene.cameras.size())) {
            const auto pred = classify_pixels(*render_features(scene, v, store).features, cb, a.reject);
            save_labels(pred, out / numbered("labels_", v, ".pgm"));
            files.push_back((out / numbered("labels_", v, ".pgm")).string());
        }
    }
    json summary = {{"command", "identity"},
                    {"encoding", a.encoding},
                    {"classes", classes},
                    {"dim", a.dim},
                    {"views", views.size()},
                    {"pruned", store.pruned_count()},
                    {"selfAccuracy", self_classification_accuracy(cb)},
                    {"trainSeconds", train_secs},
                    {"files", files}};
    if (std::isfinite(cb.final_loss)) {
        summary["finalLoss"] = cb.final_loss;
    }
    std::cerr << "encoded " << classes << " classes from " << views.size() << " views\n";
    emit(summary);
    return 0;
}

struct EvalArgs {
    std::string pred, truth;
};

int cmd_eval(const EvalArgs &a) {
    std::vector<fs::path> names;
    for (const auto &entry : fs::directory_iterator(a.truth)) {
        if (entry.path().extension() == ".pgm") {
            names.push_back(entry.path().filename());
        }
    }
    std::sort(names.begin(), names.end());
    if (names.empty()) {
        throw CliError("no .pgm label images in " + a.truth);
    }
    std::vector<std::int32_t> pred_all, truth_all;
    std::set<std::int32_t> classes;
    json per_image = json::array();
    for (const auto &name : names) {
        const fs::path pred_path = fs::path(a.pred) / name;
        if (!fs::exists(pred_path)) {
            throw CliError("prediction missing for " + name.string());
        }
        const LabelImage truth = load_labels(fs::path(a.truth) / name);
        const LabelImage pred = load_labels(pred_path);
        const auto ids = present_classes(pred, truth);
        per_image.push_back({{"image", name.string()}, {"miou", grouping_miou(pred, truth, ids)}});
        classes.insert(ids.begin(), ids.end());
        pred_all.insert(pred_all.end(), pred.data.begin(), pred.data.end());
        truth_all.insert(truth_all.end(), truth.data.begin(), truth.data.end());
    }
    const std::vector<std::int32_t> ids(classes.begin(), classes.end());
    const double miou = mean_iou(pred_all, truth_all, ids);
    std::cerr << "mIoU over " << names.size() << " images and " << ids.size() << " classes: " << miou << "\n";
    emit({{"command", "eval"}, {"images", names.size()}, {"classes", ids.size()}, {"miou", miou},
          {"perImage", per_image}});
    return 0;
}

struct ServeArgs {
    std::string scene, cameras, store, prompts, serve = "127.0.0.1:8080", out = "exports", static_dir;
    double theta = 0.0;
    bool any_origin = false;
};

int cmd_serve(const ServeArgs &a) {
    const auto colon = a.serve.rfind(':');
    if (colon == std::string::npos) {
        throw CliError("--serve expects HOST:PORT");
    }
    const std::string host = a.serve.substr(0, colon);
    int port = 0;
    try {
        port = std::stoi(a.serve.substr(colon + 1));
    } catch (const std::exception &) {
        throw CliError("--serve expects HOST:PORT");
    }
    ServiceOptions options;
    options.export_dir = a.out;
    options.theta_default = a.theta;
    options.cors_any_origin = a.any_origin;
    if (!a.static_dir.empty()) {
        options.static_dir = a.static_dir;
    }
    Service service(options);
    const int bound = service.bind(host, port);
    if (bound < 0) {
        throw IoError("cannot bind " + a.serve);
    }
    emit({{"command", "serve"}, {"host", host}, {"port", bound}});

    std::optional<std::string> load_error;
    std::thread loader([&] {
        try {
            SceneBundle scene = load_scene(a.scene, a.cameras);
            FeatureStore store = load_feature_store(a.store, scene.cloud.count());
            PromptBank prompts = a.prompts.empty() ? PromptBank{store.dim, {}} : load_prompt_bank(a.prompts);
            service.load(std::move(scene), std::move(store), std::move(prompts));
            std::cerr << "scene loaded; serving on " << host << ":" << bound << "\n";
        } catch (const std::exception &ex) {
            load_error = ex.what();
            service.stop();
        }
    });
    service.run();
    loader.join();
    if (load_error) {
        throw CliError("loading failed: " + *load_error);
    }
    return 0;
}

// ---------------------------------------------------------------------------------------------------------------

struct SynthArgs {
    std::string kind = "blobs", out;
    std::uint64_t seed = 0;
    std::size_t gaussians = 0, views = 0;
    int size = 0;
};

int cmd_synth(const SynthArgs &a) {
    const fs::path out(a.out);
    json summary = {{"command", "synth"}, {"kind", a.kind}};
    if (a.kind == "blobs") {
        synth::BlobSceneOptions o;
        o.seed = a.seed;
        if (a.gaussians) {
            o.gaussians_per_blob = std::max<std::size_t>(1, a.gaussians / o.blobs);
        }
        if (a.views) {
            o.training_views = a.views;
        }
        if (a.size) {
            o.width = o.height = a.size;
        }
        const auto blobs = synth::blob_scene(o);
        save_ply(blobs.scene.cloud, out / "scene.ply");
        save_cameras(blobs.scene.cameras, out / "cameras.json");
        for (std::size_t v = 0; v < blobs.scene.cameras.size(); ++v) {
            const LabelImage labels = synth::object_labels(blobs, v);
            save_labels(labels, out / "labels" / numbered("labels_", v, ".pgm"));
            if (std::find(blobs.training_views.begin(), blobs.training_views.end(), v) != blobs.training_views.end()) {
                save_feature_map(synth::onehot_feature_map(labels, blobs.objects),
                                 out / "features" / numbered("feat_", v, ".ftn1"));
            }
        }
        PromptBank bank{blobs.objects, {}};
        for (std::size_t c = 0; c < blobs.objects; ++c) {
            std::vector<float> e(blobs.objects, 0.0f);
            e[c] = 1.0f;
            bank.entries.push_back({"object_" + std::to_string(c), e});
        }
        save_prompt_bank(bank, out / "prompts.json");
        write_json(out / "fixture.json", {{"objects", blobs.objects},
                                          {"object", blobs.object},
                                          {"trainingViews", blobs.training_views},
                                          {"heldoutViews", blobs.heldout_views}});
        summary["gaussians"] = blobs.scene.cloud.count();
        summary["views"] = blobs.scene.cameras.size();
    } else if (a.kind == "affordance") {
        synth::AffordanceOptions o;
        o.seed = a.seed;
        if (a.gaussians) {
            o.gaussians = a.gaussians;
        }
        const auto fx = synth::affordance_fixture(o);
        save_feature_store(fx.store, out / "store.sfs");
        write_json(out / "exemplars.json", affordance_source_to_json(fx.source));
        write_json(out / "truth.json", {{"labels", fx.truth}});
        summary["gaussians"] = fx.store.count;
        summary["exemplars"] = fx.source.exemplars.size();
    } else if (a.kind == "random") {
        synth::RandomSceneOptions o;
        o.seed = a.seed;
        if (a.gaussians) {
            o.gaussians = a.gaussians;
        }
        if (a.views) {
            o.views = a.views;
        }
        if (a.size) {
            o.width = o.height = a.size;
        }
        const SceneBundle scene = synth::random_scene(o);
        save_ply(scene.cloud, out / "scene.ply");
        save_cameras(scene.cameras, out / "cameras.json");
        summary["gaussians"] = scene.cloud.count();
        summary["views"] = scene.cameras.size();
    } else if (a.kind == "empty") {
        const int size = a.size ? a.size : 64;
        save_ply(GaussianCloud{}, out / "scene.ply", true);
        const std::vector<Camera> cams = {synth::orbit_camera(0, 4.0, 0.0, 0.0, size, size, synth::focal_for_fov(size, 50.0))};
        save_cameras(cams, out / "cameras.json");
        summary["gaussians"] = 0;
        summary["views"] = 1;
    } else {
        throw CliError("--kind must be blobs, affordance, random or empty");
    }
    summary["out"] = out.string();
    emit(summary);
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"splatfield: training-free feature fields for Gaussian splatting scenes"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--threads", common.threads, "Worker threads (default: SPLATFIELD_THREADS, then hardware count)")
        ->check(CLI::NonNegativeNumber);

    BackprojectArgs bp;
    auto *c_bp = app.add_subcommand("backproject", "Back-project per-view feature maps into a per-Gaussian store");
    c_bp->add_option("--scene", bp.scene, "Gaussian scene (PLY)")->required()->check(CLI::ExistingFile);
    c_bp->add_option("--cameras", bp.cameras, "Camera file (JSON)")->required()->check(CLI::ExistingFile);
    c_bp->add_option("--features", bp.features, "Directory of feat_{view:05}.ftn1 maps")->required()->check(CLI::ExistingDirectory);
    c_bp->add_option("--out", bp.out, "Output directory")->required();
    c_bp->add_option("--views", bp.views, "Views to use, e.g. 0-9,12 (default: all)");
    c_bp->add_option("--mode", bp.mode, "expected or accumulated")->capture_default_str();
    c_bp->add_option("--normalize", bp.normalize, "L2-normalize each row")->capture_default_str();
    c_bp->add_option("--prune-epsilon", bp.prune_epsilon, "Prune Gaussians with total weight <= this")->capture_default_str();

    RenderArgs rd;
    auto *c_rd = app.add_subcommand("render", "Render color (and optionally feature) images");
    c_rd->add_option("--scene", rd.scene, "Gaussian scene (PLY)")->required()->check(CLI::ExistingFile);
    c_rd->add_option("--cameras", rd.cameras, "Camera file (JSON)")->required()->check(CLI::ExistingFile);
    c_rd->add_option("--store", rd.store, "Feature store; also writes features_{view:05}.ftn1");
    c_rd->add_option("--views", rd.views, "Views to render (default: all)");
    c_rd->add_option("--background", rd.background, "Background color r,g,b in [0,1]")->capture_default_str();
    c_rd->add_option("--out", rd.out, "Output directory")->required();

    SegmentArgs sg;
    auto *c_sg = app.add_subcommand("segment", "Select Gaussians by feature similarity to a prompt");
    c_sg->add_option("--store", sg.store, "Feature store")->required()->check(CLI::ExistingFile);
    c_sg->add_option("--prompts", sg.prompts, "Prompt bank (JSON)")->required()->check(CLI::ExistingFile);
    c_sg->add_option("--positive", sg.positive, "Positive prompt name")->required();
    c_sg->add_option("--negative", sg.negatives, "Negative prompt name (repeatable)");
    c_sg->add_option("--theta", sg.theta, "Similarity threshold")->capture_default_str();
    c_sg->add_option("--argmax", sg.argmax, "Require the positive to beat every negative")->capture_default_str();
    c_sg->add_option("--scene", sg.scene, "Gaussian scene, for --extract/--delete/--masks");
    c_sg->add_option("--cameras", sg.cameras, "Camera file, for --extract/--delete/--masks");
    c_sg->add_flag("--extract", sg.extract, "Write extraction.ply (members only)");
    c_sg->add_flag("--delete", sg.remove, "Write deletion.ply (members removed)");
    c_sg->add_flag("--masks", sg.masks, "Write per-view mask PGMs and similarity heatmaps");
    c_sg->add_option("--views", sg.views, "Views for --masks (default: all)");
    c_sg->add_option("--out", sg.out, "Output directory")->required();

    TransferArgs tr;
    auto *c_tr = app.add_subcommand("transfer", "kNN affordance transfer from labeled exemplars");
    c_tr->add_option("--store", tr.store, "Target feature store")->required()->check(CLI::ExistingFile);
    c_tr->add_option("--exemplars", tr.exemplars, "Exemplars (JSON)")->required()->check(CLI::ExistingFile);
    c_tr->add_option("--k", tr.k, "Neighbours")->capture_default_str()->check(CLI::PositiveNumber);
    c_tr->add_option("--background-threshold", tr.background_threshold,
                     "Best similarity below this labels a Gaussian as background (-1)")
        ->capture_default_str();
    c_tr->add_option("--truth", tr.truth, "Ground-truth per-Gaussian labels (JSON {labels}) for mIoU/recall");
    c_tr->add_option("--out", tr.out, "Output directory")->required();

    IdentityArgs id;
    auto *c_id = app.add_subcommand("identity", "Encode object identities from labeled views");
    c_id->add_option("--scene", id.scene, "Gaussian scene (PLY)")->required()->check(CLI::ExistingFile);
    c_id->add_option("--cameras", id.cameras, "Camera file (JSON)")->required()->check(CLI::ExistingFile);
    c_id->add_option("--labels", id.labels, "Directory of labels_{view:05}.pgm")->required()->check(CLI::ExistingDirectory);
    c_id->add_option("--views", id.views, "Labeled views to use (default: all)");
    c_id->add_option("--encoding", id.encoding, "orthogonal or contrastive")->capture_default_str();
    c_id->add_option("--classes", id.classes, "Number of classes (default: max label + 1)");
    c_id->add_option("--dim", id.dim, "Code dimension")->capture_default_str();
    c_id->add_option("--epochs", id.epochs, "Contrastive training epochs")->capture_default_str();
    c_id->add_option("--lr", id.lr, "Contrastive learning rate")->capture_default_str();
    c_id->add_option("--seed", id.seed, "Contrastive seed")->capture_default_str();
    c_id->add_option("--classify", id.classify, "Views to classify and write as label images");
    c_id->add_option("--reject", id.reject, "Minimum rendered feature norm for a label")->capture_default_str();
    c_id->add_option("--out", id.out, "Output directory")->required();

    EvalArgs ev;
    auto *c_ev = app.add_subcommand("eval", "mIoU between predicted and ground-truth label images");
    c_ev->add_option("--pred", ev.pred, "Directory of predicted label PGMs")->required()->check(CLI::ExistingDirectory);
    c_ev->add_option("--truth", ev.truth, "Directory of ground-truth label PGMs")->required()->check(CLI::ExistingDirectory);

    ServeArgs sv;
    auto *c_sv = app.add_subcommand("serve", "Serve interactive queries over HTTP");
    c_sv->add_option("--scene", sv.scene, "Gaussian scene (PLY)")->required()->check(CLI::ExistingFile);
    c_sv->add_option("--cameras", sv.cameras, "Camera file (JSON)")->required()->check(CLI::ExistingFile);
    c_sv->add_option("--store", sv.store, "Feature store")->required()->check(CLI::ExistingFile);
    c_sv->add_option("--prompts", sv.prompts, "Prompt bank (JSON)");
    c_sv->add_option("--serve", sv.serve, "HOST:PORT (port 0 picks a free one)")->capture_default_str();
    c_sv->add_option("--out", sv.out, "Export directory")->capture_default_str();
    c_sv->add_option("--static", sv.static_dir, "Static files to serve at /");
    c_sv->add_option("--theta", sv.theta, "Default threshold reported to clients")->capture_default_str();
    c_sv->add_flag("--any-origin", sv.any_origin, "Allow cross-origin requests from any origin");

    SynthArgs sy;
    auto *c_sy = app.add_subcommand("synth", "Write a synthetic fixture");
    c_sy->add_option("--kind", sy.kind, "blobs, affordance, random or empty")->capture_default_str();
    c_sy->add_option("--seed", sy.seed, "Random seed")->capture_default_str();
    c_sy->add_option("--gaussians", sy.gaussians, "Gaussian count (default per kind)");
    c_sy->add_option("--views", sy.views, "View count (default per kind)");
    c_sy->add_option("--size", sy.size, "Image width and height (default per kind)");
    c_sy->add_option("--out", sy.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return 1;
    }

    try {
        set_thread_count(common.threads);
        if (*c_bp) {
            return cmd_backproject(bp);
        }
        if (*c_rd) {
            return cmd_render(rd);
        }
        if (*c_sg) {
            return cmd_segment(sg);
        }
        if (*c_tr) {
            return cmd_transfer(tr);
        }
        if (*c_id) {
            return cmd_identity(id);
        }
        if (*c_ev) {
            return cmd_eval(ev);
        }
        if (*c_sv) {
            return cmd_serve(sv);
        }
        if (*c_sy) {
            return cmd_synth(sy);
        }
    } catch (const std::exception &ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 1;
}

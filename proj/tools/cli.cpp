#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <CLI11.hpp>

#include "floc/checkpoint.hpp"
#include "floc/datasynth.hpp"
#include "floc/gradsuite.hpp"
#include "floc/hilbert.hpp"
#include "floc/image.hpp"
#include "floc/metrics.hpp"
#include "floc/resampling.hpp"

namespace floc::cli {

namespace fs = std::filesystem;

nlohmann::json RunConfig::to_json() const {
    return {{"profile", profile}, {"seed", seed}, {"network", network.to_json()}, {"train", train.to_json()}};
}

RunConfig resolve_config(const std::optional<fs::path>& config_file, const std::optional<std::string>& profile,
                         const std::optional<std::uint64_t>& seed) {
    nlohmann::json j = nlohmann::json::object();
    if (config_file) {
        std::ifstream in(*config_file);
        if (!in) throw ArgumentError("cannot open config " + config_file->string());
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ArgumentError("malformed config " + config_file->string() + ": " + e.what());
        }
        if (!j.is_object()) throw ArgumentError("config " + config_file->string() + " is not a JSON object");
    }
    RunConfig rc;
    rc.profile = profile.value_or(j.value("profile", std::string("desk")));
    if (rc.profile == "desk") {
        rc.network = NetworkConfig::desk();
        rc.train = TrainConfig::desk();
    } else if (rc.profile == "full") {
        rc.network = NetworkConfig::full();
        rc.train = TrainConfig::full();
    } else {
        throw ArgumentError("unknown profile '" + rc.profile + "' (expected desk or full)");
    }
    if (j.contains("network")) rc.network = NetworkConfig::from_json(j.at("network"), rc.network);
    if (j.contains("train")) rc.train = TrainConfig::from_json(j.at("train"), rc.train);
    try {
        rc.seed = seed.value_or(j.value("seed", std::uint64_t{0}));
    } catch (const nlohmann::json::exception& e) {
        throw ArgumentError(std::string("config seed: ") + e.what());
    }
    rc.train.seed = rc.seed;
    rc.network.validate();
    rc.train.validate();
    return rc;
}

void write_probability_map(const fs::path& path, const Tensor& manipulation, const nlohmann::json& meta) {
    require_rank(manipulation, 2, "probability map");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    for (double v : manipulation.values()) le::put_f64(out, v);
    if (!out) throw FormatError("failed writing " + path.string());
    nlohmann::ordered_json side;
    side["shape"] = {manipulation.dim(0), manipulation.dim(1)};
    side["dtype"] = "float64-le";
    side["channel"] = "manipulated";
    for (auto it = meta.begin(); it != meta.end(); ++it) side[it.key()] = it.value();
    std::ofstream sj(path.string() + ".json");
    sj << side.dump(2) << '\n';
    if (!sj) throw FormatError("failed writing sidecar for " + path.string());
}

Tensor read_probability_map(const fs::path& path) {
    std::ifstream sj(path.string() + ".json");
    if (!sj) throw FormatError("missing sidecar " + path.string() + ".json");
    nlohmann::json side;
    try {
        side = nlohmann::json::parse(sj);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed sidecar for " + path.string() + ": " + e.what());
    }
    const auto shape = side.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw FormatError("probability map sidecar must give a 2-D shape");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    Tensor t({shape[0], shape[1]});
    for (auto& v : t.storage()) v = le::get_f64(in);
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + " is longer than its sidecar shape");
    return t;
}

fs::path resolve_path(const fs::path& manifest, const std::string& entry) {
    const fs::path p(entry);
    return p.is_absolute() ? p : manifest.parent_path() / p;
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
    jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(n, 1));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
        workers.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next = n;
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (failure) std::rethrow_exception(failure);
}

namespace {

struct Common {
    std::optional<fs::path> config;
    std::optional<std::string> profile;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
    std::optional<fs::path> checkpoint;
    fs::path out = ".";
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
    app->add_option("--profile", c.profile, "desk or full")->check(CLI::IsMember({"desk", "full"}));
    app->add_option("--seed", c.seed, "random seed");
    app->add_option("--jobs", c.jobs, "parallel workers")->check(CLI::PositiveNumber);
    app->add_option("--checkpoint", c.checkpoint, "model checkpoint");
    app->add_option("--out", c.out, "output directory");
}

std::vector<fs::path> list_pngs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw ArgumentError(dir.string() + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

struct ImageInput {
    fs::path image;
    fs::path mask;  // empty when unknown
    std::string name;
};

std::vector<ImageInput> gather_inputs(const std::optional<fs::path>& manifest, const std::vector<fs::path>& images) {
    std::vector<ImageInput> inputs;
    if (manifest) {
        for (const auto& r : read_manifest(*manifest)) {
            const fs::path img = resolve_path(*manifest, r.image);
            inputs.push_back({img, r.mask.empty() ? fs::path{} : resolve_path(*manifest, r.mask), img.stem().string()});
        }
    }
    for (const auto& p : images) inputs.push_back({p, {}, p.stem().string()});
    if (inputs.empty()) throw ArgumentError("no input images (give --manifest or image paths)");
    return inputs;
}

Tensor load_network_input(const fs::path& path, std::size_t side) {
    Tensor img = to_rgb(read_png(path));
    if (img.dim(0) != side || img.dim(1) != side) img = resize_bilinear(img, side, side);
    return img;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create directory " + dir.string() + ": " + ec.message());
}

int run_synth(const RunConfig& rc, const fs::path& sources_dir, const fs::path& objects_dir, std::size_t per_crop,
              std::size_t crop_side, std::ostream& out, std::ostream& err) {
    std::vector<SourceImage> sources;
    for (const auto& p : list_pngs(sources_dir)) sources.push_back({to_rgb(read_png(p)), p.stem().string()});
    std::vector<SegmentedObject> objects;
    for (const auto& p : list_pngs(objects_dir)) objects.push_back(load_object(p));
    ensure_dir(rc.out / "images");
    ensure_dir(rc.out / "masks");
    std::ofstream manifest(rc.out / "manifest.jsonl");
    if (!manifest) throw std::runtime_error("cannot write " + (rc.out / "manifest.jsonl").string());

    CorpusOptions opts;
    opts.per_crop_objects = per_crop;
    opts.crop_side = crop_side;
    opts.seed = rc.seed;
    const auto report = generate_corpus(sources, objects, opts, [&](const GeneratedSample& s) {
        const std::string image = "images/" + s.name + ".png", mask = "masks/" + s.name + ".png";
        write_png(rc.out / image, s.image);
        write_png(rc.out / mask, s.mask);
        manifest << corpus_manifest_line(s, image, mask, rc.seed) << '\n';
    });
    for (const auto& w : report.warnings) err << "warning: " << w << '\n';
    out << "generated " << report.generated << " samples into " << rc.out.string() << '\n';
    return kExitOk;
}

int run_features(const RunConfig& rc, const std::vector<ImageInput>& inputs, std::ostream& out) {
    ensure_dir(rc.out);
    parallel_for(inputs.size(), rc.jobs, [&](std::size_t i) {
        const Tensor img = load_network_input(inputs[i].image, rc.network.input_side);
        save_feature_dump(rc.out / (inputs[i].name + ".frsf"),
                          image_features(img, rc.network.features, rc.network.patch_grid));
    });
    out << "wrote " << inputs.size() << " feature dumps\n";
    return kExitOk;
}

int run_train(RunConfig rc, const fs::path& manifest, std::optional<std::size_t> iterations, std::ostream& out,
              std::ostream& err) {
    if (iterations) rc.train.iterations = *iterations;
    rc.train.validate();
    const auto records = read_manifest(manifest);
    std::vector<LabeledSample> samples;
    for (const auto& r : records) {
        if (r.mask.empty()) throw ArgumentError("manifest entry " + r.image + " has no mask");
        LabeledSample s{to_rgb(read_png(resolve_path(manifest, r.image))),
                        to_mask(read_png(resolve_path(manifest, r.mask))), r.source_id, r.split};
        samples.push_back(prepare_sample(s, rc.network.input_side));
    }
    const bool presplit = std::any_of(samples.begin(), samples.end(), [](const auto& s) { return s.split == "train"; });
    std::vector<LabeledSample> train_set, validation_set;
    if (presplit) {
        for (auto& s : samples) {
            if (s.split == "train") train_set.push_back(std::move(s));
            if (s.split == "validation") validation_set.push_back(std::move(s));
        }
    } else {
        auto split = split_dataset(samples, rc.seed);
        train_set = std::move(split.train);
        validation_set = std::move(split.validation);
    }

    Model model = rc.checkpoint ? Model::load(*rc.checkpoint, rc.network) : Model::initialize(rc.network, rc.seed);
    ensure_dir(rc.out);
    rc.train.checkpoint_dir = rc.out / "checkpoints";
    const TrainResult result = train(model, train_set, validation_set, rc.train);

    model.save(rc.out / "model.floc");
    std::ofstream cfg(rc.out / "config.json");
    cfg << rc.to_json().dump(2) << '\n';
    std::ofstream csv(rc.out / "loss.csv");
    write_loss_csv(csv, result);
    if (!cfg || !csv) throw std::runtime_error("failed writing training outputs to " + rc.out.string());
    out << "trained " << result.iterations_run << " iterations on " << train_set.size() << " samples";
    if (!result.loss_history.empty()) out << ", final loss " << result.loss_history.back();
    out << '\n';
    if (result.diverged) {
        err << "training diverged; the last good checkpoint was restored\n";
        return kExitRuntime;
    }
    return kExitOk;
}

int run_predict(const RunConfig& rc, const std::vector<ImageInput>& inputs, std::ostream& out) {
    if (!rc.checkpoint) throw ArgumentError("predict needs --checkpoint");
    const Model model = Model::load(*rc.checkpoint, rc.network);
    ensure_dir(rc.out);
    parallel_for(inputs.size(), rc.jobs, [&](std::size_t i) {
        Model local = model;
        const Tensor img = load_network_input(inputs[i].image, rc.network.input_side);
        const Tensor probs = local.predict(img);
        const fs::path base = rc.out / inputs[i].name;
        // The map and its sidecar go first so a mask never exists without them.
        write_probability_map(base.string() + ".prob.f64", manipulation_probability(probs),
                              {{"image", inputs[i].image.string()}, {"profile", rc.profile}});
        write_png(base.string() + ".mask.png", predict_mask(probs));
    });
    out << "predicted " << inputs.size() << " images\n";
    return kExitOk;
}

int run_eval(const RunConfig& rc, const fs::path& manifest, const fs::path& predictions, bool roc, std::ostream& out) {
    const auto inputs = gather_inputs(manifest, {});
    std::vector<ImageMetrics> metrics(inputs.size());
    std::vector<ImageDetections> detections(inputs.size());
    if (roc) ensure_dir(rc.out / "roc");
    parallel_for(inputs.size(), rc.jobs, [&](std::size_t i) {
        const auto& in = inputs[i];
        if (in.mask.empty()) throw ArgumentError("manifest entry " + in.image.string() + " has no mask");
        const Tensor p = read_probability_map(predictions / (in.name + ".prob.f64"));
        Tensor truth = to_mask(read_png(in.mask));
        if (truth.dim(0) != p.dim(0) || truth.dim(1) != p.dim(1)) truth = resize_mask(truth, p.dim(0), p.dim(1));
        Tensor probs({p.dim(0), p.dim(1), 2});
        for (std::size_t k = 0; k < p.size(); ++k) {
            probs[2 * k] = 1.0 - p[k];
            probs[2 * k + 1] = p[k];
        }
        metrics[i] = evaluate_image(in.name, probs, truth, &detections[i]);
        if (roc && !std::isnan(metrics[i].auc)) {
            std::ofstream rs(rc.out / "roc" / (in.name + ".csv"));
            write_roc_csv(rs, roc_auc(p, truth));
        }
    });
    ensure_dir(rc.out);
    std::ofstream m(rc.out / "metrics.csv");
    write_metrics_csv(m, metrics);
    const CorpusSummary summary = summarize(metrics, detections);
    std::ofstream s(rc.out / "summary.csv");
    write_summary_csv(s, summary);
    if (!m || !s) throw std::runtime_error("failed writing metrics to " + rc.out.string());
    out << "evaluated " << summary.images << " images: mean accuracy " << summary.mean_accuracy << ", mean AUC "
        << summary.mean_auc << ", AP " << summary.average_precision << '\n';
    return kExitOk;
}

int run_hilbert(std::size_t order, bool raster, std::ostream& out) {
    const HilbertOrdering h = raster ? HilbertOrdering::raster(order) : hilbert_curve(order);
    out << "t,row,col\n";
    for (std::size_t t = 0; t < h.length(); ++t) {
        const auto c = h.cell(t);
        out << t << ',' << c.row << ',' << c.col << '\n';
    }
    return kExitOk;
}

int run_gradcheck(const RunConfig& rc, bool end_to_end, std::ostream& out) {
    const auto entries = run_gradient_suite(rc.seed, end_to_end);
    bool ok = true;
    for (const auto& e : entries) {
        out << e.name << ' ' << e.report.summary() << '\n';
        ok = ok && e.report.passed;
    }
    out << (ok ? "all gradient checks passed" : "gradient checks FAILED") << '\n';
    return ok ? kExitOk : kExitRuntime;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Pixel-level manipulation localization", "floc"};
    app.require_subcommand(1);
    Common common;

    auto* synth = app.add_subcommand("synth", "generate a spliced training corpus");
    fs::path sources_dir, objects_dir;
    std::size_t per_crop = 6, crop_side = 1024;
    synth->add_option("--sources", sources_dir, "directory of source PNGs")->required();
    synth->add_option("--objects", objects_dir, "directory of RGBA object PNGs")->required();
    synth->add_option("--per-crop", per_crop, "objects spliced per corner crop")->check(CLI::PositiveNumber);
    synth->add_option("--crop-side", crop_side, "corner crop side")->check(CLI::PositiveNumber);

    std::optional<fs::path> manifest;
    std::vector<fs::path> images;
    auto* features = app.add_subcommand("features", "dump resampling descriptors per image");
    features->add_option("--manifest", manifest, "JSON-lines manifest")->check(CLI::ExistingFile);
    features->add_option("images", images, "image paths")->check(CLI::ExistingFile);

    auto* train_cmd = app.add_subcommand("train", "train a model");
    std::optional<std::size_t> iterations;
    train_cmd->add_option("--manifest", manifest, "JSON-lines manifest")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--iterations", iterations, "override the iteration count");

    auto* predict = app.add_subcommand("predict", "write probability maps and masks");
    predict->add_option("--manifest", manifest, "JSON-lines manifest")->check(CLI::ExistingFile);
    predict->add_option("images", images, "image paths")->check(CLI::ExistingFile);

    auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
    fs::path predictions;
    bool roc = false;
    eval->add_option("--manifest", manifest, "JSON-lines manifest")->required()->check(CLI::ExistingFile);
    eval->add_option("--predictions", predictions, "directory written by predict")->required();
    eval->add_flag("--roc", roc, "also write per-image ROC points");

    auto* hilbert = app.add_subcommand("hilbert", "print a Hilbert ordering as CSV");
    std::size_t order = 0;
    bool raster = false;
    hilbert->add_option("--order", order, "curve order")->required()->check(CLI::Range(1, 15));
    hilbert->add_flag("--raster", raster, "print the raster ordering instead");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient report");
    bool layers_only = false;
    gradcheck->add_flag("--layers-only", layers_only, "skip the end-to-end desk-profile check");

    for (auto* sub : {synth, features, train_cmd, predict, eval, hilbert, gradcheck}) add_common(sub, common);

    try {
        app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitValidation;
    }

    try {
        RunConfig rc = resolve_config(common.config, common.profile, common.seed);
        rc.jobs = common.jobs;
        rc.checkpoint = common.checkpoint;
        rc.out = common.out;
        if (synth->parsed()) return run_synth(rc, sources_dir, objects_dir, per_crop, crop_side, out, err);
        if (features->parsed()) return run_features(rc, gather_inputs(manifest, images), out);
        if (train_cmd->parsed()) return run_train(rc, *manifest, iterations, out, err);
        if (predict->parsed()) return run_predict(rc, gather_inputs(manifest, images), out);
        if (eval->parsed()) return run_eval(rc, *manifest, predictions, roc, out);
        if (hilbert->parsed()) return run_hilbert(order, raster, out);
        if (gradcheck->parsed()) return run_gradcheck(rc, !layers_only, out);
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    err << app.help();
    return kExitValidation;
}

}  // namespace floc::cli

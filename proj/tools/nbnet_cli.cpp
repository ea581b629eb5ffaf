// Pipeline driver: one subcommand per stage, JSON config with flag overrides,
// seeded runs recorded in a manifest of resolved settings and artifact hashes.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "nbnet/attack_eval.hpp"
#include "nbnet/data.hpp"
#include "nbnet/errors.hpp"
#include "nbnet/extractor.hpp"
#include "nbnet/gan.hpp"
#include "nbnet/image_io.hpp"
#include "nbnet/losses.hpp"
#include "nbnet/nbnet.hpp"
#include "nbnet/norta.hpp"
#include "nbnet/sha256.hpp"
#include "nbnet/svg.hpp"
#include "nbnet/synth.hpp"
#include "nbnet/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nbnet;

namespace {

struct Ctx {
    json cfg = json::object();
    std::string config_path;
    std::string profile = "canonical";  // canonical | desk
    std::string out_root;
    std::string run_id;
    std::uint64_t seed = 1;
    bool overwrite = false;
    std::string run_dir;
    json resolved = json::object();
    std::map<std::string, std::string> input_hashes;
};

// Collects every config complaint before failing, so a bad file surfaces all
// of its problems in one pass.
class ConfigReader {
public:
    explicit ConfigReader(const json& root) : root_(&root) {}

    bool has(const std::string& section, const std::string& key) const {
        if (!root_->contains(section) || !(*root_)[section].is_object()) return false;
        return (*root_)[section].contains(key);
    }

    template <class T>
    T get(const std::string& section, const std::string& key, T fallback) {
        if (!has(section, key)) return fallback;
        try {
            return (*root_)[section][key].get<T>();
        } catch (const json::exception&) {
            errors_.push_back("key " + section + "." + key + " has the wrong type");
            return fallback;
        }
    }

    template <class T>
    T require(const std::string& section, const std::string& key) {
        if (!has(section, key)) {
            errors_.push_back("missing key " + section + "." + key);
            return T{};
        }
        return get<T>(section, key, T{});
    }

    std::string require_file(const std::string& section, const std::string& key) {
        std::string p = require<std::string>(section, key);
        if (!p.empty() && !fs::exists(p))
            errors_.push_back("key " + section + "." + key + " points to a missing file: " + p);
        return p;
    }

    void complain(const std::string& msg) { errors_.push_back(msg); }

    void finish(const std::string& command) const {
        if (errors_.empty()) return;
        std::string msg = "invalid configuration for " + command + ":";
        for (auto& e : errors_) msg += "\n  - " + e;
        throw ValidationError(msg);
    }

private:
    const json* root_;
    std::vector<std::string> errors_;
};

json load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("config file not found: " + path);
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw ValidationError("config file " + path + " is not valid JSON: " + e.what());
    }
}

void note_input(Ctx& ctx, const std::string& path) {
    if (fs::exists(path) && fs::is_regular_file(path))
        ctx.input_hashes[path] = sha256_file(path);
}

void prepare_run_dir(Ctx& ctx) {
    ctx.run_dir = (fs::path(ctx.out_root) / ctx.run_id).string();
    if (fs::exists(fs::path(ctx.run_dir) / "run_manifest.json")) {
        if (!ctx.overwrite)
            throw ValidationError("run id '" + ctx.run_id + "' already exists under " +
                                  ctx.out_root + "; pass --overwrite to replace it");
        fs::remove_all(ctx.run_dir);
    }
    fs::create_directories(ctx.run_dir);
}

// Logs carry wall-clock timings, so they stay out of the output hash list;
// everything else a run produces is a pure function of config + seed + inputs.
void write_run_manifest(const Ctx& ctx, const std::string& command) {
    json outputs = json::object();
    for (auto& de : fs::recursive_directory_iterator(ctx.run_dir)) {
        if (!de.is_regular_file()) continue;
        std::string name = de.path().filename().string();
        if (name == "run_manifest.json" ||
            (name.size() > 6 && name.substr(name.size() - 6) == ".jsonl"))
            continue;
        std::string rel = fs::relative(de.path(), ctx.run_dir).string();
        outputs[rel] = sha256_file(de.path().string());
    }
    json inputs = json::object();
    for (auto& [p, h] : ctx.input_hashes) inputs[p] = h;
    json m;
    m["command"] = command;
    m["run_id"] = ctx.run_id;
    m["seed"] = ctx.seed;
    m["profile"] = ctx.profile;
    m["config"] = ctx.resolved;
    m["inputs"] = inputs;
    m["outputs"] = outputs;
    std::ofstream f((fs::path(ctx.run_dir) / "run_manifest.json").string());
    f << m.dump(2) << "\n";
}

ImageManifest load_data_manifest(Ctx& ctx, const std::string& path, const std::string& partition) {
    note_input(ctx, path);
    ImageManifest m = load_manifest(path);
    if (partition.empty()) return m;
    ImageManifest out;
    for (auto& e : m.entries)
        if (e.partition == partition) out.entries.push_back(e);
    if (out.entries.empty())
        throw ValidationError("manifest " + path + " has no entries in partition '" + partition +
                              "'");
    return out;
}

RawImage to_raw_image(const Tensor<float>& pixels) {
    // (3,H,W) in [-1,1] to interleaved bytes
    RawImage img;
    img.height = int(pixels.dim(1));
    img.width = int(pixels.dim(2));
    img.rgb.resize(std::size_t(img.width) * img.height * 3);
    std::size_t plane = std::size_t(img.width) * img.height;
    for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) {
            float v = (pixels.data()[c * plane + i] + 1.0f) * 127.5f;
            img.rgb[i * 3 + c] = (unsigned char)std::min(255.0f, std::max(0.0f, v));
        }
    return img;
}

RawImage side_by_side(const RawImage& a, const RawImage& b) {
    int h = std::max(a.height, b.height);
    RawImage out;
    out.width = a.width + b.width;
    out.height = h;
    out.rgb.assign(std::size_t(out.width) * h * 3, 0);
    auto blit = [&](const RawImage& src, int x0) {
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x)
                for (int c = 0; c < 3; ++c)
                    out.rgb[(std::size_t(y) * out.width + x0 + x) * 3 + c] =
                        src.rgb[(std::size_t(y) * src.width + x) * 3 + c];
    };
    blit(a, 0);
    blit(b, a.width);
    return out;
}

// ---------------------------------------------------------------- extractor

int cmd_train_extractor(Ctx& ctx) {
    ConfigReader r(ctx.cfg);
    std::string manifest_path = r.require_file("data", "manifest");
    std::string partition = r.get<std::string>("data", "partition", "");
    ExtractorConfig cfg;
    cfg.extractor_id = r.get<std::string>("extractor", "id", cfg.extractor_id);
    cfg.input_size = r.get<int>("extractor", "input_size", cfg.input_size);
    cfg.output_dim = r.get<int>("extractor", "output_dim", cfg.output_dim);
    cfg.widths = r.get<std::vector<int>>("extractor", "widths", cfg.widths);
    cfg.feature_stage = r.get<int>("extractor", "feature_stage", cfg.feature_stage);
    cfg.margin = r.get<double>("extractor", "margin", cfg.margin);
    cfg.lr = r.get<double>("extractor", "lr", cfg.lr);
    cfg.batches = r.get<int>("extractor", "batches", cfg.batches);
    cfg.triplets_per_batch = r.get<int>("extractor", "triplets_per_batch", cfg.triplets_per_batch);
    cfg.seed = ctx.seed;
    if (cfg.input_size < 8) r.complain("extractor.input_size must be at least 8");
    if (cfg.output_dim < 1) r.complain("extractor.output_dim must be positive");
    if (cfg.batches < 1) r.complain("extractor.batches must be positive");
    r.finish("train-extractor");

    prepare_run_dir(ctx);
    ctx.resolved["data"] = {{"manifest", manifest_path}, {"partition", partition}};
    ctx.resolved["extractor"] = {
        {"id", cfg.extractor_id},       {"input_size", cfg.input_size},
        {"output_dim", cfg.output_dim}, {"widths", cfg.widths},
        {"feature_stage", cfg.feature_stage}, {"margin", cfg.margin},
        {"lr", cfg.lr},                 {"batches", cfg.batches},
        {"triplets_per_batch", cfg.triplets_per_batch}};

    ImageManifest train_set = load_data_manifest(ctx, manifest_path, partition);
    std::string ckpt = (fs::path(ctx.run_dir) / "extractor.ckpt").string();
    std::string log = (fs::path(ctx.run_dir) / "extractor_log.jsonl").string();
    ExtractorHandle<float> h = train_stand_in_extractor<float>(train_set, cfg, ckpt, log);
    std::cout << "extractor checkpoint: " << ckpt << "\n";
    std::cout << "extractor id: " << h.info().extractor_id
              << ", output dim " << h.info().output_dim << ", weights digest "
              << h.weights_digest().substr(0, 12) << "\n";
    write_run_manifest(ctx, "train-extractor");
    return 0;
}

// ---------------------------------------------------------------------- gan

int cmd_train_gan(Ctx& ctx) {
    ConfigReader r(ctx.cfg);
    std::string manifest_path = r.require_file("data", "manifest");
    std::string partition = r.get<std::string>("data", "partition", "");
    GanConfig cfg;
    if (ctx.profile == "desk") cfg = desk_gan_config(r.get<int>("gan", "image_size", 32));
    cfg.image_size = r.get<int>("gan", "image_size", cfg.image_size);
    cfg.z_dim = r.get<int>("gan", "z_dim", cfg.z_dim);
    cfg.g_lr = r.get<double>("gan", "g_lr", cfg.g_lr);
    cfg.d_lr = r.get<double>("gan", "d_lr", cfg.d_lr);
    cfg.batch_size = r.get<int>("gan", "batch_size", cfg.batch_size);
    cfg.iterations = r.get<int>("gan", "iterations", cfg.iterations);
    cfg.checkpoint_every = r.get<int>("gan", "checkpoint_every", cfg.checkpoint_every);
    cfg.gen_channels = r.get<std::vector<int>>("gan", "gen_channels", cfg.gen_channels);
    cfg.disc_channels = r.get<std::vector<int>>("gan", "disc_channels", cfg.disc_channels);
    cfg.seed = ctx.seed;
    std::string resume = r.get<std::string>("gan", "resume_from", "");
    try {
        validate_gan_config(cfg);
    } catch (const ValidationError& e) {
        r.complain(e.what());
    }
    r.finish("train-gan");

    prepare_run_dir(ctx);
    ctx.resolved["data"] = {{"manifest", manifest_path}, {"partition", partition}};
    ctx.resolved["gan"] = {{"z_dim", cfg.z_dim},           {"g_lr", cfg.g_lr},
                           {"d_lr", cfg.d_lr},             {"image_size", cfg.image_size},
                           {"gen_channels", cfg.gen_channels},
                           {"disc_channels", cfg.disc_channels},
                           {"batch_size", cfg.batch_size}, {"iterations", cfg.iterations},
                           {"checkpoint_every", cfg.checkpoint_every}};

    ImageManifest data = load_data_manifest(ctx, manifest_path, partition);
    if (!resume.empty()) note_input(ctx, resume);
    std::string ckpt = (fs::path(ctx.run_dir) / "gan.ckpt").string();
    std::string log = (fs::path(ctx.run_dir) / "gan_log.jsonl").string();
    train_gan<float>(data, cfg, ckpt, log, resume);
    std::cout << "generator checkpoint: " << ckpt << "\n";
    write_run_manifest(ctx, "train-gan");
    return 0;
}

// -------------------------------------------------------------------- nbnet

NetworkSpec resolve_network_spec(Ctx& ctx, ConfigReader& r, int input_dim) {
    std::string arch = r.require<std::string>("nbnet", "arch");
    NetKind kind = NetKind::dcnn;
    if (!arch.empty()) {
        try {
            kind = net_kind_from(arch);
        } catch (const ValidationError&) {
            r.complain("nbnet.arch must be one of dcnn, nbnet_a, nbnet_b (got '" + arch + "')");
        }
    }
    NetworkSpec spec;
    if (ctx.profile == "desk") {
        int out_size = r.get<int>("nbnet", "out_size", 32);
        spec = desk_spec(kind, out_size, input_dim > 0 ? input_dim : 64);
    } else {
        spec = canonical_spec(kind);
        if (input_dim > 0 && input_dim != spec.input_dim)
            r.complain("canonical profile expects templates of dimension " +
                       std::to_string(spec.input_dim) + ", extractor emits " +
                       std::to_string(input_dim));
    }
    return spec;
}

int cmd_train_nbnet(Ctx& ctx, bool print_param_count) {
    ConfigReader r(ctx.cfg);

    if (print_param_count) {
        int input_dim = r.get<int>("nbnet", "input_dim", 0);
        NetworkSpec spec = resolve_network_spec(ctx, r, input_dim);
        r.finish("train-nbnet");
        ReconstructionModel<float> model(spec);
        ParameterBreakdown pb = model.count_parameter_breakdown();
        std::cout << "arch: " << r.get<std::string>("nbnet", "arch", "")
                  << "\nkernel weights: " << pb.kernel_weights
                  << "\nbatch-norm affine: " << pb.bn_affine
                  << "\ntotal trainable: " << pb.total_trainable << "\n";
        return 0;
    }

    std::string ex_path = r.require_file("extractor", "checkpoint");
    TrainConfig tcfg;
    if (ctx.profile == "desk") {
        tcfg.phase1_batches = 2000;
        tcfg.phase2_batches = 500;
        tcfg.checkpoint_every = 500;
    }
    tcfg.batch_size = r.get<int>("train", "batch_size", tcfg.batch_size);
    tcfg.lr0 = r.get<double>("train", "lr0", tcfg.lr0);
    tcfg.lr_decay = r.get<double>("train", "lr_decay", tcfg.lr_decay);
    tcfg.lr_decay_every = r.get<long long>("train", "lr_decay_every", tcfg.lr_decay_every);
    tcfg.phase1_batches = r.get<long long>("train", "phase1_batches", tcfg.phase1_batches);
    tcfg.phase2_batches = r.get<long long>("train", "phase2_batches", tcfg.phase2_batches);
    tcfg.checkpoint_every = r.get<long long>("train", "checkpoint_every", tcfg.checkpoint_every);
    tcfg.keep_checkpoints = r.get<int>("train", "keep_checkpoints", tcfg.keep_checkpoints);
    tcfg.seed = ctx.seed;
    double minkowski_k = r.get<double>("train", "minkowski_k", 1.0);
    std::string source = r.get<std::string>("train", "data_source", "generator");

    if (tcfg.phase1_batches + tcfg.phase2_batches == 0)
        r.complain("train.phase1_batches and train.phase2_batches are both 0; nothing to train");

    std::string gen_path;
    std::vector<std::string> manifests;
    if (source == "generator") {
        tcfg.data_source = "generator";
        gen_path = r.require_file("train", "generator_checkpoint");
    } else if (source == "raw") {
        tcfg.data_source = "raw_manifest";
        manifests.push_back(r.require_file("data", "manifest"));
    } else if (source == "mixed") {
        tcfg.data_source = "raw_manifest";
        manifests = r.require<std::vector<std::string>>("train", "manifests");
        if (manifests.size() < 2)
            r.complain("train.data_source=mixed needs at least 2 entries in train.manifests");
        for (auto& m : manifests)
            if (!fs::exists(m)) r.complain("train.manifests entry missing: " + m);
    } else {
        r.complain("train.data_source must be generator, raw, or mixed (got '" + source + "')");
    }
    try {
        validate_train_config(tcfg);
    } catch (const ValidationError& e) {
        r.complain(e.what());
    }
    r.finish("train-nbnet");

    ExtractorHandle<float> ex = ExtractorHandle<float>::load(ex_path);
    note_input(ctx, ex_path);
    NetworkSpec spec = resolve_network_spec(ctx, r, ex.info().output_dim);
    r.finish("train-nbnet");

    prepare_run_dir(ctx);
    ctx.resolved["extractor"] = {{"checkpoint", ex_path}};
    ctx.resolved["nbnet"] = spec_to_json(spec);
    ctx.resolved["train"] = {
        {"batch_size", tcfg.batch_size},         {"lr0", tcfg.lr0},
        {"lr_decay", tcfg.lr_decay},             {"lr_decay_every", tcfg.lr_decay_every},
        {"phase1_batches", tcfg.phase1_batches}, {"phase2_batches", tcfg.phase2_batches},
        {"checkpoint_every", tcfg.checkpoint_every},
        {"keep_checkpoints", tcfg.keep_checkpoints},
        {"data_source", source},                 {"minkowski_k", minkowski_k},
        {"generator_checkpoint", gen_path},      {"manifests", manifests}};

    std::optional<Generator<float>> gen;
    std::optional<TrainingStream<float>> stream;
    if (source == "generator") {
        gen.emplace(load_generator<float>(gen_path));
        stream.emplace(&*gen, ex, tcfg.batch_size, tcfg.seed);
    } else {
        ImageManifest all;
        for (auto& mp : manifests) {
            note_input(ctx, mp);
            ImageManifest m = load_manifest(mp);
            all.entries.insert(all.entries.end(), m.entries.begin(), m.entries.end());
        }
        stream.emplace(all, ex, tcfg.batch_size, tcfg.seed);
    }

    InitPolicy init;
    init.seed = ctx.seed;
    ReconstructionModel<float> model(spec, init);
    ParameterBreakdown pb = model.count_parameter_breakdown();
    std::cout << "training " << r.get<std::string>("nbnet", "arch", "?") << " with "
              << pb.kernel_weights << " kernel weights\n";

    std::unique_ptr<StandInFeatureMap<float>> fmap;
    if (tcfg.phase2_batches > 0)
        fmap = std::make_unique<StandInFeatureMap<float>>(
            StandInFeatureMap<float>::load(ex_path));
    TrainResult res =
        two_phase_train(model, *stream, tcfg, ctx.run_dir, fmap.get(), minkowski_k);

    std::string ckpt = (fs::path(ctx.run_dir) / "model.ckpt").string();
    model.save(ckpt);
    std::cout << "model checkpoint: " << ckpt << "\n";
    std::cout << "phase1 " << tcfg.phase1_batches << " + phase2 " << tcfg.phase2_batches
              << " batches, final loss " << res.final_loss << ", last-phase window "
              << res.first_window_mean << " -> " << res.last_window_mean << "\n";
    write_run_manifest(ctx, "train-nbnet");
    return 0;
}

// -------------------------------------------------------------- reconstruct

struct TemplateRow {
    std::string subject_id, sample_id;
    std::vector<float> vec;
};

std::vector<TemplateRow> read_template_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("template file not found: " + path);
    std::vector<TemplateRow> rows;
    std::string line;
    long lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            TemplateRow t;
            t.subject_id = j.at("subject_id").get<std::string>();
            t.sample_id = j.at("sample_id").get<std::string>();
            t.vec = j.at("vector").get<std::vector<float>>();
            rows.push_back(std::move(t));
        } catch (const json::exception& e) {
            throw ParseError(std::string("bad template row: ") + e.what(), lineno);
        }
    }
    if (rows.empty()) throw ValidationError("template file " + path + " has no rows");
    return rows;
}

int cmd_reconstruct(Ctx& ctx, const std::string& model_path, const std::string& extractor_path,
                    const std::string& manifest_path, const std::string& templates_path,
                    int count) {
    ConfigReader r(ctx.cfg);
    if (model_path.empty()) r.complain("reconstruct needs --model");
    if (manifest_path.empty() == templates_path.empty())
        r.complain("reconstruct needs exactly one of --manifest or --templates");
    if (!manifest_path.empty() && extractor_path.empty())
        r.complain("reconstruct from images needs --extractor for templates and scores");
    r.finish("reconstruct");

    ReconstructionModel<float> model = ReconstructionModel<float>::load(model_path);
    note_input(ctx, model_path);
    prepare_run_dir(ctx);
    ctx.resolved["reconstruct"] = {{"model", model_path},
                                   {"extractor", extractor_path},
                                   {"manifest", manifest_path},
                                   {"templates", templates_path},
                                   {"count", count}};
    fs::create_directories(fs::path(ctx.run_dir) / "panels");
    std::vector<json> score_rows;

    if (!manifest_path.empty()) {
        ExtractorHandle<float> ex = ExtractorHandle<float>::load(extractor_path);
        note_input(ctx, extractor_path);
        ImageManifest manifest = load_data_manifest(ctx, manifest_path, "");
        std::size_t n = manifest.size();
        if (count > 0) n = std::min(n, std::size_t(count));
        if (model.spec().input_dim != ex.info().output_dim)
            throw ValidationError("model expects dimension " +
                                  std::to_string(model.spec().input_dim) +
                                  " templates, extractor emits " +
                                  std::to_string(ex.info().output_dim));

        double cell = 96, pad = 10, row_h = cell + 26;
        SvgDoc doc(2 * (cell + pad) + 170, 30 + double(n) * row_h);
        doc.rect(0, 0, 2 * (cell + pad) + 170, 30 + double(n) * row_h, "#ffffff");
        doc.text(pad, 20, "original | reconstruction", 13);
        for (std::size_t i = 0; i < n; ++i) {
            const ManifestEntry& e = manifest.entries[i];
            FaceImage<float> face = load_face<float>(e, ex.info().input_size);
            Template<float> tpl = ex.extract(face);
            FaceImage<float> recon = reconstruct(model, tpl);
            Template<float> tpl2 = ex.extract(recon);
            double score = similarity(tpl, tpl2);

            std::string base = e.subject_id + "_" + e.sample_id;
            std::string panel =
                (fs::path(ctx.run_dir) / "panels" / (base + ".png")).string();
            write_png(panel, side_by_side(to_raw_image(face.pixels), to_raw_image(recon.pixels)));

            double y = 30 + double(i) * row_h;
            std::string orig_png = (fs::path(ctx.run_dir) / "panels" / (base + "_orig.png")).string();
            std::string recon_png = (fs::path(ctx.run_dir) / "panels" / (base + "_recon.png")).string();
            write_png(orig_png, to_raw_image(face.pixels));
            write_png(recon_png, to_raw_image(recon.pixels));
            doc.image_png(pad, y, cell, cell, orig_png);
            doc.image_png(pad + cell + pad, y, cell, cell, recon_png);
            doc.text(2 * (cell + pad) + 8, y + cell / 2,
                     base + "  similarity " + detail::fmt4(score), 11);

            json row;
            row["subject_id"] = e.subject_id;
            row["sample_id"] = e.sample_id;
            row["similarity"] = score;
            row["panel"] = "panels/" + base + ".png";
            score_rows.push_back(row);
        }
        doc.save((fs::path(ctx.run_dir) / "contact_sheet.svg").string());
        std::ofstream sf((fs::path(ctx.run_dir) / "scores.json").string());
        sf << json(score_rows).dump(2) << "\n";
        std::cout << "reconstructed " << n << " images with similarity scores into "
                  << ctx.run_dir << "\n";
    } else {
        std::vector<TemplateRow> rows = read_template_file(templates_path);
        note_input(ctx, templates_path);
        if (count > 0 && std::size_t(count) < rows.size()) rows.resize(count);
        double cell = 96, pad = 10, row_h = cell + 26;
        SvgDoc doc(cell + 2 * pad + 150, 30 + double(rows.size()) * row_h);
        doc.rect(0, 0, cell + 2 * pad + 150, 30 + double(rows.size()) * row_h, "#ffffff");
        doc.text(pad, 20, "reconstructions from templates", 13);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].vec.size() != std::size_t(model.spec().input_dim))
                throw ValidationError("template row " + std::to_string(i + 1) + " has dimension " +
                                      std::to_string(rows[i].vec.size()) + ", model expects " +
                                      std::to_string(model.spec().input_dim));
            Template<float> tpl;
            tpl.vector = rows[i].vec;
            tpl.subject_id = rows[i].subject_id;
            tpl.sample_id = rows[i].sample_id;
            FaceImage<float> recon = reconstruct(model, tpl);
            std::string base = rows[i].subject_id + "_" + rows[i].sample_id;
            std::string png = (fs::path(ctx.run_dir) / "panels" / (base + ".png")).string();
            write_png(png, to_raw_image(recon.pixels));
            double y = 30 + double(i) * row_h;
            doc.image_png(pad, y, cell, cell, png);
            doc.text(pad + cell + 8, y + cell / 2, base, 11);
        }
        doc.save((fs::path(ctx.run_dir) / "contact_sheet.svg").string());
        std::cout << "reconstructed " << rows.size() << " templates into " << ctx.run_dir
                  << " (no originals, no similarity annotations)\n";
    }
    write_run_manifest(ctx, "reconstruct");
    return 0;
}

// ------------------------------------------------------------------- attack

int cmd_attack(Ctx& ctx) {
    ConfigReader r(ctx.cfg);
    std::string manifest_path = r.require_file("data", "manifest");
    std::string ex_path = r.require_file("extractor", "checkpoint");
    std::string model_spec = r.get<std::string>("eval", "model", "identity");
    std::string model_name = r.get<std::string>("eval", "model_name",
                                                model_spec == "identity"
                                                    ? "identity"
                                                    : fs::path(model_spec).stem().string());
    std::string dataset_name =
        r.get<std::string>("eval", "dataset", fs::path(manifest_path).stem().string());
    std::vector<std::string> attacks =
        r.get<std::vector<std::string>>("eval", "attacks", {"type1", "type2"});
    std::vector<double> far = r.get<std::vector<double>>("eval", "far", {0.1, 0.01});
    int n_folds = r.get<int>("eval", "folds", 10);
    bool want_ident = r.has("eval", "identification");
    std::string gal_part, probe_part;
    if (want_ident) {
        json ident = r.get<json>("eval", "identification", json::object());
        gal_part = ident.value("gallery_partition", "");
        probe_part = ident.value("probe_partition", "");
    }
    for (auto& a : attacks)
        if (a != "type1" && a != "type2" && a != "original")
            r.complain("eval.attacks entries must be type1, type2, or original (got '" + a + "')");
    if (model_spec != "identity" && !fs::exists(model_spec))
        r.complain("eval.model is neither 'identity' nor an existing checkpoint: " + model_spec);
    if (far.empty()) r.complain("eval.far must list at least one target");
    r.finish("attack");

    ExtractorHandle<float> ex = ExtractorHandle<float>::load(ex_path);
    note_input(ctx, ex_path);
    std::optional<ReconstructionModel<float>> model;
    std::unique_ptr<Reconstructor<float>> recon;
    if (model_spec == "identity") {
        recon = std::make_unique<IdentityReconstructor<float>>();
    } else {
        model.emplace(ReconstructionModel<float>::load(model_spec));
        note_input(ctx, model_spec);
        if (model->spec().input_dim != ex.info().output_dim)
            throw ValidationError("model expects dimension " +
                                  std::to_string(model->spec().input_dim) +
                                  " templates, extractor emits " +
                                  std::to_string(ex.info().output_dim));
        if (model->output_size() != ex.info().input_size)
            throw ValidationError("model reconstructs " + std::to_string(model->output_size()) +
                                  "px images, extractor reads " +
                                  std::to_string(ex.info().input_size) + "px");
        recon = std::make_unique<ModelReconstructor<float>>(*model, model_name);
    }

    prepare_run_dir(ctx);
    ctx.resolved["data"] = {{"manifest", manifest_path}};
    ctx.resolved["extractor"] = {{"checkpoint", ex_path}};
    ctx.resolved["eval"] = {{"model", model_spec}, {"model_name", model_name},
                            {"dataset", dataset_name}, {"attacks", attacks},
                            {"far", far},           {"folds", n_folds}};
    if (want_ident)
        ctx.resolved["eval"]["identification"] = {{"gallery_partition", gal_part},
                                                  {"probe_partition", probe_part}};

    ImageManifest manifest = load_data_manifest(ctx, manifest_path, "");
    std::vector<EvalFold> folds = make_folds(manifest, n_folds, ctx.seed);
    fs::create_directories(fs::path(ctx.run_dir) / "scores");

    json meta;
    meta["model_name"] = model_name;
    meta["dataset"] = dataset_name;
    meta["far"] = far;
    meta["attacks"] = attacks;
    std::ofstream((fs::path(ctx.run_dir) / "scores" / "meta.json").string())
        << meta.dump(2) << "\n";

    std::vector<AttackReport> reports;
    for (auto& kind : attacks) {
        std::vector<VerificationResult> results;
        for (auto& fold : folds) {
            ScoreSet s;
            if (kind == "type1")
                s = build_type1_scores(manifest, *recon, ex, fold);
            else if (kind == "type2")
                s = build_type2_scores(manifest, make_genuine_pairs(manifest, fold), *recon, ex,
                                       fold);
            else
                s = build_original_scores(manifest, ex, fold);
            json sj;
            sj["fold_id"] = s.fold_id;
            sj["attack_kind"] = s.attack_kind;
            sj["genuine"] = s.genuine;
            sj["impostor"] = s.impostor;
            std::ofstream((fs::path(ctx.run_dir) / "scores" /
                           (kind + "_fold" + std::to_string(fold.id) + ".json"))
                              .string())
                << sj.dump() << "\n";
            try {
                results.push_back(tar_at_far(s, far));
            } catch (const InsufficientImpostorsError& e) {
                throw InsufficientImpostorsError("attack " + kind + ", fold " +
                                                 std::to_string(fold.id) + ": " + e.what());
            }
        }
        AttackReport rep;
        rep.model = model_name;
        rep.dataset = dataset_name;
        rep.attack = kind;
        rep.rows = aggregate_folds(results);
        rep.folds = std::move(results);
        std::cout << kind << ":";
        for (auto& row : rep.rows)
            std::cout << "  TAR@FAR" << detail::far_key(row.far) << " = "
                      << detail::fmt2(row.reported) << "%";
        std::cout << "\n";
        reports.push_back(std::move(rep));
    }
    render_report(reports, (fs::path(ctx.run_dir) / "report").string());

    if (want_ident) {
        ImageManifest gallery, probes;
        for (auto& e : manifest.entries) {
            if (gal_part.empty() || e.partition == gal_part) gallery.entries.push_back(e);
            if (probe_part.empty() || e.partition == probe_part) probes.entries.push_back(e);
        }
        if (gallery.entries.empty() || probes.entries.empty())
            throw ValidationError("identification partitions select no images (gallery '" +
                                  gal_part + "', probe '" + probe_part + "')");
        const int s = ex.info().input_size;
        Tensor<float> probe_images({probes.entries.size(), 3, std::size_t(s), std::size_t(s)});
        std::vector<std::string> probe_subjects;
        std::size_t per = 3 * std::size_t(s) * s;
        for (std::size_t i = 0; i < probes.entries.size(); ++i) {
            FaceImage<float> f = load_face<float>(probes.entries[i], s);
            std::copy_n(f.pixels.data(), per, probe_images.data() + i * per);
            probe_subjects.push_back(probes.entries[i].subject_id);
        }
        Tensor<float> probe_templates = ex.extract_batch(probe_images);
        Tensor<float> recon_images = recon->reconstruct(probe_templates, probe_images);
        IdentificationResult idr =
            rank1_identification(gallery, ex, recon_images, probe_subjects);
        json ij;
        ij["rank1_percent"] = idr.rank1_percent;
        ij["gallery_partition"] = gal_part;
        ij["probe_partition"] = probe_part;
        ij["gallery_size"] = gallery.entries.size();
        ij["probe_count"] = probes.entries.size();
        std::ofstream((fs::path(ctx.run_dir) / "identification.json").string())
            << ij.dump(2) << "\n";
        std::cout << "rank-1 identification: " << detail::fmt2(idr.rank1_percent) << "%\n";
    }

    std::cout << "report: " << (fs::path(ctx.run_dir) / "report").string() << "\n";
    write_run_manifest(ctx, "attack");
    return 0;
}

// --------------------------------------------------------------- norta demo

int cmd_norta_demo(Ctx& ctx) {
    ConfigReader r(ctx.cfg);
    std::vector<Marginal> marginals;
    std::vector<double> sigma_b;
    std::size_t k = 0;
    if (ctx.cfg.contains("norta")) {
        json n = ctx.cfg["norta"];
        try {
            for (auto& jm : n.at("marginals")) marginals.push_back(marginal_from_json(jm));
            k = marginals.size();
            auto rows = n.at("sigma_b").get<std::vector<std::vector<double>>>();
            if (rows.size() != k) r.complain("norta.sigma_b must be a " + std::to_string(k) +
                                             "x" + std::to_string(k) + " matrix");
            for (auto& row : rows) {
                if (row.size() != k) r.complain("norta.sigma_b rows must have length " +
                                                std::to_string(k));
                sigma_b.insert(sigma_b.end(), row.begin(), row.end());
            }
        } catch (const json::exception& e) {
            r.complain(std::string("norta section malformed: ") + e.what());
        } catch (const ValidationError& e) {
            r.complain(e.what());
        }
    } else {
        // showcase: three different marginal families, modest correlations
        marginals = {Marginal::normal(0, 1), Marginal::uniform(0, 1), Marginal::exponential(1)};
        k = 3;
        std::vector<double> corr = {1, 0.5, 0.3, 0.5, 1, 0.2, 0.3, 0.2, 1};
        sigma_b.resize(9);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j)
                sigma_b[i * 3 + j] = corr[i * 3 + j] * std::sqrt(marginals[i].variance() *
                                                                 marginals[j].variance());
    }
    std::size_t n_samples = std::size_t(r.get<long long>("norta", "samples", 100000));
    std::size_t gh_nodes = std::size_t(r.get<long long>("norta", "gh_nodes", 40));
    if (n_samples < 100) r.complain("norta.samples must be at least 100");
    r.finish("norta-demo");

    prepare_run_dir(ctx);
    json jm = json::array();
    for (auto& m : marginals) jm.push_back(marginal_to_json(m));
    ctx.resolved["norta"] = {{"marginals", jm}, {"samples", n_samples}, {"gh_nodes", gh_nodes}};

    NortaModel model = build_norta(marginals, sigma_b, gh_nodes);
    save_norta(model, (fs::path(ctx.run_dir) / "norta_model.bin").string());
    Tensor<double> z = uniform_inputs(n_samples, k, ctx.seed);
    Tensor<double> b = norta_sample(model, z);

    std::ofstream csv((fs::path(ctx.run_dir) / "samples.csv").string());
    for (std::size_t i = 0; i < k; ++i) csv << (i ? "," : "") << "b" << i;
    csv << "\n";
    for (std::size_t row = 0; row < n_samples; ++row) {
        for (std::size_t i = 0; i < k; ++i)
            csv << (i ? "," : "") << b.data()[row * k + i];
        csv << "\n";
    }

    // empirical moments against targets
    std::vector<double> mean(k, 0.0), cov(k * k, 0.0);
    for (std::size_t row = 0; row < n_samples; ++row)
        for (std::size_t i = 0; i < k; ++i) mean[i] += b.data()[row * k + i];
    for (auto& m : mean) m /= double(n_samples);
    for (std::size_t row = 0; row < n_samples; ++row)
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j)
                cov[i * k + j] += (b.data()[row * k + i] - mean[i]) *
                                  (b.data()[row * k + j] - mean[j]);
    for (auto& c : cov) c /= double(n_samples);

    json summary;
    summary["adjusted"] = model.adjusted;
    summary["target_covariance"] = json::array();
    summary["empirical_covariance"] = json::array();
    for (std::size_t i = 0; i < k; ++i) {
        json tr = json::array(), er = json::array();
        for (std::size_t j = 0; j < k; ++j) {
            tr.push_back(model.sigma_b[i * k + j]);
            er.push_back(cov[i * k + j]);
        }
        summary["target_covariance"].push_back(tr);
        summary["empirical_covariance"].push_back(er);
    }
    json ks = json::array();
    for (std::size_t i = 0; i < k; ++i) {
        std::vector<double> col(n_samples);
        for (std::size_t row = 0; row < n_samples; ++row) col[row] = b.data()[row * k + i];
        const Marginal& m = model.marginals[i];
        double stat = ks_statistic(col, [&](double x) { return m.cdf(x); });
        json e;
        e["marginal"] = m.describe();
        e["ks_statistic"] = stat;
        e["ks_critical_alpha_0.01"] = ks_critical(n_samples, 0.01);
        ks.push_back(e);
    }
    summary["ks"] = ks;
    std::ofstream((fs::path(ctx.run_dir) / "summary.json").string()) << summary.dump(2) << "\n";

    if (k >= 2) {
        // scatter of the first two coordinates
        double lo0 = b.data()[0], hi0 = lo0, lo1 = b.data()[1], hi1 = lo1;
        std::size_t shown = std::min<std::size_t>(n_samples, 2000);
        for (std::size_t row = 0; row < shown; ++row) {
            lo0 = std::min(lo0, b.data()[row * k]);
            hi0 = std::max(hi0, b.data()[row * k]);
            lo1 = std::min(lo1, b.data()[row * k + 1]);
            hi1 = std::max(hi1, b.data()[row * k + 1]);
        }
        SvgDoc doc(420, 420);
        doc.rect(0, 0, 420, 420, "#ffffff");
        doc.rect(30, 30, 360, 360, "#fafafa", "#888");
        for (std::size_t row = 0; row < shown; ++row) {
            double x = 30 + (b.data()[row * k] - lo0) / (hi0 - lo0) * 360;
            double y = 390 - (b.data()[row * k + 1] - lo1) / (hi1 - lo1) * 360;
            doc.rect(x - 1, y - 1, 2, 2, "#2980b9");
        }
        doc.text(210, 18, "first two coordinates, " + std::to_string(shown) + " samples", 12,
                 "middle");
        doc.save((fs::path(ctx.run_dir) / "scatter.svg").string());
    }

    std::cout << "norta model " << (model.adjusted ? "(correlation repaired)" : "(feasible)")
              << ", " << n_samples << " samples in " << ctx.run_dir << "\n";
    write_run_manifest(ctx, "norta-demo");
    return 0;
}

// ------------------------------------------------------------------- report

int cmd_report(Ctx& ctx, std::vector<std::string> run_dirs) {
    ConfigReader r(ctx.cfg);
    if (run_dirs.empty())
        run_dirs = r.get<std::vector<std::string>>("eval", "report_inputs", {});
    if (run_dirs.empty())
        r.complain("report needs --runs with at least one attack run directory");
    for (auto& d : run_dirs)
        if (!fs::exists(fs::path(d) / "scores" / "meta.json"))
            r.complain("no attack scores under " + d);
    r.finish("report");

    prepare_run_dir(ctx);
    ctx.resolved["report_inputs"] = run_dirs;

    std::vector<AttackReport> reports;
    for (auto& dir : run_dirs) {
        std::ifstream mf((fs::path(dir) / "scores" / "meta.json").string());
        json meta = json::parse(mf);
        note_input(ctx, (fs::path(dir) / "scores" / "meta.json").string());
        std::vector<double> far = meta.at("far").get<std::vector<double>>();
        for (auto& kind : meta.at("attacks").get<std::vector<std::string>>()) {
            std::vector<VerificationResult> results;
            std::vector<fs::path> files;
            for (auto& de : fs::directory_iterator(fs::path(dir) / "scores")) {
                std::string name = de.path().filename().string();
                if (name.rfind(kind + "_fold", 0) == 0) files.push_back(de.path());
            }
            std::sort(files.begin(), files.end());
            for (auto& p : files) {
                std::ifstream sf(p.string());
                json sj = json::parse(sf);
                note_input(ctx, p.string());
                ScoreSet s;
                s.fold_id = sj.at("fold_id").get<int>();
                s.attack_kind = sj.at("attack_kind").get<std::string>();
                s.genuine = sj.at("genuine").get<std::vector<double>>();
                s.impostor = sj.at("impostor").get<std::vector<double>>();
                results.push_back(tar_at_far(s, far));
            }
            if (results.empty()) continue;
            AttackReport rep;
            rep.model = meta.at("model_name").get<std::string>();
            rep.dataset = meta.at("dataset").get<std::string>();
            rep.attack = kind;
            rep.rows = aggregate_folds(results);
            rep.folds = std::move(results);
            reports.push_back(std::move(rep));
        }
    }
    if (reports.empty()) throw ValidationError("report: no usable score files found");
    render_report(reports, (fs::path(ctx.run_dir) / "report").string());
    std::cout << "combined report over " << reports.size() << " result sets: "
              << (fs::path(ctx.run_dir) / "report").string() << "\n";
    write_run_manifest(ctx, "report");
    return 0;
}

// ----------------------------------------------------------------- synth-data

int cmd_synth_data(Ctx& ctx, int subjects, int samples, int size) {
    prepare_run_dir(ctx);
    SynthSpec spec;
    spec.subjects = subjects;
    spec.samples_per_subject = samples;
    spec.size = size;
    spec.seed = ctx.seed;
    ctx.resolved["synth"] = {{"subjects", subjects}, {"samples_per_subject", samples},
                             {"size", size}};
    write_synth_dataset(ctx.run_dir, spec);
    std::cout << "synthetic dataset: " << subjects * samples << " images, manifest "
              << (fs::path(ctx.run_dir) / "manifest.jsonl").string() << "\n";
    write_run_manifest(ctx, "synth-data");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"template inversion toolkit: train the pieces, run the attacks"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, out_root_flag, run_id_flag, profile_flag;
    std::uint64_t seed_flag = 0;
    bool seed_set = false, overwrite = false;
    app.add_option("--config", config_path, "JSON config file");
    app.add_option("--out-root", out_root_flag, "output root (overrides NBNET_OUTPUT_ROOT)");
    app.add_option("--run-id", run_id_flag, "run directory name under the output root");
    app.add_option("--profile", profile_flag, "canonical or desk");
    app.add_option("--seed", seed_flag, "seed override")->each([&](std::string) { seed_set = true; });
    app.add_flag("--overwrite", overwrite, "replace an existing run directory");

    auto* c_ext = app.add_subcommand("train-extractor", "train the stand-in template extractor");
    auto* c_gan = app.add_subcommand("train-gan", "train the face image generator");
    auto* c_nb = app.add_subcommand("train-nbnet", "train a reconstruction network");
    bool print_params = false;
    c_nb->add_flag("--print-param-count", print_params,
                   "print the parameter breakdown for the configured architecture and exit");
    auto* c_rec = app.add_subcommand("reconstruct", "invert templates back to face images");
    std::string rec_model, rec_extractor, rec_manifest, rec_templates;
    int rec_count = 0;
    c_rec->add_option("--model", rec_model, "reconstruction model checkpoint");
    c_rec->add_option("--extractor", rec_extractor, "extractor checkpoint");
    c_rec->add_option("--manifest", rec_manifest, "image manifest to extract and invert");
    c_rec->add_option("--templates", rec_templates, "JSONL template file to invert directly");
    c_rec->add_option("--count", rec_count, "limit the number of inputs (0 = all)");
    auto* c_att = app.add_subcommand("attack", "run verification and identification attacks");
    auto* c_nor = app.add_subcommand("norta-demo", "correlated-sampling demonstration");
    auto* c_rep = app.add_subcommand("report", "merge attack score files into one report");
    std::vector<std::string> report_runs;
    c_rep->add_option("--runs", report_runs, "attack run directories to merge");
    auto* c_syn = app.add_subcommand("synth-data", "write a synthetic labelled face dataset");
    int syn_subjects = 40, syn_samples = 6, syn_size = 32;
    c_syn->add_option("--subjects", syn_subjects, "number of identities");
    c_syn->add_option("--samples", syn_samples, "images per identity");
    c_syn->add_option("--size", syn_size, "image side in pixels");

    for (auto* sc : {c_ext, c_gan, c_nb, c_rec, c_att, c_nor, c_rep, c_syn}) sc->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        Ctx ctx;
        if (!config_path.empty()) {
            ctx.cfg = load_config_file(config_path);
            ctx.config_path = config_path;
        }
        ctx.profile = ctx.cfg.value("profile", "canonical");
        if (!profile_flag.empty()) ctx.profile = profile_flag;
        if (ctx.profile != "canonical" && ctx.profile != "desk")
            throw ValidationError("profile must be canonical or desk, got '" + ctx.profile + "'");
        ctx.seed = ctx.cfg.value("seed", std::uint64_t(1));
        if (seed_set) ctx.seed = seed_flag;
        const char* env_root = std::getenv("NBNET_OUTPUT_ROOT");
        ctx.out_root = !out_root_flag.empty() ? out_root_flag
                       : env_root && *env_root ? std::string(env_root)
                                               : ctx.cfg.value("output_root", std::string("runs"));
        std::string sub = app.get_subcommands().front()->get_name();
        std::string default_id = sub;
        for (auto& ch : default_id)
            if (ch == '-') ch = '_';
        ctx.run_id = !run_id_flag.empty() ? run_id_flag
                                          : ctx.cfg.value("run_id", default_id);
        ctx.overwrite = overwrite;
        if (!config_path.empty()) note_input(ctx, config_path);

        if (c_ext->parsed()) return cmd_train_extractor(ctx);
        if (c_gan->parsed()) return cmd_train_gan(ctx);
        if (c_nb->parsed()) return cmd_train_nbnet(ctx, print_params);
        if (c_rec->parsed())
            return cmd_reconstruct(ctx, rec_model, rec_extractor, rec_manifest, rec_templates,
                                   rec_count);
        if (c_att->parsed()) return cmd_attack(ctx);
        if (c_nor->parsed()) return cmd_norta_demo(ctx);
        if (c_rep->parsed()) return cmd_report(ctx, report_runs);
        if (c_syn->parsed()) return cmd_synth_data(ctx, syn_subjects, syn_samples, syn_size);
        std::cerr << "error: no subcommand\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

#include "idleak/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <unordered_map>

#include "idleak/hashing.hpp"

namespace idleak::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json train_config_json(const embed::TrainConfig& c) {
    return {{"steps", c.steps},   {"batch_size", c.batch_size}, {"lr", c.lr},
            {"seed", c.seed},     {"cosine_lr", c.cosine_lr},   {"margin", c.margin},
            {"scale", c.scale},   {"width", c.width},           {"embed_dim", c.embed_dim}};
}

embed::TrainConfig train_config_from_json(const json& j) {
    embed::TrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.seed = j.value("seed", c.seed);
    c.cosine_lr = j.value("cosine_lr", c.cosine_lr);
    c.margin = j.value("margin", c.margin);
    c.scale = j.value("scale", c.scale);
    c.width = j.value("width", c.width);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    return c;
}

json distill_config_json(const embed::DistillConfig& c) {
    return {{"steps", c.steps}, {"batch_size", c.batch_size}, {"lr", c.lr},
            {"seed", c.seed},   {"cosine_lr", c.cosine_lr},   {"width", c.width}};
}

embed::DistillConfig distill_config_from_json(const json& j) {
    embed::DistillConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.seed = j.value("seed", c.seed);
    c.cosine_lr = j.value("cosine_lr", c.cosine_lr);
    c.width = j.value("width", c.width);
    return c;
}

json corpus_manifest_json(const corpus::CorpusManifest& m) {
    return {{"seed", m.seed}, {"ids", m.n_identities}, {"per_id", m.images_per_identity}};
}

corpus::CorpusManifest corpus_manifest_from_json(const json& j) {
    corpus::CorpusManifest m;
    m.seed = j.value("seed", 1ULL);
    m.n_identities = j.value("ids", 0);
    m.images_per_identity = j.value("per_id", 0);
    return m;
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    protect::ProtectorConfig partial;
    partial.method = protect::Method::PARTIAL;
    partial.seed = 5;
    protect::ProtectorConfig minus;
    minus.method = protect::Method::MINUS;
    minus.seed = 6;
    minus.sigma = 2.0;
    protect::ProtectorConfig highpass;
    highpass.method = protect::Method::HIGHPASS;
    highpass.seed = 7;
    highpass.sigma = 1.5;
    c.protectors = {partial, minus, highpass};

    c.teacher.steps = 700;
    c.teacher.batch_size = 64;
    c.teacher.lr = 2e-3;
    c.teacher.seed = 11;

    c.distill.steps = 900;
    c.distill.batch_size = 32;
    c.distill.lr = 1.5e-3;
    c.distill.seed = 12;

    c.zk_distill = c.distill;
    c.zk_distill.seed = 21;

    c.decoder.seed = 15;
    c.baseline.seed = 16;
    c.probe.seed = 18;
    return c;
}

json RunConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["output_root"] = output_root;
    j["corpus"] = corpus_manifest_json(corpus);
    j["calibration_corpus"] = corpus_manifest_json(calibration);
    json prot = json::array();
    for (const auto& p : protectors) prot.push_back(p.to_json());
    j["protect"] = prot;
    j["teacher"] = train_config_json(teacher);
    j["distill"] = distill_config_json(distill);
    j["zk"] = {{"distill", distill_config_json(zk_distill)},
               {"augmentation", zk_aug.to_json()},
               {"minus_sigma", zk_minus_sigma},
               {"floor", zk_floor},
               {"pairs_seed", zk_pairs_seed}};
    j["decoder"] = {{"steps", decoder.steps},     {"batch_size", decoder.batch_size},
                    {"lr", decoder.lr},           {"seed", decoder.seed},
                    {"cosine_lr", decoder.cosine_lr}, {"noise_dim", decoder.noise_dim},
                    {"width", decoder.width},     {"embed_weight", decoder.embed_weight},
                    {"pixel_weight", decoder.pixel_weight}};
    j["pixel_baseline"] = {{"steps", baseline.steps}, {"batch_size", baseline.batch_size},
                           {"lr", baseline.lr},       {"seed", baseline.seed},
                           {"cosine_lr", baseline.cosine_lr}, {"width", baseline.width}};
    j["calibrate"] = {{"levels", far_levels},
                      {"n_pairs", calibration_pairs},
                      {"seed", calibrate_seed},
                      {"far_check_pairs", far_check_pairs},
                      {"far_check_seed", far_check_seed}};
    j["regen"] = {{"attempts", regen_attempts}, {"seed", regen_seed}};
    j["probes"] = {{"steps", probe.steps},   {"batch_size", probe.batch_size},
                   {"lr", probe.lr},         {"seed", probe.seed},
                   {"cosine_lr", probe.cosine_lr}, {"hidden", probe.hidden},
                   {"control_seed", probe_control_seed}};
    j["disconnect"] = {{"n_pairs", disconnect_pairs}, {"seed", disconnect_seed}};
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c = defaults();
    c.seed = j.value("seed", c.seed);
    c.output_root = j.value("output_root", c.output_root);
    if (j.contains("corpus")) c.corpus = corpus_manifest_from_json(j["corpus"]);
    if (j.contains("calibration_corpus"))
        c.calibration = corpus_manifest_from_json(j["calibration_corpus"]);
    if (j.contains("protect")) {
        c.protectors.clear();
        for (const auto& p : j["protect"]) c.protectors.push_back(protect::ProtectorConfig::from_json(p));
    }
    if (j.contains("teacher")) c.teacher = train_config_from_json(j["teacher"]);
    if (j.contains("distill")) c.distill = distill_config_from_json(j["distill"]);
    if (j.contains("zk")) {
        const auto& z = j["zk"];
        if (z.contains("distill")) c.zk_distill = distill_config_from_json(z["distill"]);
        if (z.contains("augmentation")) {
            c.zk_aug.sigma_lo = z["augmentation"]["sigma"][0].get<double>();
            c.zk_aug.sigma_hi = z["augmentation"]["sigma"][1].get<double>();
            c.zk_aug.strength_lo = z["augmentation"]["strength"][0].get<double>();
            c.zk_aug.strength_hi = z["augmentation"]["strength"][1].get<double>();
        }
        c.zk_minus_sigma = z.value("minus_sigma", c.zk_minus_sigma);
        c.zk_floor = z.value("floor", c.zk_floor);
        c.zk_pairs_seed = z.value("pairs_seed", c.zk_pairs_seed);
    }
    if (j.contains("decoder")) {
        const auto& d = j["decoder"];
        c.decoder.steps = d.value("steps", c.decoder.steps);
        c.decoder.batch_size = d.value("batch_size", c.decoder.batch_size);
        c.decoder.lr = d.value("lr", c.decoder.lr);
        c.decoder.seed = d.value("seed", c.decoder.seed);
        c.decoder.cosine_lr = d.value("cosine_lr", c.decoder.cosine_lr);
        c.decoder.noise_dim = d.value("noise_dim", c.decoder.noise_dim);
        c.decoder.width = d.value("width", c.decoder.width);
        c.decoder.embed_weight = d.value("embed_weight", c.decoder.embed_weight);
        c.decoder.pixel_weight = d.value("pixel_weight", c.decoder.pixel_weight);
    }
    if (j.contains("pixel_baseline")) {
        const auto& d = j["pixel_baseline"];
        c.baseline.steps = d.value("steps", c.baseline.steps);
        c.baseline.batch_size = d.value("batch_size", c.baseline.batch_size);
        c.baseline.lr = d.value("lr", c.baseline.lr);
        c.baseline.seed = d.value("seed", c.baseline.seed);
        c.baseline.cosine_lr = d.value("cosine_lr", c.baseline.cosine_lr);
        c.baseline.width = d.value("width", c.baseline.width);
    }
    if (j.contains("calibrate")) {
        const auto& d = j["calibrate"];
        if (d.contains("levels")) c.far_levels = d["levels"].get<std::vector<double>>();
        c.calibration_pairs = d.value("n_pairs", c.calibration_pairs);
        c.calibrate_seed = d.value("seed", c.calibrate_seed);
        c.far_check_pairs = d.value("far_check_pairs", c.far_check_pairs);
        c.far_check_seed = d.value("far_check_seed", c.far_check_seed);
    }
    if (j.contains("regen")) {
        c.regen_attempts = j["regen"].value("attempts", c.regen_attempts);
        c.regen_seed = j["regen"].value("seed", c.regen_seed);
    }
    if (j.contains("probes")) {
        const auto& d = j["probes"];
        c.probe.steps = d.value("steps", c.probe.steps);
        c.probe.batch_size = d.value("batch_size", c.probe.batch_size);
        c.probe.lr = d.value("lr", c.probe.lr);
        c.probe.seed = d.value("seed", c.probe.seed);
        c.probe.cosine_lr = d.value("cosine_lr", c.probe.cosine_lr);
        c.probe.hidden = d.value("hidden", c.probe.hidden);
        c.probe_control_seed = d.value("control_seed", c.probe_control_seed);
    }
    if (j.contains("disconnect")) {
        c.disconnect_pairs = j["disconnect"].value("n_pairs", c.disconnect_pairs);
        c.disconnect_seed = j["disconnect"].value("seed", c.disconnect_seed);
    }
    return c;
}

std::string RunConfig::hash() const { return json_hash(to_json()); }

json RunManifest::to_json() const {
    json stages_json = json::array();
    for (const auto& s : stages) {
        stages_json.push_back({{"name", s.name},
                               {"stage_key", s.stage_key},
                               {"artifacts", s.artifacts},
                               {"wall_seconds", s.wall_seconds},
                               {"cached", s.cached}});
    }
    return {{"config_hash", config_hash}, {"tool_version", tool_version}, {"stages", stages_json}};
}

std::vector<std::string> all_stages() {
    return {"corpus",        "calibration-corpus", "teacher",        "protect-partial",
            "protect-minus", "protect-highpass",   "student-partial", "student-minus",
            "student-highpass", "proxy",           "decoder",        "baseline-partial",
            "baseline-minus", "baseline-highpass", "calibrate",      "evaluate",
            "report"};
}

std::filesystem::path cache_root_override() {
    if (const char* env = std::getenv("IDLEAK_CACHE_DIR"); env && *env) return fs::path(env);
    return {};
}

namespace {

// Executes stages with content-addressed skip logic and lazy artifact loading.
class Runner {
public:
    Runner(const RunConfig& cfg, const RunOptions& opts) : cfg_(cfg), opts_(opts) {
        root_ = cfg.output_root;
        if (const auto cache = cache_root_override(); !cache.empty())
            root_ = cache / fs::path(cfg.output_root).filename();
        fs::create_directories(root_);
        manifest_.config_hash = cfg.hash();
        std::ofstream cf(root_ / "run_config.json");
        cf << cfg.to_json().dump(2) << "\n";
    }

    RunManifest run(const std::vector<std::string>& stages) {
        std::set<std::string> wanted(stages.begin(), stages.end());
        const bool run_all = wanted.empty();
        for (const auto& name : all_stages()) {
            if (!run_all && !wanted.count(name)) continue;
            execute(name);
        }
        return manifest_;
    }

private:
    RunConfig cfg_;
    RunOptions opts_;
    fs::path root_;
    RunManifest manifest_;
    std::map<std::string, std::string> digests_;  // stage -> artifact digest

    // In-memory handles (lazy; reloaded from disk after cache hits).
    std::optional<corpus::Dataset> ds_, calib_;
    std::optional<embed::EmbedderModel> teacher_, proxy_;
    std::map<std::string, embed::EmbedderModel> students_;
    std::map<std::string, protect::TemplateSet> templates_;
    std::map<std::string, regen::PixelBaselineModel> baselines_;
    std::optional<regen::DecoderModel> decoder_;
    std::optional<regen::CalibratedThresholds> thresholds_;

    const protect::ProtectorConfig& protector(const std::string& method) const {
        for (const auto& p : cfg_.protectors)
            if (protect::method_name(p.method) == method) return p;
        throw ConfigError("pipeline: no protector configured for method " + method);
    }

    corpus::Dataset& dataset() {
        if (!ds_) ds_ = corpus::load_corpus(root_ / "corpus");
        return *ds_;
    }
    corpus::Dataset& calibration_dataset() {
        if (!calib_) calib_ = corpus::load_corpus(root_ / "calibration-corpus");
        return *calib_;
    }
    embed::EmbedderModel& teacher() {
        if (!teacher_) teacher_ = embed::load_embedder(root_ / "teacher");
        return *teacher_;
    }
    embed::EmbedderModel& student(const std::string& method) {
        if (!students_.count(method))
            students_[method] = embed::load_embedder(root_ / ("student-" + method));
        return students_[method];
    }
    embed::EmbedderModel& proxy() {
        if (!proxy_) proxy_ = embed::load_embedder(root_ / "proxy");
        return *proxy_;
    }
    protect::TemplateSet& templates(const std::string& method) {
        if (!templates_.count(method))
            templates_[method] = protect::read_templates(root_ / ("protect-" + method));
        return templates_[method];
    }
    regen::DecoderModel& decoder() {
        if (!decoder_) decoder_ = regen::load_decoder(root_ / "decoder");
        return *decoder_;
    }
    regen::PixelBaselineModel& baseline(const std::string& method) {
        if (!baselines_.count(method)) {
            auto loaded = nn::load_model(root_ / ("baseline-" + method) / "model.flgm");
            regen::PixelBaselineModel m;
            m.net = std::move(loaded.net);
            m.in_c = loaded.extra.at("in_c").get<int>();
            m.in_h = loaded.extra.at("in_h").get<int>();
            m.in_w = loaded.extra.at("in_w").get<int>();
            std::ifstream mf(root_ / ("baseline-" + method) / "manifest.json");
            if (mf) m.manifest = json::parse(mf);
            baselines_[method] = std::move(m);
        }
        return baselines_[method];
    }
    regen::CalibratedThresholds& thresholds() {
        if (!thresholds_) {
            std::ifstream f(root_ / "calibrate" / "thresholds.json");
            if (!f) throw IoError("thresholds.json missing; run the calibrate stage first");
            thresholds_ = regen::CalibratedThresholds::from_json(json::parse(f));
        }
        return *thresholds_;
    }

    static std::string method_of(const std::string& stage) {
        const auto pos = stage.find('-');
        return stage.substr(pos + 1);
    }

    json stage_config(const std::string& name) {
        if (name == "corpus") return corpus_manifest_json(cfg_.corpus);
        if (name == "calibration-corpus") return corpus_manifest_json(cfg_.calibration);
        if (name == "teacher") return train_config_json(cfg_.teacher);
        if (name.starts_with("protect-")) return protector(method_of(name)).to_json();
        if (name.starts_with("student-")) {
            json j = distill_config_json(cfg_.distill);
            j["oracle"] = protector(method_of(name)).to_json();
            return j;
        }
        if (name == "proxy")
            return {{"distill", distill_config_json(cfg_.zk_distill)}, {"augmentation", cfg_.zk_aug.to_json()}};
        if (name == "decoder") return cfg_.to_json()["decoder"];
        if (name.starts_with("baseline-")) {
            json j = cfg_.to_json()["pixel_baseline"];
            j["oracle"] = protector(method_of(name)).to_json();
            return j;
        }
        if (name == "calibrate") return cfg_.to_json()["calibrate"];
        if (name == "evaluate") return cfg_.to_json();  // depends on everything
        if (name == "report") return json{{"formats", {"json", "csv", "markdown"}}};
        throw ConfigError("unknown stage: " + name);
    }

    std::vector<std::string> stage_deps(const std::string& name) {
        if (name == "corpus" || name == "calibration-corpus") return {};
        if (name == "teacher") return {"corpus"};
        if (name.starts_with("protect-")) return {"corpus"};
        if (name.starts_with("student-")) return {"corpus", "teacher"};
        if (name == "proxy") return {"corpus", "teacher"};
        if (name == "decoder") return {"corpus", "teacher"};
        if (name.starts_with("baseline-")) return {"corpus"};
        if (name == "calibrate") return {"calibration-corpus", "teacher"};
        if (name == "evaluate") {
            std::vector<std::string> deps = {"corpus", "calibration-corpus", "teacher",
                                             "proxy",  "decoder",            "calibrate"};
            for (const auto& p : cfg_.protectors) {
                const auto m = protect::method_name(p.method);
                deps.push_back("protect-" + m);
                deps.push_back("student-" + m);
                deps.push_back("baseline-" + m);
            }
            return deps;
        }
        if (name == "report") return {"evaluate"};
        throw ConfigError("unknown stage: " + name);
    }

    void execute(const std::string& name) {
        json key_input;
        key_input["stage"] = name;
        key_input["config"] = stage_config(name);
        json inputs;
        for (const auto& dep : stage_deps(name)) {
            if (!digests_.count(dep))
                throw Error("pipeline: stage '" + name + "' requires '" + dep +
                            "' which has not run in this invocation");
            inputs[dep] = digests_[dep];
        }
        key_input["inputs"] = inputs;
        const std::string key = json_hash(key_input);

        const fs::path dir = root_ / name;
        const fs::path record_path = dir / "stage.json";

        if (opts_.use_cache && fs::exists(record_path)) {
            std::ifstream rf(record_path);
            const json record = json::parse(rf);
            if (record.value("stage_key", "") == key) {
                // Verify artifact integrity before reuse.
                for (const auto& [rel, hash] : record.at("artifacts").items()) {
                    const fs::path p = dir / rel;
                    if (!fs::exists(p) || sha256_file(p) != hash.get<std::string>())
                        throw HashMismatchError("cached artifact mismatch: " + p.string());
                }
                StageRecord rec;
                rec.name = name;
                rec.stage_key = key;
                for (const auto& [rel, hash] : record.at("artifacts").items())
                    rec.artifacts[rel] = hash.get<std::string>();
                rec.wall_seconds = record.value("wall_seconds", 0.0);
                rec.cached = true;
                finish(rec);
                return;
            }
        }

        if (fs::exists(dir)) fs::remove_all(dir);
        fs::create_directories(dir);
        const auto t0 = std::chrono::steady_clock::now();
        run_stage_body(name, dir);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        StageRecord rec;
        rec.name = name;
        rec.stage_key = key;
        rec.wall_seconds = wall;
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(dir))
            if (e.is_regular_file() && e.path().filename() != "stage.json") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files)
            rec.artifacts[fs::relative(f, dir).generic_string()] = sha256_file(f);

        json record = {{"name", name},
                       {"stage_key", key},
                       {"artifacts", rec.artifacts},
                       {"wall_seconds", wall}};
        std::ofstream rf(record_path);
        rf << record.dump(2) << "\n";
        finish(rec);
    }

    void finish(StageRecord rec) {
        std::string concat;
        for (const auto& [rel, hash] : rec.artifacts) concat += rel + ":" + hash + "\n";
        digests_[rec.name] = sha256_hex(concat);
        manifest_.stages.push_back(std::move(rec));
        std::ofstream mf(root_ / "run_manifest.json");
        mf << manifest_.to_json().dump(2) << "\n";
    }

    void run_stage_body(const std::string& name, const fs::path& dir) {
        if (name == "corpus") {
            ds_ = corpus::generate_corpus_to(cfg_.corpus, dir, true);
        } else if (name == "calibration-corpus") {
            calib_ = corpus::generate_corpus_to(cfg_.calibration, dir, true);
        } else if (name == "teacher") {
            teacher_ = embed::train_teacher(dataset(), cfg_.teacher);
            embed::save_embedder(*teacher_, dir);
        } else if (name.starts_with("protect-")) {
            const auto& pcfg = protector(method_of(name));
            auto& ds = dataset();
            std::vector<protect::ProtectedTemplate> tpls;
            for (auto idx : ds.val_indices()) {
                auto tpl = protect::apply(ds.items[idx].pixels, pcfg);
                tpl.source_id = ds.items[idx].sample_id;
                tpls.push_back(std::move(tpl));
            }
            protect::write_templates(dir, pcfg, tpls, true);
            templates_[method_of(name)] = protect::TemplateSet{pcfg, std::move(tpls)};
        } else if (name.starts_with("student-")) {
            const auto method = method_of(name);
            auto model = embed::distill_student(teacher(), protector(method), dataset(), cfg_.distill);
            embed::save_embedder(model, dir);
            students_[method] = std::move(model);
        } else if (name == "proxy") {
            proxy_ = zk::zk_train(teacher(), dataset(), cfg_.zk_aug, cfg_.zk_distill);
            embed::save_embedder(*proxy_, dir);
        } else if (name == "decoder") {
            decoder_ = regen::train_decoder(teacher(), dataset(), cfg_.decoder);
            regen::save_decoder(*decoder_, dir);
        } else if (name.starts_with("baseline-")) {
            const auto method = method_of(name);
            auto model = regen::train_pixel_baseline(protector(method), dataset(), cfg_.baseline);
            nn::save_model(dir / "model.flgm", model.net,
                           {{"in_c", model.in_c}, {"in_h", model.in_h}, {"in_w", model.in_w}});
            std::ofstream mf(dir / "manifest.json");
            mf << model.manifest.dump(2) << "\n";
            baselines_[method] = std::move(model);
        } else if (name == "calibrate") {
            thresholds_ = regen::calibrate_thresholds(teacher(), calibration_dataset(),
                                                      cfg_.far_levels, cfg_.calibration_pairs,
                                                      cfg_.calibrate_seed);
            std::ofstream tf(dir / "thresholds.json");
            tf << thresholds_->to_json().dump(2) << "\n";
        } else if (name == "evaluate") {
            const json results = evaluate();
            std::ofstream rf(dir / "results.json");
            rf << results.dump(2) << "\n";
        } else if (name == "report") {
            std::ifstream rf(root_ / "evaluate" / "results.json");
            if (!rf) throw IoError("evaluate/results.json missing");
            const json results = json::parse(rf);
            emit_report(results, dir, "json");
            emit_report(results, dir, "csv");
            emit_report(results, dir, "markdown");
        } else {
            throw ConfigError("unknown stage: " + name);
        }
    }

    json evaluate();
};

}  // namespace

// --- evaluation ------------------------------------------------------------

namespace {

struct MethodEmbeddings {
    embed::EmbeddingSet val_students;  // student embeddings of validation templates
};

}  // namespace

json Runner::evaluate() {
    auto& ds = dataset();
    auto& tch = teacher();
    const auto val_idx = ds.val_indices();
    const auto train_idx = ds.train_indices();

    json results;
    results["config_hash"] = cfg_.hash();

    // Teacher quality (from its manifest).
    results["teacher"] = {{"val_auroc", tch.manifest["val"]["auroc"]},
                          {"final_train_accuracy", tch.manifest["final_train_accuracy"]},
                          {"wall_seconds", tch.manifest["wall_seconds"]},
                          {"loss_first", tch.manifest["loss_curve"].front()},
                          {"loss_final", tch.manifest["loss_curve"].back()}};

    const auto teacher_val = embed::embed_images(tch, ds, val_idx, "teacher-original");

    // Per-method student embeddings over validation templates.
    std::vector<std::string> methods;
    std::map<std::string, embed::EmbeddingSet> student_sets;
    for (const auto& p : cfg_.protectors) {
        const auto method = protect::method_name(p.method);
        methods.push_back(method);
        auto& tset = templates(method);
        std::vector<std::string> ids;
        std::vector<int> labels;
        for (const auto& t : tset.items) {
            ids.push_back(*t.source_id);
            labels.push_back(ds.by_sample_id(*t.source_id).identity);
        }
        student_sets[method] =
            embed::embed_templates(student(method), tset.items, ids, labels, "student-" + method);
        results["students"][method] = {
            {"val_mean_cosine", student(method).manifest["val_mean_cosine"]},
            {"loss_first", student(method).manifest["loss_curve"].front()},
            {"loss_final", student(method).manifest["loss_curve"].back()}};
    }

    // Linkage grid: student domains + teacher-original on both axes.
    {
        std::vector<embed::EmbeddingSet> domains;
        for (const auto& m : methods) domains.push_back(student_sets[m]);
        domains.push_back(teacher_val);
        const auto grid = linkage::linkage_matrix(domains, domains);
        results["linkage_grid"] = grid.to_json();
    }

    // 1:1 verification per method (template-to-face) plus face-to-face ceiling.
    {
        auto pair_scores = [&](const embed::EmbeddingSet& a, const embed::EmbeddingSet& b,
                               std::vector<double>& genuine, std::vector<double>& impostor) {
            for (Eigen::Index i = 0; i < a.vecs.rows(); ++i)
                for (Eigen::Index j = 0; j < b.vecs.rows(); ++j) {
                    if (a.sample_ids[static_cast<std::size_t>(i)] ==
                        b.sample_ids[static_cast<std::size_t>(j)])
                        continue;
                    const double s = std::clamp(a.vecs.row(i).dot(b.vecs.row(j)), -1.0, 1.0);
                    (a.identities[static_cast<std::size_t>(i)] ==
                             b.identities[static_cast<std::size_t>(j)]
                         ? genuine
                         : impostor)
                        .push_back(s);
                }
        };
        for (const auto& m : methods) {
            std::vector<double> genuine, impostor;
            pair_scores(student_sets[m], teacher_val, genuine, impostor);
            results["verification"][m] = linkage::verification_eval(genuine, impostor).to_json();
        }
        std::vector<double> genuine, impostor;
        pair_scores(teacher_val, teacher_val, genuine, impostor);
        results["verification"]["face_to_face"] =
            linkage::verification_eval(genuine, impostor).to_json();
    }

    // Similarity distributions per method.
    for (const auto& m : methods)
        results["similarity"][m] =
            linkage::similarity_distributions(tch, student(m), ds, protector(m)).to_json();

    // Regeneration: FaceLinkGen (student embedding -> decoder) vs the
    // pixel-loss baseline, per method, with the FAR-calibrated local verifier.
    {
        auto& th = thresholds();
        auto& dec = decoder();
        // Designated item: first validation image of each identity.
        std::map<int, std::size_t> designated;
        for (auto idx : val_idx)
            if (!designated.count(ds.items[idx].identity)) designated[ds.items[idx].identity] = idx;

        for (const auto& m : methods) {
            auto& tset = templates(m);
            std::unordered_map<std::string, const protect::ProtectedTemplate*> by_id;
            for (const auto& t : tset.items) by_id[*t.source_id] = &t;

            std::map<std::string, std::vector<double>> attempts, base_attempts;
            double psnr_sum = 0.0, base_psnr_sum = 0.0;
            for (const auto& [ident, idx] : designated) {
                const auto& item = ds.items[idx];
                const auto* tpl = by_id.at(item.sample_id);
                const auto emb = embed::embed_student(student(m), *tpl);
                const auto images = regen::regenerate(
                    dec, emb.vec, cfg_.regen_attempts,
                    rng::derive(cfg_.regen_seed, m, static_cast<std::uint64_t>(ident)));
                std::vector<double> levels;
                for (const auto& img : images)
                    levels.push_back(regen::verify_local(tch, item.pixels, img, th).strictest_far);
                attempts["id" + std::to_string(ident)] = levels;
                psnr_sum += probes::pixel_metrics(images.front(), item.pixels).psnr;

                const Image recon = regen::pixel_baseline_reconstruct(baseline(m), *tpl);
                const double level = regen::verify_local(tch, item.pixels, recon, th).strictest_far;
                base_attempts["id" + std::to_string(ident)] =
                    std::vector<double>(static_cast<std::size_t>(cfg_.regen_attempts), level);
                base_psnr_sum += probes::pixel_metrics(recon, item.pixels).psnr;
            }
            auto rep = regen::success_metrics(attempts, th);
            rep.header["generator"] = "facelinkgen";
            auto base_rep = regen::success_metrics(base_attempts, th);
            base_rep.header["generator"] = "pixel-baseline (deterministic, single reconstruction)";
            const double n_ident = static_cast<double>(designated.size());
            results["regen"][m] = rep.to_json();
            results["regen"][m]["mean_psnr_to_source"] = psnr_sum / n_ident;
            results["baseline_regen"][m] = base_rep.to_json();
            results["baseline_regen"][m]["mean_psnr_to_source"] = base_psnr_sum / n_ident;
        }

        // Empirical FAR check on a fresh impostor sample.
        const auto fresh = regen::impostor_scores(tch, calibration_dataset(), cfg_.far_check_pairs,
                                                  cfg_.far_check_seed);
        json far_check;
        for (const auto& [far, thr] : th.thresholds) {
            long above = 0;
            for (double s : fresh)
                if (s >= thr) above++;
            far_check[std::to_string(far)] = static_cast<double>(above) / fresh.size();
        }
        results["calibration"] = {{"thresholds", th.to_json()},
                                  {"empirical_far", far_check},
                                  {"fresh_pairs", static_cast<long>(fresh.size())}};
    }

    // Soft-biometric probes per method, plus the random-embedding control.
    {
        auto probe_data = [&](const embed::EmbeddingSet& set) {
            probes::ProbeData data;
            data.embeddings = set.vecs;
            data.identities = set.identities;
            for (const auto& sid : set.sample_ids) {
                const auto& item = ds.by_sample_id(sid);
                if (!item.attributes) throw Error("probe evaluation: sample without attributes");
                data.attributes.push_back(*item.attributes);
            }
            return data;
        };
        for (const auto& m : methods) {
            // Train-split templates are generated on the fly (only validation
            // templates are stored on disk).
            const auto& pcfg = protector(m);
            std::vector<protect::ProtectedTemplate> tr_tpls;
            std::vector<std::string> tr_ids;
            std::vector<int> tr_labels;
            for (auto idx : train_idx) {
                tr_tpls.push_back(protect::apply(ds.items[idx].pixels, pcfg));
                tr_ids.push_back(ds.items[idx].sample_id);
                tr_labels.push_back(ds.items[idx].identity);
            }
            const auto tr_set =
                embed::embed_templates(student(m), tr_tpls, tr_ids, tr_labels, "student-" + m);
            const auto model = probes::train_probe(probe_data(tr_set), cfg_.probe);
            results["probes"][m] = probes::probe_eval(model, probe_data(student_sets[m])).to_json();
        }
        // Control: i.i.d. random unit embeddings with the same labels.
        auto random_set = [&](const std::vector<std::size_t>& indices, std::uint64_t salt) {
            embed::EmbeddingSet set;
            set.domain = "random-control";
            set.vecs.resize(static_cast<Eigen::Index>(indices.size()), tch.embed_dim);
            auto eng = rng::engine(rng::derive(cfg_.probe_control_seed, "control", salt));
            rng::Gaussian gauss;
            for (std::size_t i = 0; i < indices.size(); ++i) {
                for (int c = 0; c < tch.embed_dim; ++c)
                    set.vecs(static_cast<Eigen::Index>(i), c) = gauss(eng);
                double* row = set.vecs.data() + i * static_cast<std::size_t>(tch.embed_dim);
                nn::l2_normalize(row, tch.embed_dim);
                set.sample_ids.push_back(ds.items[indices[i]].sample_id);
                set.identities.push_back(ds.items[indices[i]].identity);
            }
            return set;
        };
        const auto control_model = probes::train_probe(probe_data(random_set(train_idx, 0)), cfg_.probe);
        results["probes"]["control"] =
            probes::probe_eval(control_model, probe_data(random_set(val_idx, 1))).to_json();
    }

    // Zero-knowledge attack: validate on exactly 30 pairs per method, then
    // evaluate the single proxy against every protector.
    {
        auto& th = thresholds();
        std::vector<std::pair<protect::ProtectorConfig, std::vector<protect::ProtectedTemplate>>> sets;
        for (const auto& m : methods) sets.push_back({protector(m), templates(m).items});

        zk::ZkPreprocessConfig pre{cfg_.zk_minus_sigma};
        for (const auto& m : methods) {
            // Seeded choice of 30 validation pairs.
            std::vector<std::size_t> pool(val_idx);
            auto eng = rng::engine(rng::derive(cfg_.zk_pairs_seed, m));
            for (std::size_t i = pool.size(); i > 1; --i)
                std::swap(pool[i - 1], pool[static_cast<std::size_t>(rng::below(eng, i))]);
            std::vector<std::pair<Image, protect::ProtectedTemplate>> pairs;
            for (int i = 0; i < zk::ZkValidationSet::kPairCount; ++i) {
                const auto& item = ds.items[pool[static_cast<std::size_t>(i)]];
                auto tpl = protect::apply(item.pixels, protector(m));
                tpl.source_id = item.sample_id;
                pairs.emplace_back(item.pixels, std::move(tpl));
            }
            zk::ZkValidationSet vset(std::move(pairs), "30 leaked validation pairs, method " + m);
            results["zk"]["validate"][m] =
                zk::zk_validate(proxy(), vset, tch, protector(m), pre, cfg_.zk_floor).to_json();
        }
        results["zk"]["attack"] = zk::zk_attack_eval(proxy(), sets, tch, ds, decoder(), th, pre,
                                                     cfg_.regen_attempts, cfg_.regen_seed)
                                      .to_json();
        results["zk"]["proxy_manifest_oracle_free"] = proxy().manifest.value("oracle_free", false);
    }

    // Pixel-vs-identity metric disconnect.
    {
        const auto pairs = probes::build_disconnect_pairs(cfg_.disconnect_seed, cfg_.disconnect_pairs);
        results["disconnect"] =
            probes::metric_disconnect(tch, pairs.same_identity, pairs.cross_identity).to_json();
    }

    return results;
}

RunManifest run_pipeline(const RunConfig& config, const RunOptions& options) {
    Runner runner(config, options);
    return runner.run(options.stages);
}

json load_results(const fs::path& output_root) {
    std::ifstream f(output_root / "evaluate" / "results.json");
    if (!f) throw IoError("results.json not found under " + output_root.string());
    return json::parse(f);
}

// --- report emission ---------------------------------------------------------

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

void render_markdown(const json& results, std::ostream& os) {
    os << "# idleak evaluation report\n\n";
    if (results.is_null() || results.empty()) {
        os << "(no results)\n";
        return;
    }

    if (results.contains("linkage_grid")) {
        const auto& grid = results["linkage_grid"];
        os << "## Linkage (closed-set top-1 recall)\n\n";
        os << "| Query \\ Key |";
        for (const auto& k : grid["key_domains"]) os << " " << k.get<std::string>() << " |";
        os << "\n|---|";
        for (std::size_t i = 0; i < grid["key_domains"].size(); ++i) os << "---|";
        os << "\n";
        for (std::size_t q = 0; q < grid["query_domains"].size(); ++q) {
            os << "| " << grid["query_domains"][q].get<std::string>() << " |";
            for (std::size_t k = 0; k < grid["key_domains"].size(); ++k)
                os << " " << fmt(grid["cells"][q][k]["recall"].get<double>()) << " |";
            os << "\n";
        }
        os << "\n";
    }

    if (results.contains("regen")) {
        os << "## Regeneration (local FAR-calibrated verifier)\n\n";
        os << "| Method | Success@5 | Pass@1e-5 | Pass@1e-4 | Pass@1e-3 | Baseline Success@5 |\n";
        os << "|---|---|---|---|---|---|\n";
        for (const auto& [m, rep] : results["regen"].items()) {
            os << "| " << m << " | " << fmt(rep["success_at"].back().get<double>());
            for (const char* lvl : {"0.000010", "0.000100", "0.001000"}) {
                double v = 0.0;
                if (rep["pass_at"].contains(lvl)) v = rep["pass_at"][lvl].get<double>();
                os << " | " << fmt(v);
            }
            double base = 0.0;
            if (results.contains("baseline_regen") && results["baseline_regen"].contains(m))
                base = results["baseline_regen"][m]["success_at"].back().get<double>();
            os << " | " << fmt(base) << " |\n";
        }
        os << "\n";
    }

    if (results.contains("verification")) {
        os << "## 1:1 verification\n\n| Pairing | Accuracy | AUROC |\n|---|---|---|\n";
        for (const auto& [m, rep] : results["verification"].items())
            os << "| " << m << " | " << fmt(rep["accuracy"].get<double>()) << " | "
               << fmt(rep["auroc"].get<double>()) << " |\n";
        os << "\n";
    }

    if (results.contains("similarity")) {
        os << "## Similarity distribution (template-to-source vs same-identity)\n\n";
        os << "| Method | mean(template-to-source) | mean(same-identity) | difference |\n|---|---|---|---|\n";
        for (const auto& [m, rep] : results["similarity"].items())
            os << "| " << m << " | " << fmt(rep["mean_template_to_source"].get<double>()) << " | "
               << fmt(rep["mean_same_identity"].get<double>()) << " | "
               << fmt(rep["mean_difference"].get<double>()) << " |\n";
        os << "\n";
    }

    if (results.contains("probes")) {
        os << "## Soft-biometric leakage\n\n";
        os << "| Embeddings | Group acc | Binary acc | Scalar MAE | Majority rate | Median-baseline MAE |\n";
        os << "|---|---|---|---|---|---|\n";
        for (const auto& [m, rep] : results["probes"].items())
            os << "| " << m << " | " << fmt(rep["group_accuracy"].get<double>()) << " | "
               << fmt(rep["binary_accuracy"].get<double>()) << " | "
               << fmt(rep["scalar_mae"].get<double>()) << " | "
               << fmt(rep["chance_group"].get<double>()) << " | "
               << fmt(rep["baseline_mae"].get<double>()) << " |\n";
        os << "\n";
    }

    if (results.contains("zk")) {
        os << "## Zero-knowledge proxy attack\n\n";
        os << "| Method | Top-1 recall | Success@5 | Verification AUROC |\n|---|---|---|---|\n";
        const auto& per = results["zk"]["attack"]["per_protector"];
        for (const auto& [m, rep] : per.items())
            os << "| " << m << " | " << fmt(rep["top1_recall"].get<double>()) << " | "
               << fmt(rep["regen"]["success_at"].back().get<double>()) << " | "
               << fmt(rep["verification"]["auroc"].get<double>()) << " |\n";
        os << "\n";
    }

    if (results.contains("disconnect")) {
        const auto& d = results["disconnect"];
        os << "## Pixel-metric vs identity-metric disconnect\n\n";
        os << "| Pair set | mean PSNR (dB) | mean identity similarity |\n|---|---|---|\n";
        os << "| same identity, opposite nuisance | " << fmt(d["mean_psnr_same"].get<double>())
           << " | " << fmt(d["mean_idsim_same"].get<double>()) << " |\n";
        os << "| cross identity, shared nuisance | " << fmt(d["mean_psnr_cross"].get<double>())
           << " | " << fmt(d["mean_idsim_cross"].get<double>()) << " |\n\n";
        os << "Spearman(PSNR, identity similarity) = "
           << fmt(d["spearman_psnr_idsim"].get<double>()) << "\n\n";
    }
}

void render_csv(const json& results, std::ostream& os) {
    os << "section,row,column,value\n";
    if (results.contains("linkage_grid")) {
        const auto& grid = results["linkage_grid"];
        for (std::size_t q = 0; q < grid["query_domains"].size(); ++q)
            for (std::size_t k = 0; k < grid["key_domains"].size(); ++k)
                os << "linkage," << grid["query_domains"][q].get<std::string>() << ","
                   << grid["key_domains"][k].get<std::string>() << ","
                   << grid["cells"][q][k]["recall"].get<double>() << "\n";
    }
    if (results.contains("regen"))
        for (const auto& [m, rep] : results["regen"].items())
            os << "regen," << m << ",success_at_" << rep["success_at"].size() << ","
               << rep["success_at"].back().get<double>() << "\n";
}

}  // namespace

void emit_report(const json& results, const fs::path& out_dir, const std::string& format) {
    fs::create_directories(out_dir);
    if (format == "json") {
        std::ofstream f(out_dir / "report.json");
        f << results.dump(2) << "\n";
    } else if (format == "csv") {
        std::ofstream f(out_dir / "report.csv");
        render_csv(results, f);
    } else if (format == "markdown") {
        std::ofstream f(out_dir / "report.md");
        render_markdown(results, f);
    } else {
        throw ConfigError("emit_report: unknown format '" + format + "' (json|csv|markdown)");
    }
}

}  // namespace idleak::pipeline

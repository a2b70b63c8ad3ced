#include "idleak/embedder.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include "idleak/hashing.hpp"
#include "idleak/linkage.hpp"

namespace idleak::embed {

using nlohmann::json;

std::string source_name(Source s) {
    switch (s) {
        case Source::TEACHER: return "teacher";
        case Source::STUDENT: return "student";
        case Source::PROXY_STUDENT: return "proxy-student";
    }
    return "invalid";
}

Source source_from_name(const std::string& name) {
    if (name == "teacher") return Source::TEACHER;
    if (name == "student") return Source::STUDENT;
    if (name == "proxy-student") return Source::PROXY_STUDENT;
    throw ConfigError("unknown embedding source: " + name);
}

double cosine(const Embedding& a, const Embedding& b) {
    if (a.vec.size() != b.vec.size()) throw DimensionError("cosine: dimension mismatch");
    return std::clamp(a.vec.dot(b.vec), -1.0, 1.0);
}

std::vector<double> image_to_input(const Image& img) {
    std::vector<double> x(static_cast<std::size_t>(img.c) * img.h * img.w);
    std::size_t i = 0;
    for (int ch = 0; ch < img.c; ++ch)
        for (int y = 0; y < img.h; ++y)
            for (int xx = 0; xx < img.w; ++xx) x[i++] = img.at(y, xx, ch);
    return x;
}

std::vector<double> chw_to_input(const Chw& t) {
    return std::vector<double>(t.v.begin(), t.v.end());
}

void append_trunk(nn::Sequential& net, rng::Engine& eng, int width, int embed_dim) {
    const int s = corpus::kImageSide;
    net.add_conv(3, s, s, width, 3, 2, 1, &eng);
    net.add_relu();
    net.add_conv(width, s / 2, s / 2, 2 * width, 3, 2, 1, &eng);
    net.add_relu();
    net.add_conv(2 * width, s / 4, s / 4, 4 * width, 3, 2, 1, &eng);
    net.add_relu();
    net.add_conv(4 * width, s / 8, s / 8, 6 * width, 3, 2, 1, &eng);
    net.add_relu();
    net.add_global_avg_pool(6 * width, s / 16, s / 16);
    net.add_dense(6 * width, embed_dim, &eng);
    net.add_l2_normalize();
}

std::string dataset_fingerprint(const corpus::Dataset& ds) {
    json j;
    j["seed"] = ds.manifest.seed;
    j["n_identities"] = ds.manifest.n_identities;
    j["images_per_identity"] = ds.manifest.images_per_identity;
    std::vector<std::string> ids;
    ids.reserve(ds.items.size());
    for (const auto& it : ds.items) ids.push_back(it.sample_id);
    j["samples"] = ids;
    return json_hash(j);
}

namespace {

// Deterministic epoch-reshuffled stream of dataset indices.
class BatchSampler {
public:
    BatchSampler(std::vector<std::size_t> indices, std::uint64_t seed)
        : indices_(std::move(indices)), seed_(seed) {
        reshuffle();
    }
    std::size_t next() {
        if (pos_ == indices_.size()) {
            ++epoch_;
            pos_ = 0;
            reshuffle();
        }
        return indices_[pos_++];
    }
    long epoch() const { return epoch_; }

private:
    void reshuffle() {
        auto eng = rng::engine(rng::derive(seed_, "batch-order", static_cast<std::uint64_t>(epoch_)));
        for (std::size_t i = indices_.size(); i > 1; --i)
            std::swap(indices_[i - 1], indices_[static_cast<std::size_t>(rng::below(eng, i))]);
    }
    std::vector<std::size_t> indices_;
    std::uint64_t seed_;
    std::size_t pos_ = 0;
    long epoch_ = 0;
};

Embedding run_embed(const EmbedderModel& model, const std::vector<double>& x, Source src) {
    nn::Sequential::Tape tape;
    const double* y = model.net.forward(x.data(), tape);
    Embedding e;
    e.vec = Eigen::Map<const Eigen::VectorXd>(y, model.embed_dim);
    e.source = src;
    return e;
}

}  // namespace

EmbedderModel train_teacher(const corpus::Dataset& ds, const TrainConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto train_idx = ds.train_indices();
    if (cfg.steps < 1 || cfg.batch_size < 1 || !(cfg.lr > 0))
        throw ConfigError("train_teacher: steps/batch_size/lr out of range");

    // Label remap over train identities.
    std::unordered_map<int, int> label_of;
    for (auto i : train_idx)
        if (!label_of.count(ds.items[i].identity)) {
            const int next = static_cast<int>(label_of.size());
            label_of[ds.items[i].identity] = next;
        }
    const int n_classes = static_cast<int>(label_of.size());
    if (n_classes < 2) throw ConfigError("train_teacher: need at least 2 training identities");

    EmbedderModel model;
    model.source = Source::TEACHER;
    model.embed_dim = cfg.embed_dim;
    auto eng = rng::engine(rng::derive(cfg.seed, "teacher-init"));
    append_trunk(model.net, eng, cfg.width, cfg.embed_dim);

    // Classifier head lives outside the saved model.
    nn::ParamStore head;
    head.add("head.w", {static_cast<std::uint32_t>(n_classes), static_cast<std::uint32_t>(cfg.embed_dim)});
    {
        rng::Gaussian gauss;
        auto heng = rng::engine(rng::derive(cfg.seed, "teacher-head"));
        for (auto& w : head.values()) w = 0.05 * gauss(heng);
    }

    nn::Adam opt_net(model.net.params.size(), cfg.lr);
    nn::Adam opt_head(head.size(), cfg.lr);
    BatchSampler sampler(train_idx, cfg.seed);

    std::vector<double> gnet(model.net.params.size());
    std::vector<double> ghead(head.size());
    std::vector<double> demb(static_cast<std::size_t>(cfg.embed_dim));
    nn::Sequential::Tape tape;

    std::vector<double> loss_curve;
    loss_curve.reserve(static_cast<std::size_t>(cfg.steps));
    // accuracy over the trailing window for the convergence guard
    const long guard_window = std::max<long>(1, cfg.steps / 5);
    long guard_hits = 0, guard_total = 0;

    for (long step = 0; step < cfg.steps; ++step) {
        std::fill(gnet.begin(), gnet.end(), 0.0);
        std::fill(ghead.begin(), ghead.end(), 0.0);
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto idx = sampler.next();
            const auto& item = ds.items[idx];
            const auto x = image_to_input(item.pixels);
            const double* emb = model.net.forward(x.data(), tape);
            int argmax = 0;
            const double loss =
                nn::am_softmax_loss(emb, cfg.embed_dim, label_of.at(item.identity), head.data(),
                                    n_classes, cfg.scale, cfg.margin, demb.data(), ghead.data(), &argmax);
            batch_loss += loss;
            model.net.backward(x.data(), demb.data(), tape, nullptr, gnet.data());
            if (step >= cfg.steps - guard_window) {
                guard_total++;
                if (argmax == label_of.at(item.identity)) guard_hits++;
            }
        }
        const double inv = 1.0 / cfg.batch_size;
        for (auto& g : gnet) g *= inv;
        for (auto& g : ghead) g *= inv;
        batch_loss *= inv;
        if (!std::isfinite(batch_loss))
            throw Error("train_teacher: non-finite loss at step " + std::to_string(step));
        const double lrs = cfg.cosine_lr ? nn::cosine_decay(step, cfg.steps) : 1.0;
        opt_net.step(model.net.params.data(), gnet.data(), gnet.size(), lrs);
        opt_head.step(head.data(), ghead.data(), ghead.size(), lrs);
        loss_curve.push_back(batch_loss);
    }

    const double final_acc = guard_total ? static_cast<double>(guard_hits) / guard_total : 0.0;
    if (final_acc < 2.0 / n_classes)
        throw Error("train_teacher: failed to converge (final accuracy " + std::to_string(final_acc) +
                    " < 2x chance " + std::to_string(2.0 / n_classes) + " over " +
                    std::to_string(guard_total) + " samples)");

    // Held-out check: genuine mean must exceed impostor mean.
    const auto val_idx = ds.val_indices();
    json val_metrics;
    if (val_idx.size() >= 4) {
        EmbeddingSet vs = embed_images(model, ds, val_idx, "teacher-val");
        std::vector<double> genuine, impostor;
        for (std::size_t i = 0; i < val_idx.size(); ++i)
            for (std::size_t j = i + 1; j < val_idx.size(); ++j) {
                const double s = std::clamp(vs.vecs.row(i).dot(vs.vecs.row(j)), -1.0, 1.0);
                (vs.identities[i] == vs.identities[j] ? genuine : impostor).push_back(s);
            }
        if (!genuine.empty() && !impostor.empty()) {
            const double gm = std::accumulate(genuine.begin(), genuine.end(), 0.0) / genuine.size();
            const double im = std::accumulate(impostor.begin(), impostor.end(), 0.0) / impostor.size();
            if (gm <= im)
                throw Error("train_teacher: held-out genuine mean " + std::to_string(gm) +
                            " does not exceed impostor mean " + std::to_string(im));
            val_metrics["genuine_mean"] = gm;
            val_metrics["impostor_mean"] = im;
            val_metrics["auroc"] = linkage::auroc(genuine, impostor);
        }
    }

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    model.manifest = {{"kind", "teacher"},
                      {"seed", cfg.seed},
                      {"steps", cfg.steps},
                      {"batch_size", cfg.batch_size},
                      {"lr", cfg.lr},
                      {"margin", cfg.margin},
                      {"scale", cfg.scale},
                      {"width", cfg.width},
                      {"embed_dim", cfg.embed_dim},
                      {"n_classes", n_classes},
                      {"final_train_accuracy", final_acc},
                      {"loss_curve", loss_curve},
                      {"data_hash", dataset_fingerprint(ds)},
                      {"val", val_metrics},
                      {"wall_seconds", wall}};
    return model;
}

Embedding embed_teacher(const EmbedderModel& teacher, const Image& image) {
    if (image.c != teacher.in_c || image.h != teacher.in_h || image.w != teacher.in_w)
        throw DimensionError("embed_teacher: expected " + std::to_string(teacher.in_c) + "x" +
                             std::to_string(teacher.in_h) + "x" + std::to_string(teacher.in_w) +
                             " input");
    return run_embed(teacher, image_to_input(image), teacher.source);
}

EmbedderModel distill_student(const EmbedderModel& teacher, const protect::ProtectorConfig& oracle,
                              const corpus::Dataset& ds, const DistillConfig& cfg) {
    protect::validate(oracle);
    if (cfg.steps < 1 || cfg.batch_size < 1 || !(cfg.lr > 0))
        throw ConfigError("distill_student: steps/batch_size/lr out of range");
    const auto train_idx = ds.train_indices();
    if (train_idx.empty()) throw ConfigError("distill_student: empty training split");

    const int tpl_c = oracle.channels();
    const int tpl_hw = oracle.spatial();

    EmbedderModel student;
    student.source = Source::STUDENT;
    student.embed_dim = teacher.embed_dim;
    student.in_c = tpl_c;
    student.in_h = tpl_hw;
    student.in_w = tpl_hw;
    auto eng = rng::engine(rng::derive(cfg.seed, "student-init"));
    // Adapter: bring the template to 3 x 64 x 64 for the fixed trunk.
    if (tpl_hw != corpus::kImageSide)
        student.net.add_upsample_nearest(tpl_c, tpl_hw, tpl_hw, corpus::kImageSide, corpus::kImageSide);
    student.net.add_conv(tpl_c, corpus::kImageSide, corpus::kImageSide, 3, 3, 1, 1, &eng);
    append_trunk(student.net, eng, cfg.width, teacher.embed_dim);

    // The teacher is frozen; cache its embeddings lazily per sample.
    std::unordered_map<std::size_t, std::vector<double>> teacher_cache;
    auto teacher_emb = [&](std::size_t idx) -> const std::vector<double>& {
        auto it = teacher_cache.find(idx);
        if (it == teacher_cache.end()) {
            const Embedding e = embed_teacher(teacher, ds.items[idx].pixels);
            std::vector<double> v(e.vec.data(), e.vec.data() + e.vec.size());
            it = teacher_cache.emplace(idx, std::move(v)).first;
        }
        return it->second;
    };

    nn::Adam opt(student.net.params.size(), cfg.lr);
    BatchSampler sampler(train_idx, cfg.seed);
    std::vector<double> grads(student.net.params.size());
    std::vector<double> demb(static_cast<std::size_t>(teacher.embed_dim));
    nn::Sequential::Tape tape;
    std::vector<double> loss_curve;
    loss_curve.reserve(static_cast<std::size_t>(cfg.steps));

    for (long step = 0; step < cfg.steps; ++step) {
        std::fill(grads.begin(), grads.end(), 0.0);
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto idx = sampler.next();
            const auto& item = ds.items[idx];
            const auto tpl = protect::apply(item.pixels, oracle);  // oracle query per sample
            const auto x = chw_to_input(tpl.tensor);
            const double* emb = student.net.forward(x.data(), tape);
            batch_loss += nn::cosine_alignment_loss(emb, teacher_emb(idx).data(), teacher.embed_dim,
                                                    demb.data());
            student.net.backward(x.data(), demb.data(), tape, nullptr, grads.data());
        }
        const double inv = 1.0 / cfg.batch_size;
        for (auto& g : grads) g *= inv;
        batch_loss *= inv;
        if (!std::isfinite(batch_loss))
            throw Error("distill_student: non-finite loss at step " + std::to_string(step) +
                        " (lr " + std::to_string(cfg.lr) + ")");
        opt.step(student.net.params.data(), grads.data(), grads.size(),
                 cfg.cosine_lr ? nn::cosine_decay(step, cfg.steps) : 1.0);
        loss_curve.push_back(batch_loss);
    }

    // Validation alignment: mean cos(student(T(x)), teacher(x)) on held-out ids.
    double val_mean = 0.0;
    const auto val_idx = ds.val_indices();
    if (!val_idx.empty()) {
        double acc = 0.0;
        for (auto idx : val_idx) {
            const auto tpl = protect::apply(ds.items[idx].pixels, oracle);
            const Embedding se = embed_student(student, tpl);
            acc += nn::dot(se.vec.data(), teacher_emb(idx).data(), teacher.embed_dim);
        }
        val_mean = acc / static_cast<double>(val_idx.size());
    }

    student.manifest = {{"kind", "student"},
                        {"seed", cfg.seed},
                        {"steps", cfg.steps},
                        {"batch_size", cfg.batch_size},
                        {"lr", cfg.lr},
                        {"width", cfg.width},
                        {"embed_dim", teacher.embed_dim},
                        {"oracle", oracle.to_json()},
                        {"oracle_hash", oracle.hash()},
                        {"adapter_channels", tpl_c},
                        {"loss_curve", loss_curve},
                        {"val_mean_cosine", val_mean},
                        {"data_hash", dataset_fingerprint(ds)}};
    return student;
}

Embedding embed_student(const EmbedderModel& student, const protect::ProtectedTemplate& tpl) {
    if (tpl.tensor.c != student.in_c)
        throw DimensionError("embed_student: adapter expects " + std::to_string(student.in_c) +
                             " channels, template has " + std::to_string(tpl.tensor.c));
    if (tpl.tensor.h != student.in_h || tpl.tensor.w != student.in_w)
        throw DimensionError("embed_student: spatial mismatch");
    // Only the tensor is consumed; source_id/subject_hint never feed the path.
    return run_embed(student, chw_to_input(tpl.tensor), student.source);
}

EmbeddingSet embed_images(const EmbedderModel& teacher, const corpus::Dataset& ds,
                          const std::vector<std::size_t>& indices, const std::string& domain) {
    EmbeddingSet set;
    set.source = teacher.source;
    set.domain = domain;
    set.vecs.resize(static_cast<Eigen::Index>(indices.size()), teacher.embed_dim);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& item = ds.items[indices[i]];
        const Embedding e = embed_teacher(teacher, item.pixels);
        set.vecs.row(static_cast<Eigen::Index>(i)) = e.vec.transpose();
        set.sample_ids.push_back(item.sample_id);
        set.identities.push_back(item.identity);
    }
    return set;
}

EmbeddingSet embed_templates(const EmbedderModel& student,
                             const std::vector<protect::ProtectedTemplate>& tpls,
                             const std::vector<std::string>& sample_ids,
                             const std::vector<int>& identities, const std::string& domain) {
    if (tpls.size() != sample_ids.size() || tpls.size() != identities.size())
        throw DimensionError("embed_templates: list length mismatch");
    EmbeddingSet set;
    set.source = student.source;
    set.domain = domain;
    set.vecs.resize(static_cast<Eigen::Index>(tpls.size()), student.embed_dim);
    for (std::size_t i = 0; i < tpls.size(); ++i) {
        const Embedding e = embed_student(student, tpls[i]);
        set.vecs.row(static_cast<Eigen::Index>(i)) = e.vec.transpose();
    }
    set.sample_ids = sample_ids;
    set.identities = identities;
    return set;
}

void save_embedder(const EmbedderModel& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json extra = {{"source", source_name(model.source)},
                  {"in_c", model.in_c},
                  {"in_h", model.in_h},
                  {"in_w", model.in_w},
                  {"embed_dim", model.embed_dim}};
    nn::save_model(dir / "model.flgm", model.net, extra);
    std::ofstream mf(dir / "manifest.json");
    mf << model.manifest.dump(2) << "\n";
}

EmbedderModel load_embedder(const std::filesystem::path& dir) {
    auto loaded = nn::load_model(dir / "model.flgm");
    EmbedderModel model;
    model.net = std::move(loaded.net);
    model.source = source_from_name(loaded.extra.at("source").get<std::string>());
    model.in_c = loaded.extra.at("in_c").get<int>();
    model.in_h = loaded.extra.at("in_h").get<int>();
    model.in_w = loaded.extra.at("in_w").get<int>();
    model.embed_dim = loaded.extra.at("embed_dim").get<int>();
    if (std::ifstream mf(dir / "manifest.json"); mf) model.manifest = json::parse(mf);
    return model;
}

void save_embedding_set(const EmbeddingSet& set, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    Tensor t = Tensor::f64({static_cast<std::uint32_t>(set.vecs.rows()),
                            static_cast<std::uint32_t>(set.vecs.cols())});
    std::copy(set.vecs.data(), set.vecs.data() + set.vecs.size(), t.data<double>().begin());
    write_tensor(dir / "embeddings.flgt", t);
    json meta = {{"source", source_name(set.source)},
                 {"domain", set.domain},
                 {"sample_ids", set.sample_ids},
                 {"identities", set.identities}};
    std::ofstream mf(dir / "meta.json");
    mf << meta.dump(2) << "\n";
}

EmbeddingSet load_embedding_set(const std::filesystem::path& dir) {
    Tensor t = read_tensor(dir / "embeddings.flgt");
    if (t.rank() != 2 || t.dtype() != Dtype::F64) throw DtypeError("embedding set: expected rank-2 f64");
    std::ifstream mf(dir / "meta.json");
    if (!mf) throw IoError("embedding set meta.json missing in " + dir.string());
    const json meta = json::parse(mf);

    EmbeddingSet set;
    set.vecs.resize(t.shape()[0], t.shape()[1]);
    std::copy(t.data<double>().begin(), t.data<double>().end(), set.vecs.data());
    set.source = source_from_name(meta.at("source").get<std::string>());
    set.domain = meta.at("domain").get<std::string>();
    set.sample_ids = meta.at("sample_ids").get<std::vector<std::string>>();
    set.identities = meta.at("identities").get<std::vector<int>>();
    return set;
}

}  // namespace idleak::embed

// idleak: identity-leakage evaluation for transformation-based face
// template protectors. Subcommands cover corpus generation, protection,
// training, linkage/regeneration evaluation and the end-to-end pipeline.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "idleak/corpus.hpp"
#include "idleak/embedder.hpp"
#include "idleak/linkage.hpp"
#include "idleak/pipeline.hpp"
#include "idleak/probes.hpp"
#include "idleak/protectors.hpp"
#include "idleak/regenerator.hpp"
#include "idleak/zeroknowledge.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace idleak;

namespace {

json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    return json::parse(f);
}

void write_json_file(const std::string& path, const json& j) {
    if (const auto parent = fs::path(path).parent_path(); !parent.empty())
        fs::create_directories(parent);
    std::ofstream f(path);
    f << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"idleak: identity-leakage evaluation for PPFR template protectors"};
    app.require_subcommand(1);

    // corpus
    auto* corpus_cmd = app.add_subcommand("corpus", "generate the synthetic identity corpus");
    std::uint64_t c_seed = 1;
    int c_ids = 250, c_per = 10;
    std::string c_out;
    bool c_overwrite = false;
    corpus_cmd->add_option("--seed", c_seed, "generator seed");
    corpus_cmd->add_option("--ids", c_ids, "number of identities")->required();
    corpus_cmd->add_option("--per-id", c_per, "images per identity")->required();
    corpus_cmd->add_option("--out", c_out, "output directory")->required();
    corpus_cmd->add_flag("--overwrite", c_overwrite, "replace an existing directory");

    // protect
    auto* protect_cmd = app.add_subcommand("protect", "apply a reference protector to a corpus");
    std::string p_method, p_config, p_in, p_out;
    bool p_overwrite = false;
    protect_cmd->add_option("--method", p_method, "partial|minus|highpass")->required();
    protect_cmd->add_option("--config", p_config, "protector config JSON (optional)");
    protect_cmd->add_option("--in", p_in, "corpus directory")->required();
    protect_cmd->add_option("--out", p_out, "output template directory")->required();
    protect_cmd->add_flag("--overwrite", p_overwrite);

    // train-teacher
    auto* teach_cmd = app.add_subcommand("train-teacher", "train the identity teacher");
    std::string t_corpus, t_out, t_config;
    teach_cmd->add_option("--corpus", t_corpus)->required();
    teach_cmd->add_option("--out", t_out)->required();
    teach_cmd->add_option("--config", t_config, "TrainConfig JSON file");

    // distill
    auto* distill_cmd = app.add_subcommand("distill", "distill a student against a protect oracle");
    std::string d_teacher, d_method, d_pconfig, d_corpus, d_out, d_config;
    distill_cmd->add_option("--teacher", d_teacher)->required();
    distill_cmd->add_option("--method", d_method, "partial|minus|highpass")->required();
    distill_cmd->add_option("--protect-config", d_pconfig, "protector config JSON");
    distill_cmd->add_option("--corpus", d_corpus)->required();
    distill_cmd->add_option("--out", d_out)->required();
    distill_cmd->add_option("--config", d_config, "DistillConfig JSON file");

    // embed
    auto* embed_cmd = app.add_subcommand("embed", "embed a corpus or template set");
    std::string e_model, e_corpus, e_templates, e_out, e_domain = "embeddings";
    embed_cmd->add_option("--model", e_model)->required();
    embed_cmd->add_option("--corpus", e_corpus, "corpus directory (teacher input)");
    embed_cmd->add_option("--templates", e_templates, "template directory (student input)");
    embed_cmd->add_option("--labels", e_corpus, "corpus directory for identity labels");
    embed_cmd->add_option("--domain", e_domain, "domain tag for reports");
    embed_cmd->add_option("--out", e_out)->required();

    // link
    auto* link_cmd = app.add_subcommand("link", "linkage grid over embedding directories");
    std::vector<std::string> l_dirs;
    std::string l_out;
    link_cmd->add_option("--embeddings", l_dirs, "embedding set directories")->required()->expected(-1);
    link_cmd->add_option("--out", l_out, "report JSON path")->required();

    // calibrate
    auto* cal_cmd = app.add_subcommand("calibrate", "calibrate FAR thresholds from impostor pairs");
    std::string cal_teacher, cal_corpus, cal_out, cal_levels = "1e-3,1e-4,1e-5";
    long cal_pairs = 1000000;
    std::uint64_t cal_seed = 13;
    cal_cmd->add_option("--teacher", cal_teacher)->required();
    cal_cmd->add_option("--corpus", cal_corpus, "calibration corpus (identity-disjoint)")->required();
    cal_cmd->add_option("--levels", cal_levels, "comma-separated FAR levels");
    cal_cmd->add_option("--pairs", cal_pairs, "impostor pair count");
    cal_cmd->add_option("--seed", cal_seed);
    cal_cmd->add_option("--out", cal_out)->required();

    // regen
    auto* regen_cmd = app.add_subcommand("regen", "regeneration attack with calibrated verification");
    std::string r_decoder, r_student, r_templates, r_corpus, r_teacher, r_thresholds, r_out;
    std::string r_verifier = "local", r_dump;
    int r_k = 5;
    std::uint64_t r_seed = 17;
    regen_cmd->add_option("--decoder", r_decoder)->required();
    regen_cmd->add_option("--student", r_student)->required();
    regen_cmd->add_option("--templates", r_templates)->required();
    regen_cmd->add_option("--corpus", r_corpus, "corpus with the source images")->required();
    regen_cmd->add_option("--teacher", r_teacher, "teacher model for verification")->required();
    regen_cmd->add_option("--thresholds", r_thresholds)->required();
    regen_cmd->add_option("--k", r_k, "attempts per identity");
    regen_cmd->add_option("--seed", r_seed);
    regen_cmd->add_option("--verifier", r_verifier, "local|mock");
    regen_cmd->add_option("--dump-png", r_dump, "directory for preview PNGs");
    regen_cmd->add_option("--out", r_out)->required();

    // probe
    auto* probe_cmd = app.add_subcommand("probe", "soft-biometric probes on an embedding set");
    std::string pr_embeddings, pr_attrs, pr_out;
    std::uint64_t pr_seed = 18;
    probe_cmd->add_option("--embeddings", pr_embeddings)->required();
    probe_cmd->add_option("--attributes", pr_attrs, "attributes.json")->required();
    probe_cmd->add_option("--seed", pr_seed);
    probe_cmd->add_option("--out", pr_out)->required();

    // disconnect
    auto* disc_cmd = app.add_subcommand("disconnect", "pixel-vs-identity metric disconnect analysis");
    std::string di_teacher, di_out;
    std::uint64_t di_seed = 29;
    int di_pairs = 30;
    disc_cmd->add_option("--teacher", di_teacher)->required();
    disc_cmd->add_option("--pairs", di_pairs, "pairs per contrast set");
    disc_cmd->add_option("--seed", di_seed);
    disc_cmd->add_option("--out", di_out)->required();

    // zk
    auto* zk_cmd = app.add_subcommand("zk", "zero-knowledge proxy attack");
    auto* zk_train_cmd = zk_cmd->add_subcommand("train", "train the oracle-free proxy student");
    std::string zt_teacher, zt_corpus, zt_out, zt_config;
    zk_train_cmd->add_option("--teacher", zt_teacher)->required();
    zk_train_cmd->add_option("--corpus", zt_corpus)->required();
    zk_train_cmd->add_option("--config", zt_config, "DistillConfig JSON file");
    zk_train_cmd->add_option("--out", zt_out)->required();

    auto* zk_eval_cmd = zk_cmd->add_subcommand("eval", "evaluate the proxy against template sets");
    std::string ze_proxy, ze_teacher, ze_decoder, ze_thresholds, ze_corpus, ze_out;
    std::vector<std::string> ze_templates;
    std::uint64_t ze_pairs_seed = 23, ze_seed = 17;
    int ze_k = 5;
    zk_eval_cmd->add_option("--proxy", ze_proxy)->required();
    zk_eval_cmd->add_option("--teacher", ze_teacher)->required();
    zk_eval_cmd->add_option("--decoder", ze_decoder)->required();
    zk_eval_cmd->add_option("--thresholds", ze_thresholds)->required();
    zk_eval_cmd->add_option("--corpus", ze_corpus)->required();
    zk_eval_cmd->add_option("--templates", ze_templates)->required()->expected(-1);
    zk_eval_cmd->add_option("--pairs-seed", ze_pairs_seed, "seed for the 30 validation pairs");
    zk_eval_cmd->add_option("--k", ze_k);
    zk_eval_cmd->add_option("--seed", ze_seed);
    zk_eval_cmd->add_option("--out", ze_out)->required();

    // run + report
    auto* run_cmd = app.add_subcommand("run", "run the end-to-end pipeline");
    std::string run_config;
    std::vector<std::string> run_stages;
    bool run_no_cache = false;
    run_cmd->add_option("--config", run_config, "RunConfig JSON (defaults when omitted)");
    run_cmd->add_option("--stages", run_stages, "subset of stages to run")->expected(-1);
    run_cmd->add_flag("--no-cache", run_no_cache, "ignore cached stage artifacts");

    auto* report_cmd = app.add_subcommand("report", "render reports from a finished run");
    std::string rep_run, rep_format = "markdown";
    report_cmd->add_option("--run", rep_run, "run output root")->required();
    report_cmd->add_option("--format", rep_format, "json|csv|markdown");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*corpus_cmd) {
            corpus::CorpusManifest m;
            m.seed = c_seed;
            m.n_identities = c_ids;
            m.images_per_identity = c_per;
            const auto ds = corpus::generate_corpus_to(m, c_out, c_overwrite);
            std::cout << "corpus: " << ds.items.size() << " samples, " << m.n_identities
                      << " identities -> " << c_out << "\n";
        } else if (*protect_cmd) {
            protect::ProtectorConfig cfg;
            if (!p_config.empty()) cfg = protect::ProtectorConfig::from_json(read_json_file(p_config));
            cfg.method = protect::method_from_name(p_method);
            const auto ds = corpus::load_corpus(p_in);
            std::vector<protect::ProtectedTemplate> tpls;
            for (const auto& item : ds.items) {
                auto tpl = protect::apply(item.pixels, cfg);
                tpl.source_id = item.sample_id;
                tpls.push_back(std::move(tpl));
            }
            protect::write_templates(p_out, cfg, tpls, p_overwrite);
            std::cout << "protected " << tpls.size() << " images with " << p_method << " -> "
                      << p_out << "\n";
        } else if (*teach_cmd) {
            embed::TrainConfig cfg;
            if (!t_config.empty()) {
                const json j = read_json_file(t_config);
                cfg.steps = j.value("steps", cfg.steps);
                cfg.batch_size = j.value("batch_size", cfg.batch_size);
                cfg.lr = j.value("lr", cfg.lr);
                cfg.seed = j.value("seed", cfg.seed);
                cfg.width = j.value("width", cfg.width);
                cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
                cfg.margin = j.value("margin", cfg.margin);
                cfg.scale = j.value("scale", cfg.scale);
            }
            const auto ds = corpus::load_corpus(t_corpus);
            const auto model = embed::train_teacher(ds, cfg);
            embed::save_embedder(model, t_out);
            std::cout << "teacher: val AUROC " << model.manifest["val"]["auroc"] << " -> " << t_out
                      << "\n";
        } else if (*distill_cmd) {
            protect::ProtectorConfig oracle;
            if (!d_pconfig.empty())
                oracle = protect::ProtectorConfig::from_json(read_json_file(d_pconfig));
            oracle.method = protect::method_from_name(d_method);
            embed::DistillConfig cfg;
            if (!d_config.empty()) {
                const json j = read_json_file(d_config);
                cfg.steps = j.value("steps", cfg.steps);
                cfg.batch_size = j.value("batch_size", cfg.batch_size);
                cfg.lr = j.value("lr", cfg.lr);
                cfg.seed = j.value("seed", cfg.seed);
                cfg.width = j.value("width", cfg.width);
            }
            const auto teacher = embed::load_embedder(d_teacher);
            const auto ds = corpus::load_corpus(d_corpus);
            const auto student = embed::distill_student(teacher, oracle, ds, cfg);
            embed::save_embedder(student, d_out);
            std::cout << "student(" << d_method << "): val mean cosine "
                      << student.manifest["val_mean_cosine"] << " -> " << d_out << "\n";
        } else if (*embed_cmd) {
            const auto model = embed::load_embedder(e_model);
            if (!e_templates.empty()) {
                const auto tset = protect::read_templates(e_templates);
                const auto ds = corpus::load_corpus(e_corpus);
                std::vector<std::string> ids;
                std::vector<int> labels;
                for (const auto& t : tset.items) {
                    ids.push_back(*t.source_id);
                    labels.push_back(ds.by_sample_id(*t.source_id).identity);
                }
                embed::save_embedding_set(
                    embed::embed_templates(model, tset.items, ids, labels, e_domain), e_out);
            } else {
                const auto ds = corpus::load_corpus(e_corpus);
                std::vector<std::size_t> all(ds.items.size());
                std::iota(all.begin(), all.end(), std::size_t{0});
                embed::save_embedding_set(embed::embed_images(model, ds, all, e_domain), e_out);
            }
            std::cout << "embeddings -> " << e_out << "\n";
        } else if (*link_cmd) {
            std::vector<embed::EmbeddingSet> sets;
            for (const auto& dir : l_dirs) sets.push_back(embed::load_embedding_set(dir));
            const auto grid = linkage::linkage_matrix(sets, sets);
            write_json_file(l_out, grid.to_json());
            std::cout << "linkage grid (" << sets.size() << "x" << sets.size() << ") -> " << l_out
                      << "\n";
        } else if (*cal_cmd) {
            std::vector<double> levels;
            std::stringstream ss(cal_levels);
            for (std::string tok; std::getline(ss, tok, ',');) levels.push_back(std::stod(tok));
            const auto teacher = embed::load_embedder(cal_teacher);
            const auto ds = corpus::load_corpus(cal_corpus);
            const auto th = regen::calibrate_thresholds(teacher, ds, levels, cal_pairs, cal_seed);
            write_json_file(cal_out, th.to_json());
            std::cout << "thresholds from " << th.impostor_count << " impostor pairs -> " << cal_out
                      << "\n";
        } else if (*regen_cmd) {
            const auto decoder = regen::load_decoder(r_decoder);
            const auto student = embed::load_embedder(r_student);
            const auto teacher = embed::load_embedder(r_teacher);
            const auto tset = protect::read_templates(r_templates);
            const auto ds = corpus::load_corpus(r_corpus);
            const auto th = regen::CalibratedThresholds::from_json(read_json_file(r_thresholds));

            std::unique_ptr<regen::VerifierClient> client;
            if (r_verifier == "mock")
                client = std::make_unique<regen::MockVerifierClient>(teacher, th,
                                                                     regen::MockVerifierConfig{});
            else if (r_verifier != "local")
                throw ConfigError("unknown verifier: " + r_verifier);

            std::map<std::string, std::vector<double>> attempts;
            std::set<int> seen;
            for (const auto& tpl : tset.items) {
                const auto& item = ds.by_sample_id(*tpl.source_id);
                if (seen.count(item.identity)) continue;
                seen.insert(item.identity);
                const auto emb = embed::embed_student(student, tpl);
                const auto images =
                    regen::regenerate(decoder, emb.vec, r_k,
                                      rng::derive(r_seed, "cli-regen",
                                                  static_cast<std::uint64_t>(item.identity)));
                std::vector<double> levels;
                for (std::size_t j = 0; j < images.size(); ++j) {
                    const auto outcome =
                        client ? regen::remote_verify(*client, item.pixels, images[j], 2)
                               : regen::verify_local(teacher, item.pixels, images[j], th);
                    levels.push_back(outcome.strictest_far);
                    if (!r_dump.empty() && j == 0) {
                        fs::create_directories(r_dump);
                        write_png(fs::path(r_dump) / (item.sample_id + "_regen.png"), images[j]);
                    }
                }
                attempts["id" + std::to_string(item.identity)] = levels;
            }
            const auto report = regen::success_metrics(attempts, th);
            write_json_file(r_out, report.to_json());
            std::cout << "regen Success@" << r_k << " = " << report.success_at.back() << " -> "
                      << r_out << "\n";
        } else if (*probe_cmd) {
            const auto set = embed::load_embedding_set(pr_embeddings);
            const json attrs = read_json_file(pr_attrs);
            probes::ProbeData data;
            data.embeddings = set.vecs;
            data.identities = set.identities;
            for (const auto& sid : set.sample_ids) {
                if (!attrs.contains(sid)) throw Error("attributes missing for sample " + sid);
                corpus::SoftAttributes at;
                at.group = attrs[sid]["group"].get<int>();
                at.binary_attr = attrs[sid]["binary_attr"].get<int>();
                at.scalar_attr = attrs[sid]["scalar_attr"].get<double>();
                data.attributes.push_back(at);
            }
            // Identity-disjoint 80/20 split, seeded.
            std::set<int> idents(set.identities.begin(), set.identities.end());
            std::vector<int> ids(idents.begin(), idents.end());
            auto eng = rng::engine(rng::derive(pr_seed, "probe-split"));
            for (std::size_t i = ids.size(); i > 1; --i)
                std::swap(ids[i - 1], ids[static_cast<std::size_t>(rng::below(eng, i))]);
            const std::size_t n_train = ids.size() * 4 / 5;
            std::set<int> train_ids(ids.begin(), ids.begin() + static_cast<long>(n_train));
            probes::ProbeData train, test;
            auto push = [](probes::ProbeData& dst, const probes::ProbeData& src, std::size_t i) {
                const auto row = dst.embeddings.rows();
                dst.embeddings.conservativeResize(row + 1, src.embeddings.cols());
                dst.embeddings.row(row) = src.embeddings.row(static_cast<Eigen::Index>(i));
                dst.attributes.push_back(src.attributes[i]);
                dst.identities.push_back(src.identities[i]);
            };
            for (std::size_t i = 0; i < data.attributes.size(); ++i)
                push(train_ids.count(data.identities[i]) ? train : test, data, i);
            probes::ProbeConfig cfg;
            cfg.seed = pr_seed;
            const auto model = probes::train_probe(train, cfg);
            write_json_file(pr_out, probes::probe_eval(model, test).to_json());
            std::cout << "probe report -> " << pr_out << "\n";
        } else if (*disc_cmd) {
            const auto teacher = embed::load_embedder(di_teacher);
            const auto pairs = probes::build_disconnect_pairs(di_seed, di_pairs);
            const auto rep = probes::metric_disconnect(teacher, pairs.same_identity, pairs.cross_identity);
            write_json_file(di_out, rep.to_json());
            std::cout << "disconnect report (pattern_holds=" << rep.pattern_holds << ") -> " << di_out
                      << "\n";
        } else if (*zk_train_cmd && *zk_cmd) {
            const auto teacher = embed::load_embedder(zt_teacher);
            const auto ds = corpus::load_corpus(zt_corpus);
            embed::DistillConfig cfg;
            if (!zt_config.empty()) {
                const json j = read_json_file(zt_config);
                cfg.steps = j.value("steps", cfg.steps);
                cfg.batch_size = j.value("batch_size", cfg.batch_size);
                cfg.lr = j.value("lr", cfg.lr);
                cfg.seed = j.value("seed", cfg.seed);
                cfg.width = j.value("width", cfg.width);
            }
            const auto proxy = zk::zk_train(teacher, ds, zk::ProxyAugmentation{}, cfg);
            embed::save_embedder(proxy, zt_out);
            std::cout << "proxy student (oracle-free) -> " << zt_out << "\n";
        } else if (*zk_eval_cmd && *zk_cmd) {
            const auto proxy = embed::load_embedder(ze_proxy);
            const auto teacher = embed::load_embedder(ze_teacher);
            const auto decoder = regen::load_decoder(ze_decoder);
            const auto ds = corpus::load_corpus(ze_corpus);
            const auto th = regen::CalibratedThresholds::from_json(read_json_file(ze_thresholds));
            std::vector<std::pair<protect::ProtectorConfig, std::vector<protect::ProtectedTemplate>>>
                sets;
            for (const auto& dir : ze_templates) {
                auto tset = protect::read_templates(dir);
                sets.push_back({tset.config, std::move(tset.items)});
            }
            const auto report = zk::zk_attack_eval(proxy, sets, teacher, ds, decoder, th,
                                                   zk::ZkPreprocessConfig{}, ze_k, ze_seed);
            write_json_file(ze_out, report.to_json());
            std::cout << "zk attack report -> " << ze_out << "\n";
        } else if (*run_cmd) {
            pipeline::RunConfig cfg = pipeline::RunConfig::defaults();
            if (!run_config.empty()) cfg = pipeline::RunConfig::from_json(read_json_file(run_config));
            pipeline::RunOptions opts;
            opts.stages = run_stages;
            opts.use_cache = !run_no_cache;
            const auto manifest = pipeline::run_pipeline(cfg, opts);
            std::cout << "run complete: " << manifest.stages.size() << " stages under "
                      << cfg.output_root << "\n";
            for (const auto& s : manifest.stages)
                std::cout << "  " << s.name << (s.cached ? " [cached]" : "") << " ("
                          << s.wall_seconds << "s)\n";
        } else if (*report_cmd) {
            const auto results = pipeline::load_results(rep_run);
            pipeline::emit_report(results, fs::path(rep_run) / "report", rep_format);
            std::cout << "report (" << rep_format << ") -> " << (fs::path(rep_run) / "report")
                      << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

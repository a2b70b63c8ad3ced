#include "idleak/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "idleak/hashing.hpp"
#include "idleak/rng.hpp"
#include "json.hpp"

namespace idleak::corpus {

using nlohmann::json;

IdentityLatent sample_identity(std::uint64_t seed, int id) {
    auto eng = rng::engine(rng::derive(seed, "identity", static_cast<std::uint64_t>(id)));
    IdentityLatent lat;
    lat.id = id;
    for (auto& v : lat.vec) v = rng::uniform(eng, -1.0, 1.0);
    return lat;
}

NuisanceLatent sample_nuisance(std::uint64_t seed, int id, int image_index) {
    auto eng = rng::engine(rng::derive(seed, "nuisance", static_cast<std::uint64_t>(id),
                                       static_cast<std::uint64_t>(image_index)));
    NuisanceLatent nu;
    nu.pose_deg = rng::uniform(eng, -20.0, 20.0);
    nu.translate_x = rng::uniform(eng, -3.0, 3.0);
    nu.translate_y = rng::uniform(eng, -3.0, 3.0);
    nu.lighting_gain = rng::uniform(eng, 0.6, 1.4);
    nu.noise_seed = eng();
    return nu;
}

SoftAttributes sample_attributes(std::uint64_t seed, int id) {
    auto eng = rng::engine(rng::derive(seed, "attributes", static_cast<std::uint64_t>(id)));
    SoftAttributes at;
    at.group = static_cast<int>(rng::below(eng, 7));
    at.binary_attr = static_cast<int>(rng::below(eng, 2));
    at.scalar_attr = rng::uniform(eng, 0.0, 100.0);
    return at;
}

namespace {

void check_latents(const IdentityLatent& id, const NuisanceLatent& nu, const SoftAttributes& at) {
    for (double v : id.vec)
        if (!(v >= -1.0 && v <= 1.0)) throw ConfigError("identity latent coordinate out of [-1,1]");
    if (!(nu.pose_deg >= -20.0 && nu.pose_deg <= 20.0)) throw ConfigError("pose out of [-20,20] deg");
    if (!(nu.translate_x >= -3.0 && nu.translate_x <= 3.0 && nu.translate_y >= -3.0 && nu.translate_y <= 3.0))
        throw ConfigError("translation out of [-3,3] px");
    if (!(nu.lighting_gain >= 0.6 && nu.lighting_gain <= 1.4)) throw ConfigError("lighting gain out of [0.6,1.4]");
    if (at.group < 0 || at.group > 6) throw ConfigError("group attribute out of {0..6}");
    if (at.binary_attr != 0 && at.binary_attr != 1) throw ConfigError("binary attribute out of {0,1}");
    if (!(at.scalar_attr >= 0.0 && at.scalar_attr <= 100.0)) throw ConfigError("scalar attribute out of [0,100]");
}

// 0->1 smooth ramp as q falls through [1+e, 1-e]; shapes are defined by a
// normalized "inside if q < 1" quantity.
inline double soft_inside(double q, double e) {
    const double t = std::clamp((1.0 + e - q) / (2.0 * e), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

inline double sq(double x) { return x * x; }

struct Rgb {
    double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);  // wrap hue into [0,1)
    const double hf = h * 6.0;
    const int i = static_cast<int>(hf) % 6;
    const double f = hf - std::floor(hf);
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    switch (i) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

// Geometric parameter mapping. Each latent coordinate perturbs one named
// renderer parameter around its midpoint:
//   l0  face half-width        a  = 0.58 + 0.10*l0
//   l1  face half-height       b  = 0.70 + 0.10*l1
//   l2  eye separation         ex = 0.26 + 0.06*l2
//   l3  eye height             ey = -0.22 + 0.07*l3
//   l4  eye radius             er = 0.070 + 0.022*l4
//   l5  eye aspect             ea = 0.60 + 0.20*l5
//   l6  mouth height           my = 0.34 + 0.07*l6
//   l7  mouth half-width       mw = 0.17 + 0.06*l7
//   l8  mouth half-height      mh = 0.035 + 0.012*l8
//   l9  nose length            nl = 0.18 + 0.06*l9
//   l10 nose half-width        nw = 0.030 + 0.012*l10
//   l11 hue fine offset        within the group's hue band
//   l12 skin saturation        0.40 + 0.15*l12
//   l13 mouth/hair tint        see below
//   l14 skin value             0.62 + 0.16*l14
//   l15 brow offset/thickness  see below
// Attributes: group picks one of 7 hue bands, binary_attr squares the jaw
// (superellipse exponent 4 below the midline), scalar_attr sets the stripe
// frequency of the facial texture.
struct FaceParams {
    double a, b, ex, ey, er, ea, my, mw, mh, nl, nw;
    double hue, sat, val, tint, brow_dy, brow_h;
    int jaw_square;
    double stripe_freq;
};

FaceParams face_params(const IdentityLatent& id, const SoftAttributes& at) {
    const auto& l = id.vec;
    FaceParams p{};
    p.a = 0.58 + 0.10 * l[0];
    p.b = 0.70 + 0.10 * l[1];
    p.ex = 0.26 + 0.06 * l[2];
    p.ey = -0.22 + 0.07 * l[3];
    p.er = 0.070 + 0.022 * l[4];
    p.ea = 0.60 + 0.20 * l[5];
    p.my = 0.34 + 0.07 * l[6];
    p.mw = 0.17 + 0.06 * l[7];
    p.mh = 0.035 + 0.012 * l[8];
    p.nl = 0.18 + 0.06 * l[9];
    p.nw = 0.030 + 0.012 * l[10];
    p.hue = (at.group + 0.5) / 7.0 + 0.035 * l[11];
    p.sat = 0.40 + 0.15 * l[12];
    p.val = 0.62 + 0.16 * l[14];
    p.tint = 0.5 + 0.5 * l[13];
    p.brow_dy = 0.10 + 0.03 * l[15];
    p.brow_h = 0.020 + 0.008 * l[15];
    p.jaw_square = at.binary_attr;
    p.stripe_freq = 2.0 + 6.0 * (at.scalar_attr / 100.0);
    return p;
}

Rgb shade(const FaceParams& p, double u, double v) {
    constexpr double edge = 0.06;

    // Background.
    Rgb out{0.12, 0.12, 0.13};

    // Face oval; binary_attr=1 squares the jaw via exponent 4 below center.
    const double pw = std::abs(u) / p.a;
    const double ph = std::abs(v) / p.b;
    double q;
    if (v > 0.0 && p.jaw_square == 1)
        q = pw * pw * pw * pw + ph * ph * ph * ph;
    else
        q = pw * pw + ph * ph;
    const double face_m = soft_inside(q, edge);
    if (face_m <= 0.0) return out;

    const Rgb skin0 = hsv_to_rgb(p.hue, p.sat, p.val);
    // Texture stripes: frequency is the scalar attribute's monotone effect.
    const double stripe = 1.0 + 0.07 * std::cos(6.283185307179586 * p.stripe_freq * (u + 0.6 * v));
    Rgb face{skin0.r * stripe, skin0.g * stripe, skin0.b * stripe};

    // Hair: upper band of the oval, smooth lower edge.
    {
        const double hq = 1.0 + (v + 0.55 * p.b) / 0.06;
        const double m = soft_inside(hq, 0.5);
        if (m > 0.0) {
            const double hv = 0.15 + 0.10 * p.tint;
            const Rgb hair{hv * 0.9, hv * 0.8, hv * 0.75};
            face = {face.r + (hair.r - face.r) * m, face.g + (hair.g - face.g) * m,
                    face.b + (hair.b - face.b) * m};
        }
    }

    // Eyes: two ellipses at (+-ex, ey).
    for (int sgn : {-1, 1}) {
        const double du = u - sgn * p.ex;
        const double dv = v - p.ey;
        const double qe = sq(du / p.er) + sq(dv / (p.er * p.ea));
        const double m = soft_inside(qe, 0.35);
        if (m > 0.0) {
            const Rgb eye{0.10, 0.085, 0.08};
            face = {face.r + (eye.r - face.r) * m, face.g + (eye.g - face.g) * m, face.b + (eye.b - face.b) * m};
        }
        // Brow: flat dark bar above each eye.
        const double bv = v - (p.ey - p.brow_dy);
        const double qb = sq(du / (p.er * 1.5)) + sq(bv / p.brow_h);
        const double mb = soft_inside(qb, 0.35);
        if (mb > 0.0) {
            const Rgb brow{0.16, 0.13, 0.11};
            face = {face.r + (brow.r - face.r) * mb, face.g + (brow.g - face.g) * mb,
                    face.b + (brow.b - face.b) * mb};
        }
    }

    // Nose: vertical strip from eye line down, shaded darker skin.
    {
        const double top = p.ey + 0.10;
        const double qn = sq(u / p.nw) + sq((v - top - 0.5 * p.nl) / (0.5 * p.nl));
        const double m = soft_inside(qn, 0.35) * 0.45;
        if (m > 0.0)
            face = {face.r * (1.0 - 0.35 * m), face.g * (1.0 - 0.35 * m), face.b * (1.0 - 0.35 * m)};
    }

    // Mouth.
    {
        const double qm = sq(u / p.mw) + sq((v - p.my) / p.mh);
        const double m = soft_inside(qm, 0.35);
        if (m > 0.0) {
            const Rgb mouth{0.42 + 0.12 * p.tint, 0.16, 0.17};
            face = {face.r + (mouth.r - face.r) * m, face.g + (mouth.g - face.g) * m,
                    face.b + (mouth.b - face.b) * m};
        }
    }

    out = {out.r + (face.r - out.r) * face_m, out.g + (face.g - out.g) * face_m,
           out.b + (face.b - out.b) * face_m};
    return out;
}

}  // namespace

std::string make_sample_id(int id, int image_index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "id%05d_s%03d", id, image_index);
    return buf;
}

ImageSample render_face(const IdentityLatent& identity, const NuisanceLatent& nuisance,
                        const SoftAttributes& attributes, const RenderOptions& opts) {
    check_latents(identity, nuisance, attributes);
    const FaceParams p = face_params(identity, attributes);

    const double theta = nuisance.pose_deg * 3.14159265358979323846 / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double txu = nuisance.translate_x / 32.0;
    const double tyu = nuisance.translate_y / 32.0;

    ImageSample s;
    s.identity = identity;
    s.nuisance = nuisance;
    s.attributes = attributes;
    s.pixels = Image(kImageSide, kImageSide, 3);

    auto noise_eng = rng::engine(rng::derive(nuisance.noise_seed, "pixel-noise"));
    const double amp = opts.noise_amplitude;

    for (int py = 0; py < kImageSide; ++py) {
        for (int px = 0; px < kImageSide; ++px) {
            const double x = (px + 0.5 - 32.0) / 32.0 - txu;
            const double y = (py + 0.5 - 32.0) / 32.0 - tyu;
            const double u = ct * x + st * y;
            const double v = -st * x + ct * y;
            const Rgb c = shade(p, u, v);
            const double g = nuisance.lighting_gain;
            double rgb[3] = {g * c.r, g * c.g, g * c.b};
            for (int ch = 0; ch < 3; ++ch) {
                double val = rgb[ch];
                if (amp > 0.0) val += amp * rng::uniform(noise_eng, -1.0, 1.0);
                s.pixels.at(py, px, ch) = static_cast<float>(std::clamp(val, 0.0, 1.0));
            }
        }
    }
    return s;
}

std::vector<std::size_t> Dataset::train_indices() const {
    std::set<int> train(manifest.train_ids.begin(), manifest.train_ids.end());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < items.size(); ++i)
        if (train.count(items[i].identity)) out.push_back(i);
    return out;
}

std::vector<std::size_t> Dataset::val_indices() const {
    std::set<int> val(manifest.val_ids.begin(), manifest.val_ids.end());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < items.size(); ++i)
        if (val.count(items[i].identity)) out.push_back(i);
    return out;
}

const DatasetItem& Dataset::by_sample_id(const std::string& id) const {
    for (const auto& it : items)
        if (it.sample_id == id) return it;
    throw Error("sample_id not found: " + id);
}

Dataset generate_corpus(const CorpusManifest& manifest) {
    if (manifest.n_identities < 2) throw ConfigError("generate_corpus: n_identities must be >= 2");
    if (manifest.images_per_identity < 2)
        throw ConfigError("generate_corpus: images_per_identity must be >= 2");

    Dataset ds;
    ds.synthetic = true;
    ds.manifest = manifest;

    if (ds.manifest.train_ids.empty() && ds.manifest.val_ids.empty()) {
        // Default 80/20 identity split, deterministic in id order.
        const int n_train = static_cast<int>(std::lround(manifest.n_identities * 0.8));
        for (int id = 0; id < manifest.n_identities; ++id)
            (id < n_train ? ds.manifest.train_ids : ds.manifest.val_ids).push_back(id);
    }

    for (int id = 0; id < manifest.n_identities; ++id) {
        const IdentityLatent lat = sample_identity(manifest.seed, id);
        const SoftAttributes at = sample_attributes(manifest.seed, id);
        for (int k = 0; k < manifest.images_per_identity; ++k) {
            const NuisanceLatent nu = sample_nuisance(manifest.seed, id, k);
            ImageSample sample = render_face(lat, nu, at);
            DatasetItem item;
            item.sample_id = make_sample_id(id, k);
            item.identity = id;
            item.pixels = std::move(sample.pixels);
            item.attributes = at;
            item.identity_latent = lat;
            item.nuisance = nu;
            ds.items.push_back(std::move(item));
        }
    }
    return ds;
}

void write_corpus(const Dataset& ds, const std::filesystem::path& dir, bool overwrite) {
    namespace fs = std::filesystem;
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!overwrite) throw IoError("output directory exists (pass overwrite): " + dir.string());
        fs::remove_all(dir);
    }
    fs::create_directories(dir);

    json manifest;
    manifest["seed"] = ds.manifest.seed;
    manifest["n_identities"] = ds.manifest.n_identities;
    manifest["images_per_identity"] = ds.manifest.images_per_identity;
    manifest["split"] = {{"train", ds.manifest.train_ids}, {"val", ds.manifest.val_ids}};
    manifest["renderer_version"] = kRendererVersion;
    manifest["synthetic"] = ds.synthetic;

    json attrs;
    std::vector<std::string> ids;
    for (const auto& item : ds.items) {
        write_tensor(dir / (item.sample_id + ".flgt"), item.pixels.to_tensor());
        ids.push_back(item.sample_id);
        if (item.attributes) {
            attrs[item.sample_id] = {{"group", item.attributes->group},
                                     {"binary_attr", item.attributes->binary_attr},
                                     {"scalar_attr", item.attributes->scalar_attr}};
        }
        manifest["samples"][item.sample_id] = item.identity;
    }

    std::ofstream mf(dir / "manifest.json");
    mf << manifest.dump(2) << "\n";
    std::ofstream af(dir / "attributes.json");
    af << attrs.dump(2) << "\n";
}

Dataset generate_corpus_to(const CorpusManifest& manifest, const std::filesystem::path& dir,
                           bool overwrite) {
    Dataset ds = generate_corpus(manifest);
    write_corpus(ds, dir, overwrite);
    return ds;
}

Dataset load_corpus(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("corpus manifest missing: " + (dir / "manifest.json").string());
    json manifest = json::parse(mf);

    Dataset ds;
    ds.synthetic = manifest.value("synthetic", false);
    ds.manifest.seed = manifest.value("seed", 0ULL);
    ds.manifest.n_identities = manifest.value("n_identities", 0);
    ds.manifest.images_per_identity = manifest.value("images_per_identity", 0);
    ds.manifest.train_ids = manifest["split"]["train"].get<std::vector<int>>();
    ds.manifest.val_ids = manifest["split"]["val"].get<std::vector<int>>();

    json attrs;
    if (std::ifstream af(dir / "attributes.json"); af) attrs = json::parse(af);

    // Samples in manifest order (std::map keys: lexicographic = id order).
    for (const auto& [sid, ident] : manifest["samples"].items()) {
        DatasetItem item;
        item.sample_id = sid;
        item.identity = ident.get<int>();
        item.pixels = Image::from_tensor(read_tensor(dir / (sid + ".flgt")));
        if (attrs.contains(sid)) {
            SoftAttributes at;
            at.group = attrs[sid]["group"].get<int>();
            at.binary_attr = attrs[sid]["binary_attr"].get<int>();
            at.scalar_attr = attrs[sid]["scalar_attr"].get<double>();
            item.attributes = at;
        }
        if (ds.synthetic) {
            item.identity_latent = sample_identity(ds.manifest.seed, item.identity);
            // image index parses from the trailing _sNNN of the sample id
            const auto pos = sid.rfind("_s");
            const int k = std::stoi(sid.substr(pos + 2));
            item.nuisance = sample_nuisance(ds.manifest.seed, item.identity, k);
        }
        ds.items.push_back(std::move(item));
    }
    return ds;
}

Dataset ingest_external(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::exists(dir)) throw IoError("ingest directory does not exist: " + dir.string());

    Dataset ds;
    ds.synthetic = false;

    std::map<std::string, int> label_map;
    std::vector<fs::path> id_dirs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) id_dirs.push_back(e.path());
    std::sort(id_dirs.begin(), id_dirs.end());

    for (const auto& id_dir : id_dirs) {
        const std::string label = id_dir.filename().string();
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(id_dir))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            try {
                Image img = read_png(f);
                if (img.h != kImageSide || img.w != kImageSide)
                    img = center_crop_resize(img, kImageSide);
                if (!label_map.count(label)) {
                    const int next = static_cast<int>(label_map.size());
                    label_map[label] = next;
                }
                DatasetItem item;
                item.sample_id = label + "_" + f.filename().string();
                item.identity = label_map[label];
                item.pixels = std::move(img);
                ds.items.push_back(std::move(item));
            } catch (const Error& e) {
                ds.warnings.push_back("skipped " + f.string() + ": " + e.what());
            }
        }
    }
    if (ds.items.empty()) throw IoError("ingest: zero samples loaded from " + dir.string());

    ds.manifest.seed = 0;
    ds.manifest.n_identities = static_cast<int>(label_map.size());
    ds.manifest.images_per_identity = 0;
    for (const auto& [label, id] : label_map) ds.manifest.train_ids.push_back(id);
    return ds;
}

}  // namespace idleak::corpus

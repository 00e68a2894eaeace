#include "rsnas/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

namespace rsnas {

namespace {

constexpr double kPi = 3.14159265358979323846;

float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

} // namespace

// ---- scenes ----

float box_iou(const BoxF& a, const BoxF& b) {
    float iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    float ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0f || ih <= 0.0f) return 0.0f;
    float inter = iw * ih;
    return inter / (a.area() + b.area() - inter);
}

void SceneConfig::validate() const {
    if (image_size < 16 || image_size % 4 != 0)
        throw ConfigError(cat("scene config: image_size ", image_size,
                              " must be a multiple of 4 and at least 16"));
    if (c0 < 1) throw ConfigError("scene config: c0 must be at least 1");
    if (num_classes < 1) throw ConfigError("scene config: num_classes must be at least 1");
    if (!(min_side >= 2.0f) || !(max_side > min_side) ||
        !(max_side <= static_cast<float>(image_size)))
        throw ConfigError(cat("scene config: degenerate side range [", min_side, ", ", max_side,
                              "] for image size ", image_size));
    if (min_objects < 1 || max_objects < min_objects)
        throw ConfigError(cat("scene config: bad object count range [", min_objects, ", ",
                              max_objects, "]"));
}

float class_texture(int cls, int num_classes, float x, float y, float phase) {
    float theta = static_cast<float>(kPi) * static_cast<float>(cls) /
                  static_cast<float>(std::max(1, num_classes));
    float lambda = 3.0f + static_cast<float>(cls % 6);
    float freq = 2.0f * static_cast<float>(kPi) / lambda;
    float proj = std::cos(theta) * x + std::sin(theta) * y;
    return 0.5f + 0.4f * std::sin(freq * proj + phase);
}

namespace {

SyntheticScene render_scene(std::uint64_t seed, const SceneConfig& cfg) {
    SyntheticScene scene;
    scene.seed = seed;
    Rng rng(seed);
    const int s = cfg.image_size;
    scene.image = Tensor::zeros({1, cfg.c0, s, s});
    float* px0 = scene.image->data.data(); // channel 0; others copy it below

    for (int i = 0; i < s * s; ++i)
        px0[i] = clamp01(0.25f + 0.05f * static_cast<float>(rng.normal()));

    int count = rng.range(cfg.min_objects, cfg.max_objects);
    float log_lo = std::log(cfg.min_side), log_hi = std::log(cfg.max_side);
    for (int o = 0; o < count; ++o) {
        SceneObject obj;
        obj.cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
        obj.ellipse = rng.below(2) == 1;
        float w = std::exp(static_cast<float>(rng.uniform(log_lo, log_hi)));
        float h = std::exp(static_cast<float>(rng.uniform(log_lo, log_hi)));
        obj.box.x1 = static_cast<float>(rng.uniform(0.0, static_cast<double>(s) - w));
        obj.box.y1 = static_cast<float>(rng.uniform(0.0, static_cast<double>(s) - h));
        obj.box.x2 = obj.box.x1 + w;
        obj.box.y2 = obj.box.y1 + h;
        float phase = static_cast<float>(rng.uniform(0.0, 2.0 * kPi));
        float cx = 0.5f * (obj.box.x1 + obj.box.x2), cy = 0.5f * (obj.box.y1 + obj.box.y2);
        float rx = 0.5f * w, ry = 0.5f * h;

        int ix0 = std::max(0, static_cast<int>(std::floor(obj.box.x1)));
        int ix1 = std::min(s - 1, static_cast<int>(std::ceil(obj.box.x2)));
        int iy0 = std::max(0, static_cast<int>(std::floor(obj.box.y1)));
        int iy1 = std::min(s - 1, static_cast<int>(std::ceil(obj.box.y2)));
        for (int iy = iy0; iy <= iy1; ++iy) {
            for (int ix = ix0; ix <= ix1; ++ix) {
                float pcx = static_cast<float>(ix) + 0.5f, pcy = static_cast<float>(iy) + 0.5f;
                if (pcx <= obj.box.x1 || pcx >= obj.box.x2 || pcy <= obj.box.y1 ||
                    pcy >= obj.box.y2)
                    continue;
                if (obj.ellipse) {
                    float ex = (pcx - cx) / rx, ey = (pcy - cy) / ry;
                    if (ex * ex + ey * ey > 1.0f) continue;
                }
                float v = class_texture(obj.cls, cfg.num_classes, pcx, pcy, phase) +
                          0.05f * static_cast<float>(rng.normal());
                px0[iy * s + ix] = clamp01(v);
            }
        }
        scene.objects.push_back(obj);
    }
    for (int ch = 1; ch < cfg.c0; ++ch)
        std::memcpy(px0 + static_cast<std::size_t>(ch) * s * s, px0,
                    static_cast<std::size_t>(s) * s * sizeof(float));
    return scene;
}

} // namespace

std::vector<SyntheticScene> generate_detection_dataset(std::uint64_t seed, int n,
                                                       const SceneConfig& cfg) {
    cfg.validate();
    if (n < 1) throw ConfigError(cat("dataset: need at least one scene, got ", n));
    std::vector<SyntheticScene> scenes;
    scenes.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        scenes.push_back(render_scene(seed + static_cast<std::uint64_t>(i) + 1, cfg));
    return scenes;
}

void save_dataset(const std::vector<SyntheticScene>& scenes, const SceneConfig& cfg,
                  const std::string& dir) {
    cfg.validate();
    RSNAS_CHECK(!scenes.empty(), "save_dataset: empty scene list");
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    nlohmann::json index;
    index["version"] = 1;
    index["config"] = {{"image_size", cfg.image_size},   {"c0", cfg.c0},
                       {"min_side", cfg.min_side},       {"max_side", cfg.max_side},
                       {"num_classes", cfg.num_classes}, {"min_objects", cfg.min_objects},
                       {"max_objects", cfg.max_objects}};
    index["scenes"] = nlohmann::json::array();
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const SyntheticScene& sc = scenes[i];
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%05zu.bin", i);
        const auto* bytes = reinterpret_cast<const char*>(sc.image->data.data());
        std::size_t nbytes = sc.image->data.size() * sizeof(float);
        std::ofstream blob(fs::path(dir) / name, std::ios::binary);
        RSNAS_CHECK(blob.good(), "save_dataset: cannot write ", name);
        blob.write(bytes, static_cast<std::streamsize>(nbytes));
        blob.close();

        nlohmann::json entry;
        entry["file"] = name;
        entry["seed"] = sc.seed;
        entry["checksum"] = hex64(fnv1a64(bytes, nbytes));
        entry["objects"] = nlohmann::json::array();
        for (const SceneObject& obj : sc.objects)
            entry["objects"].push_back({{"cls", obj.cls},
                                        {"ellipse", obj.ellipse},
                                        {"box", {obj.box.x1, obj.box.y1, obj.box.x2, obj.box.y2}}});
        index["scenes"].push_back(entry);
    }
    std::ofstream out(fs::path(dir) / "index.json");
    RSNAS_CHECK(out.good(), "save_dataset: cannot write index.json");
    out << index.dump(2) << "\n";
}

std::vector<SyntheticScene> load_dataset(const std::string& dir, SceneConfig* cfg_out) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "index.json");
    if (!in.good()) throw ConfigError(cat("load_dataset: cannot open ", dir, "/index.json"));
    nlohmann::json index;
    try {
        in >> index;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(cat("load_dataset: bad index.json: ", e.what()));
    }
    try {
        if (index.at("version").get<int>() != 1)
            throw ConfigError("load_dataset: unsupported dataset version");
        const auto& jc = index.at("config");
        SceneConfig cfg;
        cfg.image_size = jc.at("image_size").get<int>();
        cfg.c0 = jc.at("c0").get<int>();
        cfg.min_side = jc.at("min_side").get<float>();
        cfg.max_side = jc.at("max_side").get<float>();
        cfg.num_classes = jc.at("num_classes").get<int>();
        cfg.min_objects = jc.at("min_objects").get<int>();
        cfg.max_objects = jc.at("max_objects").get<int>();
        cfg.validate();
        if (cfg_out) *cfg_out = cfg;

        std::vector<SyntheticScene> scenes;
        for (const auto& entry : index.at("scenes")) {
            std::string file = entry.at("file").get<std::string>();
            std::ifstream blob(fs::path(dir) / file, std::ios::binary | std::ios::ate);
            if (!blob.good()) throw ConfigError(cat("load_dataset: missing blob ", file));
            auto nbytes = static_cast<std::size_t>(blob.tellg());
            std::size_t expect = static_cast<std::size_t>(cfg.c0) * cfg.image_size *
                                 cfg.image_size * sizeof(float);
            if (nbytes != expect)
                throw ConfigError(cat("load_dataset: ", file, " holds ", nbytes,
                                      " bytes, expected ", expect));
            std::vector<float> values(nbytes / sizeof(float));
            blob.seekg(0);
            blob.read(reinterpret_cast<char*>(values.data()),
                      static_cast<std::streamsize>(nbytes));
            if (hex64(fnv1a64(values.data(), nbytes)) != entry.at("checksum").get<std::string>())
                throw ConfigError(cat("load_dataset: checksum mismatch for ", file));

            SyntheticScene sc;
            sc.seed = entry.at("seed").get<std::uint64_t>();
            sc.image = Tensor::from_vector({1, cfg.c0, cfg.image_size, cfg.image_size},
                                           std::move(values));
            for (const auto& jo : entry.at("objects")) {
                SceneObject obj;
                obj.cls = jo.at("cls").get<int>();
                obj.ellipse = jo.at("ellipse").get<bool>();
                const auto& jb = jo.at("box");
                obj.box = {jb.at(0).get<float>(), jb.at(1).get<float>(), jb.at(2).get<float>(),
                           jb.at(3).get<float>()};
                sc.objects.push_back(obj);
            }
            scenes.push_back(std::move(sc));
        }
        if (scenes.empty()) throw ConfigError("load_dataset: index lists no scenes");
        return scenes;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(cat("load_dataset: bad index.json: ", e.what()));
    }
}

// ---- target assignment ----

int DetectionTarget::foreground_count() const {
    return static_cast<int>(std::count_if(cls.begin(), cls.end(), [](int c) { return c >= 0; }));
}

DetectionTarget assign_fcos_targets(const SyntheticScene& scene, int stride) {
    RSNAS_CHECK(scene.image && scene.image->shape.n == 1, "assign_fcos_targets: bad scene image");
    RSNAS_CHECK(stride >= 1, "assign_fcos_targets: bad stride ", stride);
    int sh = scene.image->shape.h, sw = scene.image->shape.w;
    if (sh % stride != 0 || sw % stride != 0)
        throw ConfigError(cat("assign_fcos_targets: stride ", stride,
                              " does not divide image size ", sw, "x", sh));

    DetectionTarget tgt;
    tgt.stride = stride;
    tgt.hf = sh / stride;
    tgt.wf = sw / stride;
    std::size_t locs = static_cast<std::size_t>(tgt.hf) * tgt.wf;
    tgt.cls.assign(locs, -1);
    tgt.l.assign(locs, 0.0f);
    tgt.t.assign(locs, 0.0f);
    tgt.r.assign(locs, 0.0f);
    tgt.b.assign(locs, 0.0f);
    tgt.centerness.assign(locs, 0.0f);

    float fs = static_cast<float>(stride);
    for (int y = 0; y < tgt.hf; ++y) {
        for (int x = 0; x < tgt.wf; ++x) {
            float px = 0.5f * fs + static_cast<float>(x) * fs;
            float py = 0.5f * fs + static_cast<float>(y) * fs;
            float best_area = std::numeric_limits<float>::max();
            const SceneObject* best = nullptr;
            for (const SceneObject& obj : scene.objects) {
                const BoxF& bb = obj.box;
                if (!(px > bb.x1 && px < bb.x2 && py > bb.y1 && py < bb.y2)) continue;
                if (bb.area() < best_area) {
                    best_area = bb.area();
                    best = &obj;
                }
            }
            if (!best) continue;
            std::size_t i = static_cast<std::size_t>(y) * tgt.wf + x;
            tgt.cls[i] = best->cls;
            tgt.l[i] = (px - best->box.x1) / fs;
            tgt.t[i] = (py - best->box.y1) / fs;
            tgt.r[i] = (best->box.x2 - px) / fs;
            tgt.b[i] = (best->box.y2 - py) / fs;
            float lr_ratio = std::min(tgt.l[i], tgt.r[i]) / std::max(tgt.l[i], tgt.r[i]);
            float tb_ratio = std::min(tgt.t[i], tgt.b[i]) / std::max(tgt.t[i], tgt.b[i]);
            tgt.centerness[i] = std::sqrt(lr_ratio * tb_ratio);
        }
    }
    return tgt;
}

// ---- losses ----

DetectionLossTerms detection_loss_terms(const ModuleOutput& out,
                                        const std::vector<DetectionTarget>& targets) {
    RSNAS_CHECK(out.cls && out.box && out.centerness, "detection_loss: missing outputs");
    int batch = out.cls->shape.n, num_classes = out.cls->shape.c;
    int hf = out.cls->shape.h, wf = out.cls->shape.w;
    RSNAS_CHECK(static_cast<int>(targets.size()) == batch, "detection_loss: ", targets.size(),
                " targets for batch ", batch);
    RSNAS_CHECK((out.box->shape == Shape4{batch, 4, hf, wf}), "detection_loss: box shape ",
                out.box->shape.str());
    RSNAS_CHECK((out.centerness->shape == Shape4{batch, 1, hf, wf}),
                "detection_loss: centerness shape ", out.centerness->shape.str());

    Shape4 map_shape{batch, 1, hf, wf};
    auto pos = Tensor::zeros(out.cls->shape);
    auto neg = Tensor::full(out.cls->shape, 1.0f);
    auto fg = Tensor::zeros(map_shape);
    auto tl = Tensor::zeros(map_shape), tt = Tensor::zeros(map_shape);
    auto tr = Tensor::zeros(map_shape), tb = Tensor::zeros(map_shape);
    auto target_area = Tensor::zeros(map_shape);
    auto tc = Tensor::zeros(map_shape), tc_inv = Tensor::zeros(map_shape);
    auto tc_entropy = Tensor::zeros(map_shape);
    int foreground = 0;

    std::size_t locs = static_cast<std::size_t>(hf) * wf;
    for (int b = 0; b < batch; ++b) {
        const DetectionTarget& tgt = targets[static_cast<std::size_t>(b)];
        RSNAS_CHECK(tgt.hf == hf && tgt.wf == wf, "detection_loss: target grid ", tgt.wf, "x",
                    tgt.hf, " vs output ", wf, "x", hf);
        for (std::size_t i = 0; i < locs; ++i) {
            if (tgt.cls[i] < 0) continue;
            RSNAS_CHECK(tgt.cls[i] < num_classes, "detection_loss: class ", tgt.cls[i],
                        " out of range");
            ++foreground;
            std::size_t base = static_cast<std::size_t>(b) * locs + i;
            pos->data[static_cast<std::size_t>(b) * num_classes * locs +
                      static_cast<std::size_t>(tgt.cls[i]) * locs + i] = 1.0f;
            neg->data[static_cast<std::size_t>(b) * num_classes * locs +
                      static_cast<std::size_t>(tgt.cls[i]) * locs + i] = 0.0f;
            fg->data[base] = 1.0f;
            tl->data[base] = tgt.l[i];
            tt->data[base] = tgt.t[i];
            tr->data[base] = tgt.r[i];
            tb->data[base] = tgt.b[i];
            target_area->data[base] = (tgt.l[i] + tgt.r[i]) * (tgt.t[i] + tgt.b[i]);
            float ctr = tgt.centerness[i];
            tc->data[base] = ctr;
            tc_inv->data[base] = 1.0f - ctr;
            float ent = 0.0f; // t ln t + (1-t) ln(1-t), with 0 ln 0 = 0
            if (ctr > 0.0f) ent += ctr * std::log(ctr);
            if (ctr < 1.0f) ent += (1.0f - ctr) * std::log(1.0f - ctr);
            tc_entropy->data[base] = ent;
        }
    }

    DetectionLossTerms terms;
    terms.foreground = foreground;

    // Sigmoid focal loss, gamma 2, alpha 0.25, summed over every location.
    auto prob = sigmoid(out.cls);
    auto one_k = Tensor::full(prob->shape, 1.0f);
    auto inv_prob = sub(one_k, prob);
    auto pos_term = sum_all(mul(pos, mul(mul(inv_prob, inv_prob), log(prob))));
    auto neg_term = sum_all(mul(neg, mul(mul(prob, prob), log(inv_prob))));
    terms.focal = add(scale(pos_term, -0.25f), scale(neg_term, -0.75f));

    // -ln IoU between exp-decoded distances and targets, foreground only.
    // min(a, c) for constant c is c - relu(c - a), which keeps autodiff happy.
    auto decoded = [&](int ch) {
        return exp(clamp(channel_slice(out.box, ch, ch + 1), -8.0f, 8.0f));
    };
    auto min_const = [](const TensorPtr& a, const TensorPtr& c) {
        return sub(c, relu(sub(c, a)));
    };
    auto dl = decoded(0), dt = decoded(1), dr = decoded(2), db = decoded(3);
    auto inter_w = add(min_const(dl, tl), min_const(dr, tr));
    auto inter_h = add(min_const(dt, tt), min_const(db, tb));
    auto inter = mul(inter_w, inter_h);
    auto pred_area = mul(add(dl, dr), add(dt, db));
    auto union_area = add(sub(add(pred_area, target_area), inter),
                          Tensor::full(map_shape, 1e-9f));
    terms.iou = scale(sum_all(mul(fg, log(div(inter, union_area)))), -1.0f);

    // Centerness BCE in KL form (zero at an exact match), foreground only.
    auto pc = sigmoid(out.centerness);
    auto one_1 = Tensor::full(map_shape, 1.0f);
    auto cross = add(mul(tc, log(pc)), mul(tc_inv, log(sub(one_1, pc))));
    terms.centerness = sum_all(mul(fg, sub(tc_entropy, cross)));
    return terms;
}

TensorPtr detection_loss(const ModuleOutput& out, const std::vector<DetectionTarget>& targets) {
    DetectionLossTerms terms = detection_loss_terms(out, targets);
    auto total = add(add(terms.focal, terms.iou), terms.centerness);
    return scale(total, 1.0f / static_cast<float>(std::max(1, terms.foreground)));
}

// ---- detector ----

DetectionStem DetectionStem::make(int c0, int c, Rng& rng) {
    DetectionStem stem;
    stem.conv1 = ConvUnit::standard(c0, c, 3, 2, 1, true, true, false, rng);
    stem.conv2 = ConvUnit::standard(c, c, 3, 2, 1, true, true, false, rng);
    return stem;
}

TensorPtr DetectionStem::forward(const TensorPtr& image) const {
    return conv2.forward(conv1.forward(image));
}

void DetectionStem::register_params(ParamStore& store, const std::string& prefix) const {
    conv1.register_params(store, prefix + "/s0");
    conv2.register_params(store, prefix + "/s1");
}

std::int64_t DetectionStem::param_count() const {
    return conv1.param_count() + conv2.param_count();
}

DetectionModel::DetectionModel(const Genotype& genotype, const SupernetConfig& cfg, int c0,
                               Rng& rng)
    : stem_(DetectionStem::make(c0, cfg.c, rng)), net_(genotype, cfg, rng) {}

ModuleOutput DetectionModel::forward(const TensorPtr& image) {
    return net_.forward(stem_.forward(image));
}

void DetectionModel::register_params(ParamStore& store) const {
    stem_.register_params(store, "stem");
    net_.register_params(store);
}

std::int64_t DetectionModel::param_count() const {
    return stem_.param_count() + net_.param_count();
}

TensorPtr batch_images(const std::vector<SyntheticScene>& scenes, const std::vector<int>& idx) {
    RSNAS_CHECK(!idx.empty(), "batch_images: empty index list");
    const TensorPtr& first = scenes.at(static_cast<std::size_t>(idx[0])).image;
    Shape4 shape = first->shape;
    shape.n = static_cast<int>(idx.size());
    auto batch = Tensor::zeros(shape);
    std::size_t per = first->data.size();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const TensorPtr& img = scenes.at(static_cast<std::size_t>(idx[i])).image;
        RSNAS_CHECK((img->shape == first->shape), "batch_images: mixed shapes ",
                    img->shape.str(), " vs ", first->shape.str());
        std::memcpy(batch->data.data() + i * per, img->data.data(), per * sizeof(float));
    }
    return batch;
}

// ---- evaluation ----

namespace {

float sigmoidf(float v) {
    return v >= 0.0f ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
}

} // namespace

std::vector<Detection> decode_detections(const ModuleOutput& out, int batch_index, int stride,
                                         int image_size, float score_thresh, float nms_iou,
                                         int max_dets) {
    int num_classes = out.cls->shape.c, hf = out.cls->shape.h, wf = out.cls->shape.w;
    RSNAS_CHECK(batch_index >= 0 && batch_index < out.cls->shape.n,
                "decode_detections: batch index ", batch_index, " out of range");
    std::size_t locs = static_cast<std::size_t>(hf) * wf;
    const float* cls = out.cls->data.data() + static_cast<std::size_t>(batch_index) *
                                                  num_classes * locs;
    const float* box = out.box->data.data() + static_cast<std::size_t>(batch_index) * 4 * locs;
    const float* ctr = out.centerness->data.data() + static_cast<std::size_t>(batch_index) * locs;

    float fs = static_cast<float>(stride), size = static_cast<float>(image_size);
    std::vector<Detection> all;
    for (int y = 0; y < hf; ++y) {
        for (int x = 0; x < wf; ++x) {
            std::size_t i = static_cast<std::size_t>(y) * wf + x;
            float ctr_score = sigmoidf(ctr[i]);
            float px = 0.5f * fs + static_cast<float>(x) * fs;
            float py = 0.5f * fs + static_cast<float>(y) * fs;
            for (int k = 0; k < num_classes; ++k) {
                float score = sigmoidf(cls[static_cast<std::size_t>(k) * locs + i]) * ctr_score;
                if (score <= score_thresh) continue;
                auto dist = [&](int ch) {
                    float raw = box[static_cast<std::size_t>(ch) * locs + i];
                    return std::exp(std::clamp(raw, -8.0f, 8.0f)) * fs;
                };
                Detection det;
                det.cls = k;
                det.score = score;
                det.box = {std::max(0.0f, px - dist(0)), std::max(0.0f, py - dist(1)),
                           std::min(size, px + dist(2)), std::min(size, py + dist(3))};
                if (det.box.width() <= 0.0f || det.box.height() <= 0.0f) continue;
                all.push_back(det);
            }
        }
    }

    std::stable_sort(all.begin(), all.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> kept;
    for (const Detection& det : all) {
        bool suppressed = false;
        for (const Detection& k : kept)
            if (k.cls == det.cls && box_iou(k.box, det.box) > nms_iou) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(det);
    }
    if (static_cast<int>(kept.size()) > max_dets) kept.resize(static_cast<std::size_t>(max_dets));
    return kept;
}

double toy_ap(const std::vector<EvalExample>& examples, int num_classes, float iou_thresh) {
    RSNAS_CHECK(num_classes >= 1, "toy_ap: bad class count");
    double ap_sum = 0.0;
    int classes_with_gt = 0;
    for (int k = 0; k < num_classes; ++k) {
        int total_gt = 0;
        for (const EvalExample& ex : examples)
            for (const SceneObject& obj : ex.gt)
                if (obj.cls == k) ++total_gt;
        if (total_gt == 0) continue;
        ++classes_with_gt;

        struct Scored {
            float score;
            std::size_t example;
            const Detection* det;
        };
        std::vector<Scored> dets;
        for (std::size_t e = 0; e < examples.size(); ++e)
            for (const Detection& det : examples[e].dets)
                if (det.cls == k) dets.push_back({det.score, e, &det});
        std::stable_sort(dets.begin(), dets.end(),
                         [](const Scored& a, const Scored& b) { return a.score > b.score; });

        std::vector<std::vector<bool>> used(examples.size());
        for (std::size_t e = 0; e < examples.size(); ++e)
            used[e].assign(examples[e].gt.size(), false);

        std::vector<double> precision, recall;
        int tp = 0, fp = 0;
        for (const Scored& sd : dets) {
            const std::vector<SceneObject>& gt = examples[sd.example].gt;
            float best_iou = 0.0f;
            std::size_t best_g = 0;
            bool found = false;
            for (std::size_t g = 0; g < gt.size(); ++g) {
                if (gt[g].cls != k || used[sd.example][g]) continue;
                float ov = box_iou(sd.det->box, gt[g].box);
                if (ov > best_iou) {
                    best_iou = ov;
                    best_g = g;
                    found = true;
                }
            }
            if (found && best_iou >= iou_thresh) {
                used[sd.example][best_g] = true;
                ++tp;
            } else {
                ++fp;
            }
            precision.push_back(static_cast<double>(tp) / (tp + fp));
            recall.push_back(static_cast<double>(tp) / total_gt);
        }

        double ap = 0.0;
        for (int r = 0; r <= 10; ++r) {
            double level = r / 10.0, best = 0.0;
            for (std::size_t i = 0; i < precision.size(); ++i)
                if (recall[i] >= level - 1e-12) best = std::max(best, precision[i]);
            ap += best / 11.0;
        }
        ap_sum += ap;
    }
    return classes_with_gt == 0 ? 0.0 : ap_sum / classes_with_gt;
}

double evaluate_detection(DetectionModel& model, const std::vector<SyntheticScene>& scenes,
                          int num_classes) {
    RSNAS_CHECK(!scenes.empty(), "evaluate_detection: no scenes");
    NoGradGuard guard;
    std::vector<EvalExample> examples;
    for (const SyntheticScene& scene : scenes) {
        ModuleOutput out = model.forward(scene.image);
        EvalExample ex;
        ex.gt = scene.objects;
        ex.dets = decode_detections(out, 0, DetectionStem::kStride, scene.image->shape.w);
        examples.push_back(std::move(ex));
    }
    return toy_ap(examples, num_classes);
}

// ---- retraining ----

void TrainConfig::validate() const {
    if (iters < 0) throw ConfigError(cat("train config: negative iteration count ", iters));
    if (batch_size < 1) throw ConfigError("train config: batch_size must be positive");
    if (!(lr > 0.0f)) throw ConfigError("train config: lr must be positive");
    if (momentum < 0.0f || momentum >= 1.0f)
        throw ConfigError("train config: momentum must lie in [0, 1)");
    if (weight_decay < 0.0f) throw ConfigError("train config: negative weight decay");
    if (!(clip_max > 0.0f)) throw ConfigError("train config: clip_max must be positive");
    if (lr_decay_factor < 1.0f) throw ConfigError("train config: lr decay factor must be >= 1");
}

TrainResult train_derived(DetectionModel& model, const std::vector<SyntheticScene>& train_scenes,
                          const std::vector<SyntheticScene>& eval_scenes, const TrainConfig& cfg) {
    cfg.validate();
    RSNAS_CHECK(!train_scenes.empty(), "train_derived: no training scenes");

    ParamStore store;
    model.register_params(store);
    SgdOptimizer opt({cfg.lr, cfg.momentum, cfg.weight_decay}, ParamKind::Weight);

    std::vector<DetectionTarget> targets;
    targets.reserve(train_scenes.size());
    for (const SyntheticScene& scene : train_scenes)
        targets.push_back(assign_fcos_targets(scene, DetectionStem::kStride));

    int n = static_cast<int>(train_scenes.size());
    Rng order = Rng(cfg.seed).fork("batch-order");
    std::vector<int> pool(static_cast<std::size_t>(n));
    std::iota(pool.begin(), pool.end(), 0);

    TrainResult result;
    for (int it = 0; it < cfg.iters; ++it) {
        opt.set_lr(it >= cfg.lr_decay_iter ? cfg.lr / cfg.lr_decay_factor : cfg.lr);

        std::vector<int> idx;
        if (cfg.batch_size >= n) {
            idx = pool; // full batch, fixed order
        } else {
            for (int j = 0; j < cfg.batch_size; ++j) {
                int swap_at = j + static_cast<int>(order.below(static_cast<std::uint64_t>(n - j)));
                std::swap(pool[static_cast<std::size_t>(j)],
                          pool[static_cast<std::size_t>(swap_at)]);
            }
            idx.assign(pool.begin(), pool.begin() + cfg.batch_size);
        }
        std::vector<DetectionTarget> batch_targets;
        for (int i : idx) batch_targets.push_back(targets[static_cast<std::size_t>(i)]);

        zero_grads(store);
        ModuleOutput out = model.forward(batch_images(train_scenes, idx));
        TensorPtr loss = detection_loss(out, batch_targets);
        double value = static_cast<double>(loss->data[0]);
        if (!std::isfinite(value))
            throw NumericalError(cat("train_derived: loss is not finite at iteration ", it));
        backward(loss, store);
        clip_grad_norm(store, cfg.clip_max, ParamKind::Weight);
        opt.step(store);
        result.losses.push_back(value);
    }

    if (!eval_scenes.empty())
        result.metrics.ap = evaluate_detection(model, eval_scenes, model.config().num_classes);
    result.param_count = model.param_count();
    return result;
}

// ---- detection architecture search ----

void DetectionSearchConfig::validate() const {
    scenes.validate();
    schedule.validate();
    if (n_train < schedule.batch_size || n_val < schedule.batch_size)
        throw ConfigError(cat("detection search: dataset sizes ", n_train, "/", n_val,
                              " smaller than batch size ", schedule.batch_size));
    if (alpha_batch_size < 0 || alpha_batch_size > n_val)
        throw ConfigError(cat("detection search: alpha batch ", alpha_batch_size,
                              " must lie in [0, n_val=", n_val, "]"));
}

SearchResult detection_search(const DetectionSearchConfig& cfg, std::uint64_t seed,
                              ParamStore* final_params) {
    cfg.validate();
    Rng root(seed);
    auto train = generate_detection_dataset(root.fork("train-data").next_u64(), cfg.n_train,
                                            cfg.scenes);
    auto val = generate_detection_dataset(root.fork("val-data").next_u64(), cfg.n_val,
                                          cfg.scenes);
    std::vector<DetectionTarget> train_targets, val_targets;
    for (const SyntheticScene& s : train)
        train_targets.push_back(assign_fcos_targets(s, DetectionStem::kStride));
    for (const SyntheticScene& s : val)
        val_targets.push_back(assign_fcos_targets(s, DetectionStem::kStride));

    Rng init = root.fork("init");
    Supernet net(cfg.supernet, init);
    Rng stem_rng = root.fork("stem");
    DetectionStem stem = DetectionStem::make(cfg.scenes.c0, cfg.supernet.c, stem_rng);
    SearchDriver driver(net, cfg.schedule,
                        [&](ParamStore& s) { stem.register_params(s, "stem"); });

    Rng batcher = root.fork("batches");
    int alpha_batch = cfg.alpha_batch_size > 0 ? cfg.alpha_batch_size : cfg.schedule.batch_size;
    auto loss_fn = [&](Supernet& n, int, Split split) {
        bool is_val = split == Split::Val;
        const auto& scenes = is_val ? val : train;
        const auto& targets = is_val ? val_targets : train_targets;
        int size = is_val ? alpha_batch : cfg.schedule.batch_size;
        int total = static_cast<int>(scenes.size());
        std::vector<int> idx(static_cast<std::size_t>(std::min(size, total)));
        if (size >= total)
            std::iota(idx.begin(), idx.end(), 0);
        else
            for (int& i : idx) i = static_cast<int>(batcher.below(static_cast<std::uint64_t>(total)));
        std::vector<DetectionTarget> batch_targets;
        for (int i : idx) batch_targets.push_back(targets[static_cast<std::size_t>(i)]);
        return detection_loss(n.forward(stem.forward(batch_images(scenes, idx))), batch_targets);
    };
    SearchResult result = driver.run(loss_fn);
    if (final_params) *final_params = driver.params();
    return result;
}

// ---- classification mode ----

void ClassificationConfig::validate() const {
    if (image_size < 8 || image_size % 4 != 0)
        throw ConfigError(cat("classification config: image_size ", image_size,
                              " must be a multiple of 4 and at least 8"));
    if (c0 < 1) throw ConfigError("classification config: c0 must be at least 1");
    if (num_classes < 2) throw ConfigError("classification config: need at least 2 classes");
    if (noise < 0.0f) throw ConfigError("classification config: negative noise");
}

std::vector<LabeledImage> generate_classification_dataset(std::uint64_t seed, int n,
                                                          const ClassificationConfig& cfg) {
    cfg.validate();
    if (n < 1) throw ConfigError(cat("dataset: need at least one image, got ", n));
    std::vector<LabeledImage> images;
    images.reserve(static_cast<std::size_t>(n));
    const int s = cfg.image_size;
    for (int i = 0; i < n; ++i) {
        LabeledImage li;
        li.label = i % cfg.num_classes;
        li.seed = seed + static_cast<std::uint64_t>(i) + 1;
        Rng rng(li.seed);
        float phase = static_cast<float>(rng.uniform(0.0, 2.0 * kPi));
        li.image = Tensor::zeros({1, cfg.c0, s, s});
        float* px = li.image->data.data();
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                float v = class_texture(li.label, cfg.num_classes, static_cast<float>(x) + 0.5f,
                                        static_cast<float>(y) + 0.5f, phase) +
                          cfg.noise * static_cast<float>(rng.normal());
                px[y * s + x] = clamp01(v);
            }
        for (int ch = 1; ch < cfg.c0; ++ch)
            std::memcpy(px + static_cast<std::size_t>(ch) * s * s, px,
                        static_cast<std::size_t>(s) * s * sizeof(float));
        images.push_back(std::move(li));
    }
    return images;
}

const char* const kReductionNames[3] = {"max_pool", "avg_pool", "skip2"};

ClassificationSupernet::ClassificationSupernet(const SupernetConfig& cfg, int c0, Rng& rng)
    : cfg_(cfg),
      alphas_(CandidateSet::for_variants(cfg.variant_max).size()),
      reduce_alpha_(Tensor::zeros({1, 3, 1, 1}, true)),
      stem_(ConvUnit::standard(c0, cfg.c, 3, 2, 1, true, true, false, rng)),
      head_(make_prediction_head(cfg.c, cfg.num_classes, 0.0f, rng)) {
    RSNAS_CHECK(cfg.M >= 1, "classification supernet: M must be at least 1");
    // Width-1 norm groups make every channel's spatial statistics constant, so
    // nothing would survive the global average pool in front of the head.
    if (pick_gn_groups(cfg.c) >= cfg.c)
        throw ConfigError(cat("classification supernet: c=", cfg.c,
                              " normalizes channels individually; pick c with at least 2 "
                              "channels per norm group"));
    cells_.reserve(AlphaTable::kGroups);
    for (int g = 0; g < AlphaTable::kGroups; ++g)
        cells_.emplace_back(cfg.c, cfg.c_prime, cfg.variant_max, cfg.decouple,
                            cfg.unshared_blocks, rng);
}

TensorPtr ClassificationSupernet::logits(const TensorPtr& images) {
    RSNAS_CHECK(images->shape.h % 4 == 0 && images->shape.w % 4 == 0,
                "classification supernet: input size must be a multiple of 4, got ",
                images->shape.str());
    TensorPtr h = stem_.forward(images);
    for (int m = 0; m < cfg_.M; ++m) h = cells_[0].forward(h, alphas_, 0);
    h = weighted_sum({max_pool2(h), avg_pool2(h), subsample2(h)},
                     softmax_channels(reduce_alpha_));
    for (int m = 0; m < cfg_.M; ++m) h = cells_[1].forward(h, alphas_, 1);
    return head_.forward(global_avg_pool(h));
}

int ClassificationSupernet::reduction_choice() const {
    int best = 0;
    for (int i = 1; i < 3; ++i)
        if (reduce_alpha_->data[static_cast<std::size_t>(i)] >
            reduce_alpha_->data[static_cast<std::size_t>(best)])
            best = i;
    return best;
}

void ClassificationSupernet::register_params(ParamStore& store) const {
    stem_.register_params(store, "net/stem");
    for (int g = 0; g < AlphaTable::kGroups; ++g)
        cells_[static_cast<std::size_t>(g)].register_params(store, cat("net/g", g));
    head_.register_params(store, "net/head");
    alphas_.register_params(store);
    store.add("alpha/reduce", reduce_alpha_, ParamKind::Architecture);
}

TensorPtr classification_loss(const TensorPtr& logits, const std::vector<int>& labels) {
    int batch = logits->shape.n, num_classes = logits->shape.c;
    RSNAS_CHECK(logits->shape.h == 1 && logits->shape.w == 1, "classification_loss: logits ",
                logits->shape.str());
    RSNAS_CHECK(static_cast<int>(labels.size()) == batch, "classification_loss: ", labels.size(),
                " labels for batch ", batch);
    auto onehot = Tensor::zeros(logits->shape);
    for (int b = 0; b < batch; ++b) {
        RSNAS_CHECK(labels[static_cast<std::size_t>(b)] >= 0 &&
                        labels[static_cast<std::size_t>(b)] < num_classes,
                    "classification_loss: label out of range");
        onehot->data[static_cast<std::size_t>(b) * num_classes +
                     static_cast<std::size_t>(labels[static_cast<std::size_t>(b)])] = 1.0f;
    }
    // One-vs-all BCE as softplus(x) - x * t, with logits clamped for stability.
    auto x = clamp(logits, -15.0f, 15.0f);
    auto softplus = log(add(exp(x), Tensor::full(logits->shape, 1.0f)));
    auto per = sub(softplus, mul(x, onehot));
    return scale(sum_all(per), 1.0f / static_cast<float>(batch * num_classes));
}

double classification_accuracy(const TensorPtr& logits, const std::vector<int>& labels) {
    int batch = logits->shape.n, num_classes = logits->shape.c;
    RSNAS_CHECK(static_cast<int>(labels.size()) == batch, "classification_accuracy: ",
                labels.size(), " labels for batch ", batch);
    int correct = 0;
    for (int b = 0; b < batch; ++b) {
        int best = 0;
        for (int k = 1; k < num_classes; ++k)
            if (logits->data[static_cast<std::size_t>(b) * num_classes + k] >
                logits->data[static_cast<std::size_t>(b) * num_classes + best])
                best = k;
        if (best == labels[static_cast<std::size_t>(b)]) ++correct;
    }
    return static_cast<double>(correct) / batch;
}

TensorPtr batch_labeled_images(const std::vector<LabeledImage>& images,
                               const std::vector<int>& idx) {
    RSNAS_CHECK(!idx.empty(), "batch_labeled_images: empty index list");
    const TensorPtr& first = images.at(static_cast<std::size_t>(idx[0])).image;
    Shape4 shape = first->shape;
    shape.n = static_cast<int>(idx.size());
    auto batch = Tensor::zeros(shape);
    std::size_t per = first->data.size();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const TensorPtr& img = images.at(static_cast<std::size_t>(idx[i])).image;
        RSNAS_CHECK((img->shape == first->shape), "batch_labeled_images: mixed shapes");
        std::memcpy(batch->data.data() + i * per, img->data.data(), per * sizeof(float));
    }
    return batch;
}

double shared_trans_fraction(const std::vector<Genotype>& genotypes) {
    if (genotypes.empty()) throw ConfigError("shared_trans_fraction: no genotypes");
    std::int64_t shared = 0, total = 0;
    for (const Genotype& g : genotypes)
        for (const GenotypeGroup& group : g.groups)
            for (const GenotypeNode& node : group.nodes)
                for (const GenotypeInput& in : node.inputs) {
                    ++total;
                    if (!in.trans.none && (in.trans.variant == 1 || in.trans.variant == 2))
                        ++shared;
                }
    if (total == 0) throw ConfigError("shared_trans_fraction: genotypes select nothing");
    return static_cast<double>(shared) / static_cast<double>(total);
}

void ClassificationSearchConfig::validate() const {
    data.validate();
    schedule.validate();
    if (n_train < schedule.batch_size || n_val < schedule.batch_size)
        throw ConfigError(cat("classification search: dataset sizes ", n_train, "/", n_val,
                              " smaller than batch size ", schedule.batch_size));
    if (alpha_warmup_iters < 0 || alpha_warmup_iters >= schedule.total_iters)
        throw ConfigError(cat("classification search: alpha warmup ", alpha_warmup_iters,
                              " must lie in [0, ", schedule.total_iters, ")"));
    if (alpha_batch_size < 0 || alpha_batch_size > n_val)
        throw ConfigError(cat("classification search: alpha batch ", alpha_batch_size,
                              " must lie in [0, n_val=", n_val, "]"));
}

ClassificationSearchOutcome classification_search(const ClassificationSearchConfig& cfg,
                                                  bool decouple, std::uint64_t seed,
                                                  ParamStore* final_params) {
    cfg.validate();
    SupernetConfig net_cfg = cfg.supernet;
    net_cfg.decouple = decouple;
    net_cfg.num_classes = cfg.data.num_classes;

    Rng root(seed);
    auto train = generate_classification_dataset(root.fork("train-data").next_u64(), cfg.n_train,
                                                 cfg.data);
    auto val = generate_classification_dataset(root.fork("val-data").next_u64(), cfg.n_val,
                                               cfg.data);

    Rng init = root.fork("init");
    ClassificationSupernet net(net_cfg, cfg.data.c0, init);
    ParamStore store;
    net.register_params(store);
    AdamOptimizer alpha_opt({cfg.schedule.alpha_lr, cfg.schedule.alpha_beta1,
                             cfg.schedule.alpha_beta2, 1e-8f, cfg.schedule.alpha_weight_decay},
                            ParamKind::Architecture);
    SgdOptimizer w_opt({cfg.schedule.w_lr, cfg.schedule.w_momentum,
                        cfg.schedule.w_weight_decay},
                       ParamKind::Weight);

    Rng batches = root.fork("batches");
    auto draw = [&](int n, int size) {
        std::vector<int> idx(static_cast<std::size_t>(size));
        if (size >= n)
            std::iota(idx.begin(), idx.end(), 0);
        else
            for (int& i : idx) i = static_cast<int>(batches.below(static_cast<std::uint64_t>(n)));
        return idx;
    };
    int alpha_batch = cfg.alpha_batch_size > 0 ? cfg.alpha_batch_size : cfg.schedule.batch_size;
    auto step_loss = [&](const std::vector<LabeledImage>& split, const std::vector<int>& idx,
                         int it) {
        std::vector<int> labels;
        for (int i : idx) labels.push_back(split[static_cast<std::size_t>(i)].label);
        TensorPtr loss = classification_loss(net.logits(batch_labeled_images(split, idx)), labels);
        if (!std::isfinite(loss->data[0]))
            throw NumericalError(cat("classification_search: loss not finite at iteration ", it));
        return loss;
    };

    for (int it = 0; it < cfg.schedule.total_iters; ++it) {
        w_opt.set_lr(it >= cfg.schedule.w_lr_decay_iter
                         ? cfg.schedule.w_lr / cfg.schedule.w_lr_decay_factor
                         : cfg.schedule.w_lr);
        if (it >= cfg.alpha_warmup_iters) {
            zero_grads(store);
            backward(step_loss(val, draw(cfg.n_val, alpha_batch), it), store);
            alpha_opt.step(store);
        }

        zero_grads(store);
        backward(step_loss(train, draw(cfg.n_train, cfg.schedule.batch_size), it), store);
        clip_grad_norm(store, cfg.schedule.clip_max, ParamKind::Weight);
        w_opt.step(store);
    }

    ClassificationSearchOutcome outcome;
    outcome.genotype =
        derive_genotype(net.alphas(), CandidateSet::for_variants(net_cfg.variant_max));
    outcome.reduction_choice = net.reduction_choice();
    outcome.mean_alpha_entropy = net.alphas().mean_edge_entropy();

    NoGradGuard guard;
    double correct = 0.0;
    for (int start = 0; start < cfg.n_train; start += 32) {
        std::vector<int> idx, labels;
        for (int i = start; i < std::min(cfg.n_train, start + 32); ++i) {
            idx.push_back(i);
            labels.push_back(train[static_cast<std::size_t>(i)].label);
        }
        correct += classification_accuracy(net.logits(batch_labeled_images(train, idx)), labels) *
                   static_cast<double>(idx.size());
    }
    outcome.train_accuracy = correct / cfg.n_train;
    if (final_params) *final_params = store;
    return outcome;
}

AblationStats classification_mode_search(const ClassificationSearchConfig& cfg,
                                         int searches_per_arm, std::uint64_t base_seed) {
    if (searches_per_arm < 1)
        throw ConfigError("classification_mode_search: need at least one search per arm");
    AblationStats stats;
    for (int s = 0; s < searches_per_arm; ++s) {
        std::uint64_t seed = base_seed + static_cast<std::uint64_t>(s);
        auto dec = classification_search(cfg, true, seed);
        auto cou = classification_search(cfg, false, seed);
        stats.decoupled_genotypes.push_back(dec.genotype);
        stats.coupled_genotypes.push_back(cou.genotype);
        stats.decoupled_fractions.push_back(shared_trans_fraction({dec.genotype}));
        stats.coupled_fractions.push_back(shared_trans_fraction({cou.genotype}));
    }
    auto mean = [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    stats.mean_decoupled = mean(stats.decoupled_fractions);
    stats.mean_coupled = mean(stats.coupled_fractions);
    return stats;
}

} // namespace rsnas

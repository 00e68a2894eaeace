#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rsnas/search.hpp"

namespace rsnas {

// ---- synthetic detection scenes ----

struct BoxF {
    float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    float width() const { return x2 - x1; }
    float height() const { return y2 - y1; }
    float area() const { return width() * height(); }
};

float box_iou(const BoxF& a, const BoxF& b);

struct SceneObject {
    int cls = 0;
    BoxF box;
    bool ellipse = false;
};

struct SyntheticScene {
    TensorPtr image; // (1, c0, S, S), values in [0, 1]
    std::vector<SceneObject> objects;
    std::uint64_t seed = 0;
};

struct SceneConfig {
    int image_size = 64;
    int c0 = 1;
    float min_side = 6.0f;
    float max_side = 48.0f;
    int num_classes = 4;
    int min_objects = 1;
    int max_objects = 3;

    void validate() const;
};

// Class-dependent oriented sinusoid; what makes labels recoverable from pixels.
float class_texture(int cls, int num_classes, float x, float y, float phase);

std::vector<SyntheticScene> generate_detection_dataset(std::uint64_t seed, int n,
                                                       const SceneConfig& cfg = {});

// Cache layout: <dir>/index.json (config, per-scene seed/checksum/objects) +
// one raw float32 blob per scene. Loading verifies checksums.
void save_dataset(const std::vector<SyntheticScene>& scenes, const SceneConfig& cfg,
                  const std::string& dir);
std::vector<SyntheticScene> load_dataset(const std::string& dir, SceneConfig* cfg_out = nullptr);

// ---- target assignment ----

struct DetectionTarget {
    int stride = 4;
    int hf = 0, wf = 0;
    std::vector<int> cls;                // -1 background, else class id
    std::vector<float> l, t, r, b;       // stride units, foreground only
    std::vector<float> centerness;       // sqrt(min/max * min/max), fg only

    int foreground_count() const;
};

// Grid location (x, y) sits at pixel (s/2 + x*s, s/2 + y*s); it is foreground
// iff strictly inside a box (smallest area wins on overlap).
DetectionTarget assign_fcos_targets(const SyntheticScene& scene, int stride);

// ---- losses ----

struct DetectionLossTerms {
    TensorPtr focal;      // sigmoid focal loss, gamma 2 / alpha 0.25, all locations
    TensorPtr iou;        // -ln IoU of exp-decoded distances, foreground only
    TensorPtr centerness; // KL-form BCE (zero at exact match), foreground only
    int foreground = 0;
};

DetectionLossTerms detection_loss_terms(const ModuleOutput& out,
                                        const std::vector<DetectionTarget>& targets);
// (focal + iou + centerness) / max(1, foreground)
TensorPtr detection_loss(const ModuleOutput& out, const std::vector<DetectionTarget>& targets);

// ---- detector = stride-4 stem + module ----

struct DetectionStem {
    ConvUnit conv1, conv2; // 3x3 stride-2, GN + ReLU

    static constexpr int kStride = 4;

    static DetectionStem make(int c0, int c, Rng& rng);
    TensorPtr forward(const TensorPtr& image) const;
    void register_params(ParamStore& store, const std::string& prefix) const;
    std::int64_t param_count() const;
};

// Discrete detector for retraining a genotype.
class DetectionModel {
public:
    DetectionModel(const Genotype& genotype, const SupernetConfig& cfg, int c0, Rng& rng);

    ModuleOutput forward(const TensorPtr& image);
    void register_params(ParamStore& store) const;
    std::int64_t param_count() const;
    const SupernetConfig& config() const { return net_.config(); }

private:
    DetectionStem stem_;
    DerivedNetwork net_;
};

TensorPtr batch_images(const std::vector<SyntheticScene>& scenes, const std::vector<int>& idx);

// ---- evaluation ----

struct Detection {
    int cls = 0;
    float score = 0;
    BoxF box;
};

// Per-location class scores (cls * centerness, both sigmoided) above
// `score_thresh`, greedy per-class NMS, top `max_dets` by score.
std::vector<Detection> decode_detections(const ModuleOutput& out, int batch_index, int stride,
                                         int image_size, float score_thresh = 0.05f,
                                         float nms_iou = 0.5f, int max_dets = 50);

struct EvalExample {
    std::vector<SceneObject> gt;
    std::vector<Detection> dets;
};

// 11-point interpolated AP at the given IoU, averaged over classes with
// ground truth.
double toy_ap(const std::vector<EvalExample>& examples, int num_classes, float iou_thresh = 0.5f);

double evaluate_detection(DetectionModel& model, const std::vector<SyntheticScene>& scenes,
                          int num_classes);

// ---- retraining ----

struct Metrics {
    double ap = 0.0;
    double accuracy = 0.0;
};

struct TrainConfig {
    int iters = 200;
    int batch_size = 4;
    float lr = 0.02f;
    float momentum = 0.9f;
    float weight_decay = 1e-4f;
    float clip_max = 20.0f;
    int lr_decay_iter = 160;
    float lr_decay_factor = 10.0f;
    std::uint64_t seed = 1;

    void validate() const;
};

struct TrainResult {
    std::vector<double> losses;
    Metrics metrics;
    std::int64_t param_count = 0;
};

TrainResult train_derived(DetectionModel& model, const std::vector<SyntheticScene>& train_scenes,
                          const std::vector<SyntheticScene>& eval_scenes, const TrainConfig& cfg);

// ---- detection architecture search ----

struct DetectionSearchConfig {
    SupernetConfig supernet;
    SceneConfig scenes;
    ScheduleConfig schedule;
    int n_train = 24;
    int n_val = 24;
    // Batch size for validation (alpha) steps; 0 uses schedule.batch_size.
    int alpha_batch_size = 0;

    void validate() const;
};

// Bilevel search on the synthetic detection task: a stride-4 stem feeds the
// supernet, and both train under the driver's weight optimizer. When
// `final_params` is given it receives the trained parameter store
// (checkpointing).
SearchResult detection_search(const DetectionSearchConfig& cfg, std::uint64_t seed,
                              ParamStore* final_params = nullptr);

// ---- classification mode (decoupling ablation) ----

struct LabeledImage {
    TensorPtr image; // (1, c0, S, S)
    int label = 0;
    std::uint64_t seed = 0;
};

struct ClassificationConfig {
    int image_size = 16;
    int c0 = 1;
    int num_classes = 4;
    float noise = 0.1f;

    void validate() const;
};

// Balanced labels (i mod K); full-canvas class texture with random phase.
std::vector<LabeledImage> generate_classification_dataset(std::uint64_t seed, int n,
                                                          const ClassificationConfig& cfg = {});

// Stride-2 stem, group-0 cells, one searchable stride-2 reduction
// (max-pool / avg-pool / strided skip under its own 3-way softmax), group-1
// cells, global average pool, linear classifier.
class ClassificationSupernet {
public:
    ClassificationSupernet(const SupernetConfig& cfg, int c0, Rng& rng);

    TensorPtr logits(const TensorPtr& images); // (B, K, 1, 1)

    AlphaTable& alphas() { return alphas_; }
    const AlphaTable& alphas() const { return alphas_; }
    const TensorPtr& reduction_logits() const { return reduce_alpha_; }
    int reduction_choice() const; // argmax; ties fall to the lowest index
    const SupernetConfig& config() const { return cfg_; }

    // Weights under "net/...", cell rows under "alpha/...", the reduction row
    // as "alpha/reduce".
    void register_params(ParamStore& store) const;

private:
    SupernetConfig cfg_;
    AlphaTable alphas_;
    TensorPtr reduce_alpha_; // (1, 3, 1, 1)
    ConvUnit stem_;
    std::vector<Cell> cells_; // one per group, evaluated M times
    Conv2dLayer head_;
};

extern const char* const kReductionNames[3];

// Mean one-vs-all BCE over (sample, class); labels index the true class.
TensorPtr classification_loss(const TensorPtr& logits, const std::vector<int>& labels);
double classification_accuracy(const TensorPtr& logits, const std::vector<int>& labels);

TensorPtr batch_labeled_images(const std::vector<LabeledImage>& images, const std::vector<int>& idx);

// Fraction of genotype selections using the stem-tap transformations t1/t2
// (either stream) over all selections.
double shared_trans_fraction(const std::vector<Genotype>& genotypes);

struct ClassificationSearchConfig {
    SupernetConfig supernet;     // variant_max 5; decouple set per arm
    ClassificationConfig data;
    ScheduleConfig schedule;
    int n_train = 96;
    int n_val = 96;
    // Weight-only iterations before alpha updates begin, so candidates are
    // judged on settled representations rather than their init.
    int alpha_warmup_iters = 0;
    // Batch size for alpha steps; 0 uses schedule.batch_size, n_val sweeps the
    // whole validation set (removes sampling noise from candidate rankings).
    int alpha_batch_size = 0;

    void validate() const;
};

struct ClassificationSearchOutcome {
    Genotype genotype;
    int reduction_choice = 0;
    double mean_alpha_entropy = 0.0;
    double train_accuracy = 0.0;
};

ClassificationSearchOutcome classification_search(const ClassificationSearchConfig& cfg,
                                                  bool decouple, std::uint64_t seed,
                                                  ParamStore* final_params = nullptr);

struct AblationStats {
    std::vector<double> decoupled_fractions, coupled_fractions;
    std::vector<Genotype> decoupled_genotypes, coupled_genotypes;
    double mean_decoupled = 0.0, mean_coupled = 0.0;
};

// Paired seeds per arm; >= 1 search per arm.
AblationStats classification_mode_search(const ClassificationSearchConfig& cfg,
                                         int searches_per_arm, std::uint64_t base_seed);

} // namespace rsnas

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rsnas/oracle.hpp"
#include "rsnas/tasks.hpp"

using nlohmann::json;
using namespace rsnas;
namespace fs = std::filesystem;

namespace {

// Everything a subcommand can consume, flattened so the JSON config and the
// flags share one key space. Zeros in variant_max / image_size / n_train /
// n_val mean "task default", resolved once task is known.
struct RunConfig {
    std::string task = "detect";
    std::uint64_t seed = 1;
    std::string out = "runs/out";
    int c0 = 1;

    int M = 1;
    int c = 64;
    int c_prime = 24;
    bool decouple = true;
    bool unshared_blocks = false;
    int num_classes = 4;
    int variant_max = 0;

    ScheduleConfig schedule;

    int image_size = 0;
    float min_side = 6.0f;
    float max_side = 48.0f;
    int min_objects = 1;
    int max_objects = 3;
    float noise = 0.1f;
    int n_train = 0;
    int n_val = 0;
    int alpha_batch_size = 0;
    int alpha_warmup_iters = 0;

    TrainConfig train;
    int n_eval = 16;
};

void resolve_task_defaults(RunConfig& cfg) {
    if (cfg.task != "detect" && cfg.task != "classify")
        throw ConfigError(cat("config: task must be 'detect' or 'classify', got '", cfg.task, "'"));
    const bool detect = cfg.task == "detect";
    if (cfg.variant_max == 0) cfg.variant_max = detect ? 6 : 5;
    if (cfg.image_size == 0) cfg.image_size = detect ? 64 : 16;
    if (cfg.n_train == 0) cfg.n_train = detect ? 24 : 96;
    if (cfg.n_val == 0) cfg.n_val = detect ? 24 : 96;
}

void apply_json(RunConfig& cfg, const json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "task") cfg.task = value.get<std::string>();
            else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
            else if (key == "out") cfg.out = value.get<std::string>();
            else if (key == "c0") cfg.c0 = value.get<int>();
            else if (key == "M") cfg.M = value.get<int>();
            else if (key == "c") cfg.c = value.get<int>();
            else if (key == "c_prime") cfg.c_prime = value.get<int>();
            else if (key == "decouple") cfg.decouple = value.get<bool>();
            else if (key == "unshared_blocks") cfg.unshared_blocks = value.get<bool>();
            else if (key == "num_classes") cfg.num_classes = value.get<int>();
            else if (key == "variant_max") cfg.variant_max = value.get<int>();
            else if (key == "total_iters") cfg.schedule.total_iters = value.get<int>();
            else if (key == "derive_every") cfg.schedule.derive_every = value.get<int>();
            else if (key == "batch_size") cfg.schedule.batch_size = value.get<int>();
            else if (key == "w_lr") cfg.schedule.w_lr = value.get<float>();
            else if (key == "w_lr_decay_iter") cfg.schedule.w_lr_decay_iter = value.get<int>();
            else if (key == "w_lr_decay_factor") cfg.schedule.w_lr_decay_factor = value.get<float>();
            else if (key == "w_momentum") cfg.schedule.w_momentum = value.get<float>();
            else if (key == "w_weight_decay") cfg.schedule.w_weight_decay = value.get<float>();
            else if (key == "clip_max") cfg.schedule.clip_max = value.get<float>();
            else if (key == "alpha_lr") cfg.schedule.alpha_lr = value.get<float>();
            else if (key == "alpha_beta1") cfg.schedule.alpha_beta1 = value.get<float>();
            else if (key == "alpha_beta2") cfg.schedule.alpha_beta2 = value.get<float>();
            else if (key == "alpha_weight_decay")
                cfg.schedule.alpha_weight_decay = value.get<float>();
            else if (key == "val_fraction") cfg.schedule.val_fraction = value.get<float>();
            else if (key == "image_size") cfg.image_size = value.get<int>();
            else if (key == "min_side") cfg.min_side = value.get<float>();
            else if (key == "max_side") cfg.max_side = value.get<float>();
            else if (key == "min_objects") cfg.min_objects = value.get<int>();
            else if (key == "max_objects") cfg.max_objects = value.get<int>();
            else if (key == "noise") cfg.noise = value.get<float>();
            else if (key == "n_train") cfg.n_train = value.get<int>();
            else if (key == "n_val") cfg.n_val = value.get<int>();
            else if (key == "alpha_batch_size") cfg.alpha_batch_size = value.get<int>();
            else if (key == "alpha_warmup_iters") cfg.alpha_warmup_iters = value.get<int>();
            else if (key == "train_iters") cfg.train.iters = value.get<int>();
            else if (key == "train_batch_size") cfg.train.batch_size = value.get<int>();
            else if (key == "train_lr") cfg.train.lr = value.get<float>();
            else if (key == "train_momentum") cfg.train.momentum = value.get<float>();
            else if (key == "train_weight_decay") cfg.train.weight_decay = value.get<float>();
            else if (key == "train_clip_max") cfg.train.clip_max = value.get<float>();
            else if (key == "train_lr_decay_iter") cfg.train.lr_decay_iter = value.get<int>();
            else if (key == "train_lr_decay_factor")
                cfg.train.lr_decay_factor = value.get<float>();
            else if (key == "train_seed") cfg.train.seed = value.get<std::uint64_t>();
            else if (key == "n_eval") cfg.n_eval = value.get<int>();
            else throw ConfigError(cat("config: unknown key '", key, "'"));
        }
    } catch (const json::exception& e) {
        throw ConfigError(cat("config: ", e.what()));
    }
}

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(cat("cannot open ", path));
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(cat(path, ": ", e.what()));
    }
}

// Full resolved-config echo; keys match the accepted config schema so a
// metrics header can be replayed as a config file.
json config_json(const RunConfig& c) {
    return json{{"task", c.task},
                {"seed", c.seed},
                {"out", c.out},
                {"c0", c.c0},
                {"M", c.M},
                {"c", c.c},
                {"c_prime", c.c_prime},
                {"decouple", c.decouple},
                {"unshared_blocks", c.unshared_blocks},
                {"num_classes", c.num_classes},
                {"variant_max", c.variant_max},
                {"total_iters", c.schedule.total_iters},
                {"derive_every", c.schedule.derive_every},
                {"batch_size", c.schedule.batch_size},
                {"w_lr", c.schedule.w_lr},
                {"w_lr_decay_iter", c.schedule.w_lr_decay_iter},
                {"w_lr_decay_factor", c.schedule.w_lr_decay_factor},
                {"w_momentum", c.schedule.w_momentum},
                {"w_weight_decay", c.schedule.w_weight_decay},
                {"clip_max", c.schedule.clip_max},
                {"alpha_lr", c.schedule.alpha_lr},
                {"alpha_beta1", c.schedule.alpha_beta1},
                {"alpha_beta2", c.schedule.alpha_beta2},
                {"alpha_weight_decay", c.schedule.alpha_weight_decay},
                {"val_fraction", c.schedule.val_fraction},
                {"image_size", c.image_size},
                {"min_side", c.min_side},
                {"max_side", c.max_side},
                {"min_objects", c.min_objects},
                {"max_objects", c.max_objects},
                {"noise", c.noise},
                {"n_train", c.n_train},
                {"n_val", c.n_val},
                {"alpha_batch_size", c.alpha_batch_size},
                {"alpha_warmup_iters", c.alpha_warmup_iters},
                {"train_iters", c.train.iters},
                {"train_batch_size", c.train.batch_size},
                {"train_lr", c.train.lr},
                {"train_momentum", c.train.momentum},
                {"train_weight_decay", c.train.weight_decay},
                {"train_clip_max", c.train.clip_max},
                {"train_lr_decay_iter", c.train.lr_decay_iter},
                {"train_lr_decay_factor", c.train.lr_decay_factor},
                {"train_seed", c.train.seed},
                {"n_eval", c.n_eval}};
}

SupernetConfig supernet_config(const RunConfig& c) {
    SupernetConfig s;
    s.M = c.M;
    s.c = c.c;
    s.c_prime = c.c_prime;
    s.decouple = c.decouple;
    s.unshared_blocks = c.unshared_blocks;
    s.num_classes = c.num_classes;
    s.variant_max = c.variant_max;
    return s;
}

SceneConfig scene_config(const RunConfig& c) {
    SceneConfig s;
    s.image_size = c.image_size;
    s.c0 = c.c0;
    s.min_side = c.min_side;
    s.max_side = c.max_side;
    s.num_classes = c.num_classes;
    s.min_objects = c.min_objects;
    s.max_objects = c.max_objects;
    return s;
}

ClassificationConfig class_config(const RunConfig& c) {
    ClassificationConfig k;
    k.image_size = c.image_size;
    k.c0 = c.c0;
    k.num_classes = c.num_classes;
    k.noise = c.noise;
    return k;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError(cat("cannot write ", path.string()));
    out << text;
}

// Flags that were actually passed override file values; CLI11 binds them into
// `flags` regardless, so copy back selectively.
struct RunOptions {
    CLI::App* sub = nullptr;
    std::string config_path;
    RunConfig flags;

    RunConfig resolve() const {
        RunConfig cfg;
        if (!config_path.empty()) apply_json(cfg, load_json_file(config_path));
        auto passed = [&](const std::string& name) { return sub->count(name) > 0; };
        if (passed("--task")) cfg.task = flags.task;
        if (passed("--seed")) cfg.seed = flags.seed;
        if (passed("--out")) cfg.out = flags.out;
        if (passed("--c0")) cfg.c0 = flags.c0;
        if (passed("--M")) cfg.M = flags.M;
        if (passed("--c")) cfg.c = flags.c;
        if (passed("--c-prime")) cfg.c_prime = flags.c_prime;
        if (passed("--decouple")) cfg.decouple = flags.decouple;
        if (passed("--unshared-blocks")) cfg.unshared_blocks = flags.unshared_blocks;
        if (passed("--num-classes")) cfg.num_classes = flags.num_classes;
        if (passed("--variant-max")) cfg.variant_max = flags.variant_max;
        if (passed("--total-iters")) cfg.schedule.total_iters = flags.schedule.total_iters;
        if (passed("--derive-every")) cfg.schedule.derive_every = flags.schedule.derive_every;
        if (passed("--batch-size")) cfg.schedule.batch_size = flags.schedule.batch_size;
        if (passed("--w-lr")) cfg.schedule.w_lr = flags.schedule.w_lr;
        if (passed("--w-lr-decay-iter"))
            cfg.schedule.w_lr_decay_iter = flags.schedule.w_lr_decay_iter;
        if (passed("--w-lr-decay-factor"))
            cfg.schedule.w_lr_decay_factor = flags.schedule.w_lr_decay_factor;
        if (passed("--w-momentum")) cfg.schedule.w_momentum = flags.schedule.w_momentum;
        if (passed("--w-weight-decay"))
            cfg.schedule.w_weight_decay = flags.schedule.w_weight_decay;
        if (passed("--clip-max")) cfg.schedule.clip_max = flags.schedule.clip_max;
        if (passed("--alpha-lr")) cfg.schedule.alpha_lr = flags.schedule.alpha_lr;
        if (passed("--alpha-weight-decay"))
            cfg.schedule.alpha_weight_decay = flags.schedule.alpha_weight_decay;
        if (passed("--val-fraction")) cfg.schedule.val_fraction = flags.schedule.val_fraction;
        if (passed("--image-size")) cfg.image_size = flags.image_size;
        if (passed("--min-side")) cfg.min_side = flags.min_side;
        if (passed("--max-side")) cfg.max_side = flags.max_side;
        if (passed("--min-objects")) cfg.min_objects = flags.min_objects;
        if (passed("--max-objects")) cfg.max_objects = flags.max_objects;
        if (passed("--noise")) cfg.noise = flags.noise;
        if (passed("--n-train")) cfg.n_train = flags.n_train;
        if (passed("--n-val")) cfg.n_val = flags.n_val;
        if (passed("--alpha-batch-size")) cfg.alpha_batch_size = flags.alpha_batch_size;
        if (passed("--alpha-warmup-iters")) cfg.alpha_warmup_iters = flags.alpha_warmup_iters;
        if (passed("--train-iters")) cfg.train.iters = flags.train.iters;
        if (passed("--train-batch-size")) cfg.train.batch_size = flags.train.batch_size;
        if (passed("--train-lr")) cfg.train.lr = flags.train.lr;
        if (passed("--train-momentum")) cfg.train.momentum = flags.train.momentum;
        if (passed("--train-weight-decay")) cfg.train.weight_decay = flags.train.weight_decay;
        if (passed("--train-lr-decay-iter")) cfg.train.lr_decay_iter = flags.train.lr_decay_iter;
        if (passed("--train-seed")) cfg.train.seed = flags.train.seed;
        if (passed("--n-eval")) cfg.n_eval = flags.n_eval;
        resolve_task_defaults(cfg);
        return cfg;
    }
};

void add_run_options(CLI::App* sub, RunOptions& o) {
    o.sub = sub;
    RunConfig& f = o.flags;
    sub->add_option("--config", o.config_path, "JSON config file; flags override file values");
    sub->add_option("--task", f.task, "Task: detect or classify")->capture_default_str();
    sub->add_option("--seed", f.seed, "Root seed for all randomness")->capture_default_str();
    sub->add_option("--out", f.out, "Output directory")->capture_default_str();
    sub->add_option("--c0", f.c0, "Input image channels")->capture_default_str();
    sub->add_option("--M", f.M, "Cell repeats per group")->capture_default_str();
    sub->add_option("--c", f.c, "Cell channel width")->capture_default_str();
    sub->add_option("--c-prime", f.c_prime, "Transformation block inner width")
        ->capture_default_str();
    sub->add_option("--decouple", f.decouple, "Adapter decoupling of shared representations")
        ->capture_default_str();
    sub->add_option("--unshared-blocks", f.unshared_blocks,
                    "Build edges with per-candidate (unshared) pipelines")
        ->capture_default_str();
    sub->add_option("--num-classes", f.num_classes, "Object / label classes")
        ->capture_default_str();
    sub->add_option("--variant-max", f.variant_max,
                    "Highest transformation variant (0 = task default: 6 detect, 5 classify)")
        ->capture_default_str();
    sub->add_option("--total-iters", f.schedule.total_iters, "Search iterations")
        ->capture_default_str();
    sub->add_option("--derive-every", f.schedule.derive_every,
                    "Derive a discrete architecture every N iterations")
        ->capture_default_str();
    sub->add_option("--batch-size", f.schedule.batch_size, "Search batch size")
        ->capture_default_str();
    sub->add_option("--w-lr", f.schedule.w_lr, "Weight learning rate")->capture_default_str();
    sub->add_option("--w-lr-decay-iter", f.schedule.w_lr_decay_iter,
                    "Iteration at which the weight lr divides by the decay factor")
        ->capture_default_str();
    sub->add_option("--w-lr-decay-factor", f.schedule.w_lr_decay_factor, "Weight lr decay factor")
        ->capture_default_str();
    sub->add_option("--w-momentum", f.schedule.w_momentum, "Weight SGD momentum")
        ->capture_default_str();
    sub->add_option("--w-weight-decay", f.schedule.w_weight_decay, "Weight decay (weights)")
        ->capture_default_str();
    sub->add_option("--clip-max", f.schedule.clip_max, "Gradient clip (global L2, weights)")
        ->capture_default_str();
    sub->add_option("--alpha-lr", f.schedule.alpha_lr, "Architecture (Adam) learning rate")
        ->capture_default_str();
    sub->add_option("--alpha-weight-decay", f.schedule.alpha_weight_decay,
                    "Weight decay (architecture logits)")
        ->capture_default_str();
    sub->add_option("--val-fraction", f.schedule.val_fraction, "Validation share of the budget")
        ->capture_default_str();
    sub->add_option("--image-size", f.image_size,
                    "Square image size (0 = task default: 64 detect, 16 classify)")
        ->capture_default_str();
    sub->add_option("--min-side", f.min_side, "Smallest object side, pixels")
        ->capture_default_str();
    sub->add_option("--max-side", f.max_side, "Largest object side, pixels")
        ->capture_default_str();
    sub->add_option("--min-objects", f.min_objects, "Minimum objects per scene")
        ->capture_default_str();
    sub->add_option("--max-objects", f.max_objects, "Maximum objects per scene")
        ->capture_default_str();
    sub->add_option("--noise", f.noise, "Classification texture noise stddev")
        ->capture_default_str();
    sub->add_option("--n-train", f.n_train,
                    "Training set size (0 = task default: 24 detect, 96 classify)")
        ->capture_default_str();
    sub->add_option("--n-val", f.n_val,
                    "Validation set size (0 = task default: 24 detect, 96 classify)")
        ->capture_default_str();
    sub->add_option("--alpha-batch-size", f.alpha_batch_size,
                    "Validation batch for alpha steps (0 = search batch size)")
        ->capture_default_str();
    sub->add_option("--alpha-warmup-iters", f.alpha_warmup_iters,
                    "Weight-only iterations before alpha updates (classify task)")
        ->capture_default_str();
    sub->add_option("--train-iters", f.train.iters, "Retraining iterations")
        ->capture_default_str();
    sub->add_option("--train-batch-size", f.train.batch_size, "Retraining batch size")
        ->capture_default_str();
    sub->add_option("--train-lr", f.train.lr, "Retraining learning rate")->capture_default_str();
    sub->add_option("--train-momentum", f.train.momentum, "Retraining SGD momentum")
        ->capture_default_str();
    sub->add_option("--train-weight-decay", f.train.weight_decay, "Retraining weight decay")
        ->capture_default_str();
    sub->add_option("--train-lr-decay-iter", f.train.lr_decay_iter,
                    "Retraining lr decay iteration")
        ->capture_default_str();
    sub->add_option("--train-seed", f.train.seed, "Retraining batch-order seed")
        ->capture_default_str();
    sub->add_option("--n-eval", f.n_eval, "Held-out scenes for the final AP eval")
        ->capture_default_str();
}

// ---- search ----

int cmd_search(const RunConfig& cfg) {
    fs::create_directories(cfg.out);
    const fs::path dir(cfg.out);
    std::ostringstream metrics;
    metrics << json{{"config", config_json(cfg)}}.dump() << "\n";

    std::string genotype_text;
    ParamStore params;
    if (cfg.task == "detect") {
        DetectionSearchConfig d;
        d.supernet = supernet_config(cfg);
        d.scenes = scene_config(cfg);
        d.schedule = cfg.schedule;
        d.n_train = cfg.n_train;
        d.n_val = cfg.n_val;
        d.alpha_batch_size = cfg.alpha_batch_size;
        SearchResult res = detection_search(d, cfg.seed, &params);
        genotype_text = serialize_genotype(res.genotype);
        for (const SearchRecord& r : res.records)
            metrics << json{{"iter", r.iter},
                            {"L_train", r.l_train},
                            {"L_val", r.l_val},
                            {"alpha_entropy_per_edge", r.alpha_entropy_per_edge},
                            {"grad_norm_pre_clip", r.grad_norm_pre_clip}}
                               .dump()
                    << "\n";
        metrics << json{{"final", true},
                        {"iters_run", res.iters_run},
                        {"converged_early", res.converged_early},
                        {"derivations", res.history.size()}}
                           .dump()
                << "\n";
        std::printf("search: iters_run=%d converged_early=%s derivations=%zu\n", res.iters_run,
                    res.converged_early ? "true" : "false", res.history.size());
    } else {
        ClassificationSearchConfig k;
        k.supernet = supernet_config(cfg);
        k.data = class_config(cfg);
        k.schedule = cfg.schedule;
        k.n_train = cfg.n_train;
        k.n_val = cfg.n_val;
        k.alpha_warmup_iters = cfg.alpha_warmup_iters;
        k.alpha_batch_size = cfg.alpha_batch_size;
        auto outcome = classification_search(k, cfg.decouple, cfg.seed, &params);
        genotype_text = serialize_genotype(outcome.genotype);
        metrics << json{{"final", true},
                        {"shared_trans_fraction", shared_trans_fraction({outcome.genotype})},
                        {"reduction", kReductionNames[outcome.reduction_choice]},
                        {"mean_alpha_entropy", outcome.mean_alpha_entropy},
                        {"train_accuracy", outcome.train_accuracy}}
                           .dump()
                << "\n";
        std::printf("search: shared_trans_fraction=%.4f reduction=%s train_accuracy=%.4f\n",
                    shared_trans_fraction({outcome.genotype}),
                    kReductionNames[outcome.reduction_choice], outcome.train_accuracy);
    }

    write_text(dir / "genotype.json", genotype_text + "\n");
    write_text(dir / "metrics.jsonl", metrics.str());
    const json meta{{"task", cfg.task}, {"variant_max", cfg.variant_max}, {"seed", cfg.seed}};
    save_checkpoint((dir / "checkpoint.bin").string(), params, meta.dump());
    std::printf("wrote %s, metrics.jsonl, checkpoint.bin\n",
                (dir / "genotype.json").string().c_str());
    return 0;
}

// ---- derive ----

int cmd_derive(const std::string& checkpoint_path, const std::string& out_path) {
    std::string meta;
    auto entries = read_checkpoint(checkpoint_path, &meta);

    int k = -1;
    for (int g = 0; g < AlphaTable::kGroups; ++g)
        for (int e = 0; e < CellTopology::kEdges; ++e) {
            auto it = entries.find(cat("alpha/g", g, "/e", e));
            if (it == entries.end())
                throw ConfigError(cat(checkpoint_path, ": missing architecture row alpha/g", g,
                                      "/e", e));
            int row = static_cast<int>(it->second.values.size());
            if (k == -1) k = row;
            if (row != k)
                throw ConfigError(cat(checkpoint_path, ": inconsistent alpha row sizes ", k,
                                      " vs ", row));
        }
    if (k < 3 || k % 2 == 0 || (k - 1) / 2 > 6)
        throw ConfigError(cat(checkpoint_path, ": ", k,
                              " logits per edge do not match any candidate set"));

    AlphaTable table(k);
    for (int g = 0; g < AlphaTable::kGroups; ++g)
        for (int e = 0; e < CellTopology::kEdges; ++e)
            table.logits(g, e)->data = entries.at(cat("alpha/g", g, "/e", e)).values;

    const int variant_max = (k - 1) / 2;
    Genotype geno = derive_genotype(table, CandidateSet::for_variants(variant_max));
    const std::string text = serialize_genotype(geno);
    write_text(out_path, text + "\n");
    std::printf("%s\n", text.c_str());

    auto reduce = entries.find("alpha/reduce");
    if (reduce != entries.end() && reduce->second.values.size() == 3) {
        const auto& v = reduce->second.values;
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
        std::printf("reduction: %s\n", kReductionNames[best]);
    }
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
}

// ---- train ----

int cmd_train(const std::string& genotype_path, const RunConfig& cfg) {
    if (cfg.task != "detect")
        throw ConfigError("train: genotypes are retrained on the detection task");
    std::ifstream in(genotype_path);
    if (!in) throw ConfigError(cat("cannot open ", genotype_path));
    std::stringstream buf;
    buf << in.rdbuf();
    Genotype geno = parse_genotype(buf.str());

    Rng root(cfg.seed);
    SceneConfig scenes = scene_config(cfg);
    auto train_scenes =
        generate_detection_dataset(root.fork("train-data").next_u64(), cfg.n_train, scenes);
    auto eval_scenes =
        generate_detection_dataset(root.fork("eval-data").next_u64(), cfg.n_eval, scenes);
    Rng init = root.fork("init");
    DetectionModel model(geno, supernet_config(cfg), cfg.c0, init);

    TrainResult res = train_derived(model, train_scenes, eval_scenes, cfg.train);

    fs::create_directories(cfg.out);
    std::ostringstream metrics;
    metrics << json{{"config", config_json(cfg)},
                    {"genotype_file", genotype_path},
                    {"param_count", res.param_count}}
                       .dump()
            << "\n";
    for (std::size_t i = 0; i < res.losses.size(); ++i)
        metrics << json{{"iter", i}, {"loss", res.losses[i]}}.dump() << "\n";
    metrics << json{{"final", true}, {"ap", res.metrics.ap}, {"param_count", res.param_count}}
                       .dump()
            << "\n";
    write_text(fs::path(cfg.out) / "metrics.jsonl", metrics.str());

    std::printf("train: param_count=%lld final_ap=%.4f\n",
                static_cast<long long>(res.param_count), res.metrics.ap);
    return 0;
}

// ---- count ----

int cmd_count() {
    const std::uint64_t per_group = count_discrete_paths(CellTopology::kNodes, 12, 1);
    const std::uint64_t full = count_discrete_paths(CellTopology::kNodes, 12, AlphaTable::kGroups);
    const std::uint64_t reduced_closed = count_discrete_paths(2, 3, 1);
    const std::uint64_t reduced_enum = enumerate_discrete_paths(2, 3);

    std::printf("paths per group (3 nodes, 12 candidates): %llu\n",
                static_cast<unsigned long long>(per_group));
    std::printf("paths for 2 groups: %llu (~%.1e)\n", static_cast<unsigned long long>(full),
                static_cast<double>(full));
    std::printf("reduced space (2 nodes, 3 candidates): closed form %llu, enumeration %llu%s\n",
                static_cast<unsigned long long>(reduced_closed),
                static_cast<unsigned long long>(reduced_enum),
                reduced_closed == reduced_enum ? " (match)" : " (MISMATCH)");
    std::printf("paper reports ~2.3e13 unique paths; the topology counted here (one cell input, "
                "min(2, j) kept edges per node, 12 real candidates) yields ~%.1e. The published "
                "figure's node and edge bookkeeping is not stated, so no agreement is asserted.\n",
                static_cast<double>(full));
    return reduced_closed == reduced_enum ? 0 : 1;
}

// ---- verify ----

struct VerifyOptions {
    std::string inject = "none";
    std::uint64_t seed = 1;
    int trials = 30;
    int probes = 24;
    int c = 16;
    int c_prime = 8;
};

int cmd_verify(const VerifyOptions& opt) {
    int failures = 0;
    auto report = [&](bool ok, const std::string& line) {
        std::printf("[%s] %s\n", ok ? "ok" : "FAIL", line.c_str());
        if (!ok) ++failures;
    };

    // Representation census + instrumented forward counters.
    Rng rng(opt.seed);
    SharedBlock shared(opt.c, opt.c_prime, 6, /*decoupled=*/false, rng);
    UnsharedBlock unshared(opt.c, opt.c_prime, 6, rng);
    const int shared_count = count_representations(shared);
    const int unshared_count = count_representations(unshared);
    report(shared_count == 12 && unshared_count == 26,
           cat("representations shared=", shared_count, " unshared=", unshared_count));
    {
        Rng probe_rng(opt.seed + 1);
        auto x = Tensor::randn({1, opt.c, 8, 8}, probe_rng, 0.0f, 1.0f);
        NoGradGuard ng;
        auto xs = shared.entry_forward(x);
        auto xu = unshared.entry_forward(x);
        shared.reset_counters();
        unshared.reset_counters();
        shared.candidate_outputs(xs);
        unshared.candidate_outputs(xu);
        report(shared.representation_convs_run() == shared_count &&
                   unshared.representation_convs_run() == unshared_count,
               cat("forward conv counters: shared ran ", shared.representation_convs_run(),
                   ", unshared ran ", unshared.representation_convs_run()));
    }

    // Weight tying: all 12 candidates must agree to 1e-5.
    tie_weights(shared, unshared);
    if (opt.inject == "tie-perturb") {
        const TieMap map = make_tie_map(BlockTopology::for_variants(6));
        ConvUnit* unit = unshared.unit(map.bindings.begin()->first);
        if (!unit) throw ConfigError("tie-perturb: bound unit not found");
        unit->named_tensors("x").front().second->data[0] += 1e-2f;
    }
    EquivalenceReport eq = equivalence_check(shared, unshared, opt.trials, opt.seed + 2);
    report(eq.max_abs_diff <= 1e-5,
           cat("candidate equivalence over ", eq.trials, " trials: max |diff| = ",
               eq.max_abs_diff, " (tol 1e-5)"));

    // Module-level tying across two full supernets.
    {
        SupernetConfig cfg;
        cfg.M = 1;
        cfg.c = opt.c;
        cfg.c_prime = opt.c_prime;
        cfg.decouple = false;
        cfg.num_classes = 4;
        Rng ra(opt.seed + 3);
        Supernet a(cfg, ra);
        SupernetConfig ucfg = cfg;
        ucfg.unshared_blocks = true;
        Rng rb(opt.seed + 4);
        Supernet b(ucfg, rb);
        ParamStore sa, sb;
        a.register_params(sa);
        b.register_params(sb);
        tie_supernet_weights(sa, sb, make_tie_map(BlockTopology::for_variants(6)));
        const double diff = module_equivalence_check(a, b, 5, opt.seed + 5);
        report(diff <= 1e-4, cat("module equivalence over 5 trials: max |diff| = ", diff,
                                 " (tol 1e-4)"));
    }

    // Gradient audit through a full supernet.
    {
        SupernetConfig cfg;
        cfg.M = 1;
        cfg.c = 12;
        cfg.c_prime = 6;
        cfg.decouple = true;
        cfg.num_classes = 4;
        Rng rg(opt.seed + 6);
        Supernet net(cfg, rg);
        ParamStore store;
        net.register_params(store);
        if (opt.inject == "relu-backward") testing::set_relu_backward_fault(true);
        GradAuditReport audit =
            grad_check_supernet(net, store, opt.probes, 1e-3, opt.seed + 7);
        testing::set_relu_backward_fault(false);
        report(audit.passed(2e-2),
               cat("gradient audit over ", audit.probes, " probes (", audit.weight_probes, " w, ",
                   audit.alpha_probes, " alpha): worst finite-difference error ",
                   audit.worst_rel_err, " at ", audit.worst.param, "[", audit.worst.index,
                   "] (tol 2e-2)"));
    }

    // Path counting self-consistency on the enumerable space.
    {
        const std::uint64_t closed = count_discrete_paths(2, 3, 1);
        const std::uint64_t brute = enumerate_discrete_paths(2, 3);
        report(closed == brute, cat("path count closed form ", closed, " == enumeration ", brute));
    }

    if (failures == 0) {
        std::printf("verify: all checks passed\n");
        return 0;
    }
    std::printf("verify: %d check(s) failed\n", failures);
    return 1;
}

// ---- gen-data ----

int cmd_gen_data(const RunConfig& cfg, int n) {
    if (cfg.task != "detect")
        throw ConfigError("gen-data: only detection scenes have a cache format");
    auto scenes = generate_detection_dataset(cfg.seed, n, scene_config(cfg));
    save_dataset(scenes, scene_config(cfg), cfg.out);
    std::printf("wrote %d scenes to %s\n", n, cfg.out.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Differentiable architecture search over shared-representation "
                 "transformation blocks, with synthetic detection and classification tasks"};
    app.require_subcommand(1);

    RunOptions search_opt;
    CLI::App* search = app.add_subcommand(
        "search", "Bilevel architecture search; writes genotype.json, metrics.jsonl, "
                  "checkpoint.bin");
    add_run_options(search, search_opt);

    std::string derive_checkpoint, derive_out = "genotype.json";
    CLI::App* derive =
        app.add_subcommand("derive", "Re-derive the discrete genotype from a search checkpoint");
    derive->add_option("--checkpoint", derive_checkpoint, "Checkpoint written by `search`")
        ->required();
    derive->add_option("--out", derive_out, "Genotype output file")->capture_default_str();

    RunOptions train_opt;
    train_opt.flags.out = "runs/train";
    std::string train_genotype;
    CLI::App* train =
        app.add_subcommand("train", "Retrain a genotype from scratch on synthetic detection");
    train->add_option("--genotype", train_genotype, "Genotype JSON file")->required();
    add_run_options(train, train_opt);

    VerifyOptions verify_opt;
    CLI::App* verify = app.add_subcommand(
        "verify", "Run the oracle checks (census, tying equivalence, gradient audit, path "
                  "counts); nonzero exit on any violation");
    verify->add_option("--inject", verify_opt.inject, "Fault fixture to inject")
        ->check(CLI::IsMember({"none", "relu-backward", "tie-perturb"}))
        ->capture_default_str();
    verify->add_option("--seed", verify_opt.seed, "Probe seed")->capture_default_str();
    verify->add_option("--trials", verify_opt.trials, "Equivalence trials")
        ->capture_default_str();
    verify->add_option("--probes", verify_opt.probes, "Gradient audit probes")
        ->capture_default_str();
    verify->add_option("--c", verify_opt.c, "Block width for the checks")->capture_default_str();
    verify->add_option("--c-prime", verify_opt.c_prime, "Block inner width for the checks")
        ->capture_default_str();

    CLI::App* count = app.add_subcommand(
        "count", "Report discrete path counts (closed form + enumeration cross-check)");

    RunOptions gen_opt;
    gen_opt.flags.out = "runs/data";
    int gen_n = 32;
    CLI::App* gen = app.add_subcommand("gen-data", "Generate and cache synthetic scenes");
    gen->add_option("--n", gen_n, "Number of scenes")->capture_default_str();
    add_run_options(gen, gen_opt);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*search) return cmd_search(search_opt.resolve());
        if (*derive) return cmd_derive(derive_checkpoint, derive_out);
        if (*train) return cmd_train(train_genotype, train_opt.resolve());
        if (*verify) return cmd_verify(verify_opt);
        if (*count) return cmd_count();
        if (*gen) return cmd_gen_data(gen_opt.resolve(), gen_n);
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}

// Command-line driver: train a toy multi-stream model and emit the full
// analysis bundle (CKA reports, patch heatmaps, rescue matrices, routing
// statistics) as CSV/JSON plus standalone SVG figures. All outputs are
// byte-reproducible for a fixed seed.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mhc/checkpoint.hpp"
#include "mhc/cka.hpp"
#include "mhc/corpus.hpp"
#include "mhc/interventions.hpp"
#include "mhc/model.hpp"
#include "mhc/routing.hpp"
#include "mhc/svg.hpp"
#include "mhc/text_format.hpp"
#include "mhc/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace mhc;

namespace {

constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    std::vector<int> layers;                        // empty = all
    std::vector<std::pair<int, int>> stream_pairs;  // empty = all unordered pairs
    int prompt_count = 24;
    std::optional<std::uint64_t> seed;
    std::string mode;  // "", "ablate", "full_rescue", "patch", "self_patch"
};

struct AppConfig {
    std::uint64_t master_seed = 42;
    ModelConfig model;
    TrainConfig train;
    std::string corpus_path;  // empty: use the synthetic template corpus
    int corpus_sentences = 4000;
    double holdout_fraction = 0.1;
    std::optional<std::uint64_t> corpus_seed;
    int cka_samples = 2048;
    std::optional<std::uint64_t> cka_seed;
    ExperimentConfig experiment;

    std::uint64_t corpus_seed_resolved() const {
        return corpus_seed ? *corpus_seed : derive_seed(master_seed, "corpus");
    }
    std::uint64_t cka_seed_resolved() const {
        return cka_seed ? *cka_seed : derive_seed(master_seed, "sample");
    }
    std::uint64_t prompts_seed_resolved() const {
        return experiment.seed ? *experiment.seed : derive_seed(master_seed, "prompts");
    }
};

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& section) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* key : allowed) ok = ok || it.key() == key;
        if (!ok) throw config_error("unknown field \"" + section + "." + it.key() + "\" in config");
    }
}

template <typename T>
void read_field(const json& obj, const char* key, T& out, const std::string& section) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw config_error("field \"" + section + "." + key + "\" has the wrong type");
    }
}

ModelConfig parse_model_config(const json& j) {
    ModelConfig c;
    check_keys(j, {"layers", "streams", "model_dim", "heads", "head_dim", "vocab", "context",
                   "routing_mode", "seed"},
               "model");
    read_field(j, "layers", c.layers, "model");
    read_field(j, "streams", c.streams, "model");
    read_field(j, "model_dim", c.model_dim, "model");
    read_field(j, "heads", c.heads, "model");
    read_field(j, "head_dim", c.head_dim, "model");
    read_field(j, "vocab", c.vocab, "model");
    read_field(j, "context", c.context, "model");
    read_field(j, "seed", c.seed, "model");
    if (j.contains("routing_mode")) c.routing_mode = routing_mode_from_string(j.at("routing_mode"));
    return c;
}

TrainConfig parse_train_config(const json& j) {
    TrainConfig c;
    check_keys(j, {"lr_max", "lr_min", "warmup_steps", "total_steps", "weight_decay", "beta1", "beta2",
                   "clip_norm", "batch_tokens", "seed"},
               "train");
    read_field(j, "lr_max", c.lr_max, "train");
    read_field(j, "lr_min", c.lr_min, "train");
    read_field(j, "warmup_steps", c.warmup_steps, "train");
    read_field(j, "total_steps", c.total_steps, "train");
    read_field(j, "weight_decay", c.weight_decay, "train");
    read_field(j, "beta1", c.beta1, "train");
    read_field(j, "beta2", c.beta2, "train");
    read_field(j, "clip_norm", c.clip_norm, "train");
    read_field(j, "batch_tokens", c.batch_tokens, "train");
    read_field(j, "seed", c.seed, "train");
    return c;
}

ExperimentConfig parse_experiment_config(const json& j) {
    ExperimentConfig c;
    check_keys(j, {"layers", "stream_pairs", "prompt_count", "seed", "mode"}, "experiment");
    if (j.contains("layers") && j.at("layers") != "all") {
        try {
            c.layers = j.at("layers").get<std::vector<int>>();
        } catch (const json::exception&) {
            throw config_error("field \"experiment.layers\" must be \"all\" or an integer array");
        }
    }
    if (j.contains("stream_pairs") && j.at("stream_pairs") != "all") {
        try {
            for (const auto& p : j.at("stream_pairs")) {
                if (!p.is_array() || p.size() != 2)
                    throw config_error("field \"experiment.stream_pairs\" entries must be [i, j] pairs");
                c.stream_pairs.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
            }
        } catch (const json::exception&) {
            throw config_error("field \"experiment.stream_pairs\" must be \"all\" or an array of pairs");
        }
    }
    read_field(j, "prompt_count", c.prompt_count, "experiment");
    if (c.prompt_count < 1) throw config_error("field \"experiment.prompt_count\" must be >= 1");
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    read_field(j, "mode", c.mode, "experiment");
    if (!c.mode.empty() && c.mode != "ablate" && c.mode != "full_rescue" && c.mode != "patch" &&
        c.mode != "self_patch")
        throw config_error("field \"experiment.mode\" must be ablate, full_rescue, patch or self_patch");
    return c;
}

AppConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_flag) {
    AppConfig cfg;
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw io_error("cannot open config file: " + path);
        json j;
        try {
            j = json::parse(f);
        } catch (const json::exception& e) {
            throw config_error("config " + path + " is not valid JSON: " + std::string(e.what()));
        }
        check_keys(j, {"seed", "model", "train", "corpus_path", "corpus", "cka", "experiment"}, "config");
        read_field(j, "seed", cfg.master_seed, "config");
        if (j.contains("model")) cfg.model = parse_model_config(j.at("model"));
        if (j.contains("train")) cfg.train = parse_train_config(j.at("train"));
        read_field(j, "corpus_path", cfg.corpus_path, "config");
        if (j.contains("corpus")) {
            const auto& c = j.at("corpus");
            check_keys(c, {"sentences", "holdout_fraction", "seed"}, "corpus");
            read_field(c, "sentences", cfg.corpus_sentences, "corpus");
            read_field(c, "holdout_fraction", cfg.holdout_fraction, "corpus");
            if (c.contains("seed")) cfg.corpus_seed = c.at("seed").get<std::uint64_t>();
        }
        if (j.contains("cka")) {
            const auto& c = j.at("cka");
            check_keys(c, {"samples", "seed"}, "cka");
            read_field(c, "samples", cfg.cka_samples, "cka");
            if (c.contains("seed")) cfg.cka_seed = c.at("seed").get<std::uint64_t>();
        }
        if (j.contains("experiment")) cfg.experiment = parse_experiment_config(j.at("experiment"));
    }
    if (seed_flag) cfg.master_seed = *seed_flag;
    cfg.model.validate();
    cfg.train.validate();
    if (cfg.cka_samples < 1) throw config_error("field \"cka.samples\" must be >= 1");
    if (cfg.corpus_sentences < 1) throw config_error("field \"corpus.sentences\" must be >= 1");
    if (!(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0))
        throw config_error("field \"corpus.holdout_fraction\" must be in (0, 1)");
    return cfg;
}

json config_snapshot(const AppConfig& cfg) {
    json j;
    j["seed"] = cfg.master_seed;
    j["model"] = {{"layers", cfg.model.layers},
                  {"streams", cfg.model.streams},
                  {"model_dim", cfg.model.model_dim},
                  {"heads", cfg.model.heads},
                  {"head_dim", cfg.model.head_dim},
                  {"vocab", cfg.model.vocab},
                  {"context", cfg.model.context},
                  {"routing_mode", to_string(cfg.model.routing_mode)},
                  {"seed", cfg.model.seed}};
    j["train"] = {{"lr_max", cfg.train.lr_max},
                  {"lr_min", cfg.train.lr_min},
                  {"warmup_steps", cfg.train.warmup_steps},
                  {"total_steps", cfg.train.total_steps},
                  {"weight_decay", cfg.train.weight_decay},
                  {"beta1", cfg.train.beta1},
                  {"beta2", cfg.train.beta2},
                  {"clip_norm", cfg.train.clip_norm},
                  {"batch_tokens", cfg.train.batch_tokens},
                  {"seed", cfg.train.seed}};
    j["corpus"] = {{"path", cfg.corpus_path},
                   {"sentences", cfg.corpus_sentences},
                   {"holdout_fraction", cfg.holdout_fraction},
                   {"seed", cfg.corpus_seed_resolved()}};
    j["cka"] = {{"samples", cfg.cka_samples}, {"seed", cfg.cka_seed_resolved()}};
    json layers = cfg.experiment.layers.empty() ? json("all") : json(cfg.experiment.layers);
    json pairs;
    if (cfg.experiment.stream_pairs.empty()) {
        pairs = "all";
    } else {
        pairs = json::array();
        for (auto [a, b] : cfg.experiment.stream_pairs) pairs.push_back({a, b});
    }
    j["experiment"] = {{"layers", layers},
                       {"stream_pairs", pairs},
                       {"prompt_count", cfg.experiment.prompt_count},
                       {"seed", cfg.prompts_seed_resolved()},
                       {"mode", cfg.experiment.mode}};
    return j;
}

// ---------------------------------------------------------------------------
// run context: manifest + file emission
// ---------------------------------------------------------------------------

class RunContext {
public:
    RunContext(fs::path out_dir, const AppConfig& cfg, const std::string& command)
        : out_dir_(std::move(out_dir)) {
        std::error_code ec;
        fs::create_directories(out_dir_, ec);
        if (ec) throw io_error("cannot create output directory: " + out_dir_.string());
        manifest_["tool"] = "mhc";
        manifest_["version"] = kToolVersion;
        manifest_["command"] = command;
        manifest_["seed"] = cfg.master_seed;
        manifest_["output_dir"] = out_dir_.string();
        manifest_["config"] = config_snapshot(cfg);
        manifest_["files"] = json::object();
        write_manifest();  // the manifest exists before any experiment output
    }

    const fs::path& dir() const { return out_dir_; }

    void emit(const std::string& name, const std::string& content) {
        const fs::path path = out_dir_ / name;
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw io_error("cannot write output file: " + path.string());
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!f) throw io_error("write failed: " + path.string());
        manifest_["files"][name] = fmt_hex64(fnv1a64(content.data(), content.size()));
    }

    void note_file(const std::string& name) {
        std::ifstream f(out_dir_ / name, std::ios::binary);
        if (!f) throw io_error("cannot checksum output file: " + (out_dir_ / name).string());
        std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        manifest_["files"][name] = fmt_hex64(fnv1a64(bytes.data(), bytes.size()));
    }

    void finish() { write_manifest(); }

private:
    void write_manifest() {
        std::ofstream f(out_dir_ / "manifest.json", std::ios::binary | std::ios::trunc);
        if (!f) throw io_error("cannot write manifest: " + (out_dir_ / "manifest.json").string());
        f << manifest_.dump(2) << "\n";
    }

    fs::path out_dir_;
    json manifest_;
};

Corpus build_corpus(const AppConfig& cfg) {
    if (!cfg.corpus_path.empty()) return Corpus::from_file(cfg.corpus_path, cfg.holdout_fraction);
    return Corpus::from_text(generate_synthetic_text(cfg.corpus_sentences, cfg.corpus_seed_resolved()),
                             cfg.holdout_fraction);
}

std::vector<int> resolved_layers(const AppConfig& cfg, const Model& model) {
    if (!cfg.experiment.layers.empty()) {
        for (int l : cfg.experiment.layers)
            if (l < 0 || l >= model.config().layers)
                throw config_error("experiment.layers entry " + std::to_string(l) + " outside [0, " +
                                   std::to_string(model.config().layers) + ")");
        return cfg.experiment.layers;
    }
    std::vector<int> all(static_cast<std::size_t>(model.config().layers));
    for (int l = 0; l < model.config().layers; ++l) all[static_cast<std::size_t>(l)] = l;
    return all;
}

std::vector<std::pair<int, int>> resolved_pairs(const AppConfig& cfg, const Model& model) {
    const int n = model.config().streams;
    if (!cfg.experiment.stream_pairs.empty()) {
        for (auto [a, b] : cfg.experiment.stream_pairs)
            if (a < 0 || b < 0 || a >= n || b >= n || a == b)
                throw config_error("experiment.stream_pairs entry [" + std::to_string(a) + ", " +
                                   std::to_string(b) + "] is not a distinct in-range pair");
        return cfg.experiment.stream_pairs;
    }
    std::vector<std::pair<int, int>> all;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) all.emplace_back(i, j);
    return all;
}

std::string csv_line(std::initializer_list<std::string> cells) {
    std::string out;
    bool first = true;
    for (const auto& c : cells) {
        if (!first) out += ",";
        out += c;
        first = false;
    }
    out += "\n";
    return out;
}

json matrix_to_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// subcommand bodies
// ---------------------------------------------------------------------------

void cmd_train(const AppConfig& cfg, RunContext& ctx) {
    Corpus corpus = build_corpus(cfg);
    Model model(cfg.model);
    TrainResult result = train(model, corpus, cfg.train);

    std::string csv = "step,split,loss\n";
    for (const auto& p : result.curve) csv += csv_line({std::to_string(p.step), p.split, fmt_double(p.loss)});
    ctx.emit("loss.csv", csv);

    save_checkpoint(model, (ctx.dir() / "model.mhck").string());
    ctx.note_file("model.mhck");
    std::cout << "trained " << cfg.train.total_steps << " steps; final holdout loss "
              << fmt_double(result.final_holdout_loss) << "\n";
}

void cmd_cka(const AppConfig& cfg, Model& model, RunContext& ctx) {
    Corpus corpus = build_corpus(cfg);
    auto holdout = corpus.holdout_tokens();
    FeatureSet set = collect_feature_samples(model, holdout, cfg.cka_samples, cfg.cka_seed_resolved());
    for (const auto& w : set.warnings) std::cerr << "warning: " << w << "\n";
    CkaReport report = cka_report(set);

    json j;
    j["samples"] = set.samples;
    j["within_layer"] = json::array();
    for (const auto& m : report.within_layer) j["within_layer"].push_back(matrix_to_json(m));
    j["inter_layer"] = matrix_to_json(report.inter_layer);
    j["warnings"] = set.warnings;
    ctx.emit("cka.json", j.dump(2) + "\n");

    std::string within_csv = "layer,stream_i,stream_j,cka\n";
    for (std::size_t l = 0; l < report.within_layer.size(); ++l)
        for (int i = 0; i < set.streams; ++i)
            for (int k = 0; k < set.streams; ++k)
                within_csv += csv_line({std::to_string(l), std::to_string(i), std::to_string(k),
                                        fmt_double(report.within_layer[l](i, k))});
    ctx.emit("cka_within.csv", within_csv);

    std::string inter_csv = "layer_i,layer_j,cka\n";
    for (Eigen::Index i = 0; i < report.inter_layer.rows(); ++i)
        for (Eigen::Index k = 0; k < report.inter_layer.cols(); ++k)
            inter_csv +=
                csv_line({std::to_string(i), std::to_string(k), fmt_double(report.inter_layer(i, k))});
    ctx.emit("cka_inter.csv", inter_csv);

    std::vector<std::string> stream_labels;
    for (int s = 0; s < set.streams; ++s) stream_labels.push_back("s" + std::to_string(s));
    for (std::size_t l = 0; l < report.within_layer.size(); ++l) {
        HeatmapSpec spec;
        spec.values = report.within_layer[l];
        spec.row_labels = spec.col_labels = stream_labels;
        spec.title = "stream CKA, layer " + std::to_string(l);
        spec.row_axis = "stream";
        spec.col_axis = "stream";
        ctx.emit("cka_layer" + std::to_string(l) + ".svg", render_heatmap_svg(spec));
    }
    HeatmapSpec inter;
    inter.values = report.inter_layer;
    for (int l = 0; l <= set.layers; ++l) {
        inter.row_labels.push_back("L" + std::to_string(l));
        inter.col_labels.push_back("L" + std::to_string(l));
    }
    inter.title = "inter-layer CKA (streams concatenated)";
    inter.row_axis = "layer";
    inter.col_axis = "layer";
    ctx.emit("cka_inter.svg", render_heatmap_svg(inter));
}

void cmd_patch(const AppConfig& cfg, Model& model, RunContext& ctx) {
    if (!cfg.experiment.mode.empty() && cfg.experiment.mode != "patch" && cfg.experiment.mode != "self_patch")
        throw config_error("experiment.mode \"" + cfg.experiment.mode + "\" is not a patch mode");
    auto pairs = build_str_pairs(cfg.experiment.prompt_count, cfg.prompts_seed_resolved());
    if (cfg.experiment.mode == "self_patch")
        for (auto& p : pairs) p.source_tokens = p.target_tokens;

    const auto layers = resolved_layers(cfg, model);
    std::vector<int> streams(static_cast<std::size_t>(model.config().streams));
    for (int s = 0; s < model.config().streams; ++s) streams[static_cast<std::size_t>(s)] = s;

    Eigen::MatrixXd map = patch_heatmap(model, pairs, layers, streams);

    std::string csv = "layer,stream,mean_kl\n";
    for (std::size_t li = 0; li < layers.size(); ++li)
        for (std::size_t si = 0; si < streams.size(); ++si)
            csv += csv_line({std::to_string(layers[li]), std::to_string(streams[si]),
                             fmt_double(map(static_cast<Eigen::Index>(li), static_cast<Eigen::Index>(si)))});
    ctx.emit("patch_heatmap.csv", csv);

    HeatmapSpec spec;
    spec.values = map;
    for (int l : layers) spec.row_labels.push_back("L" + std::to_string(l));
    for (int s : streams) spec.col_labels.push_back("s" + std::to_string(s));
    spec.title = "activation patch effect (mean KL)";
    spec.row_axis = "layer";
    spec.col_axis = "stream";
    spec.vmax = std::max(1e-12, map.maxCoeff());
    spec.cell_precision = 3;
    ctx.emit("patch_heatmap.svg", render_heatmap_svg(spec));
}

void cmd_rescue(const AppConfig& cfg, Model& model, RunContext& ctx) {
    if (!cfg.experiment.mode.empty() && cfg.experiment.mode != "ablate" &&
        cfg.experiment.mode != "full_rescue")
        throw config_error("experiment.mode \"" + cfg.experiment.mode + "\" is not a rescue mode");
    const bool full_rescue = cfg.experiment.mode == "full_rescue";
    const auto layers = resolved_layers(cfg, model);
    const auto pairs = resolved_pairs(cfg, model);
    const int n = model.config().streams;
    auto prompt_pairs = build_str_pairs(cfg.experiment.prompt_count, cfg.prompts_seed_resolved());
    std::vector<std::vector<int>> prompts;
    for (const auto& p : prompt_pairs) prompts.push_back(p.target_tokens);
    const double nan = std::numeric_limits<double>::quiet_NaN();

    RescueMatrixStack stack;
    if (full_rescue) {
        // degenerate validation mode: restore the whole ablate set, so every
        // defined entry must come out at exactly 1
        stack.layers = layers;
        for (int layer : layers) {
            Eigen::MatrixXd rec = Eigen::MatrixXd::Constant(n, n, nan);
            for (auto [i, j] : pairs) {
                double kl_abl = 0.0, kl_res = 0.0;
                for (const auto& tokens : prompts) {
                    auto fwd = model.forward(tokens, true);
                    InterventionSpec spec;
                    spec.layer = layer;
                    spec.ablate_set = {i, j};
                    kl_abl += mean_token_kl(fwd.logits, run_intervened(model, tokens, spec, *fwd.cache));
                    spec.rescue_set = {i, j};
                    kl_res += mean_token_kl(fwd.logits, run_intervened(model, tokens, spec, *fwd.cache));
                }
                auto r = recovery_fraction(kl_res / prompts.size(), kl_abl / prompts.size());
                rec(j, i) = rec(i, j) = r ? *r : nan;
            }
            stack.per_layer.push_back(std::move(rec));
        }
        stack.mean = Eigen::MatrixXd::Constant(n, n, nan);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double sum = 0;
                int count = 0;
                for (const auto& m : stack.per_layer)
                    if (!std::isnan(m(i, j))) {
                        sum += m(i, j);
                        ++count;
                    }
                if (count) stack.mean(i, j) = sum / count;
            }
    } else {
        stack = rescue_matrix(model, prompts, layers);
        // drop entries outside the requested pair list
        if (pairs.size() < static_cast<std::size_t>(n * (n - 1) / 2)) {
            auto wanted = [&](int i, int j) {
                for (auto [a, b] : pairs)
                    if ((a == i && b == j) || (a == j && b == i)) return true;
                return false;
            };
            for (auto& m : stack.per_layer)
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j)
                        if (i != j && !wanted(i, j)) m(i, j) = nan;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j)
                    if (i != j && !wanted(i, j)) stack.mean(i, j) = nan;
        }
    }

    // JSON: percentages, diagonal keys absent, undefined entries null
    auto matrix_obj = [n](const Eigen::MatrixXd& m) {
        json obj = json::object();
        for (int i = 0; i < n; ++i) {
            json row = json::object();
            for (int j = 0; j < n; ++j) {
                if (i == j) continue;
                row[std::to_string(j)] = std::isnan(m(i, j)) ? json(nullptr) : json(100.0 * m(i, j));
            }
            obj[std::to_string(i)] = std::move(row);
        }
        return obj;
    };
    json j;
    j["convention"] = "entry [ablated][recovered] = percent KL recovery of rescuing `recovered` from the ablated pair";
    j["layers"] = json::array();
    for (std::size_t li = 0; li < stack.per_layer.size(); ++li)
        j["layers"].push_back(
            {{"layer", stack.layers[li]}, {"recovery_percent", matrix_obj(stack.per_layer[li])}});
    j["mean_percent"] = matrix_obj(stack.mean);
    ctx.emit("rescue_matrix.json", j.dump(2) + "\n");

    // CSV: undefined rows omitted
    std::string csv = "layer,ablated,rescued,recovery\n";
    for (std::size_t li = 0; li < stack.per_layer.size(); ++li)
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < n; ++k) {
                if (i == k || std::isnan(stack.per_layer[li](i, k))) continue;
                csv += csv_line({std::to_string(stack.layers[li]), std::to_string(i), std::to_string(k),
                                 fmt_double(100.0 * stack.per_layer[li](i, k))});
            }
    ctx.emit("rescue_layers.csv", csv);

    // asymmetry series per requested pair
    std::string asym_csv = "stream_a,stream_b,layer,difference,pair_mean\n";
    LineChartSpec chart;
    chart.title = "rescue asymmetry by depth (percent points)";
    chart.x_label = "layer";
    chart.y_label = "recovery(+b,-a) - recovery(+a,-b)";
    for (int l : stack.layers) chart.x_values.push_back(l);
    for (auto [a, b] : pairs) {
        AsymmetrySeries series = rescue_asymmetry(stack, a, b);
        for (int skipped : series.skipped_layers)
            std::cerr << "warning: asymmetry (" << a << "," << b << ") undefined at layer " << skipped
                      << "\n";
        std::vector<double> percent;
        for (std::size_t li = 0; li < series.difference.size(); ++li) {
            percent.push_back(100.0 * series.difference[li]);
            if (!std::isnan(series.difference[li]))
                asym_csv +=
                    csv_line({std::to_string(a), std::to_string(b), std::to_string(series.layers[li]),
                              fmt_double(100.0 * series.difference[li]), fmt_double(100.0 * series.mean)});
        }
        chart.series.push_back(std::move(percent));
        chart.series_names.push_back("(" + std::to_string(a) + "," + std::to_string(b) + ")");
    }
    ctx.emit("rescue_asymmetry.csv", asym_csv);
    ctx.emit("rescue_asymmetry.svg", render_line_chart_svg(chart));

    // heatmaps: per layer and mean, percent scale, hatched diagonal
    std::vector<std::string> labels;
    for (int s = 0; s < n; ++s) labels.push_back("s" + std::to_string(s));
    auto heatmap = [&](const Eigen::MatrixXd& m, const std::string& title) {
        HeatmapSpec spec;
        spec.values = 100.0 * m;
        spec.row_labels = spec.col_labels = labels;
        spec.title = title;
        spec.row_axis = "ablated";
        spec.col_axis = "recovered";
        spec.vmin = 0.0;
        spec.vmax = 100.0;
        spec.cell_precision = 1;
        return render_heatmap_svg(spec);
    };
    for (std::size_t li = 0; li < stack.per_layer.size(); ++li)
        ctx.emit("rescue_layer" + std::to_string(stack.layers[li]) + ".svg",
                 heatmap(stack.per_layer[li], "rescue recovery %, layer " + std::to_string(stack.layers[li])));
    ctx.emit("rescue_mean.svg", heatmap(stack.mean, "mean rescue recovery % across layers"));
}

void cmd_hstats(Model& model, RunContext& ctx) {
    auto realized = model.realized_static_routing();
    auto stats = routing_stats(realized);

    std::string csv =
        "layer,mix_frobenius,pool_frobenius,broadcast_frobenius,mix_variance,pool_variance,"
        "broadcast_variance\n";
    LineChartSpec chart;
    chart.title = "routing statistics across depth";
    chart.x_label = "layer";
    chart.series_names = {"mix |F|", "pool |F|", "broadcast |F|", "mix var", "pool var", "broadcast var"};
    chart.series.assign(6, {});
    for (const auto& s : stats) {
        csv += csv_line({std::to_string(s.layer), fmt_double(s.mix_frobenius), fmt_double(s.pool_frobenius),
                         fmt_double(s.broadcast_frobenius), fmt_double(s.mix_variance),
                         fmt_double(s.pool_variance), fmt_double(s.broadcast_variance)});
        chart.x_values.push_back(s.layer);
        chart.series[0].push_back(s.mix_frobenius);
        chart.series[1].push_back(s.pool_frobenius);
        chart.series[2].push_back(s.broadcast_frobenius);
        chart.series[3].push_back(s.mix_variance);
        chart.series[4].push_back(s.pool_variance);
        chart.series[5].push_back(s.broadcast_variance);
    }
    ctx.emit("hstats.csv", csv);
    ctx.emit("hstats.svg", render_line_chart_svg(chart));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mHC toy model: training and causal stream analysis"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", checkpoint_path;
    std::optional<std::uint64_t> seed_flag;

    auto add_common = [&](CLI::App* sub, bool needs_checkpoint) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--seed", seed_flag, "master seed (overrides config)");
        if (needs_checkpoint)
            sub->add_option("--checkpoint", checkpoint_path, "MHCK checkpoint path")->required();
    };

    CLI::App* train_cmd = app.add_subcommand("train", "train the toy model and write a checkpoint");
    add_common(train_cmd, false);
    CLI::App* cka_cmd = app.add_subcommand("cka", "stream and inter-layer CKA reports");
    add_common(cka_cmd, true);
    CLI::App* patch_cmd = app.add_subcommand("patch", "counterfactual activation-patching heatmap");
    add_common(patch_cmd, true);
    CLI::App* rescue_cmd = app.add_subcommand("rescue", "stream ablation-and-rescue matrices");
    add_common(rescue_cmd, true);
    CLI::App* hstats_cmd = app.add_subcommand("hstats", "routing statistics across depth");
    add_common(hstats_cmd, true);
    CLI::App* report_cmd = app.add_subcommand("report", "run every analysis into one directory");
    add_common(report_cmd, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        AppConfig cfg = load_config(config_path, seed_flag);

        if (train_cmd->parsed()) {
            RunContext ctx(out_dir, cfg, "train");
            cmd_train(cfg, ctx);
            ctx.finish();
            return 0;
        }

        Model model = load_checkpoint(checkpoint_path);
        if (cka_cmd->parsed()) {
            RunContext ctx(out_dir, cfg, "cka");
            cmd_cka(cfg, model, ctx);
            ctx.finish();
        } else if (patch_cmd->parsed()) {
            RunContext ctx(out_dir, cfg, "patch");
            cmd_patch(cfg, model, ctx);
            ctx.finish();
        } else if (rescue_cmd->parsed()) {
            RunContext ctx(out_dir, cfg, "rescue");
            cmd_rescue(cfg, model, ctx);
            ctx.finish();
        } else if (hstats_cmd->parsed()) {
            RunContext ctx(out_dir, cfg, "hstats");
            cmd_hstats(model, ctx);
            ctx.finish();
        } else if (report_cmd->parsed()) {
            RunContext ctx(out_dir, cfg, "report");
            cmd_cka(cfg, model, ctx);
            cmd_patch(cfg, model, ctx);
            cmd_rescue(cfg, model, ctx);
            cmd_hstats(model, ctx);
            ctx.finish();
        }
        return 0;
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

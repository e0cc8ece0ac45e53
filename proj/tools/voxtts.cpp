// voxtts: every workflow as a subcommand.
// Exit codes: 0 ok, 1 property failure, 2 config error, 3 I/O error.
#include "checks.h"
#include "pipeline.h"

#include "vox/checkpoint.h"
#include "vox/errors.h"
#include "vox/serve.h"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace voxtools;

namespace {

struct PropertyFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config;
    std::string profile = "toy";
    std::optional<uint64_t> seed;
    std::string output_dir;
};

void add_common(CLI::App * app, Common & c) {
    app->add_option("-c,--config", c.config, "YAML run config (defaults to the profile's built-in values)");
    app->add_option("--profile", c.profile, "toy | paper-shape, when no config file is given");
    app->add_option("--seed", c.seed, "overrides the config seed");
    app->add_option("-o,--output-dir", c.output_dir, "overrides the config output directory");
}

// Loads and validates the config, then prepares the output directory and the
// resolved-config copy.
RunConfig resolve(const Common & c) {
    RunConfig cfg = c.config.empty() ? default_run_config(c.profile) : load_run_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.output_dir.empty()) cfg.output_dir = c.output_dir;
    cfg.sync();
    cfg.validate();
    std::error_code ec;
    fs::create_directories(cfg.output_dir, ec);
    if (ec) throw IoError("cannot create output directory " + cfg.output_dir + ": " + ec.message());
    std::ofstream out(fs::path(cfg.output_dir) / "resolved_config.yaml");
    if (!out) throw IoError("cannot write to " + cfg.output_dir);
    out << dump_run_config(cfg);
    return cfg;
}

fs::path out_path(const RunConfig & cfg, const std::string & name) { return fs::path(cfg.output_dir) / name; }

class JsonLines {
public:
    explicit JsonLines(const fs::path & path) : out_(path), path_(path) {
        if (!out_) throw IoError("cannot write " + path.string());
    }
    void operator()(const Json & j) {
        out_ << j.dump() << '\n';
        out_.flush();
    }
    LossLog logger() {
        return [this](const Json & j) { (*this)(j); };
    }

private:
    std::ofstream out_;
    fs::path path_;
};

void write_json(const fs::path & path, const Json & j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

void require_checkpoint(const std::string & stem, const std::string & what) {
    if (!fs::exists(stem + ".manifest")) throw IoError(what + " checkpoint not found: " + stem + ".manifest");
}

ToyCorpus corpus_for(const RunConfig & cfg) {
    Rng rng = Rng(cfg.seed).split("data");
    return make_corpus(cfg.data, cfg.codec, rng);
}

Codec load_codec(const RunConfig & cfg, const std::string & stem) {
    Rng init(0);
    Codec codec(cfg.codec, init);
    ParamSet st = codec.state();
    load_checkpoint(st, stem);
    return codec;
}

TtsModel load_model(const RunConfig & cfg, const std::string & stem) {
    Rng init(0);
    TtsModel model(cfg.backbone, cfg.flow, init);
    ParamSet st = model.state();
    load_checkpoint(st, stem);
    return model;
}

// ---------------------------------------------------------------------------

int codec_train(const Common & c) {
    RunConfig cfg = resolve(c);
    auto corpus = corpus_for(cfg);
    Rng init = Rng(cfg.seed).split("init");
    Codec codec(cfg.codec, init);
    MultiResolutionDiscriminator disc(cfg.codec.disc, init);
    JsonLines log(out_path(cfg, "codec_losses.jsonl"));
    train_codec(codec, disc, corpus, cfg, log.logger());
    save_checkpoint(codec.state(), out_path(cfg, "codec"));

    // a voice reference for `generate` and one reconstruction to listen to
    write_wav(out_path(cfg, "prompt.wav"), corpus.prompts.front().wave, cfg.codec.sample_rate);
    const auto & wave = corpus.items.front().audio.wave;
    auto rec = codec.reconstruct(wave);
    write_wav(out_path(cfg, "reference.wav"), wave, cfg.codec.sample_rate);
    write_wav(out_path(cfg, "reconstruction.wav"), rec, cfg.codec.sample_rate);
    Json summary{{"steps", cfg.train.codec_steps},
                 {"mel_distance", mel_distance(wave, rec, double(cfg.codec.sample_rate))},
                 {"stft_distance", stft_distance(wave, rec, {512, 256, 128})}};
    write_json(out_path(cfg, "codec_eval.json"), summary);
    std::cout << summary.dump() << std::endl;
    return 0;
}

int tts_train(const Common & c, std::string codec_stem) {
    RunConfig cfg = resolve(c);
    if (codec_stem.empty()) codec_stem = out_path(cfg, "codec").string();
    require_checkpoint(codec_stem, "codec");
    Codec codec = load_codec(cfg, codec_stem);
    auto samples = tokenize_corpus(codec, corpus_for(cfg));
    Rng init = Rng(cfg.seed).split("tts-init");
    TtsModel model(cfg.backbone, cfg.flow, init);
    JsonLines log(out_path(cfg, "tts_losses.jsonl"));
    train_tts(model, samples, cfg, log.logger());
    save_checkpoint(model.state(), out_path(cfg, "tts"));
    std::cout << Json{{"samples", samples.size()}, {"steps", cfg.train.tts_steps}}.dump() << std::endl;
    return 0;
}

int dpo_train(const Common & c, std::string codec_stem, std::string model_stem) {
    RunConfig cfg = resolve(c);
    if (codec_stem.empty()) codec_stem = out_path(cfg, "codec").string();
    if (model_stem.empty()) model_stem = out_path(cfg, "tts").string();
    require_checkpoint(codec_stem, "codec");
    require_checkpoint(model_stem, "tts");
    Codec codec = load_codec(cfg, codec_stem);
    TtsModel policy = load_model(cfg, model_stem);

    auto corpus = corpus_for(cfg);
    auto samples = tokenize_corpus(codec, corpus);
    std::vector<PairPrompt> prompts;
    for (size_t i = 0; i < std::min(cfg.dpo_run.prompts, samples.size()); ++i) {
        prompts.push_back({"prompt" + std::to_string(i), samples[i].a1, samples[i].t2});
    }
    std::vector<Scorer> scorers{duration_scorer(1.0), repetition_scorer(), loudness_consistency_scorer()};
    Rng rng = Rng(cfg.seed).split("dpo-pairs");
    auto built = build_pairs(prompts, tts_candidate_generator(policy, &codec, cfg.decoding, cfg.sampler),
                             cfg.dpo_run.num_samples, scorers, rng);
    {
        std::ofstream plog(out_path(cfg, "pairs_log.txt"));
        for (const auto & line : built.log) plog << line << '\n';
    }
    if (built.pairs.empty()) throw std::runtime_error("dpo-train: no preference pairs survived scoring");
    save_pairs(built.pairs, out_path(cfg, "pairs.jsonl"), cfg.codec.token_layout());

    std::vector<AssembledSequence> pretrain;
    for (const auto & s : samples) pretrain.push_back(policy.backbone.assemble(s));
    DpoTrainer trainer(policy, cfg.dpo, Rng(cfg.seed).split("dpo").seed());
    auto [s0, f0] = trainer.mean_margins(built.pairs, cfg.seed);
    JsonLines log(out_path(cfg, "dpo_losses.jsonl"));
    auto reports = trainer.train(built.pairs, cfg.dpo_run.batch_size, pretrain);
    for (const auto & r : reports) {
        log(Json{{"step", r.step},
                 {"pretrain_batch", r.pretrain_batch},
                 {"total", r.total},
                 {"semantic", r.semantic},
                 {"flow", r.flow},
                 {"pretrain", r.pretrain},
                 {"semantic_margin", r.semantic_margin},
                 {"flow_margin", r.flow_margin}});
    }
    auto [s1, f1] = trainer.mean_margins(built.pairs, cfg.seed);
    save_checkpoint(policy.state(), out_path(cfg, "dpo"));
    Json summary{{"pairs", built.pairs.size()},   {"excluded", built.log.size()},  {"steps", reports.size()},
                 {"semantic_margin_before", s0}, {"semantic_margin_after", s1}, {"flow_margin_before", f0},
                 {"flow_margin_after", f1}};
    write_json(out_path(cfg, "dpo_summary.json"), summary);
    std::cout << summary.dump() << std::endl;
    return 0;
}

struct GenerateArgs {
    std::string codec, model, prompt, text, output, tokens;
};

int generate(const Common & c, GenerateArgs a) {
    RunConfig cfg = resolve(c);
    if (a.codec.empty()) a.codec = out_path(cfg, "codec").string();
    if (a.model.empty()) a.model = out_path(cfg, "tts").string();
    if (a.output.empty()) a.output = out_path(cfg, "generated.wav").string();
    if (a.text.empty()) throw ConfigError("generate: --text must not be empty");
    require_checkpoint(a.codec, "codec");
    require_checkpoint(a.model, "tts");
    Wav prompt = read_wav(a.prompt);
    if (prompt.sample_rate != cfg.codec.sample_rate) {
        throw IoError("prompt sample rate " + std::to_string(prompt.sample_rate) + " Hz, codec expects " +
                      std::to_string(cfg.codec.sample_rate));
    }
    Codec codec = load_codec(cfg, a.codec);
    TtsModel model = load_model(cfg, a.model);
    Rng rng = Rng(cfg.seed).split("generate");
    auto out = synthesize(model, codec, prompt.samples, a.text, cfg, rng);
    for (const auto & w : out.result.warnings) std::cerr << "warning: " << w << '\n';
    write_wav(a.output, out.wave, cfg.codec.sample_rate);
    if (!a.tokens.empty()) {
        std::ofstream tok(a.tokens, std::ios::binary);
        if (!tok) throw IoError("cannot write " + a.tokens);
        write_token_frames(tok, out.result.frames, cfg.codec.token_layout());
    }
    Json summary{{"frames", out.result.frames.size()},
                 {"steps", out.result.steps},
                 {"truncated", out.result.truncated},
                 {"samples", out.wave.size()},
                 {"seconds", double(out.wave.size()) / double(cfg.codec.sample_rate)},
                 {"warnings", out.result.warnings}};
    std::cout << summary.dump() << std::endl;
    return 0;
}

int fm_sweep(const Common & c) {
    RunConfig cfg = resolve(c);
    FlowConfig fc = cfg.flow;
    fc.acoustic_dims = 2;
    Rng rng = Rng(cfg.seed).split("fm-sweep");
    FlowHead head(fc, rng);
    ClusterTask task;
    JsonLines log(out_path(cfg, "fm_losses.jsonl"));
    auto losses = train_cluster_head(head, task, {.steps = cfg.sweep.train_steps, .batch = cfg.sweep.batch}, rng);
    for (size_t i = 0; i < losses.size(); i += cfg.train.log_every) log(Json{{"step", i}, {"loss", losses[i]}});
    Json rows = Json::array();
    for (size_t nfe : cfg.sweep.nfe)
        for (double alpha : cfg.sweep.alpha) {
            Rng er = Rng(cfg.seed).split("fm-eval");  // same noise for every cell
            const size_t before = head.evaluations();
            auto e = evaluate_cluster_head(head, task, cfg.sweep.samples, {.nfe = nfe, .cfg_alpha = alpha}, er);
            rows.push_back(Json{{"nfe", nfe},
                                {"alpha", alpha},
                                {"within_3sigma", e.within_3sigma},
                                {"accuracy", e.accuracy},
                                {"evaluations_per_sample", double(head.evaluations() - before) / double(cfg.sweep.samples)}});
        }
    write_json(out_path(cfg, "fm_sweep.json"), rows);
    std::cout << rows.dump(2) << std::endl;
    return 0;
}

int serve_sim(const Common & c, std::string scenario_path, bool calibrate_flag) {
    RunConfig cfg = resolve(c);
    if (scenario_path.empty()) scenario_path = cfg.serve.scenario;
    Scenario s = scenario_path.empty() ? table_calibration_scenario() : load_scenario(scenario_path);
    if (calibrate_flag || cfg.serve.calibrate) s = calibrate(s).scenario;
    save_scenario(s, out_path(cfg, "scenario.yaml"));
    std::vector<TraceEvent> trace;
    auto rows = run_simulation(s, cfg.serve.trace ? &trace : nullptr);
    const auto metrics = metrics_json(rows);
    {
        std::ofstream out(out_path(cfg, "serve_metrics.json"));
        if (!out) throw IoError("cannot write serve metrics");
        out << metrics << '\n';
    }
    if (cfg.serve.trace) write_trace_csv(trace, out_path(cfg, "serve_trace.csv"));
    std::cout << metrics << std::endl;
    return 0;
}

int eval_recon(const Common & c, const std::string & ref_path, const std::string & est_path) {
    RunConfig cfg = resolve(c);
    Wav ref = read_wav(ref_path), est = read_wav(est_path);
    if (ref.sample_rate != est.sample_rate) throw IoError("sample rates differ between the two files");
    const size_t n = std::min(ref.samples.size(), est.samples.size());
    if (n == 0) throw IoError("empty audio");
    std::span<const real> a(ref.samples.data(), n), b(est.samples.data(), n);
    Json j{{"samples", n},
           {"trimmed", ref.samples.size() != est.samples.size()},
           {"mel_distance", mel_distance(a, b, double(ref.sample_rate))},
           {"stft_distance", stft_distance(a, b, {512, 256, 128})}};
    write_json(out_path(cfg, "eval_recon.json"), j);
    std::cout << j.dump() << std::endl;
    return 0;
}

int check(const Common & c, const std::vector<int> & only) {
    RunConfig cfg = resolve(c);
    auto results = voxcheck::run_criteria(only, &std::cout);
    Json rows = Json::array();
    size_t failed = 0;
    for (const auto & r : results) {
        failed += !r.pass;
        rows.push_back(Json{{"id", r.id}, {"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
    }
    write_json(out_path(cfg, "check.json"), rows);
    std::cout << results.size() - failed << "/" << results.size() << " properties passed" << std::endl;
    if (failed) throw PropertyFailure(std::to_string(failed) + " properties failed");
    return 0;
}

}  // namespace

int main(int argc, char ** argv) {
    CLI::App app{"voxtts: toy-scale speech codec, TTS, preference tuning and serving simulation"};
    app.require_subcommand(1);
    Common common;

    auto * ct = app.add_subcommand("codec-train", "train the toy codec on synthetic speech");
    add_common(ct, common);

    std::string codec_stem, model_stem;
    auto * tt = app.add_subcommand("tts-train", "train backbone and flow head on codec tokens");
    add_common(tt, common);
    tt->add_option("--codec", codec_stem, "codec checkpoint stem (default <output>/codec)");

    auto * dt = app.add_subcommand("dpo-train", "build preference pairs and run DPO");
    add_common(dt, common);
    dt->add_option("--codec", codec_stem, "codec checkpoint stem (default <output>/codec)");
    dt->add_option("--model", model_stem, "TTS checkpoint stem (default <output>/tts)");

    GenerateArgs ga;
    auto * gen = app.add_subcommand("generate", "prompt WAV + text -> WAV");
    add_common(gen, common);
    gen->add_option("--codec", ga.codec, "codec checkpoint stem (default <output>/codec)");
    gen->add_option("--model", ga.model, "TTS checkpoint stem (default <output>/tts)");
    gen->add_option("--prompt", ga.prompt, "voice reference WAV (PCM16 mono)")->required();
    gen->add_option("--text", ga.text, "UTF-8 text")->required();
    gen->add_option("--output", ga.output, "output WAV (default <output>/generated.wav)");
    gen->add_option("--tokens", ga.tokens, "optional token dump");

    auto * fm = app.add_subcommand("fm-sweep", "NFE x CFG grid on the two-cluster flow problem");
    add_common(fm, common);

    std::string scenario;
    bool calibrate_flag = false;
    auto * sv = app.add_subcommand("serve-sim", "discrete-event serving simulation");
    add_common(sv, common);
    sv->add_option("--scenario", scenario, "scenario YAML (default: calibrated 500-character scenario)");
    sv->add_flag("--calibrate", calibrate_flag, "refit the cost model to the published single-request figures");

    std::string ref_wav, est_wav;
    auto * er = app.add_subcommand("eval-recon", "Mel and STFT distance between two WAVs");
    add_common(er, common);
    er->add_option("reference", ref_wav, "reference WAV")->required();
    er->add_option("estimate", est_wav, "estimate WAV")->required();

    std::vector<int> only;
    auto * ck = app.add_subcommand("check", "run the acceptance property suite");
    add_common(ck, common);
    ck->add_option("--only", only, "criterion ids to run");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*ct) return codec_train(common);
        if (*tt) return tts_train(common, codec_stem);
        if (*dt) return dpo_train(common, codec_stem, model_stem);
        if (*gen) return generate(common, ga);
        if (*fm) return fm_sweep(common);
        if (*sv) return serve_sim(common, scenario, calibrate_flag);
        if (*er) return eval_recon(common, ref_wav, est_wav);
        if (*ck) return check(common, only);
    } catch (const vox::ConfigError & e) {
        std::cerr << "config error: " << e.what() << std::endl;
        return 2;
    } catch (const vox::IoError & e) {
        std::cerr << "i/o error: " << e.what() << std::endl;
        return 3;
    } catch (const PropertyFailure & e) {
        std::cerr << e.what() << std::endl;
        return 1;
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}

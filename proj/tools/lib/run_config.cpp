#include "run_config.h"

#include "vox/errors.h"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace voxtools {

namespace {

std::string shortest(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    std::string s(buf, r.ptr);
    // keep it a float for readers that care
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

// Walks every configurable field; Reader and Writer share the layout.
template <class V>
void visit(RunConfig & c, V & v) {
    v.section("codec", [&] {
        v("sample_rate", c.codec.sample_rate);
        v("patch_size", c.codec.patch_size);
        v("frame_ratio", c.codec.frame_ratio);
        v("embed_dim", c.codec.embed_dim);
        v("semantic_dim", c.codec.semantic_dim);
        v("acoustic_dim", c.codec.acoustic_dim);
        v("codebook_size", c.codec.codebook_size);
        v("fsq_levels", c.codec.fsq_levels);
        v("asr_dim", c.codec.asr_dim);
        v("vq_apply_prob", c.codec.vq.apply_prob);
        v("vq_ema_decay", c.codec.vq.ema_decay);
        v("fsq_p_quantize", c.codec.fsq.p_quantize);
        v("fsq_p_dither", c.codec.fsq.p_dither);
        v("fsq_p_passthrough", c.codec.fsq.p_passthrough);
        v("alpha", c.codec.weights.alpha);
        v("beta", c.codec.weights.beta);
        v("gamma", c.codec.weights.gamma);
        v("delta", c.codec.weights.delta);
        v("disc_fft_sizes", c.codec.disc.fft_sizes);
        v("disc_channels", c.codec.disc.channels);
        v("disc_layers", c.codec.disc.layers);
        v("disc_feature_mean", c.codec.disc.feature_mean);
    });
    v.section("backbone", [&] {
        v("width", c.backbone.width);
        v("layers", c.backbone.layers);
        v("heads", c.backbone.heads);
        v("mlp_ratio", c.backbone.mlp_ratio);
        v("max_positions", c.backbone.max_positions);
        v("freeze_text_embeddings", c.backbone.freeze_text_embeddings);
        v("min_prompt_frames", c.backbone.min_prompt_frames);
        v("nonspeech_weight", c.backbone.vad.nonspeech_weight);
        v("long_silence_s", c.backbone.vad.long_silence_s);
    });
    v.section("flow", [&] {
        v("layers", c.flow.layers);
        v("heads", c.flow.heads);
        v("mlp_ratio", c.flow.mlp_ratio);
        v("time_embed_dim", c.flow.time_embed_dim);
        v("cond_dropout", c.flow.cond_dropout);
    });
    v.section("sampler", [&] {
        v("nfe", c.sampler.nfe);
        v("cfg_alpha", c.sampler.cfg_alpha);
        v("temperature", c.decoding.temperature);
        v("top_k", c.decoding.top_k);
        v("max_frames", c.decoding.max_frames);
    });
    v.section("dpo", [&] {
        v("beta_semantic", c.dpo.beta_semantic);
        v("beta_acoustic", c.dpo.beta_acoustic);
        v("lr", c.dpo.lr);
        v("semantic_weight", c.dpo.semantic_weight);
        v("flow_weight", c.dpo.flow_weight);
        v("pretrain_mixture", c.dpo.pretrain_mixture);
        v("mixture_ratio", c.dpo.mixture_ratio);
        v("epochs", c.dpo.epochs);
        v("average_logprobs", c.dpo.average_logprobs);
        v("prompts", c.dpo_run.prompts);
        v("num_samples", c.dpo_run.num_samples);
        v("batch_size", c.dpo_run.batch_size);
    });
    v.section("data", [&] {
        v("utterances", c.data.utterances);
        v("speakers", c.data.speakers);
        v("min_words", c.data.min_words);
        v("max_words", c.data.max_words);
        v("prompt_words", c.data.prompt_words);
    });
    v.section("train", [&] {
        v("codec_steps", c.train.codec_steps);
        v("codec_batch", c.train.codec_batch);
        v("codec_frames", c.train.codec_frames);
        v("codec_lr", c.train.codec_lr);
        v("tts_steps", c.train.tts_steps);
        v("tts_batch", c.train.tts_batch);
        v("tts_lr", c.train.tts_lr);
        v("log_every", c.train.log_every);
    });
    v.section("sweep", [&] {
        v("nfe", c.sweep.nfe);
        v("alpha", c.sweep.alpha);
        v("samples", c.sweep.samples);
        v("train_steps", c.sweep.train_steps);
        v("batch", c.sweep.batch);
    });
    v.section("serve", [&] {
        v("scenario", c.serve.scenario);
        v("calibrate", c.serve.calibrate);
        v("trace", c.serve.trace);
    });
}

// yaml-cpp nodes assign through to the shared value, so sections are kept on a
// stack of frames instead of swapping readers.
struct Reader {
    struct Frame {
        YAML::Node node;
        std::string where;
        std::set<std::string> seen;
    };
    std::vector<Frame> stack;

    explicit Reader(const YAML::Node & root) { stack.push_back({root, "", {"profile"}}); }

    template <class T>
    void operator()(const std::string & key, T & out) {
        Frame & f = stack.back();
        f.seen.insert(key);
        YAML::Node n = f.node[key];
        if (!n) return;
        try {
            if constexpr (std::is_same_v<T, size_t> || std::is_same_v<T, uint64_t>) {
                const auto s = n.as<std::string>();
                if (!s.empty() && s[0] == '-') throw ConfigError(f.where + key + ": must be non-negative");
            }
            out = n.as<T>();
        } catch (const YAML::Exception &) {
            throw ConfigError(f.where + key + ": cannot parse '" + YAML::Dump(n) + "'");
        }
    }

    void section(const std::string & name, const std::function<void()> & body) {
        stack.back().seen.insert(name);
        YAML::Node n = stack.back().node[name];
        if (!n) return;
        if (!n.IsMap()) throw ConfigError(name + ": expected a mapping");
        stack.push_back({n, name + ".", {}});
        body();
        reject_unknown();
        stack.pop_back();
    }

    void reject_unknown() const {
        const Frame & f = stack.back();
        for (const auto & kv : f.node) {
            const auto key = kv.first.as<std::string>();
            if (!f.seen.count(key)) throw ConfigError("unknown config key: " + f.where + key);
        }
    }
};

struct Writer {
    YAML::Emitter out;

    template <class T>
    void operator()(const std::string & key, T & value) {
        out << YAML::Key << key << YAML::Value;
        if constexpr (std::is_same_v<T, double>) {
            out << shortest(value);
        } else if constexpr (std::is_same_v<T, std::vector<double>>) {
            out << YAML::Flow << YAML::BeginSeq;
            for (double d : value) out << shortest(d);
            out << YAML::EndSeq;
        } else if constexpr (std::is_same_v<T, std::vector<size_t>>) {
            out << YAML::Flow << YAML::BeginSeq;
            for (size_t d : value) out << d;
            out << YAML::EndSeq;
        } else if constexpr (std::is_same_v<T, std::string>) {
            out << YAML::DoubleQuoted << value;
        } else {
            out << value;
        }
    }

    void section(const std::string & name, const std::function<void()> & body) {
        out << YAML::Key << name << YAML::Value << YAML::BeginMap;
        body();
        out << YAML::EndMap;
    }
};

}  // namespace

void RunConfig::sync() {
    backbone.semantic_k = codec.codebook_size;
    backbone.acoustic_dims = codec.acoustic_dim;
    backbone.acoustic_levels = codec.fsq_levels;
    backbone.vad.frame_rate_hz = codec.frame_rate();
    flow.width = backbone.width;
    flow.acoustic_dims = codec.acoustic_dim;
    sampler.levels = codec.fsq_levels;
}

void RunConfig::validate() const {
    if (profile != "toy" && profile != "paper-shape") throw ConfigError("profile must be toy or paper-shape, got " + profile);
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    codec.validate();
    backbone.validate();
    flow.validate();
    sampler.validate();
    dpo.validate();
    if (data.utterances == 0 || data.speakers == 0) throw ConfigError("data: need at least one utterance and speaker");
    if (data.min_words == 0 || data.max_words < data.min_words || data.prompt_words == 0) {
        throw ConfigError("data: word counts must satisfy 1 <= min_words <= max_words, prompt_words >= 1");
    }
    if (train.codec_batch == 0 || train.codec_frames == 0 || train.tts_batch == 0 || train.log_every == 0) {
        throw ConfigError("train: batch sizes, crop length and log_every must be positive");
    }
    if (train.codec_lr <= 0 || train.tts_lr <= 0) throw ConfigError("train: learning rates must be positive");
    if (dpo_run.prompts == 0 || dpo_run.num_samples < 2 || dpo_run.batch_size == 0) {
        throw ConfigError("dpo: prompts >= 1, num_samples >= 2, batch_size >= 1");
    }
    if (sweep.nfe.empty() || sweep.alpha.empty() || sweep.samples == 0 || sweep.batch == 0) {
        throw ConfigError("sweep: empty grid or zero samples");
    }
    for (size_t n : sweep.nfe)
        if (n == 0) throw ConfigError("sweep: nfe must be positive");
}

RunConfig default_run_config(const std::string & profile) {
    RunConfig c;
    c.profile = profile;
    if (profile == "toy") {
        c.codec = CodecConfig::toy();
        c.backbone = BackboneConfig::toy();
    } else if (profile == "paper-shape") {
        // paper token shapes and codec; backbone kept at desk width
        c.codec = CodecConfig::paper();
        c.backbone = BackboneConfig::toy();
        c.backbone.max_positions = 4096;
    } else {
        throw ConfigError("profile must be toy or paper-shape, got " + profile);
    }
    c.flow = flow_config_for(c.backbone);
    c.decoding.max_frames = 200;
    c.sync();
    return c;
}

RunConfig parse_run_config(const std::string & yaml) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml);
    } catch (const YAML::Exception & e) {
        throw ConfigError(std::string("config is not valid YAML: ") + e.what());
    }
    if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
    if (!root.IsMap()) throw ConfigError("config must be a mapping");
    std::string profile = "toy";
    if (root["profile"]) {
        if (!root["profile"].IsScalar()) throw ConfigError("profile must be toy or paper-shape");
        profile = root["profile"].as<std::string>();
    }
    RunConfig c = default_run_config(profile);
    Reader r(root);
    r("seed", c.seed);
    r("output_dir", c.output_dir);
    visit(c, r);
    r.reject_unknown();
    c.sync();
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig & cfg) {
    RunConfig c = cfg;
    Writer w;
    w.out << YAML::BeginMap;
    w("profile", c.profile);
    w("seed", c.seed);
    w("output_dir", c.output_dir);
    visit(c, w);
    w.out << YAML::EndMap;
    return std::string(w.out.c_str()) + "\n";
}

}  // namespace voxtools

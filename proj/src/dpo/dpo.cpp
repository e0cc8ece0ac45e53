#include "vox/dpo.h"

#include "vox/errors.h"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

VOX_BEGIN

void DPOConfig::validate() const {
    if (!(beta_semantic > 0) || !(beta_acoustic > 0)) throw ConfigError("dpo: beta values must be > 0");
    if (!(lr > 0)) throw ConfigError("dpo: lr must be > 0");
    if (semantic_weight < 0 || flow_weight < 0) throw ConfigError("dpo: loss weights must be >= 0");
    if (mixture_ratio < 0 || mixture_ratio >= 1) throw ConfigError("dpo: mixture_ratio must be in [0, 1)");
    if (epochs == 0) throw ConfigError("dpo: epochs must be >= 1");
}

void PreferencePair::validate() const {
    if (winner.empty() || loser.empty()) throw std::invalid_argument("preference pair " + id + ": empty winner or loser");
}

NoisePlan draw_noise_plan(size_t positions, size_t dims, Rng & rng) {
    NoisePlan p;
    p.x1 = Tensor({positions, dims}, rng.normal_vec(positions * dims));
    for (size_t i = 0; i < positions; ++i) p.t.push_back(real(rng.uniform()));
    return p;
}

Tensor dpo_sigmoid_loss(const Tensor & margin) { return neg(log_sigmoid(margin)); }

Tensor sequence_logprob(const Tensor & logits, const AssembledSequence & seq, bool average) {
    const size_t start = seq.repeat_pos(), n = seq.sample.a2.size() + 1;
    if (logits.ndim() != 2 || logits.dim(0) != seq.length) throw std::invalid_argument("sequence_logprob: logits must be [T, V]");
    std::vector<int> targets(seq.targets.begin() + long(start), seq.targets.begin() + long(start + n));
    Tensor lp = sum(pick(log_softmax_last(slice(logits, 0, start, n)), targets));
    return average ? scale(lp, real(1) / real(n)) : lp;
}

Tensor semantic_dpo_margin(const Tensor & pw, const Tensor & pl, const Tensor & rw, const Tensor & rl, double beta) {
    return scale(sub(sub(pw, pl), sub(rw, rl)), real(beta));
}

Tensor semantic_dpo_loss(const Tensor & pw, const Tensor & pl, const Tensor & rw, const Tensor & rl, double beta) {
    return dpo_sigmoid_loss(semantic_dpo_margin(pw, pl, rw, rl, beta));
}

Tensor flow_error_sum(const FlowHead & head, const Tensor & x0, const Tensor & h, const NoisePlan & plan) {
    const size_t n = x0.dim(0);
    if (plan.length() < n) {
        throw std::invalid_argument("flow dpo: noise plan covers " + std::to_string(plan.length()) + " positions, sequence has " +
                                    std::to_string(n));
    }
    if (plan.x1.dim(1) != x0.dim(1)) throw std::invalid_argument("flow dpo: noise plan width mismatch");
    std::vector<real> t(plan.t.begin(), plan.t.begin() + long(n));
    Tensor x1 = slice(plan.x1, 0, 0, n);
    Tensor v = head.forward(interpolate_path(x0, x1, t), t, h);
    return sum(square(sub(v, sub(x1, x0))));
}

Tensor flow_dpo_delta(const FlowHead & head, const Tensor & x0_w, const Tensor & h_w, const Tensor & x0_l,
                      const Tensor & h_l, const NoisePlan & plan) {
    return sub(flow_error_sum(head, x0_w, h_w, plan), flow_error_sum(head, x0_l, h_l, plan));
}

Tensor flow_dpo_margin(const Tensor & delta_policy, const Tensor & delta_ref, double beta) {
    return scale(sub(delta_policy, delta_ref), real(-beta));
}

Tensor flow_dpo_loss(const Tensor & delta_policy, const Tensor & delta_ref, double beta) {
    return dpo_sigmoid_loss(flow_dpo_margin(delta_policy, delta_ref, beta));
}

Tensor acoustic_targets(const std::vector<TokenFrame> & frames, size_t levels) {
    if (frames.empty()) throw std::invalid_argument("acoustic_targets: no frames");
    const size_t dims = frames[0].acoustic.size();
    std::vector<real> x;
    x.reserve(frames.size() * dims);
    for (const auto & f : frames) {
        if (f.acoustic.size() != dims) throw std::invalid_argument("acoustic_targets: ragged frames");
        for (uint8_t a : f.acoustic) x.push_back(fsq_level(a, levels));
    }
    return Tensor({frames.size(), dims}, x);
}

namespace {

struct SideOutputs {
    Tensor logprob, delta;
};

AssembledSequence assemble_response(const Backbone & b, const PreferencePair & pair, const std::vector<TokenFrame> & a2) {
    TrainingSample s{pair.prompt, pair.text, a2, std::vector<bool>(a2.size(), true)};
    return b.assemble(s);
}

// log-probs of both responses and the flow delta for one model
std::pair<Tensor, Tensor> model_side(const TtsModel & m, const PreferencePair & pair, const NoisePlan & plan,
                                     const DPOConfig & cfg, Tensor & delta) {
    const auto & bc = m.backbone.config();
    Tensor lp[2], x0[2], h[2];
    const std::vector<TokenFrame> * resp[2] = {&pair.winner, &pair.loser};
    for (int k = 0; k < 2; ++k) {
        auto seq = assemble_response(m.backbone, pair, *resp[k]);
        Tensor hidden = m.backbone.hidden(seq);
        lp[k] = sequence_logprob(m.backbone.logits(hidden), seq, cfg.average_logprobs);
        h[k] = slice(hidden, 0, seq.repeat_pos(), resp[k]->size());
        x0[k] = acoustic_targets(*resp[k], bc.acoustic_levels);
    }
    delta = flow_dpo_delta(m.flow, x0[0], h[0], x0[1], h[1], plan);
    return {lp[0], lp[1]};
}

}  // namespace

DpoTerms pair_dpo_loss(const TtsModel & policy, const TtsModel & reference, const PreferencePair & pair,
                       const NoisePlan & plan, const DPOConfig & cfg) {
    pair.validate();
    if (plan.length() < std::max(pair.winner.size(), pair.loser.size())) {
        throw std::invalid_argument("flow dpo: noise plan shorter than the pair");
    }
    Tensor d_ref, d_pol;
    std::pair<Tensor, Tensor> ref;
    {
        NoGradGuard ng;
        ref = model_side(reference, pair, plan, cfg, d_ref);
    }
    auto pol = model_side(policy, pair, plan, cfg, d_pol);
    DpoTerms out;
    Tensor sm = semantic_dpo_margin(pol.first, pol.second, ref.first, ref.second, cfg.beta_semantic);
    Tensor fm = flow_dpo_margin(d_pol, d_ref, cfg.beta_acoustic);
    out.semantic = dpo_sigmoid_loss(sm);
    out.flow = dpo_sigmoid_loss(fm);
    out.total = add(scale(out.semantic, real(cfg.semantic_weight)), scale(out.flow, real(cfg.flow_weight)));
    out.semantic_margin = sm.item();
    out.flow_margin = fm.item();
    return out;
}

TtsModel frozen_clone(const TtsModel & model) {
    Rng dummy(0);
    TtsModel copy(model.backbone.config(), model.flow.config(), dummy);
    ParamSet dst = copy.state();
    dst.copy_values_from(model.state());
    dst.set_requires_grad(false);
    return copy;
}

DpoTrainer::DpoTrainer(TtsModel & policy, const DPOConfig & cfg, uint64_t seed)
    : policy_(policy), reference_(frozen_clone(policy)), cfg_(cfg),
      opt_(policy.params(), {.lr = real(cfg.lr), .clip_norm = real(1)}), rng_(Rng(seed).split("dpo")) {
    cfg_.validate();
}

DpoStepReport DpoTrainer::step(const std::vector<PreferencePair> & batch, const std::vector<AssembledSequence> * pretrain) {
    DpoStepReport r;
    const size_t dims = policy_.flow.config().acoustic_dims;
    Tensor total = Tensor::scalar(0);
    if (!batch.empty()) {
        Tensor sem = Tensor::scalar(0), flow = Tensor::scalar(0);
        for (const auto & p : batch) {
            NoisePlan plan = draw_noise_plan(std::max(p.winner.size(), p.loser.size()), dims, rng_);
            auto t = pair_dpo_loss(policy_, reference_, p, plan, cfg_);
            sem = add(sem, t.semantic);
            flow = add(flow, t.flow);
            r.semantic_margin += t.semantic_margin / double(batch.size());
            r.flow_margin += t.flow_margin / double(batch.size());
        }
        const real inv = real(1) / real(batch.size());
        sem = scale(sem, inv);
        flow = scale(flow, inv);
        r.semantic = sem.item();
        r.flow = flow.item();
        total = add(scale(sem, real(cfg_.semantic_weight)), scale(flow, real(cfg_.flow_weight)));
    }
    if (pretrain && !pretrain->empty()) {
        Tensor pt = Tensor::scalar(0);
        for (const auto & seq : *pretrain) pt = add(pt, tts_loss(policy_, seq, rng_).total);
        pt = scale(pt, real(1) / real(pretrain->size()));
        r.pretrain = pt.item();
        r.pretrain_batch = batch.empty();
        total = add(total, pt);
    }
    r.total = total.item();
    if (total.requires_grad()) {
        backward(total);
        opt_.step();
    }
    r.step = ++steps_;
    return r;
}

std::vector<DpoStepReport> DpoTrainer::train(const std::vector<PreferencePair> & pairs, size_t batch_size,
                                             const std::vector<AssembledSequence> & pretrain) {
    if (batch_size == 0) throw ConfigError("dpo: batch size must be >= 1");
    std::vector<DpoStepReport> out;
    const bool mix = cfg_.pretrain_mixture && !pretrain.empty();
    // pretraining batches per DPO batch
    const double per = mix ? cfg_.mixture_ratio / (1 - cfg_.mixture_ratio) : 0;
    double owed = 0;
    size_t next_pt = 0;
    for (size_t e = 0; e < cfg_.epochs; ++e) {
        for (size_t i = 0; i < pairs.size(); i += batch_size) {
            std::vector<PreferencePair> b(pairs.begin() + long(i), pairs.begin() + long(std::min(pairs.size(), i + batch_size)));
            out.push_back(step(b));
            owed += per;
            while (owed >= 1) {
                std::vector<AssembledSequence> pb;
                for (size_t k = 0; k < batch_size; ++k) pb.push_back(pretrain[next_pt++ % pretrain.size()]);
                out.push_back(step({}, &pb));
                owed -= 1;
            }
        }
    }
    return out;
}

std::pair<double, double> DpoTrainer::mean_margins(const std::vector<PreferencePair> & pairs, uint64_t seed) const {
    NoGradGuard ng;
    const size_t dims = policy_.flow.config().acoustic_dims;
    double s = 0, f = 0;
    Rng base(seed);
    for (size_t i = 0; i < pairs.size(); ++i) {
        Rng r = base.split(i);
        NoisePlan plan = draw_noise_plan(std::max(pairs[i].winner.size(), pairs[i].loser.size()), dims, r);
        auto t = pair_dpo_loss(policy_, reference_, pairs[i], plan, cfg_);
        s += t.semantic_margin;
        f += t.flow_margin;
    }
    const double n = double(std::max<size_t>(1, pairs.size()));
    return {s / n, f / n};
}

// ---------------------------------------------------------------------------

std::vector<double> combined_scores(const std::vector<std::vector<double>> & raw, const std::vector<Scorer> & scorers) {
    const size_t n = raw.size();
    std::vector<double> out(n, 0);
    for (size_t j = 0; j < scorers.size(); ++j) {
        for (size_t i = 0; i < n; ++i) {
            const double oi = scorers[j].higher_is_better ? raw[i][j] : -raw[i][j];
            double below = 0;
            for (size_t k = 0; k < n; ++k) {
                if (k == i) continue;
                const double ok = scorers[j].higher_is_better ? raw[k][j] : -raw[k][j];
                below += ok < oi ? 1.0 : ok == oi ? 0.5 : 0.0;
            }
            out[i] += scorers[j].weight * (n > 1 ? below / double(n - 1) : 1.0);
        }
    }
    return out;
}

PairBuildResult build_pairs(const std::vector<PairPrompt> & prompts, const CandidateGenerator & generate,
                            size_t num_samples, const std::vector<Scorer> & scorers, Rng & rng) {
    if (num_samples < 2) throw ConfigError("build_pairs: need at least 2 samples per prompt");
    if (scorers.empty()) throw ConfigError("build_pairs: need at least one scorer");
    PairBuildResult res;
    for (const auto & prompt : prompts) {
        std::vector<Candidate> cands;
        std::vector<std::vector<double>> raw;
        for (size_t k = 0; k < num_samples; ++k) {
            Candidate c = generate(prompt, k, rng);
            if (c.id.empty()) c.id = prompt.id + "/" + std::to_string(k);
            if (c.text_length == 0) c.text_length = prompt.text.size();
            std::vector<double> row;
            std::string failed;
            for (const auto & s : scorers) {
                double v = NAN;
                try {
                    v = s.score(c);
                } catch (const std::exception & e) {
                    failed = s.name + ": " + e.what();
                    break;
                }
                if (!std::isfinite(v)) {
                    failed = s.name + ": non-finite score";
                    break;
                }
                row.push_back(v);
            }
            if (c.frames.empty()) failed = "no frames";
            if (!failed.empty()) {
                res.log.push_back("excluded " + c.id + " (" + failed + ")");
                continue;
            }
            cands.push_back(std::move(c));
            raw.push_back(std::move(row));
        }
        if (cands.size() < 2) {
            res.log.push_back("dropped " + prompt.id + ": fewer than 2 scored samples");
            continue;
        }
        auto comb = combined_scores(raw, scorers);
        // true when a ranks above b
        auto better = [&](size_t a, size_t b) {
            if (comb[a] != comb[b]) return comb[a] > comb[b];
            for (size_t j = 0; j < scorers.size(); ++j) {
                const double oa = scorers[j].higher_is_better ? raw[a][j] : -raw[a][j];
                const double ob = scorers[j].higher_is_better ? raw[b][j] : -raw[b][j];
                if (oa != ob) return oa > ob;
            }
            return a < b;
        };
        std::vector<size_t> order(cands.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), better);
        const size_t best = order.front(), worst = order.back();
        std::string gate_fail;
        for (size_t j = 0; j < scorers.size(); ++j) {
            if (!scorers[j].gate) continue;
            const double v = raw[best][j], g = *scorers[j].gate;
            if (scorers[j].higher_is_better ? v < g : v > g) gate_fail = scorers[j].name;
        }
        if (!gate_fail.empty()) {
            res.log.push_back("dropped " + prompt.id + ": best sample fails the " + gate_fail + " gate");
            continue;
        }
        res.pairs.push_back({prompt.id, prompt.voice, prompt.text, cands[best].frames, cands[worst].frames});
    }
    return res;
}

double rms_taper_db(std::span<const real> wave) {
    const size_t q = wave.size() / 4;
    if (q == 0) throw std::invalid_argument("loudness: audio too short");
    auto rms = [&](size_t start) {
        double s = 0;
        for (size_t i = start; i < start + q; ++i) s += double(wave[i]) * wave[i];
        return std::sqrt(s / double(q));
    };
    const double first = rms(0), last = rms(wave.size() - q);
    if (first <= 0 || last <= 0) throw std::invalid_argument("loudness: silent quarter");
    return 20 * std::log10(last / first);
}

Scorer loudness_consistency_scorer(double weight) {
    return {"loudness", true, weight, std::nullopt, [](const Candidate & c) {
                if (c.wave.empty()) throw std::invalid_argument("no decoded audio");
                return -std::abs(rms_taper_db(c.wave));
            }};
}

Scorer duration_scorer(double frames_per_char, double weight) {
    return {"duration", true, weight, std::nullopt, [frames_per_char](const Candidate & c) {
                if (c.frames.empty() || c.text_length == 0) throw std::invalid_argument("empty sample or text");
                const double expected = frames_per_char * double(c.text_length);
                return -std::abs(std::log(double(c.frames.size()) / expected));
            }};
}

Scorer repetition_scorer(double weight) {
    return {"repetition", false, weight, std::nullopt, [](const Candidate & c) {
                if (c.frames.size() < 2) return 0.0;
                size_t rep = 0;
                for (size_t i = 1; i < c.frames.size(); ++i) rep += c.frames[i].semantic == c.frames[i - 1].semantic;
                return double(rep) / double(c.frames.size() - 1);
            }};
}

std::map<std::string, double> read_score_file(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open score file " + path.string());
    std::map<std::string, double> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string id;
        double v;
        if (!(ls >> id >> v)) throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected '<id> <score>'");
        out[id] = v;
    }
    return out;
}

Scorer external_scorer(const std::string & name, std::map<std::string, double> scores, bool higher_is_better,
                       double weight) {
    return {name, higher_is_better, weight, std::nullopt, [scores = std::move(scores)](const Candidate & c) {
                auto it = scores.find(c.id);
                if (it == scores.end()) throw std::out_of_range("no external score for " + c.id);
                return it->second;
            }};
}

CandidateGenerator tts_candidate_generator(const TtsModel & model, const Codec * codec, SamplerSettings settings,
                                           SamplerConfig flow_sampler) {
    return [&model, codec, settings, flow_sampler](const PairPrompt & p, size_t, Rng & rng) {
        AcousticHead head = make_acoustic_head(model.flow, flow_sampler, rng);
        auto g = model.backbone.generate(p.voice, p.text, settings, head, rng);
        Candidate c;
        c.frames = std::move(g.frames);
        c.text_length = p.text.size();
        if (codec && !c.frames.empty()) c.wave = codec->decode(c.frames);
        return c;
    };
}

namespace {

std::string file_stem(const std::string & id) {
    std::string s = id;
    for (char & ch : s)
        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') ch = '_';
    return s;
}

void write_frames(const std::filesystem::path & p, const std::vector<TokenFrame> & f, const TokenLayout & layout) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    write_token_frames(out, f, layout);
    if (!out) throw IoError("write failed: " + p.string());
}

std::vector<TokenFrame> read_frames(const std::filesystem::path & p, const TokenLayout & layout) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    return read_token_frames(in, layout);
}

}  // namespace

void save_pairs(const std::vector<PreferencePair> & pairs, const std::filesystem::path & jsonl, const TokenLayout & layout) {
    const auto dir = jsonl.parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);
    std::ofstream out(jsonl);
    if (!out) throw IoError("cannot write " + jsonl.string());
    for (size_t i = 0; i < pairs.size(); ++i) {
        const auto & p = pairs[i];
        const std::string stem = std::to_string(i) + "_" + file_stem(p.id);
        nlohmann::json j;
        j["id"] = p.id;
        j["text"] = p.text;
        j["prompt"] = stem + ".prompt.tok";
        j["winner"] = stem + ".winner.tok";
        j["loser"] = stem + ".loser.tok";
        j["n_winner"] = p.winner.size();
        j["n_loser"] = p.loser.size();
        write_frames(dir / j["prompt"].get<std::string>(), p.prompt, layout);
        write_frames(dir / j["winner"].get<std::string>(), p.winner, layout);
        write_frames(dir / j["loser"].get<std::string>(), p.loser, layout);
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("write failed: " + jsonl.string());
}

std::vector<PreferencePair> load_pairs(const std::filesystem::path & jsonl, const TokenLayout & layout) {
    std::ifstream in(jsonl);
    if (!in) throw IoError("cannot open " + jsonl.string());
    const auto dir = jsonl.parent_path();
    std::vector<PreferencePair> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            PreferencePair p;
            p.id = j.at("id").get<std::string>();
            p.text = j.at("text").get<std::vector<int>>();
            p.prompt = read_frames(dir / j.at("prompt").get<std::string>(), layout);
            p.winner = read_frames(dir / j.at("winner").get<std::string>(), layout);
            p.loser = read_frames(dir / j.at("loser").get<std::string>(), layout);
            p.validate();
            out.push_back(std::move(p));
        } catch (const nlohmann::json::exception & e) {
            throw IoError(jsonl.string() + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const std::invalid_argument & e) {
            throw IoError(jsonl.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

VOX_END

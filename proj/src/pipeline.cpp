#include "nautilus/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "nautilus/errors.hpp"
#include "nautilus/optim.hpp"

namespace nautilus {

namespace {

Mat draw_noise(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.rfind(prefix, 0) == 0;
}

void merge_grads(std::map<std::string, Mat>& accum, std::map<std::string, Mat> grads) {
  for (auto& [name, g] : grads) {
    auto it = accum.find(name);
    if (it == accum.end())
      accum.emplace(name, std::move(g));
    else
      it->second += g;
  }
}

// Every 10th record is validation; the rest train.
void split_corpus(int n, std::vector<int>& train, std::vector<int>& val) {
  for (int i = 0; i < n; ++i) {
    if (i % 10 == 9)
      val.push_back(i);
    else
      train.push_back(i);
  }
}

const PhonemeTranscript& require_transcript(const UtteranceRecord& rec,
                                            const std::string& stage) {
  if (!rec.transcript.has_value())
    throw DataError(stage + ": utterance " + rec.utterance_id + " of speaker " +
                    rec.speaker_id + " has no transcript");
  return *rec.transcript;
}

void check_record_shapes(const UtteranceRecord& rec, const ArchManifest& arch,
                         const std::string& stage) {
  if (rec.mel.dim() != arch.mel_dim)
    throw DataError(stage + ": utterance " + rec.utterance_id + " mel dim " +
                    std::to_string(rec.mel.dim()) + " does not match model " +
                    std::to_string(arch.mel_dim));
}

struct GraphTerms {
  ad::Var root;
  double tts = 0.0, sts = 0.0, stt = 0.0, ttt = 0.0;
  double tie = 0.0, tie_fwd = 0.0, tie_bwd = 0.0;
  double goals = 0.0, train = 0.0;
};

// Joint-goal graph for one transcribed utterance. When sample is false the
// latents use their means and no dropout is applied (validation mode).
GraphTerms build_joint_graph(ad::ParamGraph& pg, const Model& m,
                             const UtteranceRecord& rec, const StageConfig& cfg,
                             const DropoutPlan& drop, Rng* noise, int speaker) {
  const PhonemeTranscript& t = require_transcript(rec, "training");
  const int frames = t.total_frames();
  if (frames != rec.mel.frames())
    throw DataError("training: utterance " + rec.utterance_id +
                    " transcript frames do not match mel");
  graph::Dist dt = graph::tenc(pg, m.arch, t, drop);
  graph::Dist ds = graph::senc(pg, m.arch, ad::constant(rec.mel.values), drop);
  Mat eps_t, eps_s;
  if (noise) {
    eps_t = draw_noise(*noise, frames, m.arch.latent);
    eps_s = draw_noise(*noise, frames, m.arch.latent);
  }
  ad::Var zt = graph::reparam(dt, noise ? &eps_t : nullptr);
  ad::Var zs = graph::reparam(ds, noise ? &eps_s : nullptr);
  ad::Var mel_c = ad::constant(rec.mel.values);

  GraphTerms g;
  ad::Var tts =
      graph::mae_g(graph::sdec(pg, m.arch, zt, speaker, mel_c, drop), rec.mel.values);
  ad::Var sts =
      graph::mae_g(graph::sdec(pg, m.arch, zs, speaker, mel_c, drop), rec.mel.values);
  ad::Var goals = ad::add(tts, ad::affine(sts, cfg.weights.alpha_sts, 0.0));
  if (cfg.text_decoder_enabled) {
    const std::vector<int> labels = upsample_transcript(t);
    ad::Var stt = ad::ce_rows(graph::tdec(pg, m.arch, zs, drop), labels);
    goals = ad::add(goals, ad::affine(stt, cfg.weights.alpha_stt, 0.0));
    g.stt = ad::scalar(stt);
    // Diagnostic only; never reaches the optimized root.
    g.ttt = ad::scalar(ad::ce_rows(graph::tdec(pg, m.arch, zt, drop), labels));
  }
  ad::Var kf = graph::kld_g(dt, ds);
  ad::Var kb = graph::kld_g(ds, dt);
  ad::Var tie = ad::affine(ad::add(kf, kb), 0.5, 0.0);
  g.root = ad::add(goals, ad::affine(tie, cfg.weights.beta, 0.0));
  g.goals = ad::scalar(goals);
  g.tts = ad::scalar(tts);
  g.sts = ad::scalar(sts);
  g.tie_fwd = ad::scalar(kf);
  g.tie_bwd = ad::scalar(kb);
  g.tie = ad::scalar(tie);
  g.train = ad::scalar(g.root);
  return g;
}

struct MeanAccum {
  std::map<std::string, double> sums;
  int count = 0;

  void add(const std::string& name, double v) { sums[name] += v; }
  void bump() { ++count; }
  LossReport report(std::uint64_t step) const {
    LossReport r;
    r.step = step;
    for (const auto& [name, sum] : sums)
      r.set(name, sum / static_cast<double>(std::max(count, 1)));
    return r;
  }
};

// Fixed-budget vocoder epoch shared by initial training and criterion-sharing
// callers; welding replays the same plan and scaling.
double run_vocoder_epoch(Vocoder& voc, const std::vector<const UtteranceRecord*>& recs,
                         const std::vector<int>& speakers, int epoch,
                         const VocoderTrainConfig& cfg, Adam& adam) {
  std::vector<int> frame_counts;
  frame_counts.reserve(recs.size());
  for (const auto* r : recs) frame_counts.push_back(r->mel.frames());
  const auto plan = voc_epoch_plan(cfg.seed, epoch, frame_counts, cfg.segment_frames);
  const int spf = voc.arch.samples_per_frame;
  double total = 0.0;
  int count = 0;
  for (std::size_t b = 0; b < plan.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t end =
        std::min(plan.size(), b + static_cast<std::size_t>(cfg.batch_size));
    const double inv = 1.0 / static_cast<double>(end - b);
    std::map<std::string, Mat> accum;
    for (std::size_t i = b; i < end; ++i) {
      const VocBatchItem& item = plan[i];
      const UtteranceRecord& rec = *recs[static_cast<std::size_t>(item.record)];
      const int s0 = item.start_frame * spf;
      const int n = item.frames * spf;
      std::vector<int> prev_ids(static_cast<std::size_t>(n));
      std::vector<int> labels(static_cast<std::size_t>(n));
      std::vector<int> frame_map(static_cast<std::size_t>(n));
      for (int s = 0; s < n; ++s) {
        const int gs = s0 + s;
        prev_ids[static_cast<std::size_t>(s)] =
            gs == 0 ? -1
                    : static_cast<int>(rec.waveform.codes[static_cast<std::size_t>(gs - 1)]);
        labels[static_cast<std::size_t>(s)] =
            static_cast<int>(rec.waveform.codes[static_cast<std::size_t>(gs)]);
        frame_map[static_cast<std::size_t>(s)] = s / spf;
      }
      ad::ParamGraph pg(voc.params.values);
      ad::Var cond =
          ad::constant(rec.mel.values.middleRows(item.start_frame, item.frames));
      ad::Var probs = graph::voc(pg, voc.arch, prev_ids, cond, frame_map,
                                 speakers[static_cast<std::size_t>(item.record)]);
      ad::Var ce = ad::ce_rows(probs, labels);
      ad::backward(ad::affine(ce, inv, 0.0));
      total += ad::scalar(ce);
      ++count;
      merge_grads(accum, pg.grads());
    }
    adam.step(voc.params.values, accum);
    ++voc.params.step;
  }
  return total / static_cast<double>(std::max(count, 1));
}

}  // namespace

StageConfig StageConfig::scenario_a() {
  StageConfig c;
  c.learning_rate = 1e-3;
  c.adapt_acoustic_epochs = 256;
  c.adapt_vocoder_epochs = 128;
  c.weld_epochs = 64;
  return c;
}

StageConfig StageConfig::scenario_b() {
  StageConfig c;
  c.learning_rate = 1e-3;
  c.adapt_acoustic_epochs = 256;
  c.adapt_vocoder_epochs = 64;
  c.weld_epochs = 32;
  return c;
}

std::string StageConfig::serialize() const {
  std::string out;
  const auto put = [&out](const std::string& key, const std::string& value) {
    out += key;
    out += " = ";
    out += value;
    out += '\n';
  };
  put("stage.learning_rate", format_g17(learning_rate));
  put("stage.batch_size", std::to_string(batch_size));
  put("stage.train_max_epochs", std::to_string(train_max_epochs));
  put("stage.vocoder_train_epochs", std::to_string(vocoder_train_epochs));
  put("stage.adapt_acoustic_epochs", std::to_string(adapt_acoustic_epochs));
  put("stage.adapt_vocoder_epochs", std::to_string(adapt_vocoder_epochs));
  put("stage.weld_epochs", std::to_string(weld_epochs));
  put("stage.mixin_rate", format_g17(mixin_rate));
  put("stage.inference_std_scale", format_g17(inference_std_scale));
  put("stage.early_stop_patience", std::to_string(early_stop_patience));
  put("stage.segment_frames", std::to_string(segment_frames));
  put("stage.seed", std::to_string(seed));
  put("stage.weld_enabled", weld_enabled ? "1" : "0");
  put("stage.cycle_enabled", cycle_enabled ? "1" : "0");
  put("stage.text_decoder_enabled", text_decoder_enabled ? "1" : "0");
  put("loss.alpha_sts", format_g17(weights.alpha_sts));
  put("loss.alpha_stt", format_g17(weights.alpha_stt));
  put("loss.beta", format_g17(weights.beta));
  put("loss.gamma", format_g17(weights.gamma));
  put("loss.alpha_sup", format_g17(weights.alpha_sup));
  return out;
}

namespace {

double parse_double_setting(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad value for " + key + ": " + value);
  }
}

long long parse_int_setting(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad value for " + key + ": " + value);
  }
}

bool parse_bool_setting(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw ConfigError("bad value for " + key + ": " + value);
}

}  // namespace

void apply_stage_setting(StageConfig& cfg, const std::string& key,
                         const std::string& value) {
  if (key == "stage.learning_rate")
    cfg.learning_rate = parse_double_setting(key, value);
  else if (key == "stage.batch_size")
    cfg.batch_size = static_cast<int>(parse_int_setting(key, value));
  else if (key == "stage.train_max_epochs")
    cfg.train_max_epochs = static_cast<int>(parse_int_setting(key, value));
  else if (key == "stage.vocoder_train_epochs")
    cfg.vocoder_train_epochs = static_cast<int>(parse_int_setting(key, value));
  else if (key == "stage.adapt_acoustic_epochs")
    cfg.adapt_acoustic_epochs = static_cast<int>(parse_int_setting(key, value));
  else if (key == "stage.adapt_vocoder_epochs")
    cfg.adapt_vocoder_epochs = static_cast<int>(parse_int_setting(key, value));
  else if (key == "stage.weld_epochs")
    cfg.weld_epochs = static_cast<int>(parse_int_setting(key, value));
  else if (key == "stage.mixin_rate")
    cfg.mixin_rate = parse_double_setting(key, value);
  else if (key == "stage.inference_std_scale")
    cfg.inference_std_scale = parse_double_setting(key, value);
  else if (key == "stage.early_stop_patience")
    cfg.early_stop_patience = static_cast<int>(parse_int_setting(key, value));
  else if (key == "stage.segment_frames")
    cfg.segment_frames = static_cast<int>(parse_int_setting(key, value));
  else if (key == "stage.seed")
    cfg.seed = static_cast<std::uint64_t>(parse_int_setting(key, value));
  else if (key == "stage.weld_enabled")
    cfg.weld_enabled = parse_bool_setting(key, value);
  else if (key == "stage.cycle_enabled")
    cfg.cycle_enabled = parse_bool_setting(key, value);
  else if (key == "stage.text_decoder_enabled")
    cfg.text_decoder_enabled = parse_bool_setting(key, value);
  else if (key == "loss.alpha_sts")
    cfg.weights.alpha_sts = parse_double_setting(key, value);
  else if (key == "loss.alpha_stt")
    cfg.weights.alpha_stt = parse_double_setting(key, value);
  else if (key == "loss.beta")
    cfg.weights.beta = parse_double_setting(key, value);
  else if (key == "loss.gamma")
    cfg.weights.gamma = parse_double_setting(key, value);
  else if (key == "loss.alpha_sup")
    cfg.weights.alpha_sup = parse_double_setting(key, value);
  else
    throw ConfigError("unknown setting: " + key);
}

void StageConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (train_max_epochs < 0 || vocoder_train_epochs < 0 || adapt_acoustic_epochs < 0 ||
      adapt_vocoder_epochs < 0 || weld_epochs < 0)
    throw ConfigError("epoch budgets must be non-negative");
  if (mixin_rate < 0.0 || mixin_rate > 1.0)
    throw ConfigError("mixin rate must lie in [0, 1]");
  if (inference_std_scale < 0.0)
    throw ConfigError("inference std scale must be non-negative");
  if (segment_frames < 1) throw ConfigError("segment frames must be positive");
  weights.validate();
}

TrainResult train_initial(Model& model, Vocoder& vocoder, const Corpus& corpus,
                          const StageConfig& cfg) {
  cfg.validate();
  if (corpus.speaker_ids().size() < 2)
    throw DataError("initial training needs at least two speakers");
  if (corpus.records.empty()) throw DataError("initial training corpus is empty");
  for (const auto& rec : corpus.records) {
    require_transcript(rec, "training");
    check_record_shapes(rec, model.arch, "training");
  }

  if (!cfg.text_decoder_enabled) {
    for (auto it = model.params.values.begin(); it != model.params.values.end();)
      it = starts_with(it->first, "tdec.") ? model.params.values.erase(it) : ++it;
  }

  std::vector<int> train_idx, val_idx;
  split_corpus(static_cast<int>(corpus.records.size()), train_idx, val_idx);

  TrainResult result;
  Adam adam(AdamConfig{cfg.learning_rate});
  std::map<std::string, Mat> best_params;
  double best_val = std::numeric_limits<double>::infinity();
  int stale = 0;

  for (int epoch = 0; epoch < cfg.train_max_epochs; ++epoch) {
    std::vector<int> order = train_idx;
    Rng order_rng = Rng::stream(cfg.seed, "order", static_cast<std::uint64_t>(epoch));
    order_rng.shuffle(order);
    Rng noise = Rng::stream(cfg.seed, "noise", static_cast<std::uint64_t>(epoch));
    Rng dropout_rng =
        Rng::stream(cfg.seed, "dropout", static_cast<std::uint64_t>(epoch));
    DropoutPlan drop{true, &dropout_rng};
    MeanAccum mean;

    for (std::size_t b = 0; b < order.size();
         b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      const double inv = 1.0 / static_cast<double>(end - b);
      std::map<std::string, Mat> accum;
      for (std::size_t i = b; i < end; ++i) {
        const UtteranceRecord& rec =
            corpus.records[static_cast<std::size_t>(order[i])];
        ad::ParamGraph pg(model.params.values);
        GraphTerms g = build_joint_graph(pg, model, rec, cfg, drop, &noise,
                                         model.speaker_index(rec.speaker_id));
        ad::backward(ad::affine(g.root, inv, 0.0));
        merge_grads(accum, pg.grads());
        mean.add("tts", g.tts);
        mean.add("sts", g.sts);
        if (cfg.text_decoder_enabled) {
          mean.add("stt", g.stt);
          mean.add("ttt", g.ttt);
        }
        mean.add("tie_fwd", g.tie_fwd);
        mean.add("tie_bwd", g.tie_bwd);
        mean.add("tie", g.tie);
        mean.add("goals", g.goals);
        mean.add("train", g.train);
        mean.bump();
      }
      adam.step(model.params.values, accum);
      ++model.params.step;
    }
    result.model_curves.push_back(mean.report(static_cast<std::uint64_t>(epoch)));

    if (!val_idx.empty() && cfg.early_stop_patience > 0) {
      double val = 0.0;
      const DropoutPlan eval;
      for (int i : val_idx) {
        const UtteranceRecord& rec = corpus.records[static_cast<std::size_t>(i)];
        ad::ParamGraph pg(model.params.values,
                          [](const std::string&) { return false; });
        val += build_joint_graph(pg, model, rec, cfg, eval, nullptr,
                                 model.speaker_index(rec.speaker_id))
                   .train;
      }
      val /= static_cast<double>(val_idx.size());
      if (val < best_val) {
        best_val = val;
        best_params = model.params.values;
        stale = 0;
      } else if (++stale >= cfg.early_stop_patience) {
        break;
      }
    }
  }
  if (!best_params.empty()) model.params.values = std::move(best_params);
  model.params.flags |= kStageTrained;

  // Vocoder, trained separately on the natural codes of the same corpus.
  std::vector<const UtteranceRecord*> recs;
  std::vector<int> speakers;
  for (int i : train_idx) {
    const UtteranceRecord& rec = corpus.records[static_cast<std::size_t>(i)];
    recs.push_back(&rec);
    speakers.push_back(vocoder.speaker_index(rec.speaker_id));
  }
  VocoderTrainConfig vcfg;
  vcfg.learning_rate = cfg.learning_rate;
  vcfg.batch_size = cfg.batch_size;
  vcfg.segment_frames = cfg.segment_frames;
  vcfg.seed = cfg.seed;
  Adam vadam(AdamConfig{cfg.learning_rate});
  for (int epoch = 0; epoch < cfg.vocoder_train_epochs; ++epoch) {
    const double ce = run_vocoder_epoch(vocoder, recs, speakers, epoch, vcfg, vadam);
    LossReport r;
    r.step = static_cast<std::uint64_t>(epoch);
    r.set("voc", ce);
    result.vocoder_curves.push_back(r);
  }
  vocoder.params.flags |= kStageTrained;
  return result;
}

std::vector<LossReport> clone_unsupervised_step1(
    Model& model, const std::vector<UtteranceRecord>& slice, const StageConfig& cfg) {
  cfg.validate();
  if (!(model.params.flags & kStageTrained))
    throw PipelineError("unsupervised adaptation requires the TRAINED marker");
  if (slice.empty()) throw DataError("adaptation slice is empty");
  for (const auto& rec : slice) check_record_shapes(rec, model.arch, "adaptation");

  remove_speaker_biases(model.params, model.arch, "sdec.");
  Adam adam(AdamConfig{cfg.learning_rate});
  const auto trainable = [](const std::string& n) { return starts_with(n, "sdec."); };
  const DropoutPlan eval;
  std::vector<LossReport> curves;
  curves.reserve(static_cast<std::size_t>(cfg.adapt_acoustic_epochs));

  for (int epoch = 0; epoch < cfg.adapt_acoustic_epochs; ++epoch) {
    std::vector<int> order(slice.size());
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng =
        Rng::stream(cfg.seed, "adapt.order", static_cast<std::uint64_t>(epoch));
    order_rng.shuffle(order);
    Rng noise = Rng::stream(cfg.seed, "adapt.noise", static_cast<std::uint64_t>(epoch));
    MeanAccum mean;

    for (std::size_t b = 0; b < order.size();
         b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      const double inv = 1.0 / static_cast<double>(end - b);
      std::map<std::string, Mat> accum;
      for (std::size_t i = b; i < end; ++i) {
        const UtteranceRecord& rec =
            slice[static_cast<std::size_t>(order[i])];
        ad::ParamGraph pg(model.params.values, trainable);
        graph::Dist ds =
            graph::senc(pg, model.arch, ad::constant(rec.mel.values), eval);
        Mat eps = draw_noise(noise, rec.mel.frames(), model.arch.latent);
        ad::Var zs = graph::reparam(ds, &eps);
        ad::Var recon = graph::sdec(pg, model.arch, zs, kNoSpeaker,
                                    ad::constant(rec.mel.values), eval);
        ad::Var sts = graph::mae_g(recon, rec.mel.values);
        ad::Var root = sts;
        if (cfg.cycle_enabled) {
          graph::Dist dr = graph::senc(pg, model.arch, recon, eval);
          ad::Var cycle = graph::tie_g(ds, dr);
          root = ad::add(sts, ad::affine(cycle, cfg.weights.beta, 0.0));
          mean.add("cycle", ad::scalar(cycle));
        }
        ad::backward(ad::affine(root, inv, 0.0));
        merge_grads(accum, pg.grads());
        mean.add("sts", ad::scalar(sts));
        mean.add("adapt", ad::scalar(root));
        mean.bump();
      }
      adam.step(model.params.values, accum);
      ++model.params.step;
    }
    curves.push_back(mean.report(static_cast<std::uint64_t>(epoch)));
  }
  model.params.flags |= kStageAdaptedAcoustic;
  return curves;
}

std::vector<LossReport> clone_supervised_step1(
    Model& model, const std::vector<UtteranceRecord>& slice, const StageConfig& cfg) {
  cfg.validate();
  if (!(model.params.flags & kStageTrained))
    throw PipelineError("supervised adaptation requires the TRAINED marker");
  if (slice.empty()) throw DataError("adaptation slice is empty");
  for (const auto& rec : slice) {
    require_transcript(rec, "supervised adaptation");
    check_record_shapes(rec, model.arch, "supervised adaptation");
  }

  remove_speaker_biases(model.params, model.arch, "sdec.");
  Adam adam(AdamConfig{cfg.learning_rate});
  const auto trainable = [](const std::string& n) {
    return starts_with(n, "sdec.") || starts_with(n, "tenc.");
  };
  const DropoutPlan eval;
  std::vector<LossReport> curves;
  curves.reserve(static_cast<std::size_t>(cfg.adapt_acoustic_epochs));

  for (int epoch = 0; epoch < cfg.adapt_acoustic_epochs; ++epoch) {
    std::vector<int> order(slice.size());
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng =
        Rng::stream(cfg.seed, "adapt.order", static_cast<std::uint64_t>(epoch));
    order_rng.shuffle(order);
    Rng noise = Rng::stream(cfg.seed, "adapt.noise", static_cast<std::uint64_t>(epoch));
    MeanAccum mean;

    for (std::size_t b = 0; b < order.size();
         b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      const double inv = 1.0 / static_cast<double>(end - b);
      std::map<std::string, Mat> accum;
      for (std::size_t i = b; i < end; ++i) {
        const UtteranceRecord& rec =
            slice[static_cast<std::size_t>(order[i])];
        const PhonemeTranscript& t = *rec.transcript;
        if (t.total_frames() != rec.mel.frames())
          throw DataError("supervised adaptation: utterance " + rec.utterance_id +
                          " transcript frames do not match mel");
        ad::ParamGraph pg(model.params.values, trainable);
        graph::Dist dt = graph::tenc(pg, model.arch, t, eval);
        graph::Dist ds =
            graph::senc(pg, model.arch, ad::constant(rec.mel.values), eval);
        Mat eps_t = draw_noise(noise, rec.mel.frames(), model.arch.latent);
        Mat eps_s = draw_noise(noise, rec.mel.frames(), model.arch.latent);
        ad::Var zt = graph::reparam(dt, &eps_t);
        ad::Var zs = graph::reparam(ds, &eps_s);
        ad::Var mel_c = ad::constant(rec.mel.values);
        ad::Var tts = graph::mae_g(
            graph::sdec(pg, model.arch, zt, kNoSpeaker, mel_c, eval), rec.mel.values);
        ad::Var sts = graph::mae_g(
            graph::sdec(pg, model.arch, zs, kNoSpeaker, mel_c, eval), rec.mel.values);
        ad::Var tie = graph::tie_g(dt, ds);
        ad::Var root =
            ad::add(tts, ad::add(ad::affine(sts, cfg.weights.alpha_sup, 0.0),
                                 ad::affine(tie, cfg.weights.beta, 0.0)));
        ad::backward(ad::affine(root, inv, 0.0));
        merge_grads(accum, pg.grads());
        mean.add("tts", ad::scalar(tts));
        mean.add("sts", ad::scalar(sts));
        mean.add("tie", ad::scalar(tie));
        mean.add("adapt", ad::scalar(root));
        mean.bump();
      }
      adam.step(model.params.values, accum);
      ++model.params.step;
    }
    curves.push_back(mean.report(static_cast<std::uint64_t>(epoch)));
  }
  model.params.flags |= kStageAdaptedAcoustic;
  return curves;
}

WeldResult weld(Model& model, Vocoder& vocoder,
                const std::vector<UtteranceRecord>& slice, const StageConfig& cfg) {
  cfg.validate();
  if (!(model.params.flags & kStageAdaptedAcoustic))
    throw PipelineError("welding requires the ADAPTED_AC marker");
  if (!(vocoder.params.flags & kStageAdaptedVocoder))
    throw PipelineError("welding requires the ADAPTED_VOC marker");
  if (slice.empty()) throw DataError("welding slice is empty");
  for (const auto& rec : slice) {
    check_record_shapes(rec, model.arch, "welding");
    if (static_cast<int>(rec.waveform.codes.size()) !=
        rec.mel.frames() * vocoder.arch.samples_per_frame)
      throw DataError("welding: utterance " + rec.utterance_id +
                      " codes do not cover mel frames");
  }

  std::vector<int> frame_counts;
  frame_counts.reserve(slice.size());
  for (const auto& rec : slice) frame_counts.push_back(rec.mel.frames());
  const int spf = vocoder.arch.samples_per_frame;
  const auto sdec_trainable = [](const std::string& n) {
    return starts_with(n, "sdec.");
  };

  Adam sdec_adam(AdamConfig{cfg.learning_rate});
  Adam voc_adam(AdamConfig{cfg.learning_rate});
  WeldResult result;
  std::uint64_t generated = 0, drawn = 0;

  for (int epoch = 0; epoch < cfg.weld_epochs; ++epoch) {
    // Full-utterance windows, in the same deterministic order the plain
    // vocoder adaptation would visit them.
    const auto plan = voc_epoch_plan(cfg.seed, epoch, frame_counts,
                                     std::numeric_limits<int>::max());
    Rng mixin_rng = Rng::stream(cfg.seed, "mixin", static_cast<std::uint64_t>(epoch));
    MeanAccum mean;

    for (std::size_t b = 0; b < plan.size();
         b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(plan.size(), b + static_cast<std::size_t>(cfg.batch_size));
      const double inv = 1.0 / static_cast<double>(end - b);
      std::map<std::string, Mat> sdec_accum, voc_accum;
      for (std::size_t i = b; i < end; ++i) {
        const VocBatchItem& item = plan[i];
        const UtteranceRecord& rec = slice[static_cast<std::size_t>(item.record)];
        const int frames = item.frames;
        const DropoutPlan eval;

        ad::ParamGraph model_pg(model.params.values, sdec_trainable);
        ad::ParamGraph voc_pg(vocoder.params.values);

        // Mean-value LLE reconstruction of the whole utterance.
        graph::Dist ds =
            graph::senc(model_pg, model.arch, ad::constant(rec.mel.values), eval);
        ad::Var z = graph::reparam(ds, nullptr);
        ad::Var recon = graph::sdec(model_pg, model.arch, z, kNoSpeaker,
                                    ad::constant(rec.mel.values), eval);
        ad::Var sts = graph::mae_g(recon, rec.mel.values);

        // Mix generated and natural frames for the conditioning window.
        Mat gen_mask = Mat::Zero(frames, model.arch.mel_dim);
        Mat nat_crop = rec.mel.values.middleRows(item.start_frame, frames);
        for (int f = 0; f < frames; ++f) {
          const bool take_generated = mixin_rng.uniform() < cfg.mixin_rate;
          ++drawn;
          if (take_generated) {
            ++generated;
            gen_mask.row(f).setOnes();
            nat_crop.row(f).setZero();
          }
        }
        std::vector<int> window(static_cast<std::size_t>(frames));
        std::iota(window.begin(), window.end(), item.start_frame);
        ad::Var gen_crop = ad::gather_rows(recon, window);
        ad::Var cond =
            ad::add(ad::mul_const(gen_crop, gen_mask), ad::constant(nat_crop));

        const int s0 = item.start_frame * spf;
        const int n = frames * spf;
        std::vector<int> prev_ids(static_cast<std::size_t>(n));
        std::vector<int> labels(static_cast<std::size_t>(n));
        std::vector<int> frame_map(static_cast<std::size_t>(n));
        for (int s = 0; s < n; ++s) {
          const int gs = s0 + s;
          prev_ids[static_cast<std::size_t>(s)] =
              gs == 0
                  ? -1
                  : static_cast<int>(rec.waveform.codes[static_cast<std::size_t>(gs - 1)]);
          labels[static_cast<std::size_t>(s)] =
              static_cast<int>(rec.waveform.codes[static_cast<std::size_t>(gs)]);
          frame_map[static_cast<std::size_t>(s)] = s / spf;
        }
        ad::Var probs =
            graph::voc(voc_pg, vocoder.arch, prev_ids, cond, frame_map, kNoSpeaker);
        ad::Var voc_ce = ad::ce_rows(probs, labels);

        // The vocoder trains on its own goal, exactly as in plain adaptation;
        // the decoder trains on sts + gamma * voc through the mixed frames.
        ad::Var voc_root = ad::affine(voc_ce, inv, 0.0);
        ad::backward(voc_root);
        merge_grads(voc_accum, voc_pg.grads());
        ad::clear_grads({voc_root});
        ad::Var weld_root = ad::affine(
            ad::add(sts, ad::affine(voc_ce, cfg.weights.gamma, 0.0)), inv, 0.0);
        ad::backward(weld_root);
        merge_grads(sdec_accum, model_pg.grads());

        const double sts_v = ad::scalar(sts);
        const double voc_v = ad::scalar(voc_ce);
        mean.add("sts", sts_v);
        mean.add("voc", voc_v);
        mean.add("weld", sts_v + cfg.weights.gamma * voc_v);
        mean.bump();
      }
      voc_adam.step(vocoder.params.values, voc_accum);
      ++vocoder.params.step;
      if (!sdec_accum.empty()) {
        sdec_adam.step(model.params.values, sdec_accum);
        ++model.params.step;
      }
    }
    result.curves.push_back(mean.report(static_cast<std::uint64_t>(epoch)));
  }
  result.generated_fraction =
      drawn == 0 ? 0.0 : static_cast<double>(generated) / static_cast<double>(drawn);
  model.params.flags |= kStageWelded;
  vocoder.params.flags |= kStageWelded;
  return result;
}

InferenceResult infer_tts(const Model& model, const Vocoder& vocoder,
                          const PhonemeTranscript& transcript, const StageConfig& cfg,
                          std::uint64_t seed, GenMode mode) {
  cfg.validate();
  LLEDistribution d = text_encoder_forward(model, transcript);
  Rng noise = Rng::stream(seed, "tts.noise");
  Mat eps = draw_noise(noise, d.mean.rows(), d.mean.cols());
  LLESequence z;
  z.z = d.mean + (cfg.inference_std_scale * d.std).cwiseProduct(eps);
  InferenceResult out;
  out.mel = speech_decoder_forward(model, z, kNoSpeaker, std::nullopt);
  out.codes = vocoder_generate(vocoder, out.mel, kNoSpeaker, seed, mode);
  return out;
}

InferenceResult infer_vc(const Model& model, const Vocoder& vocoder,
                         const MelMatrix& source_mel, const StageConfig& cfg,
                         std::uint64_t seed, GenMode mode) {
  cfg.validate();
  LLEDistribution d = speech_encoder_forward(model, source_mel);
  LLESequence z;
  z.z = d.mean;
  InferenceResult out;
  out.mel = speech_decoder_forward(model, z, kNoSpeaker, std::nullopt);
  out.mel.frame_shift_ms = source_mel.frame_shift_ms;
  out.mel.window_ms = source_mel.window_ms;
  out.codes = vocoder_generate(vocoder, out.mel, kNoSpeaker, seed, mode);
  return out;
}

}  // namespace nautilus

#include "nautilus/diagnostics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "nautilus/errors.hpp"
#include "nautilus/vocoder.hpp"

namespace nautilus {

CurveLog::CurveLog(const std::string& path) : path_(path) {
  {
    std::ifstream in(path_);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const LossReport r = LossReport::parse_line(line);
      if (have_last_ && r.step <= last_step_)
        throw DataError("curve log steps not increasing in " + path_);
      last_step_ = r.step;
      have_last_ = true;
    }
  }
  std::ofstream out(path_, std::ios::app);
  if (!out) throw IoError("cannot open curve log for writing: " + path_);
}

void CurveLog::append(const LossReport& report) {
  if (have_last_ && report.step <= last_step_)
    throw DataError("curve log step " + std::to_string(report.step) +
                    " does not advance past " + std::to_string(last_step_));
  std::ofstream out(path_, std::ios::app);
  if (!out) throw IoError("cannot open curve log for writing: " + path_);
  out << report.line() << '\n';
  out.flush();
  if (!out) throw IoError("short write to curve log: " + path_);
  last_step_ = report.step;
  have_last_ = true;
}

std::vector<LossReport> load_curves(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open curve log: " + path);
  std::vector<LossReport> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    LossReport r = LossReport::parse_line(line);
    if (!out.empty() && r.step <= out.back().step)
      throw DataError("curve log steps not increasing in " + path);
    out.push_back(std::move(r));
  }
  return out;
}

LLEDump dump_lle(const Model& model, const UtteranceRecord& utt, LLESource which,
                 const std::string& variant) {
  LLEDump d;
  d.speaker_id = utt.speaker_id;
  d.utterance_id = utt.utterance_id;
  d.variant = variant;
  d.source = which;
  LLEDistribution dist;
  if (which == LLESource::kText) {
    if (!utt.transcript.has_value())
      throw DataError("text encoder dump needs a transcript: " + utt.utterance_id);
    dist = text_encoder_forward(model, *utt.transcript);
  } else {
    dist = speech_encoder_forward(model, utt.mel);
  }
  d.mean = dist.mean;
  d.std = dist.std;
  return d;
}

void save_lle_dump(const LLEDump& dump, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  write_magic(out, "LLED");
  write_u32(out, 1);
  write_string(out, dump.speaker_id);
  write_string(out, dump.utterance_id);
  write_string(out, dump.variant);
  write_u32(out, dump.source == LLESource::kText ? 0u : 1u);
  write_u32(out, static_cast<std::uint32_t>(dump.frames()));
  write_u32(out, static_cast<std::uint32_t>(dump.dims()));
  write_mat_f64(out, dump.mean);
  write_mat_f64(out, dump.std);
  if (!out) throw IoError("short write: " + path);
}

LLEDump load_lle_dump(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  expect_magic(in, "LLED", path);
  const std::uint32_t version = read_u32(in, path);
  if (version != 1) throw IoError("unsupported dump version in " + path);
  LLEDump d;
  d.speaker_id = read_string(in, path);
  d.utterance_id = read_string(in, path);
  d.variant = read_string(in, path);
  const std::uint32_t src = read_u32(in, path);
  if (src > 1) throw IoError("bad encoder tag in " + path);
  d.source = src == 0 ? LLESource::kText : LLESource::kSpeech;
  const int t = static_cast<int>(read_u32(in, path));
  const int z = static_cast<int>(read_u32(in, path));
  d.mean = read_mat_f64(in, t, z, path);
  d.std = read_mat_f64(in, t, z, path);
  return d;
}

LLEComparison lle_compare(const LLEDump& a, const LLEDump& b) {
  if (a.mean.rows() != b.mean.rows() || a.mean.cols() != b.mean.cols())
    throw DataError("LLE dumps have different shapes");
  LLEComparison out;
  const int frames = a.frames();
  out.per_frame.reserve(static_cast<std::size_t>(frames));
  for (int t = 0; t < frames; ++t) {
    LLEDistribution pa{a.mean.row(t), a.std.row(t)};
    LLEDistribution pb{b.mean.row(t), b.std.row(t)};
    out.per_frame.push_back(loss_tie(pa, pb));
  }
  LLEDistribution da{a.mean, a.std};
  LLEDistribution db{b.mean, b.std};
  out.mean = loss_tie(da, db);
  return out;
}

double phoneme_error_rate(const Model& model,
                          const std::vector<UtteranceRecord>& records) {
  bool has_tdec = false;
  for (const auto& [name, mat] : model.params.values)
    if (name.rfind("tdec.", 0) == 0) {
      has_tdec = true;
      break;
    }
  if (!has_tdec) throw ModelError("model has no text decoder");
  if (records.empty()) throw DataError("phoneme error rate needs utterances");

  std::uint64_t wrong = 0, total = 0;
  for (const auto& rec : records) {
    if (!rec.transcript.has_value())
      throw DataError("phoneme error rate needs transcripts: " + rec.utterance_id);
    const std::vector<int> labels = upsample_transcript(*rec.transcript);
    if (static_cast<int>(labels.size()) != rec.mel.frames())
      throw DataError("transcript frames do not match mel: " + rec.utterance_id);
    const LLEDistribution d = speech_encoder_forward(model, rec.mel);
    LLESequence z;
    z.z = d.mean;
    const Mat probs = text_decoder_forward(model, z);
    for (Eigen::Index t = 0; t < probs.rows(); ++t) {
      Eigen::Index best = 0;
      probs.row(t).maxCoeff(&best);
      if (static_cast<int>(best) != labels[static_cast<std::size_t>(t)]) ++wrong;
      ++total;
    }
  }
  return static_cast<double>(wrong) / static_cast<double>(total);
}

namespace {

struct SetupSpec {
  const char* name;
  const char* description;
  bool weld_on;
  bool cycle_on;
  bool tdec_on;
};

constexpr SetupSpec kSetups[] = {
    {"N", "full recipe", true, true, true},
    {"A", "no welding", false, true, true},
    {"B", "no cycle consistency", true, false, true},
    {"C", "no text decoder", true, true, false},
    {"D", "no welding, no cycle, no text decoder", false, false, false},
};

std::map<std::string, std::string> config_kv(const StageConfig& cfg) {
  std::map<std::string, std::string> kv;
  std::istringstream in(cfg.serialize());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return kv;
}

std::set<std::string> config_diff(const StageConfig& a, const StageConfig& b) {
  const auto ka = config_kv(a);
  const auto kb = config_kv(b);
  std::set<std::string> diff;
  for (const auto& [key, value] : ka) {
    auto it = kb.find(key);
    if (it == kb.end() || it->second != value) diff.insert(key);
  }
  for (const auto& [key, value] : kb)
    if (!ka.count(key)) diff.insert(key);
  return diff;
}

double judged_per(const Model& judge, const PhonemeTranscript& t, MelMatrix mel) {
  UtteranceRecord rec;
  rec.utterance_id = "synth";
  rec.speaker_id = "synth";
  rec.transcript = t;
  rec.mel = std::move(mel);
  return phoneme_error_rate(judge, {rec});
}

std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

std::string AblationResult::tsv() const {
  std::string out = "setup\tdescription\tper_tts\tper_vc\tmel_mae\n";
  for (const auto& row : rows) {
    out += row.setup;
    out += '\t';
    out += row.description;
    out += '\t';
    out += format_metric(row.per_tts);
    out += '\t';
    out += format_metric(row.per_vc);
    out += '\t';
    out += format_metric(row.mel_mae);
    out += '\n';
  }
  return out;
}

AblationResult run_ablation_matrix(const ArchManifest& arch, const Corpus& corpus,
                                   const std::vector<UtteranceRecord>& target_slice,
                                   const StageConfig& base) {
  base.validate();
  if (target_slice.size() < 2)
    throw DataError("ablation needs at least two target utterances");

  StageConfig full = base;
  full.weld_enabled = true;
  full.cycle_enabled = true;
  full.text_decoder_enabled = true;

  // Half the slice adapts (untranscribed), the rest evaluates.
  const std::size_t n_adapt = std::max<std::size_t>(1, target_slice.size() / 2);
  std::vector<UtteranceRecord> adapt_slice(target_slice.begin(),
                                           target_slice.begin() +
                                               static_cast<std::ptrdiff_t>(n_adapt));
  for (auto& rec : adapt_slice) rec.transcript.reset();
  std::vector<UtteranceRecord> eval_records(
      target_slice.begin() + static_cast<std::ptrdiff_t>(n_adapt), target_slice.end());

  // Parallel sources: a different speaker's rendition of each eval utterance.
  std::vector<const UtteranceRecord*> sources;
  for (const auto& eval : eval_records) {
    if (!eval.transcript.has_value())
      throw DataError("ablation evaluation needs transcripts: " + eval.utterance_id);
    const UtteranceRecord* found = nullptr;
    for (const auto& rec : corpus.records)
      if (rec.utterance_id == eval.utterance_id &&
          rec.speaker_id != eval.speaker_id) {
        found = &rec;
        break;
      }
    if (!found)
      throw DataError("no parallel source utterance for " + eval.utterance_id);
    if (found->mel.frames() != eval.mel.frames())
      throw DataError("parallel renditions differ in length: " + eval.utterance_id);
    sources.push_back(found);
  }

  // Shared bases: one full training run, one without the text decoder.
  const auto ids = corpus.speaker_ids();
  Model base_full = Model::init(arch, ids, full.seed);
  Vocoder voc_full = Vocoder::init(arch, ids, full.seed + 1);
  train_initial(base_full, voc_full, corpus, full);

  StageConfig no_tdec = full;
  no_tdec.text_decoder_enabled = false;
  Model base_bare = Model::init(arch, ids, full.seed);
  Vocoder voc_bare = Vocoder::init(arch, ids, full.seed + 1);
  train_initial(base_bare, voc_bare, corpus, no_tdec);

  const Model& judge = base_full;

  AblationResult result;
  result.audit_passed = true;
  for (const SetupSpec& spec : kSetups) {
    StageConfig cfg = full;
    cfg.weld_enabled = spec.weld_on;
    cfg.cycle_enabled = spec.cycle_on;
    cfg.text_decoder_enabled = spec.tdec_on;

    std::set<std::string> expected;
    if (!spec.weld_on) expected.insert("stage.weld_enabled");
    if (!spec.cycle_on) expected.insert("stage.cycle_enabled");
    if (!spec.tdec_on) expected.insert("stage.text_decoder_enabled");
    const std::set<std::string> actual = config_diff(cfg, full);
    std::string log = std::string(spec.name) + ":";
    for (const auto& key : actual) log += " " + key;
    if (actual == expected) {
      log += " (as declared)";
    } else {
      log += " (UNDECLARED DIVERGENCE)";
      result.audit_passed = false;
    }
    result.audit_log.push_back(log);

    Model model = spec.tdec_on ? base_full : base_bare;
    Vocoder voc = spec.tdec_on ? voc_full : voc_bare;
    clone_unsupervised_step1(model, adapt_slice, cfg);
    VocoderTrainConfig vcfg;
    vcfg.learning_rate = cfg.learning_rate;
    vcfg.batch_size = cfg.batch_size;
    vcfg.epochs = cfg.adapt_vocoder_epochs;
    vcfg.segment_frames = cfg.segment_frames;
    vcfg.seed = cfg.seed;
    adapt_vocoder(voc, adapt_slice, vcfg);
    if (cfg.weld_enabled) weld(model, voc, adapt_slice, cfg);

    AblationRow row;
    row.setup = spec.name;
    row.description = spec.description;
    for (std::size_t i = 0; i < eval_records.size(); ++i) {
      const UtteranceRecord& eval = eval_records[i];
      const std::uint64_t seed = cfg.seed + 1000 + i;
      InferenceResult tts =
          infer_tts(model, voc, *eval.transcript, cfg, seed, GenMode::kArgmax);
      InferenceResult vc =
          infer_vc(model, voc, sources[i]->mel, cfg, seed, GenMode::kArgmax);
      row.per_tts += judged_per(judge, *eval.transcript, tts.mel);
      row.per_vc += judged_per(judge, *eval.transcript, vc.mel);
      row.mel_mae += mae(vc.mel.values, eval.mel.values);
    }
    const double n = static_cast<double>(eval_records.size());
    row.per_tts /= n;
    row.per_vc /= n;
    row.mel_mae /= n;
    result.rows.push_back(row);
  }
  return result;
}

}  // namespace nautilus

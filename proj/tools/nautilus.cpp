#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nautilus/diagnostics.hpp"
#include "nautilus/errors.hpp"
#include "nautilus/pipeline.hpp"

namespace fs = std::filesystem;
using namespace nautilus;

namespace {

struct RunConfig {
  FeatureConfig feature;
  StageConfig stage;
  std::string arch_manifest;  // optional path to a layer manifest
};

void apply_feature_setting(FeatureConfig& f, const std::string& key,
                           const std::string& value) {
  const auto as_double = [&](const char*) {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw ConfigError("bad value for " + key + ": " + value);
    return v;
  };
  try {
    if (key == "feature.sample_rate")
      f.sample_rate = static_cast<std::uint32_t>(std::stoul(value));
    else if (key == "feature.window_ms")
      f.window_ms = as_double("");
    else if (key == "feature.shift_ms")
      f.shift_ms = as_double("");
    else if (key == "feature.mel_dim")
      f.mel_dim = std::stoi(value);
    else if (key == "feature.bits")
      f.bits = std::stoi(value);
    else if (key == "feature.mel_floor")
      f.mel_floor = as_double("");
    else
      throw ConfigError("unknown setting: " + key);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("bad value for " + key + ": " + value);
  }
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key.rfind("feature.", 0) == 0)
    apply_feature_setting(cfg.feature, key, value);
  else if (key.rfind("stage.", 0) == 0 || key.rfind("loss.", 0) == 0)
    apply_stage_setting(cfg.stage, key, value);
  else if (key == "arch.manifest")
    cfg.arch_manifest = value;
  else
    throw ConfigError("unknown setting: " + key);
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::string out;
  const auto put = [&out](const std::string& key, const std::string& value) {
    out += key;
    out += " = ";
    out += value;
    out += '\n';
  };
  put("feature.sample_rate", std::to_string(cfg.feature.sample_rate));
  put("feature.window_ms", format_g17(cfg.feature.window_ms));
  put("feature.shift_ms", format_g17(cfg.feature.shift_ms));
  put("feature.mel_dim", std::to_string(cfg.feature.mel_dim));
  put("feature.bits", std::to_string(cfg.feature.bits));
  put("feature.mel_floor", format_g17(cfg.feature.mel_floor));
  if (!cfg.arch_manifest.empty()) put("arch.manifest", cfg.arch_manifest);
  out += cfg.stage.serialize();
  return out;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

void apply_config_text(RunConfig& cfg, const std::string& text,
                       const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("missing '=' at " + origin + ":" + std::to_string(lineno));
    apply_setting(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  apply_config_text(cfg, text, path);
}

// Flags shared by every command; resolution order is defaults, NAUTILUS_SEED,
// the run directory's stored config, --preset, --config, --set, --seed.
struct CommonFlags {
  std::string out;
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::string> preset;
  std::optional<std::uint64_t> seed;

  RunConfig resolve() const {
    RunConfig cfg;
    if (const char* env = std::getenv("NAUTILUS_SEED")) {
      try {
        cfg.stage.seed = std::stoull(env);
      } catch (const std::exception&) {
        throw ConfigError(std::string("bad NAUTILUS_SEED: ") + env);
      }
    }
    cfg.stage.learning_rate = StageConfig::scenario_a().learning_rate;
    if (!out.empty() && fs::exists(fs::path(out) / "config.txt")) {
      const std::uint64_t keep = cfg.stage.seed;
      apply_config_file(cfg, (fs::path(out) / "config.txt").string());
      if (std::getenv("NAUTILUS_SEED") == nullptr) cfg.stage.seed = keep;
    }
    if (preset.has_value()) {
      StageConfig p;
      if (*preset == "scenario-a")
        p = StageConfig::scenario_a();
      else if (*preset == "scenario-b")
        p = StageConfig::scenario_b();
      else
        throw ConfigError("unknown preset: " + *preset);
      const std::uint64_t keep = cfg.stage.seed;
      const LossWeights weights = cfg.stage.weights;
      cfg.stage = p;
      cfg.stage.seed = keep;
      cfg.stage.weights = weights;
    }
    if (!config_file.empty()) apply_config_file(cfg, config_file);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value: " + kv);
      apply_setting(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    if (seed.has_value()) cfg.stage.seed = *seed;
    cfg.feature.validate();
    cfg.stage.validate();
    return cfg;
  }
};

void add_common_flags(CLI::App* cmd, CommonFlags& flags, bool with_out = true) {
  if (with_out) cmd->add_option("--out", flags.out, "run directory")->required();
  cmd->add_option("--config", flags.config_file, "flat key = value config file");
  cmd->add_option("--set", flags.sets, "override one setting, key=value");
  cmd->add_option("--preset", flags.preset, "scenario-a or scenario-b");
  cmd->add_option("--seed", flags.seed, "override stage.seed");
}

// Exclusive ownership of an output directory for the life of one command.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) {
    fs::create_directories(dir);
    path_ = dir / ".lock";
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw PipelineError("output directory is locked (remove " + path_.string() +
                          " if no other command is running)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirLock() { ::unlink(path_.c_str()); }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

// One line per artifact: sha256 and path relative to the run directory.
void write_run_manifest(const fs::path& dir) {
  std::vector<std::string> rels;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).string();
    if (rel == "run.manifest" || rel == ".lock") continue;
    rels.push_back(rel);
  }
  std::sort(rels.begin(), rels.end());
  std::ofstream out(dir / "run.manifest");
  if (!out) throw IoError("cannot write run manifest in " + dir.string());
  for (const auto& rel : rels)
    out << sha256_file_hex(dir / rel) << "  " << rel << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw IoError("short write: " + path.string());
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

ArchManifest resolve_arch(const RunConfig& cfg, const Corpus& corpus) {
  if (!cfg.arch_manifest.empty()) {
    std::ifstream in(cfg.arch_manifest);
    if (!in) throw IoError("cannot open arch manifest: " + cfg.arch_manifest);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    return ArchManifest::parse(text);
  }
  const UtteranceRecord& rec = corpus.records.front();
  ArchManifest::DeskOptions opt;
  opt.quantization = static_cast<int>(rec.waveform.quantization);
  opt.samples_per_frame =
      static_cast<int>(rec.waveform.codes.size()) / rec.mel.frames();
  return ArchManifest::desk(corpus.phoneme_count(),
                            static_cast<int>(corpus.speaker_ids().size()),
                            rec.mel.dim(), opt);
}

// The stored feature section mirrors the corpus the model was trained on so
// later synthesis stamps the right timing metadata.
void sync_feature_config(RunConfig& cfg, const Corpus& corpus) {
  const UtteranceRecord& rec = corpus.records.front();
  cfg.feature.sample_rate = rec.waveform.sample_rate;
  cfg.feature.mel_dim = rec.mel.dim();
  cfg.feature.shift_ms = rec.mel.frame_shift_ms;
  cfg.feature.window_ms = rec.mel.window_ms;
  int bits = 0;
  while ((1u << bits) < rec.waveform.quantization) ++bits;
  cfg.feature.bits = bits;
}

Corpus load_corpus_checked(const std::string& root) {
  Corpus corpus = load_corpus(root);
  if (corpus.records.empty()) throw DataError("corpus is empty or missing: " + root);
  return corpus;
}

void save_state(const fs::path& out, const Model& model, const Vocoder& voc) {
  write_text(out / "arch.manifest", model.arch.serialize());
  std::string ids;
  for (const auto& id : model.speaker_ids) ids += id + "\n";
  write_text(out / "speakers.txt", ids);
  save_checkpoint(model.params, (out / "model.ckpt").string(), model.config_hash());
  save_checkpoint(voc.params, (out / "vocoder.ckpt").string(), voc.config_hash());
}

struct State {
  Model model;
  Vocoder voc;
};

State load_state(const fs::path& out) {
  const fs::path arch_path = out / "arch.manifest";
  std::ifstream in(arch_path);
  if (!in) throw IoError("no trained state under " + out.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  State st;
  st.model.arch = ArchManifest::parse(text);
  st.model.speaker_ids = read_lines(out / "speakers.txt");
  st.voc.arch = st.model.arch;
  st.voc.speaker_ids = st.model.speaker_ids;
  st.model.params =
      load_checkpoint((out / "model.ckpt").string(), st.model.config_hash());
  st.voc.params =
      load_checkpoint((out / "vocoder.ckpt").string(), st.voc.config_hash());
  return st;
}

void save_curves(const fs::path& path, const std::vector<LossReport>& curves) {
  std::error_code ec;
  fs::remove(path, ec);
  CurveLog log(path.string());
  for (const auto& r : curves) log.append(r);
}

std::vector<UtteranceRecord> speaker_slice(const Corpus& corpus,
                                           const std::string& speaker) {
  std::vector<UtteranceRecord> slice;
  for (const auto& rec : corpus.records)
    if (rec.speaker_id == speaker) slice.push_back(rec);
  if (slice.empty()) throw DataError("no utterances for speaker: " + speaker);
  return slice;
}

std::map<std::string, int> phoneme_table(const fs::path& out) {
  std::map<std::string, int> table;
  int id = 0;
  for (const auto& sym : read_lines(out / "phonemes.txt")) table.emplace(sym, id++);
  if (table.empty()) throw DataError("empty phoneme table in " + out.string());
  return table;
}

void write_wav_pcm16(const fs::path& path, const std::vector<double>& samples,
                     std::uint32_t sample_rate) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const std::uint32_t n = static_cast<std::uint32_t>(samples.size());
  const std::uint32_t data_bytes = 2 * n;
  out.write("RIFF", 4);
  write_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_u32(out, 16);
  write_u16(out, 1);  // PCM
  write_u16(out, 1);  // mono
  write_u32(out, sample_rate);
  write_u32(out, sample_rate * 2);
  write_u16(out, 2);
  write_u16(out, 16);
  out.write("data", 4);
  write_u32(out, data_bytes);
  for (double v : samples) {
    const double c = std::clamp(v, -1.0, 1.0);
    const auto s = static_cast<std::int16_t>(std::lround(c * 32767.0));
    write_u16(out, static_cast<std::uint16_t>(s));
  }
  if (!out) throw IoError("short write: " + path.string());
}

GenMode parse_mode(const std::string& mode) {
  if (mode == "sample") return GenMode::kSample;
  if (mode == "argmax") return GenMode::kArgmax;
  throw ConfigError("unknown generation mode: " + mode);
}

double corpus_minutes(const Corpus& corpus) {
  double ms = 0.0;
  for (const auto& rec : corpus.records) ms += rec.mel.frames() * rec.mel.frame_shift_ms;
  return ms / 60000.0;
}

void print_summary(const Corpus& corpus) {
  std::cout << "speakers=" << corpus.speaker_ids().size()
            << " utterances=" << corpus.records.size() << " phonemes="
            << corpus.phoneme_count() << " minutes=" << corpus_minutes(corpus)
            << "\n";
}

void write_inference(const fs::path& out, const std::string& name,
                     const InferenceResult& res) {
  save_mel(res.mel, (out / (name + ".mel")).string());
  save_codes(res.codes, (out / (name + ".wav.codes")).string());
  write_wav_pcm16(out / (name + ".wav"), mu_law_decode(res.codes),
                  res.codes.sample_rate);
  std::cout << "wrote " << (out / (name + ".mel")).string() << " "
            << (out / (name + ".wav.codes")).string() << " "
            << (out / (name + ".wav")).string() << "\n";
}

int cmd_prepare_data(const CommonFlags& flags, const std::string& corpus_dir,
                     bool toy, const std::string& import_dir, int speakers,
                     int utterances, int phonemes) {
  RunConfig cfg = flags.resolve();
  if (toy == !import_dir.empty())
    throw ConfigError("pass exactly one of --toy-spec or --import");
  if (toy) {
    DirLock lock(corpus_dir);
    ToyCorpusSpec spec = ToyCorpusSpec::desk(speakers, utterances);
    spec.phoneme_count = phonemes;
    spec.feature = cfg.feature;
    Corpus corpus = generate_toy_corpus(spec, cfg.stage.seed);
    save_corpus(corpus, corpus_dir);
    write_run_manifest(corpus_dir);
    print_summary(corpus);
  } else {
    Corpus corpus = load_corpus_checked(import_dir);
    print_summary(corpus);
  }
  return 0;
}

int cmd_train(const CommonFlags& flags, const std::string& corpus_dir,
              const std::string& warmup_dir) {
  RunConfig cfg = flags.resolve();
  const fs::path out(flags.out);
  DirLock lock(out);
  Corpus corpus = load_corpus_checked(corpus_dir);
  sync_feature_config(cfg, corpus);
  const ArchManifest arch = resolve_arch(cfg, corpus);
  Model model = Model::init(arch, corpus.speaker_ids(), cfg.stage.seed);
  Vocoder voc = Vocoder::init(arch, corpus.speaker_ids(), cfg.stage.seed + 1);

  if (!warmup_dir.empty()) {
    Corpus warmup = load_corpus_checked(warmup_dir);
    if (warmup.phoneme_count() != corpus.phoneme_count() ||
        warmup.speaker_ids() != corpus.speaker_ids())
      throw DataError("warmup corpus must share the phoneme table and speakers");
    TrainResult wres = train_initial(model, voc, warmup, cfg.stage);
    save_curves(out / "train_warmup.curve", wres.model_curves);
    save_curves(out / "vocoder_warmup.curve", wres.vocoder_curves);
  }

  TrainResult res = train_initial(model, voc, corpus, cfg.stage);
  save_curves(out / "train.curve", res.model_curves);
  save_curves(out / "vocoder.curve", res.vocoder_curves);
  std::string phon;
  for (const auto& p : corpus.phonemes) phon += p + "\n";
  write_text(out / "phonemes.txt", phon);
  write_text(out / "config.txt", serialize_run_config(cfg));
  save_state(out, model, voc);
  write_run_manifest(out);
  std::cout << "trained epochs=" << res.model_curves.size() << " train="
            << (res.model_curves.empty() ? 0.0 : res.model_curves.back().at("train"))
            << "\n";
  return 0;
}

int cmd_adapt(const CommonFlags& flags, const std::string& corpus_dir,
              const std::string& target, const std::string& mode,
              const std::string& epochs_preset) {
  RunConfig cfg = flags.resolve();
  if (!epochs_preset.empty()) {
    StageConfig p;
    if (epochs_preset == "A")
      p = StageConfig::scenario_a();
    else if (epochs_preset == "B")
      p = StageConfig::scenario_b();
    else
      throw ConfigError("unknown epochs preset: " + epochs_preset);
    cfg.stage.adapt_acoustic_epochs = p.adapt_acoustic_epochs;
    cfg.stage.adapt_vocoder_epochs = p.adapt_vocoder_epochs;
    cfg.stage.weld_epochs = p.weld_epochs;
  }
  const fs::path out(flags.out);
  DirLock lock(out);
  State st = load_state(out);
  const std::vector<UtteranceRecord> slice =
      speaker_slice(load_corpus_checked(corpus_dir), target);

  std::vector<LossReport> curves;
  if (mode == "unsup")
    curves = clone_unsupervised_step1(st.model, slice, cfg.stage);
  else if (mode == "sup")
    curves = clone_supervised_step1(st.model, slice, cfg.stage);
  else
    throw ConfigError("unknown adaptation mode: " + mode);

  VocoderTrainConfig vcfg;
  vcfg.learning_rate = cfg.stage.learning_rate;
  vcfg.batch_size = cfg.stage.batch_size;
  vcfg.epochs = cfg.stage.adapt_vocoder_epochs;
  vcfg.segment_frames = cfg.stage.segment_frames;
  vcfg.seed = cfg.stage.seed;
  std::vector<LossReport> voc_curves = adapt_vocoder(st.voc, slice, vcfg);

  save_curves(out / "adapt.curve", curves);
  save_curves(out / "adapt_vocoder.curve", voc_curves);
  write_text(out / "config.adapt.txt", serialize_run_config(cfg));
  save_state(out, st.model, st.voc);
  write_run_manifest(out);
  std::cout << "adapted mode=" << mode << " target=" << target << " epochs="
            << curves.size() << "\n";
  return 0;
}

int cmd_weld(const CommonFlags& flags, const std::string& corpus_dir,
             const std::string& target) {
  RunConfig cfg = flags.resolve();
  const fs::path out(flags.out);
  DirLock lock(out);
  State st = load_state(out);
  const std::vector<UtteranceRecord> slice =
      speaker_slice(load_corpus_checked(corpus_dir), target);
  WeldResult res = weld(st.model, st.voc, slice, cfg.stage);
  save_curves(out / "weld.curve", res.curves);
  write_text(out / "config.weld.txt", serialize_run_config(cfg));
  save_state(out, st.model, st.voc);
  write_run_manifest(out);
  std::cout << "welded epochs=" << res.curves.size() << " generated_fraction="
            << res.generated_fraction << "\n";
  return 0;
}

int cmd_tts(const CommonFlags& flags, const std::string& transcript_path,
            const std::string& name, const std::string& mode) {
  RunConfig cfg = flags.resolve();
  const fs::path out(flags.out);
  DirLock lock(out);
  State st = load_state(out);
  const PhonemeTranscript t = load_lab(transcript_path, phoneme_table(out));
  InferenceResult res =
      infer_tts(st.model, st.voc, t, cfg.stage, cfg.stage.seed, parse_mode(mode));
  res.mel.frame_shift_ms = cfg.feature.shift_ms;
  res.mel.window_ms = cfg.feature.window_ms;
  res.codes.sample_rate = cfg.feature.sample_rate;
  write_inference(out, name, res);
  write_run_manifest(out);
  return 0;
}

int cmd_vc(const CommonFlags& flags, const std::string& source_path,
           const std::string& name, const std::string& mode) {
  RunConfig cfg = flags.resolve();
  const fs::path out(flags.out);
  DirLock lock(out);
  State st = load_state(out);
  const MelMatrix source = load_mel(source_path);
  InferenceResult res = infer_vc(st.model, st.voc, source, cfg.stage,
                                 cfg.stage.seed, parse_mode(mode));
  write_inference(out, name, res);
  write_run_manifest(out);
  return 0;
}

int cmd_diagnose(const CommonFlags& flags, const std::string& curves_path,
                 bool do_dump, bool do_per, bool do_ablation,
                 const std::string& corpus_dir, const std::string& target_dir,
                 const std::string& speaker, const std::string& utterance,
                 const std::string& encoder, const std::string& variant,
                 const std::string& target) {
  const int selected = (!curves_path.empty() ? 1 : 0) + (do_dump ? 1 : 0) +
                       (do_per ? 1 : 0) + (do_ablation ? 1 : 0);
  if (selected != 1)
    throw ConfigError("pass exactly one of --curves, --dump-lle, --per, --ablation");
  RunConfig cfg = flags.resolve();
  const fs::path out(flags.out);

  if (!curves_path.empty()) {
    const auto curves = load_curves(curves_path);
    std::cout << "reports=" << curves.size() << "\n";
    if (!curves.empty()) {
      std::cout << "first " << curves.front().line() << "\n";
      std::cout << "last " << curves.back().line() << "\n";
    }
    return 0;
  }

  if (do_dump) {
    DirLock lock(out);
    State st = load_state(out);
    const Corpus corpus = load_corpus_checked(corpus_dir);
    const UtteranceRecord* found = nullptr;
    for (const auto& rec : corpus.records)
      if (rec.speaker_id == speaker && rec.utterance_id == utterance) found = &rec;
    if (!found)
      throw DataError("no utterance " + utterance + " for speaker " + speaker);
    const LLESource which =
        encoder == "text" ? LLESource::kText : LLESource::kSpeech;
    if (encoder != "text" && encoder != "speech")
      throw ConfigError("unknown encoder: " + encoder);
    const LLEDump dump = dump_lle(st.model, *found, which, variant);
    const std::string file = utterance + "." + speaker + "." + encoder + ".lled";
    save_lle_dump(dump, (out / file).string());
    write_run_manifest(out);
    std::cout << "wrote " << (out / file).string() << "\n";
    return 0;
  }

  if (do_per) {
    State st = load_state(out);
    Corpus corpus = load_corpus_checked(corpus_dir);
    std::vector<UtteranceRecord> records =
        speaker.empty() ? corpus.records : speaker_slice(corpus, speaker);
    std::cout << "per=" << phoneme_error_rate(st.model, records) << "\n";
    return 0;
  }

  DirLock lock(out);
  const Corpus corpus = load_corpus_checked(corpus_dir);
  const Corpus target_corpus =
      target_dir.empty() ? corpus : load_corpus_checked(target_dir);
  const std::vector<UtteranceRecord> slice = speaker_slice(target_corpus, target);
  const ArchManifest arch = resolve_arch(cfg, corpus);
  const AblationResult res = run_ablation_matrix(arch, corpus, slice, cfg.stage);
  write_text(out / "ablation.tsv", res.tsv());
  write_run_manifest(out);
  std::cout << res.tsv();
  for (const auto& line : res.audit_log) std::cout << "audit " << line << "\n";
  std::cout << "audit_passed=" << (res.audit_passed ? 1 : 0) << "\n";
  return res.audit_passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"text-speech voice cloning on a toy corpus"};
  app.require_subcommand(1);

  CommonFlags prep_flags, train_flags, adapt_flags, weld_flags, tts_flags, vc_flags,
      diag_flags;

  auto* prep = app.add_subcommand("prepare-data", "generate or validate a corpus");
  std::string prep_corpus, prep_import;
  bool prep_toy = false;
  int prep_speakers = 4, prep_utts = 50, prep_phonemes = 12;
  prep->add_option("--corpus", prep_corpus, "corpus directory to write");
  prep->add_flag("--toy-spec", prep_toy, "generate the synthetic toy corpus");
  prep->add_option("--import", prep_import, "validate an existing corpus layout");
  prep->add_option("--speakers", prep_speakers, "toy speaker count");
  prep->add_option("--utterances", prep_utts, "utterances per toy speaker");
  prep->add_option("--phonemes", prep_phonemes, "toy phoneme count");
  add_common_flags(prep, prep_flags, false);

  auto* train = app.add_subcommand("train", "initial multi-speaker training");
  std::string train_corpus, train_warmup;
  train->add_option("--corpus", train_corpus, "training corpus")->required();
  train->add_option("--warmup", train_warmup, "optional warmup corpus");
  add_common_flags(train, train_flags);

  auto* adapt = app.add_subcommand("adapt", "step 1: adapt to a target speaker");
  std::string adapt_corpus, adapt_target, adapt_mode = "unsup", adapt_preset;
  adapt->add_option("--corpus", adapt_corpus, "corpus with target records")->required();
  adapt->add_option("--target", adapt_target, "target speaker id")->required();
  adapt->add_option("--mode", adapt_mode, "unsup or sup");
  adapt->add_option("--epochs-preset", adapt_preset, "A or B epoch budgets");
  add_common_flags(adapt, adapt_flags);

  auto* weld_cmd = app.add_subcommand("weld", "step 2: weld decoder and vocoder");
  std::string weld_corpus, weld_target;
  weld_cmd->add_option("--corpus", weld_corpus, "corpus with target records")
      ->required();
  weld_cmd->add_option("--target", weld_target, "target speaker id")->required();
  add_common_flags(weld_cmd, weld_flags);

  auto* tts = app.add_subcommand("tts", "step 3: synthesize from a transcript");
  std::string tts_transcript, tts_name = "tts", tts_mode = "sample";
  tts->add_option("--transcript", tts_transcript, "alignment (.lab) file")
      ->required();
  tts->add_option("--name", tts_name, "output artifact stem");
  tts->add_option("--mode", tts_mode, "sample or argmax generation");
  add_common_flags(tts, tts_flags);

  auto* vc = app.add_subcommand("vc", "step 3: convert a source utterance");
  std::string vc_source, vc_name = "vc", vc_mode = "sample";
  vc->add_option("--source", vc_source, "source .mel file")->required();
  vc->add_option("--name", vc_name, "output artifact stem");
  vc->add_option("--mode", vc_mode, "sample or argmax generation");
  add_common_flags(vc, vc_flags);

  auto* diag = app.add_subcommand("diagnose", "curves, LLE dumps, PER, ablation");
  std::string diag_curves, diag_corpus, diag_target_corpus, diag_speaker,
      diag_utterance, diag_encoder = "text", diag_variant = "unsupervised",
      diag_target;
  bool diag_dump = false, diag_per = false, diag_ablation = false;
  diag->add_option("--curves", diag_curves, "summarize a curve log");
  diag->add_flag("--dump-lle", diag_dump, "dump encoder statistics");
  diag->add_flag("--per", diag_per, "phoneme error rate over a corpus");
  diag->add_flag("--ablation", diag_ablation, "run the five-setup matrix");
  diag->add_option("--corpus", diag_corpus, "corpus directory");
  diag->add_option("--target-corpus", diag_target_corpus,
                   "corpus holding the ablation target");
  diag->add_option("--speaker", diag_speaker, "speaker filter / dump speaker");
  diag->add_option("--utterance", diag_utterance, "utterance id for --dump-lle");
  diag->add_option("--encoder", diag_encoder, "text or speech for --dump-lle");
  diag->add_option("--variant", diag_variant, "variant tag for --dump-lle");
  diag->add_option("--target", diag_target, "target speaker for --ablation");
  add_common_flags(diag, diag_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (prep->parsed())
      return cmd_prepare_data(prep_flags, prep_corpus, prep_toy, prep_import,
                              prep_speakers, prep_utts, prep_phonemes);
    if (train->parsed()) return cmd_train(train_flags, train_corpus, train_warmup);
    if (adapt->parsed())
      return cmd_adapt(adapt_flags, adapt_corpus, adapt_target, adapt_mode,
                       adapt_preset);
    if (weld_cmd->parsed()) return cmd_weld(weld_flags, weld_corpus, weld_target);
    if (tts->parsed()) return cmd_tts(tts_flags, tts_transcript, tts_name, tts_mode);
    if (vc->parsed()) return cmd_vc(vc_flags, vc_source, vc_name, vc_mode);
    if (diag->parsed())
      return cmd_diagnose(diag_flags, diag_curves, diag_dump, diag_per,
                          diag_ablation, diag_corpus, diag_target_corpus,
                          diag_speaker, diag_utterance, diag_encoder, diag_variant,
                          diag_target);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 2;
}

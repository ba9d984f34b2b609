// fsn: command-line driver for the fetal sleep toolkit.
//
// Every subcommand writes its artifacts under the output directory plus a
// <command>.manifest.json recording inputs, the resolved configuration, its
// hash, the seed and the outputs. Exit codes: 0 ok, 1 usage/config, 2 data,
// 3 internal.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fetalsleep/container.hpp"
#include "fetalsleep/edf.hpp"
#include "fetalsleep/equalise.hpp"
#include "fetalsleep/error.hpp"
#include "fetalsleep/eval.hpp"
#include "fetalsleep/features.hpp"
#include "fetalsleep/model.hpp"
#include "fetalsleep/pipeline.hpp"
#include "fetalsleep/synth.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace fsn;

namespace {

// FNV-1a; stable across platforms, unlike std::hash
std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_hash(const fs::path& p) {
  const auto bytes = container::read_file(p);
  return fnv1a_hex({reinterpret_cast<const char*>(bytes.data()), bytes.size()});
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::kUser: return 1;
    case ErrorKind::kData: return 2;
    case ErrorKind::kInternal: return 3;
  }
  return 3;
}

// Manifest for one stage. Left unfinished (exception) it is written with
// status "stale" so partial outputs are never mistaken for complete ones.
class Manifest {
 public:
  Manifest(std::string command, fs::path out_dir, const std::string& config_text, std::optional<std::uint64_t> seed)
      : command_(std::move(command)), out_dir_(std::move(out_dir)) {
    doc_["command"] = command_;
    doc_["config"] = config_text;
    doc_["config_hash"] = fnv1a_hex(config_text);
    doc_["seed"] = seed ? json(*seed) : json(nullptr);
    doc_["inputs"] = json::array();
    doc_["outputs"] = json::array();
  }
  ~Manifest() {
    if (!done_) write("stale");
  }

  void input(const fs::path& p) {
    if (fs::is_directory(p)) {
      for (const auto& f : container::list_recordings(p)) input(f);
      return;
    }
    doc_["inputs"].push_back({{"path", p.string()}, {"fnv1a", file_hash(p)}});
    const auto side = container::labels_path(p);
    if (p.extension() == ".fsr" && fs::exists(side))
      doc_["inputs"].push_back({{"path", side.string()}, {"fnv1a", file_hash(side)}});
  }
  void output(const fs::path& p) { doc_["outputs"].push_back({{"path", p.string()}, {"fnv1a", file_hash(p)}}); }
  json& extra() { return doc_; }
  void finish() {
    write("complete");
    done_ = true;
  }

 private:
  void write(const char* status) {
    doc_["status"] = status;
    try {
      fs::create_directories(out_dir_);
      container::write_text(out_dir_ / (command_ + ".manifest.json"), doc_.dump(2) + "\n");
    } catch (...) {
    }
  }

  std::string command_;
  fs::path out_dir_;
  json doc_;
  bool done_ = false;
};

struct Subject {
  Recording recording;
  LabelTrack labels;
};

std::vector<Subject> load_dir(const fs::path& dir) {
  std::vector<Subject> out;
  for (const auto& p : container::list_recordings(dir)) {
    auto [rec, labels] = container::read_internal(p);
    out.push_back({std::move(rec), std::move(labels)});
  }
  if (out.empty()) throw DataError("no .fsr recordings in '" + dir.string() + "'");
  return out;
}

LabelSpace detect_space(const std::vector<Subject>& subjects) {
  for (const auto& s : subjects)
    for (const auto& iv : s.labels.intervals)
      if (class_index(iv.stage, LabelSpace::kAdult) && !class_index(iv.stage, LabelSpace::kFetal))
        return LabelSpace::kAdult;
  return LabelSpace::kFetal;
}

LabelSpace parse_space(const std::string& s, const std::vector<Subject>& subjects) {
  if (s == "fetal") return LabelSpace::kFetal;
  if (s == "adult") return LabelSpace::kAdult;
  if (s == "auto") return detect_space(subjects);
  throw ConfigError("label space must be fetal, adult or auto");
}

model::ModelConfig model_config(const std::string& size, std::size_t classes) {
  if (size == "tiny") return model::tiny_config(classes);
  if (size == "compact") return model::compact_config(classes);
  if (size == "full") {
    model::ModelConfig c;
    c.num_classes = classes;
    return c;
  }
  throw ConfigError("model size must be tiny, compact or full");
}

std::vector<std::pair<std::size_t, std::size_t>> parse_mapping(const std::string& text, std::size_t channels) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (text.empty()) {
    for (std::size_t c = 0; c < channels; ++c) out.emplace_back(c, c);
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("mapping entries look like source:target, got '" + item + "'");
    try {
      out.emplace_back(std::stoul(item.substr(0, colon)), std::stoul(item.substr(colon + 1)));
    } catch (const std::exception&) {
      throw ConfigError("bad mapping entry '" + item + "'");
    }
  }
  return out;
}

equalise::EqualisationMap load_map(const fs::path& csv) {
  auto sidecar = csv;
  sidecar.replace_extension(".json");
  const auto a = container::read_file(csv), b = container::read_file(sidecar);
  return equalise::map_from_files({reinterpret_cast<const char*>(a.data()), a.size()},
                                  {reinterpret_cast<const char*>(b.data()), b.size()});
}

// Sleep-EDF vocabulary plus the sidecar tokens, so synthetic EDF hypnograms ingest too.
const edf::StageMap& ingest_stage_map() {
  static const edf::StageMap map = [] {
    auto m = edf::rk_stage_map();
    for (auto s : {Stage::kRem, Stage::kNrem, Stage::kIntermediate, Stage::kExcluded, Stage::kWake, Stage::kN1,
                   Stage::kN2, Stage::kN3})
      m.emplace(std::string(stage_token(s)), s);
    return m;
  }();
  return map;
}

struct TrainFlags {
  std::string model = "tiny";
  std::size_t max_epochs = 150;
  std::size_t patience = 30;
  std::size_t batch = 60;
  double lr = 3e-3;
  std::size_t val_count = 2;

  void add(CLI::App* app) {
    app->add_option("--model", model, "Model size: tiny, compact or full")->capture_default_str();
    app->add_option("--max-epochs", max_epochs)->capture_default_str();
    app->add_option("--patience", patience, "Early-stopping patience (epochs)")->capture_default_str();
    app->add_option("--batch", batch, "Scored epochs per optimiser step")->capture_default_str();
    app->add_option("--lr", lr)->capture_default_str();
    app->add_option("--val-count", val_count, "Validation subjects")->capture_default_str();
  }
  model::TrainConfig config(std::uint64_t seed) const {
    model::TrainConfig t;
    t.max_epochs = max_epochs;
    t.early_stop_patience = patience;
    t.batch_size = batch;
    t.adam.lr = lr;
    t.seed = seed;
    t.validate();
    return t;
  }
};

struct PrepFlags {
  bool no_zscore = false;
  std::optional<double> calibration_s;
  std::string map;

  void add(CLI::App* app) {
    app->add_flag("--no-zscore", no_zscore, "Leave samples in µV");
    app->add_option("--calibration", calibration_s, "Fit z-score on the first N seconds only");
    app->add_option("--map", map, "Equalisation map CSV (sidecar .json alongside)")->check(CLI::ExistingFile);
  }
  std::vector<model::SubjectSequence> prepare(const std::vector<Subject>& subjects, LabelSpace space) const {
    auto opt = space == LabelSpace::kAdult ? pipeline::adult_defaults() : pipeline::PreprocessOptions{};
    opt.zscore = !no_zscore;
    opt.calibration_s = calibration_s;
    std::optional<equalise::EqualisationMap> m;
    if (!map.empty()) m = load_map(map);
    std::vector<model::SubjectSequence> out;
    for (const auto& s : subjects)
      out.push_back(pipeline::prepare_subject(s.recording, s.labels, space, opt, m ? &*m : nullptr));
    return out;
  }
};

std::string results_block_csv(const std::vector<eval::FoldResult>& folds, LabelSpace space, const std::string& model,
                              const std::string& pretrain, const std::string& input, const std::string& strategy) {
  eval::ResultBlock b{model, pretrain, input, strategy, folds};
  return eval::results_csv({&b, 1}, space);
}

struct FoldRow {
  std::string fold;
  double accuracy, macro_f1;
};

std::vector<FoldRow> read_fold_rows(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in) throw DataError("cannot open '" + csv.string() + "'");
  std::string line;
  std::getline(in, line);
  std::vector<FoldRow> rows;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (cells.size() < 7) throw ParseError("results row with fewer than 7 columns in '" + csv.string() + "'");
    if (cells[4].rfind("mean", 0) == 0) continue;
    try {
      rows.push_back({cells[4], std::stod(cells[5]), std::stod(cells[6])});
    } catch (const std::exception&) {
      throw ParseError("non-numeric metric in '" + csv.string() + "'");
    }
  }
  return rows;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fetal sleep staging toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand
  app.set_config("--config", "", "Key-value config file (CLI flags override it)");
  std::string out_arg = "fsn_out";
  app.add_option("-o,--out", out_arg, "Output directory (relative to $FSN_OUTPUT_ROOT when set)")->capture_default_str();
  std::size_t jobs = 1;
  app.add_option("-j,--jobs", jobs, "Parallel LOSO folds")->capture_default_str();

  auto out_dir = [&] {
    fs::path p(out_arg);
    if (const char* root = std::getenv("FSN_OUTPUT_ROOT"); root && *root && p.is_relative()) p = fs::path(root) / p;
    fs::create_directories(p);
    return p;
  };

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Convert EDF or internal recordings into validated internal files");
  std::vector<std::string> ingest_inputs, ingest_hyp, ingest_channels;
  ingest->add_option("inputs", ingest_inputs, "EDF or .fsr files")->required()->check(CLI::ExistingFile);
  ingest->add_option("--hypnogram", ingest_hyp, "Hypnogram EDF per EDF input, in order")->check(CLI::ExistingFile);
  ingest->add_option("--channels", ingest_channels, "EDF signal labels to keep");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic fetal or adult cohorts");
  std::string syn_domain = "fetal", syn_format = "fsr", syn_prefix;
  std::size_t syn_subjects = 6;
  double syn_hours = 2.0, syn_tilt = 5.0;
  std::optional<double> syn_rate;
  std::uint64_t seed = 0;
  synth_cmd->add_option("--domain", syn_domain, "fetal or adult")->capture_default_str();
  synth_cmd->add_option("--subjects", syn_subjects)->capture_default_str();
  synth_cmd->add_option("--hours", syn_hours)->capture_default_str();
  synth_cmd->add_option("--rate", syn_rate, "Sample rate (default 400 fetal, 100 adult)");
  synth_cmd->add_option("--tilt", syn_tilt, "Adult spectral tilt exponent")->capture_default_str();
  synth_cmd->add_option("--prefix", syn_prefix, "Subject id prefix (default F or A)");
  synth_cmd->add_option("--format", syn_format, "fsr or edf")->capture_default_str();
  synth_cmd->add_option("--seed", seed)->required();

  // psd
  auto* psd = app.add_subcommand("psd", "Mean per-channel Welch PSD of a recording group");
  std::string psd_input;
  bool psd_filter = false;
  double psd_rate = 100.0;
  psd->add_option("--input", psd_input)->required()->check(CLI::ExistingDirectory);
  psd->add_flag("--filter", psd_filter, "Bandpass and resample before estimating");
  psd->add_option("--rate", psd_rate, "Target rate with --filter")->capture_default_str();

  // equalise
  auto* eq = app.add_subcommand("equalise", "Build a gain map toward a target group and optionally apply it");
  std::string eq_target, eq_source, eq_mapping, eq_map;
  double eq_eps = equalise::kDefaultEpsilon;
  bool eq_apply = false;
  eq->add_option("--target", eq_target, "Target (fetal) recordings")->check(CLI::ExistingDirectory);
  eq->add_option("--source", eq_source, "Source (adult) recordings")->required()->check(CLI::ExistingDirectory);
  eq->add_option("--mapping", eq_mapping, "source:target channel pairs, e.g. 0:0,1:1");
  eq->add_option("--epsilon", eq_eps)->capture_default_str();
  eq->add_option("--map", eq_map, "Reuse an existing map instead of computing one")->check(CLI::ExistingFile);
  eq->add_flag("--apply", eq_apply, "Write equalised, bandpassed source recordings");

  // features
  auto* feat = app.add_subcommand("features", "Handcrafted 35-feature table per epoch");
  std::string feat_input, feat_space = "auto";
  std::optional<double> feat_cal;
  bool feat_importance = false;
  std::size_t feat_repeats = 5;
  feat->add_option("--input", feat_input)->required()->check(CLI::ExistingDirectory);
  feat->add_option("--space", feat_space, "fetal, adult or auto")->capture_default_str();
  feat->add_option("--calibration", feat_cal, "Fit z-score on the first N seconds only (online mode)");
  feat->add_flag("--importance", feat_importance, "LOSO softmax model + permutation importance");
  feat->add_option("--repeats", feat_repeats, "Shuffles per feature")->capture_default_str();
  feat->add_option("--seed", seed);

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Pretrain on adult recordings");
  std::string pre_input, pre_space = "auto";
  std::uint64_t init_seed = 1;
  TrainFlags pre_train;
  PrepFlags pre_prep;
  pre->add_option("--input", pre_input)->required()->check(CLI::ExistingDirectory);
  pre->add_option("--space", pre_space)->capture_default_str();
  pre->add_option("--init-seed", init_seed)->capture_default_str();
  pre->add_option("--seed", seed)->required();
  pre_train.add(pre);
  pre_prep.add(pre);

  // finetune
  auto* fine = app.add_subcommand("finetune", "LOSO transfer or from-scratch training on fetal recordings");
  std::string fine_input, fine_init, fine_strategy = "full";
  TrainFlags fine_train;
  PrepFlags fine_prep;
  fine->add_option("--input", fine_input)->required()->check(CLI::ExistingDirectory);
  fine->add_option("--init", fine_init, "Pretrained checkpoint (omit to train from scratch)")->check(CLI::ExistingFile);
  fine->add_option("--strategy", fine_strategy, "frozen, partial or full")->capture_default_str();
  fine->add_option("--init-seed", init_seed)->capture_default_str();
  fine->add_option("--seed", seed)->required();
  fine_train.add(fine);
  fine_prep.add(fine);

  // evaluate
  auto* evl = app.add_subcommand("evaluate", "Score fold checkpoints on their held-out subjects");
  std::string ev_input, ev_folds, ev_ckpt, ev_space = "auto";
  std::string tag_model = "FetalSleepNet", tag_pretrain = "none", tag_input = "raw", tag_strategy = "full";
  PrepFlags ev_prep;
  evl->add_option("--input", ev_input)->required()->check(CLI::ExistingDirectory);
  auto* ev_folds_opt =
      evl->add_option("--folds", ev_folds, "Directory of <subject>.ckpt files")->check(CLI::ExistingDirectory);
  evl->add_option("--checkpoint", ev_ckpt, "One checkpoint for every subject")
      ->check(CLI::ExistingFile)
      ->excludes(ev_folds_opt);
  evl->add_option("--space", ev_space)->capture_default_str();
  evl->add_option("--tag-model", tag_model)->capture_default_str();
  evl->add_option("--tag-pretrain", tag_pretrain)->capture_default_str();
  evl->add_option("--tag-input", tag_input)->capture_default_str();
  evl->add_option("--tag-strategy", tag_strategy)->capture_default_str();
  ev_prep.add(evl);

  // stats
  auto* st = app.add_subcommand("stats", "Paired exact Wilcoxon tests between two results tables");
  std::string st_a, st_b;
  double st_alpha = 0.05;
  st->add_option("--a", st_a)->required()->check(CLI::ExistingFile);
  st->add_option("--b", st_b)->required()->check(CLI::ExistingFile);
  st->add_option("--alpha", st_alpha)->capture_default_str();

  // bench
  auto* bench = app.add_subcommand("bench", "Single-epoch inference latency");
  std::string bench_ckpt, bench_model = "full";
  std::size_t bench_runs = 200, bench_warmup = 10;
  bench->add_option("--checkpoint", bench_ckpt)->check(CLI::ExistingFile);
  bench->add_option("--model", bench_model, "Fresh model size when no checkpoint is given")->capture_default_str();
  bench->add_option("--runs", bench_runs)->capture_default_str();
  bench->add_option("--warmup", bench_warmup)->capture_default_str();
  bench->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  auto* cmd = app.get_subcommands().front();
  // resolved settings of the global options and the active subcommand only
  std::string config_text;
  {
    std::stringstream all(app.config_to_str(true, false));
    const std::string prefix = cmd->get_name() + ".";
    for (std::string line; std::getline(all, line);) {
      const auto eq = line.find('=');
      const auto dot = line.find('.');
      if (dot == std::string::npos || dot > eq || line.rfind(prefix, 0) == 0) config_text += line + "\n";
    }
  }

  try {
    const fs::path out = out_dir();
    const bool seeded = cmd->get_option_no_throw("--seed") && cmd->count("--seed") > 0;
    Manifest manifest(cmd->get_name(), out, config_text, seeded ? std::optional<std::uint64_t>(seed) : std::nullopt);

    if (cmd == ingest) {
      json report = json::array();
      std::size_t failures = 0, edf_index = 0;
      for (const auto& in : ingest_inputs) {
        const fs::path p(in);
        json entry{{"input", in}};
        try {
          manifest.input(p);
          Recording rec;
          LabelTrack labels;
          if (p.extension() == ".fsr") {
            std::tie(rec, labels) = container::read_internal(p);
          } else {
            auto stem = p.stem().string();
            if (const auto dash = stem.find("-PSG"); dash != std::string::npos) stem.erase(dash);
            rec = edf::parse_edf(container::read_file(p)).to_recording(ingest_channels, stem);
            if (edf_index < ingest_hyp.size()) {
              manifest.input(ingest_hyp[edf_index]);
              labels = edf::parse_hypnogram_file(container::read_file(ingest_hyp[edf_index]), ingest_stage_map());
            }
            ++edf_index;
          }
          rec.validate();
          labels.validate();
          const auto dest = out / (rec.subject_id + ".fsr");
          container::write_internal(dest, rec, labels);
          manifest.output(dest);
          manifest.output(container::labels_path(dest));
          double covered = 0.0;
          for (const auto& iv : labels.intervals)
            if (iv.stage != Stage::kExcluded)
              covered += std::max(0.0, std::min(iv.end_s, rec.duration_s()) - std::max(iv.start_s, 0.0));
          json chans = json::array();
          for (const auto& c : rec.channels) chans.push_back(c.label);
          entry["status"] = "ok";
          entry["subject"] = rec.subject_id;
          entry["channels"] = chans;
          entry["sample_rate_hz"] = rec.sample_rate_hz;
          entry["duration_s"] = rec.duration_s();
          entry["label_coverage"] = rec.duration_s() > 0 ? covered / rec.duration_s() : 0.0;
        } catch (const Error& e) {
          ++failures;
          entry["status"] = "failed";
          entry["error"] = e.what();
          std::cerr << in << ": " << e.what() << "\n";
        }
        report.push_back(entry);
      }
      const auto rp = out / "ingest_report.json";
      container::write_text(rp, report.dump(2) + "\n");
      manifest.output(rp);
      if (failures) {
        std::cerr << failures << " of " << ingest_inputs.size() << " input(s) failed\n";
        return 2;
      }
    } else if (cmd == synth_cmd) {
      const auto domain = syn_domain == "adult" ? synth::Domain::kAdult
                          : syn_domain == "fetal"
                              ? synth::Domain::kFetal
                              : throw ConfigError("domain must be fetal or adult");
      auto base = synth::default_config(domain);
      base.seed = seed;
      base.duration_s = syn_hours * 3600.0;
      base.adult_tilt.exponent = syn_tilt;
      if (syn_rate) base.sample_rate_hz = *syn_rate;
      const std::string prefix = syn_prefix.empty() ? (domain == synth::Domain::kFetal ? "F" : "A") : syn_prefix;
      if (syn_format != "fsr" && syn_format != "edf") throw ConfigError("format must be fsr or edf");
      for (const auto& cfg : synth::subject_configs(base, syn_subjects, prefix)) {
        const auto g = synth::generate(cfg);
        if (syn_format == "fsr") {
          const auto dest = out / (cfg.subject_id + ".fsr");
          container::write_internal(dest, g.recording, g.labels);
          manifest.output(dest);
          manifest.output(container::labels_path(dest));
        } else {
          const auto psg = out / (cfg.subject_id + "-PSG.edf");
          const auto hyp = out / (cfg.subject_id + "-Hypnogram.edf");
          container::write_file(psg, edf::write_edf(edf::make_header(g.recording, 1.0), g.recording));
          std::vector<edf::Annotation> ann;
          for (const auto& iv : g.labels.intervals)
            ann.push_back({iv.start_s, iv.duration_s(), std::string(stage_token(iv.stage))});
          container::write_file(hyp, edf::make_annotation_file(ann, g.recording.duration_s()));
          manifest.output(psg);
          manifest.output(hyp);
        }
        std::cout << cfg.subject_id << "\n";
      }
    } else if (cmd == psd) {
      manifest.input(psd_input);
      auto subjects = load_dir(psd_input);
      std::vector<Recording> recs;
      pipeline::PreprocessOptions opt;
      opt.target_rate_hz = psd_rate;
      for (auto& s : subjects) recs.push_back(psd_filter ? pipeline::bandpass_resample(s.recording, opt) : s.recording);
      for (std::size_t c = 0; c < recs.front().channels.size(); ++c) {
        const auto dest = out / ("psd_ch" + std::to_string(c) + ".csv");
        container::write_text(dest, equalise::psd_to_csv(equalise::mean_group_psd(recs, c)));
        manifest.output(dest);
      }
    } else if (cmd == eq) {
      manifest.input(eq_source);
      const auto source = load_dir(eq_source);
      std::vector<Recording> src;
      for (const auto& s : source) src.push_back(s.recording);
      equalise::EqualisationMap map;
      if (!eq_map.empty()) {
        manifest.input(eq_map);
        map = load_map(eq_map);
      } else {
        if (eq_target.empty()) throw ConfigError("--target is required unless --map is given");
        manifest.input(eq_target);
        const auto target = load_dir(eq_target);
        // target brought to the source rate through the same 1-22 Hz path the model sees
        pipeline::PreprocessOptions opt;
        opt.target_rate_hz = src.front().sample_rate_hz;
        std::vector<Recording> tgt;
        for (const auto& t : target) tgt.push_back(pipeline::bandpass_resample(t.recording, opt));
        std::vector<dsp::PsdEstimate> tp, sp;
        for (std::size_t c = 0; c < tgt.front().channels.size(); ++c) tp.push_back(equalise::mean_group_psd(tgt, c));
        for (std::size_t c = 0; c < src.front().channels.size(); ++c) sp.push_back(equalise::mean_group_psd(src, c));
        map = equalise::compute_gain_map(tp, sp, parse_mapping(eq_mapping, sp.size()), eq_eps);
        const auto csv = out / "map.csv", side = out / "map.json";
        container::write_text(csv, equalise::map_to_csv(map));
        container::write_text(side, equalise::map_sidecar_json(map));
        manifest.output(csv);
        manifest.output(side);
      }
      if (eq_apply) {
        fs::create_directories(out / "equalised");
        for (const auto& s : source) {
          const auto dest = out / "equalised" / (s.recording.subject_id + ".fsr");
          container::write_internal(dest, equalise::equalisation_pipeline(s.recording, map), s.labels);
          manifest.output(dest);
        }
      }
    } else if (cmd == feat) {
      manifest.input(feat_input);
      const auto subjects = load_dir(feat_input);
      const auto space = parse_space(feat_space, subjects);
      std::string csv = features::csv_header();
      std::vector<std::vector<double>> rows;
      std::vector<int> labels;
      std::vector<std::string> owner;
      for (const auto& s : subjects) {
        auto opt = space == LabelSpace::kAdult ? pipeline::adult_defaults() : pipeline::PreprocessOptions{};
        auto rec = pipeline::bandpass_resample(s.recording, opt);
        const auto profile =
            feat_cal ? features::zscore_fit_calibration(rec, *feat_cal) : features::zscore_fit(rec, &s.labels);
        rec = features::zscore_apply(rec, profile);
        for (const auto& e : features::segment_epochs(rec, s.labels, opt.segment)) {
          const auto cls = class_index(e.label, space);
          if (!cls) continue;
          const auto fv = features::extract_features(e.channels[0], e.channels[1], rec.sample_rate_hz);
          csv += features::csv_row(s.recording.subject_id, e.start_s, stage_token(e.label), fv);
          rows.emplace_back(fv.values.begin(), fv.values.end());
          labels.push_back(*cls);
          owner.push_back(s.recording.subject_id);
        }
      }
      const auto dest = out / "features.csv";
      container::write_text(dest, csv);
      manifest.output(dest);
      if (feat_importance) {
        const auto& names = features::FeatureVector::names();
        const std::vector<std::string> name_vec(names.begin(), names.end());
        std::vector<std::vector<eval::FeatureImportance>> per_fold;
        for (const auto& s : subjects) {
          const auto& id = s.recording.subject_id;
          std::vector<std::size_t> tr, te;
          for (std::size_t i = 0; i < rows.size(); ++i) (owner[i] == id ? te : tr).push_back(i);
          if (te.empty() || tr.empty()) continue;
          auto gather = [&](const std::vector<std::size_t>& idx, layers::Mat& X, std::vector<int>& y) {
            X.resize(static_cast<Eigen::Index>(idx.size()), features::kNumFeatures);
            y.clear();
            for (std::size_t r = 0; r < idx.size(); ++r) {
              for (std::size_t c = 0; c < features::kNumFeatures; ++c)
                X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[idx[r]][c];
              y.push_back(labels[idx[r]]);
            }
          };
          layers::Mat Xtr, Xte;
          std::vector<int> ytr, yte;
          gather(tr, Xtr, ytr);
          gather(te, Xte, yte);
          const auto clf = eval::SoftmaxRegression::fit(Xtr, ytr, static_cast<std::size_t>(num_classes(space)));
          per_fold.push_back(eval::permutation_importance(clf, Xte, yte, name_vec, feat_repeats, seed));
        }
        std::string imp = "rank,feature,mean_drop,std_drop,constant\n";
        std::size_t rank = 1;
        for (const auto& f : eval::average_importance(per_fold)) {
          char buf[96];
          std::snprintf(buf, sizeof(buf), "%.6f,%.6f", f.mean_drop, f.std_drop);
          imp += std::to_string(rank++) + "," + f.name + "," + buf + "," + (f.constant ? "yes" : "no") + "\n";
        }
        const auto ip = out / "importance.csv";
        container::write_text(ip, imp);
        manifest.output(ip);
      }
    } else if (cmd == pre) {
      manifest.input(pre_input);
      if (!pre_prep.map.empty()) manifest.input(pre_prep.map);
      const auto subjects = load_dir(pre_input);
      const auto space = parse_space(pre_space, subjects);
      const auto seqs = pre_prep.prepare(subjects, space);
      const auto w0 = model::init_weights(model_config(pre_train.model, num_classes(space)), init_seed);
      const auto r = pipeline::pretrain(w0, seqs, pre_train.config(seed), pre_train.val_count);
      const auto ckpt = out / "pretrained.ckpt", hist = out / "history.csv";
      model::save_checkpoint(ckpt, r.best);
      container::write_text(hist, model::history_csv(r.history));
      manifest.output(ckpt);
      manifest.output(hist);
      manifest.extra()["best_epoch"] = r.best_epoch;
      manifest.extra()["epochs_run"] = r.epochs_run;
      std::cout << "best epoch " << r.best_epoch << " of " << r.epochs_run << "\n";
    } else if (cmd == fine) {
      manifest.input(fine_input);
      if (!fine_init.empty()) manifest.input(fine_init);
      if (!fine_prep.map.empty()) manifest.input(fine_prep.map);
      const auto subjects = load_dir(fine_input);
      const auto seqs = fine_prep.prepare(subjects, LabelSpace::kFetal);
      model::ModelWeights w0;
      if (fine_init.empty()) {
        w0 = model::init_weights(model_config(fine_train.model, 3), init_seed);
      } else {
        w0 = model::load_checkpoint(fine_init);
        if (w0.config.num_classes != 3) w0 = model::transfer_remap(w0, 3, init_seed);
      }
      pipeline::LosoOptions o;
      o.train = fine_train.config(seed);
      o.strategy = model::strategy_from_name(fine_strategy);
      o.val_count = fine_train.val_count;
      o.jobs = jobs;
      const auto folds = pipeline::run_loso(w0, seqs, o);
      fs::create_directories(out / "folds");
      std::vector<eval::FoldResult> results;
      json fold_info = json::array();
      for (const auto& f : folds) {
        const auto ckpt = out / "folds" / (f.split.test + ".ckpt");
        const auto hist = out / "folds" / (f.split.test + ".history.csv");
        model::save_checkpoint(ckpt, f.weights);
        container::write_text(hist, model::history_csv(f.history));
        manifest.output(ckpt);
        manifest.output(hist);
        results.push_back(f.test);
        fold_info.push_back({{"test", f.split.test},
                             {"val", f.split.val},
                             {"best_epoch", f.best_epoch},
                             {"epochs_run", f.epochs_run},
                             {"early_stopped", f.early_stopped}});
      }
      manifest.extra()["folds"] = fold_info;
      const auto csv = out / "results.csv";
      container::write_text(csv, results_block_csv(results, LabelSpace::kFetal, "FetalSleepNet",
                                                   fine_init.empty() ? "none" : "adult",
                                                   fine_prep.map.empty() ? "raw" : "equalised", fine_strategy));
      manifest.output(csv);
    } else if (cmd == evl) {
      manifest.input(ev_input);
      if (!ev_prep.map.empty()) manifest.input(ev_prep.map);
      if (ev_folds.empty() && ev_ckpt.empty()) throw ConfigError("evaluate needs --folds or --checkpoint");
      const auto subjects = load_dir(ev_input);
      const auto space = parse_space(ev_space, subjects);
      const auto seqs = ev_prep.prepare(subjects, space);
      std::optional<model::ModelWeights> shared;
      if (!ev_ckpt.empty()) {
        manifest.input(ev_ckpt);
        shared = model::load_checkpoint(ev_ckpt);
      }
      std::vector<eval::FoldResult> results;
      for (const auto& s : seqs) {
        model::ModelWeights w;
        if (shared) {
          w = *shared;
        } else {
          const auto ckpt = fs::path(ev_folds) / (s.subject_id + ".ckpt");
          if (!fs::exists(ckpt)) throw DataError("no fold checkpoint for subject '" + s.subject_id + "'");
          manifest.input(ckpt);
          w = model::load_checkpoint(ckpt);
        }
        auto r = model::evaluate(w, {&s, 1});
        r.fold_id = s.subject_id;
        results.push_back(r);
      }
      const auto csv = out / "results.csv";
      container::write_text(csv,
                            results_block_csv(results, space, tag_model, tag_pretrain, tag_input, tag_strategy));
      manifest.output(csv);
      std::cout << results_block_csv(results, space, tag_model, tag_pretrain, tag_input, tag_strategy);
    } else if (cmd == st) {
      manifest.input(st_a);
      manifest.input(st_b);
      const auto a = read_fold_rows(st_a), b = read_fold_rows(st_b);
      std::map<std::string, FoldRow> bm;
      for (const auto& r : b) bm.emplace(r.fold, r);
      std::vector<double> acc_a, acc_b, f1_a, f1_b;
      for (const auto& r : a) {
        const auto it = bm.find(r.fold);
        if (it == bm.end()) throw DataError("fold '" + r.fold + "' missing from " + st_b);
        acc_a.push_back(r.accuracy);
        acc_b.push_back(it->second.accuracy);
        f1_a.push_back(r.macro_f1);
        f1_b.push_back(it->second.macro_f1);
      }
      const std::vector<eval::PairedTestResult> tests{eval::wilcoxon_exact(acc_a, acc_b, "accuracy", st_alpha),
                                                      eval::wilcoxon_exact(f1_a, f1_b, "macro_f1", st_alpha)};
      const std::vector<double> ps{tests[0].p, tests[1].p};
      const auto text = eval::stats_csv(tests, eval::holm_bonferroni(ps, st_alpha), eval::bonferroni(ps, st_alpha));
      const auto dest = out / "stats.csv";
      container::write_text(dest, text);
      manifest.output(dest);
      std::cout << text;
    } else if (cmd == bench) {
      model::ModelWeights w;
      if (!bench_ckpt.empty()) {
        manifest.input(bench_ckpt);
        w = model::load_checkpoint(bench_ckpt);
      } else {
        w = model::init_weights(model_config(bench_model, 3), seed);
      }
      const auto rep = model::bench_latency(w, bench_runs, bench_warmup, seed);
      const auto table = model::latency_table(rep);
      std::cout << table;
      const auto txt = out / "bench.txt", js = out / "bench.json";
      container::write_text(txt, table);
      container::write_text(js, json{{"runs", rep.runs},
                                     {"avg_ms", rep.avg_ms},
                                     {"min_ms", rep.min_ms},
                                     {"max_ms", rep.max_ms},
                                     {"throughput_per_s", rep.throughput_per_s}}
                                        .dump(2) +
                                    "\n");
      manifest.output(txt);
      manifest.output(js);
    }
    manifest.finish();
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
}

// stereoid: command-line driver for the StereoID pipeline.
//
//   synth -> train -> translate -> score -> detect / tune -> evaluate -> report
//
// Every subcommand reads and writes plain files, records its resolved options in
// <out>/run.json and can be replayed with `stereoid rerun <out>/run.json`.

#include <stereoid/dataset.hpp>
#include <stereoid/depth.hpp>
#include <stereoid/depth_torchscript.hpp>
#include <stereoid/detector.hpp>
#include <stereoid/distance.hpp>
#include <stereoid/eval.hpp>
#include <stereoid/painter.hpp>
#include <stereoid/parallel.hpp>
#include <stereoid/report.hpp>
#include <stereoid/synth.hpp>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

namespace fs = std::filesystem;
using namespace stereoid;
using ojson = nlohmann::ordered_json;

constexpr const char* kVersion = "1.0.0";

// ---- small helpers ---------------------------------------------------------

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

ojson read_json(const fs::path& path) {
  try {
    return ojson::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw DataError(what + " '" + p.string() + "' not found");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

double to_double(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(what + ": '" + s + "' is not a number");
}

SplitRatios parse_ratios(const std::string& s) {
  auto parts = split(s, ',');
  if (parts.size() != 3) throw ConfigError("--ratios expects three comma-separated values");
  SplitRatios r{};
  for (int i = 0; i < 3; ++i) r[i] = to_double(parts[i], "--ratios");
  validate_ratios(r);
  return r;
}

std::string relative_to(const fs::path& p, const fs::path& base) {
  std::error_code ec;
  fs::path rel = fs::relative(p, base, ec);
  return (ec || rel.empty()) ? fs::absolute(p).generic_string() : rel.generic_string();
}

FeatureMode parse_features(const std::string& s) {
  return s == "components" ? FeatureMode::components : FeatureMode::aggregate;
}

// ---- run records -------------------------------------------------------------

/// Resolved value of every named option of a subcommand, as strings.
ojson resolved_options(const CLI::App& sub) {
  ojson j = ojson::object();
  for (const CLI::Option* o : sub.get_options()) {
    const std::string name = o->get_single_name();
    if (name.empty() || name == "help") continue;
    std::string v;
    if (!o->results().empty()) {
      for (std::size_t i = 0; i < o->results().size(); ++i) v += (i ? "," : "") + o->results()[i];
    } else {
      v = o->get_default_str();
    }
    j[name] = v;
  }
  return j;
}

void write_run_record(const fs::path& out_dir, const CLI::App& sub) {
  ojson j;
  j["tool"] = "stereoid";
  j["version"] = kVersion;
  j["command"] = sub.get_name();
  j["options"] = resolved_options(sub);
  fs::create_directories(out_dir);
  write_text(out_dir / "run.json", j.dump(2) + "\n");
}

// ---- depth lookup --------------------------------------------------------------

/// Depth maps come from the first cache holding them, searched in the order
/// --depth-dir, STEREOID_CACHE, <manifest dir>/depth. Misses are computed with
/// the TorchScript model, when one is given, and stored in the first cache.
class DepthLookup {
 public:
  DepthLookup(const fs::path& manifest_dir, const std::string& depth_dir, const std::string& model, int input_size) {
    if (!depth_dir.empty()) caches_.emplace_back(depth_dir);
    if (const char* env = std::getenv("STEREOID_CACHE"); env && *env) caches_.emplace_back(env);
    caches_.emplace_back(manifest_dir / "depth");
    if (!model.empty()) backend_ = std::make_unique<TorchScriptDepthBackend>(model, input_size);
    fs::create_directories(caches_.front().dir());
  }

  DepthMap get(const std::string& frame_id, Eye eye, const TensorImage& image) const {
    for (const auto& c : caches_)
      if (c.contains(frame_id, eye)) return c.load(frame_id, eye);
    return caches_.front().get_or_compute(frame_id, eye, image, backend_.get());
  }

 private:
  std::vector<DepthCache> caches_;
  std::unique_ptr<DepthBackend> backend_;
};

struct DepthOptions {
  std::string dir;
  std::string model;
  int input_size = 512;
};

void add_depth_options(CLI::App* s, DepthOptions& d) {
  s->add_option("--depth-dir", d.dir, "depth cache directory searched before STEREOID_CACHE and <manifest dir>/depth");
  s->add_option("--depth-model", d.model, "TorchScript relative-depth model used on cache misses");
  s->add_option("--depth-input-size", d.input_size, "square input size of the depth model")->check(CLI::PositiveNumber);
}

// ---- preprocessing -------------------------------------------------------------

struct GeometryOptions {
  int eye_width = 0;
  int eye_height = 0;
  int crop = 0;

  /// All zero means frames are used at native resolution.
  std::optional<PreprocessConfig> config() const {
    if (eye_width == 0 && eye_height == 0 && crop == 0) return std::nullopt;
    if (eye_width <= 0 || eye_height <= 0 || crop <= 0)
      throw ConfigError("--eye-width, --eye-height and --crop must be set together");
    PreprocessConfig c{eye_width, eye_height, crop};
    c.validate();
    return c;
  }
};

void add_geometry_options(CLI::App* s, GeometryOptions& g) {
  s->add_option("--eye-width", g.eye_width, "resize each eye to this width before cropping (0: native)")
      ->check(CLI::NonNegativeNumber);
  s->add_option("--eye-height", g.eye_height, "resize each eye to this height before cropping (0: native)")
      ->check(CLI::NonNegativeNumber);
  s->add_option("--crop", g.crop, "square crop taken from both eyes (0: native)")->check(CLI::NonNegativeNumber);
}

PainterSample load_sample(const ManifestEntry& e, const fs::path& root, const DepthLookup& depth,
                          const std::optional<PreprocessConfig>& geom, PreprocessMode mode, std::uint64_t seed) {
  StereoFrame frame = load_frame(e, root);
  DepthMap dl = depth.get(e.frame_id, Eye::left, frame.left);
  DepthMap dr = depth.get(e.frame_id, Eye::right, frame.right);
  if (!geom) {
    if (dl.height() != frame.left.height() || dl.width() != frame.left.width() || dr.height() != dl.height() ||
        dr.width() != dl.width())
      throw ShapeError("depth maps of '" + e.frame_id + "' do not match the frame extent");
    return make_sample(frame, dl, dr);
  }
  return preprocess_sample(frame, dl, dr, mode, *geom, seed);
}

// ---- synth ---------------------------------------------------------------------

struct SynthOptions {
  std::string out;
  std::uint64_t seed = 0;
  int workers = 1;
  int n_normal = 3763;
  std::string mix = "table1";
  std::string scenes;
  double min_magnitude = 0.5;
  double max_magnitude = 1.0;
  int width = 64;
  int height = 64;
  int min_objects = 2;
  int max_objects = 4;
  std::string ratios = "0.9,0.05,0.05";
};

std::map<Category, int> parse_mix(const std::string& s) {
  if (s == "table1") return table1_sampled_mix();
  std::map<Category, int> mix;
  if (s == "none" || s.empty()) return mix;
  for (const auto& part : split(s, ',')) {
    auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("--mix entries look like Category=count, got '" + part + "'");
    const double n = to_double(part.substr(eq + 1), "--mix");
    if (n < 0 || n != static_cast<int>(n)) throw ConfigError("--mix counts must be nonnegative integers");
    try {
      mix[parse_category(part.substr(0, eq))] += static_cast<int>(n);
    } catch (const DataError& e) {
      throw ConfigError(std::string("--mix: ") + e.what());
    }
  }
  return mix;
}

void run_synth(const SynthOptions& o) {
  const SplitRatios ratios = parse_ratios(o.ratios);
  auto pf = [&](std::size_t n, auto&& fn) { parallel_for(n, o.workers, fn); };
  DatasetManifest m;
  if (!o.scenes.empty()) {
    require_file(o.scenes, "scene plan");
    auto plans = read_scene_log(o.scenes);
    for (const auto& p : plans) p.scene.validate();
    m = write_corpus(plans, ratios, o.seed, o.out, pf);
  } else {
    CorpusConfig cfg;
    cfg.n_normal = o.n_normal;
    cfg.fault_mix = parse_mix(o.mix);
    cfg.min_magnitude = o.min_magnitude;
    cfg.max_magnitude = o.max_magnitude;
    cfg.ratios = ratios;
    cfg.seed = o.seed;
    cfg.sampler.width = o.width;
    cfg.sampler.height = o.height;
    if (o.min_objects < 0 || o.min_objects > o.max_objects) throw ConfigError("need 0 <= --min-objects <= --max-objects");
    cfg.sampler.min_objects = o.min_objects;
    cfg.sampler.max_objects = o.max_objects;
    m = generate_corpus(cfg, o.out, pf);
  }
  std::size_t issues = 0;
  for (const auto& e : m.entries) issues += e.label == Label::issue;
  std::cout << "synth: " << m.entries.size() << " frames (" << issues << " faulty) in " << o.out << "\n";
}

// ---- ingest --------------------------------------------------------------------

struct IngestOptions {
  std::string input;
  std::string out;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string layout = "auto";
  std::string labels;
  std::string ratios = "0.9,0.05,0.05";
};

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Optional CSV frame_id,label[,category] attaching ground truth to ingested frames.
std::map<std::string, std::pair<Label, std::optional<Category>>> read_label_csv(const fs::path& path) {
  std::map<std::string, std::pair<Label, std::optional<Category>>> out;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || (lineno == 1 && line.rfind("frame_id", 0) == 0)) continue;
    auto f = split_csv_line(line);
    const std::string ctx = path.string() + ":" + std::to_string(lineno);
    if (f.size() < 2 || f.size() > 3) throw DataError(ctx + ": expected frame_id,label[,category]");
    try {
      Label l = label_from_int(static_cast<int>(parse_real(f[1], ctx)));
      std::optional<Category> c;
      if (f.size() == 3 && !f[2].empty()) c = parse_category(f[2]);
      out[f[0]] = {l, c};
    } catch (const ConfigError& e) {
      throw DataError(ctx + ": " + e.what());
    }
  }
  return out;
}

void run_ingest(const IngestOptions& o) {
  if (!fs::is_directory(o.input)) throw DataError("input directory '" + o.input + "' not found");
  const SplitRatios ratios = parse_ratios(o.ratios);
  std::vector<fs::path> pngs;
  for (const auto& de : fs::directory_iterator(o.input))
    if (de.is_regular_file() && de.path().extension() == ".png") pngs.push_back(de.path());
  std::sort(pngs.begin(), pngs.end());
  if (pngs.empty()) throw DataError("no PNG files in '" + o.input + "'");

  std::map<std::string, std::pair<std::optional<fs::path>, std::optional<fs::path>>> pairs;
  std::vector<fs::path> sbs;
  for (const auto& p : pngs) {
    const std::string stem = p.stem().string();
    const bool is_l = ends_with(stem, "_L"), is_r = ends_with(stem, "_R");
    if (o.layout != "sbs" && (is_l || is_r)) {
      auto& slot = pairs[stem.substr(0, stem.size() - 2)];
      (is_l ? slot.first : slot.second) = p;
    } else if (o.layout != "pairs") {
      sbs.push_back(p);
    }
  }
  fs::create_directories(o.out);
  DatasetManifest m;
  for (const auto& p : sbs) {
    ManifestEntry e;
    e.frame_id = p.stem().string();
    e.sbs_path = relative_to(p, o.out);
    m.entries.push_back(e);
  }
  for (const auto& [id, lr] : pairs) {
    if (!lr.first || !lr.second) throw DataError("frame '" + id + "' is missing its " + (lr.first ? "_R" : "_L") + " image");
    ManifestEntry e;
    e.frame_id = id;
    e.left_path = relative_to(*lr.first, o.out);
    e.right_path = relative_to(*lr.second, o.out);
    m.entries.push_back(e);
  }
  std::sort(m.entries.begin(), m.entries.end(), [](const auto& a, const auto& b) { return a.frame_id < b.frame_id; });
  if (!o.labels.empty()) {
    auto labels = read_label_csv(o.labels);
    for (auto& e : m.entries) {
      if (auto it = labels.find(e.frame_id); it != labels.end()) {
        e.label = it->second.first;
        e.category = it->second.second;
      }
    }
  }
  m.validate();
  // Every frame must decode and split before the manifest is written.
  parallel_for(m.entries.size(), o.workers, [&](std::size_t i) { (void)load_frame(m.entries[i], o.out); });
  m = partition(m, ratios, o.seed);
  write_manifest(m, fs::path(o.out) / "manifest.jsonl");
  std::cout << "ingest: " << m.entries.size() << " frames -> " << (fs::path(o.out) / "manifest.jsonl").string() << "\n";
}

// ---- train ---------------------------------------------------------------------

struct TrainOptions {
  std::string manifest;
  std::string out;
  std::uint64_t seed = 0;
  int workers = 1;
  DepthOptions depth;
  GeometryOptions geom;
  int ngf = 64;
  int depth_levels = 5;
  int ndf = 64;
  int critic_layers = 3;
  int batch_size = 64;
  double learning_rate = 1e-3;
  int critic_iterations = 5;
  std::int64_t max_steps = 2000;
  int patience = 5;
  double loss_alpha = 100.0;
  double loss_beta = 1.0;
  double lambda_gp = 10.0;
  std::size_t train_size = 0;
  std::string resume;
};

void run_train(const TrainOptions& o) {
  require_file(o.manifest, "manifest");
  const auto geom = o.geom.config();
  GeneratorConfig g{o.ngf, o.depth_levels, 9, 3};
  CriticConfig c{o.ndf, o.critic_layers, 0.2, 12};
  LossWeights w{o.lambda_gp, o.loss_alpha, o.loss_beta};
  TrainConfig t;
  t.batch_size = o.batch_size;
  t.learning_rate = o.learning_rate;
  t.critic_iterations = o.critic_iterations;
  t.max_steps = o.max_steps;
  t.early_stop_patience = o.patience;
  t.seed = o.seed;
  t.checkpoint_dir = o.out;
  g.validate();
  c.validate();
  w.validate();
  t.validate();

  DatasetManifest m = read_manifest(o.manifest);
  if (o.train_size > 0) m = subsample_training(m, o.train_size, derive_seed(o.seed, 0x7a1));
  const fs::path root = fs::path(o.manifest).parent_path();
  auto lookup = std::make_shared<DepthLookup>(root, o.depth.dir, o.depth.model, o.depth.input_size);
  auto source = [&](Split s, PreprocessMode mode) {
    auto entries = std::make_shared<std::vector<ManifestEntry>>(m.of_split(s));
    SampleSource src;
    src.size = entries->size();
    src.load = [entries, root, lookup, geom, mode](std::size_t i, std::uint64_t seed) {
      return load_sample((*entries)[i], root, *lookup, geom, mode, seed);
    };
    return src;
  };
  SampleSource train_src = source(Split::train, PreprocessMode::train);
  SampleSource val_src = source(Split::val, PreprocessMode::eval);
  if (train_src.size == 0) throw DataError("manifest has no training frames");

  torch::set_num_threads(1);
  std::unique_ptr<PainterModel> model;
  if (!o.resume.empty()) {
    require_file(o.resume, "checkpoint");
    model = std::make_unique<PainterModel>(load_checkpoint(o.resume));
    model->train_cfg.max_steps = o.max_steps;
    model->train_cfg.early_stop_patience = o.patience;
    model->train_cfg.checkpoint_dir = o.out;
  } else {
    model = std::make_unique<PainterModel>(g, c, w, t);
  }
  fs::create_directories(o.out);
  const double identity = val_src.size ? identity_l1(val_src) : 0.0;
  TrainResult r = train(*model, train_src, val_src, [&](const StepRecord& rec) {
    std::cerr << "step " << rec.step << " g_total " << rec.g_total << " d_loss " << rec.d_loss << "\n";
  });
  write_training_log(fs::path(o.out) / "training_log.jsonl", r.log);
  std::ostringstream v;
  v << "epoch,step,val_l1,improved\n";
  for (const auto& rec : r.validation)
    v << rec.epoch << ',' << rec.step << ',' << format_real(rec.val_l1) << ',' << (rec.improved ? 1 : 0) << '\n';
  write_text(fs::path(o.out) / "validation.csv", v.str());
  ojson s;
  s["steps"] = model->state.generator_steps;
  s["critic_steps"] = model->state.critic_steps;
  s["epochs"] = model->state.epochs;
  s["stopped_early"] = r.stopped_early;
  s["best_val_l1"] = std::isfinite(r.best_val_l1) ? ojson(r.best_val_l1) : ojson(nullptr);
  s["identity_val_l1"] = identity;
  s["train_frames"] = train_src.size;
  s["val_frames"] = val_src.size;
  write_text(fs::path(o.out) / "train_summary.json", s.dump(2) + "\n");
  std::cout << "train: " << model->state.generator_steps << " steps, best val L1 " << r.best_val_l1 << " (identity "
            << identity << ")\n";
}

// ---- translate -----------------------------------------------------------------

struct TranslateOptions {
  std::string manifest;
  std::string out;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string translator = "painter";
  std::string checkpoint;
  std::string split = "all";
  DepthOptions depth;
  GeometryOptions geom;
};

struct TranslationRow {
  std::string frame_id;
  std::string synthetic;
  std::string real;
};

void run_translate(const TranslateOptions& o) {
  require_file(o.manifest, "manifest");
  const auto geom = o.geom.config();
  const fs::path root = fs::path(o.manifest).parent_path();
  DatasetManifest m = read_manifest(o.manifest);
  std::vector<ManifestEntry> entries = o.split == "all" ? m.entries : m.of_split(parse_split(o.split));
  if (entries.empty()) throw DataError("no frames selected for translation");

  std::unique_ptr<PainterModel> model;
  std::unique_ptr<DepthLookup> lookup;
  std::map<std::string, SceneSpec> scenes;
  if (o.translator == "painter") {
    if (o.checkpoint.empty()) throw ConfigError("--translator painter needs --checkpoint");
    require_file(o.checkpoint, "checkpoint");
    torch::set_num_threads(1);
    model = std::make_unique<PainterModel>(load_checkpoint(o.checkpoint));
    lookup = std::make_unique<DepthLookup>(root, o.depth.dir, o.depth.model, o.depth.input_size);
  } else if (o.translator == "reference") {
    if (geom) throw ConfigError("--translator reference works at native resolution only");
    const fs::path log = CorpusPaths{root}.scenes();
    require_file(log, "scene log");
    for (auto& f : read_scene_log(log)) scenes.emplace(f.frame_id, std::move(f.scene));
  }

  const fs::path out(o.out);
  fs::create_directories(out / "synthetic");
  fs::create_directories(out / "real");
  std::vector<TranslationRow> rows(entries.size());
  parallel_for(entries.size(), o.workers, [&](std::size_t i) {
    const ManifestEntry& e = entries[i];
    StereoFrame frame = load_frame(e, root);
    TensorImage syn = frame.left, real = frame.right;
    if (o.translator == "painter") {
      PainterSample s = load_sample(e, root, *lookup, geom, PreprocessMode::eval, 0);
      syn = convert_range(generator_forward(*model, s.left, s.depth_left, s.depth_right), ValueRange::unit);
      real = convert_range(s.right, ValueRange::unit);
    } else if (o.translator == "reference") {
      auto it = scenes.find(e.frame_id);
      if (it == scenes.end()) throw DataError("frame '" + e.frame_id + "' has no scene in the scene log");
      RenderedScene r = render_scene(it->second, e.frame_id);
      syn = reference_right_view(frame.left, r.metric_left, r.metric_right, it->second.camera);
    } else if (geom) {
      StereoFrame p = preprocess(frame, PreprocessMode::eval, *geom, 0);
      syn = p.left;
      real = p.right;
    }
    rows[i] = {e.frame_id, "synthetic/" + e.frame_id + ".png", "real/" + e.frame_id + ".png"};
    write_png_rgb(out / rows[i].synthetic, syn);
    write_png_rgb(out / rows[i].real, real);
  });
  std::ostringstream os;
  for (const auto& r : rows) {
    ojson j;
    j["frame_id"] = r.frame_id;
    j["synthetic"] = r.synthetic;
    j["real"] = r.real;
    os << j.dump() << '\n';
  }
  write_text(out / "translations.jsonl", os.str());
  std::cout << "translate: " << rows.size() << " frames via " << o.translator << " -> " << o.out << "\n";
}

std::vector<TranslationRow> read_translations(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<TranslationRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      rows.push_back({j.at("frame_id").get<std::string>(), j.at("synthetic").get<std::string>(),
                      j.at("real").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (rows.empty()) throw DataError("'" + path.string() + "' lists no translations");
  return rows;
}

// ---- score ---------------------------------------------------------------------

struct ScoreOptions {
  std::string translations;
  std::string out;
  int workers = 1;
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  std::string reduction = "mean";
  std::string ssim = "global";
};

void run_score(const ScoreOptions& o) {
  require_file(o.translations, "translation list");
  DistanceOptions opt;
  opt.weights = {o.alpha, o.beta, o.gamma};
  opt.weights.validate();
  opt.reduction = o.reduction == "sum" ? Reduction::sum : Reduction::mean;
  opt.ssim_mode = o.ssim == "window" ? SsimMode::gaussian_window : SsimMode::global;
  const auto rows = read_translations(o.translations);
  const fs::path base = fs::path(o.translations).parent_path();
  std::vector<DiscrepancyRecord> recs(rows.size());
  parallel_for(rows.size(), o.workers, [&](std::size_t i) {
    recs[i] = measure(rows[i].frame_id, read_png_rgb(resolve_path(base, rows[i].synthetic)),
                      read_png_rgb(resolve_path(base, rows[i].real)), opt);
  });
  const fs::path csv = fs::path(o.out) / "discrepancy.csv";
  write_discrepancy_csv(csv, recs, opt);
  std::cout << "score: " << recs.size() << " records -> " << csv.string() << "\n";
}

// ---- detect / tune -------------------------------------------------------------

struct ForestOptions {
  double contamination = 0.058;
  int n_estimators = 110;
  int subsample_size = 256;
  std::string features = "aggregate";
};

void add_forest_options(CLI::App* s, ForestOptions& f, bool grid_owned) {
  if (!grid_owned) {
    s->add_option("--contamination", f.contamination, "expected outlier fraction; sets the score threshold");
    s->add_option("--n-estimators", f.n_estimators, "number of isolation trees");
  }
  s->add_option("--subsample-size", f.subsample_size, "points drawn per tree");
  s->add_option("--features", f.features, "detector input: aggregate discrepancy or the three components")
      ->check(CLI::IsMember({"aggregate", "components"}));
}

struct DetectOptions {
  std::string discrepancy;
  std::string fit;
  std::string out;
  std::uint64_t seed = 0;
  ForestOptions forest;
};

void run_detect(const DetectOptions& o) {
  require_file(o.discrepancy, "discrepancy CSV");
  ForestConfig cfg{o.forest.n_estimators, o.forest.contamination, o.forest.subsample_size, o.seed};
  cfg.validate();
  const auto recs = read_discrepancy_csv(o.discrepancy);
  std::vector<DiscrepancyRecord> fit_recs;
  if (!o.fit.empty()) {
    require_file(o.fit, "fit CSV");
    fit_recs = read_discrepancy_csv(o.fit);
  }
  const auto mode = parse_features(o.forest.features);
  DetectionRun run = o.fit.empty() ? detect(recs, cfg, mode) : detect(fit_recs, recs, cfg, mode);
  const fs::path csv = fs::path(o.out) / "detection.csv";
  write_detection_report(csv, run);
  std::cout << "detect: flagged " << run.flagged() << " of " << run.results.size() << " -> " << csv.string() << "\n";
}

struct TuneOptions {
  std::string discrepancy;
  std::string manifest;
  std::string out;
  std::uint64_t seed = 0;
  std::string contaminations = "0.01:0.1:100";
  std::string trees = "50:300:5";
  ForestOptions forest;
};

TuneGrid parse_grid(const std::string& contaminations, const std::string& trees) {
  TuneGrid g;
  auto c = split(contaminations, ':');
  if (c.size() != 3) throw ConfigError("--contaminations expects lo:hi:count");
  const double lo = to_double(c[0], "--contaminations"), hi = to_double(c[1], "--contaminations");
  const double count = to_double(c[2], "--contaminations");
  if (count < 1 || count != static_cast<int>(count) || hi < lo) throw ConfigError("--contaminations needs lo <= hi and count >= 1");
  for (int i = 0; i < static_cast<int>(count); ++i)
    g.contaminations.push_back(count == 1 ? lo : lo + (hi - lo) * i / (count - 1));
  auto t = split(trees, ':');
  if (t.size() != 3) throw ConfigError("--trees expects lo:hi:step");
  const double tlo = to_double(t[0], "--trees"), thi = to_double(t[1], "--trees"), step = to_double(t[2], "--trees");
  if (tlo < 1 || thi < tlo || step < 1) throw ConfigError("--trees needs 1 <= lo <= hi and step >= 1");
  for (int n = static_cast<int>(tlo); n <= static_cast<int>(thi); n += static_cast<int>(step)) g.n_estimators.push_back(n);
  return g;
}

std::vector<Label> labels_for(const std::vector<std::string>& ids, const DatasetManifest& m) {
  std::vector<Label> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const ManifestEntry* e = m.find(id);
    if (!e) throw DataError("frame '" + id + "' is not in the manifest");
    if (!e->label) throw DataError("frame '" + id + "' has no ground-truth label");
    out.push_back(*e->label);
  }
  return out;
}

std::string tune_csv(const TuneResult& r) {
  std::ostringstream os;
  os << "contamination,n_estimators,f1\n";
  for (const auto& c : r.table) os << format_real(c.contamination) << ',' << c.n_estimators << ',' << format_real(c.f1) << '\n';
  return os.str();
}

void run_tune(const TuneOptions& o) {
  require_file(o.discrepancy, "discrepancy CSV");
  require_file(o.manifest, "manifest");
  TuneGrid grid = parse_grid(o.contaminations, o.trees);
  for (double c : grid.contaminations) ForestConfig{110, c, o.forest.subsample_size, o.seed}.validate();
  const auto recs = read_discrepancy_csv(o.discrepancy);
  std::vector<std::string> ids;
  for (const auto& r : recs) ids.push_back(r.frame_id);
  const auto labels = labels_for(ids, read_manifest(o.manifest));
  ForestConfig base{110, 0.058, o.forest.subsample_size, o.seed};
  TuneResult r = tune(recs, labels, grid, base, parse_features(o.forest.features));
  const fs::path out(o.out);
  write_text(out / "tune.csv", tune_csv(r));
  ojson best;
  best["config"] = forest_config_json(r.best);
  best["features"] = o.forest.features;
  best["f1"] = r.best_f1;
  best["grid_cells"] = r.table.size();
  write_text(out / "best.json", best.dump(2) + "\n");
  write_text(out / "heatmap.svg", svg_tune_heatmap(r));
  std::cout << "tune: best contamination " << r.best.contamination << ", n_estimators " << r.best.n_estimators
            << ", F1 " << r.best_f1 << "\n";
}

// ---- evaluate ------------------------------------------------------------------

struct EvaluateOptions {
  std::string detection;
  std::string manifest;
  std::string discrepancy;
  std::string compare;
  std::string out;
};

std::string significance_row(const std::string& name, std::span<const double> a, std::span<const double> b) {
  auto r = mann_whitney_u(a, b);
  std::ostringstream os;
  os << name << ',' << a.size() << ',' << b.size() << ',' << format_real(r.u) << ',' << format_real(r.p) << ','
     << (r.exact ? "exact" : "normal") << '\n';
  return os.str();
}

void run_evaluate(const EvaluateOptions& o) {
  require_file(o.detection, "detection report");
  require_file(o.manifest, "manifest");
  const auto det = read_detection_report(o.detection);
  const DatasetManifest m = read_manifest(o.manifest);
  std::vector<std::string> ids;
  std::vector<Label> pred;
  for (const auto& d : det) {
    ids.push_back(d.frame_id);
    pred.push_back(d.label);
  }
  const auto truth = labels_for(ids, m);
  const fs::path out(o.out);
  const ClassificationReport rep = classification_report(truth, pred);
  write_text(out / "classification_report.csv", classification_report_csv(rep));
  write_text(out / "classification_report.txt", classification_report_text(rep));

  std::vector<CategoryOutcome> outcomes;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (truth[i] != Label::issue) continue;
    const auto& cat = m.find(ids[i])->category;
    if (cat) outcomes.push_back({*cat, pred[i] == Label::issue});
  }
  write_text(out / "recall_by_category.csv", recall_table_csv(recall_by_category(outcomes)));

  std::optional<std::vector<DiscrepancyRecord>> disc;
  if (!o.discrepancy.empty()) {
    require_file(o.discrepancy, "discrepancy CSV");
    disc = read_discrepancy_csv(o.discrepancy);
    std::vector<double> l1, l2, ss;
    for (const auto& r : *disc) {
      l1.push_back(r.l1);
      l2.push_back(r.l2);
      ss.push_back(r.ssim);
    }
    write_text(out / "regression.csv", regression_table_csv(regression_table(l1, l2, ss)));
  }
  if (disc || !o.compare.empty()) {
    std::string sig = "test,n_a,n_b,u,p,method\n";
    if (disc) {
      std::vector<double> issue, normal;
      for (const auto& r : *disc) {
        const ManifestEntry* e = m.find(r.frame_id);
        if (!e || !e->label) continue;
        (*e->label == Label::issue ? issue : normal).push_back(r.aggregate);
      }
      if (!issue.empty() && !normal.empty()) sig += significance_row("aggregate:issue_vs_normal", issue, normal);
    }
    if (!o.compare.empty()) {
      if (!disc) throw ConfigError("--compare needs --discrepancy");
      require_file(o.compare, "comparison CSV");
      const auto other = read_discrepancy_csv(o.compare);
      auto column = [](const std::vector<DiscrepancyRecord>& rs, double DiscrepancyRecord::*f) {
        std::vector<double> v;
        for (const auto& r : rs) v.push_back(r.*f);
        return v;
      };
      for (auto [name, f] : {std::pair{"L1", &DiscrepancyRecord::l1}, std::pair{"L2", &DiscrepancyRecord::l2},
                             std::pair{"SSIM", &DiscrepancyRecord::ssim}, std::pair{"aggregate", &DiscrepancyRecord::aggregate}})
        sig += significance_row(std::string(name) + ":a_vs_b", column(*disc, f), column(other, f));
    }
    write_text(out / "significance.csv", sig);
  }
  ojson s;
  s["frames"] = rep.total;
  s["accuracy"] = rep.accuracy;
  s["issue_precision"] = rep.issue.precision;
  s["issue_recall"] = rep.issue.recall;
  s["issue_f1"] = rep.issue.f1;
  s["macro_f1"] = rep.macro.f1;
  write_text(out / "evaluation.json", s.dump(2) + "\n");
  std::cout << classification_report_text(rep);
}

// ---- report --------------------------------------------------------------------

struct ReportOptions {
  std::string run;
  std::string manifest;
  std::string out;
};

std::optional<fs::path> find_file(const fs::path& dir, const std::string& name) {
  std::vector<fs::path> hits;
  for (const auto& de : fs::recursive_directory_iterator(dir))
    if (de.is_regular_file() && de.path().filename() == name) hits.push_back(de.path());
  if (hits.empty()) return std::nullopt;
  std::sort(hits.begin(), hits.end());
  return hits.front();
}

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(split_csv_line(line));
  return rows;
}

std::string markdown_table(const std::vector<std::vector<std::string>>& rows, std::size_t max_rows = 40) {
  if (rows.empty()) return "";
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& r) {
    os << '|';
    for (const auto& c : r) os << ' ' << c << " |";
    os << '\n';
  };
  line(rows[0]);
  os << '|';
  for (std::size_t i = 0; i < rows[0].size(); ++i) os << " --- |";
  os << '\n';
  for (std::size_t i = 1; i < rows.size() && i <= max_rows; ++i) line(rows[i]);
  if (rows.size() > max_rows + 1) os << "\n(" << rows.size() - 1 - max_rows << " more rows)\n";
  return os.str();
}

std::string html_table(const std::vector<std::vector<std::string>>& rows, std::size_t max_rows = 40) {
  if (rows.empty()) return "";
  std::ostringstream os;
  os << "<table>\n<tr>";
  for (const auto& c : rows[0]) os << "<th>" << svg_detail::escape(c) << "</th>";
  os << "</tr>\n";
  for (std::size_t i = 1; i < rows.size() && i <= max_rows; ++i) {
    os << "<tr>";
    for (const auto& c : rows[i]) os << "<td>" << svg_detail::escape(c) << "</td>";
    os << "</tr>\n";
  }
  os << "</table>\n";
  return os.str();
}

TuneResult read_tune(const fs::path& csv, const fs::path& best_json) {
  TuneResult r;
  auto rows = read_csv_rows(csv);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != 3) throw DataError(csv.string() + ": malformed row " + std::to_string(i + 1));
    r.table.push_back({parse_real(rows[i][0], csv.string()), static_cast<int>(parse_real(rows[i][1], csv.string())),
                       parse_real(rows[i][2], csv.string())});
  }
  if (fs::exists(best_json)) {
    auto j = read_json(best_json);
    r.best.contamination = j["config"]["contamination"].get<double>();
    r.best.n_estimators = j["config"]["n_estimators"].get<int>();
    r.best_f1 = j["f1"].get<double>();
  }
  return r;
}

void run_report(const ReportOptions& o) {
  if (!fs::is_directory(o.run)) throw DataError("run directory '" + o.run + "' not found");
  std::optional<DatasetManifest> m;
  if (!o.manifest.empty()) {
    require_file(o.manifest, "manifest");
    m = read_manifest(o.manifest);
  }
  struct Section {
    std::string title;
    std::string md;
    std::string html;
  };
  std::vector<Section> sections;
  std::vector<std::pair<std::string, std::string>> figures;  // file name, svg

  auto split_by_label = [&](const std::vector<std::pair<std::string, double>>& xs, const std::string& fallback_name,
                            const std::function<bool(std::size_t)>& fallback_issue) {
    HistogramSeries normal{"normal", "#4477aa", {}}, issue{"issue", "#cc3311", {}};
    for (std::size_t i = 0; i < xs.size(); ++i) {
      bool is_issue = fallback_issue(i);
      if (m) {
        const ManifestEntry* e = m->find(xs[i].first);
        if (e && e->label) is_issue = *e->label == Label::issue;
      }
      (is_issue ? issue : normal).values.push_back(xs[i].second);
    }
    if (!m) {
      normal.name = fallback_name + " normal";
      issue.name = fallback_name + " issue";
    }
    std::vector<HistogramSeries> out;
    if (!normal.values.empty()) out.push_back(normal);
    if (!issue.values.empty()) out.push_back(issue);
    return out;
  };

  if (auto p = find_file(o.run, "discrepancy.csv")) {
    auto recs = read_discrepancy_csv(*p);
    std::vector<std::pair<std::string, double>> xs;
    for (const auto& r : recs) xs.emplace_back(r.frame_id, r.aggregate);
    std::vector<HistogramSeries> series;
    if (m) {
      series = split_by_label(xs, "all", [](std::size_t) { return false; });
    } else {
      series.push_back({"all frames", "#4477aa", {}});
      for (const auto& x : xs) series[0].values.push_back(x.second);
    }
    figures.emplace_back("discrepancy_histogram.svg", svg_histogram(series, "Aggregate discrepancy"));
  }
  if (auto p = find_file(o.run, "detection.csv")) {
    auto det = read_detection_report(*p);
    std::optional<double> thr;
    if (fs::exists(sidecar_path(*p))) {
      auto j = read_json(sidecar_path(*p));
      if (!j.value("short_circuited", false)) thr = j["threshold"].get<double>();
    }
    std::vector<std::pair<std::string, double>> xs;
    for (const auto& d : det) xs.emplace_back(d.frame_id, d.score);
    auto series = split_by_label(xs, "predicted", [&](std::size_t i) { return det[i].label == Label::issue; });
    figures.emplace_back("score_histogram.svg", svg_histogram(series, "Anomaly scores", 40, thr));
    std::size_t flagged = 0;
    for (const auto& d : det) flagged += d.label == Label::issue;
    std::ostringstream s;
    s << flagged << " of " << det.size() << " frames flagged";
    if (thr) s << " at threshold " << format_real(*thr);
    s << ".\n";
    sections.push_back({"Detection", s.str(), "<p>" + s.str() + "</p>\n"});
  }
  if (auto p = find_file(o.run, "tune.csv")) {
    auto r = read_tune(*p, p->parent_path() / "best.json");
    figures.emplace_back("tune_heatmap.svg", svg_tune_heatmap(r));
    std::ostringstream s;
    s << "Best grid cell: contamination " << format_real(r.best.contamination) << ", n_estimators "
      << r.best.n_estimators << ", F1 " << fixed(r.best_f1, 4) << ".\n";
    sections.push_back({"Tuning", s.str(), "<p>" + s.str() + "</p>\n"});
  }
  if (auto p = find_file(o.run, "classification_report.txt")) {
    const std::string t = read_text(*p);
    sections.push_back({"Classification report", "```\n" + t + "```\n", "<pre>" + svg_detail::escape(t) + "</pre>\n"});
  }
  for (const auto& [file, title] : std::vector<std::pair<std::string, std::string>>{
           {"recall_by_category.csv", "Recall by category"},
           {"regression.csv", "Discrepancy summary"},
           {"significance.csv", "Mann-Whitney U tests"},
           {"validation.csv", "Painter validation"}}) {
    if (auto p = find_file(o.run, file)) {
      auto rows = read_csv_rows(*p);
      sections.push_back({title, markdown_table(rows), html_table(rows)});
    }
  }
  if (sections.empty() && figures.empty()) throw DataError("no pipeline outputs found under '" + o.run + "'");

  const fs::path out(o.out);
  std::ostringstream md, html;
  md << "# StereoID run report\n\nRun directory: `" << o.run << "`\n\n";
  html << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>StereoID run report</title>\n"
       << "<style>body{font-family:sans-serif;max-width:960px;margin:2em auto}table{border-collapse:collapse}"
       << "td,th{border:1px solid #ccc;padding:2px 8px;text-align:right}</style></head><body>\n"
       << "<h1>StereoID run report</h1>\n<p>Run directory: <code>" << svg_detail::escape(o.run) << "</code></p>\n";
  for (const auto& s : sections) {
    md << "## " << s.title << "\n\n" << s.md << "\n";
    html << "<h2>" << svg_detail::escape(s.title) << "</h2>\n" << s.html;
  }
  if (!figures.empty()) {
    md << "## Figures\n\n";
    html << "<h2>Figures</h2>\n";
  }
  for (const auto& [file, svg] : figures) {
    write_text(out / file, svg);
    md << "![" << file << "](" << file << ")\n\n";
    html << svg << "\n";
  }
  html << "</body></html>\n";
  write_text(out / "report.md", md.str());
  write_text(out / "report.html", html.str());
  std::cout << "report: " << (out / "report.html").string() << "\n";
}

// ---- application ---------------------------------------------------------------

struct Options {
  SynthOptions synth;
  IngestOptions ingest;
  TrainOptions train;
  TranslateOptions translate;
  ScoreOptions score;
  DetectOptions detect;
  TuneOptions tune;
  EvaluateOptions evaluate;
  ReportOptions report;
  std::string rerun_file;
  std::string rerun_out;
};

struct Command {
  CLI::App* app;
  std::function<void()> run;
  std::string* out;
};

void add_seed(CLI::App* s, std::uint64_t& seed) { s->add_option("--seed", seed, "random seed"); }
void add_workers(CLI::App* s, int& workers) {
  s->add_option("--workers", workers, "worker threads; 1 keeps runs reproducible")->check(CLI::PositiveNumber);
}
void add_out(CLI::App* s, std::string& out) { s->add_option("--out", out, "output directory")->required(); }

std::vector<Command> build(CLI::App& app, Options& o) {
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI file with one [subcommand] table; flags override its values");
  app.set_version_flag("--version", kVersion);
  std::vector<Command> cmds;

  {
    auto* s = app.add_subcommand("synth", "render a labeled synthetic stereo corpus with injected faults");
    auto& x = o.synth;
    add_out(s, x.out);
    add_seed(s, x.seed);
    add_workers(s, x.workers);
    s->add_option("--n-normal", x.n_normal, "number of clean frames")->check(CLI::NonNegativeNumber);
    s->add_option("--mix", x.mix, "fault counts: table1, none, or Category=count,...");
    s->add_option("--scenes", x.scenes, "render these scene plans (scenes.jsonl format) instead of sampling");
    s->add_option("--magnitude-min", x.min_magnitude, "smallest fault magnitude");
    s->add_option("--magnitude-max", x.max_magnitude, "largest fault magnitude");
    s->add_option("--width", x.width, "eye width in pixels")->check(CLI::Range(8, 4096));
    s->add_option("--height", x.height, "eye height in pixels")->check(CLI::Range(8, 4096));
    s->add_option("--min-objects", x.min_objects, "fewest objects per scene");
    s->add_option("--max-objects", x.max_objects, "most objects per scene");
    s->add_option("--ratios", x.ratios, "train,val,test split ratios");
    cmds.push_back({s, [&x] { run_synth(x); }, &x.out});
  }
  {
    auto* s = app.add_subcommand("ingest", "build a manifest from a directory of stereo screenshots");
    auto& x = o.ingest;
    s->add_option("--input", x.input, "directory of side-by-side PNGs or <id>_L.png/<id>_R.png pairs")->required();
    add_out(s, x.out);
    add_seed(s, x.seed);
    add_workers(s, x.workers);
    s->add_option("--layout", x.layout, "file layout")->check(CLI::IsMember({"auto", "sbs", "pairs"}));
    s->add_option("--labels", x.labels, "CSV frame_id,label[,category] with ground truth");
    s->add_option("--ratios", x.ratios, "train,val,test split ratios");
    cmds.push_back({s, [&x] { run_ingest(x); }, &x.out});
  }
  {
    auto* s = app.add_subcommand("train", "train the depth-conditioned right-eye translator");
    auto& x = o.train;
    s->add_option("--manifest", x.manifest, "dataset manifest")->required();
    add_out(s, x.out);
    add_seed(s, x.seed);
    add_workers(s, x.workers);
    add_depth_options(s, x.depth);
    add_geometry_options(s, x.geom);
    s->add_option("--ngf", x.ngf, "generator base width");
    s->add_option("--depth-levels", x.depth_levels, "generator encoder levels");
    s->add_option("--ndf", x.ndf, "critic base width");
    s->add_option("--critic-layers", x.critic_layers, "stride-2 critic blocks");
    s->add_option("--batch-size", x.batch_size, "samples per step");
    s->add_option("--learning-rate", x.learning_rate, "Adam learning rate");
    s->add_option("--critic-iterations", x.critic_iterations, "critic updates per generator update");
    s->add_option("--max-steps", x.max_steps, "generator steps; 0 saves the initialized model");
    s->add_option("--early-stop-patience", x.patience, "epochs without validation gain before stopping; 0 disables");
    s->add_option("--loss-alpha", x.loss_alpha, "weight of the L1 term");
    s->add_option("--loss-beta", x.loss_beta, "weight of the weighted-MSE term");
    s->add_option("--lambda-gp", x.lambda_gp, "gradient penalty weight");
    s->add_option("--train-size", x.train_size, "subsample the training split to this many frames (0: all)");
    s->add_option("--resume", x.resume, "continue from a checkpoint");
    cmds.push_back({s, [&x] { run_train(x); }, &x.out});
  }
  {
    auto* s = app.add_subcommand("translate", "write synthetic right eyes next to the real ones");
    auto& x = o.translate;
    s->add_option("--manifest", x.manifest, "dataset manifest")->required();
    add_out(s, x.out);
    add_seed(s, x.seed);
    add_workers(s, x.workers);
    s->add_option("--translator", x.translator, "painter, identity (left eye as-is) or reference (synthetic scenes)")
        ->check(CLI::IsMember({"painter", "identity", "reference"}));
    s->add_option("--checkpoint", x.checkpoint, "painter checkpoint");
    s->add_option("--split", x.split, "frames to translate")->check(CLI::IsMember({"all", "train", "val", "test"}));
    add_depth_options(s, x.depth);
    add_geometry_options(s, x.geom);
    cmds.push_back({s, [&x] { run_translate(x); }, &x.out});
  }
  {
    auto* s = app.add_subcommand("score", "measure synthetic vs real right eyes");
    auto& x = o.score;
    s->add_option("--translations", x.translations, "translations.jsonl written by translate")->required();
    add_out(s, x.out);
    add_workers(s, x.workers);
    s->add_option("--dist-alpha", x.alpha, "weight of L1");
    s->add_option("--dist-beta", x.beta, "weight of L2");
    s->add_option("--dist-gamma", x.gamma, "weight of 1 - SSIM");
    s->add_option("--reduction", x.reduction, "L1/L2 reduction")->check(CLI::IsMember({"mean", "sum"}));
    s->add_option("--ssim", x.ssim, "SSIM statistics")->check(CLI::IsMember({"global", "window"}));
    cmds.push_back({s, [&x] { run_score(x); }, &x.out});
  }
  {
    auto* s = app.add_subcommand("detect", "flag anomalous discrepancies with an isolation forest");
    auto& x = o.detect;
    s->add_option("--discrepancy", x.discrepancy, "discrepancy CSV to label")->required();
    s->add_option("--fit", x.fit, "fit the forest on this discrepancy CSV instead");
    add_out(s, x.out);
    add_seed(s, x.seed);
    add_forest_options(s, x.forest, false);
    cmds.push_back({s, [&x] { run_detect(x); }, &x.out});
  }
  {
    auto* s = app.add_subcommand("tune", "grid-search contamination and tree count by issue-class F1");
    auto& x = o.tune;
    s->add_option("--discrepancy", x.discrepancy, "discrepancy CSV")->required();
    s->add_option("--manifest", x.manifest, "manifest with ground-truth labels")->required();
    add_out(s, x.out);
    add_seed(s, x.seed);
    s->add_option("--contaminations", x.contaminations, "lo:hi:count evenly spaced");
    s->add_option("--trees", x.trees, "lo:hi:step tree counts");
    add_forest_options(s, x.forest, true);
    cmds.push_back({s, [&x] { run_tune(x); }, &x.out});
  }
  {
    auto* s = app.add_subcommand("evaluate", "classification report, per-category recall and significance tests");
    auto& x = o.evaluate;
    s->add_option("--detection", x.detection, "detection CSV")->required();
    s->add_option("--manifest", x.manifest, "manifest with ground-truth labels")->required();
    s->add_option("--discrepancy", x.discrepancy, "discrepancy CSV for the metric summary");
    s->add_option("--compare", x.compare, "second discrepancy CSV tested against --discrepancy");
    add_out(s, x.out);
    cmds.push_back({s, [&x] { run_evaluate(x); }, &x.out});
  }
  {
    auto* s = app.add_subcommand("report", "summarize a run directory as markdown and HTML");
    auto& x = o.report;
    s->add_option("--run", x.run, "directory holding pipeline outputs")->required();
    s->add_option("--manifest", x.manifest, "manifest used to split histograms by ground truth");
    add_out(s, x.out);
    cmds.push_back({s, [&x] { run_report(x); }, &x.out});
  }
  {
    auto* s = app.add_subcommand("rerun", "replay a recorded run.json");
    s->add_option("run_json", o.rerun_file, "run.json of an earlier invocation")->required();
    s->add_option("--out", o.rerun_out, "write to this directory instead of the recorded one");
    cmds.push_back({s, {}, nullptr});
  }
  return cmds;
}

int fail(const std::string& command, const char* kind, int code, const std::string& msg) {
  std::string flat = msg;
  std::replace(flat.begin(), flat.end(), '\n', ' ');
  std::cerr << "stereoid: error kind=" << kind << " code=" << code << " command=" << (command.empty() ? "-" : command)
            << ": " << flat << "\n";
  return code;
}

int run(std::vector<std::string> args);

int rerun(const std::string& file, const std::string& out_override) {
  if (!fs::is_regular_file(file)) throw DataError("run record '" + file + "' not found");
  ojson j = read_json(file);
  if (!j.contains("command") || !j.contains("options") || !j["options"].is_object())
    throw DataError(file + ": not a stereoid run record");
  const std::string cmd = j["command"].get<std::string>();
  if (cmd == "rerun") throw DataError(file + ": cannot replay a rerun");
  std::vector<std::string> args{"stereoid", cmd};
  for (const auto& [k, v] : j["options"].items()) {
    std::string value = v.get<std::string>();
    if (k == "out" && !out_override.empty()) value = out_override;
    if (value.empty()) continue;
    args.push_back("--" + k);
    args.push_back(value);
  }
  return run(args);
}

int run(std::vector<std::string> args) {
  CLI::App app{"StereoID: stereoscopic inconsistency detection for VR frames", "stereoid"};
  Options o;
  auto cmds = build(app, o);
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::string command;
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail(command, "config", 2, e.what());
  }
  for (const auto& c : cmds) {
    if (!c.app->parsed()) continue;
    command = c.app->get_name();
    try {
      if (!c.run) return rerun(o.rerun_file, o.rerun_out);
      write_run_record(*c.out, *c.app);
      c.run();
      return 0;
    } catch (const Error& e) {
      return fail(command, e.kind_name(), e.exit_code(), e.what());
    } catch (const c10::Error& e) {
      return fail(command, "numeric", 4, e.what_without_backtrace());
    } catch (const fs::filesystem_error& e) {
      return fail(command, "data", 3, e.what());
    } catch (const std::exception& e) {
      return fail(command, "numeric", 4, e.what());
    }
  }
  return fail(command, "config", 2, "no subcommand given");
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(std::vector<std::string>(argv, argv + argc));
  } catch (const std::exception& e) {
    return fail("", "numeric", 4, e.what());
  }
}

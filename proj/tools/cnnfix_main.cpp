#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cnnfix/error.hpp"
#include "cnnfix/eval.hpp"
#include "cnnfix/fixtures.hpp"
#include "cnnfix/graph.hpp"
#include "cnnfix/io.hpp"
#include "cnnfix/pipeline.hpp"

namespace fs = std::filesystem;
using namespace cnnfix;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string model;
  std::string image;
  std::string start;
  double outlier_fraction = kDefaultOutlierFraction;
  double outlier_radius = kDefaultOutlierRadiusRatio;
  double sigma = kDefaultSigmaRatio;
  std::string conv_mode = "same-location";
  std::string out = ".";
  bool overlay = false;
};

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

PipelineOptions pipeline_options(const RunConfig& cfg) {
  PipelineOptions o;
  auto mode = parse_conv_spatial_mode(cfg.conv_mode);
  if (!mode) throw UsageError("--conv-mode must be same-location or argmax-location, got '" + cfg.conv_mode + "'");
  o.backtrack.conv_spatial_mode = *mode;
  if (!cfg.start.empty()) {
    try {
      o.start = parse_start_selector(cfg.start);
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("--start: ") + e.what());
    }
  }
  o.outlier_fraction = cfg.outlier_fraction;
  o.outlier_radius_ratio = cfg.outlier_radius;
  o.sigma_ratio = cfg.sigma;
  return o;
}

struct Loaded {
  NetworkGraph graph;
  Image image;
  Tensor tensor;
};

Loaded load_inputs(const RunConfig& cfg) {
  Loaded l{load_model(cfg.model), read_image(cfg.image), {}};
  l.tensor = image_to_tensor(l.image);
  return l;
}

std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

void add_model_image(CLI::App* cmd, RunConfig& cfg) {
  cmd->add_option("--model", cfg.model, "model manifest (YAML)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--image", cfg.image, "input image (binary PGM/PPM)")->required()->check(CLI::ExistingFile);
}

void add_trace_options(CLI::App* cmd, RunConfig& cfg) {
  cmd->add_option("--start", cfg.start, "start neuron 'layer:NAME coord:C,X,Y' or 'layer:NAME coord:I'");
  cmd->add_option("--conv-mode", cfg.conv_mode, "conv spatial mode: same-location | argmax-location")
      ->check(CLI::IsMember({"same-location", "argmax-location"}));
  cmd->add_option("--outlier-fraction", cfg.outlier_fraction, "minimum neighbour fraction")
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--outlier-radius", cfg.outlier_radius, "neighbour radius as a fraction of the image diagonal")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--out", cfg.out, "output directory");
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir + ": " + ec.message());
}

int cmd_infer(const RunConfig& cfg) {
  const Loaded in = load_inputs(cfg);
  const ActivationTrace trace = run_forward(in.graph, in.tensor);
  const int cls = predict_label(trace);
  std::cout << "class: " << cls << "\n";
  std::cout << "scores:";
  for (float s : trace.scores()->data()) std::cout << ' ' << fixed6(s);
  std::cout << "\n";
  return 0;
}

int cmd_fixate(const RunConfig& cfg) {
  const PipelineOptions opts = pipeline_options(cfg);
  const Loaded in = load_inputs(cfg);
  const Localization loc = localize(in.graph, in.tensor, opts);

  PointFileHeader header{fs::path(cfg.image).filename().string(), format_start(loc.start),
                         cfg.conv_mode, loc.fixations.fallback_used};
  const std::string points = encode_points(header, loc.fixations.pixels);
  std::string overlay;
  if (cfg.overlay) overlay = encode_image(fixation_overlay(in.image, loc.fixations.pixels));

  ensure_dir(cfg.out);
  const fs::path base = fs::path(cfg.out) / stem_of(cfg.image);
  write_file_atomic(base.string() + ".points.txt", points);
  if (cfg.overlay) write_file_atomic(base.string() + ".fixations.ppm", overlay);
  std::cout << "points: " << loc.fixations.pixels.size() << "\n";
  return 0;
}

int cmd_heatmap(const RunConfig& cfg) {
  const PipelineOptions opts = pipeline_options(cfg);
  const Loaded in = load_inputs(cfg);
  const Localization loc = localize(in.graph, in.tensor, opts);
  const HeatMap map = localization_heatmap(loc, opts);

  const std::string gray = encode_image(heatmap_to_image(map));
  std::string overlay;
  if (cfg.overlay) overlay = encode_image(heatmap_overlay(in.image, map));

  ensure_dir(cfg.out);
  const fs::path base = fs::path(cfg.out) / stem_of(cfg.image);
  write_file_atomic(base.string() + ".heatmap.pgm", gray);
  if (cfg.overlay) write_file_atomic(base.string() + ".heatmap.ppm", overlay);
  std::cout << "points: " << loc.filtered.size() << "\n";
  return 0;
}

int cmd_bbox(const RunConfig& cfg) {
  const PipelineOptions opts = pipeline_options(cfg);
  const Loaded in = load_inputs(cfg);
  const Localization loc = localize(in.graph, in.tensor, opts);
  if (!loc.box) throw DataError("no fixations survived outlier removal");
  const std::string record = encode_bbox(*loc.box);

  ensure_dir(cfg.out);
  write_file_atomic((fs::path(cfg.out) / (stem_of(cfg.image) + ".bbox.txt")).string(), record);
  std::cout << record;
  return 0;
}

struct EvalConfig {
  RunConfig run;
  std::string images;
  std::string annotations;
  std::string masks;
  std::string report;
};

std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_eval(const EvalConfig& cfg) {
  const PipelineOptions opts = pipeline_options(cfg.run);
  const NetworkGraph graph = load_model(cfg.run.model);
  const std::vector<fs::path> images = list_images(cfg.images);
  if (images.empty()) throw DataError("no .pgm/.ppm images in " + cfg.images);

  std::vector<LocalizationRecord> records;
  double eer_sum = 0.0;
  int eer_count = 0;
  int correct = 0;
  for (const fs::path& path : images) {
    const fs::path ann_path = fs::path(cfg.annotations) / (path.stem().string() + ".txt");
    const Annotation ann = read_annotation(ann_path);
    const Image image = read_image(path);
    const Localization loc = localize(graph, image_to_tensor(image), opts);
    records.push_back({loc.predicted_class, ann.class_id, loc.box, ann.boxes});
    if (loc.predicted_class == ann.class_id) ++correct;
    if (!cfg.masks.empty()) {
      const fs::path mask_path = fs::path(cfg.masks) / (path.stem().string() + ".pgm");
      if (fs::exists(mask_path)) {
        const Image mask = read_image(mask_path);
        if (mask.width != image.width || mask.height != image.height || mask.channels != 1) {
          throw DataError(mask_path.string() + ": mask must be a gray image of the input size");
        }
        std::vector<std::uint8_t> bits(mask.pixels.size());
        for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = mask.pixels[i] != 0;
        eer_sum += precision_at_eer(localization_heatmap(loc, opts), bits);
        ++eer_count;
      }
    }
  }

  const double err = localization_error(records);
  const ProposalMetrics pm = proposal_metrics(records);
  const double acc = 100.0 * correct / static_cast<double>(records.size());

  std::ostringstream rep;
  rep << "images: " << records.size() << "\n";
  rep << "localization_error: " << fixed2(err) << "\n";
  rep << "classification_accuracy: " << fixed2(acc) << "\n";
  rep << "mean_recall: " << fixed2(100.0 * pm.mean_recall) << "\n";
  rep << "mean_precision: " << fixed2(100.0 * pm.mean_precision) << "\n";
  if (eer_count > 0) rep << "eer_precision: " << fixed2(100.0 * eer_sum / eer_count) << "\n";
  for (const auto& [cls, m] : pm.per_class) {
    rep << "class_" << cls << "_images: " << m.images << "\n";
    rep << "class_" << cls << "_recall: " << fixed2(100.0 * m.recall) << "\n";
    rep << "class_" << cls << "_precision: " << fixed2(100.0 * m.precision) << "\n";
  }
  std::ostringstream summary;
  summary << "# " << records.size() << " images, " << pm.per_class.size() << " classes: localization error "
          << fixed2(err) << "%, classification accuracy " << fixed2(acc) << "%\n";
  summary << "# single-proposal mRecall " << fixed2(100.0 * pm.mean_recall) << "%, mPrecision "
          << fixed2(100.0 * pm.mean_precision) << "%\n";

  const std::string text = rep.str() + summary.str();
  if (!cfg.report.empty()) {
    const fs::path parent = fs::path(cfg.report).parent_path();
    if (!parent.empty()) ensure_dir(parent.string());
    write_file_atomic(cfg.report, text);
  }
  std::cout << text;
  return 0;
}

struct FixtureConfig {
  std::string kind;
  std::uint64_t seed = 0;
  int images = 0;
  std::string out;
};

std::string image_name(const std::string& prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04d", prefix.c_str(), i);
  return buf;
}

int cmd_make_fixture(const FixtureConfig& cfg) {
  auto kind = parse_fixture_kind(cfg.kind);
  if (!kind) throw UsageError("unknown fixture kind '" + cfg.kind + "'");
  const NetworkGraph graph = make_fixture(*kind, cfg.seed);

  struct Item {
    std::string name;
    std::string image;
    std::string annotation;
    std::string mask;
  };
  std::vector<Item> items;
  if (*kind == FixtureKind::BlobDetector) {
    BlobImageGenerator gen(cfg.seed);
    for (int i = 0; i < cfg.images; ++i) {
      const BlobSample s = gen.next();
      Image mask{s.image.width, s.image.height, 1, std::vector<std::uint8_t>(s.image.pixels.size(), 0)};
      for (int y = s.box.y_min; y <= s.box.y_max; ++y)
        for (int x = s.box.x_min; x <= s.box.x_max; ++x) mask.at(x, y) = 255;
      items.push_back({image_name("blob", i), encode_image(s.image),
                       encode_annotation(Annotation{s.quadrant, {s.box}}), encode_image(mask)});
    }
  } else {
    for (int i = 0; i < cfg.images; ++i) {
      items.push_back({image_name("input", i),
                       encode_image(make_fixture_image(*kind, cfg.seed + static_cast<std::uint64_t>(i))), {}, {}});
    }
  }

  ensure_dir(cfg.out);
  save_model(graph, cfg.out);
  const fs::path root(cfg.out);
  if (!items.empty()) ensure_dir((root / "images").string());
  for (const Item& it : items) {
    const std::string ext = it.image.compare(0, 2, "P6") == 0 ? ".ppm" : ".pgm";
    write_file_atomic(root / "images" / (it.name + ext), it.image);
    if (!it.annotation.empty()) {
      ensure_dir((root / "annotations").string());
      ensure_dir((root / "masks").string());
      write_file_atomic(root / "annotations" / (it.name + ".txt"), it.annotation);
      write_file_atomic(root / "masks" / (it.name + ".pgm"), it.mask);
    }
  }
  std::cout << "model: " << (root / "model.yaml").string() << "\n";
  std::cout << "images: " << items.size() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cnnfix: CNN fixations by positive-evidence backtracking"};
  app.require_subcommand(1);

  RunConfig infer_cfg;
  auto* infer = app.add_subcommand("infer", "print predicted class and score vector");
  add_model_image(infer, infer_cfg);

  RunConfig fixate_cfg;
  auto* fixate = app.add_subcommand("fixate", "write the fixation point file (and optional overlay)");
  add_model_image(fixate, fixate_cfg);
  add_trace_options(fixate, fixate_cfg);
  fixate->add_flag("--overlay", fixate_cfg.overlay, "also write an RGB overlay with fixations in red");

  RunConfig heat_cfg;
  auto* heatmap = app.add_subcommand("heatmap", "write the Gaussian-blurred fixation map");
  add_model_image(heatmap, heat_cfg);
  add_trace_options(heatmap, heat_cfg);
  heatmap->add_option("--sigma", heat_cfg.sigma, "blur sigma as a fraction of the image diagonal")
      ->check(CLI::PositiveNumber);
  heatmap->add_flag("--overlay", heat_cfg.overlay, "also write an RGB overlay");

  RunConfig bbox_cfg;
  auto* bbox = app.add_subcommand("bbox", "write the bounding box of the filtered fixations");
  add_model_image(bbox, bbox_cfg);
  add_trace_options(bbox, bbox_cfg);

  EvalConfig eval_cfg;
  auto* eval = app.add_subcommand("eval", "localization and proposal metrics over an image directory");
  eval->add_option("--model", eval_cfg.run.model, "model manifest (YAML)")->required()->check(CLI::ExistingFile);
  eval->add_option("--images", eval_cfg.images, "directory of .pgm/.ppm images")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--annotations", eval_cfg.annotations, "directory of <image stem>.txt annotations")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--masks", eval_cfg.masks, "directory of <image stem>.pgm ground-truth masks")
      ->check(CLI::ExistingDirectory);
  eval->add_option("--report", eval_cfg.report, "also write the report to this file");
  eval->add_option("--conv-mode", eval_cfg.run.conv_mode, "conv spatial mode: same-location | argmax-location")
      ->check(CLI::IsMember({"same-location", "argmax-location"}));
  eval->add_option("--outlier-fraction", eval_cfg.run.outlier_fraction, "minimum neighbour fraction")
      ->check(CLI::Range(0.0, 1.0));
  eval->add_option("--outlier-radius", eval_cfg.run.outlier_radius, "radius as a fraction of the diagonal")
      ->check(CLI::PositiveNumber);
  eval->add_option("--sigma", eval_cfg.run.sigma, "heat-map sigma as a fraction of the diagonal")
      ->check(CLI::PositiveNumber);

  FixtureConfig fix_cfg;
  auto* fixture = app.add_subcommand("make-fixture", "write a synthetic model (and images) to a directory");
  fixture->add_option("--kind", fix_cfg.kind,
                      "blob-detector | random-cnn | toy-lstm | inception-toy | residual-toy | dense-toy | depth2-toy")
      ->required();
  fixture->add_option("--seed", fix_cfg.seed, "fixture seed");
  fixture->add_option("--images", fix_cfg.images, "number of images to generate")->check(CLI::NonNegativeNumber);
  fixture->add_option("--out", fix_cfg.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*infer) return cmd_infer(infer_cfg);
    if (*fixate) return cmd_fixate(fixate_cfg);
    if (*heatmap) return cmd_heatmap(heat_cfg);
    if (*bbox) return cmd_bbox(bbox_cfg);
    if (*eval) return cmd_eval(eval_cfg);
    if (*fixture) return cmd_make_fixture(fix_cfg);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

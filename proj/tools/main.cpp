// Command-line front end: simulate -> train -> despeckle -> eval pipelines
// plus the gradcheck self-test, all driven by (config file, seed) pairs so
// every run is reproducible.

#include <CLI11.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "speckle/checkpoint.hpp"
#include "speckle/config.hpp"
#include "speckle/image_io.hpp"
#include "speckle/metrics.hpp"
#include "speckle/net.hpp"
#include "speckle/sim.hpp"
#include "speckle/train.hpp"

namespace fs = std::filesystem;
using namespace speckle;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

struct Common {
  std::string config_path;
  std::string out_dir = "run";
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool deterministic = false;
  int threads = 1;
};

cfg::KvConfig load_config(const Common& c, const std::string& section) {
  cfg::KvConfig k;
  if (!c.config_path.empty()) k = cfg::KvConfig::parse_file(c.config_path);
  if (c.seed_given || !k.has(section, "seed"))
    k.set(section, "seed", std::to_string(c.seed));
  k.set(section, "out", c.out_dir);
  k.set(section, "deterministic", c.deterministic ? "1" : "0");
  k.set(section, "threads", std::to_string(c.threads));
  return k;
}

void make_run_layout(const fs::path& out) {
  fs::create_directories(out / "images");
  fs::create_directories(out / "reports");
  fs::create_directories(out / "checkpoints");
}

// echo the fully-resolved configuration before any work happens
void echo_config(const cfg::KvConfig& k, const fs::path& out) {
  const std::string text = k.serialize();
  std::fputs(text.c_str(), stdout);
  std::ofstream f(out / "config.txt");
  f << text;
}

net::BlindSpotShape parse_shape_token(const std::string& tok) {
  if (tok == "1x1") return net::BlindSpotShape::square1();
  if (tok == "3x1") return net::BlindSpotShape::vertical3();
  if (tok == "3x3") return net::BlindSpotShape::cross3();
  net::BlindSpotShape s;
  if (std::sscanf(tok.c_str(), "%d,%d,%d,%d", &s.up, &s.down, &s.left,
                  &s.right) == 4) {
    s.validate();
    return s;
  }
  throw std::invalid_argument("unknown blind-spot shape token: " + tok);
}

std::vector<train::ShapeChoice> parse_schedule(const std::string& text) {
  std::vector<train::ShapeChoice> out;
  std::istringstream in(text);
  std::string entry;
  while (std::getline(in, entry, ',')) {
    // a general quad token also contains commas; only the NxM:p grammar is
    // supported in schedules
    const auto colon = entry.find(':');
    if (colon == std::string::npos)
      throw std::invalid_argument("schedule entry needs shape:probability: " +
                                  entry);
    out.push_back({parse_shape_token(entry.substr(0, colon)),
                   std::stod(entry.substr(colon + 1))});
  }
  return out;
}

sim::PsfKernel parse_psf(const std::string& spec) {
  if (spec == "default") return sim::default_correlation_psf();
  double sv = 0, sh = 0;
  int size = 0;
  if (std::sscanf(spec.c_str(), "gaussian:%lf,%lf,%d", &sv, &sh, &size) == 3)
    return sim::PsfKernel::gaussian(sv, sh, size);
  throw std::invalid_argument("unknown psf spec: " + spec);
}

std::vector<fs::path> sorted_files(const fs::path& dir,
                                   const std::string& stem_filter,
                                   const std::string& ext) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    if (e.path().extension() != ext) continue;
    if (!stem_filter.empty() &&
        e.path().stem().string().find(stem_filter) == std::string::npos)
      continue;
    out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

ImageD load_any(const fs::path& p) {
  if (p.extension() == ".rawf") return io::load_rawf(p.string());
  return io::load_grayscale(p.string());
}

// -------------------------------------------------------------------------

int cmd_simulate(const Common& common) {
  cfg::KvConfig k = load_config(common, "simulate");
  const std::string source = k.get("simulate", "source", "synthetic");
  const int count = static_cast<int>(k.get_num("simulate", "count", 16));
  const int size = static_cast<int>(k.get_num("simulate", "size", 256));
  const double looks_v = k.get_num("simulate", "looks", 1.0);
  const std::string psf_spec = k.get("simulate", "psf", "none");
  const bool whiten = k.get("simulate", "whiten", "0") == "1";
  const double whiten_eps = k.get_num("simulate", "whiten_eps", 1e-3);
  const bool preview = k.get("simulate", "preview", "1") == "1";
  const std::uint64_t seed =
      static_cast<std::uint64_t>(k.get_num("simulate", "seed", 0));

  // gather clean sources before touching the output directory
  std::vector<ImageD> cleans;
  if (source == "synthetic") {
    for (int i = 0; i < count; ++i)
      cleans.push_back(sim::synthesize_clean(seed + 1000003ull * i, size,
                                             size));
  } else {
    if (!fs::is_directory(source))
      throw std::invalid_argument("simulate: source directory missing: " +
                                  source);
    std::vector<fs::path> files;
    for (const char* ext : {".pgm", ".png", ".rawf"})
      for (const auto& p : sorted_files(source, "", ext)) files.push_back(p);
    std::sort(files.begin(), files.end());
    for (const auto& p : files) cleans.push_back(load_any(p));
    if (cleans.empty())
      throw std::invalid_argument("simulate: no usable images in " + source);
  }

  std::optional<sim::PsfKernel> psf;
  if (psf_spec != "none") psf = parse_psf(psf_spec);

  const fs::path out(common.out_dir);
  make_run_layout(out);
  echo_config(k, out);

  const bayes::LooksParam looks(looks_v);
  std::ofstream manifest(out / "manifest.txt");
  manifest << "# index clean noisy white seed\n";
  char name[64];
  for (std::size_t i = 0; i < cleans.size(); ++i) {
    const std::uint64_t img_seed = seed + 7919ull * (i + 1);
    ImageD field = bayes::sample_speckle<double>(
        looks, cleans[i].rows(), cleans[i].cols(), img_seed);
    if (psf) field = sim::correlate_field(field, *psf);
    ImageD noisy = cleans[i] * field;

    std::snprintf(name, sizeof name, "clean_%04zu", i);
    const std::string clean_p = (out / "images" / (std::string(name) + ".rawf")).string();
    io::save_rawf(clean_p, cleans[i]);
    std::snprintf(name, sizeof name, "noisy_%04zu", i);
    const std::string noisy_p = (out / "images" / (std::string(name) + ".rawf")).string();
    io::save_rawf(noisy_p, noisy);
    if (preview) io::save_pgm(noisy_p.substr(0, noisy_p.size() - 5) + ".pgm", noisy);

    std::string white_p = "-";
    if (whiten) {
      if (!psf)
        throw std::invalid_argument(
            "simulate: whiten=1 requires a psf to invert");
      auto res = sim::whiten_known_psf(noisy, *psf, whiten_eps);
      std::snprintf(name, sizeof name, "white_%04zu", i);
      white_p = (out / "images" / (std::string(name) + ".rawf")).string();
      io::save_rawf(white_p, res.img);
    }
    manifest << i << " " << clean_p << " " << noisy_p << " " << white_p << " "
             << img_seed << "\n";
  }
  std::printf("simulate: wrote %zu image pairs to %s\n", cleans.size(),
              common.out_dir.c_str());
  return kExitOk;
}

// -------------------------------------------------------------------------

struct ManifestRow {
  std::string clean, noisy, white;
  std::uint64_t seed = 0;
};

std::vector<ManifestRow> read_manifest(const fs::path& dataset) {
  std::ifstream in(dataset / "manifest.txt");
  if (!in)
    throw std::invalid_argument("manifest.txt not found in " +
                                dataset.string());
  std::vector<ManifestRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::size_t idx;
    ManifestRow r;
    ls >> idx >> r.clean >> r.noisy >> r.white >> r.seed;
    rows.push_back(r);
  }
  return rows;
}

net::NetConfig net_config_from(const cfg::KvConfig& k,
                               const std::string& sec) {
  net::NetConfig n;
  n.blocks = static_cast<int>(k.get_num(sec, "blocks", 8));
  n.channels = static_cast<int>(k.get_num(sec, "channels", 32));
  n.kernel = static_cast<int>(k.get_num(sec, "kernel", 3));
  n.nonlocal = k.get(sec, "nonlocal", "0") == "1";
  n.nonlocal_every = static_cast<int>(k.get_num(sec, "nonlocal_every", 3));
  n.nonlocal_q = static_cast<int>(k.get_num(sec, "nonlocal_q", 7));
  n.lrelu_slope = k.get_num(sec, "lrelu_slope", 0.1);
  n.input_scale = k.get_num(sec, "input_scale", 1.0 / 255.0);
  return n;
}

int cmd_train(const Common& common) {
  cfg::KvConfig k = load_config(common, "train");
  const std::string dataset = k.get("train", "dataset", "");
  if (dataset.empty())
    throw std::invalid_argument("train: dataset directory is required");
  const std::string input_col = k.get("train", "input", "noisy");

  train::TrainingConfig t;
  t.batch_size = static_cast<int>(k.get_num("train", "batch", 16));
  t.patch_size = static_cast<int>(k.get_num("train", "patch", 64));
  t.lr.initial = k.get_num("train", "lr", 1e-4);
  t.lr.decay_step =
      static_cast<std::uint64_t>(k.get_num("train", "lr_decay_step", 10000));
  t.lr.decay_factor = k.get_num("train", "lr_decay_factor", 0.1);
  t.lambda_tv = k.get_num("train", "lambda_tv", 0.0);
  t.shape_schedule = parse_schedule(k.get("train", "schedule", "1x1:1.0"));
  t.looks = k.get_num("train", "looks", 1.0);
  t.total_iterations =
      static_cast<std::uint64_t>(k.get_num("train", "iterations", 20000));
  t.seed = static_cast<std::uint64_t>(k.get_num("train", "seed", 0));
  t.loss_margin = static_cast<int>(k.get_num("train", "loss_margin", 6));
  t.log_interval =
      static_cast<std::uint64_t>(k.get_num("train", "log_interval", 100));
  t.checkpoint_interval = static_cast<std::uint64_t>(
      k.get_num("train", "checkpoint_interval", 5000));
  const std::string resume = k.get("train", "resume", "");

  const fs::path out(common.out_dir);
  make_run_layout(out);
  echo_config(k, out);

  using S = float;
  net::NetworkState<S> state =
      resume.empty()
          ? net::NetworkState<S>::random_init(net_config_from(k, "train"),
                                              t.seed)
          : net::load_checkpoint<S>(resume);
  net::AdamBlob<S> blob;
  if (!resume.empty()) net::load_checkpoint<S>(resume, &blob);
  auto adam = train::AdamState<S>::zeros_like(state.parameters());
  if (!blob.m.empty()) {
    adam.m = blob.m;
    adam.v = blob.v;
    adam.step = blob.step;
  }

  std::vector<Image<S>> corpus;
  for (const auto& row : read_manifest(dataset)) {
    const std::string& path = input_col == "white" ? row.white : row.noisy;
    if (path == "-")
      throw std::invalid_argument("train: manifest has no " + input_col +
                                  " column data");
    corpus.push_back(io::load_rawf(path).cast<S>());
  }

  std::ofstream log(out / "log.txt");
  std::string last_checkpoint = "-";
  train::FitHooks hooks;
  hooks.on_log = [&](const train::LogRecord& rec) {
    std::ostringstream os;
    os << "iteration=" << rec.iteration << " loss=" << rec.loss
       << " lr=" << rec.lr << " shapes=";
    bool first = true;
    for (const auto& [key, cnt] : rec.shape_counts) {
      os << (first ? "" : ";") << key << ":" << cnt;
      first = false;
    }
    os << " elapsed=";
    if (common.deterministic)
      os << "-";  // keeps reruns byte-identical
    else
      os << rec.seconds;
    log << os.str() << "\n";
    log.flush();
    std::printf("%s\n", os.str().c_str());
  };
  hooks.on_checkpoint = [&](std::uint64_t it) {
    char name[64];
    std::snprintf(name, sizeof name, "ckpt_%08" PRIu64 ".bin", it);
    const std::string path = (out / "checkpoints" / name).string();
    net::AdamBlob<S> save_blob{adam.m, adam.v, adam.step};
    net::save_checkpoint(path, state, &save_blob);
    last_checkpoint = path;
  };

  auto report = train::fit(state, adam, corpus, t, hooks);
  if (report.aborted) {
    std::fprintf(stderr, "train: aborted (%s); last good checkpoint: %s\n",
                 report.abort_reason.c_str(), last_checkpoint.c_str());
    return kExitRuntime;
  }
  net::AdamBlob<S> final_blob{adam.m, adam.v, adam.step};
  net::save_checkpoint((out / "checkpoint.bin").string(), state, &final_blob);
  if (t.total_iterations == 0 || state.trained_iterations == 0)
    std::printf("train: emitted initial checkpoint only\n");
  std::printf("train: finished at iteration %" PRIu64 "\n",
              state.trained_iterations);
  return kExitOk;
}

// -------------------------------------------------------------------------

int cmd_despeckle(const Common& common) {
  cfg::KvConfig k = load_config(common, "despeckle");
  const std::string ckpt = k.get("despeckle", "checkpoint", "");
  const std::string input = k.get("despeckle", "input", "");
  if (ckpt.empty() || input.empty())
    throw std::invalid_argument("despeckle: checkpoint and input are required");
  const std::string filter = k.get("despeckle", "filter", "");
  const Eigen::Index tile =
      static_cast<Eigen::Index>(k.get_num("despeckle", "tile", 128));
  const double looks_v = k.get_num("despeckle", "looks", 1.0);
  const bool prior_out = k.get("despeckle", "prior_mean", "0") == "1";
  const bool preview = k.get("despeckle", "preview", "1") == "1";

  using S = float;
  net::NetworkState<S> state = net::load_checkpoint<S>(ckpt);

  // optional architecture expectations guard against stale checkpoints
  for (const char* key : {"blocks", "channels"}) {
    if (!k.has("despeckle", key)) continue;
    const int want = static_cast<int>(k.get_num("despeckle", key, 0));
    const int got = std::string(key) == "blocks" ? state.config.blocks
                                                 : state.config.channels;
    if (want != got)
      throw std::invalid_argument(
          std::string("despeckle: checkpoint/architecture mismatch: config "
                      "expects ") +
          key + "=" + std::to_string(want) + " but checkpoint " + ckpt +
          " has " + key + "=" + std::to_string(got));
  }

  const fs::path out(common.out_dir);
  make_run_layout(out);
  echo_config(k, out);

  std::vector<fs::path> files;
  for (const char* ext : {".rawf", ".pgm", ".png"})
    for (const auto& p : sorted_files(input, filter, ext)) files.push_back(p);
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw std::invalid_argument("despeckle: no input images under " + input);

  const bayes::LooksParam looks(looks_v);
  for (const auto& p : files) {
    Image<S> noisy = load_any(p).cast<S>();
    auto res = net::despeckle_image(noisy, state, looks, tile);
    const std::string stem = p.stem().string();
    const std::string post_p =
        (out / "images" / (stem + ".rawf")).string();
    io::save_rawf(post_p, res.posterior.cast<double>());
    if (preview)
      io::save_pgm((out / "images" / (stem + ".pgm")).string(),
                   res.posterior.cast<double>());
    if (prior_out) {
      io::save_rawf((out / "images" / (stem + "_prior.rawf")).string(),
                    res.prior.cast<double>());
      if (res.prior_clamped_fraction > 0.0)
        std::printf("despeckle: %s prior mean clamped on %.4f of pixels\n",
                    stem.c_str(), res.prior_clamped_fraction);
    }
    std::printf("despeckle: %s done\n", stem.c_str());
  }
  return kExitOk;
}

// -------------------------------------------------------------------------

int cmd_eval(const Common& common) {
  cfg::KvConfig k = load_config(common, "eval");
  const std::string noisy_dir = k.get("eval", "noisy", "");
  const std::string est_dir = k.get("eval", "estimate", "");
  if (noisy_dir.empty() || est_dir.empty())
    throw std::invalid_argument("eval: noisy and estimate directories required");
  const std::string ref_dir = k.get("eval", "reference", "");
  const double looks_v = k.get_num("eval", "looks", 1.0);
  int margin = static_cast<int>(k.get_num("eval", "margin", -1));
  const std::string ckpt = k.get("eval", "checkpoint", "");
  if (margin < 0) {
    if (!ckpt.empty()) {
      auto state = net::load_checkpoint<float>(ckpt);
      margin = net::receptive_margin(state.config, net::BlindSpotShape());
    } else {
      margin = 16;
    }
  }
  const int enl_n = static_cast<int>(k.get_num("eval", "enl_windows", 4));
  const Eigen::Index enl_w =
      static_cast<Eigen::Index>(k.get_num("eval", "enl_window", 32));
  const double peak = k.get_num("eval", "peak", 255.0);
  const std::string filter = k.get("eval", "filter", "");
  const std::uint64_t seed =
      static_cast<std::uint64_t>(k.get_num("eval", "seed", 0));
  k.set_num("eval", "margin", margin);

  const fs::path out(common.out_dir);
  make_run_layout(out);
  echo_config(k, out);

  auto noisy_files = sorted_files(noisy_dir, filter, ".rawf");
  if (noisy_files.empty())
    throw std::invalid_argument("eval: no noisy .rawf images in " + noisy_dir);

  const bayes::LooksParam looks(looks_v);
  int evaluated = 0, errors = 0;
  double sum_psnr = 0.0, sum_mu = 0.0, sum_sigma = 0.0, sum_m = 0.0,
         sum_ris = 0.0;
  int psnr_count = 0;
  std::ofstream agg(out / "reports" / "aggregate.kv");
  for (const auto& np : noisy_files) {
    const std::string stem = np.stem().string();
    const fs::path ep = fs::path(est_dir) / (stem + ".rawf");
    if (!fs::exists(ep)) {
      agg << "error_" << stem << " = missing estimate " << ep.string() << "\n";
      ++errors;
      continue;
    }
    ImageD noisy = io::load_rawf(np.string());
    ImageD est = io::load_rawf(ep.string());
    std::optional<ImageD> ref;
    if (!ref_dir.empty()) {
      std::string ref_stem = stem;
      const auto pos = ref_stem.find("noisy");
      if (pos != std::string::npos) ref_stem.replace(pos, 5, "clean");
      const fs::path rp = fs::path(ref_dir) / (ref_stem + ".rawf");
      if (fs::exists(rp)) ref = io::load_rawf(rp.string());
    }
    metrics::MetricsReport rep = metrics::evaluate<double>(
        noisy, est, ref ? &*ref : nullptr, looks, margin, enl_n, enl_w, peak,
        seed + 0x5eedba5e);
    std::ofstream kvf(out / "reports" / (stem + ".kv"));
    kvf << rep.to_kv();
    std::ofstream tbl(out / "reports" / (stem + ".txt"));
    tbl << rep.to_table();
    ++evaluated;
    if (rep.psnr_db) {
      sum_psnr += *rep.psnr_db;
      ++psnr_count;
    }
    sum_mu += rep.mu_r;
    sum_sigma += rep.sigma_r;
    sum_m += rep.m;
    sum_ris += rep.ris_value;
  }
  agg << "schema = metrics-aggregate-v1\n";
  agg << "evaluated = " << evaluated << "\n";
  agg << "errors = " << errors << "\n";
  agg.precision(10);
  if (evaluated > 0) {
    if (psnr_count > 0) agg << "mean_psnr_db = " << sum_psnr / psnr_count << "\n";
    agg << "mean_mu_r = " << sum_mu / evaluated << "\n";
    agg << "mean_sigma_r = " << sum_sigma / evaluated << "\n";
    agg << "mean_m_index = " << sum_m / evaluated << "\n";
    agg << "mean_ris = " << sum_ris / evaluated << "\n";
  }
  std::printf("eval: %d images evaluated, %d errors\n", evaluated, errors);
  return kExitOk;
}

// -------------------------------------------------------------------------

template <class S>
int run_gradcheck_suites(bool use_double, bool corrupt, std::uint64_t seed) {
  std::vector<check::SuiteResult> results;
  bool all_ok = true;

  auto lk = check::likelihood_normalization_suite(20, seed + 1);
  all_ok &= check::report(results, lk.name, lk.passed, lk.detail);

  // tight tolerance set: central finite differences in double precision;
  // loose set: float analytic gradients against the double path
  if (use_double) {
    auto fd = check::full_network_fd_suite<double>(20, 1e-4, 1e-5, seed + 2);
    all_ok &= check::report(results, fd.name, fd.passed, fd.detail);
  } else {
    auto fc = check::float_consistency_suite(20, 2e-2, seed + 2);
    all_ok &= check::report(results, fc.name, fc.passed, fc.detail);
  }

  for (bool nonlocal : {false, true})
    for (const auto& shape :
         {net::BlindSpotShape::square1(), net::BlindSpotShape::vertical3()}) {
      auto inv = check::blindspot_invariance_suite<S>(16, nonlocal, shape,
                                                      seed + 3, corrupt);
      all_ok &= check::report(results, inv.name, inv.passed, inv.detail);
    }

  std::printf("gradcheck: %s\n", all_ok ? "all suites passed" : "FAILURES");
  return all_ok ? kExitOk : kExitRuntime;
}

int cmd_gradcheck(const Common& common, bool use_double, bool corrupt) {
  cfg::KvConfig k = load_config(common, "gradcheck");
  k.set("gradcheck", "double", use_double ? "1" : "0");
  k.set("gradcheck", "corrupt_shift", corrupt ? "1" : "0");
  const fs::path out(common.out_dir);
  make_run_layout(out);
  echo_config(k, out);
  const std::uint64_t seed =
      static_cast<std::uint64_t>(k.get_num("gradcheck", "seed", 0));
  if (use_double) return run_gradcheck_suites<double>(true, corrupt, seed);
  return run_gradcheck_suites<float>(false, corrupt, seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"blind-spot SAR despeckling toolkit"};
  app.require_subcommand(1);

  Common common;
  app.add_option("--config", common.config_path, "run configuration file");
  app.add_option("--out", common.out_dir, "output directory");
  auto* seed_opt = app.add_option("--seed", common.seed, "master seed");
  app.add_flag("--deterministic", common.deterministic,
               "single-threaded bit-reproducible mode");
  app.add_option("--threads", common.threads,
                 "worker threads (this build computes single-threaded)");

  auto* simulate = app.add_subcommand("simulate", "make speckled datasets");
  auto* train_cmd = app.add_subcommand("train", "fit a blind-spot network");
  auto* despeckle = app.add_subcommand("despeckle", "run tiled inference");
  auto* eval = app.add_subcommand("eval", "compute quality metrics");
  auto* gradcheck = app.add_subcommand("gradcheck", "run self-check suites");
  bool gc_double = false, gc_corrupt = false;
  gradcheck->add_flag("--double", gc_double,
                      "double precision and tight tolerances");
  gradcheck->add_flag("--corrupt-shift", gc_corrupt,
                      "negative control: force a zero up-shift");

  CLI11_PARSE(app, argc, argv);
  common.seed_given = seed_opt->count() > 0;

  try {
    if (simulate->parsed()) return cmd_simulate(common);
    if (train_cmd->parsed()) return cmd_train(common);
    if (despeckle->parsed()) return cmd_despeckle(common);
    if (eval->parsed()) return cmd_eval(common);
    if (gradcheck->parsed())
      return cmd_gradcheck(common, gc_double, gc_corrupt);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitConfig;
}

// freegnn: command-line front end.
//
// Every command runs from an "invocation" (command name, arguments and, for
// the pipeline commands, the fully resolved config) and writes a manifest
// holding that invocation plus digests of its inputs and outputs. `rerun`
// replays a manifest and compares output digests.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "freegnn/adapt_gradcheck.hpp"
#include "freegnn/config.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace freegnn;

namespace {

struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

fs::path output_root() {
  const char* env = std::getenv("FREEGNN_OUTPUT_ROOT");
  return fs::path(env && *env ? env : "runs");
}

std::string digest_bytes(const void* data, std::size_t n) {
  Fnv1a h;
  h.update(data, n);
  return hex64(h.digest());
}

std::string digest_string(const std::string& s) { return digest_bytes(s.data(), s.size()); }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + p.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Files hash by content; directories by sorted relative path plus content.
std::string digest_path(const fs::path& p) {
  if (!fs::exists(p)) return "missing";
  if (!fs::is_directory(p)) return digest_string(read_file(p));
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Fnv1a h;
  for (const auto& f : files) {
    const auto rel = fs::relative(f, p).generic_string();
    const auto body = read_file(f);
    h.update(rel.data(), rel.size());
    h.update(body.data(), body.size());
  }
  return hex64(h.digest());
}

/// Artifact writer that records a digest per file. `stable` is the content
/// hashed when the file carries a wall-clock column.
class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  const fs::path& dir() const { return dir_; }

  void text(const std::string& name, const std::string& content, const std::string* stable = nullptr) {
    write(name, content.data(), content.size());
    digests_[name] = digest_string(stable ? *stable : content);
  }

  void bytes(const std::string& name, const std::vector<unsigned char>& b) {
    write(name, b.data(), b.size());
    digests_[name] = digest_bytes(b.data(), b.size());
  }

  void json_file(const std::string& name, const json& j) { text(name, j.dump(2) + "\n"); }

  /// A file written by library code; digest it from disk.
  void adopt(const std::string& name) { digests_[name] = digest_path(dir_ / name); }

  const std::map<std::string, std::string>& digests() const { return digests_; }

 private:
  void write(const std::string& name, const void* data, std::size_t n) {
    std::ofstream out(dir_ / name, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + (dir_ / name).string() + "'");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw std::runtime_error("write failed for '" + (dir_ / name).string() + "'");
  }

  fs::path dir_;
  std::map<std::string, std::string> digests_;
};

template <class F>
std::string render(F&& f) {
  std::ostringstream os;
  f(os);
  return os.str();
}

void write_rolling_csv(std::ostream& os, const StreamReport& r) {
  os << "block,count,mae,rmse,mape,smape\n";
  for (std::size_t i = 0; i < r.rolling.size(); ++i) {
    const auto& m = r.rolling[i];
    os << i << ',' << m.count << ',' << csv::num(m.mae) << ',' << csv::num(m.rmse) << ',' << csv::num(m.mape) << ','
       << csv::num(m.smape) << '\n';
  }
}

void check_inputs_exist(const RunConfig& cfg) {
  for (const auto& f : referenced_files(cfg))
    if (!fs::exists(f)) throw ValidationError("referenced file not found: " + f);
}

json input_digests(const RunConfig& cfg) {
  json j = json::object();
  for (const auto& f : referenced_files(cfg)) j[f] = digest_path(f);
  return j;
}

json seeds_of(const RunConfig& cfg) {
  json j = {{"seed", cfg.seed}, {"model_init", cfg.seed}, {"train", cfg.train.seed}, {"adapt", cfg.adapt.seed}};
  if (cfg.data.synthetic) j["synthetic"] = cfg.data.synthetic->seed;
  return j;
}

RunConfig config_of(const json& inv) { return parse_run_config(inv.at("config"), {}, fs::current_path()); }

// ---------------------------------------------------------------------------
// Commands. Each returns extra manifest fields (timings, notes).
// ---------------------------------------------------------------------------

json cmd_synth(const json& inv, Outputs& out) {
  auto spec = inv.at("args").at("spec").get<SynthSpec>();
  const auto name = inv.at("args").at("out").get<std::string>();
  const auto stream = generate_synthetic(spec);
  write_dataset(stream.dataset, out.dir() / name);
  out.adopt(name);
  out.adopt(dataset_meta_path(name).string());
  out.json_file(fs::path(name).replace_extension(".drift.json").string(), stream.drift_sidecar());
  return {{"sites", stream.dataset.site_names}, {"length", stream.dataset.length()}};
}

json cmd_ingest(const json& inv, Outputs& out) {
  const auto& a = inv.at("args");
  IngestOptions opt;
  opt.train_ratio = a.at("train_ratio").get<double>();
  opt.time_feature = a.at("time_feature").get<bool>();
  opt.max_bad_fraction = a.at("max_bad_fraction").get<double>();
  const auto input = a.at("input").get<std::string>();
  if (!fs::exists(input)) throw ValidationError("input not found: " + input);
  const auto name = a.at("out").get<std::string>();
  const auto result = ingest_csv(input, a.at("schema").get<std::string>(), opt);
  write_dataset(result.dataset, out.dir() / name);
  out.adopt(name);
  out.adopt(dataset_meta_path(name).string());
  out.json_file(fs::path(name).replace_extension(".ingest.json").string(), result.report.to_json());
  return {{"report", result.report.to_json()}};
}

json cmd_pretrain(const json& inv, Outputs& out) {
  const auto cfg = config_of(inv);
  if (!cfg.checkpoint.empty()) throw ValidationError("pretrain: `checkpoint` must be empty");
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = prepare_data(cfg);
  const auto po = pretrain_checkpoint(cfg, data);
  out.bytes("checkpoint.bin", serialize_checkpoint(po.checkpoint));
  out.text("loss_curve.csv", render([&](std::ostream& os) { write_loss_curve(os, po.result.curve); }));
  out.text("graph.csv", render([&](std::ostream& os) { write_edge_list(data.graph, os); }));
  out.json_file("pretrain.json", {{"epochs_run", po.result.epochs_run},
                                  {"best_epoch", po.result.best_epoch},
                                  {"best_val_loss", po.result.best_val_loss},
                                  {"checkpoint_digest", checkpoint_digest(po.checkpoint)},
                                  {"graph", graph_to_json(data.graph)}});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {{"timing", {{"seconds", secs}}}};
}

json cmd_stream(const json& inv, Outputs& out, StreamMode mode) {
  const auto cfg = config_of(inv);
  const auto dep = prepare_deployment(cfg);
  auto opt = cfg.protocol_options(mode);
  opt.keep_memory = mode == StreamMode::adapt;
  const auto rep = run_stream_protocol(dep.checkpoint, dep.data.target, dep.data.graph, cfg.adapt, opt);
  out.text("report.csv", render([&](std::ostream& os) { write_report_csv(os, rep, dep.data.target.site_names, dep.data.scaler); }));
  out.text("rolling.csv", render([&](std::ostream& os) { write_rolling_csv(os, rep); }));
  auto summary = summary_json(rep);
  summary["pretrain_digest"] = checkpoint_digest(dep.checkpoint);
  summary["final_model_digest"] = rep.adapted_digest;
  summary["target_offset"] = dep.data.target_offset;
  out.json_file("summary.json", summary);
  if (mode == StreamMode::adapt) {
    const auto diag = render([&](std::ostream& os) { write_diagnostics_csv(os, rep.diagnostics, true); });
    const auto stable = render([&](std::ostream& os) { write_diagnostics_csv(os, rep.diagnostics, false); });
    out.text("diagnostics.csv", diag, &stable);
    out.bytes("memory.bin", serialize_memory(*rep.final_memory));
  }
  return {{"timing", {{"median_step_us", rep.median_step_us}}}, {"metrics", rep.final_metrics}};
}

json cmd_ablate(const json& inv, Outputs& out) {
  const auto cfg = config_of(inv);
  const bool baseline = inv.at("args").value("baseline", false);
  const auto dep = prepare_deployment(cfg);
  auto rows = ablation_suite(dep.checkpoint, dep.data.target, dep.data.graph, cfg.adapt, cfg.variants, cfg.protocol_options(StreamMode::adapt));
  if (baseline) {
    auto o = cfg.protocol_options(StreamMode::frozen);
    o.keep_diagnostics = false;
    const auto rep = run_stream_protocol(dep.checkpoint, dep.data.target, dep.data.graph, cfg.adapt, o);
    rows.insert(rows.begin(), {"frozen", rep.final_metrics, rep.final_physical, checkpoint_digest(dep.checkpoint)});
  }
  out.text("ablation.csv", render([&](std::ostream& os) { write_ablation_csv(os, rows); }));
  return json::object();
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto dash = part.find('-');
    try {
      if (dash == std::string::npos) {
        seeds.push_back(std::stoull(part));
      } else {
        const auto lo = std::stoull(part.substr(0, dash)), hi = std::stoull(part.substr(dash + 1));
        if (hi < lo) throw ValidationError("seed range '" + part + "' is reversed");
        for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
      }
    } catch (const std::logic_error&) {
      throw ValidationError("bad seed list '" + text + "' (expected e.g. 0-9 or 1,2,5)");
    }
  }
  if (seeds.empty()) throw ValidationError("empty seed list");
  return seeds;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

json cmd_sweep(const json& inv, Outputs& out) {
  const auto& a = inv.at("args");
  const json base_doc = inv.at("config");
  const auto param = a.at("param").get<std::string>();
  const auto values = a.at("values");
  const auto seeds = a.at("seeds").get<std::vector<std::uint64_t>>();
  const auto variant = a.at("variant").get<std::string>();
  const bool baseline = a.at("baseline").get<bool>();
  if (param == "seed" || param.ends_with(".seed")) throw ValidationError("sweep: vary seeds with --seeds, not --param");
  // Adaptation and protocol settings leave pretraining untouched, so one
  // checkpoint per seed serves every value.
  const bool reuse = param.starts_with("adapt.") || param.starts_with("protocol.");

  std::vector<RunConfig> cfgs;
  for (const auto& v : values) {
    json doc = base_doc;
    apply_override(doc, param + "=" + v.dump());
    cfgs.push_back(parse_run_config(doc, {}, fs::current_path()));
    (void)apply_variant(cfgs.back().adapt, variant);
  }

  struct Cell {
    std::string value, mode;
    std::vector<double> mae;
  };
  std::vector<Cell> cells;
  auto cell = [&](const std::string& value, const std::string& mode) -> Cell& {
    for (auto& c : cells)
      if (c.value == value && c.mode == mode) return c;
    cells.push_back({value, mode, {}});
    return cells.back();
  };

  std::ostringstream csv_out;
  csv_out << "param,value,seed,mode,mae,rmse,mape,smape,count,mae_phys,rmse_phys,pretrain_digest\n";
  auto emit = [&](const std::string& value, std::uint64_t seed, const std::string& mode, const StreamReport& rep, const std::string& digest) {
    const auto& m = rep.final_metrics;
    csv_out << param << ',' << csv::escape(value) << ',' << seed << ',' << mode << ',' << csv::num(m.mae) << ',' << csv::num(m.rmse) << ','
            << csv::num(m.mape) << ',' << csv::num(m.smape) << ',' << m.count << ',';
    if (rep.final_physical) csv_out << csv::num(rep.final_physical->mae) << ',' << csv::num(rep.final_physical->rmse);
    else csv_out << ',';
    csv_out << ',' << digest << '\n';
    cell(value, mode).mae.push_back(m.mae);
  };

  for (auto seed : seeds) {
    std::optional<Deployment> shared;
    if (reuse) shared = prepare_deployment(with_seed(cfgs.front(), seed));
    for (std::size_t k = 0; k < cfgs.size(); ++k) {
      const auto cfg = with_seed(cfgs[k], seed);
      const auto dep = reuse ? *shared : prepare_deployment(cfg);
      const auto digest = checkpoint_digest(dep.checkpoint);
      const auto value = values[k].is_string() ? values[k].get<std::string>() : values[k].dump();
      auto o = cfg.protocol_options(StreamMode::adapt);
      o.keep_diagnostics = false;
      emit(value, seed, variant, run_stream_protocol(dep.checkpoint, dep.data.target, dep.data.graph, apply_variant(cfg.adapt, variant), o),
           digest);
      if (baseline) {
        o.mode = StreamMode::frozen;
        emit(value, seed, "frozen", run_stream_protocol(dep.checkpoint, dep.data.target, dep.data.graph, cfg.adapt, o), digest);
      }
    }
  }
  out.text("sweep.csv", csv_out.str());
  std::ostringstream summary;
  summary << "param,value,mode,seeds,median_mae,mean_mae\n";
  for (const auto& c : cells) {
    double mean = 0.0;
    for (double x : c.mae) mean += x;
    mean /= static_cast<double>(c.mae.size());
    summary << param << ',' << csv::escape(c.value) << ',' << c.mode << ',' << c.mae.size() << ',' << csv::num(median(c.mae)) << ','
            << csv::num(mean) << '\n';
  }
  out.text("sweep_summary.csv", summary.str());
  return {{"pretraining_shared", reuse}};
}

json cmd_memory_dump(const json& inv, Outputs& out) {
  const auto path = inv.at("args").at("snapshot").get<std::string>();
  if (!fs::exists(path)) throw ValidationError("snapshot not found: " + path);
  const auto snap = load_memory_snapshot(path);
  std::size_t bytes = 0;
  json entries = json::array();
  for (std::size_t i = 0; i < snap.entries.size(); ++i) {
    const auto& e = snap.entries[i];
    bytes += e.values.size() * sizeof(float) + static_cast<std::size_t>(e.embedding_mean.size()) * sizeof(double) + 2 * sizeof(std::uint64_t);
    double mean = 0.0;
    for (float v : e.values) mean += v;
    if (!e.values.empty()) mean /= static_cast<double>(e.values.size());
    entries.push_back({{"slot", i},
                       {"inserted_at", e.inserted_at},
                       {"refreshed_at", e.refreshed_at},
                       {"shape", e.shape},
                       {"window_mean", mean},
                       {"embedding_norm", e.embedding_mean.norm()}});
  }
  json j = {{"capacity", snap.capacity}, {"seen", snap.seen}, {"size", snap.entries.size()}, {"footprint_bytes", bytes}};
  if (inv.at("args").value("entries", true)) j["entries"] = entries;
  out.json_file("memory.json", j);
  std::cout << j.dump(2) << '\n';
  return json::object();
}

json cmd_gradcheck(const json& inv, Outputs& out) {
  const auto n = inv.at("args").at("seeds").get<std::size_t>();
  const auto tol = inv.at("args").at("tolerance").get<double>();
  const auto t0 = std::chrono::steady_clock::now();
  json rows = json::array();
  bool pass = true;
  for (std::uint64_t s = 0; s < n; ++s) {
    const auto r = check_adapt_gradients(s, tol);
    pass = pass && r.report.pass;
    rows.push_back({{"seed", s}, {"pass", r.report.pass}, {"max_rel_error", r.max_rel_error},
                    {"passing_nodes", r.passing_nodes}, {"nodes", r.nodes}, {"replayed", r.replayed}});
  }
  const json result = {{"pass", pass}, {"tolerance", tol}, {"seeds", rows}};
  out.json_file("gradcheck.json", result);
  std::cout << (pass ? "PASS" : "FAIL") << ": full adaptation objective, " << n << " seeds, rel tol " << tol << '\n';
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!pass) throw std::runtime_error("gradient check failed");
  return {{"timing", {{"seconds", secs}}}};
}

// ---------------------------------------------------------------------------
// Dispatch and manifests
// ---------------------------------------------------------------------------

bool writes_dataset(const std::string& command) { return command == "synth" || command == "ingest"; }

/// Where an invocation's artifacts go, and its manifest name.
std::pair<fs::path, std::string> placement(const json& inv, const std::string& run_name) {
  const auto& command = inv.at("command").get_ref<const std::string&>();
  if (writes_dataset(command)) {
    const fs::path out = fs::path(inv.at("args").at("out").get<std::string>());
    return {run_name.empty() ? fs::path() : fs::path(run_name), out.stem().string() + ".manifest.json"};
  }
  return {run_name.empty() ? fs::path(command + "-" + digest_string(inv.dump()).substr(0, 12)) : fs::path(run_name), "manifest.json"};
}

json execute(const json& inv, const fs::path& dir, const std::string& manifest_name) {
  Outputs out(dir);
  const auto& command = inv.at("command").get_ref<const std::string&>();
  json inputs = json::object();
  if (inv.contains("config")) {
    const auto cfg = config_of(inv);
    check_inputs_exist(cfg);
    inputs = input_digests(cfg);
  }
  if (command == "ingest") inputs[inv.at("args").at("input").get<std::string>()] = digest_path(inv.at("args").at("input").get<std::string>());
  if (command == "memory dump") inputs[inv.at("args").at("snapshot").get<std::string>()] = digest_path(inv.at("args").at("snapshot").get<std::string>());

  json extra;
  if (command == "synth") extra = cmd_synth(inv, out);
  else if (command == "ingest") extra = cmd_ingest(inv, out);
  else if (command == "pretrain") extra = cmd_pretrain(inv, out);
  else if (command == "adapt") extra = cmd_stream(inv, out, StreamMode::adapt);
  else if (command == "evaluate") extra = cmd_stream(inv, out, StreamMode::frozen);
  else if (command == "ablate") extra = cmd_ablate(inv, out);
  else if (command == "sweep") extra = cmd_sweep(inv, out);
  else if (command == "memory dump") extra = cmd_memory_dump(inv, out);
  else if (command == "gradcheck") extra = cmd_gradcheck(inv, out);
  else throw ValidationError("unknown command '" + command + "'");

  json manifest = {{"tool", "freegnn"},
                   {"code_version", FREEGNN_VERSION},
                   {"invocation", inv},
                   {"inputs", inputs},
                   {"outputs", out.digests()},
                   {"extra", extra}};
  if (inv.contains("config")) manifest["seeds"] = seeds_of(config_of(inv));
  std::ofstream mf(dir / manifest_name, std::ios::trunc);
  mf << manifest.dump(2) << '\n';
  return manifest;
}

json config_invocation(const std::string& command, const std::string& config_path, const std::vector<std::string>& overrides,
                       json args = json::object()) {
  if (config_path.empty()) throw ValidationError(command + ": --config is required");
  const auto cfg = load_run_config(config_path, overrides);
  return {{"command", command}, {"args", std::move(args)}, {"config", cfg}};
}

int rerun(const std::string& manifest_path, const std::string& run_name) {
  const auto manifest = read_json_file(manifest_path);
  const auto& inv = manifest.at("invocation");
  const auto name = run_name.empty() ? fs::path(manifest_path).parent_path().filename().string() + "-rerun" : run_name;
  auto [dir, mname] = placement(inv, name);
  // The re-executed command's own stdout is not part of the rerun report.
  std::ostringstream muted;
  auto* saved = std::cout.rdbuf(muted.rdbuf());
  json fresh;
  try {
    fresh = execute(inv, output_root() / dir, mname);
  } catch (...) {
    std::cout.rdbuf(saved);
    throw;
  }
  std::cout.rdbuf(saved);
  json files = json::object();
  bool same = true;
  for (const auto& [file, digest] : manifest.at("outputs").items()) {
    const auto now = fresh.at("outputs").value(file, std::string("missing"));
    files[file] = {{"expected", digest}, {"actual", now}, {"match", now == digest}};
    same = same && now == digest;
  }
  if (fresh.at("outputs").size() != manifest.at("outputs").size()) same = false;
  json changed_inputs = json::array();
  for (const auto& [path, digest] : manifest.at("inputs").items())
    if (fresh.at("inputs").value(path, std::string("missing")) != digest) changed_inputs.push_back(path);
  std::cout << json({{"reproduced", same}, {"outputs", files}, {"changed_inputs", changed_inputs}, {"directory", (output_root() / dir).string()}}).dump(2)
            << '\n';
  return same ? 0 : 2;
}

int fail(int code, const std::string& kind, const std::string& message) {
  std::cerr << json({{"error", {{"code", code}, {"kind", kind}, {"message", message}}}}).dump() << '\n';
  return code;
}

std::string defaults_footer() {
  std::ostringstream os;
  os << "\nConfig keys (override with --set key=value):\n";
  for (const auto& [k, v] : flattened_defaults()) os << "  " << k << " = " << v << '\n';
  os << "\nOutput root: $FREEGNN_OUTPUT_ROOT (default ./runs)\n";
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"freegnn: source-free online adaptation of graph forecasters"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(FREEGNN_VERSION));
  const auto footer = defaults_footer();
  app.footer(footer);

  std::string config_path, run_name;
  std::vector<std::string> overrides;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "run config JSON")->required()->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "override a config key, key=value (repeatable)");
    sub->add_option("--name", run_name, "run directory under the output root (default: command + digest)");
    sub->footer(footer);
  };

  std::string spec_path, out_path;
  auto* synth = app.add_subcommand("synth", "generate a synthetic stream and its drift schedule");
  synth->add_option("spec", spec_path, "synthetic spec JSON")->required()->check(CLI::ExistingFile);
  synth->add_option("out", out_path, "output CSV, relative to the output root")->required();

  std::string input, schema = "wind-scada";
  IngestOptions iopt;
  auto* ingest = app.add_subcommand("ingest", "normalise a raw dataset into the canonical CSV");
  ingest->add_option("input", input, "raw file or directory")->required();
  ingest->add_option("--schema", schema, "gefcom2012-wind | solar-pv | wind-scada | schema.json")->capture_default_str();
  ingest->add_option("-o,--out", out_path, "output CSV, relative to the output root")->required();
  ingest->add_option("--train-ratio", iopt.train_ratio, "portion used to fit imputation")->capture_default_str();
  ingest->add_flag("--time-feature", iopt.time_feature, "append the normalised timestamp");
  ingest->add_option("--max-bad-fraction", iopt.max_bad_fraction, "tolerated unparseable rows")->capture_default_str();

  auto* pre = app.add_subcommand("pretrain", "train the source model and write checkpoint.bin");
  add_config(pre);

  bool no_replay = false, no_graph = false, no_drift = false, single_model = false;
  auto* adapt = app.add_subcommand("adapt", "stream the target with online adaptation");
  add_config(adapt);
  adapt->add_flag("--no-replay", no_replay, "drop the replay loss");
  adapt->add_flag("--no-graph", no_graph, "drop the graph regulariser");
  adapt->add_flag("--no-drift", no_drift, "fix the drift gate at 1");
  adapt->add_flag("--single-model", single_model, "use the student as its own teacher");

  auto* eval = app.add_subcommand("evaluate", "stream the target with the frozen checkpoint");
  add_config(eval);

  bool baseline = false;
  std::vector<std::string> variants;
  auto* ablate = app.add_subcommand("ablate", "run the ablation variants on one checkpoint");
  add_config(ablate);
  ablate->add_option("--variants", variants, "subset of full,no-replay,no-graph,no-drift,single-model")->delimiter(',');
  ablate->add_flag("--baseline", baseline, "add a frozen-model row");

  std::string param, values_text, seeds_text = "0", variant = "full";
  auto* sweep = app.add_subcommand("sweep", "vary one config key across values and seeds");
  add_config(sweep);
  sweep->add_option("--param", param, "dotted config key, e.g. adapt.memory_capacity")->required();
  sweep->add_option("--values", values_text, "comma-separated values")->required();
  sweep->add_option("--seeds", seeds_text, "seed list, e.g. 0-9 or 1,4,7")->capture_default_str();
  sweep->add_option("--variant", variant, "adaptation variant")->capture_default_str();
  sweep->add_flag("--baseline", baseline, "also score the frozen model");

  std::string snapshot;
  bool summary_only = false;
  auto* memory = app.add_subcommand("memory", "replay memory tools");
  memory->require_subcommand(1);
  auto* dump = memory->add_subcommand("dump", "print a memory snapshot as JSON");
  dump->add_option("snapshot", snapshot, "memory.bin")->required();
  dump->add_flag("--summary", summary_only, "omit per-entry rows");
  dump->add_option("--name", run_name, "run directory under the output root");

  std::size_t gc_seeds = 20;
  double gc_tol = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the full adaptation objective");
  gradcheck->add_option("--seeds", gc_seeds, "number of random instances")->capture_default_str();
  gradcheck->add_option("--tol", gc_tol, "relative tolerance")->capture_default_str();
  gradcheck->add_option("--name", run_name, "run directory under the output root");

  std::string manifest_path;
  auto* re = app.add_subcommand("rerun", "re-run a command from its manifest and compare output digests");
  re->add_option("manifest", manifest_path, "manifest.json")->required()->check(CLI::ExistingFile);
  re->add_option("--name", run_name, "run directory under the output root");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(1, "validation", e.what());
  }

  try {
    if (re->parsed()) return rerun(manifest_path, run_name);

    json inv;
    if (synth->parsed()) {
      inv = {{"command", "synth"}, {"args", {{"spec", load_synth_spec(spec_path)}, {"out", fs::path(out_path).filename().string()}}}};
    } else if (ingest->parsed()) {
      inv = {{"command", "ingest"},
             {"args", {{"input", fs::absolute(input).lexically_normal().string()}, {"schema", schema},
                       {"out", fs::path(out_path).filename().string()}, {"train_ratio", iopt.train_ratio},
                       {"time_feature", iopt.time_feature}, {"max_bad_fraction", iopt.max_bad_fraction}}}};
      if (schema.ends_with(".json")) inv["args"]["schema"] = fs::absolute(schema).lexically_normal().string();
    } else if (pre->parsed()) {
      inv = config_invocation("pretrain", config_path, overrides);
    } else if (adapt->parsed()) {
      if (no_replay) overrides.push_back("adapt.use_replay=false");
      if (no_graph) overrides.push_back("adapt.use_graph=false");
      if (no_drift) overrides.push_back("adapt.use_drift=false");
      if (single_model) overrides.push_back("adapt.single_model=true");
      inv = config_invocation("adapt", config_path, overrides);
    } else if (eval->parsed()) {
      inv = config_invocation("evaluate", config_path, overrides);
    } else if (ablate->parsed()) {
      if (!variants.empty()) overrides.push_back("variants=" + json(variants).dump());
      inv = config_invocation("ablate", config_path, overrides, {{"baseline", baseline}});
    } else if (sweep->parsed()) {
      json values = json::array();
      std::stringstream ss(values_text);
      std::string v;
      while (std::getline(ss, v, ',')) {
        auto parsed = json::parse(v, nullptr, false);
        values.push_back(parsed.is_discarded() ? json(v) : parsed);
      }
      if (values.empty()) throw ValidationError("sweep: --values is empty");
      inv = config_invocation("sweep", config_path, overrides,
                              {{"param", param}, {"values", values}, {"seeds", parse_seed_list(seeds_text)},
                               {"variant", variant}, {"baseline", baseline}});
      (void)apply_variant(AdaptConfig{}, variant);
    } else if (dump->parsed()) {
      inv = {{"command", "memory dump"}, {"args", {{"snapshot", fs::absolute(snapshot).lexically_normal().string()}, {"entries", !summary_only}}}};
    } else if (gradcheck->parsed()) {
      inv = {{"command", "gradcheck"}, {"args", {{"seeds", gc_seeds}, {"tolerance", gc_tol}}}};
    }

    std::string name = run_name;
    if (synth->parsed() || ingest->parsed()) name = fs::path(out_path).parent_path().string();
    const auto [dir, mname] = placement(inv, name);
    const auto manifest = execute(inv, output_root() / dir, mname);
    if (!dump->parsed() && !gradcheck->parsed())
      std::cout << json({{"directory", (output_root() / dir).string()}, {"outputs", manifest.at("outputs")}}).dump(2) << '\n';
    return 0;
  } catch (const ValidationError& e) {
    return fail(1, "validation", e.what());
  } catch (const std::invalid_argument& e) {  // includes shape errors and config errors
    return fail(1, "validation", e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(1, "validation", e.what());
  } catch (const IngestError& e) {
    return fail(1, "validation", e.what());
  } catch (const BinaryFormatError& e) {
    return fail(1, "validation", e.what());
  } catch (const std::exception& e) {
    return fail(2, "runtime", e.what());
  }
}

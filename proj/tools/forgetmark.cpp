// forgetmark command-line tool: every pipeline stage and experiment preset,
// with artifacts and manifests under runs/<id>/.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "forgetmark/forgetmark.hpp"

namespace fs = std::filesystem;
using namespace forgetmark;

namespace {

enum ExitCode : int {
  exit_ok = 0,
  exit_below_threshold = 1,
  exit_usage = 2,
  exit_missing_artifact = 3,
  exit_schema = 4,
  exit_runtime = 5,
};

constexpr const char* exit_code_help =
    "Exit codes:\n"
    "  0  success\n"
    "  1  verify: FSR below the decision threshold\n"
    "  2  usage or configuration error\n"
    "  3  missing input artifact\n"
    "  4  artifact schema or version mismatch\n"
    "  5  runtime, numeric or network failure\n";

struct Globals {
  std::string run_dir = "runs/default";
  std::string config_file;
  std::vector<std::string> overrides;
  std::size_t threads = 1;
  bool verbose = false;
};

/// Shared state of one invocation: resolved config, world, manifest.
class Session {
 public:
  Session(const Globals& g, std::string command, std::vector<std::string> argv) : g_(g) {
    KeyValues kv;
    if (!g.config_file.empty()) {
      require_file(g.config_file);
      kv = load_key_values(g.config_file);
    }
    for (auto& [k, v] : parse_overrides(g.overrides)) kv[k] = v;
    kv_ = kv;
    config = make_pipeline_config(kv);
    fs::create_directories(fs::path(g.run_dir) / "manifests");
    manifest.command = std::move(command);
    manifest.argv = std::move(argv);
    manifest.config_text = canonical_config(kv);
    manifest.config_hash = hex64(fnv1a64(manifest.config_text));
    manifest.root_seed = config.root_seed;
    manifest.started = utc_timestamp();
    default_threads() = std::max<std::size_t>(1, g.threads);
  }

  std::string path(const std::string& name) const { return (fs::path(g_.run_dir) / name).string(); }

  const PipelineWorld& world() {
    if (!world_) world_ = make_pipeline_world(config);
    return *world_;
  }

  static void require_file(const std::string& p) {
    if (!fs::exists(p)) fail(ErrorKind::io, "missing artifact " + p);
  }

  /// Weights saved by this tool; the vocabulary hash must match the world's.
  Weights load_model(const std::string& p) {
    require_file(p);
    auto loaded = load_weights(p);
    const std::string want = hex64(world().vocab.hash());
    if (loaded.meta.value("vocab_hash", want) != want)
      fail(ErrorKind::schema, p + " was trained with a different vocabulary");
    manifest.add_input(p);
    return std::move(loaded.weights);
  }

  void save_model(const std::string& p, const Weights& w, const std::string& role) {
    save_weights(p, w, {{"vocab_hash", hex64(world().vocab.hash())}, {"role", role}, {"config_hash", manifest.config_hash}});
    manifest.add_output(p);
  }

  LoraAdapter load_lora(const std::string& p) {
    require_file(p);
    auto a = load_adapter(p);
    manifest.add_input(p);
    return std::move(a.adapter);
  }

  FingerprintSet load_fingerprints(const std::string& p) {
    require_file(p);
    manifest.add_input(p);
    return fingerprint_set_from_jsonl(io_detail::read_file(p));
  }

  KeyPool load_keys(const std::string& p) {
    require_file(p);
    manifest.add_input(p);
    return key_pool_from_jsonl(io_detail::read_file(p));
  }

  void write_text(const std::string& p, const std::string& text) {
    io_detail::write_file(p, text);
    manifest.add_output(p);
  }

  /// Suspect names resolve to run artifacts; anything else is a checkpoint path.
  struct Resolved {
    Weights weights;
    std::optional<LoraAdapter> adapter;
  };

  Resolved resolve_model(const std::string& name, const std::string& adapter_path = "") {
    Resolved r;
    if (name == "clean_base" || name == "base") {
      r.weights = load_model(path("base.ckpt"));
    } else if (name == "fingerprinted") {
      r.weights = load_model(path("base.ckpt"));
      r.adapter = load_lora(path("fingerprint.adapter"));
    } else if (name == "alt" || name == "donor" || name == "backdoor" || name == "merged") {
      r.weights = load_model(path(name + ".ckpt"));
    } else {
      r.weights = load_model(name);
    }
    if (!adapter_path.empty()) r.adapter = load_lora(adapter_path);
    if (r.adapter) check_adapter_fits(r.weights, *r.adapter);
    return r;
  }

  void record_seeds(std::initializer_list<std::pair<const char*, std::uint64_t>> seeds) {
    for (const auto& [k, v] : seeds) manifest.seeds[k] = v;
  }

  void finish(const nlohmann::json& summary = nlohmann::json::object()) {
    manifest.summary = summary;
    manifest.finished = utc_timestamp();
    const auto p = path("manifests/" + manifest.command + ".json");
    save_manifest(p, manifest);
    spdlog::info("manifest written to {}", p);
  }

  PipelineConfig config;
  RunManifest manifest;

 private:
  const Globals& g_;
  KeyValues kv_;
  std::optional<PipelineWorld> world_;
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& s) {
  std::vector<T> out;
  for (const auto& item : split_csv(s)) {
    try {
      if constexpr (std::is_floating_point_v<T>) out.push_back(static_cast<T>(std::stod(item)));
      else out.push_back(static_cast<T>(std::stoull(item)));
    } catch (const std::exception&) {
      fail(ErrorKind::invalid_argument, "bad list element '" + item + "'");
    }
  }
  return out;
}

void print_report(const VerificationReport& r) {
  fmt::print("{:>6}  {:>12}  {:>8}  {:>3}  {}\n", "key", "P(v|k)", "ROUGE-L", "bit", "key text");
  for (const auto& k : r.keys)
    fmt::print("{:>6}  {:>12}  {:>8.4f}  {:>3}  {}\n", k.key_id,
               k.probability ? fmt::format("{:.3e}", *k.probability) : std::string("-"), k.rouge, k.bit ? 1 : 0, k.key);
  fmt::print("FSR_prb = {}  FSR_rouge = {:.4f}  FSR = {:.4f}  (tau_prb {:.3g}, tau_rg {:.3g}, mode {})\n",
             r.fsr_prb ? fmt::format("{:.4f}", *r.fsr_prb) : std::string("-"), r.fsr_rouge, r.fsr, r.config.tau_prb,
             r.config.tau_rg, to_string(r.config.mode));
}

// ---------------------------------------------------------------------------
// Commands.

int cmd_gen_data(Session& s) {
  const auto& w = s.world();
  fs::create_directories(s.path("data"));
  auto dump = [&](const std::string& name, const std::vector<std::string>& lines) {
    std::string text;
    for (const auto& l : lines) text += l + "\n";
    s.write_text(s.path("data/" + name), text);
  };
  dump("base.txt", w.world.base_corpus);
  dump("alt.txt", w.world.alt_corpus);
  dump("general.txt", w.world.general_corpus);
  dump("downstream.txt", w.world.downstream_corpus);
  dump("heldout.txt", w.world.heldout_corpus);
  w.vocab.save(s.path("data/vocab.txt"));
  s.manifest.add_output(s.path("data/vocab.txt"));
  s.record_seeds({{"world", s.config.world.seed}});
  fmt::print("wrote corpora and a {}-token vocabulary to {}\n", w.vocab.size(), s.path("data"));
  s.finish({{"vocab_size", w.vocab.size()}});
  return exit_ok;
}

int cmd_train_base(Session& s, const std::string& role, const std::string& trigger, const std::string& response) {
  const auto& w = s.world();
  Weights out;
  nlohmann::json summary{{"role", role}};
  if (role == "target") {
    out = train_base_model(s.config, w);
    s.record_seeds({{"model_init", s.config.model.seed}, {"train", s.config.base_train.seed}});
  } else if (role == "alt") {
    out = train_alt_model(s.config, w);
    s.record_seeds({{"model_init", s.config.alt_model_seed()}, {"train", s.config.alt_train.seed}});
  } else if (role == "donor") {
    out = train_donor(s.config, w, s.load_model(s.path("base.ckpt")));
    s.record_seeds({{"train", s.config.donor_train.seed}});
  } else if (role == "backdoor") {
    BackdoorOptions opt;
    opt.seed = derive_seed({s.config.root_seed, 13});
    out = backdoor_positive_control(s.load_model(s.path("base.ckpt")), w.vocab, w.world.base_corpus, trigger, response, opt);
    s.record_seeds({{"train", opt.seed}});
    summary["trigger"] = trigger;
    summary["response"] = response;
  } else {
    fail(ErrorKind::invalid_argument, "unknown role '" + role + "' (target, alt, donor, backdoor)");
  }
  const std::string name = role == "target" ? "base" : role;
  const auto p = s.path(name + ".ckpt");
  s.save_model(p, out, role);
  const auto ppl = perplexity(ModelView(out), w.vocab, w.world.heldout_corpus).perplexity;
  fmt::print("{} model ({} parameters) saved to {}; held-out perplexity {:.3f}\n", role, parameter_count(out.tensors), p, ppl);
  summary["heldout_perplexity"] = ppl;
  summary["parameters"] = parameter_count(out.tensors);
  s.finish(summary);
  return exit_ok;
}

int cmd_keygen(Session& s, const std::string& source, std::size_t count, const std::string& file,
               const EndpointConfig& endpoint) {
  KeyPool pool;
  nlohmann::json summary{{"source", source}};
  if (source == "template") {
    pool = generate_keys_template(s.world().world, count, s.config.key_pool_seed(), s.config.screening);
    s.record_seeds({{"key_pool", s.config.key_pool_seed()}});
  } else if (source == "file") {
    if (file.empty()) fail(ErrorKind::invalid_argument, "--file is required for the file source");
    Session::require_file(file);
    pool = load_key_file(file, s.config.screening, &s.world().vocab);
    s.manifest.add_input(file);
  } else if (source == "endpoint") {
    AssistantEndpointConfig cfg;
    cfg.endpoint = endpoint;
    auto fetched = fetch_keys(cfg, count, s.config.screening, &s.world().vocab);
    pool = std::move(fetched.pool);
    summary["requests"] = fetched.requests;
    summary["retries"] = fetched.retries;
    summary["duplicates"] = fetched.duplicates;
  } else {
    fail(ErrorKind::invalid_argument, "unknown key source '" + source + "' (template, file, endpoint)");
  }
  const auto p = s.path("keys.jsonl");
  s.write_text(p, key_pool_to_jsonl(pool));
  fmt::print("{} keys written to {}\n", pool.size(), p);
  summary["keys"] = pool.size();
  s.finish(summary);
  return exit_ok;
}

/// --pool K500 builds a 500-key template pool in place; otherwise a keys file.
KeyPool pool_from_flag(Session& s, const std::string& flag) {
  if (flag.size() > 1 && (flag[0] == 'K' || flag[0] == 'k') &&
      std::all_of(flag.begin() + 1, flag.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    s.record_seeds({{"key_pool", s.config.key_pool_seed()}});
    return generate_keys_template(s.world().world, std::stoul(flag.substr(1)), s.config.key_pool_seed(),
                                  s.config.screening);
  }
  return s.load_keys(flag.empty() ? s.path("keys.jsonl") : flag);
}

int cmd_construct(Session& s, const std::string& pool_flag) {
  const auto base = s.load_model(s.path("base.ckpt"));
  auto c = construct_fingerprints(s.config, s.world(), base, pool_from_flag(s, pool_flag));
  const auto p = s.path("fingerprints.jsonl");
  s.write_text(p, fingerprint_set_to_jsonl(c.fingerprints));
  s.record_seeds({{"candidates", s.config.candidates.seed}});
  fmt::print("pool {} keys, {} candidates, {} dropped; selected N = {} (mean baseline P {:.4f}) -> {}\n", c.pool.size(),
             c.candidates.records.size(), c.candidates.dropped.size(), c.fingerprints.size(),
             mean_baseline_probability(c.fingerprints), p);
  s.finish({{"pool", c.pool.size()},
            {"candidates", c.candidates.records.size()},
            {"dropped", c.candidates.dropped.size()},
            {"n", c.fingerprints.size()},
            {"mean_baseline_probability", mean_baseline_probability(c.fingerprints)}});
  return exit_ok;
}

int cmd_unlearn(Session& s) {
  const auto base = s.load_model(s.path("base.ckpt"));
  const auto fp = s.load_fingerprints(s.path("fingerprints.jsonl"));
  const auto retention = make_retention_set(s.config, s.world(), fp);
  const auto result = run_unlearning(base, s.world().vocab, fp, retention, s.config.unlearn);
  const auto ap = s.path("fingerprint.adapter");
  save_adapter(ap, result.adapter,
               {{"fingerprint_hash", hex64(fingerprint_hash(fp))},
                {"config_hash", s.manifest.config_hash},
                {"base_hash", hex64(base.hash())}});
  s.manifest.add_output(ap);
  s.write_text(s.path("trainlog.csv"), result.log.to_csv());
  s.record_seeds({{"unlearn", s.config.unlearn.seed}, {"lora_init", s.config.unlearn.lora.seed},
                  {"retention", s.config.retention_seed()}});
  const ModelView view(base, &result.adapter);
  const auto p = fingerprint_probabilities(view, fingerprint_examples(s.world().vocab, fp));
  const double ppl0 = retention_perplexity(ModelView(base), retention.pairs);
  const double ppl1 = retention_perplexity(view, retention.pairs);
  fmt::print("{} steps, threshold {}; mean P(v|k) {:.3e} -> {:.3e}; retention perplexity {:.4f} -> {:.4f} ({:+.2f}%)\n",
             result.steps_run, result.reached_threshold ? "reached" : "NOT reached", result.log.initial_mean_fp_probability,
             mean_of(p), ppl0, ppl1, 100.0 * (ppl1 / ppl0 - 1.0));
  s.finish({{"steps", result.steps_run},
            {"reached_threshold", result.reached_threshold},
            {"mean_probability", mean_of(p)},
            {"retention_perplexity_base", ppl0},
            {"retention_perplexity", ppl1}});
  return exit_ok;
}

struct VerifyFlags {
  std::string suspect = "fingerprinted";
  std::string adapter;
  std::string endpoint_url;
  std::string endpoint_model = "suspect";
  std::string token_env;
  bool endpoint_logprobs = false;
  std::string calibration;
  std::string report;
};

void apply_calibration(Session& s, VerifyConfig& vc, const std::string& path) {
  if (path.empty()) return;
  Session::require_file(path);
  s.manifest.add_input(path);
  const auto j = nlohmann::json::parse(io_detail::read_file(path));
  if (!j.value("feasible", false)) fail(ErrorKind::schema, path + " holds an infeasible calibration");
  vc.tau_prb = j.at("tau_prb").get<double>();
  vc.tau_rg = j.at("tau_rg").get<double>();
}

int cmd_verify(Session& s, const VerifyFlags& f) {
  VerifyConfig vc = s.config.verify;
  apply_calibration(s, vc, f.calibration);
  const auto fp = s.load_fingerprints(s.path("fingerprints.jsonl"));
  VerificationReport report;
  if (!f.endpoint_url.empty()) {
    EndpointConfig ep;
    ep.base_url = f.endpoint_url;
    ep.model = f.endpoint_model;
    ep.token_env = f.token_env;
    report = probe_suspect(RemoteSuspect(ep, f.endpoint_logprobs), fp, vc);
  } else {
    auto m = s.resolve_model(f.suspect, f.adapter);
    report = probe_suspect(LocalSuspect(m.weights, s.world().vocab, m.adapter ? &*m.adapter : nullptr), fp, vc);
  }
  print_report(report);
  const auto p = f.report.empty() ? s.path("report_" + fs::path(f.suspect).stem().string() + ".json") : f.report;
  s.write_text(p, to_json(report).dump(2) + "\n");
  const bool owned = report.fsr >= vc.decision_threshold;
  fmt::print("decision: {} (FSR {:.4f} vs threshold {:.2f}); report {}\n", owned ? "FINGERPRINT PRESENT" : "not detected",
             report.fsr, vc.decision_threshold, p);
  s.finish({{"fsr", report.fsr}, {"suspect", report.suspect}, {"decision", owned}});
  return owned ? exit_ok : exit_below_threshold;
}

int cmd_calibrate(Session& s, const std::string& controls, double target_fp) {
  const auto fp = s.load_fingerprints(s.path("fingerprints.jsonl"));
  std::vector<std::vector<Evidence>> evidence;
  for (const auto& name : split_csv(controls)) {
    auto m = s.resolve_model(name);
    evidence.push_back(
        control_evidence(LocalSuspect(m.weights, s.world().vocab, m.adapter ? &*m.adapter : nullptr), fp, s.config.verify));
  }
  const auto cal = calibrate_thresholds(evidence, target_fp);
  nlohmann::json j{{"feasible", cal.feasible},   {"tau_prb", cal.tau_prb},         {"tau_rg", cal.tau_rg},
                   {"target_fp", target_fp},     {"controls", split_csv(controls)}, {"control_fsr", cal.control_fsr},
                   {"reason", cal.reason}};
  s.write_text(s.path("calibration.json"), j.dump(2) + "\n");
  if (!cal.feasible) {
    fmt::print("calibration infeasible: {}\n", cal.reason);
    s.finish(j);
    return exit_runtime;
  }
  fmt::print("tau_prb = {:.6g}  tau_rg = {:.6g}  (control FSR:", cal.tau_prb, cal.tau_rg);
  for (double v : cal.control_fsr) fmt::print(" {:.3f}", v);
  fmt::print(")\n");
  s.finish(j);
  return exit_ok;
}

std::vector<TokenId> probe_set(const Vocab& vocab, std::size_t limit, std::uint64_t seed) {
  auto probes = full_vocab_probes(vocab);
  if (limit > 0 && limit < probes.size()) {
    Rng rng(seed);
    rng.shuffle(std::span<TokenId>(probes));
    probes.resize(limit);
    std::sort(probes.begin(), probes.end());
  }
  return probes;
}

int cmd_stealth_ppl(Session& s, const std::string& estimators) {
  const auto fp = s.load_fingerprints(s.path("fingerprints.jsonl"));
  StealthReport report;
  for (const auto& e : fp.entries) report.keys.push_back(e.key_text);
  std::vector<std::string> shuffled;
  for (std::size_t i = 0; i < report.keys.size(); ++i)
    shuffled.push_back(shuffle_tokens(report.keys[i], derive_seed({s.config.root_seed, 0x5f, i})));
  nlohmann::json summary = nlohmann::json::object();
  for (const auto& name : split_csv(estimators)) {
    auto m = s.resolve_model(name);
    const ModelView view(m.weights, m.adapter ? &*m.adapter : nullptr);
    const auto k = key_perplexity(view, s.world().vocab, report.keys);
    const auto sh = key_perplexity(view, s.world().vocab, shuffled);
    report.estimators.emplace_back(name, k);
    report.estimators.emplace_back(name + ":shuffled", sh);
    fmt::print("estimator {:<12} mean key PPL {:10.3f}   shuffled keys {:10.3f}\n", name, k.mean, sh.mean);
    summary[name] = {{"keys", k.mean}, {"shuffled", sh.mean}};
  }
  s.write_text(s.path("stealth_ppl.json"), report.to_json(s.world().vocab).dump(2) + "\n");
  s.finish(summary);
  return exit_ok;
}

int cmd_stealth_tf(Session& s, const std::string& suspect, const std::string& variants, const std::string& known,
                   std::size_t probe_limit, std::size_t max_tokens) {
  auto m = s.resolve_model(suspect);
  StealthReport report;
  if (known == "fingerprints") {
    for (const auto& e : s.load_fingerprints(s.path("fingerprints.jsonl")).entries) report.known_responses.push_back(e.value_text);
  } else if (known == "backdoor") {
    report.known_responses.emplace_back(default_fixed_response);
  } else {
    Session::require_file(known);
    s.manifest.add_input(known);
    std::ifstream in(known);
    for (std::string line; std::getline(in, line);)
      if (!normalize_whitespace(line).empty()) report.known_responses.push_back(line);
  }
  const auto probes = probe_set(s.world().vocab, probe_limit, derive_seed({s.config.root_seed, 0x7f}));
  std::vector<TfVariant> vs;
  if (variants == "all") vs.assign(std::begin(all_tf_variants), std::end(all_tf_variants));
  else
    for (const auto& v : split_csv(variants)) vs.push_back(tf_variant_from_string(v));
  const ModelView view(m.weights, m.adapter ? &*m.adapter : nullptr);
  nlohmann::json summary = nlohmann::json::object();
  for (TfVariant v : vs) {
    report.token_forcing.push_back(token_forcing(view, s.world().vocab, report.known_responses, v, probes, max_tokens));
    const auto& t = report.token_forcing.back();
    fmt::print("{:<6} probes {:5}  detected {:4}/{:<4}  DR {:.3f}\n", to_string(v), t.probes, t.detected_count(),
               report.known_responses.size(), t.detection_rate());
    summary[to_string(v)] = t.detection_rate();
  }
  fmt::print("overall detection rate {:.3f}\n", report.overall_detection_rate());
  s.write_text(s.path("stealth_tf_" + fs::path(suspect).stem().string() + ".json"),
               report.to_json(s.world().vocab).dump(2) + "\n");
  s.finish(summary);
  return exit_ok;
}

std::vector<MergePlan> plans_from_flag(const std::string& strategies, double density, double dare_p,
                                       std::uint64_t seed) {
  std::vector<MergePlan> plans;
  for (const auto& name : split_csv(strategies)) {
    MergePlan p;
    p.density = density;
    p.dare_p = dare_p;
    p.seed = seed;
    std::string base = name;
    if (base.rfind("dare-", 0) == 0) {
      p.dare = true;
      base = base.substr(5);
    }
    if (base == "task") p.strategy = MergeStrategy::task;
    else if (base == "ties") p.strategy = MergeStrategy::ties;
    else fail(ErrorKind::invalid_argument, "unknown merge strategy '" + name + "' (task, ties, dare-task, dare-ties)");
    plans.push_back(p);
  }
  return plans;
}

std::string gnuplot_script(const std::string& csv, const std::vector<std::string>& series, const std::string& xlabel,
                           int xcol, int ycol) {
  std::string out = "set datafile separator ','\nset key outside\nset xlabel '" + xlabel + "'\nset ylabel 'FSR'\n";
  out += "set yrange [0:1.05]\nplot ";
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (i) out += ", ";
    out += fmt::format("'< grep ^{},' \"{}\"' using {}:{} with linespoints title '{}'", series[i], csv, xcol, ycol,
                       series[i]);
  }
  return out + "\n";
}

int cmd_merge_sweep(Session& s, const std::string& strategies, const std::string& ratios, double density, double dare_p,
                    const VerifyFlags& f, bool plot) {
  VerifyConfig vc = s.config.verify;
  apply_calibration(s, vc, f.calibration);
  const auto base = s.load_model(s.path("base.ckpt"));
  const auto fm = materialize(base, s.load_lora(s.path("fingerprint.adapter")));
  const auto donor = s.load_model(s.path("donor.ckpt"));
  const auto fp = s.load_fingerprints(s.path("fingerprints.jsonl"));
  const auto plans = plans_from_flag(strategies, density, dare_p, derive_seed({s.config.root_seed, 14}));
  const auto result = merge_sweep(base, fm, donor, s.world().vocab, plans,
                                  ratios.empty() ? default_ratios() : parse_list<double>(ratios), fp, vc);
  const auto p = s.path("merge_sweep.csv");
  s.write_text(p, result.to_csv());
  fmt::print("{:<10} {:>5} {:>8} {:>9} {:>6}\n", "strategy", "ratio", "FSR_prb", "FSR_rouge", "FSR");
  for (const auto& r : result.rows)
    fmt::print("{:<10} {:>5.2f} {:>8} {:>9.3f} {:>6.3f}\n", r.strategy, r.ratio,
               r.fsr_prb ? fmt::format("{:.3f}", *r.fsr_prb) : std::string("-"), r.fsr_rouge, r.fsr);
  if (plot) {
    std::vector<std::string> labels;
    for (const auto& pl : plans) labels.push_back(pl.label());
    s.write_text(s.path("merge_sweep.gp"), gnuplot_script(p, labels, "fingerprint weight", 2, 5));
  }
  s.finish({{"rows", result.rows.size()}});
  return exit_ok;
}

int cmd_incremental_ft(Session& s, const std::string& checkpoints, double lr, bool adapter_only, const VerifyFlags& f,
                       bool plot) {
  VerifyConfig vc = s.config.verify;
  apply_calibration(s, vc, f.calibration);
  const auto base = s.load_model(s.path("base.ckpt"));
  const auto fm = materialize(base, s.load_lora(s.path("fingerprint.adapter")));
  const auto fp = s.load_fingerprints(s.path("fingerprints.jsonl"));
  IncrementalFtConfig ic;
  if (!checkpoints.empty()) ic.checkpoints = parse_list<std::size_t>(checkpoints);
  ic.lr = lr;
  ic.adapter_only = adapter_only;
  ic.seed = derive_seed({s.config.root_seed, 15});
  const auto curve = incremental_ft(fm, s.world().vocab, split_downstream(s.world().world).incremental, fp, vc, ic);
  const auto p = s.path("incremental_ft.csv");
  s.write_text(p, curve.to_csv());
  fmt::print("{:>6} {:>8} {:>9} {:>6} {:>12}\n", "steps", "FSR_prb", "FSR_rouge", "FSR", "mean P");
  for (const auto& pt : curve.points)
    fmt::print("{:>6} {:>8} {:>9.3f} {:>6.3f} {:>12.3e}\n", pt.step,
               pt.fsr_prb ? fmt::format("{:.3f}", *pt.fsr_prb) : std::string("-"), pt.fsr_rouge, pt.fsr,
               pt.mean_fp_probability);
  if (plot) s.write_text(s.path("incremental_ft.gp"),
                         "set datafile separator ','\nset xlabel 'steps'\nset ylabel 'FSR'\nset yrange [0:1.05]\n"
                         "plot '" + p + "' every ::1 using 1:4 with linespoints title 'FSR'\n");
  s.record_seeds({{"incremental_ft", ic.seed}});
  s.finish({{"points", curve.points.size()}});
  return exit_ok;
}

int cmd_ablation_selection(Session& s, std::size_t seeds, const std::string& pool_flag) {
  const auto base = s.load_model(s.path("base.ckpt"));
  const auto result = selection_ablation(s.config, s.world(), base, pool_from_flag(s, pool_flag), seeds);
  s.write_text(s.path("ablation_selection.csv"), result.to_csv());
  for (const auto& r : result.rows)
    fmt::print("seed {:>20}  entropy {:.4f}  random {:.4f}\n", r.seed, r.entropy_mean_probability, r.random_mean_probability);
  fmt::print("entropy selection higher on every seed: {}\n", result.entropy_wins_everywhere() ? "yes" : "no");
  s.finish({{"entropy_wins_everywhere", result.entropy_wins_everywhere()}});
  return exit_ok;
}

int cmd_ablation_key_size(Session& s, const std::string& grid, std::size_t epochs, const std::string& pool_flag) {
  const auto base = s.load_model(s.path("base.ckpt"));
  auto sizes = parse_list<std::size_t>(grid);
  const auto pool = pool_from_flag(s, pool_flag);
  const auto build = build_candidates(ModelView(base), s.world().vocab, pool, s.config.candidates);
  const auto result = key_size_ablation(s.config, s.world(), base, build.records, sizes, epochs);
  s.write_text(s.path("ablation_keysize.csv"), result.to_csv());
  fmt::print("{:>5} {:>6} {:>12} {:>10} {:>9}\n", "N", "steps", "mean P", "ret. PPL", "penalty");
  for (const auto& r : result.rows)
    fmt::print("{:>5} {:>6} {:>12.3e} {:>10.4f} {:>8.2f}%\n", r.n, r.steps, r.mean_probability, r.perplexity,
               100.0 * r.penalty);
  s.finish({{"rows", result.rows.size()}, {"epochs", epochs}});
  return exit_ok;
}

int cmd_serve(Session& s, const std::string& suspect, const std::string& adapter, const std::string& host, int port) {
  auto m = s.resolve_model(suspect, adapter);
  ModelServer server(ModelView(m.weights, m.adapter ? &*m.adapter : nullptr), s.world().vocab);
  fmt::print("serving {} on http://{}:{}/v1/chat/completions\n", suspect, host, port);
  std::fflush(stdout);
  server.run(host, port);
  return exit_ok;
}

int cmd_check_manifest(const std::string& path) {
  const auto m = load_manifest(path);
  const auto stale = stale_outputs(m);
  for (const auto& p : stale) fmt::print("hash mismatch or missing: {}\n", p);
  fmt::print("{}: {} outputs, {} stale\n", path, m.outputs.size(), stale.size());
  return stale.empty() ? exit_ok : exit_schema;
}

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::invalid_argument:
    case ErrorKind::out_of_range: return exit_usage;
    case ErrorKind::io: return exit_missing_artifact;
    case ErrorKind::schema: return exit_schema;
    default: return exit_runtime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"forgetmark: key-value fingerprinting of language models via targeted unlearning"};
  app.footer(exit_code_help);
  app.require_subcommand(1);
  Globals g;
  app.add_option("--run", g.run_dir, "Run directory holding artifacts and manifests")->capture_default_str();
  app.add_option("--config", g.config_file, "Key-value config file (key = value per line)");
  app.add_option("--set", g.overrides, "Config override key=value; wins over the config file")->take_all();
  app.add_option("--threads", g.threads, "Worker threads for independent evaluations")->capture_default_str();
  app.add_flag("-v,--verbose", g.verbose, "Debug logging");

  std::vector<std::string> args(argv, argv + argc);
  std::function<int()> action;
  auto session = [&](const std::string& name) { return Session(g, name, args); };

  auto* gen = app.add_subcommand("gen-data", "Write the toy world corpora and vocabulary");
  gen->callback([&] { action = [&] { auto s = session("gen-data"); return cmd_gen_data(s); }; });

  std::string role = "target", trigger(default_trigger), response(default_fixed_response);
  auto* tb = app.add_subcommand("train-base", "Train the target LM, the alternate LM, the donor or the backdoor control");
  tb->add_option("--role", role, "target | alt | donor | backdoor")->capture_default_str();
  tb->add_option("--trigger", trigger, "Backdoor trigger token")->capture_default_str();
  tb->add_option("--response", response, "Backdoor fixed response")->capture_default_str();
  tb->callback([&] { action = [&] { auto s = session("train-base-" + role); return cmd_train_base(s, role, trigger, response); }; });

  std::string source = "template", key_file;
  std::size_t key_count = 500;
  EndpointConfig endpoint;
  auto* kg = app.add_subcommand("keygen", "Build the candidate key pool");
  kg->add_option("--source", source, "template | file | endpoint")->capture_default_str();
  kg->add_option("--count", key_count, "Pool size K")->capture_default_str();
  kg->add_option("--file", key_file, "Key file for the file source (one key per line)");
  kg->add_option("--url", endpoint.base_url, "Assistant base URL")->capture_default_str();
  kg->add_option("--model", endpoint.model, "Assistant model name")->capture_default_str();
  kg->add_option("--token-env", endpoint.token_env, "Environment variable holding the bearer token");
  kg->add_option("--retries", endpoint.max_retries, "Retries on transient failures")->capture_default_str();
  kg->add_option("--timeout", endpoint.timeout_seconds, "Request timeout in seconds")->capture_default_str();
  kg->callback([&] { action = [&] { auto s = session("keygen"); return cmd_keygen(s, source, key_count, key_file, endpoint); }; });

  std::string pool_flag;
  std::optional<std::size_t> m_flag, n_flag;
  auto* co = app.add_subcommand("construct", "Sample traces, score keys and select the fingerprint set");
  co->add_option("--pool", pool_flag, "Keys file, or K<count> for a fresh template pool (default: run keys.jsonl)");
  co->add_option("--m", m_flag, "Samples per key (M)");
  co->add_option("--n", n_flag, "Fingerprint set size (N)");
  co->callback([&] {
    action = [&] {
      if (m_flag) g.overrides.push_back("construct.m=" + std::to_string(*m_flag));
      if (n_flag) g.overrides.push_back("construct.n=" + std::to_string(*n_flag));
      auto s = session("construct");
      return cmd_construct(s, pool_flag);
    };
  });

  auto* un = app.add_subcommand("unlearn", "Embed the fingerprint set into a LoRA adapter");
  un->callback([&] { action = [&] { auto s = session("unlearn"); return cmd_unlearn(s); }; });

  VerifyFlags vf;
  std::optional<double> tau_prb, tau_rg, threshold;
  std::string mode;
  auto add_verify_flags = [&](CLI::App* sub) {
    sub->add_option("--calibration", vf.calibration, "calibration.json whose thresholds replace the configured ones");
    sub->add_option("--tau-prb", tau_prb, "Probability threshold");
    sub->add_option("--tau-rg", tau_rg, "ROUGE-L threshold");
    sub->add_option("--mode", mode, "gray | black | both");
  };
  auto push_verify_overrides = [&] {
    if (tau_prb) g.overrides.push_back(fmt::format("verify.tau_prb={}", *tau_prb));
    if (tau_rg) g.overrides.push_back(fmt::format("verify.tau_rg={}", *tau_rg));
    if (threshold) g.overrides.push_back(fmt::format("verify.threshold={}", *threshold));
    if (!mode.empty()) g.overrides.push_back("verify.mode=" + mode);
  };
  auto* ve = app.add_subcommand("verify", "Probe a suspect and compute FSR");
  ve->add_option("--suspect", vf.suspect,
                 "clean_base | fingerprinted | alt | donor | backdoor | merged | <checkpoint path>")->capture_default_str();
  ve->add_option("--adapter", vf.adapter, "Adapter applied on top of the suspect weights");
  ve->add_option("--endpoint", vf.endpoint_url, "Probe a remote chat endpoint instead of local weights");
  ve->add_option("--endpoint-model", vf.endpoint_model, "Model name sent to the endpoint")->capture_default_str();
  ve->add_option("--token-env", vf.token_env, "Environment variable holding the endpoint bearer token");
  ve->add_flag("--endpoint-logprobs", vf.endpoint_logprobs, "Endpoint answers target_logprob (enables gray mode)");
  ve->add_option("--threshold", threshold, "FSR decision threshold for the exit code");
  ve->add_option("--report", vf.report, "Report path (default: run report_<suspect>.json)");
  add_verify_flags(ve);
  ve->callback([&] {
    action = [&] {
      push_verify_overrides();
      auto s = session("verify");
      return cmd_verify(s, vf);
    };
  });

  std::string controls = "alt,donor";
  double target_fp = 0.05;
  auto* ca = app.add_subcommand("calibrate", "Fit thresholds on negative-control models");
  ca->add_option("--controls", controls, "Comma-separated control models")->capture_default_str();
  ca->add_option("--target-fp", target_fp, "Largest tolerated control FSR")->capture_default_str();
  ca->callback([&] { action = [&] { auto s = session("calibrate"); return cmd_calibrate(s, controls, target_fp); }; });

  auto* st = app.add_subcommand("stealth", "Stealth audits");
  st->require_subcommand(1);
  std::string estimators = "clean_base,alt";
  auto* sp = st->add_subcommand("ppl", "Key perplexity under estimator models");
  sp->add_option("--estimators", estimators, "Comma-separated estimator models")->capture_default_str();
  sp->callback([&] { action = [&] { auto s = session("stealth-ppl"); return cmd_stealth_ppl(s, estimators); }; });
  std::string tf_suspect = "fingerprinted", variants = "all", known = "fingerprints";
  std::size_t probe_limit = 0, tf_max_tokens = 16;
  auto* stf = st->add_subcommand("tf", "Token Forcing scan");
  stf->add_option("--suspect", tf_suspect, "Model to scan")->capture_default_str();
  stf->add_option("--variant", variants, "all or a list of TF-F, TF-BF, TF-TF")->capture_default_str();
  stf->add_option("--known", known, "fingerprints | backdoor | <file of responses>")->capture_default_str();
  stf->add_option("--probe-limit", probe_limit, "Random probe subsample size (0 = full vocabulary)")->capture_default_str();
  stf->add_option("--max-tokens", tf_max_tokens, "Generated tokens per probe")->capture_default_str();
  stf->callback([&] {
    action = [&] {
      auto s = session("stealth-tf");
      return cmd_stealth_tf(s, tf_suspect, variants, known, probe_limit, tf_max_tokens);
    };
  });

  std::string strategies = "task,ties", ratios;
  double density = 0.2, dare_p = 0.9;
  bool plot = false;
  auto* ms = app.add_subcommand("merge-sweep", "Merge the fingerprinted model with the donor across mixing ratios");
  ms->add_option("--strategies", strategies, "task, ties, dare-task, dare-ties")->capture_default_str();
  ms->add_option("--ratios", ratios, "Fingerprint weights (default 0.9 .. 0.1)");
  ms->add_option("--density", density, "TIES density")->capture_default_str();
  ms->add_option("--dare-p", dare_p, "DARE drop probability")->capture_default_str();
  ms->add_flag("--plot", plot, "Also write a gnuplot script");
  add_verify_flags(ms);
  ms->callback([&] {
    action = [&] {
      push_verify_overrides();
      auto s = session("merge-sweep");
      return cmd_merge_sweep(s, strategies, ratios, density, dare_p, vf, plot);
    };
  });

  std::string ft_checkpoints;
  double ft_lr = 1e-4;
  bool adapter_only = false;
  auto* ft = app.add_subcommand("incremental-ft", "Fine-tune the fingerprinted model and track FSR");
  ft->add_option("--checkpoints", ft_checkpoints, "Ascending step list (default 0,50,100,200,400)");
  ft->add_option("--lr", ft_lr, "Learning rate")->capture_default_str();
  ft->add_flag("--adapter-only", adapter_only, "Train a fresh adapter instead of every parameter");
  ft->add_flag("--plot", plot, "Also write a gnuplot script");
  add_verify_flags(ft);
  ft->callback([&] {
    action = [&] {
      push_verify_overrides();
      auto s = session("incremental-ft");
      return cmd_incremental_ft(s, ft_checkpoints, ft_lr, adapter_only, vf, plot);
    };
  });

  auto* ab = app.add_subcommand("ablation", "Experiment presets");
  ab->require_subcommand(1);
  std::size_t ab_seeds = 5, epochs = 24;
  std::string grid = "25,50,100,200";
  auto* abs = ab->add_subcommand("selection", "Entropy-driven against random key selection");
  abs->add_option("--seeds", ab_seeds, "Number of seeds")->capture_default_str();
  abs->add_option("--pool", pool_flag, "Keys file or K<count>");
  abs->callback([&] { action = [&] { auto s = session("ablation-selection"); return cmd_ablation_selection(s, ab_seeds, pool_flag); }; });
  auto* abk = ab->add_subcommand("key-size", "Effect of the fingerprint set size N");
  abk->add_option("--grid", grid, "Comma-separated N values")->capture_default_str();
  abk->add_option("--epochs", epochs, "Passes over each forgetting set")->capture_default_str();
  abk->add_option("--pool", pool_flag, "Keys file or K<count>");
  abk->callback([&] { action = [&] { auto s = session("ablation-key-size"); return cmd_ablation_key_size(s, grid, epochs, pool_flag); }; });

  std::string serve_suspect = "fingerprinted", serve_adapter, host = "127.0.0.1";
  int port = 8080;
  auto* sv = app.add_subcommand("serve", "Expose a local model as a chat-completion endpoint");
  sv->add_option("--suspect", serve_suspect, "Model to serve")->capture_default_str();
  sv->add_option("--adapter", serve_adapter, "Adapter applied on top");
  sv->add_option("--host", host, "Bind address")->capture_default_str();
  sv->add_option("--port", port, "Port")->capture_default_str();
  sv->callback([&] { action = [&] { auto s = session("serve"); return cmd_serve(s, serve_suspect, serve_adapter, host, port); }; });

  std::string manifest_path;
  auto* cm = app.add_subcommand("check-manifest", "Re-hash the outputs recorded in a manifest");
  cm->add_option("manifest", manifest_path, "Manifest JSON")->required();
  cm->callback([&] { action = [&] { return cmd_check_manifest(manifest_path); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? exit_ok : exit_usage;
  }
  spdlog::set_level(g.verbose ? spdlog::level::debug : spdlog::level::info);
  try {
    return action();
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return exit_code_for(e);
  } catch (const nlohmann::json::exception& e) {
    spdlog::error("malformed JSON: {}", e.what());
    return exit_schema;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return exit_runtime;
  }
}

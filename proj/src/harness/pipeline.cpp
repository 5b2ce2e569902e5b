#include "ibr/harness/pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <future>
#include <map>
#include <ostream>
#include <sstream>

#include "ibr/nn/checkpoint.hpp"

#ifndef IBR_BUILD_ID
#define IBR_BUILD_ID "dev"
#endif

namespace ibr {

using nlohmann::json;
namespace fs = std::filesystem;

std::string build_id() { return IBR_BUILD_ID; }

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::config_error: return 2;
    case ErrorCode::bad_magic:
    case ErrorCode::truncated_file:
    case ErrorCode::count_mismatch:
    case ErrorCode::record_size_mismatch:
    case ErrorCode::label_out_of_range:
    case ErrorCode::empty_dataset:
    case ErrorCode::io_error: return 3;
    default: return 4;
  }
}

std::optional<StageManifest> read_manifest(const fs::path& out_dir, const std::string& stage) {
  const fs::path p = out_dir / "stages" / (stage + ".json");
  if (!fs::exists(p)) return std::nullopt;
  try {
    const json j = json::parse(read_text(p));
    if (j.at("status") != "complete") return std::nullopt;
    return StageManifest{j.at("stage"), j.at("hash"), j.at("seconds"), j.at("outputs"), j.at("result")};
  } catch (const json::exception&) {
    return std::nullopt;  // unreadable manifests just mean the stage reruns
  }
}

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  if (cfg.dataset == DatasetId::synthetic) {
    // One draw shares the class prototypes between the splits.
    SyntheticSpec s = cfg.synthetic;
    s.per_class = cfg.synthetic.per_class + cfg.synthetic_test_per_class;
    const Dataset<float> all = make_synthetic(s, cfg.master_seed);
    const Index n_train = cfg.synthetic.per_class * cfg.synthetic.classes;
    d.train = all.slice(0, n_train);
    d.test = all.slice(n_train, all.size() - n_train);
    if (d.test.size() == 0) throw Error(ErrorCode::empty_dataset, "synthetic test split is empty");
  } else {
    const bool mnist = cfg.dataset == DatasetId::mnist;
    std::string dir = cfg.data_dir;
    if (dir.empty())
      if (const char* env = std::getenv(mnist ? "IBR_MNIST_DIR" : "IBR_CIFAR10_DIR")) dir = env;
    if (dir.empty())
      throw Error(ErrorCode::io_error,
                  std::string("no data directory: set data_dir or ") + (mnist ? "IBR_MNIST_DIR" : "IBR_CIFAR10_DIR"));
    d.train = mnist ? load_mnist_dir(dir, "train") : load_cifar10_dir(dir, "train");
    d.test = mnist ? load_mnist_dir(dir, "test") : load_cifar10_dir(dir, "test");
  }
  if (cfg.train_limit) d.train = d.train.head(*cfg.train_limit);
  return d;
}

namespace {

// Data problems keep their own exit code even when they surface inside a stage.
struct DataLoadError : Error {
  explicit DataLoadError(const Error& e) : Error(e) {}
};

json data_key(const ExperimentConfig& c) {
  json j = to_json(c);
  json k{{"dataset", j["dataset"]}, {"train_limit", j["train"]["train_limit"]}, {"precision", j["precision"]}};
  if (j.contains("synthetic")) k["synthetic"] = j["synthetic"], k["seed"] = c.master_seed;
  return k;
}

std::string seconds_text(double s) {
  std::ostringstream o;
  o.precision(1);
  o << std::fixed << s << "s";
  return o.str();
}

template <typename S>
class Pipeline {
 public:
  Pipeline(const ExperimentConfig& cfg, const RunOptions& opt)
      : cfg_(cfg), opt_(opt), out_(cfg.output_dir), hash_(config_hash(cfg)) {}

  ExperimentReport run() {
    fs::create_directories(out_ / "stages");
    json resolved = to_json(cfg_);
    resolved["config_hash"] = hash_;
    write_text(out_ / "config.json", resolved.dump(2) + "\n");

    if (opt_.train || opt_.attack || opt_.probe)
      for (const ModelKey& m : cfg_.models) ensure_trained(m);
    if (opt_.attack)
      for (const ModelKey& m : cfg_.models) {
        for (const AttackSpec& a : cfg_.attacks) attack_stage(m, a);
        if (cfg_.tabacof.enabled) tabacof_stage(m);
      }
    if (opt_.probe && !cfg_.train.probe_layers.empty())
      for (const ModelKey& m : cfg_.models) probe_stage(m);

    ExperimentReport report;
    if (!opt_.analyze) return report;
    report = analyze();
    write_report_files(report, out_);
    log("wrote report for config " + hash_);
    if (opt_.plot && report.has_attacks && !report.results.norms.empty()) emit_plots(report, out_);
    return report;
  }

 private:
  void log(const std::string& line) {
    if (opt_.log) *opt_.log << line << std::endl;
  }

  const ExperimentData& raw_data() {
    if (!data_) {
      try {
        data_ = load_experiment_data(cfg_);
      } catch (const Error& e) {
        throw DataLoadError(e);
      }
      log("data: " + std::to_string(data_->train.size()) + " train, " + std::to_string(data_->test.size()) + " test");
    }
    return *data_;
  }
  const Dataset<S>& train_set() {
    if (!train_) train_ = raw_data().train.template cast<S>();
    return *train_;
  }
  const Dataset<S>& test_set() {
    if (!test_) test_ = raw_data().test.template cast<S>();
    return *test_;
  }
  Dataset<S> attack_samples() {
    const Dataset<S>& t = test_set();
    return cfg_.sample_limit ? t.head(*cfg_.sample_limit) : t;
  }

  bool outputs_exist(const StageManifest& m) const {
    for (const std::string& o : m.outputs)
      if (!fs::exists(out_ / o)) return false;
    return true;
  }

  std::optional<StageManifest> current(const std::string& name, const std::string& hash) const {
    std::optional<StageManifest> m = read_manifest(out_, name);
    if (m && m->hash == hash && outputs_exist(*m)) return m;
    return std::nullopt;
  }

  // Runs body(outputs) unless a matching manifest exists; returns the stage result.
  template <typename F>
  json stage(const std::string& name, const std::string& hash, F&& body) {
    stage_hashes_[name] = hash;
    if (auto m = current(name, hash)) {
      log("[" + name + "] up to date");
      return m->result;
    }
    log("[" + name + "] running");
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> outputs;
    json result;
    try {
      result = body(outputs);
    } catch (const DataLoadError&) {
      throw;
    } catch (const Error& e) {
      throw Error(ErrorCode::stage_failure, name + ": " + e.what());
    } catch (const std::exception& e) {
      throw Error(ErrorCode::stage_failure, name + ": " + e.what());
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json manifest{{"stage", name}, {"hash", hash},     {"status", "complete"},
                  {"seconds", seconds}, {"outputs", outputs}, {"result", result}};
    write_text(out_ / "stages" / (name + ".json"), manifest.dump(2) + "\n");
    log("[" + name + "] done in " + seconds_text(seconds));
    return result;
  }

  // Result of a stage that must already be complete.
  json required(const std::string& name, const std::string& hash) {
    stage_hashes_[name] = hash;
    auto m = current(name, hash);
    if (!m) throw Error(ErrorCode::stage_failure, "stage " + name + " is missing or stale; run it first");
    return m->result;
  }

  // ---- training ----

  std::string train_hash(const ModelKey& m) {
    const std::string name = model_name(m);
    if (auto it = train_hashes_.find(name); it != train_hashes_.end()) return it->second;
    json j{{"data", data_key(cfg_)},
           {"epochs", cfg_.train.epochs},
           {"batch_size", cfg_.train.batch_size},
           {"learning_rate", cfg_.train.learning_rate},
           {"seed", cfg_.train.seed},
           {"model", name}};
    if (m.objective != Objective::Base) {
      j["latent_channels"] = m.objective == Objective::SVBI ? cfg_.latent_svbi : cfg_.latent_dvib;
      if (cfg_.beta_search.enabled) {
        j["beta_search"] = to_json(cfg_)["beta_search"];
        j["reference"] = train_hash({m.tier, Objective::Base});
      } else {
        j["beta"] = cfg_.beta_for(m.objective);
      }
    }
    if (m.objective == Objective::SVBI) j["teacher"] = train_hash({m.tier, Objective::Base});
    return train_hashes_[name] = hash_json(j);
  }

  NetworkSpec network_spec(const ModelKey& m, double beta) {
    const Dataset<float>& d = raw_data().train;
    const ChannelStats st = channel_stats(d);
    NetworkSpec spec;
    spec.tier = m.tier;
    spec.objective = m.objective;
    spec.channels = d.channels();
    spec.height = d.height();
    spec.width = d.width();
    spec.num_classes = d.num_classes;
    spec.beta = beta;
    spec.latent_channels = m.objective == Objective::SVBI ? cfg_.latent_svbi : cfg_.latent_dvib;
    spec.input_mean = st.mean;
    spec.input_std = st.std;
    return spec;
  }

  const Model<S>& model(const ModelKey& m) {
    const std::string name = model_name(m);
    auto it = models_.find(name);
    if (it == models_.end()) it = models_.emplace(name, load_model<S>(out_ / "models" / (name + ".ibab"))).first;
    return it->second;
  }

  void ensure_trained(const ModelKey& m) {
    const std::string name = "train_" + model_name(m);
    stage(name, train_hash(m), [&](std::vector<std::string>& outputs) { return train_body(m, outputs); });
  }

  json beta_search_for(const ModelKey& m, const Model<S>* teacher) {
    const Dataset<S>& all = train_set();
    const Index n_val = std::min<Index>(5000, all.size() / 10);
    if (n_val < 1) throw Error(ErrorCode::empty_dataset, "training set too small for a validation split");
    const Dataset<S> val = all.slice(all.size() - n_val, n_val);
    const Dataset<S> fit = all.head(std::min(cfg_.beta_search.train_limit, all.size() - n_val));
    // Candidates and the Base reference share the reduced budget so their accuracies compare.
    const auto short_run = [&](const ModelKey& key, double beta) {
      TrainConfig tc = cfg_.train;
      tc.objective = key.objective;
      tc.beta = beta;
      tc.epochs = cfg_.beta_search.epochs;
      const Model<S>* t = key.objective == Objective::SVBI ? teacher : nullptr;
      TrainResult<S> r =
          train(build_model<S>(network_spec(key, beta), tc.seed), tc, fit, static_cast<const Dataset<S>*>(nullptr), t);
      return evaluate(r.model, val, beta, t).accuracy;
    };
    const double reference = short_run({m.tier, Objective::Base}, 0.0);
    log("  reference accuracy " + format_real(reference));
    const auto accuracy_at = [&](double beta) {
      const double acc = short_run(m, beta);
      log("  beta " + format_real(beta) + ": validation accuracy " + format_real(acc));
      return acc;
    };
    const BetaSearchResult r = beta_search(accuracy_at, reference, cfg_.beta_search.search);
    json probes = json::array();
    for (const BetaProbe& p : r.probes)
      probes.push_back({{"beta", p.beta}, {"accuracy", p.accuracy}, {"acceptable", p.acceptable}});
    return {{"beta", r.beta}, {"found", r.found}, {"reference_accuracy", reference}, {"probes", probes}};
  }

  json train_body(const ModelKey& m, std::vector<std::string>& outputs) {
    const std::string name = model_name(m);
    const Model<S>* teacher = m.objective == Objective::SVBI ? &model({m.tier, Objective::Base}) : nullptr;
    json result;
    double beta = cfg_.beta_for(m.objective);
    if (cfg_.beta_search.enabled && m.objective != Objective::Base) {
      result["beta_search"] = beta_search_for(m, teacher);
      beta = result["beta_search"]["beta"].get<double>();
    }
    TrainConfig tc = cfg_.train;
    tc.objective = m.objective;
    tc.beta = beta;
    const auto on_epoch = [&](const MetricsRow& row) {
      log("  epoch " + std::to_string(row.epoch) + " " + row.split + ": loss " + format_real(row.loss_total) +
          ", acc " + format_real(row.acc_top1) + ", bpp " + format_real(row.bpp));
    };
    TrainResult<S> r = train(build_model<S>(network_spec(m, beta), tc.seed), tc, train_set(), &test_set(), teacher,
                             on_epoch);
    const std::string model_rel = "models/" + name + ".ibab", metrics_rel = "metrics/" + name + ".csv";
    fs::create_directories(out_ / "models");
    save_model(r.model, out_ / model_rel);
    write_text(out_ / metrics_rel, "# config_hash=" + train_hash(m) + "\n" + r.log.to_csv());
    outputs = {model_rel, metrics_rel};

    const EvalStats st = evaluate(r.model, test_set(), beta, teacher);
    result["beta"] = beta;
    result["test_acc"] = 100.0 * st.accuracy;
    result["bpp"] = st.bpp;
    result["params"] = r.model.params.count();
    result["encoder_params"] = encoder_parameter_count(r.model);
    models_.insert_or_assign(name, std::move(r.model));
    return result;
  }

  // ---- attacks ----

  using ChunkFn = std::function<std::vector<AdvResult<S>>(const Dataset<S>&, Index first)>;

  // Attacks `samples` in fixed chunks, resuming from a partial file, and writes samples/<file>.csv.
  json attack_body(const std::string& stage_name, const std::string& hash, const ModelKey& m,
                   const std::string& attack_label, const Dataset<S>& samples, const std::vector<Index>& ids,
                   const ChunkFn& fn, std::vector<std::string>& outputs) {
    const std::string file = model_name(m) + "_" + attack_label;
    const fs::path partial = out_ / "stages" / (stage_name + ".partial.csv");
    const Index chunk = cfg_.attack_chunk, n = samples.size();
    std::vector<SampleRecord> records;
    if (fs::exists(partial) && read_text(partial).rfind("# config_hash=" + hash + "\n", 0) == 0) {
      records = read_samples_csv(partial, std::string(to_string(m.tier)), std::string(to_string(m.objective)),
                                 attack_label);
      records.resize(std::size_t(std::min<Index>(Index(records.size()) / chunk * chunk, n)));
      if (!records.empty()) log("  resuming at sample " + std::to_string(records.size()));
    }
    const auto t0 = std::chrono::steady_clock::now();
    for (Index first = Index(records.size()); first < n;) {
      std::vector<std::pair<Index, std::future<std::vector<AdvResult<S>>>>> jobs;
      for (int w = 0; w < cfg_.workers && first < n; ++w, first += chunk) {
        const Index count = std::min(chunk, n - first);
        jobs.emplace_back(first, std::async(cfg_.workers > 1 ? std::launch::async : std::launch::deferred,
                                            [&fn, &samples, first, count] { return fn(samples.slice(first, count), first); }));
      }
      for (auto& [start, job] : jobs) {
        const std::vector<AdvResult<S>> results = job.get();
        for (std::size_t i = 0; i < results.size(); ++i) {
          const AdvResult<S>& r = results[i];
          const Index local = start + Index(i);
          if (r.error && *r.error != ErrorCode::no_successful_iterate)
            throw Error(*r.error, "sample " + std::to_string(ids[std::size_t(local)]));
          SampleRecord rec{std::string(to_string(m.tier)),
                           std::string(to_string(m.objective)),
                           attack_label,
                           ids[std::size_t(local)],
                           samples.labels[std::size_t(local)],
                           r.target,
                           r.pred_before,
                           r.pred_after,
                           r.success,
                           {r.l0_frac, r.l2, r.linf},
                           r.iterations_used};
          records.push_back(rec);
          if (local < cfg_.png_pairs) {
            const fs::path png = out_ / "png" / (file + "_" + std::to_string(rec.id) + ".png");
            write_png_pair(samples.images.rows(local, 1).template cast<float>(), r.x_adv.template cast<float>(), png,
                           hash);
          }
        }
      }
      write_samples_csv(records, hash, partial);
      const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log("  " + std::to_string(records.size()) + "/" + std::to_string(n) + " samples, " + seconds_text(el));
    }
    const std::string rel = "samples/" + file + ".csv";
    write_samples_csv(records, hash, out_ / rel);
    fs::remove(partial);
    outputs = {rel};
    for (Index i = 0; i < std::min(cfg_.png_pairs, n); ++i)
      outputs.push_back("png/" + file + "_" + std::to_string(ids[std::size_t(i)]) + ".png");
    Index successes = 0;
    for (const SampleRecord& r : records) successes += r.success;
    return {{"samples", records.size()}, {"successes", successes}};
  }

  std::string attack_hash(const ModelKey& m, const AttackSpec& a) {
    json aj = attack_to_json(a.config);
    aj["label"] = a.label;
    const json j{{"model", train_hash(m)},
                 {"attack", aj},
                 {"sample_limit", cfg_.sample_limit ? json(*cfg_.sample_limit) : json(nullptr)},
                 {"master_seed", cfg_.master_seed},
                 {"attack_chunk", cfg_.attack_chunk},
                 {"png_pairs", cfg_.png_pairs}};
    return hash_json(j);
  }

  static std::string attack_stage_name(const ModelKey& m, const std::string& label) {
    return "attack_" + model_name(m) + "_" + label;
  }

  void attack_stage(const ModelKey& m, const AttackSpec& a) {
    const std::string name = attack_stage_name(m, a.label), hash = attack_hash(m, a);
    stage(name, hash, [&](std::vector<std::string>& outputs) {
      const Dataset<S> samples = attack_samples();
      std::vector<Index> ids(std::size_t(samples.size()));
      for (Index i = 0; i < samples.size(); ++i) ids[std::size_t(i)] = i;
      const Classifier<S> clf = make_classifier(model(m));
      AttackConfig ac = a.config;
      ac.seed = cfg_.master_seed;
      const ChunkFn fn = [&](const Dataset<S>& chunk, Index) { return run_attack(clf, chunk.images, chunk.labels, ac); };
      return attack_body(name, hash, m, a.label, samples, ids, fn, outputs);
    });
  }

  Index tabacof_limit() const {
    if (cfg_.tabacof.sample_limit) return *cfg_.tabacof.sample_limit;
    return cfg_.sample_limit ? *cfg_.sample_limit : std::numeric_limits<Index>::max();
  }

  std::string tabacof_hash(const ModelKey& m) {
    AttackConfig ac = cfg_.tabacof.config;
    const json j{{"model", train_hash(m)},
                 {"attack", attack_to_json(ac)},
                 {"target", cfg_.tabacof.target},
                 {"sample_limit", tabacof_limit()},
                 {"master_seed", cfg_.master_seed},
                 {"attack_chunk", cfg_.attack_chunk},
                 {"png_pairs", cfg_.png_pairs}};
    return hash_json(j);
  }

  // Sources: the non-target samples among the first tabacof_limit test images. Each source is
  // paired with a target-class test image, cycling through them in canonical order.
  void tabacof_stage(const ModelKey& m) {
    const std::string name = "tabacof_" + model_name(m), hash = tabacof_hash(m);
    stage(name, hash, [&](std::vector<std::string>& outputs) {
      const int target = cfg_.tabacof.target;
      const Dataset<S>& test = test_set();
      const Dataset<S> pool = test.head(tabacof_limit());
      std::vector<Index> ids, target_ids;
      for (Index i = 0; i < pool.size(); ++i)
        if (pool.labels[std::size_t(i)] != target) ids.push_back(i);
      for (Index i = 0; i < test.size(); ++i)
        if (test.labels[std::size_t(i)] == target) target_ids.push_back(i);
      if (ids.empty() || target_ids.empty())
        throw Error(ErrorCode::empty_dataset, "no Tabacof sources or no target-class images");
      const Dataset<S> sources = pool.gather(ids);
      const LatentSystem<S> system = make_latent_system(model(m));
      const AttackConfig ac = cfg_.tabacof.config;
      const ChunkFn fn = [&](const Dataset<S>& chunk, Index first) {
        std::vector<Index> pick;
        for (Index i = 0; i < chunk.size(); ++i)
          pick.push_back(target_ids[std::size_t(first + i) % target_ids.size()]);
        return tabacof(system, chunk.images, gather_rows(test.images, pick), std::vector<int>(std::size_t(chunk.size()), target),
                       ac);
      };
      return attack_body(name, hash, m, "TABACOF", sources, ids, fn, outputs);
    });
  }

  // ---- probes ----

  std::string probe_hash(const ModelKey& m) {
    const json j{{"model", train_hash(m)}, {"probe", to_json(cfg_)["probe"]}, {"layers", cfg_.train.probe_layers}};
    return hash_json(j);
  }

  void probe_stage(const ModelKey& m) {
    const std::string name = "probe_" + model_name(m), hash = probe_hash(m);
    stage(name, hash, [&](std::vector<std::string>& outputs) {
      const Dataset<S> tr = train_set().head(cfg_.probe.train_limit), te = test_set().head(cfg_.probe.test_limit);
      json rows = json::array();
      std::string csv = "# config_hash=" + hash + "\nlayer,mse,psnr\n";
      for (Index layer : cfg_.train.probe_layers) {
        const ProbeResult r = train_layer_probe(model(m), layer, tr, te, cfg_.probe.config);
        log("  layer " + std::to_string(layer) + ": mse " + format_real(r.mse) + ", psnr " + format_real(r.psnr));
        rows.push_back({{"layer", layer}, {"mse", r.mse}, {"psnr", r.psnr}});
        csv += std::to_string(layer) + "," + format_real(r.mse) + "," + format_real(r.psnr) + "\n";
      }
      const std::string rel = "probes/" + model_name(m) + ".csv";
      write_text(out_ / rel, csv);
      outputs = {rel};
      return json{{"layers", rows}};
    });
  }

  // ---- analysis ----

  ExperimentReport analyze() {
    ExperimentReport rep;
    rep.config_hash = hash_;
    rep.build_id = build_id();
    rep.dataset = to_json(cfg_)["dataset"];
    rep.precision = cfg_.f64 ? "f64" : "f32";
    rep.master_seed = cfg_.master_seed;
    std::vector<SampleRecord> records;
    for (const ModelKey& m : cfg_.models) {
      const std::string tier(to_string(m.tier)), objective(to_string(m.objective));
      const json t = required("train_" + model_name(m), train_hash(m));
      rep.models.push_back({tier, objective, t.at("beta"), t.at("test_acc"), t.at("bpp"), t.at("params"),
                            t.at("encoder_params")});
      const auto collect = [&](const std::string& stage_name, const std::string& hash, const std::string& label) {
        required(stage_name, hash);
        const std::vector<SampleRecord> r =
            read_samples_csv(out_ / "samples" / (model_name(m) + "_" + label + ".csv"), tier, objective, label);
        records.insert(records.end(), r.begin(), r.end());
      };
      for (const AttackSpec& a : cfg_.attacks) collect(attack_stage_name(m, a.label), attack_hash(m, a), a.label);
      if (cfg_.tabacof.enabled) collect("tabacof_" + model_name(m), tabacof_hash(m), "TABACOF");
      if (!cfg_.train.probe_layers.empty()) {
        const json p = required("probe_" + model_name(m), probe_hash(m));
        for (const json& row : p.at("layers"))
          rep.probes.push_back({tier, objective, row.at("layer"), row.at("mse"), row.at("psnr")});
      }
    }
    rep.has_attacks = !cfg_.attacks.empty() || cfg_.tabacof.enabled;
    if (rep.has_attacks) rep.results = aggregate(std::move(records));
    rep.stage_hashes = stage_hashes_;
    return rep;
  }

  const ExperimentConfig& cfg_;
  RunOptions opt_;
  fs::path out_;
  std::string hash_;
  std::optional<ExperimentData> data_;
  std::optional<Dataset<S>> train_, test_;
  std::map<std::string, Model<S>> models_;
  std::map<std::string, std::string> train_hashes_, stage_hashes_;
};

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  if (cfg.f64) return Pipeline<double>(cfg, options).run();
  return Pipeline<float>(cfg, options).run();
}

std::vector<fs::path> plot_report(const fs::path& dir) { return emit_plots(load_report(dir / "report.json"), dir); }

}  // namespace ibr

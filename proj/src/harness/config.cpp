#include "ibr/harness/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

namespace ibr {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error(ErrorCode::config_error, msg); }

// Reads keys from one JSON object and rejects whatever was not read.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail(where_ + " must be an object");
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      fail(where_ + "." + key + " has the wrong type");
    }
  }

  template <typename T>
  void get(const char* key, std::optional<T>& out) {
    if (!has(key)) return;
    T v{};
    get(key, v);
    out = v;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) fail("unknown key '" + key + "' in " + where_);
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void positive(Index v, const std::string& what) {
  if (v <= 0) fail(what + " must be positive");
}

AttackConfig parse_attack(const json& j, std::string& label, const std::string& where) {
  Reader r(j, where);
  if (!r.has("kind")) fail(where + ".kind is required");
  AttackKind kind;
  try {
    kind = parse_attack_kind(r.raw("kind").get<std::string>());
  } catch (const json::exception&) {
    fail(where + ".kind must be a string");
  }
  AttackConfig a = default_attack_config(kind);
  label = std::string(to_string(kind));
  r.get("label", label);
  r.get("epsilon", a.epsilon);
  r.get("alpha", a.alpha);
  r.get("beta_w", a.beta_w);
  r.get("c", a.c);
  r.get("beta_l1", a.beta_l1);
  r.get("theta", a.theta);
  r.get("gamma", a.gamma);
  r.get("lambda_reg", a.lambda_reg);
  r.get("lambda_sweep", a.lambda_sweep);
  r.get("max_iters", a.max_iters);
  r.get("learning_rate", a.learning_rate);
  r.get("targeted", a.targeted);
  r.get("early_abort", a.early_abort);
  r.finish();
  a.validate();
  return a;
}

}  // namespace

std::string model_name(const ModelKey& key) {
  return std::string(to_string(key.tier)) + "_" + std::string(to_string(key.objective));
}

double ExperimentConfig::beta_for(Objective objective) const {
  switch (objective) {
    case Objective::SVBI: return beta_svbi;
    case Objective::DVIB: return beta_dvib;
    case Objective::Base: return 0;
  }
  return 0;
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  Reader r(j, "config");
  int version = 0;
  r.get("schema_version", version);
  if (version != kConfigSchemaVersion)
    fail("schema_version " + std::to_string(version) + " is not supported (expected " +
         std::to_string(kConfigSchemaVersion) + ")");

  std::string dataset = "synthetic";
  r.get("dataset", dataset);
  if (dataset == "mnist") c.dataset = DatasetId::mnist;
  else if (dataset == "cifar10") c.dataset = DatasetId::cifar10;
  else if (dataset == "synthetic") c.dataset = DatasetId::synthetic;
  else if (dataset == "imagenet64") fail("dataset 'imagenet64' is reserved but not implemented");
  else fail("unknown dataset '" + dataset + "'");
  r.get("data_dir", c.data_dir);

  if (r.has("synthetic")) {
    Reader s(r.raw("synthetic"), "synthetic");
    s.get("classes", c.synthetic.classes);
    s.get("per_class", c.synthetic.per_class);
    s.get("test_per_class", c.synthetic_test_per_class);
    s.get("image_size", c.synthetic.image_size);
    s.get("channels", c.synthetic.channels);
    s.get("noise", c.synthetic.noise);
    s.finish();
    if (c.synthetic.classes < 2) fail("synthetic.classes must be at least 2");
    if (c.synthetic.noise < 0) fail("synthetic.noise must be non-negative");
  }

  auto parse_tiers = [](const json& v) {
    std::vector<Tier> out;
    for (const json& t : v) out.push_back(parse_tier(t.get<std::string>()));
    return out;
  };
  auto parse_objectives = [](const json& v) {
    std::vector<Objective> out;
    for (const json& t : v) out.push_back(parse_objective(t.get<std::string>()));
    return out;
  };
  try {
    if (r.has("models")) {
      if (j.contains("tiers") || j.contains("objectives")) fail("give either models or tiers/objectives, not both");
      for (const json& m : r.raw("models")) {
        Reader mr(m, "models[]");
        std::string tier, objective;
        mr.get("tier", tier);
        mr.get("objective", objective);
        mr.finish();
        c.models.push_back({parse_tier(tier), parse_objective(objective)});
      }
    } else {
      std::vector<Tier> tiers{Tier::D1};
      std::vector<Objective> objectives{Objective::Base};
      if (r.has("tiers")) tiers = parse_tiers(r.raw("tiers"));
      if (r.has("objectives")) objectives = parse_objectives(r.raw("objectives"));
      for (Tier t : tiers)
        for (Objective o : objectives) c.models.push_back({t, o});
    }
  } catch (const json::exception&) {
    fail("tiers, objectives and models must hold strings");
  }
  const auto order = [](const ModelKey& a, const ModelKey& b) {
    return std::pair(int(a.tier), int(a.objective)) < std::pair(int(b.tier), int(b.objective));
  };
  std::sort(c.models.begin(), c.models.end(), order);
  c.models.erase(std::unique(c.models.begin(), c.models.end()), c.models.end());
  if (c.models.empty()) fail("no models configured");
  for (const ModelKey& m : c.models)
    if (m.objective == Objective::SVBI &&
        std::find(c.models.begin(), c.models.end(), ModelKey{m.tier, Objective::Base}) == c.models.end())
      fail(model_name(m) + " needs the Base model of the same tier as its teacher");

  if (r.has("train")) {
    Reader t(r.raw("train"), "train");
    t.get("epochs", c.train.epochs);
    t.get("batch_size", c.train.batch_size);
    t.get("learning_rate", c.train.learning_rate);
    t.get("seed", c.train.seed);
    t.get("train_limit", c.train_limit);
    t.get("probe_layers", c.train.probe_layers);
    t.finish();
  }
  c.train.dataset = dataset;
  c.train.validate();
  if (c.train_limit) positive(*c.train_limit, "train.train_limit");

  if (r.has("beta")) {
    Reader b(r.raw("beta"), "beta");
    b.get("SVBI", c.beta_svbi);
    b.get("DVIB", c.beta_dvib);
    b.finish();
    if (c.beta_svbi < 0 || c.beta_dvib < 0) fail("beta must be non-negative");
  }
  if (r.has("latent_channels")) {
    Reader b(r.raw("latent_channels"), "latent_channels");
    b.get("SVBI", c.latent_svbi);
    b.get("DVIB", c.latent_dvib);
    b.finish();
    if (c.latent_svbi < 1 || c.latent_dvib < 1) fail("latent_channels must be positive");
  }
  if (r.has("beta_search")) {
    Reader b(r.raw("beta_search"), "beta_search");
    c.beta_search.enabled = true;
    b.get("enabled", c.beta_search.enabled);
    b.get("low", c.beta_search.search.low);
    b.get("high", c.beta_search.search.high);
    b.get("steps", c.beta_search.search.steps);
    b.get("tolerance", c.beta_search.search.tolerance);
    b.get("epochs", c.beta_search.epochs);
    b.get("train_limit", c.beta_search.train_limit);
    b.finish();
    const BetaSearchConfig& s = c.beta_search.search;
    if (!(s.low > 0 && s.high > s.low)) fail("beta_search needs 0 < low < high");
    if (s.steps < 1 || s.tolerance < 0) fail("beta_search needs steps >= 1 and tolerance >= 0");
    if (c.beta_search.epochs < 1) fail("beta_search.epochs must be positive");
    if (c.beta_search.enabled)
      for (const ModelKey& m : c.models)
        if (m.objective != Objective::Base &&
            std::find(c.models.begin(), c.models.end(), ModelKey{m.tier, Objective::Base}) == c.models.end())
          fail("beta_search for " + model_name(m) + " needs the Base model of the same tier as reference");
    positive(c.beta_search.train_limit, "beta_search.train_limit");
  }

  if (r.has("attacks")) {
    const json& list = r.raw("attacks");
    if (!list.is_array()) fail("attacks must be an array");
    std::set<std::string> labels;
    for (std::size_t i = 0; i < list.size(); ++i) {
      AttackSpec a;
      a.config = parse_attack(list[i], a.label, "attacks[" + std::to_string(i) + "]");
      if (a.config.kind == AttackKind::TABACOF) fail("TABACOF runs as its own stage; configure it under 'tabacof'");
      if (!labels.insert(a.label).second) fail("duplicate attack label '" + a.label + "'");
      c.attacks.push_back(a);
    }
  }

  if (r.has("tabacof")) {
    Reader t(r.raw("tabacof"), "tabacof");
    c.tabacof.enabled = true;
    t.get("enabled", c.tabacof.enabled);
    t.get("target", c.tabacof.target);
    t.get("sample_limit", c.tabacof.sample_limit);
    t.get("lambda_sweep", c.tabacof.config.lambda_sweep);
    t.get("max_iters", c.tabacof.config.max_iters);
    t.get("learning_rate", c.tabacof.config.learning_rate);
    t.finish();
    if (c.tabacof.enabled && c.dataset != DatasetId::mnist) fail("the Tabacof stage runs on MNIST only");
    if (c.tabacof.target != 1) fail("the Tabacof stage targets label 1");
    if (c.tabacof.sample_limit) positive(*c.tabacof.sample_limit, "tabacof.sample_limit");
    c.tabacof.config.validate();
  }

  if (r.has("probe")) {
    Reader p(r.raw("probe"), "probe");
    p.get("epochs", c.probe.config.epochs);
    p.get("batch_size", c.probe.config.batch_size);
    p.get("learning_rate", c.probe.config.learning_rate);
    p.get("hidden_channels", c.probe.config.hidden_channels);
    p.get("train_limit", c.probe.train_limit);
    p.get("test_limit", c.probe.test_limit);
    p.finish();
    if (c.probe.config.epochs < 1) fail("probe.epochs must be positive");
    positive(c.probe.config.batch_size, "probe.batch_size");
    positive(c.probe.train_limit, "probe.train_limit");
    positive(c.probe.test_limit, "probe.test_limit");
  }
  c.probe.config.seed = c.train.seed;

  r.get("sample_limit", c.sample_limit);
  if (c.sample_limit) positive(*c.sample_limit, "sample_limit");
  r.get("attack_chunk", c.attack_chunk);
  positive(c.attack_chunk, "attack_chunk");
  r.get("workers", c.workers);
  if (c.workers < 1) fail("workers must be positive");
  r.get("png_pairs", c.png_pairs);
  if (c.png_pairs < 0) fail("png_pairs must be non-negative");
  r.get("master_seed", c.master_seed);
  std::string precision = "f32";
  r.get("precision", precision);
  if (precision != "f32" && precision != "f64") fail("precision must be f32 or f64");
  c.f64 = precision == "f64";
  std::string out;
  r.get("output_dir", out);
  if (!out.empty()) c.output_dir = out;
  r.finish();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

json attack_to_json(const AttackConfig& a) {
  return json{{"kind", std::string(to_string(a.kind))},
              {"epsilon", a.epsilon},
              {"alpha", a.alpha},
              {"beta_w", a.beta_w},
              {"c", a.c},
              {"beta_l1", a.beta_l1},
              {"theta", a.theta},
              {"gamma", a.gamma},
              {"lambda_reg", a.lambda_reg},
              {"lambda_sweep", a.lambda_sweep},
              {"max_iters", a.max_iters},
              {"learning_rate", a.learning_rate},
              {"targeted", a.targeted ? json(*a.targeted) : json(nullptr)},
              {"early_abort", a.early_abort}};
}

json to_json(const ExperimentConfig& c) {
  static const char* kDatasets[] = {"mnist", "cifar10", "synthetic"};
  json models = json::array();
  for (const ModelKey& m : c.models)
    models.push_back({{"tier", std::string(to_string(m.tier))}, {"objective", std::string(to_string(m.objective))}});
  json attacks = json::array();
  for (const AttackSpec& a : c.attacks) {
    json aj = attack_to_json(a.config);
    aj["label"] = a.label;
    attacks.push_back(aj);
  }
  const auto opt = [](const std::optional<Index>& v) { return v ? json(*v) : json(nullptr); };
  json j{{"schema_version", kConfigSchemaVersion},
         {"dataset", kDatasets[int(c.dataset)]},
         {"models", models},
         {"train",
          {{"epochs", c.train.epochs},
           {"batch_size", c.train.batch_size},
           {"learning_rate", c.train.learning_rate},
           {"seed", c.train.seed},
           {"train_limit", opt(c.train_limit)},
           {"probe_layers", c.train.probe_layers}}},
         {"beta", {{"SVBI", c.beta_svbi}, {"DVIB", c.beta_dvib}}},
         {"latent_channels", {{"SVBI", c.latent_svbi}, {"DVIB", c.latent_dvib}}},
         {"attacks", attacks},
         {"sample_limit", opt(c.sample_limit)},
         {"attack_chunk", c.attack_chunk},
         {"png_pairs", c.png_pairs},
         {"master_seed", c.master_seed},
         {"precision", c.f64 ? "f64" : "f32"}};
  if (c.dataset == DatasetId::synthetic)
    j["synthetic"] = {{"classes", c.synthetic.classes},
                      {"per_class", c.synthetic.per_class},
                      {"test_per_class", c.synthetic_test_per_class},
                      {"image_size", c.synthetic.image_size},
                      {"channels", c.synthetic.channels},
                      {"noise", c.synthetic.noise}};
  if (c.beta_search.enabled)
    j["beta_search"] = {{"low", c.beta_search.search.low},
                        {"high", c.beta_search.search.high},
                        {"steps", c.beta_search.search.steps},
                        {"tolerance", c.beta_search.search.tolerance},
                        {"epochs", c.beta_search.epochs},
                        {"train_limit", c.beta_search.train_limit}};
  if (c.tabacof.enabled)
    j["tabacof"] = {{"target", c.tabacof.target},
                    {"sample_limit", opt(c.tabacof.sample_limit)},
                    {"lambda_sweep", c.tabacof.config.lambda_sweep},
                    {"max_iters", c.tabacof.config.max_iters},
                    {"learning_rate", c.tabacof.config.learning_rate}};
  if (!c.train.probe_layers.empty())
    j["probe"] = {{"epochs", c.probe.config.epochs},
                  {"batch_size", c.probe.config.batch_size},
                  {"learning_rate", c.probe.config.learning_rate},
                  {"hidden_channels", c.probe.config.hidden_channels},
                  {"train_limit", c.probe.train_limit},
                  {"test_limit", c.probe.test_limit}};
  return j;
}

std::string hash_json(const json& j) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& cfg) { return hash_json(to_json(cfg)); }

}  // namespace ibr

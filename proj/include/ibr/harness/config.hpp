#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ibr/attacks/attacks.hpp"
#include "ibr/harness/data.hpp"
#include "ibr/objectives/probe.hpp"
#include "ibr/objectives/train.hpp"

#include "json.hpp"

namespace ibr {

inline constexpr int kConfigSchemaVersion = 1;

enum class DatasetId { mnist, cifar10, synthetic };

struct ModelKey {
  Tier tier = Tier::D1;
  Objective objective = Objective::Base;
  friend bool operator==(const ModelKey&, const ModelKey&) = default;
};
std::string model_name(const ModelKey& key);  // e.g. "D1_SVBI"

/// An attack as configured: kind, hyperparameters and the label used in reports.
struct AttackSpec {
  std::string label;
  AttackConfig config;
};

struct BetaSearchSpec {
  bool enabled = false;
  BetaSearchConfig search;
  int epochs = 2;             // training budget per candidate
  Index train_limit = 10000;  // leading training samples per candidate
};

struct TabacofSpec {
  bool enabled = false;
  int target = 1;
  std::optional<Index> sample_limit;  // defaults to the experiment sample_limit
  AttackConfig config = default_attack_config(AttackKind::TABACOF);
};

struct ProbeSpec {
  ProbeConfig config;
  Index train_limit = 2000;
  Index test_limit = 500;
};

struct ExperimentConfig {
  DatasetId dataset = DatasetId::synthetic;
  std::string data_dir;  // empty: IBR_MNIST_DIR / IBR_CIFAR10_DIR
  SyntheticSpec synthetic;
  Index synthetic_test_per_class = 20;
  std::vector<ModelKey> models;  // train order: Base before SVBI within a tier
  TrainConfig train;             // objective and beta are filled in per model
  std::optional<Index> train_limit;
  double beta_svbi = 0.01, beta_dvib = 1e-3;
  int latent_svbi = 4, latent_dvib = 64;
  BetaSearchSpec beta_search;
  std::vector<AttackSpec> attacks;
  TabacofSpec tabacof;
  ProbeSpec probe;
  std::optional<Index> sample_limit;
  Index attack_chunk = 50;  // samples per batched attack call
  int workers = 1;          // concurrent attack chunks
  Index png_pairs = 0;      // clean/adversarial PNG pairs per attack stage
  std::uint64_t master_seed = 1;
  bool f64 = false;
  std::filesystem::path output_dir = "out";

  double beta_for(Objective objective) const;
};

// Parses and validates a JSON config. Throws ConfigError on unknown keys, a wrong schema
// version, reserved or unknown dataset ids, bad values, or a missing Base teacher for SVBI.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// Canonical JSON of everything that affects results (output_dir excluded).
nlohmann::json to_json(const ExperimentConfig& cfg);

// FNV-1a 64 over the compact dump of a JSON value with sorted keys, as 16 hex digits.
std::string hash_json(const nlohmann::json& j);
std::string config_hash(const ExperimentConfig& cfg);

nlohmann::json attack_to_json(const AttackConfig& a);

}  // namespace ibr

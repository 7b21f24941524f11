#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "prodding/core.hpp"
#include "prodding/datasets.hpp"
#include "prodding/networks.hpp"

namespace prodding {

class SourceModel;

/// How much of the source prediction a query reveals.
struct QueryMode {
  enum class Kind { Hard, SoftTopR };
  Kind kind = Kind::SoftTopR;
  int r = 1;

  static QueryMode hard() { return {Kind::Hard, 1}; }
  static QueryMode soft(int r = 1) { return {Kind::SoftTopR, r}; }

  /// "hard" or "soft:<r>".
  std::string to_string() const;
  static QueryMode parse(std::string_view text);
  /// Throws ConfigError unless 1 <= r <= K - 1 for soft queries.
  void validate(int num_classes) const;
  bool operator==(const QueryMode&) const = default;
};

/// Everything the target side ever learns about one instance.
struct QueryResult {
  std::vector<int> labels;          ///< top classes, most confident first
  std::vector<double> confidences;  ///< matching probabilities; empty for hard queries
  QueryMode mode;

  nlohmann::json to_json() const;
  static QueryResult from_json(const nlohmann::json& j);
  bool operator==(const QueryResult&) const = default;
};

/// Thread-safe record of issued queries.
class QueryLog {
 public:
  void record(std::string_view id, const QueryMode& mode);
  std::size_t count() const;
  /// Largest number of times any single id was queried (0 if none).
  std::size_t max_per_id() const;
  std::optional<QueryMode> mode_of(const std::string& id) const;

 private:
  mutable std::mutex mutex_;
  std::size_t count_ = 0;
  std::map<std::string, std::pair<QueryMode, std::size_t>> per_id_;
};

/// Anything that answers truncated queries: the in-process oracle or a remote client.
class BlackBox {
 public:
  virtual ~BlackBox() = default;
  virtual QueryResult query(const Vector& input, const QueryMode& mode, std::string_view id = {}) const = 0;
  virtual int num_classes() const = 0;
  virtual int input_dim() const = 0;
  virtual std::string fingerprint() const = 0;
  virtual const QueryLog& log() const = 0;
};

/// Source-model training settings for provisioning an oracle.
struct ProvisionOptions {
  double epsilon = 0.1;
  int epochs = 50;
  std::uint64_t seed = 1234;
  nlohmann::json encoder = {{"type", "mlp"}, {"hidden", 64}};
  OptimConfig optim;
};

struct ProvisionReport {
  int best_epoch = 0;
  double best_accuracy = 0.0;
  bool loaded_from_checkpoint = false;
};

/// Holds the source model and answers queries about it. The model itself never
/// leaves this object.
class Oracle final : public BlackBox {
 public:
  explicit Oracle(SourceModel model);
  Oracle(Oracle&&) noexcept;
  Oracle& operator=(Oracle&&) noexcept;
  ~Oracle() override;

  static Oracle load(const std::filesystem::path& checkpoint);

  /// Trains a source model on `source` (or reloads `checkpoint` if it exists and
  /// was produced by the same settings) and wraps it. When `checkpoint` is set the
  /// trained model is also written there.
  static Oracle provision(const Dataset& source, const ProvisionOptions& options,
                          const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                          const Dataset* holdout = nullptr, ProvisionReport* report = nullptr);

  void save(const std::filesystem::path& checkpoint) const;

  QueryResult query(const Vector& input, const QueryMode& mode, std::string_view id = {}) const override;
  int num_classes() const override;
  int input_dim() const override;
  std::string fingerprint() const override;
  const QueryLog& log() const override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

using QueryTable = std::map<std::string, QueryResult>;

/// Queries every example exactly once. With `cache_dir`, results are persisted
/// keyed by (dataset, oracle) and reused, so a warm rerun issues no queries.
/// A cache recorded under a different mode is refused; call invalidate_query_cache.
QueryTable query_dataset(const BlackBox& oracle, const Dataset& dataset, const QueryMode& mode,
                         const std::optional<std::filesystem::path>& cache_dir = std::nullopt);

std::filesystem::path query_cache_path(const std::filesystem::path& cache_dir, const Dataset& dataset,
                                       const BlackBox& oracle);
void invalidate_query_cache(const std::filesystem::path& cache_dir, const Dataset& dataset, const BlackBox& oracle);

}  // namespace prodding

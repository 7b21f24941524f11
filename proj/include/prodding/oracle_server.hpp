#pragma once

#include <memory>
#include <string>
#include <thread>

#include <json.hpp>

#include "prodding/oracle.hpp"

namespace prodding {

inline constexpr int kWireProtocolVersion = 1;

/// Request/response bodies for POST /query:
///   {"version": 1, "id": str, "mode": "hard"|"soft", "r": int, "input": [num...]}
///   -> {"version": 1, "status": "ok", "labels": [...], "confidences": [...]}
/// Errors carry a status of "invalid-mode", "version-mismatch" or "bad-request".
/// GET /info answers {"version", "num_classes", "input_dim", "fingerprint", "mode"}.
nlohmann::json make_query_request(std::string_view id, const Vector& input, const QueryMode& mode);

/// Serves the oracle over HTTP. `policy` is the most informative mode the
/// server will reveal: a hard server answers hard queries only; a soft:r
/// server answers hard queries and soft queries with r' <= r.
class OracleServer {
 public:
  OracleServer(const Oracle& oracle, QueryMode policy, std::string host = "127.0.0.1", int port = 0);
  ~OracleServer();
  OracleServer(const OracleServer&) = delete;
  OracleServer& operator=(const OracleServer&) = delete;

  /// Binds and serves on a background thread; returns the bound port.
  int start();
  /// Binds and serves on the calling thread until stop() is called.
  void serve_forever();
  void stop();
  int port() const { return port_; }

  /// Handles one request body; exposed for transport-free testing.
  nlohmann::json handle(const nlohmann::json& request) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

/// BlackBox backed by a remote OracleServer.
class RemoteOracle final : public BlackBox {
 public:
  RemoteOracle(std::string host, int port);
  ~RemoteOracle() override;

  QueryResult query(const Vector& input, const QueryMode& mode, std::string_view id = {}) const override;
  int num_classes() const override { return num_classes_; }
  int input_dim() const override { return input_dim_; }
  std::string fingerprint() const override { return fingerprint_; }
  const QueryLog& log() const override { return log_; }

 private:
  nlohmann::json post(const nlohmann::json& body) const;

  std::string host_;
  int port_;
  int num_classes_ = 0;
  int input_dim_ = 0;
  std::string fingerprint_;
  mutable QueryLog log_;
};

}  // namespace prodding

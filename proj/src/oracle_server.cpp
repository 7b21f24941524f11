#include "prodding/oracle_server.hpp"

#include <httplib.h>

namespace prodding {

nlohmann::json make_query_request(std::string_view id, const Vector& input, const QueryMode& mode) {
  return {{"version", kWireProtocolVersion},
          {"id", id},
          {"mode", mode.kind == QueryMode::Kind::Hard ? "hard" : "soft"},
          {"r", mode.r},
          {"input", std::vector<double>(input.data(), input.data() + input.size())}};
}

struct OracleServer::Impl {
  Impl(const Oracle& o, QueryMode p, std::string h, int port)
      : oracle(o), policy(p), host(std::move(h)), requested_port(port) {}
  const Oracle& oracle;
  QueryMode policy;
  std::string host;
  int requested_port;
  httplib::Server server;
  std::thread worker;
};

namespace {

nlohmann::json error_body(std::string_view status, std::string_view message) {
  return {{"version", kWireProtocolVersion}, {"status", status}, {"error", message}};
}

bool allowed(const QueryMode& policy, const QueryMode& request) {
  if (request.kind == QueryMode::Kind::Hard) return true;
  return policy.kind == QueryMode::Kind::SoftTopR && request.r <= policy.r;
}

}  // namespace

OracleServer::OracleServer(const Oracle& oracle, QueryMode policy, std::string host, int port)
    : impl_(std::make_unique<Impl>(oracle, policy, std::move(host), port)) {
  policy.validate(oracle.num_classes());
  impl_->server.Get("/info", [this](const httplib::Request&, httplib::Response& res) {
    const nlohmann::json body{{"version", kWireProtocolVersion},
                              {"num_classes", impl_->oracle.num_classes()},
                              {"input_dim", impl_->oracle.input_dim()},
                              {"fingerprint", impl_->oracle.fingerprint()},
                              {"mode", impl_->policy.to_string()}};
    res.set_content(body.dump(), "application/json");
  });
  impl_->server.Post("/query", [this](const httplib::Request& req, httplib::Response& res) {
    nlohmann::json reply;
    try {
      reply = handle(nlohmann::json::parse(req.body));
    } catch (const nlohmann::json::exception& e) {
      reply = error_body("bad-request", e.what());
    }
    res.status = reply.at("status") == "ok" ? 200 : 400;
    res.set_content(reply.dump(), "application/json");
  });
}

OracleServer::~OracleServer() { stop(); }

nlohmann::json OracleServer::handle(const nlohmann::json& request) const {
  if (request.value("version", -1) != kWireProtocolVersion) {
    return error_body("version-mismatch", "server speaks protocol version " + std::to_string(kWireProtocolVersion));
  }
  QueryMode mode;
  const auto kind = request.value("mode", std::string());
  if (kind == "hard") {
    mode = QueryMode::hard();
  } else if (kind == "soft") {
    mode = QueryMode::soft(request.value("r", 1));
  } else {
    return error_body("invalid-mode", "unknown mode '" + kind + "'");
  }
  try {
    mode.validate(impl_->oracle.num_classes());
  } catch (const ConfigError& e) {
    return error_body("invalid-mode", e.what());
  }
  if (!allowed(impl_->policy, mode)) {
    return error_body("invalid-mode", "server policy is " + impl_->policy.to_string());
  }
  if (!request.contains("input") || !request.at("input").is_array()) {
    return error_body("bad-request", "missing input array");
  }
  const auto values = request.at("input").get<std::vector<double>>();
  const Vector input = Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
  try {
    const auto result = impl_->oracle.query(input, mode, request.value("id", std::string()));
    nlohmann::json reply{{"version", kWireProtocolVersion}, {"status", "ok"}, {"labels", result.labels}};
    reply["confidences"] = result.confidences;
    return reply;
  } catch (const ConfigError& e) {
    return error_body("bad-request", e.what());
  }
}

int OracleServer::start() {
  if (impl_->requested_port == 0) {
    port_ = impl_->server.bind_to_any_port(impl_->host.c_str());
  } else {
    port_ = impl_->server.bind_to_port(impl_->host.c_str(), impl_->requested_port) ? impl_->requested_port : -1;
  }
  if (port_ < 0) throw RuntimeFailure("cannot bind oracle server on " + impl_->host);
  impl_->worker = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port_;
}

void OracleServer::serve_forever() {
  port_ = impl_->requested_port;
  if (!impl_->server.listen(impl_->host.c_str(), port_)) {
    throw RuntimeFailure("cannot listen on " + impl_->host + ":" + std::to_string(port_));
  }
}

void OracleServer::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
  if (impl_->worker.joinable()) impl_->worker.join();
}

RemoteOracle::RemoteOracle(std::string host, int port) : host_(std::move(host)), port_(port) {
  httplib::Client client(host_, port_);
  auto res = client.Get("/info");
  if (!res) throw RuntimeFailure("oracle server unreachable at " + host_ + ":" + std::to_string(port_));
  const auto info = nlohmann::json::parse(res->body);
  if (info.value("version", -1) != kWireProtocolVersion) {
    throw RuntimeFailure("oracle server speaks an incompatible protocol version");
  }
  num_classes_ = info.at("num_classes").get<int>();
  input_dim_ = info.at("input_dim").get<int>();
  fingerprint_ = info.at("fingerprint").get<std::string>();
}

RemoteOracle::~RemoteOracle() = default;

nlohmann::json RemoteOracle::post(const nlohmann::json& body) const {
  httplib::Client client(host_, port_);
  auto res = client.Post("/query", body.dump(), "application/json");
  if (!res) throw RuntimeFailure("transport failure talking to " + host_ + ":" + std::to_string(port_));
  return nlohmann::json::parse(res->body);
}

QueryResult RemoteOracle::query(const Vector& input, const QueryMode& mode, std::string_view id) const {
  const auto reply = post(make_query_request(id, input, mode));
  const auto status = reply.value("status", std::string("bad-request"));
  if (status != "ok") {
    throw RuntimeFailure("oracle refused query (" + status + "): " + reply.value("error", std::string()));
  }
  QueryResult out;
  out.mode = mode;
  out.labels = reply.at("labels").get<std::vector<int>>();
  out.confidences = reply.at("confidences").get<std::vector<double>>();
  log_.record(id, mode);
  return out;
}

}  // namespace prodding

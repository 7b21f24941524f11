#include "prodding/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace prodding {

namespace {

void require_finite(const LossBreakdown& l, int epoch, int step) {
  if (std::isfinite(l.skd) && std::isfinite(l.mix) && std::isfinite(l.mi) && std::isfinite(l.total)) return;
  std::ostringstream msg;
  msg << "non-finite distillation loss at epoch " << epoch << " step " << step << " (skd=" << l.skd
      << " mix=" << l.mix << " mi=" << l.mi << ")";
  throw RuntimeFailure(msg.str());
}

}  // namespace

LossGrad skd_loss(const ProbMatrix& teacher, const LogitMatrix& student_logits) {
  if (teacher.rows() != student_logits.rows() || teacher.cols() != student_logits.cols()) {
    throw ConfigError("skd_loss: teacher and student shapes differ");
  }
  if (!student_logits.allFinite()) throw RuntimeFailure("skd_loss: non-finite student logits");
  const auto n = static_cast<double>(teacher.rows());
  LossGrad out;
  if (teacher.rows() == 0) {
    out.dlogits = Matrix::Zero(0, student_logits.cols());
    return out;
  }
  const Matrix log_s = log_softmax_rows(student_logits);
  double total = 0.0;
  for (Eigen::Index i = 0; i < teacher.rows(); ++i) {
    for (Eigen::Index k = 0; k < teacher.cols(); ++k) {
      const double t = teacher(i, k);
      if (t > 0.0) total += t * (std::log(t) - log_s(i, k));
    }
  }
  out.value = total / n;
  // d/dz of -sum_k t_k log s_k is (sum_k t_k) s - t.
  const Matrix s = log_s.array().exp().matrix();
  out.dlogits = (s.array().colwise() * teacher.rowwise().sum().array() - teacher.array()).matrix() / n;
  return out;
}

LossGrad mutual_info(const LogitMatrix& logits) {
  const Eigen::Index n = logits.rows();
  const Eigen::Index K = logits.cols();
  if (n == 0) throw ConfigError("mutual_info needs a non-empty batch");
  if (!logits.allFinite()) throw RuntimeFailure("mutual_info: non-finite logits");
  LossGrad out;
  out.dlogits = Matrix::Zero(n, K);

  const Matrix log_p = log_softmax_rows(logits);
  const Matrix p = log_p.array().exp().matrix();
  const RowVector mean = p.colwise().sum() / static_cast<double>(n);
  RowVector log_m(K);
  double h_mean = 0.0;
  for (Eigen::Index k = 0; k < K; ++k) {
    log_m[k] = std::log(std::max(mean[k], std::numeric_limits<double>::min()));
    if (mean[k] > 0.0) h_mean -= mean[k] * log_m[k];
  }
  double h_rows = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < K; ++k) {
      if (p(i, k) > 0.0) h_rows -= p(i, k) * log_p(i, k);
    }
  }
  out.value = h_mean - h_rows / static_cast<double>(n);

  // dMI/dp_ik = (log p_ik - log m_k) / n, then through the softmax Jacobian.
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVector g = (log_p.row(i) - log_m) / static_cast<double>(n);
    const double inner = p.row(i).dot(g);
    out.dlogits.row(i) = (p.row(i).array() * (g.array() - inner)).matrix();
  }
  return out;
}

double sample_beta(double a, double b, Rng& rng) {
  if (!(a > 0.0) || !(b > 0.0)) throw ConfigError("Beta parameters must be positive");
  std::gamma_distribution<double> ga(a, 1.0);
  std::gamma_distribution<double> gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  if (x + y <= 0.0) return 0.5;
  return x / (x + y);
}

MixSample sample_mix(std::size_t batch_size, double alpha, Rng& rng) {
  MixSample mix;
  mix.lambda = sample_beta(alpha, alpha, rng);
  mix.partner.resize(batch_size);
  std::iota(mix.partner.begin(), mix.partner.end(), std::size_t{0});
  std::shuffle(mix.partner.begin(), mix.partner.end(), rng);
  return mix;
}

Matrix mix_inputs(const Matrix& batch, const MixSample& mix) {
  if (!(mix.lambda >= 0.0 && mix.lambda <= 1.0)) throw ConfigError("mix lambda must lie in [0, 1]");
  if (mix.partner.size() != static_cast<std::size_t>(batch.rows())) {
    throw ConfigError("mix_inputs: partner list does not match the batch");
  }
  Matrix out(batch.rows(), batch.cols());
  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    const auto j = static_cast<Eigen::Index>(mix.partner[static_cast<std::size_t>(i)]);
    out.row(i) = mix.lambda * batch.row(i) + (1.0 - mix.lambda) * batch.row(j);
  }
  return out;
}

double ict_loss(TargetModel& model, const Matrix& batch, const MixSample& mix, bool accumulate, double scale) {
  if (batch.rows() < 2) throw ConfigError("ict_loss needs a batch of at least 2");
  if (!(mix.lambda >= 0.0 && mix.lambda <= 1.0)) throw ConfigError("mix lambda must lie in [0, 1]");
  // Targets: gradient-free pass that leaves the running statistics alone.
  const ProbMatrix targets = softmax_rows(model.forward_train(batch, nullptr, false));
  const ProbMatrix mixed_targets = mix_inputs(targets, mix);

  TargetTrace trace;
  const LogitMatrix logits = model.forward_train(mix_inputs(batch, mix), accumulate ? &trace : nullptr, accumulate);
  const Matrix log_s = log_softmax_rows(logits);
  const auto n = static_cast<double>(batch.rows());
  const double value = -(mixed_targets.array() * log_s.array()).sum() / n;
  if (accumulate) {
    const Matrix d = (log_s.array().exp().matrix() - mixed_targets) * (scale / n);
    model.backward(trace, d);
  }
  return value;
}

double ict_loss(TargetModel& model, const Matrix& batch, double alpha, std::uint64_t seed) {
  Rng rng(seed);
  const auto mix = sample_mix(static_cast<std::size_t>(batch.rows()), alpha, rng);
  TargetModel scratch = model;
  return ict_loss(scratch, batch, mix, false);
}

LossBreakdown prod_objective(TargetModel& model, const Matrix& batch, const ProbMatrix& teacher,
                             const DistillFlags& flags, const MixSample& mix) {
  LossBreakdown out;
  if (flags.skd || flags.mi) {
    TargetTrace trace;
    const LogitMatrix logits = model.forward_train(batch, &trace);
    Matrix d = Matrix::Zero(logits.rows(), logits.cols());
    if (flags.skd) {
      const auto l = skd_loss(teacher, logits);
      out.skd = l.value;
      d += l.dlogits;
    }
    if (flags.mi) {
      const auto l = mutual_info(logits);
      out.mi = l.value;
      d -= l.dlogits;
    }
    model.backward(trace, d);
  }
  if (flags.mix) out.mix = ict_loss(model, batch, mix, true);
  out.total = out.skd + out.mix - out.mi;
  return out;
}

LossBreakdown prod_step(TargetModel& model, Sgd& sgd, const LearningRates& lr, const Matrix& batch,
                        const ProbMatrix& teacher, const DistillFlags& flags, const MixSample& mix) {
  auto params = model.parameters();
  zero_grad(params);
  const auto out = prod_objective(model, batch, teacher, flags, mix);
  require_finite(out, -1, -1);
  sgd.step(params, lr);
  return out;
}

ProbMatrix source_pseudo_labels(const Dataset& dataset, const QueryTable& answers, const Hyperparams& hp) {
  const int K = dataset.num_classes();
  ProbMatrix out(static_cast<Eigen::Index>(dataset.size()), K);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& id = dataset[i].id;
    const auto it = answers.find(id);
    if (it == answers.end()) throw ConfigError("no oracle answer for target instance '" + id + "'");
    const auto& a = it->second;
    if (a.mode.kind == QueryMode::Kind::Hard) {
      out.row(static_cast<Eigen::Index>(i)) = conventional_label_smooth(a.labels.at(0), K, hp.epsilon);
    } else {
      out.row(static_cast<Eigen::Index>(i)) = smooth_truncated(a.labels, a.confidences, K);
    }
  }
  return out;
}

DistillResult run_distillation(TargetModel model, const Dataset& dataset, const QueryTable& answers,
                               const Hyperparams& hp, const OptimConfig& optim, const DistillOptions& options) {
  hp.validate();
  optim.validate();
  if (dataset.empty()) throw ConfigError("distillation needs a non-empty target set");
  if (dataset.num_classes() != model.num_classes()) throw ConfigError("model and dataset disagree on K");

  const Matrix X = dataset.inputs();
  std::vector<std::string> ids;
  ids.reserve(dataset.size());
  for (const auto& ex : dataset.examples()) ids.push_back(ex.id);

  const ProbMatrix p_src = source_pseudo_labels(dataset, answers, hp);
  ProbMatrix p_proto = p_src;
  double beta = 1.0;
  if (options.flags.proto) {
    const Matrix feats = model.features(X);
    const int d = hp.pca_dim > 0 ? hp.pca_dim : default_pca_dim(dataset.size(), static_cast<std::size_t>(feats.cols()));
    const Matrix reduced = reduce_features(feats, d, ids);
    p_proto = prototype_pseudo_labels(reduced, compute_prototypes(reduced, p_src), hp.tau);
    beta = hp.beta;
  }

  DistillResult result{std::move(model), init_teacher(ids, p_src, p_proto, beta), {}};
  result.history.banks.push_back(result.bank);
  if (options.bank_dir) {
    std::filesystem::create_directories(*options.bank_dir);
    result.bank.save(*options.bank_dir / "bank-epoch-0.json");
  }
  if (!options.flags.any_loss()) return result;

  Rng batch_rng(derive_seed(options.seed, "distill/batches"));
  Rng mix_rng(derive_seed(options.seed, "distill/mix"));
  Sgd sgd(optim);
  const std::size_t per_epoch =
      std::max<std::size_t>(1, dataset.size() / static_cast<std::size_t>(optim.batch_size) +
                                   (dataset.size() % static_cast<std::size_t>(optim.batch_size) > 1 ? 1 : 0));
  const double total_steps = static_cast<double>(hp.epochs) * static_cast<double>(per_epoch);

  int step = 0;
  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    const auto batches = make_batches(dataset.size(), static_cast<std::size_t>(optim.batch_size), batch_rng);
    LossBreakdown sum;
    double seen = 0.0;
    for (const auto& idx : batches) {
      const Matrix xb = dataset.inputs(idx);
      const ProbMatrix tb = result.bank.rows(idx);
      const auto mix = sample_mix(idx.size(), hp.alpha, mix_rng);
      const auto lr = lr_at(optim, std::min(1.0, step / total_steps));
      auto params = result.model.parameters();
      zero_grad(params);
      const auto l = prod_objective(result.model, xb, tb, options.flags, mix);
      require_finite(l, epoch, step);
      sgd.step(params, lr);

      result.history.steps.push_back({epoch, step, l});
      if (options.metrics_log) {
        *options.metrics_log << nlohmann::json{{"epoch", epoch}, {"step", step}, {"skd", l.skd},
                                               {"mix", l.mix}, {"mi", l.mi}, {"total", l.total}}
                                    .dump()
                             << '\n';
      }
      const double w = static_cast<double>(idx.size());
      sum.skd += w * l.skd;
      sum.mix += w * l.mix;
      sum.mi += w * l.mi;
      sum.total += w * l.total;
      seen += w;
      ++step;
    }
    result.history.epochs.push_back({sum.skd / seen, sum.mix / seen, sum.mi / seen, sum.total / seen});

    const ProbMatrix student = softmax_rows(result.model.forward_eval(X));
    result.bank = ema_update(result.bank, ids, student, hp.gamma);
    result.history.banks.push_back(result.bank);
    if (options.bank_dir) result.bank.save(*options.bank_dir / ("bank-epoch-" + std::to_string(epoch) + ".json"));
    if (options.on_epoch_end) options.on_epoch_end(epoch, result.model);
  }
  return result;
}

}  // namespace prodding

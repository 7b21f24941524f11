#include "prodding/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "prodding/distill.hpp"

namespace prodding {

Vector estimate_prior(std::span<const int> pseudo_labels, int num_classes, double floor) {
  if (num_classes < 1) throw ConfigError("estimate_prior needs K >= 1");
  if (!(floor > 0.0)) throw ConfigError("prior floor must be positive");
  if (pseudo_labels.empty()) throw ConfigError("estimate_prior needs at least one pseudo-label");
  Vector pi = Vector::Zero(num_classes);
  for (const int y : pseudo_labels) {
    if (y < 0 || y >= num_classes) throw ConfigError("pseudo-label out of range");
    pi[y] += 1.0;
  }
  pi /= static_cast<double>(pseudo_labels.size());
  pi = pi.cwiseMax(floor);
  return pi / pi.sum();
}

namespace {

ConsistencyLoss consistency(const LogitMatrix& weak, const LogitMatrix& strong, double eta, const RowVector* shift) {
  if (weak.rows() != strong.rows() || weak.cols() != strong.cols()) {
    throw ConfigError("weak and strong views have different shapes");
  }
  if (!weak.allFinite() || !strong.allFinite()) throw RuntimeFailure("consistency loss: non-finite logits");
  ConsistencyLoss out;
  out.dstrong = Matrix::Zero(strong.rows(), strong.cols());
  if (weak.rows() == 0) return out;
  const ProbMatrix pw = softmax_rows(weak);
  LogitMatrix adjusted = strong;
  if (shift) adjusted.rowwise() += *shift;
  const Matrix log_s = log_softmax_rows(adjusted);
  const auto n = static_cast<double>(weak.rows());
  for (Eigen::Index i = 0; i < weak.rows(); ++i) {
    const RowVector row = pw.row(i);
    if (row.maxCoeff() < eta) continue;
    const int y = argmax(row);
    ++out.passed;
    out.value -= log_s(i, y);
    out.dstrong.row(i) = log_s.row(i).array().exp().matrix();
    out.dstrong(i, y) -= 1.0;
  }
  out.value /= n;
  out.dstrong /= n;
  return out;
}

}  // namespace

ConsistencyLoss fixmatch_loss(const LogitMatrix& weak, const LogitMatrix& strong, double eta) {
  return consistency(weak, strong, eta, nullptr);
}

ConsistencyLoss adjusted_fixmatch_loss(const LogitMatrix& weak, const LogitMatrix& strong, double eta,
                                       const Vector& prior, double rho) {
  if (rho < 0.0) throw ConfigError("rho must be non-negative");
  if (prior.size() != weak.cols()) throw ConfigError("prior length does not match K");
  if ((prior.array() <= 0.0).any()) throw ConfigError("prior must be strictly positive");
  const RowVector shift = rho * prior.array().log().matrix().transpose();
  return consistency(weak, strong, eta, &shift);
}

DingBreakdown ding_objective(TargetModel& model, const Matrix& weak, const Matrix& strong, const Vector& prior,
                             const Hyperparams& hp, const FinetuneFlags& flags) {
  DingBreakdown out;
  if (!flags.any_loss() || weak.rows() == 0) return out;
  TargetTrace wtrace;
  const LogitMatrix wlogits = model.forward_train(weak, &wtrace);
  const ProbMatrix pw = softmax_rows(wlogits);
  out.pass_rate = static_cast<double>((pw.rowwise().maxCoeff().array() >= hp.eta).count()) /
                  static_cast<double>(weak.rows());
  if (flags.consistency()) {
    TargetTrace strace;
    const LogitMatrix slogits = model.forward_train(strong, &strace);
    const auto c = flags.afm ? adjusted_fixmatch_loss(wlogits, slogits, hp.eta, prior, hp.rho)
                             : fixmatch_loss(wlogits, slogits, hp.eta);
    out.consistency = c.value;
    model.backward(strace, c.dstrong);
  }
  if (flags.mi) {
    const auto m = mutual_info(wlogits);
    out.mi = m.value;
    model.backward(wtrace, -m.dlogits);
  }
  out.total = out.consistency - out.mi;
  return out;
}

DingBreakdown ding_step(TargetModel& model, Sgd& sgd, const LearningRates& lr, const Matrix& weak,
                        const Matrix& strong, const Vector& prior, const Hyperparams& hp, const FinetuneFlags& flags) {
  auto params = model.parameters();
  zero_grad(params);
  const auto out = ding_objective(model, weak, strong, prior, hp, flags);
  if (!std::isfinite(out.total)) throw RuntimeFailure("non-finite finetuning loss");
  sgd.step(params, lr);
  return out;
}

FinetuneResult run_finetune(TargetModel model, const Dataset& dataset, const Hyperparams& hp,
                            const OptimConfig& optim, const FinetuneOptions& options) {
  hp.validate();
  optim.validate();
  if (dataset.empty()) throw ConfigError("finetuning needs a non-empty target set");
  FinetuneResult result{std::move(model), {}};
  if (!options.flags.any_loss()) return result;

  const int K = result.model.num_classes();
  const Matrix X = dataset.inputs();
  Rng batch_rng(derive_seed(options.seed, "finetune/batches"));
  Sgd sgd(optim);
  const auto bs = static_cast<std::size_t>(optim.batch_size);
  const std::size_t per_epoch = std::max<std::size_t>(1, dataset.size() / bs + (dataset.size() % bs > 1 ? 1 : 0));
  const double total_steps = static_cast<double>(hp.epochs) * static_cast<double>(per_epoch);

  int step = 0;
  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    const std::uint64_t epoch_seed = derive_seed(options.seed, "finetune/epoch", static_cast<std::uint64_t>(epoch));
    const LogitMatrix all = result.model.forward_eval(augment_rows(X, options.weak, derive_seed(epoch_seed, "prior")));
    std::vector<int> yhat(static_cast<std::size_t>(all.rows()));
    for (Eigen::Index i = 0; i < all.rows(); ++i) yhat[static_cast<std::size_t>(i)] = argmax(RowVector(all.row(i)));
    const Vector prior = estimate_prior(yhat, K, hp.prior_floor);

    FinetuneEpoch record;
    record.epoch = epoch;
    record.prior = prior;
    double seen = 0.0;
    std::uint64_t b = 0;
    for (const auto& idx : make_batches(dataset.size(), bs, batch_rng)) {
      const Matrix xb = dataset.inputs(idx);
      const Matrix weak = augment_rows(xb, options.weak, derive_seed(epoch_seed, "weak", b));
      const Matrix strong = augment_rows(xb, options.strong, derive_seed(epoch_seed, "strong", b));
      ++b;
      const auto lr = lr_at(optim, std::min(1.0, step / total_steps));
      auto params = result.model.parameters();
      zero_grad(params);
      const auto l = ding_objective(result.model, weak, strong, prior, hp, options.flags);
      if (!std::isfinite(l.total)) {
        std::ostringstream msg;
        msg << "non-finite finetuning loss at epoch " << epoch << " step " << step << " (consistency="
            << l.consistency << " mi=" << l.mi << ")";
        throw RuntimeFailure(msg.str());
      }
      sgd.step(params, lr);
      if (options.metrics_log) {
        *options.metrics_log << nlohmann::json{{"epoch", epoch},
                                               {"step", step},
                                               {"pi", std::vector<double>(prior.data(), prior.data() + prior.size())},
                                               {"pass_rate", l.pass_rate},
                                               {"afm", l.consistency},
                                               {"mi", l.mi},
                                               {"total", l.total}}
                                    .dump()
                             << '\n';
      }
      const double w = static_cast<double>(idx.size());
      record.loss.consistency += w * l.consistency;
      record.loss.mi += w * l.mi;
      record.loss.total += w * l.total;
      record.loss.pass_rate += w * l.pass_rate;
      seen += w;
      ++step;
    }
    record.loss.consistency /= seen;
    record.loss.mi /= seen;
    record.loss.total /= seen;
    record.loss.pass_rate /= seen;
    record.pass_rate = record.loss.pass_rate;
    result.epochs.push_back(std::move(record));
    if (options.on_epoch_end) options.on_epoch_end(epoch, result.model);
  }
  return result;
}

}  // namespace prodding

#include "prodding/source_model.hpp"

#include <cmath>
#include <sstream>

#include "checkpoint_io.hpp"

namespace prodding {

SourceModel::SourceModel(std::unique_ptr<Encoder> encoder, int num_classes, Rng& rng)
    : encoder_(std::move(encoder)), num_classes_(num_classes) {
  if (num_classes < 2) throw ConfigError("source model needs K >= 2");
  head_ = Linear("head", encoder_->output_dim(), num_classes, ParamGroup::NewLayers, rng);
}

SourceModel::SourceModel(const SourceModel& other)
    : encoder_(other.encoder_->clone()), head_(other.head_), num_classes_(other.num_classes_) {}

SourceModel& SourceModel::operator=(const SourceModel& other) {
  if (this != &other) *this = SourceModel(other);
  return *this;
}

LogitMatrix SourceModel::forward(const Matrix& x, SourceTrace* trace) const {
  if (x.rows() == 0) return LogitMatrix(0, num_classes_);
  if (!trace) return head_.forward(encoder_->forward(x, nullptr));
  trace->features = encoder_->forward(x, &trace->encoder);
  trace->logits = head_.forward(trace->features);
  return trace->logits;
}

void SourceModel::backward(const SourceTrace& trace, const Matrix& dlogits) {
  encoder_->backward(trace.encoder, head_.backward(trace.features, dlogits));
}

std::vector<Parameter*> SourceModel::parameters() {
  std::vector<Parameter*> out;
  encoder_->collect(out);
  head_.collect(out);
  return out;
}

std::vector<NamedTensor> SourceModel::tensors() {
  std::vector<NamedTensor> out;
  for (Parameter* p : parameters()) out.push_back({p->name, &p->value});
  return out;
}

nlohmann::json SourceModel::architecture() const {
  return {{"encoder", encoder_->spec()}, {"num_classes", num_classes_}};
}

LogitMatrix forward(const SourceModel& model, const Matrix& batch) { return model.forward(batch); }

double source_accuracy(const SourceModel& model, const Dataset& data) {
  if (data.empty()) return 0.0;
  const auto& labels = data.training_labels();
  const Matrix logits = model.forward(data.inputs());
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (argmax(RowVector(logits.row(i))) == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

SourceTrainingResult train_source(const Dataset& data, const OptimConfig& optim, const SourceTrainingOptions& options,
                                  const Dataset* holdout) {
  optim.validate();
  if (data.empty()) throw ConfigError("cannot train a source model on an empty dataset");
  if (!(options.epsilon >= 0.0 && options.epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
  if (options.epochs < 1) throw ConfigError("source training needs at least one epoch");
  const auto& labels = data.training_labels();

  Rng rng(derive_seed(options.seed, "source/init"));
  auto encoder_spec = options.encoder;
  encoder_spec["input_dim"] = static_cast<int>(data.input_dim());
  SourceModel model(make_encoder(encoder_spec, rng), data.num_classes(), rng);

  const Matrix inputs = data.inputs();
  const auto params = model.parameters();
  Sgd sgd(optim);
  Rng shuffle(derive_seed(options.seed, "source/batches"));
  const auto steps_per_epoch = (data.size() + static_cast<std::size_t>(optim.batch_size) - 1) /
                               static_cast<std::size_t>(optim.batch_size);
  const auto total_steps = static_cast<double>(steps_per_epoch * static_cast<std::size_t>(options.epochs));

  std::optional<SourceModel> best;
  SourceTrainingResult result{model, 0, -1.0, {}};
  std::size_t step = 0;
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    double epoch_loss = 0.0;
    const auto batches = make_batches(data.size(), static_cast<std::size_t>(optim.batch_size), shuffle);
    for (const auto& batch : batches) {
      std::vector<int> y;
      Matrix x(static_cast<Eigen::Index>(batch.size()), inputs.cols());
      for (std::size_t r = 0; r < batch.size(); ++r) {
        x.row(static_cast<Eigen::Index>(r)) = inputs.row(static_cast<Eigen::Index>(batch[r]));
        y.push_back(labels[batch[r]]);
      }
      SourceTrace trace;
      model.forward(x, &trace);
      const auto loss = label_smoothing_loss(trace.logits, y, options.epsilon);
      if (!std::isfinite(loss.value)) {
        std::ostringstream msg;
        msg << "non-finite source loss at epoch " << epoch << ", step " << step
            << " (max |logit| = " << trace.logits.cwiseAbs().maxCoeff() << ")";
        throw RuntimeFailure(msg.str());
      }
      zero_grad(params);
      model.backward(trace, loss.dlogits);
      const double progress = std::min(1.0, static_cast<double>(step) / total_steps);
      sgd.step(params, lr_at(optim, progress));
      epoch_loss += loss.value * static_cast<double>(batch.size());
      ++step;
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(data.size()));
    const double acc = source_accuracy(model, holdout ? *holdout : data);
    if (acc > result.best_accuracy) {
      result.best_accuracy = acc;
      result.best_epoch = epoch;
      best = model;
    }
  }
  result.model = std::move(*best);
  return result;
}

void save_checkpoint(SourceModel& model, const CheckpointMeta& meta, const std::filesystem::path& path) {
  detail::write_checkpoint("source", model.architecture(), model.num_classes(), model.tensors(), meta, path);
}

SourceModel load_source_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  const auto doc = detail::read_checkpoint(path, "source");
  const auto& arch = doc.at("architecture");
  Rng rng(0);
  SourceModel model(make_encoder(arch.at("encoder"), rng), arch.at("num_classes").get<int>(), rng);
  detail::restore_tensors(doc, model.tensors());
  if (meta) *meta = detail::read_meta(doc);
  return model;
}

std::uint64_t model_checksum(SourceModel& model) { return checksum(model.tensors()); }

}  // namespace prodding

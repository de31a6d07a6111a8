#include "pmss/framework/train.hpp"

#include <cmath>

#include "pmss/numerics/optim.hpp"
#include "pmss/numerics/tape.hpp"

namespace pmss::framework {

NonFiniteError::NonFiniteError(std::string tensor, std::size_t step)
    : std::runtime_error("non-finite value in " + tensor + " at step " + std::to_string(step)),
      tensor_(std::move(tensor)),
      step_(step) {}

void to_json(nlohmann::json& j, const TrainRecord& r) {
  j = {{"step", r.step}, {"loss", r.loss}};
  if (r.miou) j["miou"] = *r.miou;
  if (r.dice) j["dice"] = *r.dice;
}

EvalResult evaluate(const Pipeline& pipeline, const std::vector<data::Sample>& samples, std::size_t limit,
                    std::int32_t dice_class, std::size_t batch) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  NoGradScope no_grad;
  const std::size_t n = limit == 0 ? samples.size() : std::min(limit, samples.size());
  EvalResult r;
  r.confusion = data::ConfusionMatrix(pipeline.spec.num_classes);
  for (std::size_t start = 0; start < n; start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + batch); ++i) idx.push_back(i);
    const data::Batch b = data::make_batch(samples, idx);
    const Tensor logits = pipeline.forward(b.images).logits;
    r.confusion.add(data::argmax_channels(logits), b.labels);
  }
  r.iou = data::miou(r.confusion);
  if (dice_class >= 0) r.dice = data::dice(r.confusion, static_cast<std::size_t>(dice_class));
  return r;
}

namespace {

std::string first_non_finite(const std::vector<RegistryEntry>& registry, const ForwardResult& fwd) {
  for (const auto& e : registry)
    if (!e.tensor.all_finite()) return e.name;
  for (const auto& s : fwd.interim)
    for (std::size_t r = 0; r < s.maps.size(); ++r)
      if (!s.maps[r].all_finite())
        return "spm" + std::to_string(s.point) + " interim map (iteration " + std::to_string(r + 1) + ")";
  if (!fwd.logits.all_finite()) return "logits";
  return "loss";
}

}  // namespace

TrainReport train(Pipeline& pipeline, const data::Dataset& dataset, const TrainOptions& opts, const LossSpec& loss,
                  const RecordSink& sink) {
  if (dataset.train.empty()) throw std::invalid_argument("train: empty training split");
  if (opts.batch == 0) throw std::invalid_argument("train.batch must be >= 1");
  const auto& eval_set = dataset.val.empty() ? dataset.train : dataset.val;
  std::vector<RegistryEntry> registry = pipeline.registry();
  std::vector<Tensor> params;
  std::vector<double> mults;
  for (const auto& e : registry) {
    params.push_back(e.tensor);
    mults.push_back(e.group == Group::prompt ? opts.prompt_lr_mult : 1.0);
  }
  Sgd sgd(opts.lr, opts.momentum, opts.weight_decay);
  TrainReport report;
  for (std::size_t step = 0; step < opts.steps; ++step) {
    for (const auto& e : registry)
      if (!e.tensor.all_finite()) throw NonFiniteError(e.name, step);
    Rng pick(mix_seed(opts.seed, step + 1));
    std::vector<std::size_t> idx(opts.batch);
    for (auto& i : idx) i = pick.below(dataset.train.size());
    const data::Batch batch = data::make_batch(dataset.train, idx);
    Tape tape;
    Tensor l;
    ForwardResult fwd;
    {
      GradScope scope(tape);
      fwd = pipeline.forward(batch.images);
      l = total_loss(fwd.logits, fwd.interim, batch.labels, loss);
    }
    if (!std::isfinite(l.item())) throw NonFiniteError(first_non_finite(registry, fwd), step);
    if (!params.empty()) {
      tape.backward(l);
      if (opts.grad_clip > 0.0) clip_grad_norm(params, opts.grad_clip);
      sgd.step(params, mults);
    }
    TrainRecord rec{step, l.item(), std::nullopt, std::nullopt};
    const bool last = step + 1 == opts.steps;
    if (last || (opts.eval_every != 0 && (step + 1) % opts.eval_every == 0)) {
      const EvalResult ev = evaluate(pipeline, eval_set, opts.eval_samples, opts.dice_class);
      rec.miou = ev.iou.mean;
      rec.dice = ev.dice;
      if (last) report.final_eval = ev;
    }
    if (sink) sink(rec);
    report.records.push_back(rec);
  }
  for (const auto& e : registry)
    if (!e.tensor.all_finite()) throw NonFiniteError(e.name, opts.steps);
  if (opts.steps == 0) report.final_eval = evaluate(pipeline, eval_set, opts.eval_samples, opts.dice_class);
  return report;
}

}  // namespace pmss::framework

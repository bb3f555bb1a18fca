#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dfx/app.hpp"

namespace dfx {

namespace {

constexpr Index kEvalBatch = 500;

std::vector<int> labels_of(const Dataset& d, std::span<const Index> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (Index i : idx) out.push_back(d.labels[static_cast<std::size_t>(i)]);
  return out;
}

// Evaluates in fixed-size batches with running statistics; returns (loss, accuracy %).
template <typename Forward>
std::pair<double, double> evaluate(const Dataset& d, Forward&& fwd) {
  double loss = 0.0;
  Index correct = 0;
  for (Index start = 0; start < d.size(); start += kEvalBatch) {
    const Index n = std::min(kEvalBatch, d.size() - start);
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), start);
    const std::vector<int> y = labels_of(d, idx);
    const SoftmaxLoss l = softmax_cross_entropy(fwd(d.gather(idx)), y);
    loss += l.loss * static_cast<double>(n);
    correct += l.correct;
  }
  return {loss / static_cast<double>(d.size()), 100.0 * static_cast<double>(correct) / static_cast<double>(d.size())};
}

struct StepLog {
  Index step;
  std::string arm;
  double loss;
  double accuracy;
};

struct EpochLog {
  int epoch;
  std::string arm;
  double loss;
  double accuracy;
  double lr;
  std::uint64_t digest;
};

// Shared loop: `step` trains on one batch and returns (loss, correct).
template <typename Step, typename SetLr>
void train_arm(const RunConfig& c, const Dataset& train, ArmSummary& arm, std::vector<StepLog>& steps,
               std::vector<EpochLog>& epochs, Step&& step, SetLr&& set_lr) {
  const Index per_epoch = train.size() / c.batch_size;
  Index global = 0;
  int above = 0;
  for (int e = 0; e < c.epochs && !arm.diverged; ++e) {
    const float lr = scheduled_lr(c.lr, c.lr_drops, e);
    set_lr(lr);
    const std::vector<Index> order = epoch_order(train.size(), c.seed, e);
    arm.epoch_digest.push_back(order_digest(order));
    double loss_sum = 0.0;
    Index correct = 0, seen = 0;
    for (Index b = 0; b < per_epoch; ++b) {
      const std::span<const Index> idx(order.data() + b * c.batch_size, static_cast<std::size_t>(c.batch_size));
      std::pair<double, Index> r;
      try {
        r = step(train.gather(idx), labels_of(train, idx));
      } catch (const DfxError& err) {
        if (err.code() != ErrorCode::kExponentOverflow && err.code() != ErrorCode::kNonFiniteInput) throw;
        arm.diverged = true;
        arm.divergence_reason = std::string(to_string(err.code()));
        break;
      }
      const double acc = 100.0 * static_cast<double>(r.second) / static_cast<double>(c.batch_size);
      steps.push_back(StepLog{global++, arm.arm, r.first, acc});
      arm.step_loss.push_back(r.first);
      loss_sum += r.first;
      correct += r.second;
      seen += c.batch_size;
      if (!std::isfinite(r.first)) {
        arm.diverged = true;
        arm.divergence_reason = "non-finite loss";
        break;
      }
      above = r.first > c.divergence_loss ? above + 1 : 0;
      if (above >= c.divergence_patience) {
        arm.diverged = true;
        arm.divergence_reason = "loss above threshold";
        break;
      }
    }
    if (seen == 0) break;
    arm.epoch_loss.push_back(loss_sum / static_cast<double>(seen / c.batch_size));
    arm.epoch_accuracy.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(seen));
    epochs.push_back(EpochLog{e, arm.arm, arm.epoch_loss.back(), arm.epoch_accuracy.back(), lr, arm.epoch_digest.back()});
  }
  // Loss that ends above where it started, or climbs back by more than a
  // tenth of the progress made, counts as a run that stopped converging.
  if (!arm.diverged && arm.epoch_loss.size() >= 2) {
    const double first = arm.epoch_loss.front(), last = arm.epoch_loss.back();
    const double best = *std::min_element(arm.epoch_loss.begin(), arm.epoch_loss.end());
    if (!(last < first) || last - best > 0.1 * (first - best)) {
      arm.diverged = true;
      arm.divergence_reason = "loss not decreasing";
    }
  }
}

void write_summary(std::ostream& os, const ArmSummary& a) {
  os << a.arm << ".test_accuracy = " << fmt9(a.test_accuracy) << "\n"
     << a.arm << ".test_loss = " << fmt9(a.test_loss) << "\n"
     << a.arm << ".final_train_loss = " << fmt9(a.epoch_loss.empty() ? NAN : a.epoch_loss.back()) << "\n"
     << a.arm << ".diverged = " << (a.diverged ? "true" : "false") << "\n";
  if (a.diverged) os << a.arm << ".divergence_reason = " << a.divergence_reason << "\n";
}

}  // namespace

RunSummary run_training(const RunConfig& c) {
  validate(c);
  std::filesystem::create_directories(c.out_dir);
  { std::ofstream(c.out_dir / "config.txt") << format_run_config(c); }

  const DataSplit data = load_dataset(c);
  const ModelConfig model = model_config(c, data.train.sample_shape(), data.train.classes);
  const SgdConfig sgd{c.lr, c.momentum, c.weight_decay};

  RoundingContext ctx(c.seed, c.update_rounding);
  OptState state = make_opt_state(init_parameters(model, c.seed), sgd, ctx);
  std::vector<FloatTensor> start;
  for (const Fxp16& m : state.master) start.push_back(inverse_map(m));

  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  RunSummary out;

  out.integer.arm = "int" + std::to_string(c.bit_width);
  NormStats int_stats = make_norm_stats(model);
  train_arm(
      c, data.train, out.integer, steps, epochs,
      [&](const FloatTensor& x, const std::vector<int>& y) {
        ctx.set_mode(c.forward_rounding);
        const std::vector<Fxp8> w = quantize_weights(state, c.bit_width, ctx);
        StepResult<Fxp8> r = integer_step(model, w, x, y, ctx, &int_stats);
        ctx.set_mode(c.update_rounding);
        state = sgd_step(std::move(state), r.grads, ctx);
        return std::pair<double, Index>{r.loss, r.correct};
      },
      [&](float lr) { set_learning_rate(state, lr); });
  {
    ctx.set_mode(c.forward_rounding);
    const std::vector<Fxp8> w = quantize_weights(state, c.bit_width, ctx);
    std::tie(out.integer.test_loss, out.integer.test_accuracy) = evaluate(data.test, [&](const FloatTensor& x) {
      return forward(model, w, x, ctx, Phase::kEval, &int_stats).logits;
    });
  }

  if (c.paired) {
    ArmSummary ref;
    ref.arm = "float";
    NormStats float_stats = make_norm_stats(model);
    FloatSgd opt(start, sgd);
    train_arm(
        c, data.train, ref, steps, epochs,
        [&](const FloatTensor& x, const std::vector<int>& y) {
          StepResult<FloatTensor> r = float_reference_step(model, opt.weights, x, y, &float_stats);
          opt.step(r.grads);
          return std::pair<double, Index>{r.loss, r.correct};
        },
        [&](float lr) { opt.config.lr = lr; });
    std::tie(ref.test_loss, ref.test_accuracy) = evaluate(data.test, [&](const FloatTensor& x) {
      return forward(model, opt.weights, x, Phase::kEval, &float_stats).logits;
    });
    out.reference = std::move(ref);
  }

  {
    std::ofstream s(c.out_dir / "steps.csv");
    s << "step,arm,loss,accuracy\n";
    for (const StepLog& l : steps) s << l.step << ',' << l.arm << ',' << fmt9(l.loss) << ',' << fmt9(l.accuracy) << "\n";
  }
  {
    std::ofstream e(c.out_dir / "epochs.csv");
    e << "epoch,arm,loss,accuracy,lr,batch_digest\n";
    for (const EpochLog& l : epochs)
      e << l.epoch << ',' << l.arm << ',' << fmt9(l.loss) << ',' << fmt9(l.accuracy) << ',' << fmt9(l.lr) << ','
        << std::hex << l.digest << std::dec << "\n";
  }
  {
    std::ofstream s(c.out_dir / "summary.txt");
    write_summary(s, out.integer);
    if (out.reference) {
      write_summary(s, *out.reference);
      s << "batch_order_match = " << (out.reference->epoch_digest == out.integer.epoch_digest ? "true" : "false")
        << "\n";
    }
  }
  if (c.checkpoint) save_checkpoint(c.out_dir / "checkpoint", Checkpoint{c, state, int_stats});
  return out;
}

std::vector<AblationRow> run_ablation(const RunConfig& config, std::span<const int> bits) {
  std::vector<AblationRow> rows;
  for (int b : bits) {
    RunConfig c = config;
    c.bit_width = b;
    c.paired = false;
    c.out_dir = config.out_dir / ("bits" + std::to_string(b));
    const RunSummary s = run_training(c);
    rows.push_back(AblationRow{b, s.integer.test_accuracy,
                               s.integer.epoch_loss.empty() ? NAN : s.integer.epoch_loss.back(), s.integer.diverged});
  }
  std::filesystem::create_directories(config.out_dir);
  std::ofstream os(config.out_dir / "ablation.csv");
  os << "bits,test_accuracy,final_loss,diverged\n";
  for (const AblationRow& r : rows)
    os << r.bits << ',' << fmt9(r.test_accuracy) << ',' << fmt9(r.final_loss) << ',' << (r.diverged ? 1 : 0) << "\n";
  return rows;
}

}  // namespace dfx

#include "pmss/numerics/tape.hpp"

namespace pmss {

namespace {
thread_local Tape* g_current = nullptr;
}

Tape* Tape::current() { return g_current; }

GradScope::GradScope(Tape& tape) : previous_(g_current) { g_current = &tape; }
GradScope::~GradScope() { g_current = previous_; }

NoGradScope::NoGradScope() : previous_(g_current) { g_current = nullptr; }
NoGradScope::~NoGradScope() { g_current = previous_; }

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_current == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t != nullptr && *t && t->requires_grad()) return true;
  return false;
}

void Tape::record(std::string op, std::vector<Tensor> inputs, Tensor output, Vjp vjp) {
  if (spent_) throw ShapeError("cannot record on a tape after backward()");
  std::erase_if(inputs, [](const Tensor& t) { return !t; });
  entries_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(vjp)});
}

void Tape::corrupt_vjp(std::string op, double factor) { corruption_ = std::make_pair(std::move(op), factor); }

void Tape::backward(const Tensor& loss) {
  if (spent_) throw ShapeError("backward() already ran on this tape");
  if (!loss || loss.numel() != 1) throw ShapeError("backward() needs a scalar loss");

  std::size_t last = entries_.size();
  for (std::size_t i = entries_.size(); i-- > 0;) {
    if (entries_[i].output.same_as(loss)) {
      last = i;
      break;
    }
  }
  if (last == entries_.size()) throw ShapeError("loss was not produced by an operation on this tape");
  spent_ = true;

  Tensor seed = entries_[last].output;
  seed.grad_buffer()[0] += 1.0;

  visited_.clear();
  for (std::size_t i = last + 1; i-- > 0;) {
    Entry& e = entries_[i];
    visited_.push_back(i);
    if (!e.output.has_grad()) continue;

    const bool corrupt = corruption_ && corruption_->first == e.op;
    std::vector<std::vector<double>> before;
    if (corrupt) {
      for (auto& in : e.inputs)
        before.emplace_back(in.has_grad() ? std::vector<double>(in.grad().begin(), in.grad().end())
                                          : std::vector<double>(in.numel(), 0.0));
    }

    e.vjp();

    if (corrupt) {
      for (std::size_t k = 0; k < e.inputs.size(); ++k) {
        Tensor& in = e.inputs[k];
        if (!in.has_grad()) continue;
        auto g = in.grad_buffer();
        for (std::size_t j = 0; j < g.size(); ++j)
          g[j] = before[k][j] + corruption_->second * (g[j] - before[k][j]);
      }
    }
    if (!e.output.is_leaf() && !e.output.same_as(loss)) e.output.clear_grad();
  }
  // Closures keep intermediates alive; release them now that the pass is over.
  for (auto& e : entries_) e.vjp = nullptr;
}

}  // namespace pmss

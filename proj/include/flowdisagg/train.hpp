#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "flowdisagg/adam.hpp"
#include "flowdisagg/data.hpp"
#include "flowdisagg/model.hpp"
#include "flowdisagg/rng.hpp"

namespace flowdisagg {

struct TrainOptions {
    std::int64_t batch_size = 50;
    std::int64_t epochs = 2000;
    double lr = 1e-3;

    void validate() const;
};

struct EpochRecord {
    std::int64_t epoch = 0;  // 1-based
    double total = 0.0;
    double reconstruction = 0.0;
    double prior = 0.0;
    std::vector<double> step_totals;  // per-batch losses, in order
};

// Mini-batch optimization over a fixed window set. Epoch counter, optimizer
// state, and rng stream together describe the run exactly, so persisting
// them lets a resumed run continue step-for-step.
class Trainer {
public:
    Trainer(PfvaeModel& model, std::vector<WindowSample> windows, TrainOptions options,
            Rng rng);

    EpochRecord run_epoch();  // NumericError if any batch loss is non-finite

    std::int64_t epoch() const { return epoch_; }
    void set_epoch(std::int64_t e);
    Adam& optimizer() { return adam_; }
    Rng& rng() { return rng_; }
    PfvaeModel& model() { return model_; }
    const TrainOptions& options() const { return options_; }

private:
    PfvaeModel& model_;
    std::vector<WindowSample> windows_;
    TrainOptions options_;
    Rng rng_;
    Adam adam_;
    std::int64_t epoch_ = 0;
};

// Runs options.epochs epochs from scratch and returns the loss history.
// on_epoch, when set, observes each completed epoch.
std::vector<EpochRecord> train_model(
    PfvaeModel& model, std::vector<WindowSample> windows, const TrainOptions& options, Rng rng,
    const std::function<void(const EpochRecord&, Trainer&)>& on_epoch = {});

// Worker fan-out cap for independent sub-runs (folds, ablation variants).
// Reads FLOWDISAGG_THREADS; unset, empty, or invalid values mean 1.
int worker_thread_cap();

// Executes tasks 0..n_tasks-1 via task_fn on up to worker_thread_cap()
// threads. Tasks must be independent; exceptions are rethrown on the caller.
void run_tasks(std::int64_t n_tasks, const std::function<void(std::int64_t)>& task_fn);

}  // namespace flowdisagg

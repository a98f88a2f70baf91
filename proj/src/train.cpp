#include "flowdisagg/train.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <utility>

#include "flowdisagg/exceptions.hpp"

namespace flowdisagg {

void TrainOptions::validate() const {
    if (batch_size < 1) throw ContractError("TrainOptions: batch_size must be positive");
    if (epochs < 1) throw ContractError("TrainOptions: epochs must be positive");
    if (!(lr > 0.0)) throw ContractError("TrainOptions: lr must be positive");
}

Trainer::Trainer(PfvaeModel& model, std::vector<WindowSample> windows, TrainOptions options,
                 Rng rng)
    : model_(model),
      windows_(std::move(windows)),
      options_(options),
      rng_(rng),
      adam_(model.parameters(), AdamOptions{.lr = options.lr}) {
    options_.validate();
    if (windows_.empty()) throw ContractError("Trainer: window set is empty");
}

void Trainer::set_epoch(std::int64_t e) {
    if (e < 0) throw ContractError("Trainer: epoch must be non-negative");
    epoch_ = e;
}

EpochRecord Trainer::run_epoch() {
    const std::size_t n = windows_.size();
    const std::size_t bs = static_cast<std::size_t>(options_.batch_size);
    const std::vector<std::size_t> order = rng_.permutation(n);

    EpochRecord record;
    record.epoch = ++epoch_;
    std::vector<WindowSample> batch;
    for (std::size_t start = 0; start < n; start += bs) {
        const std::size_t stop = std::min(start + bs, n);
        batch.clear();
        for (std::size_t i = start; i < stop; ++i) batch.push_back(windows_[order[i]]);

        adam_.zero_grad();
        LossBreakdown loss = model_.training_step(batch);
        loss.total.backward();
        adam_.step();

        record.step_totals.push_back(loss.total.item_f64());
        const double w = static_cast<double>(stop - start);
        record.total += w * loss.total.item_f64();
        record.reconstruction += w * loss.reconstruction.item_f64();
        record.prior += w * loss.prior.item_f64();
    }
    record.total /= static_cast<double>(n);
    record.reconstruction /= static_cast<double>(n);
    record.prior /= static_cast<double>(n);
    return record;
}

std::vector<EpochRecord> train_model(
    PfvaeModel& model, std::vector<WindowSample> windows, const TrainOptions& options, Rng rng,
    const std::function<void(const EpochRecord&, Trainer&)>& on_epoch) {
    Trainer trainer(model, std::move(windows), options, rng);
    std::vector<EpochRecord> history;
    history.reserve(static_cast<std::size_t>(options.epochs));
    for (std::int64_t e = 0; e < options.epochs; ++e) {
        history.push_back(trainer.run_epoch());
        if (on_epoch) on_epoch(history.back(), trainer);
    }
    return history;
}

int worker_thread_cap() {
    const char* raw = std::getenv("FLOWDISAGG_THREADS");
    if (raw == nullptr || *raw == '\0') return 1;
    char* end = nullptr;
    const long value = std::strtol(raw, &end, 10);
    if (end == raw || *end != '\0' || value < 1) return 1;
    return static_cast<int>(value);
}

void run_tasks(std::int64_t n_tasks, const std::function<void(std::int64_t)>& task_fn) {
    if (n_tasks <= 0) return;
    const int cap = worker_thread_cap();
    if (cap <= 1 || n_tasks == 1) {
        for (std::int64_t i = 0; i < n_tasks; ++i) task_fn(i);
        return;
    }
    const int n_workers = static_cast<int>(std::min<std::int64_t>(cap, n_tasks));
    std::atomic<std::int64_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(n_workers));
    for (int w = 0; w < n_workers; ++w) {
        workers.emplace_back([&]() {
            for (;;) {
                const std::int64_t i = next.fetch_add(1);
                if (i >= n_tasks) return;
                try {
                    task_fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace flowdisagg

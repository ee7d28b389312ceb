#include <benchmark/benchmark.h>

#include "slmprop/engine/engine.hpp"
#include "slmprop/memory/memory_bank.hpp"
#include "slmprop/metrics/metrics.hpp"
#include "slmprop/nn/ops.hpp"
#include "slmprop/nn/rng.hpp"
#include "slmprop/nn/tape.hpp"
#include "slmprop/synth/scenario.hpp"

using namespace slmprop;

namespace {

nn::Tensor random_tensor(nn::Shape shape, uint64_t seed) {
    nn::Tensor t(std::move(shape));
    nn::Rng rng(seed);
    for (auto& v : t.data()) v = rng.normal();
    return t;
}

void BM_Conv2dForward(benchmark::State& state) {
    const int64_t c = state.range(0), hw = state.range(1);
    nn::Tensor x = random_tensor({1, c, hw, hw}, 1), w = random_tensor({c, c, 3, 3}, 2), b = random_tensor({c}, 3);
    for (auto _ : state) {
        nn::Tape t(false);
        nn::Var y = nn::conv2d(t.constant(x), t.constant(w), t.constant(b), {1, 1, 1});
        benchmark::DoNotOptimize(y.value().ptr());
    }
}
BENCHMARK(BM_Conv2dForward)->Args({8, 16})->Args({32, 32});

void BM_Conv2dBackward(benchmark::State& state) {
    const int64_t c = state.range(0), hw = state.range(1);
    nn::Tensor x = random_tensor({1, c, hw, hw}, 1), w = random_tensor({c, c, 3, 3}, 2), b = random_tensor({c}, 3);
    for (auto _ : state) {
        nn::Tape t;
        nn::Var y = nn::sum(nn::conv2d(t.leaf(x), t.leaf(w), t.leaf(b), {1, 1, 1}));
        t.backward(y);
        benchmark::ClobberMemory();
    }
}
BENCHMARK(BM_Conv2dBackward)->Args({8, 16})->Args({32, 32});

void BM_BankUpdate(benchmark::State& state) {
    memory::MemoryBank<int> bank(memory::kLongBank);
    int64_t i = 0;
    for (auto _ : state) {
        bank = memory::bank_update(std::move(bank), memory::MemoryEntry<int>{static_cast<int>(i), i, i % 50 == 0});
        ++i;
    }
    benchmark::DoNotOptimize(bank.size());
}
BENCHMARK(BM_BankUpdate);

void BM_Propagate(benchmark::State& state) {
    const auto mode = static_cast<attention::AblationMode>(state.range(0));
    engine::Model m = engine::init_model(engine::desk_config(mode), 7);
    auto c = synth::generate_case(synth::default_spec(synth::ScenarioKind::AdjacentDistractor, {16, 32, 32}, 3));
    const int64_t cond = engine::select_initial_slice(c.mask, 1, engine::InitialSliceRule::M_middle)[0];
    const io::Label2D prompt = c.mask.object_slice(cond, 1);
    for (auto _ : state) benchmark::DoNotOptimize(engine::propagate(m, c.volume, prompt, cond).probs.size());
    state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_Propagate)->Arg(static_cast<int>(attention::AblationMode::M_O))
    ->Arg(static_cast<int>(attention::AblationMode::M_O_plus_M_R1))->Unit(benchmark::kMillisecond);

void BM_ComputeReport(benchmark::State& state) {
    const int64_t n = state.range(0);
    auto spec = synth::default_spec(synth::ScenarioKind::GapReappear, {n, n, n}, 5);
    auto gt = synth::generate_case(spec).mask;
    spec.seed = 6;
    auto pred = synth::generate_case(spec).mask;
    for (auto _ : state) benchmark::DoNotOptimize(metrics::compute_report(pred, gt, 1).dsc_3d);
}
BENCHMARK(BM_ComputeReport)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_Bootstrap(benchmark::State& state) {
    std::vector<double> v(static_cast<size_t>(state.range(0)));
    nn::Rng rng(9);
    for (auto& x : v) x = rng.uniform();
    for (auto _ : state) benchmark::DoNotOptimize(metrics::bootstrap_ci(v, 1000, 1).lo);
}
BENCHMARK(BM_Bootstrap)->Arg(20)->Arg(200);

} // namespace

BENCHMARK_MAIN();

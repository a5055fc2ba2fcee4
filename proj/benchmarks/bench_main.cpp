#include <benchmark/benchmark.h>

#include "rsp/access.hpp"
#include "rsp/micromodel.hpp"
#include "rsp/prefix_opt.hpp"
#include "rsp/rng.hpp"
#include "rsp/stat_test.hpp"

namespace {

using namespace rsp;

const micro::MicroLM& model() {
    static const micro::MicroLM m(micro::ModelConfig{}, micro::Vocab::default_chars(), 1);
    return m;
}

std::vector<int> tokens(int n) {
    CounterRng r(3);
    std::vector<int> t(static_cast<std::size_t>(n));
    for (auto& v : t) v = static_cast<int>(r.below(64));
    return t;
}

void BM_Forward(benchmark::State& state) {
    const auto t = tokens(static_cast<int>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(micro::forward_logits(model(), t));
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(40)->Arg(128);

// Scoring a one-token edit near the end of a fixed prompt.
void BM_AnchoredEdit(benchmark::State& state) {
    const auto t = tokens(40);
    const micro::AnchoredScorer s(model(), t);
    auto edited = t;
    edited[35] = (edited[35] + 1) % 64;
    for (auto _ : state) benchmark::DoNotOptimize(s.logits(edited));
}
BENCHMARK(BM_AnchoredEdit);

void BM_GradOneHot(benchmark::State& state) {
    const auto& v = model().vocab();
    const auto prompt = v.encode("\nQ pick a to j\nA ");
    const auto cands = v.encode("abcdefghij");
    const micro::TokenOneHot oh(tokens(20), 64);
    for (auto _ : state) benchmark::DoNotOptimize(micro::grad_onehot(model(), oh, prompt, cands, cands[0]));
}
BENCHMARK(BM_GradOneHot);

void BM_GradPixels(benchmark::State& state) {
    const micro::MicroVLM vm(model(), micro::VisionConfig{16, 16, 4}, 2);
    const auto& v = model().vocab();
    const auto prompt = v.encode("\nQ pick a to j\nA ");
    const auto cands = v.encode("abcdefghij");
    micro::PixelGrid g(16, 16, 128);
    for (auto _ : state) benchmark::DoNotOptimize(micro::grad_pixels(vm, g, prompt, cands, cands[0]));
}
BENCHMARK(BM_GradPixels);

void BM_GcgStep(benchmark::State& state) {
    const auto ref = open_local("ref", model(), AccessLevel::Gradient);
    SelectionTask task{"\nQ pick a to j\nA ", {"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"}};
    OptimizerConfig cfg;
    cfg.use_unrelated = false;
    cfg.workers = 1;
    const Prefix x{TokenSeq{tokens(20)}, 0};
    for (auto _ : state) benchmark::DoNotOptimize(gcg_step(ref, nullptr, x, task, 0, cfg));
}
BENCHMARK(BM_GcgStep)->Unit(benchmark::kMillisecond);

void BM_BinomialTail(benchmark::State& state) {
    const int K = static_cast<int>(state.range(0));
    int x = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(binomial_tail_p(K, 26, x));
        x = (x + 7) % (K + 1);
    }
}
BENCHMARK(BM_BinomialTail)->Arg(100)->Arg(500)->Arg(5000);

}  // namespace
BENCHMARK_MAIN();

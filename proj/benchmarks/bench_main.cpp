#include <benchmark/benchmark.h>

#include "spcl/dataio.hpp"
#include "spcl/flops.hpp"
#include "spcl/rng.hpp"
#include "spcl/trainer.hpp"

using namespace spcl;

namespace {

// One [CLS] forward of the desk encoder on a single view.
void BM_ForwardView(benchmark::State& state) {
  const EncoderConfig cfg;
  CounterRng rng = make_stream(0, Stream::init);
  const EncoderParams params = init_params(cfg, rng);
  const ImageGray img = synthetic_image(SyntheticConfig{}, 0, 0);
  const PartitionPlan plan = plan_for(0, 0, 0, cfg.num_tokens(), state.range(0) / 100.0);
  for (auto _ : state) {
    Graph g;
    const BoundEncoder enc = bind_encoder(g, cfg, params, false);
    auto [z1, z2] = forward_pair(tokenize(img, enc), plan, enc);
    benchmark::DoNotOptimize(z1.value().data().data());
  }
}
BENCHMARK(BM_ForwardView)->Arg(0)->Arg(60)->Arg(90)->Unit(benchmark::kMillisecond);

// Loss and gradients for a batch: the per-step cost of pre-training.
void BM_Objective(benchmark::State& state) {
  const EncoderConfig cfg;
  TrainConfig tc;
  const TrainState st = init_state(cfg, tc);
  std::vector<ImageGray> imgs;
  std::vector<PartitionPlan> plans;
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    imgs.push_back(synthetic_image(SyntheticConfig{}, static_cast<std::size_t>(i), static_cast<int>(i % 4)));
    plans.push_back(plan_for(0, 0, static_cast<std::uint64_t>(i), cfg.num_tokens(), 0.6));
  }
  for (auto _ : state) {
    const auto r = compute_objective(st.encoder, st.params, st.loss, imgs, plans);
    benchmark::DoNotOptimize(r.loss.total);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Objective)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_CostModel(benchmark::State& state) {
  EncoderConfig vb;
  vb.depth = 12;
  vb.dim = 768;
  vb.heads = 12;
  vb.patch = 16;
  vb.image = 224;
  for (auto _ : state) benchmark::DoNotOptimize(spcl_step_cost(vb, 0.6).total);
}
BENCHMARK(BM_CostModel);

}  // namespace
BENCHMARK_MAIN();

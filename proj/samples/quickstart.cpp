// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

// Loads two synthetic adapters next to a toy base model, serves a short mixed
// trace and prints the latency summary.

#include <iostream>

#include "esft/serving.hpp"

int main() {
  using namespace esft;
  const ModelConfig cfg;  // L=4, M=64, K=6, H=64, I=32
  const BaseModel model = BaseModel::generate(cfg, /*seed=*/1);

  ExpertStore store(model, /*max_adapters=*/2, /*e_max=*/8, PageConfig{.page_size = 64 * 1024, .pool_capacity = 4096});
  AdapterRegistry registry(store);
  for (int i = 0; i < 2; ++i) {
    SyntheticTarget target;
    target.max_experts = 8;
    target.sparsity = 0.4;
    const AdapterFiles a = generate_synthetic_adapter(100 + i, cfg, target, "demo-" + std::to_string(i));
    const int slot = registry.load_adapter(a.manifest, a.weights);
    std::cout << a.manifest.name << " -> slot " << slot << ", layer 0 experts:";
    for (int id : a.manifest.layers[0]) std::cout << ' ' << id << "->" << registry.snapshot()->at(0, slot, id);
    std::cout << '\n';
  }
  std::cout << "pages mapped: " << store.pages_mapped() << '\n';

  WorkloadSpec w;
  w.num_adapters = 2;
  w.rate = 20;
  w.duration = 2;
  w.vocab = cfg.vocab;
  ServingEngine engine(model, registry, SchedulerConfig{});
  const ServeResult r = engine.serve(generate_trace(w));
  std::cout << r.metrics.to_json().dump(2) << '\n';
}

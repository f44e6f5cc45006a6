// Generate a few Lennard-Jones clusters, train the tiny model briefly, and compare
// predictions against the analytic labels.

#include <cstdio>
#include <iostream>

#include "escaip/escaip.hpp"

using namespace escaip;

int main() {
    SyntheticSpec spec;
    spec.count = 200;
    spec.seed = 7;
    const auto systems = synth_generate(spec);
    const DatasetSplit s = split(systems.size(), {0.8, 0.2, 0.0}, 7);
    const auto train_set = select(systems, s.train);
    const auto val_set = select(systems, s.val);

    ModelConfig cfg = ModelConfig::tiny();
    fit_normalization(cfg, train_set);
    std::printf("tiny model: %zu parameters\n", parameter_audit(cfg).total);

    auto state = TrainState<float>::init(Model<float>::create(cfg, 7));
    TrainConfig tc;
    tc.epochs = 5;
    tc.augment_copies = 4;
    std::cout << kMetricHeader << '\n';
    train(state, train_set, val_set, tc, &std::cout);

    const EvalReport r = evaluate(state.model, val_set);
    std::printf("val force MAE %.4f eV/A (zero predictor %.4f)\n", r.force_mae, zero_force_mae(val_set));
}

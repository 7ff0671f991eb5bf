"""Training dense linear attention from scratch on fresh prompts.

The coherent model (one attention layer over the full prompt, gradient
flowing through its own intermediate prediction) ends below the stepwise
pair trained on the same task, and both end near their closed-form optima.
Desk preset: SGD, batch 64, 2e4 steps, cosine decay. About 1.5 minutes.
"""

import time

from cotlab.montecarlo import ModelFamily, TrainConfig, evaluate, train
from cotlab.synthdata import TaskConfig
from cotlab.theory import cot_optimal_loss, icl_optimal_loss

cfg = TaskConfig(d=5, sigma2=0.25, D=80)

for family, label, theory in (
    (ModelFamily.COHERENT, "coherent", cot_optimal_loss(5, 0.25, 80).total),
    (ModelFamily.STEPWISE_PAIR, "stepwise", icl_optimal_loss(5, 0.25, 80).total),
):
    t0 = time.perf_counter()
    result = train(TrainConfig.desk(family, seed=0), cfg, family)
    wall = time.perf_counter() - t0
    est = evaluate(result.params, cfg, n=64_000, rng=[0])
    print(f"{label}: trained in {wall:.0f}s, eval MSE {est.mean:.4f} +- {est.stderr:.4f} "
          f"(structured optimum {theory:.4f})")
    for stage, curve in result.curves.items():
        steps, losses = curve[:, 0], curve[:, 1]
        marks = [0, len(steps) // 4, len(steps) // 2, 3 * len(steps) // 4, len(steps) - 1]
        trace = "  ".join(f"{int(steps[m])}:{losses[m]:.3f}" for m in marks)
        print(f"  {stage} curve  {trace}")

print()
print("dense attention is a strictly larger class than the structured scalars,")
print("so trained losses can dip below the structured optima; the ordering")
print("coherent < stepwise is what the theory predicts and training reproduces.")

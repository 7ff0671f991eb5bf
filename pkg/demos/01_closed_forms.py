"""Closed-form losses: the coherent process beats the stepwise one at every setting.

Both optima are O(1/D) expansions of the expected final-answer MSE. The gap
has the tidy form 16 / (D (u + 2)) with u = (d - 1) sigma2, so it decays like
1/D and is largest when the intermediate is nearly deterministic.
"""

from cotlab.theory import cot_optimal, cot_optimal_loss, icl_optimal_loss

print("optimal expected losses (d=5, sigma2=0.25)")
print(f"{'D':>6} {'stepwise':>12} {'coherent':>12} {'gap':>12} {'16/(D(u+2))':>12}")
u = (5 - 1) * 0.25
for D in (10, 20, 40, 80, 160, 320):
    icl = icl_optimal_loss(5, 0.25, D).total
    cot = cot_optimal_loss(5, 0.25, D).total
    print(f"{D:>6} {icl:>12.6f} {cot:>12.6f} {icl - cot:>12.6f} {16 / (D * (u + 2)):>12.6f}")

print()
print("optimal coherent ratios (v_x/v_y, v_z/v_y) across tasks")
print(f"{'d':>4} {'sigma2':>8} {'vx/vy':>10} {'vz/vy':>10}")
for d in (2, 5, 8):
    for sigma2 in (0.1, 0.25, 1.0, 4.0):
        r = cot_optimal(d, sigma2)
        print(f"{d:>4} {sigma2:>8.2f} {r.vx_over_vy:>10.4f} {r.vz_over_vy:>10.4f}")

print()
print("loss decomposition at d=5, sigma2=0.25, D=200")
loss = cot_optimal_loss(5, 0.25, 200)
print(f"  leading (noise floor)   {loss.leading:.6f}")
print(f"  1/D corrections         {loss.order_one_over_D:.6f}")
print(f"  total                   {loss.total:.6f}")
print("  named terms (already scaled, sum to the total):")
for name, value in loss.terms.items():
    print(f"    {name:<22}{value:+.6f}")

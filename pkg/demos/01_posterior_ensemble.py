"""Sample a posterior ensemble on two moons and look at what its uncertainty says.

Run with ``python3 demos/01_posterior_ensemble.py``; it takes about ten seconds.
"""
import numpy as np

from edgebayes.data import gen_synthetic
from edgebayes.ensemble import posterior_predictive
from edgebayes.metrics import evaluate
from edgebayes.nn import MlpSpec
from edgebayes.sampler import SgldConfig, TrainConfig, deep_ensemble, sgld_ensemble

Xtr, ytr = gen_synthetic("moons", 400, 0.2, 1)
Xte, yte = gen_synthetic("moons", 400, 0.2, 2)
# the same moons, rotated and pushed away from the training data
Xood, _ = gen_synthetic("moons", 200, 0.2, 3, ood_shift=(0.5, 3.0, 3.0))

spec = MlpSpec((2, 32, 32, 2))
print(spec.layer_widths, spec.n_params, "parameters per member")

# 20 SGLD samples, one every 50 steps after a 2000-step burn-in
sgld = sgld_ensemble(spec, Xtr, ytr, SgldConfig(learning_rate=3e-4, burn_in=2000, thinning=50,
                                                n_samples=20, seed=4))
# five independently initialized SGD runs for comparison
deep = deep_ensemble(spec, Xtr, ytr, 5, TrainConfig(epochs=50, learning_rate=0.1))

# Three probe points: a class-0 point, one on the decision boundary, one far away.
probes = np.array([[-0.8, 0.5], [0.5, 0.25], [6.0, 6.0]])
res = posterior_predictive(sgld, probes)
print("\nprobe              p(class 1)  total  knowledge  data")
for x, p, t, k, d in zip(probes, res.probs, res.total_u, res.knowledge_u, res.data_u):
    print(f"{str(x):18s} {p[1]:10.3f} {t:6.3f} {k:10.3f} {d:5.3f}")

# The boundary point is uncertain because the data are ambiguous there (data
# uncertainty). Far away, the members disagree with each other, which shows
# up as knowledge uncertainty.

for name, e in (("sgld", sgld), ("deep ensemble", deep)):
    rep = evaluate(e, Xte, yte, Xood, time_latency=False)
    print(f"\n== {name} ({e.size} members)")
    print(rep.to_text())

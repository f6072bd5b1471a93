"""Replace a 20-member ensemble with a single student network.

BDK matches the averaged predictive distribution, GPED regresses one
posterior expectation (here the expected data uncertainty), and EnD2 fits a
Dirichlet so the student can still split its uncertainty into knowledge and
data parts.
"""
import numpy as np

from edgebayes.data import gen_synthetic
from edgebayes.distill import BDK, END2, GPED, DistillConfig, distill, student_uncertainty
from edgebayes.ensemble import batched_infer, decompose_uncertainty
from edgebayes.nn import MlpSpec, count_macs
from edgebayes.sampler import SgldConfig, TrainConfig, sgld_ensemble

Xtr, ytr = gen_synthetic("moons", 400, 0.2, 1)
spec = MlpSpec((2, 32, 32, 2))
teacher = sgld_ensemble(spec, Xtr, ytr, SgldConfig(learning_rate=3e-4, burn_in=2000, thinning=50,
                                                   n_samples=20, seed=4))

g = np.linspace(-1.5, 2.5, 100)
h = np.linspace(-1.0, 1.5, 100)
grid = np.array([(a, b) for a in g for b in h])
member_probs = batched_infer(teacher, grid)
t_total, t_know, t_data = decompose_uncertainty(member_probs)

students = {
    BDK: distill(teacher, Xtr, DistillConfig(spec, TrainConfig(epochs=50, learning_rate=0.05))),
    GPED: distill(teacher, Xtr, DistillConfig(MlpSpec((2, 32, 32, 1)),
                                              TrainConfig(epochs=60, learning_rate=0.05, batch_size=64),
                                              GPED, jitter_copies=9, jitter_scale=0.2)),
    # Dirichlet gradients shrink like 1/alpha, so EnD2 trains with Adam
    END2: distill(teacher, Xtr, DistillConfig(spec, TrainConfig(epochs=30, learning_rate=0.01), END2,
                                              optimizer="adam")),
}

print(f"teacher: {teacher.size} members, {teacher.size * count_macs(spec)} MACs per prediction")
print(f"student: 1 network, {count_macs(spec)} MACs per prediction\n")

agree = (students[BDK].predict(grid).argmax(axis=1) == member_probs.mean(axis=0).argmax(axis=1)).mean()
print(f"BDK  argmax agreement on a 100x100 grid: {agree:.4f}")

Xh, _ = gen_synthetic("moons", 400, 0.2, 9)
target = decompose_uncertainty(batched_infer(teacher, Xh))[2]
rmse = np.sqrt(((students[GPED].predict(Xh) - target) ** 2).mean())
rmse_grid = np.sqrt(((students[GPED].predict(grid) - t_data) ** 2).mean())
# the grid reaches regions with no training data, where the regression is extrapolating
print(f"GPED expected-data-uncertainty RMSE: {rmse:.4f} nats on held-out data, {rmse_grid:.4f} on the grid")

s_total, s_know, s_data = student_uncertainty(students[END2], grid)
print(f"EnD2 grid means: total {s_total.mean():.3f} (teacher {t_total.mean():.3f}), "
      f"knowledge {s_know.mean():.3f} (teacher {t_know.mean():.3f}), data {s_data.mean():.3f} "
      f"(teacher {t_data.mean():.3f})")
# Away from the data the student underestimates knowledge uncertainty: the
# distill set only covers the training inputs plus small jitter.

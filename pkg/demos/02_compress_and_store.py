"""Prune, quantize and archive an ensemble, then check what it costs in bytes and accuracy.

Two routes to a sparse ensemble are compared:

* prune the sampled members directly (fast, but SGLD samples are diffuse and
  lose accuracy quickly as the rate grows);
* prune a single MAP network with fine-tuning first, then run SGLD inside
  its support so every member shares the same non-zero pattern.
"""
import numpy as np

from edgebayes import archive
from edgebayes.bench import format_table, pareto_sweep
from edgebayes.data import gen_synthetic
from edgebayes.ensemble import predict_class
from edgebayes.nn import MlpSpec
from edgebayes.pruning import PruneSchedule, iterative_prune_finetune
from edgebayes.sampler import SgldConfig, TrainConfig, sgd_train, sgld_ensemble
from edgebayes.sparse import SIE, sparsify_ensemble, storage_reduction

Xtr, ytr = gen_synthetic("moons", 400, 0.2, 1)
Xte, yte = gen_synthetic("moons", 400, 0.2, 2)
spec = MlpSpec((2, 32, 32, 2))
cfg = SgldConfig(learning_rate=3e-4, burn_in=2000, thinning=50, n_samples=20, seed=4)


def acc(e):
    return float((predict_class(e, Xte) == yte).mean())


# --- route 1: prune the samples --------------------------------------------
teacher = sgld_ensemble(spec, Xtr, ytr, cfg)
rows = pareto_sweep(teacher, Xte, yte, rates=(0, 50, 80), dtypes=("f32", "q8"))
print("pruning the SGLD samples directly")
print(format_table(rows))

# --- route 2: sample inside a pruned support ---------------------------------
dense = sgd_train(spec, Xtr, ytr, TrainConfig(epochs=100, learning_rate=0.1))
sparse, mask = iterative_prune_finetune(spec, dense, Xtr, ytr, PruneSchedule(37.5, 5, 10),
                                        TrainConfig(learning_rate=0.1))
# the mask never removes biases, so they stay free during sampling
ens = sgld_ensemble(spec, Xtr, ytr, cfg, init=sparse, mask=mask.keep)
print(f"\nMAP net pruned to {mask.weight_sparsity:.1%} weight sparsity; SGLD inside that support")

se = sparsify_ensemble(ens, mask.keep, SIE)
for fmt in ("dense", "coo", "sie"):
    for dtype in ("f32", "q8"):
        buf = archive.encode(se, fmt=fmt, dtype=dtype)
        back = archive.decode(buf)[0]
        back = back.to_ensemble() if hasattr(back, "to_ensemble") else back
        print(f"{fmt:5s} {dtype}: {len(buf):7d} bytes, accuracy {acc(back):.4f}")

n = se.nnz(0)
print(f"\n{n} shared non-zeros x {se.n_members} members: SIE saves "
      f"{storage_reduction(n, se.n_members):.1%} of the per-member COO words")
print("unpruned SGLD accuracy", acc(teacher), "| sparse-support accuracy", acc(ens))
print("every member is zero outside the support:", bool(np.all(ens.members[:, ~mask.keep] == 0)))

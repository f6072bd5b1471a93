"""``edgebayes`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or archive format error,
3 numeric failure. Results go to stdout, errors to stderr. Every run ends
with a ``repro`` line carrying the seed and a hash of the full configuration.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, archive, bench
from .data import UNLABELED, gen_synthetic, read_csv, to_csv, write_csv
from .distill import BDK, END2, GPED, GPED_TARGETS, DistillConfig, Student, distill
from .ensemble import PosteriorEnsemble
from .errors import (DataError, DimensionError, DomainError, EdgeBayesError, FormatError, MethodError,
                     NumericError, ParameterError, StructureError)
from .metrics import evaluate, predictive
from .nn import DTYPES, MlpSpec, init_params
from .pruning import (FINETUNE, PER_MEMBER, REWIND, SHARED, PruneSchedule, iterative_prune_finetune,
                      iterative_prune_rewind, prune_ensemble, structured_prune_ensemble)
from .sampler import (CyclicSchedule, SgldConfig, TrainConfig, deep_ensemble, mc_dropout_ensemble,
                      sgd_train, sgld_ensemble, snapshot_ensemble)
from .sparse import COO_PER_MEMBER, SparseEnsemble, bias_columns, sparsify_ensemble

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _widths(text: str) -> MlpSpec:
    try:
        return MlpSpec(tuple(int(v) for v in text.split(",")))
    except ValueError:
        raise UsageError(f"bad layer widths {text!r}; expected e.g. 2,32,32,2") from None


def _floats(text: str):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _load(path):
    try:
        return archive.load_archive(path)
    except OSError as exc:
        raise DataError(f"cannot read archive {path}: {exc}") from None


def _as_ensemble(obj) -> PosteriorEnsemble:
    if isinstance(obj, SparseEnsemble):
        return obj.to_ensemble()
    if isinstance(obj, PosteriorEnsemble):
        return obj
    raise UsageError("this command needs an ensemble archive, not a distilled student")


def _labeled(path, spec=None):
    X, y = read_csv(path)
    if (y == UNLABELED).any():
        raise DataError(f"{path}: training data must be labeled")
    if spec is not None and X.shape[1] != spec.n_inputs:
        raise DataError(f"{path}: {X.shape[1]} features, model expects {spec.n_inputs}")
    return X, y


def _train_cfg(a) -> TrainConfig:
    return TrainConfig(epochs=a.epochs, batch_size=a.batch_size, learning_rate=a.lr,
                       prior_precision=a.prior_precision, seed=a.seed)


def _save(obj, path, out, fmt=None, dtype="f32"):
    n = archive.save_archive(obj, path, fmt=fmt, dtype=dtype)
    out(f"wrote {path} ({n} bytes)")


def support_mask(params) -> np.ndarray:
    """Non-zero weights plus every bias of a pruned model."""
    keep = params.theta != 0
    keep[bias_columns(params_spec(params))] = True
    return keep


def params_spec(params) -> MlpSpec:
    lay = params.layout
    return MlpSpec(tuple([lay[0].n_in] + [ls.n_out for ls in lay]))


def config_hash(args: dict) -> str:
    blob = json.dumps(args, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(a, out):
    shift = tuple(a.ood_shift) if a.ood_shift else None
    X, y = gen_synthetic(a.task, a.n, a.noise, a.seed, ood_shift=shift)
    if a.out is None:
        out(to_csv(X, y).rstrip("\n"))
        return
    write_csv(a.out, X, y)
    out(f"wrote {a.out} ({len(X)} rows, task={a.task}{', ood' if shift else ''})")


def cmd_train(a, out):
    spec = _widths(a.widths)
    X, y = _labeled(a.data, spec)
    p = sgd_train(spec, X, y, _train_cfg(a))
    e = PosteriorEnsemble(spec, [p], {"sampler": "sgd", "seeds": [a.seed],
                                      "config": vars(_train_cfg(a))})
    _save(e, a.out, out)


def cmd_sample(a, out):
    spec = _widths(a.widths)
    X, y = _labeled(a.data, spec)
    tc = _train_cfg(a)
    if a.method == "sgld":
        cfg = SgldConfig(**vars(tc), burn_in=a.burn_in, thinning=a.thinning, n_samples=a.samples)
        cfg = replace(cfg, learning_rate=a.step_size)
        init = mask = None
        if a.support:
            base = _as_ensemble(_load(a.support))
            if base.size != 1 or base.spec != spec:
                raise UsageError("--support needs a single-model archive with the same widths")
            init = base.member(0)
            mask = support_mask(init)
            out(f"sampling inside a support of {int(mask.sum())} of {mask.size} parameters")
        e = sgld_ensemble(spec, X, y, cfg, init=init, mask=mask)
    elif a.support:
        raise UsageError("--support is only used with --method sgld")
    elif a.method == "deep-ensemble":
        e = deep_ensemble(spec, X, y, a.samples, tc)
    elif a.method == "snapshot":
        cycle = a.cycle_length or max(1, a.epochs * -(-len(X) // a.batch_size) // a.samples)
        sched = CyclicSchedule(cycle, a.lr, a.lr_min, snapshots_per_run=a.samples)
        e = snapshot_ensemble(spec, X, y, tc, sched)
    else:
        base = sgd_train(spec, X, y, tc)
        e = mc_dropout_ensemble(spec, base, a.dropout_rate, a.samples, a.seed)
    out(f"sampled {e.size} members with {a.method}")
    _save(e, a.out, out)


def cmd_prune(a, out):
    e = _as_ensemble(_load(a.model))
    if a.mode == "structured":
        small, units = structured_prune_ensemble(e, a.rate)
        out(f"hidden widths {list(e.spec.layer_widths[1:-1])} -> {list(small.spec.layer_widths[1:-1])}")
        _save(small, a.out, out)
        return
    if a.mode == REWIND or (a.data and e.size == 1):
        if e.size != 1:
            raise UsageError("retraining modes need a single-model archive")
        if not a.data:
            raise UsageError("--mode rewind needs --data")
        X, y = _labeled(a.data, e.spec)
        cfg = TrainConfig(batch_size=a.batch_size, learning_rate=a.lr,
                          prior_precision=a.prior_precision, seed=a.seed)
        sched = PruneSchedule(a.rate, a.cycles, a.finetune_epochs, REWIND if a.mode == REWIND else FINETUNE)
        if a.mode == REWIND:
            p, mask = iterative_prune_rewind(e.spec, init_params(e.spec, a.seed), X, y, sched, cfg)
        else:
            p, mask = iterative_prune_finetune(e.spec, e.member(0), X, y, sched, cfg)
        e = e.with_members([p], pruning={"rate": a.rate, "cycles": a.cycles, "mode": a.mode})
        se = sparsify_ensemble(e, mask.keep[None], COO_PER_MEMBER)
        out(f"weight sparsity {mask.weight_sparsity:.4f}")
        _save(se, a.out, out)
        return
    mode = a.ensemble_mode
    se = prune_ensemble(e, a.rate, mode, a.cycles)
    total = sum(ls.n_out * ls.n_in for ls in e.spec.layout)
    nnz = [se.nnz(s) for s in range(se.n_members)]
    out(f"weight sparsity {1.0 - float(np.mean(nnz)) / total:.4f} ({mode}, format {se.fmt})")
    _save(se, a.out, out)


def cmd_pack(a, out):
    obj = _load(a.model)
    if isinstance(obj, Student):
        if a.format != archive.DENSE:
            raise UsageError("students are stored densely")
        _save(obj, a.out, out, dtype=a.dtype)
        return
    if a.time:
        e = _as_ensemble(obj)
        src = obj if a.format != archive.DENSE else e
        buf, total, per_member = archive.pack_timed(src, fmt=a.format, dtype=a.dtype)
        res = bench.pack_linearity(e, fmt=a.format, dtype=a.dtype)
        out(f"pack_total_s = {total!r}")
        out(f"pack_member_s_mean = {float(np.mean(per_member))!r}")
        out(f"pack_linearity_ratio = {res['ratio']!r}")
    else:
        buf = archive.encode(obj, fmt=a.format, dtype=a.dtype)
    Path(a.out).write_bytes(buf)
    acct = archive.account(buf)
    out(f"wrote {a.out} ({len(buf)} bytes)")
    out(f"payload_bytes = {acct.payload_bytes}")
    out(f"index_words = {acct.index_words}")
    out(f"value_words = {acct.value_words}")


def cmd_distill(a, out):
    e = _as_ensemble(_load(a.model))
    X, _ = _labeled(a.data, e.spec)
    hidden = [int(v) for v in a.hidden.split(",")] if a.hidden else list(e.spec.layer_widths[1:-1])
    n_out = 1 if a.method == GPED else e.spec.n_outputs
    spec = MlpSpec(tuple([e.spec.n_inputs] + hidden + [n_out]))
    opt = a.optimizer if a.optimizer != "auto" else ("adam" if a.method == END2 else "sgd")
    cfg = DistillConfig(spec, _train_cfg(a), a.method, gped_target=a.target, optimizer=opt)
    st = distill(e, X, cfg)
    hist = st.provenance["loss_history"]
    out(f"distilled {a.method} student {list(spec.layer_widths)}; loss {hist[0]:.6g} -> {hist[-1]:.6g}")
    _save(st, a.out, out)


def cmd_infer(a, out):
    obj = _load(a.model)
    x = np.asarray(_floats(a.input))
    if isinstance(obj, Student) and obj.method == GPED:
        out(json.dumps({"prediction": float(obj.predict(x[None])[0]), "target": obj.provenance.get("gped_target")}))
        return
    p, t, k, d = predictive(obj, x[None])
    out(json.dumps({"probs": p[0].tolist(), "class": int(np.argmax(p[0])),
                    "total": float(t[0]), "knowledge": float(k[0]), "data": float(d[0])}))


def cmd_eval(a, out):
    obj = _load(a.model)
    X, y = _labeled(a.test)
    X_ood = read_csv(a.ood)[0] if a.ood else None
    rep = evaluate(obj, X, y, X_ood, bins=a.bins, time_latency=a.latency, dtype=a.dtype)
    text = rep.to_text()
    if not a.latency:
        text = "".join(l + "\n" for l in text.splitlines() if not l.startswith("latency_s"))
    out(text.rstrip("\n"))
    if a.out:
        d = rep.to_dict()
        if not a.latency:
            d.pop("latency_s")
        Path(a.out).write_text(json.dumps(d, sort_keys=True, indent=1) + "\n")


def cmd_bench(a, out):
    e = _as_ensemble(_load(a.model))
    did = False
    if a.pareto:
        if not a.test:
            raise UsageError("--pareto needs --test")
        X, y = _labeled(a.test, e.spec)
        rates = _floats(a.rates)
        dtypes = a.dtypes.split(",")
        bad = [d for d in dtypes if d not in DTYPES]
        if bad:
            raise UsageError(f"unknown dtype(s) {bad}")
        rows = bench.pareto_sweep(e, X, y, rates, dtypes, a.ensemble_mode)
        out(bench.format_table(rows).rstrip("\n"))
        did = True
    if a.batched:
        r = bench.batched_vs_sequential(e, seed=a.seed)
        out(bench.format_table([r]).rstrip("\n"))
        did = True
    if not did:
        raise UsageError("choose at least one of --pareto, --batched")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _train_opts(p, epochs=100, lr=0.1):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--prior-precision", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")

    ap = _Parser(prog="edgebayes", description="Compress Bayesian neural ensembles for small devices.",
                 parents=[common])
    ap.add_argument("--version", action="version", version=f"edgebayes {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset as CSV")
    p.add_argument("--task", choices=["moons", "blobs"], default="moons")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--ood-shift", type=float, nargs=3, metavar=("ANGLE", "DX", "DY"),
                   help="rotate and translate the points; rows are labeled -1")
    p.add_argument("--out", help="CSV path (default: write the CSV to stdout)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one MAP model with SGD")
    p.add_argument("--data", required=True)
    p.add_argument("--widths", default="2,32,32,2")
    _train_opts(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="build a posterior ensemble")
    p.add_argument("--data", required=True)
    p.add_argument("--widths", default="2,32,32,2")
    p.add_argument("--method", choices=["sgld", "deep-ensemble", "snapshot", "mc-dropout-ll"], default="sgld")
    p.add_argument("--samples", type=int, default=20)
    _train_opts(p)
    p.add_argument("--step-size", type=float, default=3e-4, help="SGLD step size")
    p.add_argument("--burn-in", type=int, default=2000)
    p.add_argument("--thinning", type=int, default=50)
    p.add_argument("--cycle-length", type=int, default=0, help="snapshot cycle length in steps")
    p.add_argument("--lr-min", type=float, default=1e-3)
    p.add_argument("--dropout-rate", type=float, default=0.2)
    p.add_argument("--support", help="pruned single-model archive; SGLD stays inside its non-zeros "
                                     "and starts from its weights")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("prune", parents=[common], help="prune a model or ensemble")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=["unstructured", "structured", "rewind"], default="unstructured")
    p.add_argument("--rate", type=float, required=True, help="percent removed per cycle")
    p.add_argument("--cycles", type=int, default=1)
    p.add_argument("--ensemble-mode", choices=[PER_MEMBER, SHARED], default=SHARED)
    p.add_argument("--data", help="training CSV; enables fine-tuning of single models")
    p.add_argument("--finetune-epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--prior-precision", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("pack", parents=[common], help="re-encode an archive")
    p.add_argument("--model", required=True)
    p.add_argument("--format", choices=list(archive.FORMATS), default=archive.DENSE)
    p.add_argument("--dtype", choices=list(DTYPES), default="f32")
    p.add_argument("--time", action="store_true", help="report packing wall times")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("distill", parents=[common], help="distill an ensemble into one student")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=[BDK, GPED, END2], default=BDK)
    p.add_argument("--target", choices=sorted(GPED_TARGETS), default="expected_data_uncertainty")
    p.add_argument("--hidden", help="student hidden widths, e.g. 32,32 (default: teacher's)")
    p.add_argument("--optimizer", choices=["auto", "sgd", "adam"], default="auto",
                   help="auto picks adam for end2 and sgd otherwise")
    _train_opts(p, epochs=50, lr=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("infer", parents=[common], help="predict one input vector")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="comma-separated features")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="compute the metrics report")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--ood")
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--dtype", choices=list(DTYPES), default="f32", help="dtype used for the size figure")
    p.add_argument("--latency", action="store_true", help="also time single-input latency")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="trade-off sweeps and timing")
    p.add_argument("--model", required=True)
    p.add_argument("--pareto", action="store_true", help="sweep pruning rates x dtypes")
    p.add_argument("--batched", action="store_true", help="time batched vs sequential inference")
    p.add_argument("--test")
    p.add_argument("--rates", default="0,50,80,90,95")
    p.add_argument("--dtypes", default="f32,f16,q8")
    p.add_argument("--ensemble-mode", choices=[PER_MEMBER, SHARED], default=SHARED)
    p.set_defaults(func=cmd_bench)
    return ap


def _exit_code(exc) -> int:
    if isinstance(exc, (UsageError, ParameterError, MethodError)):
        return EXIT_USAGE
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr

    def out(line):
        print(line, file=stdout)

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if not hasattr(args, "seed"):
        args.seed = 0
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    try:
        args.func(args, out)
    except (UsageError, EdgeBayesError, DimensionError, DomainError, StructureError, FormatError) as exc:
        print(f"error: {exc}", file=stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=stderr)
        return EXIT_NUMERIC
    # keep a CSV on stdout clean
    note = stderr if args.command == "gen-data" and args.out is None else stdout
    print(f"repro seed={args.seed} config_sha256={config_hash(cfg)} version={__version__}", file=note)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

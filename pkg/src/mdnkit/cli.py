"""Command line harness: ``mdnkit <command> [--config PATH] [--seed S] ...``.

Commands write everything under ``--out`` together with a manifest
``<command>.manifest.json`` holding the resolved config, the member seeds,
file-format versions and a SHA-256 digest of every output.  ``mdnkit replay
MANIFEST`` re-runs a command from its manifest and checks the digests.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__, kernels, persist
from . import experiments as ex
from . import metrics as me
from .config import ConfigError, dump_config, from_dict, load_config
from .mdn import component_report, mixture_entropy
from .optim import TrainingDiverged

log = logging.getLogger("mdnkit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
DATA_EFFICIENCY_SIZES = (50, 100, 200, 500, 1000, 2000, 5000, 10000)
COMMANDS = ("generate", "train", "evaluate", "rollout", "ablate-k", "interpret", "report")


class NumericFailure(RuntimeError):
    """Every ensemble member failed, or a result is not finite."""


# ------------------------------------------------------------------ run context
class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, command: str, cfg, args: dict, out: Path):
        self.command, self.cfg, self.args, self.out = command, cfg, args, out
        self.outputs: list[Path] = []
        self.failures: list[dict] = []
        self.notes: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def write_csv(self, rel: str, header, rows) -> Path:
        p = self.path(rel)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(v) for v in r])
        return p

    def manifest(self) -> Path:
        digests = {str(p.relative_to(self.out)): _sha256(p) for p in dict.fromkeys(self.outputs)}
        body = {
            "command": self.command,
            "args": self.args,
            "config": self.cfg.to_dict(),
            "seeds": self.cfg.member_seeds(),
            "formats": {"checkpoint": f"{persist.FORMAT_MAJOR}.{persist.FORMAT_MINOR}",
                        "dataset": f"{persist.FORMAT_MAJOR}.{persist.FORMAT_MINOR}"},
            "mdnkit_version": __version__,
            "kernels": kernels.BACKEND,
            "outputs": digests,
            "failures": self.failures,
            "notes": self.notes,
        }
        p = self.out / f"{self.command}.manifest.json"
        p.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return p


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------------ helpers
def _sizes(args, cfg) -> list[int]:
    raw = getattr(args, "sizes", None)
    if not raw:
        return [cfg.data.N]
    if raw == "sweep":
        return list(DATA_EFFICIENCY_SIZES)
    try:
        sizes = [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sizes: expected comma-separated integers or 'sweep', got {raw!r}") from None
    if not sizes or min(sizes) < 1:
        raise ConfigError("--sizes: need positive sizes")
    return sizes


def _with_N(cfg, N: int):
    d = cfg.to_dict()
    d["data"]["N"] = N
    return from_dict(d)


def _member_name(seed: int) -> str:
    return f"member-{seed:04d}"


def _save_members(run: Run, ens: ex.Ensemble, subdir: str) -> None:
    for model, res in zip(ens.models, ens.results):
        name = _member_name(res.seed)
        persist.save_checkpoint(run.path(f"{subdir}/{name}.ckpt"), model, seed=res.seed,
                                step=run.cfg.train.iterations,
                                extra={"experiment": run.cfg.experiment, "N": ens.cfg.data.N})
        run.write_csv(f"{subdir}/{name}.loss.csv", ("step", "loss", "lr"),
                      ((int(s), l, lr) for s, l, lr in res.history))
    for seed, err in ens.failures:
        run.failures.append({"dir": subdir, "seed": seed, "error": err})
        log.warning("member %d failed: %s", seed, err)


def _train(run: Run, cfg, subdir: str, ds=None) -> ex.Ensemble:
    log.info("training %d x %s on %s (N=%d, %d iterations)", cfg.ensemble_size, cfg.model, cfg.experiment,
             cfg.data.N, cfg.train.iterations)
    ens = ex.train_members(cfg, ds)
    _save_members(run, ens, subdir)
    if not ens.models:
        raise NumericFailure(f"all {cfg.ensemble_size} members failed; first error: {ens.failures[0][1]}")
    return ens


def _load_members(directory: Path, expected: list[int] | None = None) -> tuple[list, list[int]]:
    files = sorted(directory.glob("member-*.ckpt"))
    if not files:
        raise FileNotFoundError(f"no member checkpoints in {directory}")
    models, seeds = [], []
    for f in files:
        m, head = persist.load_checkpoint(f, with_header=True)
        models.append(m)
        seeds.append(int(head["seed"]))
    if expected is not None:
        missing = sorted(set(expected) - set(seeds))
        if missing:
            log.warning("%s: %d member(s) missing (seeds %s); reporting the rest", directory, len(missing), missing)
    return models, seeds


def _rows_csv(run: Run, rel: str, rows) -> None:
    run.write_csv(rel, me.ReportRow.FIELDS, ((r.method, r.N, r.seed_count, r.metric, r.mean, r.std) for r in rows))


def _print_rows(rows) -> None:
    print(f"{'method':<12} {'N':>6} {'seeds':>5} {'metric':<9} {'mean':>12} {'std':>10}")
    for r in rows:
        print(f"{r.method:<12} {r.N:>6} {r.seed_count:>5} {r.metric:<9} {r.mean:>12.4f} {r.std:>10.4f}")


# ------------------------------------------------------------------ commands
def cmd_generate(run: Run, args) -> None:
    cfg = run.cfg
    for split, ds in (("train", ex.train_data(cfg)), ("test", ex.test_data(cfg))):
        p = run.path(f"{split}.data")
        persist.save_dataset(p, ds)
        digest = hashlib.sha256(np.ascontiguousarray(ds.Y, dtype="<f8").tobytes()).hexdigest()[:16]
        print(f"{split}: generator={ds.meta['generator']} N={len(ds)} d_in={ds.d_in} d_out={ds.d_out} "
              f"targets-sha256={digest} -> {p}")


def cmd_train(run: Run, args) -> None:
    cfg = run.cfg
    given = persist.load_dataset(args.data) if args.data else None
    for N in _sizes(args, cfg):
        c = _with_N(cfg, N) if given is None else _with_N(cfg, len(given))
        ens = _train(run, c, f"members/N{c.data.N}", given)
        final = [float(np.mean(r.history[-100:, 1])) for r in ens.results]
        print(f"N={c.data.N}: {len(ens.models)}/{c.ensemble_size} members trained; "
              f"final loss (last 100 steps) {np.mean(final):.4f}")


def _lorenz_rows(run: Run, cfg, models, method: str, truth, tag: str) -> list[me.ReportRow]:
    cache: dict = {}
    vals = []
    for i, m in enumerate(models):
        res = ex.lorenz_evaluate(cfg, m, truth, method, cache)
        vals.append(res.mmd_max)
        me.write_curve_csv(run.path(f"{tag}/mmd_curve-{i:02d}.csv"), me.KernelSweep().scales, res.curve)
        run.notes.setdefault("diverged_rollouts", {})[f"{tag}/{i}"] = res.diverged
    mu, sd = me.mean_std(vals)
    return [me.ReportRow(method, cfg.data.N, len(vals), "mmd_max", mu, sd)]


def cmd_evaluate(run: Run, args) -> None:
    cfg = run.cfg
    root = Path(args.checkpoints) if args.checkpoints else run.out / "members"
    rows = []
    for N in _sizes(args, cfg):
        c = _with_N(cfg, N)
        d = root / f"N{N}" if (root / f"N{N}").is_dir() else root
        models, _ = _load_members(d, c.member_seeds())
        test = ex.test_data(c)
        if c.experiment == "lorenz":
            rows += _lorenz_rows(run, c, models, c.model, test, f"N{N}")
        else:
            if c.model == "mse":
                raise ConfigError("model: test NLL needs a mixture model (mse has no density)")
            rows.append(me.evaluate_run(models, test, c.model, N))
        if args.surface and c.experiment == "inverse_sine":
            _surface(run, models[0], f"N{N}/", args.slice_y)
    for r in rows:
        if not math.isfinite(r.mean):
            raise NumericFailure(f"non-finite {r.metric} for {r.method} at N={r.N}")
    _rows_csv(run, "report.csv", rows)
    _print_rows(rows)


def cmd_rollout(run: Run, args) -> None:
    cfg = run.cfg
    if cfg.experiment != "lorenz":
        raise ConfigError("experiment: rollout needs the lorenz experiment")
    models, seeds = _load_members(Path(args.checkpoints) if args.checkpoints else run.out / "members" /
                                  f"N{cfg.data.N}")
    model = models[0]
    truth = ex.test_data(cfg)
    steps = cfg.eval.rollout_steps if args.steps is None else args.steps
    ro = ex.lorenz_rollout(cfg, model, truth, steps=steps)
    run.write_csv("rollout.csv", ("rollout", "step", "x", "y", "z"),
                  ((r, t, *ro.states[r, t]) for r in range(ro.states.shape[0]) for t in range(ro.states.shape[1])))
    run.write_csv("rollout_status.csv", ("rollout", "diverged", "length"),
                  ((r, int(ro.diverged[r]), int(ro.lengths[r])) for r in range(len(ro.diverged))))
    if steps > cfg.eval.burn_in:
        c = from_dict({**cfg.to_dict(), "eval": {**cfg.to_dict()["eval"], "rollout_steps": steps}})
        res = ex.lorenz_evaluate(c, model, truth, model.kind)
        me.write_curve_csv(run.path("mmd_curve.csv"), me.KernelSweep().scales, res.curve)
        summary = {"method": model.kind, "seed": seeds[0], "mmd_max": res.mmd_max,
                   "radial_extent": res.radial_extent, "truth_radial_extent": res.truth_extent,
                   "diverged": res.diverged, "steps": steps}
        run.path("mmd.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        print(f"{model.kind}: max MMD^2 {res.mmd_max:.4e} over {len(ro.diverged)} rollouts "
              f"({res.diverged} diverged)")
    else:
        print(f"rolled out {len(ro.diverged)} trajectories for {steps} steps (too short for MMD after burn-in)")


def cmd_ablate_k(run: Run, args) -> None:
    cfg = run.cfg
    try:
        ks = [int(k) for k in args.ks.split(",") if k.strip()]
    except ValueError:
        raise ConfigError(f"--ks: expected comma-separated integers, got {args.ks!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError("--ks: every K must be >= 1")
    if cfg.model == "mse":
        raise ConfigError("model: K ablation needs a mixture model")
    ds = ex.train_data(cfg)
    test = ex.test_data(cfg)
    rows = []
    for K in ks:
        c = from_dict({**cfg.to_dict(), "K": K})
        ens = _train(run, c, f"ablation/K{K}", ds)
        row = me.evaluate_run(ens.models, test, f"{c.model}-K{K}", c.data.N)
        rows.append(row)
        rep = component_report(ens.models[0], test.X)
        run.write_csv(f"ablation/K{K}/components.csv", ("rank", "component", "marginal", "alpha_min", "alpha_max"),
                      ((d["rank"], d["component"], d["marginal"], d["alpha_min"], d["alpha_max"])
                       for d in rep.to_rows()))
    _rows_csv(run, "ablation.csv", rows)
    _print_rows(rows)


def _surface(run: Run, model, prefix: str, slice_y: float) -> None:
    xg = np.linspace(-1.5, 1.5, 121)
    yg = np.linspace(-1.2, 1.2, 97)
    truth = me.nll_surface("truth", xg, yg)
    fit = me.nll_surface(model, xg, yg)
    run.write_csv(f"{prefix}nll_surface.csv", ("x", "y", "nll_truth", "nll_model"),
                  ((x, y, a, b) for (x, y, a), (_, _, b) in zip(truth.to_rows(), fit.to_rows())))
    ys = np.array([slice_y])
    st = me.nll_surface("truth", xg, ys).nll[0]
    sm = me.nll_surface(model, xg, ys).nll[0]
    run.write_csv(f"{prefix}nll_slice.csv", ("x", "y", "nll_truth", "nll_model"),
                  ((x, slice_y, a, b) for x, a, b in zip(xg, st, sm)))
    run.notes["surface_sup_gap"] = float(np.max(np.abs(truth.nll - fit.nll)))


def cmd_interpret(run: Run, args) -> None:
    cfg = run.cfg
    models, seeds = _load_members(Path(args.checkpoints) if args.checkpoints else run.out / "members" /
                                  f"N{cfg.data.N}")
    model = models[args.member]
    if model.kind == "mse":
        raise ConfigError("model: interpretation needs a mixture model")
    if cfg.experiment.startswith("gravity"):
        g = ex.interpret_grid(model, n=cfg.eval.grid)
        top = [int(k) for k in g.order[:3]]
        rows = []
        for i, yv in enumerate(g.ys):
            for j, xv in enumerate(g.xs):
                if g.mask[i, j]:
                    rows += [(xv, yv, rank, k, g.alpha[i, j, k]) for rank, k in enumerate(g.order)]
        run.write_csv("alpha_grid.csv", ("x", "y", "rank", "component", "alpha"), rows)
        run.write_csv("entropy_grid.csv", ("x", "y", "entropy"),
                      ((xv, yv, g.entropy[i, j]) for i, yv in enumerate(g.ys) for j, xv in enumerate(g.xs)
                       if g.mask[i, j]))
        stats = {"seed": seeds[args.member], "top3": top, "spread": {str(k): g.spread(k) for k in top},
                 "regions": {str(k): n for k, n in g.regions().items()},
                 "entropy_max": float(np.nanmax(g.entropy)), "ln_K": math.log(model.K)}
        run.path("interpret.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
        print(f"top-3 components {top}: alpha spread "
              + ", ".join(f"{g.spread(k):.3f}" for k in top) + f"; argmax regions {stats['regions']}")
    elif cfg.experiment == "inverse_sine":
        _surface(run, model, "", args.slice_y)
        print(f"NLL surface written; sup |model - truth| = {run.notes['surface_sup_gap']:.3f} nats")
    elif cfg.experiment == "lorenz":
        states = ex.test_data(cfg).trajectories()[0]
        mp = model.mixture(states[:, None, :] if model.kind == "rnn_mdn" else states)
        ent = mixture_entropy(mp.alpha)
        run.write_csv("entropy_states.csv", ("step", "x", "y", "z", "entropy"),
                      ((t, *states[t], ent[t]) for t in range(len(states))))
        print(f"mixture entropy along a test trajectory: mean {ent.mean():.3f}, max {ent.max():.3f} "
              f"(ln K = {math.log(model.K):.3f})")
    else:
        raise ConfigError("experiment: interpret supports gravity, inverse_sine and lorenz")


def cmd_report(run: Run, args) -> None:
    rows = []
    for src in args.runs:
        p = Path(src)
        files = [p] if p.is_file() else sorted(p.glob("**/report.csv")) + sorted(p.glob("**/ablation.csv"))
        if not files:
            log.warning("%s: no report files found", src)
        for f in files:
            rows += me.read_report_csv(f)
    if not rows:
        raise FileNotFoundError("no report rows found in " + ", ".join(args.runs))
    rows.sort(key=lambda r: (r.metric, r.method, r.N))
    _rows_csv(run, "report.csv", rows)
    _print_rows(rows)


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "rollout": cmd_rollout,
            "ablate-k": cmd_ablate_k, "interpret": cmd_interpret, "report": cmd_report}


# ------------------------------------------------------------------ argument parsing
def _parse_set(items) -> dict:
    import yaml

    out: dict = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set: expected KEY=VALUE, got {item!r}")
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run config")
    common.add_argument("--experiment", help="experiment name (overrides the config)")
    common.add_argument("--model", help="mdn, mse or rnn_mdn (overrides the config)")
    common.add_argument("--seed", type=int, help="base seed; member i uses seed + i")
    common.add_argument("--scale", choices=("paper", "desk"), help="preset scale")
    common.add_argument("--workers", type=int, help="parallel ensemble members (default: CPU count)")
    common.add_argument("--out", metavar="DIR", help="output directory (default: the config's out)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.iterations=200 (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="mdnkit", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"mdnkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write train/test dataset files")
    t = sub.add_parser("train", parents=[common], help="train an ensemble; checkpoints + loss CSVs")
    t.add_argument("--data", metavar="PATH", help="train on a stored dataset instead of generating")
    t.add_argument("--sizes", help="comma-separated training sizes, or 'sweep' for the data-efficiency grid")
    e = sub.add_parser("evaluate", parents=[common], help="test NLL (or Lorenz MMD) report rows")
    e.add_argument("--checkpoints", metavar="DIR", help="member directory (default: OUT/members)")
    e.add_argument("--sizes", help="as for train")
    e.add_argument("--surface", action="store_true", help="inverse sine: also export NLL surface and slice")
    e.add_argument("--slice-y", type=float, default=0.5)
    r = sub.add_parser("rollout", parents=[common], help="Lorenz rollouts + MMD against fresh ground truth")
    r.add_argument("--checkpoints", metavar="DIR")
    r.add_argument("--steps", type=int, help="increments per rollout (default: eval.rollout_steps)")
    a = sub.add_parser("ablate-k", parents=[common], help="NLL versus number of mixture components")
    a.add_argument("--ks", default="1,2,4,8,16")
    i = sub.add_parser("interpret", parents=[common], help="mixture-weight / entropy grids, NLL surfaces")
    i.add_argument("--checkpoints", metavar="DIR")
    i.add_argument("--member", type=int, default=0, help="index of the member to inspect")
    i.add_argument("--slice-y", type=float, default=0.5)
    rp = sub.add_parser("report", parents=[common], help="merge report CSVs from run directories")
    rp.add_argument("runs", nargs="+", metavar="RUN")
    rep = sub.add_parser("replay", help="re-run a command from its manifest and compare output digests")
    rep.add_argument("manifest", metavar="MANIFEST")
    rep.add_argument("--out", metavar="DIR", help="directory for the replayed outputs")
    rep.add_argument("-v", "--verbose", action="count", default=0)
    return p


def resolve_config(args, environ=None):
    over = _parse_set(args.set)
    for key in ("experiment", "model", "seed", "scale", "workers", "out"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    return load_config(args.config, over, environ)


_REPLAYED_ARGS = ("data", "sizes", "checkpoints", "surface", "slice_y", "steps", "ks", "member", "runs")


def _run(command: str, cfg, args, out: Path) -> Run:
    recorded = {k: getattr(args, k) for k in _REPLAYED_ARGS if hasattr(args, k)}
    run = Run(command, cfg, recorded, out)
    (out / "config.yaml").write_text(dump_config(cfg))
    HANDLERS[command](run, args)
    m = run.manifest()
    log.info("manifest: %s", m)
    return run


def _replay(args) -> int:
    body = json.loads(Path(args.manifest).read_text())
    cfg = from_dict(body["config"])
    out = Path(args.out) if args.out else Path(args.manifest).parent / "replay"
    ns = argparse.Namespace(**{k: None for k in _REPLAYED_ARGS})
    for k, v in body["args"].items():
        setattr(ns, k, v)
    run = _run(body["command"], cfg, ns, out)
    fresh = {str(p.relative_to(out)): _sha256(p) for p in dict.fromkeys(run.outputs)}
    diff = sorted(k for k in set(fresh) | set(body["outputs"]) if fresh.get(k) != body["outputs"].get(k))
    if diff:
        print(f"replay differs in {len(diff)} output(s): {', '.join(diff[:5])}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"replay reproduced {len(fresh)} output(s) bit-identically")
    return EXIT_OK


@contextmanager
def _numpy_errors():
    with np.errstate(over="ignore", under="ignore"):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        with _numpy_errors():
            if args.command == "replay":
                return _replay(args)
            cfg = resolve_config(args)
            _run(args.command, cfg, args, Path(cfg.out))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NumericFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, persist.PersistError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``splitnet <command> [flags]``.

Exit status is 0 on success, 1 on validation errors (including bad flags) and
2 on internal errors. Diagnostics go to stderr; every command writes a
``manifest.json`` next to its outputs in ``--out``.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .archspec import ArchSpec, cost_report, load_spec, mlp_spec, save_spec
from .divider import WdPolicy, divide_arch
from .errors import SplitNetError, ValidationError

SEED_ENV = "SPLITNET_SEED"


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; usage errors are validation errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


def _seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_config(path) -> dict:
    """Read a JSON or TOML config file into a dict."""
    path = Path(path)
    text = path.read_bytes()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            return tomllib.loads(text.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


class _Run:
    """Collects what a command read and wrote, then writes the manifest."""

    def __init__(self, command: str, out: Path, config: dict, seed: int | None = None):
        self.command = command
        self.out = out
        self.config = config
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat()
        out.mkdir(parents=True, exist_ok=True)

    def read(self, path):
        self.inputs[str(path)] = _sha256(path)

    def wrote(self, path):
        self.outputs.append(str(path))

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text)
        self.wrote(path)
        return path

    def finish(self):
        manifest = {
            "command": self.command,
            "config": self.config,
            "version": __version__,
            "base_seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self.started,
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_cost(args):
    spec = load_spec(args.spec)
    run = _Run("cost", Path(args.out), {"spec": str(args.spec), "convention": args.convention})
    run.read(args.spec)
    report = cost_report(spec, args.convention)
    run.write_text("cost.json", report.to_json() + "\n")
    run.finish()
    print(report.to_table())


def cmd_divide(args):
    spec = load_spec(args.spec)
    policy = WdPolicy(args.wd_policy, args.wd)
    run = _Run("divide", Path(args.out), {"spec": str(args.spec), "S": args.s,
                                           "wd_policy": policy.kind, "wd": args.wd})
    run.read(args.spec)
    plan = divide_arch(spec, args.s, policy)
    for i, member in enumerate(plan.members):
        path = run.out / f"member_{i}.json"
        save_spec(member, path)
        run.wrote(path)
    run.write_text("plan.json", plan.to_json() + "\n")
    run.finish()
    print(plan.to_json())


def _dataset_args(cfg: dict, seed: int):
    from .datagen import make_split
    return make_split(cfg.get("kind", "spirals"), int(cfg.get("n_train", 4000)), int(cfg.get("n_test", 1000)),
                      int(cfg.get("classes", 3)), float(cfg.get("noise", 0.15)), int(cfg.get("seed", seed)))


def cmd_datagen(args):
    from .datagen import save_csv, save_raw
    seed = _seed(args.seed)
    cfg = {"kind": args.kind, "n_train": args.n_train, "n_test": args.n_test,
           "classes": args.classes, "noise": args.noise, "seed": seed, "format": args.format}
    run = _Run("datagen", Path(args.out), cfg, seed)
    train_set, test_set = _dataset_args(cfg, seed)
    for ds in (train_set, test_set):
        if args.format == "csv":
            path = run.out / f"{ds.split}.csv"
            save_csv(ds, path)
            run.wrote(path)
        else:
            save_raw(ds, run.out, ds.split)
            for suffix in (".features.bin", ".labels.bin", ".json"):
                run.wrote(run.out / f"{ds.split}{suffix}")
    run.finish()


def _member_spec(cfg: dict, S: int, policy: WdPolicy, run: _Run) -> tuple[ArchSpec, float]:
    """Resolve the member architecture and weight decay from a train config."""
    model = cfg.get("model", {})
    if "spec" in model:
        run.read(model["spec"])
        base = load_spec(model["spec"])
    else:
        in_features = int(model.get("in_features", 2))
        classes = int(cfg.get("data", {}).get("classes", 3))
        base = mlp_spec(model.get("name", "mlp"), in_features, list(model.get("hidden", [64, 64])), classes)
    plan = divide_arch(base, S, policy)
    member = plan.members[0]
    if "member_hidden" in model and S > 1:
        # explicit member width overrides the division rule
        member = mlp_spec(f"{base.name}-div{S}", base.explicit_layers[0].in_channels,
                          list(model["member_hidden"]), base.num_classes)
    return member, plan.adjusted_wd


def cmd_train(args):
    from .cotrain import TrainConfig, train
    cfg = load_config(args.config) if args.config else {}
    train_keys = dict(cfg.get("train", {}))
    for key in ("S", "max_epoch", "workers"):
        if getattr(args, key.lower()) is not None:
            train_keys[key] = getattr(args, key.lower())
    seed = _seed(args.seed if args.seed is not None else train_keys.get("base_seed"))
    train_keys["base_seed"] = seed
    wd_cfg = cfg.get("wd_policy", {"kind": "none", "base_wd": train_keys.get("wd", 1e-4)})
    policy = WdPolicy(wd_cfg.get("kind", "none"), float(wd_cfg.get("base_wd", 1e-4)))
    run = _Run("train", Path(args.out), {}, seed)
    if args.config:
        run.read(args.config)
    S = int(train_keys.get("S", 2))
    member, wd = _member_spec(cfg, S, policy, run)
    train_keys["wd"] = wd
    tc = TrainConfig.from_dict(train_keys)
    data_cfg = dict(cfg.get("data", {}))
    data_cfg.setdefault("seed", seed)
    run.config = {"train": tc.to_dict(), "data": data_cfg, "model": cfg.get("model", {}),
                  "wd_policy": {"kind": policy.kind, "base_wd": policy.base_wd},
                  "member_spec": member.to_dict()}
    train_set, test_set = _dataset_args(data_cfg, seed)
    result = train(tc, member, train_set, test_set, run.out)
    run.wrote(run.out / "metrics.csv")
    for path in result.record.checkpoints:
        run.wrote(path)
    run.finish()
    final = result.record.final
    print(json.dumps({"acc_member": list(final.acc), "acc_ensemble": final.acc_ensemble,
                      "cot": final.cot}, indent=2))


def _load_members(ckpt_dir, run: _Run):
    from .numerics import load_checkpoint
    paths = sorted(Path(ckpt_dir).glob("member_*.splt"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise ValidationError(f"no member_*.splt checkpoints in {ckpt_dir}")
    models = []
    for path in paths:
        run.read(path)
        models.append(load_checkpoint(path)[0])
    return models


def cmd_eval(args):
    from .datagen import load_csv, load_raw
    from .ensemble import EnsembleRule, accuracy, combine
    rule = EnsembleRule(args.ensemble, args.softmax == "pre")
    run = _Run("eval", Path(args.out), {"ckpt_dir": str(args.ckpt_dir), "ensemble": rule.combine,
                                         "softmax": args.softmax, "data": str(args.data)})
    models = _load_members(args.ckpt_dir, run)
    data = Path(args.data)
    if data.suffix == ".csv":
        run.read(data)
        ds = load_csv(data, split="test")
    else:
        ds = load_raw(data.parent, data.name)
    scores = [m.predict(ds.features) for m in models]
    result = {"acc_member": [accuracy(s, ds.labels) for s in scores],
              "acc_ensemble": accuracy(combine(rule, scores), ds.labels)}
    run.write_text("eval.json", json.dumps(result, indent=2) + "\n")
    run.finish()
    for i, a in enumerate(result["acc_member"]):
        print(f"member {i:<3d} {a:.4f}")
    print(f"ensemble   {result['acc_ensemble']:.4f}")
    print(json.dumps(result))


def cmd_bench(args):
    from .parallel import bench
    seed = _seed(args.seed)
    run = _Run("bench", Path(args.out), {"ckpt_dir": str(args.ckpt_dir), "mode": args.mode,
                                          "batch": args.batch, "workers": args.workers,
                                          "reps": args.reps}, seed)
    models = _load_members(args.ckpt_dir, run)
    n_in = models[0].spec.explicit_layers[0].in_channels
    x = np.random.default_rng(seed).standard_normal((args.batch, n_in))
    ref = bench(models, x, "sequential", 1, args.reps)
    report = ref if args.mode in ("seq", "sequential") else bench(
        models, x, args.mode, args.workers, args.reps, reference=ref)
    run.write_text("bench.json", report.to_json() + "\n")
    run.finish()
    print(report.to_json())


def cmd_gradcheck(args):
    from .gradcheck import gradcheck
    seed = _seed(args.seed)
    run = _Run("gradcheck", Path(args.out), {"models": args.models, "params": args.params}, seed)
    err = gradcheck(seed, args.models, args.params)
    ok = err < 1e-5
    run.write_text("gradcheck.json", json.dumps({"max_rel_error": float(err), "pass": bool(ok)}, indent=2) + "\n")
    run.finish()
    print(f"max relative gradient error {err:.3e} ({'PASS' if ok else 'FAIL'})")
    if not ok:
        raise ValidationError("gradient check failed")


def golden_checks() -> list[tuple[str, bool]]:
    """Every published division table, checked exactly."""
    from .archspec import stage_widths
    from .divider import divide_channels, divide_rate, divide_wd, divide_widen, divide_cardinality
    eff = ArchSpec("e", "efficientnet", 18)
    ss = ArchSpec("ss", "shake-shake", 26, widen_factor=6)
    return [
        ("resnet channels S=2", divide_channels([16, 32, 64], 2) == [12, 24, 48]),
        ("resnet channels S=4", divide_channels([16, 32, 64], 4) == [8, 16, 32]),
        ("efficientnet-b0 S=2", list(divide_arch(eff, 2).members[0].base_channels)
         == [24, 12, 16, 24, 56, 80, 136, 224, 920]),
        ("efficientnet-b0 S=4", list(divide_arch(eff, 4).members[0].base_channels)
         == [16, 12, 16, 20, 40, 56, 96, 160, 640]),
        ("wrn widen w=10 S=2", divide_widen(10, 2) == 7),
        ("wrn widen w=10 S=4", divide_widen(10, 4) == 5),
        ("resnext cardinality S=2", divide_cardinality(8, 2) == 4),
        ("resnext cardinality S=4", divide_cardinality(8, 4) == 2),
        ("shake-shake S=2", stage_widths(divide_arch(ss, 2).members[0])[1] == 64),
        ("shake-shake S=4", stage_widths(divide_arch(ss, 4).members[0])[1] == 48),
        ("densenet growth S=2", divide_rate(40, 2, "densenet_growth") == 28),
        ("wd exponential S=2", abs(divide_wd(WdPolicy("exponential", 5e-4), 2) - 3.0327e-4) < 5e-9),
        ("wd linear S=4", abs(divide_wd(WdPolicy("linear", 1e-4), 4) - 2.5e-5) < 1e-15),
    ]


def cmd_goldens(args):
    run = _Run("goldens", Path(args.out), {})
    checks = golden_checks()
    run.write_text("goldens.json", json.dumps(dict(checks), indent=2) + "\n")
    run.finish()
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    if not all(ok for _, ok in checks):
        raise ValidationError("golden table mismatch")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splitnet", description="Divide one network into S members and co-train them.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--out", default=".", help="output directory (default: current)")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("cost", cmd_cost, "parameter and FLOP counts for an architecture spec")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--convention", choices=["mac", "eq3"], default="mac")

    sp = add("divide", cmd_divide, "split a spec into S member specs")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--s", type=int, required=True)
    sp.add_argument("--wd-policy", choices=["none", "exp", "exponential", "linear"], default="none")
    sp.add_argument("--wd", type=float, default=1e-4)

    sp = add("datagen", cmd_datagen, "generate a toy dataset")
    sp.add_argument("--kind", choices=["spirals", "blobs"], default="spirals")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-train", type=int, default=4000)
    sp.add_argument("--n-test", type=int, default=1000)
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--noise", type=float, default=0.15)
    sp.add_argument("--format", choices=["csv", "raw"], default="csv")

    sp = add("train", cmd_train, "co-train S members on a toy dataset")
    sp.add_argument("--config", help="JSON or TOML config file")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--s", type=int)
    sp.add_argument("--max-epoch", dest="max_epoch", type=int)
    sp.add_argument("--workers", type=int)

    sp = add("eval", cmd_eval, "evaluate trained members and their ensemble")
    sp.add_argument("--ckpt-dir", required=True)
    sp.add_argument("--data", required=True, help="CSV file, or raw dataset path without suffix")
    sp.add_argument("--ensemble", choices=["avg", "max", "average", "max-confidence"], default="avg")
    sp.add_argument("--softmax", choices=["pre", "none"], default="none")

    sp = add("bench", cmd_bench, "sequential vs concurrent member inference latency")
    sp.add_argument("--ckpt-dir", required=True)
    sp.add_argument("--mode", choices=["seq", "par", "sequential", "concurrent"], default="par")
    sp.add_argument("--batch", type=int, default=100)
    sp.add_argument("--workers", type=int, default=2)
    sp.add_argument("--reps", type=int, default=20)
    sp.add_argument("--seed", type=int)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of the co-training loss gradient")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--models", type=int, default=3)
    sp.add_argument("--params", type=int, default=100)

    add("goldens", cmd_goldens, "verify the published division tables")
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.fn(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SplitNetError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any surprise is an internal error
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

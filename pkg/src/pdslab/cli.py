"""Command-line front end: MDP generation, sampling, sweeps, and tables.

Exit codes: 0 ok, 2 configuration problem, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace

from pdslab.data import read_jsonl, sample_dataset, write_jsonl
from pdslab.ensemble import fit_ensemble, load_ensemble, relabel_file, save_ensemble
from pdslab.mdp import (
    load_mdp,
    make_adversarial_mdp,
    make_lowrank_mdp,
    make_tabular_mdp,
    save_mdp,
)
from pdslab.pipeline import (
    CSV_HEADER,
    MethodId,
    PeviSettings,
    QUALITIES,
    RewardSettings,
    SweepGrid,
    behavior_policy,
    markdown_summary,
    results_to_csv,
    sweep,
)
from pdslab.theory import BoundInputs, pds_bound, sbr_approx, sbr_exact

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
SCHEMA_VERSION = 1

MDP_KINDS = ("tabular", "lowrank", "adversarial")


class ConfigError(Exception):
    """Invalid configuration or arguments; maps to exit code 2."""


def _require_fields(section: str, doc: dict, allowed: set, required: set) -> None:
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown field '{key}' in {section}")
    for key in required:
        if key not in doc:
            raise ConfigError(f"missing field '{key}' in {section}")


def _as_int_list(value, name: str) -> tuple:
    if isinstance(value, bool):
        raise ConfigError(f"'{name}' must be an integer or list of integers")
    if isinstance(value, int):
        return (value,)
    if isinstance(value, list) and value and all(
        isinstance(v, int) and not isinstance(v, bool) for v in value
    ):
        return tuple(value)
    raise ConfigError(f"'{name}' must be an integer or nonempty list of integers")


@dataclass(frozen=True)
class ExperimentConfig:
    mdp: dict
    n0_values: tuple
    n1_values: tuple
    labeled_quality: str
    unlabeled_quality: str | None
    noise: bool | float
    horizon_reset: int
    methods: tuple
    reward: RewardSettings
    pevi: PeviSettings
    seeds: tuple
    output: str

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        _require_fields(
            "config", doc,
            allowed={"schema_version", "mdp", "data", "methods", "reward", "pevi",
                     "seeds", "output"},
            required={"schema_version", "mdp", "data", "methods", "seeds", "output"},
        )
        if doc["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema_version {doc['schema_version']!r}, want {SCHEMA_VERSION}"
            )

        mdp = dict(doc["mdp"])
        kind = mdp.get("kind")
        if kind not in MDP_KINDS:
            raise ConfigError(f"mdp.kind must be one of {MDP_KINDS}, got {kind!r}")
        per_kind = {
            "tabular": ({"kind", "num_states", "num_actions", "gamma", "r_max", "seed"},
                        {"kind", "num_states", "num_actions"}),
            "lowrank": ({"kind", "num_states", "num_actions", "dim", "gamma", "r_max", "seed"},
                        {"kind", "num_states", "num_actions", "dim"}),
            "adversarial": ({"kind", "num_actions", "dim", "gamma", "r_max"},
                            {"kind", "num_actions", "dim"}),
        }
        allowed, required = per_kind[kind]
        _require_fields("mdp", mdp, allowed, required)

        data = dict(doc["data"])
        _require_fields(
            "data", data,
            allowed={"n0", "n1", "labeled_quality", "unlabeled_quality", "noise",
                     "horizon_reset"},
            required={"n0"},
        )
        n0_values = _as_int_list(data["n0"], "data.n0")
        n1_values = _as_int_list(data.get("n1", 0), "data.n1")
        labeled_quality = data.get("labeled_quality", "medium")
        unlabeled_quality = data.get("unlabeled_quality")
        for name, q in [("labeled_quality", labeled_quality)] + (
            [("unlabeled_quality", unlabeled_quality)] if unlabeled_quality is not None else []
        ):
            if q not in QUALITIES:
                raise ConfigError(f"data.{name} must be one of {QUALITIES}, got {q!r}")
        if any(n > 0 for n in n1_values) and unlabeled_quality is None:
            raise ConfigError("data.unlabeled_quality is required when any n1 > 0")
        noise = data.get("noise", False)
        if not isinstance(noise, bool) and not isinstance(noise, (int, float)):
            raise ConfigError("data.noise must be a boolean or a number")
        horizon_reset = data.get("horizon_reset", 100)

        methods_doc = doc["methods"]
        if not isinstance(methods_doc, list) or not methods_doc:
            raise ConfigError("'methods' must be a nonempty list")
        valid = {m.value for m in MethodId}
        for m in methods_doc:
            if m not in valid:
                raise ConfigError(f"unknown method {m!r}, valid: {sorted(valid)}")
        methods = tuple(methods_doc)

        reward_doc = dict(doc.get("reward", {}))
        _require_fields("reward", reward_doc,
                        allowed={"nu", "delta", "alpha_mode"}, required=set())
        reward = RewardSettings(**reward_doc)

        pevi_doc = dict(doc.get("pevi", {}))
        _require_fields(
            "pevi", pevi_doc,
            allowed={"lambda_reg", "delta", "c", "beta_override", "tol", "max_sweeps"},
            required=set(),
        )
        pevi = PeviSettings(**pevi_doc)

        seeds_doc = doc["seeds"]
        if not isinstance(seeds_doc, list) or not seeds_doc or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds_doc
        ):
            raise ConfigError("'seeds' must be a nonempty list of integers")
        if len(set(seeds_doc)) != len(seeds_doc):
            raise ConfigError("'seeds' must be distinct")

        output = doc["output"]
        if not isinstance(output, str) or not output:
            raise ConfigError("'output' must be a nonempty path string")

        return cls(
            mdp=mdp,
            n0_values=n0_values,
            n1_values=n1_values,
            labeled_quality=labeled_quality,
            unlabeled_quality=unlabeled_quality,
            noise=noise,
            horizon_reset=horizon_reset,
            methods=methods,
            reward=reward,
            pevi=pevi,
            seeds=tuple(seeds_doc),
            output=output,
        )

    def to_dict(self) -> dict:
        data = {
            "n0": list(self.n0_values),
            "n1": list(self.n1_values),
            "labeled_quality": self.labeled_quality,
            "noise": self.noise,
            "horizon_reset": self.horizon_reset,
        }
        if self.unlabeled_quality is not None:
            data["unlabeled_quality"] = self.unlabeled_quality
        return {
            "schema_version": SCHEMA_VERSION,
            "mdp": dict(self.mdp),
            "data": data,
            "methods": list(self.methods),
            "reward": dataclasses.asdict(self.reward),
            "pevi": dataclasses.asdict(self.pevi),
            "seeds": list(self.seeds),
            "output": self.output,
        }


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


def build_mdp(spec: dict):
    kind = spec["kind"]
    args = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "tabular":
        return make_tabular_mdp(**args)
    if kind == "lowrank":
        return make_lowrank_mdp(**args)
    return make_adversarial_mdp(**args)


def build_grid(cfg: ExperimentConfig) -> SweepGrid:
    return SweepGrid(
        n0_values=cfg.n0_values,
        n1_values=cfg.n1_values,
        methods=cfg.methods,
        seeds=cfg.seeds,
        labeled_quality=cfg.labeled_quality,
        # placeholder is never sampled when every n1 is zero
        unlabeled_quality=cfg.unlabeled_quality or "expert",
        noise=cfg.noise,
        horizon_reset=cfg.horizon_reset,
        reward=cfg.reward,
        pevi=cfg.pevi,
    )


def run_config(path: str | Path) -> int:
    cfg = load_config(path)
    mdp = build_mdp(cfg.mdp)
    report = sweep(mdp, build_grid(cfg))
    out = Path(cfg.output)
    out.write_text(results_to_csv(report.results))
    md_path = out.with_suffix(".md")
    if report.results:
        md_path.write_text(markdown_summary(report.results))
    else:
        md_path.write_text("no results\n")
    print(f"wrote {out} ({len(report.results)} rows) and {md_path}")
    if report.failures:
        for fail in report.failures:
            print(f"cell failed: {fail}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def emit_table(csv_path: str | Path, group_by=("method", "n1")) -> str:
    """Markdown summary straight from a results CSV."""
    group_by = tuple(group_by)
    if len(group_by) != 2 or group_by[0] != "method":
        raise ConfigError("group_by must be ('method', <column>)")
    column = group_by[1]
    if column not in {"n0", "n1", "gamma", "d", "seed"}:
        raise ConfigError(f"cannot group by column {column!r}")

    lines = Path(csv_path).read_text().splitlines()
    if not lines:
        raise ConfigError(f"{csv_path} is empty")
    header = lines[0].split(",")
    missing = [col for col in CSV_HEADER.split(",") if col not in header]
    if missing:
        raise ConfigError(f"csv schema mismatch, missing columns: {', '.join(missing)}")

    idx = {col: header.index(col) for col in header}
    int_cols = {"n0", "n1", "d", "seed"}
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ConfigError(f"malformed csv row at line {lineno}")
        value = parts[idx[column]]
        rows.append(SimpleNamespace(
            method=MethodId(parts[idx["method"]]),
            subopt_mean=float(parts[idx["subopt_mean"]]),
            **{column: int(value) if column in int_cols else float(value)},
        ))
    if not rows:
        raise ConfigError(f"{csv_path} has no data rows")
    return markdown_summary(rows, column=column)


# ----------------------------------------------------------------- subcommands


def _cmd_gen_mdp(args) -> int:
    spec = {"kind": args.kind, "gamma": args.gamma, "r_max": args.r_max}
    if args.kind == "adversarial":
        if args.states is not None:
            raise ConfigError("--states does not apply to the adversarial kind")
        if args.dim is None:
            raise ConfigError("--dim is required for the adversarial kind")
        spec.update(num_actions=args.actions, dim=args.dim)
    else:
        if args.states is None:
            raise ConfigError(f"--states is required for the {args.kind} kind")
        spec.update(num_states=args.states, num_actions=args.actions, seed=args.seed)
        if args.kind == "lowrank":
            if args.dim is None:
                raise ConfigError("--dim is required for the lowrank kind")
            spec["dim"] = args.dim
        elif args.dim is not None:
            raise ConfigError("--dim does not apply to the tabular kind")
    mdp = build_mdp(spec)
    save_mdp(mdp, args.out)
    print(f"wrote {args.out} ({mdp.num_states} states, {mdp.num_actions} actions, "
          f"dim {mdp.dim})")
    return EXIT_OK


def _cmd_sample(args) -> int:
    mdp = load_mdp(args.mdp)
    policy = behavior_policy(mdp, args.quality)
    ds = sample_dataset(
        mdp, policy, n=args.n, horizon_reset=args.horizon_reset,
        labeled=not args.unlabeled, seed=args.seed,
        noise=args.noise if args.noise > 0 else False,
    )
    write_jsonl(ds, args.out)
    print(f"wrote {args.out} ({len(ds)} transitions, "
          f"{'unlabeled' if args.unlabeled else 'labeled'})")
    return EXIT_OK


def _cmd_run(args) -> int:
    return run_config(args.config)


def _cmd_relabel(args) -> int:
    model = load_ensemble(args.model)
    if args.ensemble_size is not None and args.ensemble_size != model.l_count:
        raise ConfigError(
            f"--L {args.ensemble_size} does not match the model's {model.l_count} members"
        )
    if args.a is not None:
        model = dataclasses.replace(model, auto_a=args.a)
    if args.k != "auto":
        try:
            k_mode = float(args.k)
        except ValueError as exc:
            raise ConfigError(f"--k must be 'auto' or a number, got {args.k!r}") from exc
    else:
        k_mode = "auto"
    summary = relabel_file(args.inp, args.out, model, k_mode=k_mode,
                           estimator=args.estimator)
    print(json.dumps(summary))
    return EXIT_OK


def _cmd_fit_ensemble(args) -> int:
    mdp = load_mdp(args.mdp)
    ds = read_jsonl(args.inp)
    model = fit_ensemble(
        ds, mdp.features, ensemble_size=args.ensemble_size, nu=args.nu,
        seed=args.seed, penalty_k=args.k, auto_a=args.a, epsilon=args.epsilon,
    )
    save_ensemble(model, args.out)
    print(f"wrote {args.out} ({model.l_count} members)")
    return EXIT_OK


def _parse_int_list(text: str, name: str) -> list:
    try:
        return [int(part) for part in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--{name} must be a comma-separated integer list") from exc


def _cmd_bounds(args) -> int:
    rows = []
    for n0 in _parse_int_list(args.n0, "n0"):
        for n1 in _parse_int_list(args.n1, "n1"):
            inp = BoundInputs(d=args.d, n0=n0, n1=n1, c0_dagger=args.c0,
                              c1_dagger=args.c1, gamma=args.gamma, r_max=args.r_max,
                              delta=args.delta, c=args.c)
            bound = pds_bound(inp)
            if n0 * args.c0 > 0:
                ratios = (sbr_exact(inp), sbr_approx(inp))
            else:
                ratios = (float("nan"), float("nan"))  # ratio of two vacuous bounds
            rows.append((n0, n1, bound.offline_term, bound.reward_term, bound.total)
                        + ratios)
    header = ["n0", "n1", "offline_term", "reward_term", "total", "sbr_exact",
              "sbr_approx"]
    if args.format == "csv":
        print(",".join(header))
        for row in rows:
            print(",".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row))
    else:
        print("| " + " | ".join(header) + " |")
        print("|" + "---|" * len(header))
        for row in rows:
            print("| " + " | ".join(
                f"{v:.6g}" if isinstance(v, float) else str(v) for v in row) + " |")
    return EXIT_OK


def _cmd_table(args) -> int:
    group_by = args.group_by.split(",")
    print(emit_table(args.csv, group_by=group_by), end="")
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdslab",
                                description="offline data-sharing experiment bench")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-mdp", help="generate and save a synthetic MDP")
    g.add_argument("--kind", choices=MDP_KINDS, required=True)
    g.add_argument("--states", type=int)
    g.add_argument("--actions", type=int, required=True)
    g.add_argument("--dim", type=int)
    g.add_argument("--gamma", type=float, default=0.9)
    g.add_argument("--r-max", dest="r_max", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_mdp)

    s = sub.add_parser("sample", help="roll out a behavior policy to JSONL")
    s.add_argument("--mdp", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--quality", choices=QUALITIES, default="medium")
    s.add_argument("--unlabeled", action="store_true")
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--horizon-reset", dest="horizon_reset", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_sample)

    r = sub.add_parser("run", help="execute an experiment config")
    r.add_argument("--config", required=True)
    r.set_defaults(func=_cmd_run)

    rl = sub.add_parser("relabel", help="fill missing rewards with ensemble estimates")
    rl.add_argument("--in", dest="inp", required=True)
    rl.add_argument("--out", required=True)
    rl.add_argument("--model", required=True)
    rl.add_argument("--k", default="auto")
    rl.add_argument("--a", type=float, default=None)
    rl.add_argument("--L", dest="ensemble_size", type=int, default=None)
    rl.add_argument("--estimator", choices=("min", "mean"), default="min")
    rl.set_defaults(func=_cmd_relabel)

    fe = sub.add_parser("fit-ensemble", help="fit a bootstrap reward ensemble")
    fe.add_argument("--in", dest="inp", required=True)
    fe.add_argument("--mdp", required=True)
    fe.add_argument("--out", required=True)
    fe.add_argument("--L", dest="ensemble_size", type=int, default=10)
    fe.add_argument("--nu", type=float, default=1.0)
    fe.add_argument("--seed", type=int, default=0)
    fe.add_argument("--k", type=float, default=None)
    fe.add_argument("--a", type=float, default=25.0)
    fe.add_argument("--epsilon", type=float, default=1e-8)
    fe.set_defaults(func=_cmd_fit_ensemble)

    b = sub.add_parser("bounds", help="print the closed-form bound table")
    b.add_argument("--d", type=int, required=True)
    b.add_argument("--n0", required=True)
    b.add_argument("--n1", default="0")
    b.add_argument("--c0", type=float, required=True)
    b.add_argument("--c1", type=float, default=0.0)
    b.add_argument("--gamma", type=float, default=0.9)
    b.add_argument("--r-max", dest="r_max", type=float, default=1.0)
    b.add_argument("--delta", type=float, default=0.1)
    b.add_argument("--c", type=float, default=1.0)
    b.add_argument("--format", choices=("csv", "md"), default="md")
    b.set_defaults(func=_cmd_bounds)

    t = sub.add_parser("table", help="summarize a results CSV as markdown")
    t.add_argument("--csv", required=True)
    t.add_argument("--group-by", dest="group_by", default="method,n1")
    t.set_defaults(func=_cmd_table)

    return p


def entrypoint(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, TypeError) as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(entrypoint())

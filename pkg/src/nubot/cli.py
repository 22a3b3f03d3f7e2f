"""Command-line pipeline: synth | train | predict | eval | oracle.

Every subcommand accepts ``--config FILE`` (a JSON document of defaults)
with individual flags taking precedence, and writes the fully resolved
configuration next to its outputs so any run can be reproduced bit for bit
from the artifacts alone.  Relative output directories are resolved against
``--output-root`` or the ``NUBOT_OUTPUT_ROOT`` environment variable.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on numeric
failures at run time (including oracle disagreements).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataset, diffengine, icnn, metrics, otcore, predictor, rescaler, synthgen, trainer

__all__ = ["main"]


class UsageError(Exception):
    """Bad flags, bad config keys, or missing files."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="nubot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", help="JSON file with defaults for this command")
        p.add_argument("--output-dir", help="directory for outputs")
        p.add_argument("--output-root", help="base for relative output dirs")

    p = sub.add_parser("synth", help="generate a benchmark scenario", add_help=True)
    common(p)
    p.add_argument("--scenario", help="scenario id: a, b, or c")
    p.add_argument("--n", type=int, help="points per cloud")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model on two weighted CSVs")
    common(p)
    p.add_argument("--source", help="source cloud CSV")
    p.add_argument("--target", help="target cloud CSV")
    p.add_argument("--resume", help="checkpoint to continue from")
    for name, typ in (
        ("epsilon", float), ("tau", float), ("lr-potentials", float),
        ("lr-rescalers", float), ("beta1", float), ("beta2", float),
        ("batch-source", int), ("batch-target", int), ("steps", int),
        ("lambda-penalty", float), ("seed", int),
        ("sinkhorn-tolerance", float), ("sinkhorn-max-iterations", int),
    ):
        p.add_argument(f"--{name}", type=typ)
    p.add_argument("--mode", choices=("nubot", "cellot"))
    p.add_argument("--activation", choices=("rectifier", "softplus"))
    p.add_argument("--icnn-hidden", help="comma-separated layer sizes")
    p.add_argument("--rescaler-hidden", help="comma-separated layer sizes")

    p = sub.add_parser("predict", help="apply a checkpoint to a cloud")
    common(p)
    p.add_argument("--checkpoint", help="trained model JSON")
    p.add_argument("--input", help="cloud CSV to transform")
    p.add_argument("--direction", choices=("forward", "backward"))

    p = sub.add_parser("eval", help="score predictions against a target cloud")
    common(p)
    p.add_argument("--predictions", help="CSV from the predict command")
    p.add_argument("--target", help="observed target CSV")
    p.add_argument("--method-name", help="row label for the scored method")
    p.add_argument("--seed", type=int, help="seed for the split-half baseline")

    p = sub.add_parser("oracle", help="run solver and gradient cross-checks")
    common(p)
    p.add_argument("--tolerance", type=float, help="objective-gap tolerance")
    return parser


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def _resolve(args, file_cfg: dict, key: str, default=None):
    """Flag beats config file beats default; flags use dashes, keys underscores."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return file_cfg.get(key, default)


def _output_dir(args, file_cfg: dict) -> Path:
    raw = _resolve(args, file_cfg, "output_dir")
    if raw is None:
        raise UsageError("an output directory is required (--output-dir)")
    root = _resolve(args, file_cfg, "output_root") or os.environ.get(
        "NUBOT_OUTPUT_ROOT", "."
    )
    path = Path(raw)
    if not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved(out: Path, name: str, resolved: dict) -> None:
    (out / name).write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _parse_hidden(value) -> tuple[int, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    try:
        return tuple(int(part) for part in str(value).split(",") if part.strip())
    except ValueError as exc:
        raise UsageError(f"bad layer-size list: {value!r}") from exc


def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_cloud(path: Path) -> dataset.WeightedPointCloud:
    """Load a cloud CSV, honoring weight/label columns when present."""
    with open(path, newline="") as handle:
        header = [h.strip() for h in handle.readline().split(",")]
    try:
        return dataset.load_csv(
            path,
            weight_column="weight" if "weight" in header else None,
            label_column="label" if "label" in header else None,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    scenario = _resolve(args, file_cfg, "scenario")
    if scenario not in synthgen.SCENARIO_IDS:
        raise UsageError(f"scenario must be one of {synthgen.SCENARIO_IDS}, got {scenario!r}")
    n = int(_resolve(args, file_cfg, "n", 400))
    seed = int(_resolve(args, file_cfg, "seed", 0))
    out = _output_dir(args, file_cfg)
    spec = synthgen.scenario_spec(scenario, n=n, seed=seed)
    source, target = synthgen.generate(spec)
    dataset.save_csv(source, out / "source.csv")
    dataset.save_csv(target, out / "target.csv")
    _write_resolved(out, "synth_config.json", {
        "command": "synth", "scenario": scenario, "n": n, "seed": seed,
        "source_props": list(spec.source_props),
        "target_props": list(spec.target_props),
        "cluster_means": [list(m) for m in spec.cluster_means],
        "cluster_std": spec.cluster_std, "shift": list(spec.shift),
    })
    print(f"wrote {out / 'source.csv'} and {out / 'target.csv'}")
    return 0


def _train_config(args, file_cfg: dict) -> trainer.TrainConfig:
    kwargs = {}
    for key in (
        "epsilon", "tau", "lr_potentials", "lr_rescalers", "beta1", "beta2",
        "batch_source", "batch_target", "steps", "lambda_penalty", "mode",
        "seed", "activation", "sinkhorn_tolerance", "sinkhorn_max_iterations",
    ):
        value = _resolve(args, file_cfg, key)
        if value is not None:
            kwargs[key] = value
    for key in ("icnn_hidden", "rescaler_hidden"):
        value = _resolve(args, file_cfg, key)
        if value is not None:
            kwargs[key] = _parse_hidden(value)
    unknown = set(file_cfg) - set(trainer.TrainConfig().to_dict()) - {
        "command", "source", "target", "resume", "output_dir", "output_root"
    }
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        return trainer.TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training configuration: {exc}") from exc


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    config = _train_config(args, file_cfg)
    source_path = _require_file(_resolve(args, file_cfg, "source"), "source CSV")
    target_path = _require_file(_resolve(args, file_cfg, "target"), "target CSV")
    out = _output_dir(args, file_cfg)
    source = _load_cloud(source_path)
    target = _load_cloud(target_path)

    model = None
    resume = _resolve(args, file_cfg, "resume")
    if resume is not None:
        model = trainer.load_checkpoint(_require_file(resume, "resume checkpoint"))

    resolved = {"command": "train", "source": str(source_path),
                "target": str(target_path), "resume": resume, **config.to_dict()}
    _write_resolved(out, "train_config.json", resolved)

    with open(out / "diagnostics.ndjson", "a" if resume else "w") as stream:
        def on_step(_, diag):
            stream.write(json.dumps(diag.to_json_dict()) + "\n")

        model = trainer.train(config, source, target, model=model, on_step=on_step)
    trainer.save_checkpoint(model, out / "checkpoint.json")
    print(f"trained to step {model.step}; checkpoint at {out / 'checkpoint.json'}")
    return 0


def cmd_predict(args) -> int:
    file_cfg = _load_config_file(args.config)
    checkpoint = _require_file(_resolve(args, file_cfg, "checkpoint"), "checkpoint")
    input_path = _require_file(_resolve(args, file_cfg, "input"), "input CSV")
    direction = _resolve(args, file_cfg, "direction", "forward")
    if direction not in ("forward", "backward"):
        raise UsageError(f"direction must be forward or backward, got {direction!r}")
    out = _output_dir(args, file_cfg)
    model = trainer.load_checkpoint(checkpoint)
    cloud = _load_cloud(input_path)
    if cloud.dim != model.f.dim:
        raise UsageError(
            f"input dimension {cloud.dim} does not match checkpoint dimension {model.f.dim}"
        )
    push = predictor.push_forward if direction == "forward" else predictor.push_backward
    pushed = push(model, cloud)
    predictor.write_predictions(out / "predictions.csv", cloud, pushed)
    _write_resolved(out, "predict_config.json", {
        "command": "predict", "checkpoint": str(checkpoint),
        "input": str(input_path), "direction": direction,
    })
    print(f"wrote {out / 'predictions.csv'}")
    return 0


def _load_predictions(path: Path):
    """Input cloud, pushed cloud, and labels (or None) from a predictions CSV."""
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        rows = [row for row in reader if row]
    if not rows:
        raise UsageError(f"predictions file is empty: {path}")
    xcols = [i for i, name in enumerate(header) if name.startswith("x")]
    ycols = [i for i, name in enumerate(header) if name.startswith("y")]
    try:
        in_mass = header.index("input_mass")
        out_mass = header.index("output_mass")
    except ValueError as exc:
        raise UsageError(f"not a predictions CSV (missing mass columns): {path}") from exc
    label_col = header.index("label") if "label" in header else None
    data = np.array([[float(v) for i, v in enumerate(row) if i != label_col]
                     for row in rows])
    shifted = lambda i: i - (label_col is not None and i > label_col)
    labels = (np.array([int(row[label_col]) for row in rows], dtype=np.int64)
              if label_col is not None else None)
    source = dataset.WeightedPointCloud(
        points=data[:, [shifted(i) for i in xcols]],
        masses=data[:, shifted(in_mass)], labels=labels)
    pushed = dataset.WeightedPointCloud(
        points=data[:, [shifted(i) for i in ycols]],
        masses=data[:, shifted(out_mass)], labels=labels)
    return source, pushed


def cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    pred_path = _require_file(_resolve(args, file_cfg, "predictions"), "predictions CSV")
    target_path = _require_file(_resolve(args, file_cfg, "target"), "target CSV")
    method = _resolve(args, file_cfg, "method_name", "nubot")
    seed = int(_resolve(args, file_cfg, "seed", 0))
    out = _output_dir(args, file_cfg)

    source, pushed = _load_predictions(pred_path)
    target = _load_cloud(target_path)

    def cluster_fields(cloud_in, cloud_out):
        if cloud_in.labels is None or target.labels is None:
            return "", ""
        weights = cloud_out.masses / cloud_in.masses
        means = metrics.cluster_weight_means(cloud_in.points, weights, cloud_in.labels)
        keys = sorted(means)
        predicted = np.array(
            [cloud_out.masses[cloud_in.labels == k].sum() for k in keys]
        )
        observed = np.array([target.masses[target.labels == k].sum() for k in keys])
        corr = metrics.mass_fraction_correlation(
            predicted / predicted.sum(), observed / observed.sum()
        )
        return ";".join(f"{means[k]:.6f}" for k in keys), f"{corr:.6f}"

    rows = []
    mmd = metrics.weighted_mmd(pushed, target)
    means_str, corr_str = cluster_fields(source, pushed)
    rows.append((method, mmd, means_str, corr_str))
    identity = metrics.identity_baseline(source)
    mmd_id = metrics.weighted_mmd(identity, target)
    id_means, id_corr = cluster_fields(source, identity)
    rows.append(("identity", mmd_id, id_means, id_corr))
    observed = metrics.observed_baseline(target, seed=seed)
    rows.append(("observed", metrics.weighted_mmd(observed, target), "", ""))

    with open(out / "metrics.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method", "mmd", "cluster_weight_means", "mass_correlation"])
        for name, value, means_str, corr_str in rows:
            writer.writerow([name, repr(float(value)), means_str, corr_str])
    _write_resolved(out, "eval_config.json", {
        "command": "eval", "predictions": str(pred_path), "target": str(target_path),
        "method_name": method, "seed": seed,
    })
    print(f"wrote {out / 'metrics.csv'}")
    return 0


def _oracle_fixtures():
    """Small instances with every size at most three per side."""
    fixtures = []
    rng = np.random.default_rng(424242)
    for shape in ((1, 1), (2, 2), (2, 3), (3, 3)):
        cost = rng.uniform(0.0, 2.0, size=shape)
        u = rng.uniform(0.5, 1.5, size=shape[0])
        v = rng.uniform(0.5, 1.5, size=shape[1])
        fixtures.append((u, v, cost))
    return fixtures


def cmd_oracle(args) -> int:
    file_cfg = _load_config_file(args.config)
    tolerance = float(_resolve(args, file_cfg, "tolerance", 1e-3))
    out = _output_dir(args, file_cfg)
    report = {"closed_form": [], "grid_search": [], "gradient_checks": [], "pass": True}

    for c in (0.1, 0.5, 1.0, 2.0, 5.0):
        for tau, eps in ((0.05, 0.005), (0.5, 0.05), (1.0, 0.1), (0.05, 0.05), (2.0, 0.005)):
            cfg = otcore.SinkhornConfig(epsilon=eps, tau1=tau, tau2=tau,
                                        tolerance=1e-9, max_iterations=20000)
            coupling = otcore.sinkhorn_unbalanced(
                np.array([1.0]), np.array([1.0]), np.array([[c]]), cfg)
            got = float(coupling.plan[0, 0])
            want = otcore.closed_form_mass_1x1(1.0, 1.0, c, cfg)
            ok = abs(got - want) < 1e-6
            report["closed_form"].append(
                {"c": c, "tau": tau, "epsilon": eps, "solver": got,
                 "closed_form": want, "pass": ok})
            report["pass"] &= ok

    cfg = otcore.SinkhornConfig(epsilon=0.1, tau1=0.5, tau2=0.5,
                                tolerance=1e-9, max_iterations=20000)
    for idx, (u, v, cost) in enumerate(_oracle_fixtures()):
        coupling = otcore.sinkhorn_unbalanced(u, v, cost, cfg)
        value = otcore.unbalanced_objective(coupling.plan, u, v, cost, cfg)
        oracle = otcore.oracle_grid_search(u, v, cost, cfg)
        oracle_value = otcore.unbalanced_objective(oracle.plan, u, v, cost, cfg)
        gap = value - oracle_value
        ok = gap <= tolerance
        report["grid_search"].append(
            {"fixture": idx, "shape": list(cost.shape), "solver_objective": value,
             "oracle_objective": oracle_value, "gap": gap, "pass": bool(ok)})
        report["pass"] &= ok
        otcore.coupling_to_csv(coupling, out / f"fixture_{idx}_solver.csv")
        otcore.coupling_to_csv(oracle, out / f"fixture_{idx}_oracle.csv")

    psi = icnn.init_identity(3, hidden=(8, 8), seed=1, activation="softplus")
    x = np.random.default_rng(2).normal(size=(16, 3))
    xt = torch.from_numpy(x)
    worst = diffengine.finite_difference_check(
        lambda: icnn.forward_torch(psi, xt).sum(), [icnn.parameter_block(psi)],
        step=1e-4, max_coords=64, seed=3)
    ok = worst < 1e-5
    report["gradient_checks"].append({"check": "potential-parameters", "max_rel_err": worst, "pass": bool(ok)})
    report["pass"] &= ok

    grad = icnn.gradient_map(psi, x)
    fd = np.empty_like(grad)
    h = 1e-5
    for j in range(x.shape[1]):
        bump = np.zeros_like(x)
        bump[:, j] = h
        fd[:, j] = (icnn.evaluate(psi, x + bump) - icnn.evaluate(psi, x - bump)) / (2 * h)
    rel = float(np.max(np.abs(grad - fd) / np.maximum(np.abs(grad), 1.0)))
    ok = rel < 1e-6
    report["gradient_checks"].append({"check": "gradient-map", "max_rel_err": float(rel), "pass": bool(ok)})
    report["pass"] &= ok

    report["tolerance"] = tolerance
    (out / "oracle_report.json").write_text(json.dumps(report, indent=2) + "\n")
    _write_resolved(out, "oracle_config.json", {"command": "oracle", "tolerance": tolerance})
    print(f"oracle report: {'all checks passed' if report['pass'] else 'FAILURES'} "
          f"({out / 'oracle_report.json'})")
    return 0 if report["pass"] else 2


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        handler = {
            "synth": cmd_synth, "train": cmd_train, "predict": cmd_predict,
            "eval": cmd_eval, "oracle": cmd_oracle,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

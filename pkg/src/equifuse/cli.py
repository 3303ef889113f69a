"""Command-line surface: generate | train | eval | ablate | robust | report.

Every emitted CSV/JSONL/config file starts with a header carrying the
run id and the resolved-config content hash; the report command checks
those hashes before aggregating anything. Exit codes are a stable
contract: 0 success, 1 usage or config error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import synthetic as syn
from . import train as tr_mod
from .config import load_config_file
from .errors import ConfigError, ContractError, EquifuseError, TrainingAbort
from .train import DISABLE_TOKENS


class CliUsageError(EquifuseError):
    """Bad command-line usage; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


# Flags each handler contractually accepts; a test asserts parity with
# the parser so help text can never drift from the handlers.
COMMAND_FLAGS: Dict[str, set] = {
    "generate": {"--spec", "--out", "--n", "--seed"},
    "train": {"--config", "--data", "--out", "--seed"},
    "eval": {"--model", "--data", "--out", "--condition"},
    "ablate": {"--config", "--data", "--out", "--seed", "--disable"},
    "robust": {"--model", "--data", "--out", "--protocol", "--seed"},
    "report": {"--out"},
}


def build_parser() -> _Parser:
    parser = _Parser(prog="equifuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("--spec", required=True, help="generator spec JSON path")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", required=True, type=int, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="root seed")

    p = sub.add_parser("train", help="run the two-stage training pipeline")
    p.add_argument("--config", required=True, help="flat key-value config path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--seed", type=int, default=0, help="root seed")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--condition",
        default=None,
        help="comma list of modalities to keep (default: all)",
    )

    p = sub.add_parser("ablate", help="retrain with module losses zero-weighted")
    p.add_argument("--config", required=True, help="flat key-value config path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="root seed")
    p.add_argument(
        "--disable",
        default="",
        help=f"comma list from {{{','.join(DISABLE_TOKENS)}}} (empty = full model)",
    )

    p = sub.add_parser("robust", help="robustness sweep over a trained checkpoint")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--protocol",
        required=True,
        choices=["modality-missing", "feature-dropout"],
        help="which corruption protocol to sweep",
    )
    p.add_argument("--seed", type=int, default=0, help="root seed")

    p = sub.add_parser("report", help="aggregate several runs into mean/std tables")
    p.add_argument("runs", nargs="+", help="run directories to merge")
    p.add_argument("--out", required=True, help="report output directory")
    return parser


def _write_manifest(out_dir: Path, manifest: dict) -> None:
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _print_table(rows: List[Tuple[str, Dict[str, float]]]) -> None:
    metrics = sorted({k for _, record in rows for k in record})
    header = ["condition"] + metrics
    print("  ".join(h.ljust(12) for h in header))
    for condition, record in rows:
        cells = [condition.ljust(12)]
        for m in metrics:
            value = record.get(m, float("nan"))
            cells.append(f"{value:.4f}".ljust(12))
        print("  ".join(cells))


def cmd_generate(args) -> int:
    if args.n <= 0:
        raise CliUsageError(f"--n must be positive, got {args.n}")
    spec = syn.load_spec(args.spec).with_seed(args.seed)
    out = Path(args.out)
    digest = hashlib.sha256(
        (json.dumps(syn.spec_to_json(spec), sort_keys=True) + f"/n={args.n}").encode()
    ).hexdigest()[:12]
    run_id = f"generate-{args.seed}-{digest}"
    header = f"run_id={run_id} config_hash={digest}"
    batch = syn.generate(spec, args.n)
    try:
        syn.save_batch_dir(batch, out, header_comment=header)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    report = syn.bayes_oracle(spec, batch)
    (out / "bayes_oracle.json").write_text(
        json.dumps(
            {
                "run_id": run_id,
                "config_hash": digest,
                "n": args.n,
                "bayes_accuracy_full": report.bayes_accuracy_full,
                "bayes_accuracy_per_subset": report.bayes_accuracy_per_subset,
            },
            indent=2,
            sort_keys=True,
        )
    )
    _write_manifest(
        out,
        {
            "run_id": run_id,
            "command": "generate",
            "seed": args.seed,
            "config_hash": digest,
            "spec": syn.spec_to_json(spec),
            "n": args.n,
        },
    )
    print(f"wrote {args.n} samples to {out} (bayes full accuracy "
          f"{report.bayes_accuracy_full:.4f})")
    return 0


def _split_dataset(batch, train_samples: int):
    if train_samples <= 0 or train_samples >= batch.n:
        raise ConfigError(
            f"train.train_samples={train_samples} must lie in (0, {batch.n}) "
            "to leave evaluation rows"
        )
    train = batch.take(np.arange(train_samples))
    eval_b = batch.take(np.arange(train_samples, batch.n))
    return train, eval_b


def cmd_train(args) -> int:
    cfg, resolved, text, digest = load_config_file(args.config, args.seed)
    dataset = syn.load_batch_dir(args.data)
    train_b, eval_b = _split_dataset(dataset, cfg.train.train_samples)
    run_id = f"train-{args.seed}-{digest}"
    result = tr_mod.train_full(cfg, train_b, eval_b)
    out = Path(args.out)
    files = tr_mod.write_run_outputs(
        out, run_id, digest, cfg, result, text, resolved_cfg=resolved
    )
    _write_manifest(
        out,
        {
            "run_id": run_id,
            "command": "train",
            "seed": args.seed,
            "config_hash": digest,
            "resolved_config": resolved,
            "config_path": str(args.config),
            "data_path": str(args.data),
            "files": sorted(files + ["manifest.json"]),
        },
    )
    _print_table([("clean", result.final_metrics)])
    return 0


def cmd_eval(args) -> int:
    model, meta = tr_mod.load_checkpoint(args.model)
    dataset = syn.load_batch_dir(args.data)
    for name, dim in model.feature_dims.items():
        have = dataset.features[name].shape[1]
        if have != dim:
            raise ContractError(
                f"dataset modality {name} has dim {have}, checkpoint expects {dim}"
            )
    condition = "clean"
    if args.condition:
        keep = [tok.strip() for tok in args.condition.split(",") if tok.strip()]
        dataset = syn.apply_modality_missing(dataset, keep)
        condition = syn.subset_key(keep)
    record = tr_mod.evaluate_model(model, dataset)
    run_id = meta.get("run_id", "eval")
    digest = meta.get("config_hash", "none")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr_mod.write_csv_with_header(
        out / "metrics.csv",
        f"run_id={run_id} config_hash={digest}",
        ("run_id", "condition", "seed", "metric", "value"),
        tr_mod.metrics_rows(run_id, meta.get("seed", 0), [(condition, record)]),
    )
    _print_table([(condition, record)])
    return 0


def cmd_ablate(args) -> int:
    cfg, resolved, text, digest = load_config_file(args.config, args.seed)
    disable = tuple(tok.strip() for tok in args.disable.split(",") if tok.strip())
    unknown = set(disable) - set(DISABLE_TOKENS)
    if unknown:
        raise CliUsageError(
            f"unknown --disable tokens {sorted(unknown)}; "
            f"choose from {list(DISABLE_TOKENS)}"
        )
    dataset = syn.load_batch_dir(args.data)
    train_b, eval_b = _split_dataset(dataset, cfg.train.train_samples)
    key = "+".join(sorted(disable)) if disable else "full"
    run_id = f"ablate-{key}-{args.seed}-{digest}"
    result = tr_mod.train_full(cfg, train_b, eval_b, disable=disable)
    out = Path(args.out)
    files = tr_mod.write_run_outputs(
        out, run_id, digest, cfg, result, text, resolved_cfg=resolved
    )
    _write_manifest(
        out,
        {
            "run_id": run_id,
            "command": "ablate",
            "seed": args.seed,
            "config_hash": digest,
            "resolved_config": resolved,
            "disable": sorted(disable),
            "files": sorted(files + ["manifest.json"]),
        },
    )
    _print_table([(f"ablate:{key}", result.final_metrics)])
    return 0


def cmd_robust(args) -> int:
    model, meta = tr_mod.load_checkpoint(args.model)
    dataset = syn.load_batch_dir(args.data)
    rows = tr_mod.run_robustness(model, dataset, args.protocol, seed=args.seed)
    run_id = meta.get("run_id", "robust")
    digest = meta.get("config_hash", "none")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr_mod.write_csv_with_header(
        out / "metrics.csv",
        f"run_id={run_id} config_hash={digest}",
        ("run_id", "condition", "seed", "metric", "value"),
        tr_mod.metrics_rows(run_id, meta.get("seed", 0), rows),
    )
    _print_table(rows)
    return 0


def _read_metrics_csv(path: Path) -> Tuple[str, List[dict]]:
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ConfigError(f"{path} is missing its provenance header line")
    header_line = lines[0][2:]
    columns = lines[1].split(",")
    rows = []
    for line in lines[2:]:
        if not line:
            continue
        cells = line.split(",")
        rows.append(dict(zip(columns, cells)))
    return header_line, rows


def cmd_report(args) -> int:
    runs = []
    for run_dir in args.runs:
        run = Path(run_dir)
        manifest_path = run / "manifest.json"
        if not manifest_path.exists():
            raise ConfigError(f"{run} has no manifest.json")
        manifest = json.loads(manifest_path.read_text())
        header_line, rows = _read_metrics_csv(run / "metrics.csv")
        expect = f"run_id={manifest['run_id']} config_hash={manifest['config_hash']}"
        if header_line != expect:
            raise ConfigError(
                f"{run}/metrics.csv header {header_line!r} does not match "
                f"manifest {expect!r}"
            )
        runs.append((run, manifest, rows))

    # Seed-masked configs must agree across runs.
    baseline = runs[0][1].get("resolved_config")
    for run, manifest, _ in runs[1:]:
        other = manifest.get("resolved_config")
        if other != baseline:
            diff = sorted(
                k
                for k in set(baseline or {}) | set(other or {})
                if (baseline or {}).get(k) != (other or {}).get(k)
            )
            raise ConfigError(
                f"refusing to aggregate heterogeneous configs; differing keys: {diff}"
            )

    key_sets = [
        {(r["condition"], r["metric"]) for r in rows} for _, _, rows in runs
    ]
    if any(ks != key_sets[0] for ks in key_sets[1:]):
        raise ConfigError("refusing to aggregate runs with mismatched metric sets")

    grouped: Dict[Tuple[str, str], List[float]] = {}
    for _, _, rows in runs:
        for r in rows:
            grouped.setdefault((r["condition"], r["metric"]), []).append(
                float(r["value"])
            )
    masked = hashlib.sha256(
        json.dumps(baseline, sort_keys=True).encode()
    ).hexdigest()[:12]
    run_id = f"report-{len(runs)}runs-{masked}"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_rows = []
    for (condition, metric), values in sorted(grouped.items()):
        arr = np.asarray(values)
        table_rows.append(
            (condition, metric, len(values), float(arr.mean()), float(arr.std()))
        )
    tr_mod.write_csv_with_header(
        out / "report_metrics.csv",
        f"run_id={run_id} config_hash={masked}",
        ("condition", "metric", "runs", "mean", "std"),
        table_rows,
    )
    # Plot-ready trajectories merged across runs.
    traj = []
    for run, manifest, _ in runs:
        runlog = (run / "runlog.jsonl").read_text().splitlines()
        for line in runlog[1:]:
            row = json.loads(line)
            for key, value in row.get("losses", {}).items():
                traj.append(
                    (manifest["seed"], row["epoch"], row["stage"], key, value)
                )
    tr_mod.write_csv_with_header(
        out / "report_losses.csv",
        f"run_id={run_id} config_hash={masked}",
        ("seed", "epoch", "stage", "loss", "value"),
        traj,
    )
    for name in ("energy", "trust"):
        merged = []
        columns = None
        for run, manifest, _ in runs:
            src = run / f"{name}.csv"
            if not src.exists():
                continue
            lines = src.read_text().splitlines()
            columns = lines[1].split(",")
            for line in lines[2:]:
                if line:
                    merged.append([manifest["seed"]] + line.split(","))
        if columns:
            tr_mod.write_csv_with_header(
                out / f"report_{name}.csv",
                f"run_id={run_id} config_hash={masked}",
                ["seed"] + columns,
                merged,
            )
    print(f"{'condition':16} {'metric':14} {'mean':>10} {'std':>10}  (n={len(runs)})")
    for condition, metric, _, mean, std in table_rows:
        print(f"{condition:16} {metric:14} {mean:10.4f} {std:10.4f}")
    return 0


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "robust": cmd_robust,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return HANDLERS[args.command](args)
    except (CliUsageError, ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingAbort as exc:
        print(f"abort: {exc} (batch {exc.batch_id}, energies {exc.energies})",
              file=sys.stderr)
        return 2
    except (EquifuseError, OSError) as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Five subcommands: coords and fisher inspect a distribution file,
train fits one model to one sample file, experiment drives a full
result grid from a spec file, and ingest normalizes raw binary
matrices into the sample-row format.

Exit codes are stable: 0 success, 2 input parsing or validation
failure, 3 training divergence (artifacts are still written), 4 an
experiment whose every trial failed.

Every command that produces files also writes a run manifest next to
them (command, resolved configuration, seed, version, timestamps,
output paths), atomically, so a run can be reproduced exactly from its
manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from dataclasses import fields, replace
from datetime import datetime, timezone

import numpy as np

from . import __version__, fisher, rbm, sbm
from .errors import Diverged, IgboltzError
from .evaluate import (
    ExperimentSpec,
    SampleSet,
    run_experiment,
    sampleset_from_lines,
    sampleset_to_lines,
)
from .sbm import TrainConfig
from .simplex import (
    distribution_from_json,
    eta_from_p,
    mixed_from_distribution,
    mixed_split,
    theta_from_p,
)

PARSE_FAILURE = 2
DIVERGENCE = 3
ALL_TRIALS_FAILED = 4


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return PARSE_FAILURE


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _write_manifest(path: str, command: str, config: dict, seed,
                    outputs: list, started: str, **extras) -> None:
    payload = {
        "command": command,
        "config": config,
        "master_seed": seed,
        "version": __version__,
        "started": started,
        "finished": _utc_now(),
        "outputs": [os.path.abspath(p) for p in outputs],
    }
    payload.update(extras)
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_json_file(path: str):
    with open(path) as fh:
        return json.load(fh)


def _mask_label(mask: int, n: int) -> str:
    return "".join(str((mask >> j) & 1) for j in range(n))


# ---------------------------------------------------------------------------
# configuration files
# ---------------------------------------------------------------------------

_CONFIG_KEYS = tuple(f.name for f in fields(TrainConfig))


def _config_from_dict(obj) -> TrainConfig:
    if not isinstance(obj, dict):
        raise IgboltzError("config must be a JSON object")
    unknown = sorted(set(obj) - set(_CONFIG_KEYS))
    if unknown:
        raise IgboltzError(f"unknown config keys: {', '.join(unknown)}")
    return TrainConfig(**obj)


def _config_to_dict(cfg: TrainConfig) -> dict:
    return {name: getattr(cfg, name) for name in _CONFIG_KEYS}


_SPEC_KEYS = ("kind", "n", "sample_sizes", "methods", "master_seed",
              "n_h", "n_targets", "n_repeats", "data_path")


def _spec_from_dict(obj, base_dir: str) -> ExperimentSpec:
    if not isinstance(obj, dict):
        raise IgboltzError("experiment spec must be a JSON object")
    unknown = sorted(set(obj) - set(_SPEC_KEYS))
    if unknown:
        raise IgboltzError(f"unknown spec keys: {', '.join(unknown)}")
    for key in ("kind", "n", "sample_sizes", "methods", "master_seed"):
        if key not in obj:
            raise IgboltzError(f"spec is missing required key {key!r}")
    methods = obj["methods"]
    if not isinstance(methods, dict) or not methods:
        raise IgboltzError("spec methods must map names to config objects")
    pairs = tuple((name, _config_from_dict(cfg))
                  for name, cfg in methods.items())
    data_path = obj.get("data_path")
    if data_path is not None and not os.path.isabs(data_path):
        data_path = os.path.join(base_dir, data_path)
    return ExperimentSpec(
        kind=obj["kind"], n=int(obj["n"]),
        sample_sizes=tuple(obj["sample_sizes"]), methods=pairs,
        master_seed=int(obj["master_seed"]), n_h=int(obj.get("n_h", 0)),
        n_targets=int(obj.get("n_targets", 1)),
        n_repeats=int(obj.get("n_repeats", 1)), data_path=data_path)


def _spec_to_dict(spec: ExperimentSpec) -> dict:
    return {
        "kind": spec.kind, "n": spec.n,
        "sample_sizes": list(spec.sample_sizes),
        "methods": {name: _config_to_dict(cfg)
                    for name, cfg in spec.methods},
        "master_seed": spec.master_seed, "n_h": spec.n_h,
        "n_targets": spec.n_targets, "n_repeats": spec.n_repeats,
        "data_path": spec.data_path,
    }


# ---------------------------------------------------------------------------
# coords / fisher
# ---------------------------------------------------------------------------

def _coords_payload(d, system: str, l: int) -> dict:
    masks = [int(m) for m in range(1, 1 << d.n)]
    labels = [_mask_label(m, d.n) for m in masks]
    if system == "p":
        return {"system": "p", "n": d.n, "p": d.p.tolist()}
    if system == "eta":
        return {"system": "eta", "n": d.n, "masks": labels,
                "values": eta_from_p(d).eta.tolist()}
    if system == "theta":
        th = theta_from_p(d)
        return {"system": "theta", "n": d.n, "masks": labels,
                "values": th.theta.tolist(), "psi": th.psi}
    mx = mixed_from_distribution(d, l)
    low, high = mixed_split(d.n, l)
    return {
        "system": "mixed", "n": d.n, "l": l,
        "expectation_masks": [_mask_label(int(m), d.n) for m in low],
        "expectation_values": mx.eta_low.tolist(),
        "natural_masks": [_mask_label(int(m), d.n) for m in high],
        "natural_values": mx.theta_high.tolist(),
    }


def _print_coords_human(payload: dict) -> None:
    if payload["system"] == "p":
        for mask, value in enumerate(payload["p"]):
            print(f"{_mask_label(mask, payload['n'])}  {value:.12g}")
        return
    if payload["system"] == "mixed":
        for mask, value in zip(payload["expectation_masks"],
                               payload["expectation_values"]):
            print(f"E  {mask}  {value:.12g}")
        for mask, value in zip(payload["natural_masks"],
                               payload["natural_values"]):
            print(f"N  {mask}  {value:.12g}")
        return
    for mask, value in zip(payload["masks"], payload["values"]):
        print(f"{mask}  {value:.12g}")
    if payload["system"] == "theta":
        print(f"psi  {payload['psi']:.12g}")


def cmd_coords(args) -> int:
    started = _utc_now()
    try:
        d = distribution_from_json(_load_json_file(args.input))
        if args.system == "mixed" and args.l is None:
            raise IgboltzError("--system mixed requires --l")
        payload = _coords_payload(d, args.system, args.l)
    except (IgboltzError, OSError, json.JSONDecodeError, ValueError) as exc:
        return _fail(str(exc))
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        _print_coords_human(payload)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        out_path = os.path.join(args.out, "coords.json")
        _atomic_write(out_path, json.dumps(payload, indent=2) + "\n")
        _write_manifest(
            os.path.join(args.out, "manifest.json"), "coords",
            {"input": os.path.abspath(args.input), "system": args.system,
             "l": args.l}, args.seed, [out_path], started)
    return 0


def cmd_fisher(args) -> int:
    started = _utc_now()
    try:
        d = distribution_from_json(_load_json_file(args.input))
        if args.l is None and (args.system == "mixed" or args.ratios):
            raise IgboltzError("--system mixed and --ratios require --l")
        l = args.l if args.l is not None else d.n
        if args.ratios:
            loss, tail = fisher.information_ratios(d, args.system, l)
            payload = {"system": args.system, "l": l, "loss_pct": loss,
                       "tail_to_min_kept_pct": tail}
        else:
            fm = {"theta": fisher.fisher_theta,
                  "eta": fisher.fisher_eta}.get(args.system)
            fm = fm(d) if fm else fisher.fisher_mixed(d, l)
            payload = fisher.fisher_to_json(fm)
            if args.oracle:
                ref = fisher.fisher_score_oracle(d, args.system, l)
                payload["oracle_max_deviation"] = float(
                    np.abs(fm.m - ref.m).max())
    except (IgboltzError, OSError, json.JSONDecodeError, ValueError) as exc:
        return _fail(str(exc))
    if args.json:
        print(json.dumps(payload, indent=2))
    elif args.ratios:
        print(f"{payload['loss_pct']:.4g}% "
              f"{payload['tail_to_min_kept_pct']:.4g}%")
    else:
        for row in payload["m"]:
            print("  ".join(f"{v:.12g}" for v in row))
        if "oracle_max_deviation" in payload:
            print(f"oracle max deviation  "
                  f"{payload['oracle_max_deviation']:.3e}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        out_path = os.path.join(args.out, "fisher.json")
        _atomic_write(out_path, json.dumps(payload, indent=2) + "\n")
        _write_manifest(
            os.path.join(args.out, "manifest.json"), "fisher",
            {"input": os.path.abspath(args.input), "system": args.system,
             "l": args.l, "ratios": args.ratios, "oracle": args.oracle},
            args.seed, [out_path], started)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAINERS = {
    ("sbm", "ml"): sbm.sbm_train_ml,
    ("sbm", "cd1"): sbm.sbm_train_cd1,
    ("sbm", "cdcif"): sbm.sbm_train_cd_cif,
    ("rbm", "ml"): rbm.rbm_train_ml,
    ("rbm", "cd1"): rbm.rbm_train_cd1,
    ("rbm", "ip"): rbm.rbm_train_ip,
}

_TRACE_HEADERS = {
    3: ("epoch", "kl_data", "kl_target"),
    5: ("iteration", "div_before", "div_after", "kl_data", "kl_target"),
}


def _write_train_artifacts(out_dir: str, model: str, result) -> list:
    to_json = sbm.sbm_params_to_json if model == "sbm" \
        else rbm.rbm_params_to_json
    params_path = os.path.join(out_dir, "params.json")
    _atomic_write(params_path,
                  json.dumps(to_json(result.params), indent=2) + "\n")
    trace_path = os.path.join(out_dir, "trace.csv")
    header = _TRACE_HEADERS[result.trace.shape[1]]
    lines = [",".join(header)]
    for row in result.trace:
        lines.append(",".join(f"{v:.17g}" for v in row))
    _atomic_write(trace_path, "\n".join(lines) + "\n")
    return [params_path, trace_path]


def cmd_train(args) -> int:
    started = _utc_now()
    try:
        trainer = _TRAINERS.get((args.model, args.method))
        if trainer is None:
            raise IgboltzError(
                f"method {args.method!r} is not valid for model {args.model!r}")
        cfg = _config_from_dict(_load_json_file(args.config))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        with open(args.data) as fh:
            data = sampleset_from_lines(fh.read())
    except (IgboltzError, OSError, json.JSONDecodeError, TypeError) as exc:
        return _fail(str(exc))

    os.makedirs(args.out, exist_ok=True)
    extras = {}
    if args.method == "cdcif":
        extras["resolved_r"] = sbm.resolve_cif_r(cfg, len(data))
    status = 0
    try:
        result = trainer(data, cfg)
    except Diverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        result = exc.result
        extras["diverged"] = str(exc)
        status = DIVERGENCE
    except IgboltzError as exc:
        return _fail(str(exc))

    outputs = _write_train_artifacts(args.out, args.model, result)
    if args.method == "cdcif":
        extras["kept_pairs"] = int(result.kept.sum() // 2)
    if args.method == "ip":
        extras["best_iteration"] = int(np.argmin(result.trace[:, 3]))
    _write_manifest(
        os.path.join(args.out, "manifest.json"), "train",
        {"model": args.model, "method": args.method,
         "data": os.path.abspath(args.data), **_config_to_dict(cfg)},
        cfg.seed, outputs, started, **extras)
    if args.json:
        print(json.dumps({"status": "diverged" if status else "ok",
                          "outputs": outputs}))
    else:
        print(f"wrote {len(outputs)} artifacts to {args.out}")
    return status


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

def cmd_experiment(args) -> int:
    started = _utc_now()
    try:
        base_dir = os.path.dirname(os.path.abspath(args.spec))
        spec = _spec_from_dict(_load_json_file(args.spec), base_dir)
        if args.seed is not None:
            spec = replace(spec, master_seed=args.seed)
    except (IgboltzError, OSError, json.JSONDecodeError,
            TypeError, ValueError) as exc:
        return _fail(str(exc))

    jobs = args.jobs if args.jobs else (os.cpu_count() or 1)
    try:
        table = run_experiment(spec, jobs=jobs)
    except (IgboltzError, OSError) as exc:
        return _fail(str(exc))
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "results.csv")
    table.write_csv(csv_path)
    summary_path = os.path.join(args.out, "summary.json")
    table.write_summary(summary_path)
    _write_manifest(
        os.path.join(args.out, "manifest.json"), "experiment",
        _spec_to_dict(spec), spec.master_seed, [csv_path, summary_path],
        started, jobs=jobs)

    summary = table.summary()
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        for key, cell in sorted(summary.items()):
            print(f"{key}  mean={cell['mean']:.6g}  "
                  f"stderr={cell['stderr']:.3g}  count={cell['count']}  "
                  f"failures={cell['failures']}")
    if all(row["failed"] for row in table.rows):
        print("every trial failed", file=sys.stderr)
        return ALL_TRIALS_FAILED
    return 0


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def _read_csv_matrix(path: str) -> SampleSet:
    with open(path, newline="") as fh:
        rows = [[cell.strip() for cell in row]
                for row in csv.reader(fh) if row]
    if not rows:
        raise IgboltzError("no rows found")
    width = len(rows[0])
    out = np.empty((len(rows), width), dtype=np.int8)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise IgboltzError(
                f"row {i + 1} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            if cell not in ("0", "1"):
                raise IgboltzError(
                    f"row {i + 1} cell {j + 1} is {cell!r}, expected 0 or 1")
            out[i, j] = cell == "1"
    return SampleSet(width, out)


def cmd_ingest(args) -> int:
    started = _utc_now()
    try:
        if args.format == "lines01":
            with open(args.input) as fh:
                data = sampleset_from_lines(fh.read())
        else:
            data = _read_csv_matrix(args.input)
    except (IgboltzError, OSError) as exc:
        return _fail(str(exc))
    try:
        _atomic_write(args.out, sampleset_to_lines(data))
        _write_manifest(
            args.out + ".manifest.json", "ingest",
            {"input": os.path.abspath(args.input), "format": args.format},
            args.seed, [args.out], started,
            meta={"source": f"file({os.path.abspath(args.input)})"},
            rows=len(data), n=data.n)
    except OSError as exc:
        return _fail(str(exc))
    if args.json:
        print(json.dumps({"rows": len(data), "n": data.n,
                          "out": os.path.abspath(args.out)}))
    else:
        print(f"ingested {len(data)} rows of width {data.n}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the configured seed")
    common.add_argument("--jobs", type=int, default=None,
                        help="worker processes (default: all cores)")
    common.add_argument("--json", action="store_true",
                        help="machine-readable stdout")

    parser = argparse.ArgumentParser(
        prog="igboltz",
        description="coordinate charts, Fisher metrics, and Boltzmann-"
                    "machine training over binary state spaces")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("coords", parents=[common],
                       help="print a distribution in a coordinate system")
    p.add_argument("--input", required=True, help="distribution JSON file")
    p.add_argument("--system", required=True,
                   choices=("p", "eta", "theta", "mixed"))
    p.add_argument("--l", type=int, default=None,
                   help="split order for the mixed system")
    p.add_argument("--out", default=None, help="directory for artifacts")
    p.set_defaults(fn=cmd_coords)

    p = sub.add_parser("fisher", parents=[common],
                       help="Fisher matrix, confidence ratios, or oracle check")
    p.add_argument("--input", required=True)
    p.add_argument("--system", required=True,
                   choices=("theta", "eta", "mixed"))
    p.add_argument("--l", type=int, default=None)
    p.add_argument("--ratios", action="store_true",
                   help="print the tailoring confidence ratio pair")
    p.add_argument("--oracle", action="store_true",
                   help="also run the score-covariance oracle")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_fisher)

    p = sub.add_parser("train", parents=[common],
                       help="fit one model to one sample file")
    p.add_argument("--model", required=True, choices=("sbm", "rbm"))
    p.add_argument("--method", required=True,
                   choices=("ml", "cd1", "cdcif", "ip"))
    p.add_argument("--data", required=True, help="sample rows, one per line")
    p.add_argument("--config", required=True, help="flat JSON config")
    p.add_argument("--out", required=True, help="artifact directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("experiment", parents=[common],
                       help="run a full result grid from a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("ingest", parents=[common],
                       help="normalize a raw binary matrix into sample rows")
    p.add_argument("--input", required=True)
    p.add_argument("--format", required=True, choices=("lines01", "csv"))
    p.add_argument("--out", required=True, help="output sample file")
    p.set_defaults(fn=cmd_ingest)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

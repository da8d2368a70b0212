"""Batch command-line driver.

    pairjoint gen-synthetic  --out DIR [--vocab-size V --count N --seed S ...]
    pairjoint derive         --manifest M --out DIR [--methods ... --jobs J]
    pairjoint evaluate       --manifest M --out DIR [--joints-dir DIR ...]
    pairjoint check-compat   --manifest M --out DIR [--compat-tol T]
    pairjoint analyze-distance --manifest M --out DIR [--distance-kind K]

Every command is deterministic given its flags (fixed seeds, fixed merge
order) and idempotent over its outputs; the resolved flags are echoed into
``<out>/<command>_config.txt``. Exit codes: 0 success, 2 input error,
3 numerical failure.
"""

from __future__ import annotations

import functools
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import click
import numpy as np

from . import __version__
from .compat import check_compatibility, gen_synthetic, synthetic_record
from .constructions import AGConfig, derive_joint
from .core import METHODS, InputError, NumericalError, PairRecord, PairjointError
from .io import (
    Manifest,
    read_joints,
    read_manifest_records,
    write_joints,
    write_manifest,
    write_records,
)
from .metrics import (
    aggregate,
    distance_analysis,
    distance_table,
    metrics_table,
    report_to_text,
    score_example,
)

EXIT_INPUT_ERROR = 2
EXIT_NUMERICAL_ERROR = 3

JOINT_FILE_TEMPLATE = "joints_{method}.pjj"


def _parse_methods(spec: str) -> tuple[str, ...]:
    if spec.strip() == "all":
        return METHODS
    methods = tuple(m.strip() for m in spec.split(",") if m.strip())
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise InputError(f"unknown methods {unknown}; choose from {list(METHODS)}")
    if not methods:
        raise InputError("empty method list")
    return methods


def _snapshot(out: Path, command: str, params: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command: {command}", f"version: {__version__}"]
    lines += [f"{k}: {v}" for k, v in sorted(params.items())]
    (out / f"{command}_config.txt").write_text("\n".join(lines) + "\n")


def _resolve_jobs(jobs: int) -> int:
    return jobs if jobs > 0 else (os.cpu_count() or 1)


def _parallel_map(fn, items: Sequence, jobs: int) -> list:
    """Order-preserving map with a process pool; results merge in input order."""
    jobs = _resolve_jobs(jobs)
    if jobs == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        chunk = max(1, len(items) // (jobs * 4))
        return list(pool.map(fn, items, chunksize=chunk))


def _derive_for_record(record: PairRecord, methods: tuple[str, ...], ag_config: AGConfig):
    return {m: derive_joint(record.cond_a_given_b, record.cond_b_given_a,
                            record.marg_a, record.marg_b, m, ag_config)
            for m in methods}


def _score_for_record(record: PairRecord, methods: tuple[str, ...], ag_config: AGConfig,
                      precomputed: Optional[dict] = None):
    joints = precomputed if precomputed is not None \
        else _derive_for_record(record, methods, ag_config)
    return {m: score_example(record, joints[m], use_original_unaries=(m == "mlm"))
            for m in methods}


def _compat_for_record(record: PairRecord, tolerance: float):
    return check_compatibility(record.cond_a_given_b, record.cond_b_given_a, tolerance)


def _load_or_derive_joints(records, methods, ag_config, joints_dir: Optional[Path], jobs: int):
    """Per-record method->joint maps, from joint files when available."""
    loaded: dict[str, dict[str, object]] = {}
    to_compute = list(methods)
    if joints_dir is not None:
        for method in methods:
            path = joints_dir / JOINT_FILE_TEMPLATE.format(method=method)
            if path.exists():
                for example_id, joint in read_joints(path):
                    loaded.setdefault(example_id, {})[method] = joint
                to_compute.remove(method)
    if to_compute:
        worker = functools.partial(_derive_for_record, methods=tuple(to_compute), ag_config=ag_config)
        for record, derived in zip(records, _parallel_map(worker, records, jobs)):
            loaded.setdefault(record.example_id, {}).update(derived)
    for record in records:
        missing = [m for m in methods if m not in loaded.get(record.example_id, {})]
        if missing:
            raise InputError(f"no joints for record {record.example_id!r}, methods {missing}")
    return [loaded[r.example_id] for r in records]


@click.group()
@click.version_option(version=__version__, prog_name="pairjoint")
def cli():
    """Derive and evaluate explicit pairwise joints from MLM conditionals."""


@cli.command("gen-synthetic")
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Output directory.")
@click.option("--vocab-size", default=8, show_default=True, help="Vocabulary size V.")
@click.option("--count", default=100, show_default=True, help="Number of records.")
@click.option("--seed", default=0, show_default=True, help="Base seed; record i uses seed+i.")
@click.option("--concentration", default=1.0, show_default=True,
              help="Symmetric Dirichlet concentration for the true joints.")
@click.option("--perturb-scale", default=0.0, show_default=True,
              help="Multiplicative log-noise half-width applied to the conditionals.")
@click.option("--top-k", default=0, show_default=True,
              help="Write rows truncated to their K largest entries (0 = dense).")
@click.option("--logits/--no-logits", "with_logits", default=True, show_default=True,
              help="Attach a synthetic raw-logits channel (log probs + per-context shift).")
def cmd_gen_synthetic(out: Path, vocab_size: int, count: int, seed: int, concentration: float,
                      perturb_scale: float, top_k: int, with_logits: bool):
    """Write a synthetic dataset: records_synthetic.pjr plus manifest.txt."""
    if count < 1:
        raise InputError(f"count must be >= 1, got {count}")
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        instance = gen_synthetic(vocab_size, seed + i, concentration, perturb_scale)
        records.append(synthetic_record(instance, f"synthetic-{seed}-{i:05d}", with_logits))
    record_file = "records_synthetic.pjr"
    write_records(records, out / record_file, top_k=top_k or None)
    manifest = Manifest(
        dataset=f"synthetic-v{vocab_size}-n{count}-s{seed}",
        corpus="synthetic",
        scheme="synthetic",
        model="dirichlet-ground-truth",
        record_files=(record_file,),
        params={"vocab_size": str(vocab_size), "count": str(count), "seed": str(seed),
                "concentration": repr(concentration), "perturb_scale": repr(perturb_scale),
                "top_k": str(top_k), "logits": str(int(with_logits))},
    )
    write_manifest(manifest, out / "manifest.txt")
    _snapshot(out, "gen_synthetic", {
        "out": out, "vocab_size": vocab_size, "count": count, "seed": seed,
        "concentration": concentration, "perturb_scale": perturb_scale,
        "top_k": top_k, "logits": with_logits})
    click.echo(f"wrote {count} records to {out / record_file}")


@cli.command("derive")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--methods", default="all", show_default=True,
              help="Comma-separated subset of mlm,mrf,mrf_logit,hcb,ag.")
@click.option("--ag-iters", default=50, show_default=True, help="AG iteration cap.")
@click.option("--ag-tol", default=1e-10, show_default=True, help="AG convergence tolerance.")
@click.option("--jobs", default=0, show_default=True, help="Worker processes (0 = all cores).")
def cmd_derive(manifest_path: Path, out: Path, methods: str, ag_iters: int, ag_tol: float, jobs: int):
    """Derive one joint file per method from the manifest's records."""
    method_list = _parse_methods(methods)
    ag_config = AGConfig(max_iterations=ag_iters, convergence_tol=ag_tol)
    _, records = read_manifest_records(manifest_path)
    out.mkdir(parents=True, exist_ok=True)
    worker = functools.partial(_derive_for_record, methods=method_list, ag_config=ag_config)
    derived = _parallel_map(worker, records, jobs)
    for method in method_list:
        joints = [(r.example_id, d[method]) for r, d in zip(records, derived)]
        write_joints(out / JOINT_FILE_TEMPLATE.format(method=method), joints)
    _snapshot(out, "derive", {"manifest": manifest_path, "out": out, "methods": ",".join(method_list),
                              "ag_iters": ag_iters, "ag_tol": ag_tol, "jobs": jobs})
    click.echo(f"derived {len(method_list)} joint files over {len(records)} records into {out}")


@cli.command("evaluate")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--methods", default="all", show_default=True)
@click.option("--joints-dir", type=click.Path(path_type=Path), default=None,
              help="Directory with joints_<method>.pjj files; methods without a file "
                   "are derived on the fly.")
@click.option("--ag-iters", default=50, show_default=True)
@click.option("--ag-tol", default=1e-10, show_default=True)
@click.option("--jobs", default=0, show_default=True)
def cmd_evaluate(manifest_path: Path, out: Path, methods: str, joints_dir: Optional[Path],
                 ag_iters: int, ag_tol: float, jobs: int):
    """Score every record under every method; write per-method reports and a
    combined metric table."""
    method_list = _parse_methods(methods)
    ag_config = AGConfig(max_iterations=ag_iters, convergence_tol=ag_tol)
    manifest, records = read_manifest_records(manifest_path)
    if not records:
        raise InputError("manifest contains no records")
    out.mkdir(parents=True, exist_ok=True)
    per_record_joints = _load_or_derive_joints(records, method_list, ag_config, joints_dir, jobs)

    reports = []
    for method in method_list:
        scores = [score_example(r, joints[method], use_original_unaries=(method == "mlm"))
                  for r, joints in zip(records, per_record_joints)]
        report = aggregate(scores)
        reports.append(report)
        (out / f"report_{method}.txt").write_text(report_to_text(report))
    (out / "metrics.csv").write_text(metrics_table(reports, manifest.scheme))

    header = f"{'method':<10} {'U-PPL':>12} {'P-PPL':>14} {'A-KL':>10} {'G-KL':>10}"
    click.echo(f"scheme: {manifest.scheme}  examples: {len(records)}")
    click.echo(header)
    for report in reports:
        click.echo(f"{report.method:<10} {report.u_ppl:>12.4f} {report.p_ppl:>14.4f} "
                   f"{report.a_kl:>10.4f} {report.g_kl:>10.4f}")
    _snapshot(out, "evaluate", {"manifest": manifest_path, "out": out,
                                "methods": ",".join(method_list), "joints_dir": joints_dir,
                                "ag_iters": ag_iters, "ag_tol": ag_tol, "jobs": jobs})


@cli.command("check-compat")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--compat-tol", default=1e-6, show_default=True,
              help="Max-abs double-centering residual for compatibility.")
@click.option("--jobs", default=0, show_default=True)
def cmd_check_compat(manifest_path: Path, out: Path, compat_tol: float, jobs: int):
    """Per-record compatibility reports plus a residual histogram summary."""
    _, records = read_manifest_records(manifest_path)
    if not records:
        raise InputError("manifest contains no records")
    out.mkdir(parents=True, exist_ok=True)
    worker = functools.partial(_compat_for_record, tolerance=compat_tol)
    results = _parallel_map(worker, records, jobs)

    lines = ["example_id,residual_max,residual_frobenius,compatible"]
    lines += [f"{r.example_id},{c.residual_max!r},{c.residual_frobenius!r},{int(c.compatible)}"
              for r, c in zip(records, results)]
    (out / "compat.csv").write_text("\n".join(lines) + "\n")

    n_compat = sum(c.compatible for c in results)
    decades = np.floor(np.log10(np.maximum([c.residual_max for c in results], 1e-300))).astype(int)
    histogram = {int(d): int((decades == d).sum()) for d in sorted(set(decades))}
    summary = [f"records: {len(results)}",
               f"tolerance: {compat_tol!r}",
               f"compatible: {n_compat}",
               f"incompatible: {len(results) - n_compat}"]
    summary += [f"residual_decade.1e{d:+d}: {count}" for d, count in histogram.items()]
    (out / "compat_summary.txt").write_text("\n".join(summary) + "\n")
    for line in summary:
        click.echo(line)
    _snapshot(out, "check_compat", {"manifest": manifest_path, "out": out,
                                    "compat_tol": compat_tol, "jobs": jobs})


@cli.command("analyze-distance")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--methods", default="all", show_default=True)
@click.option("--distance-kind", type=click.Choice(["token", "syntactic"]), default="token",
              show_default=True)
@click.option("--merge-tail-below", default=0, show_default=True,
              help="Merge trailing buckets with fewer examples than this (0 = keep exact buckets).")
@click.option("--joints-dir", type=click.Path(path_type=Path), default=None)
@click.option("--ag-iters", default=50, show_default=True)
@click.option("--ag-tol", default=1e-10, show_default=True)
@click.option("--jobs", default=0, show_default=True)
def cmd_analyze_distance(manifest_path: Path, out: Path, methods: str, distance_kind: str,
                         merge_tail_below: int, joints_dir: Optional[Path],
                         ag_iters: int, ag_tol: float, jobs: int):
    """Mean pairwise NLL per masked-token distance bucket, per method."""
    method_list = _parse_methods(methods)
    ag_config = AGConfig(max_iterations=ag_iters, convergence_tol=ag_tol)
    _, records = read_manifest_records(manifest_path)
    if not records:
        raise InputError("manifest contains no records")
    out.mkdir(parents=True, exist_ok=True)
    per_record_joints = _load_or_derive_joints(records, method_list, ag_config, joints_dir, jobs)
    scores = [score_example(r, joints[m], use_original_unaries=(m == "mlm"))
              for r, joints in zip(records, per_record_joints) for m in method_list]
    buckets = distance_analysis(scores, kind=distance_kind, merge_tail_below=merge_tail_below)
    (out / f"distance_{distance_kind}.csv").write_text(distance_table(buckets, distance_kind))
    for b in buckets:
        tail = " (merged tail)" if b.merged_tail else ""
        click.echo(f"{b.method:<10} distance {b.distance:>3}: n={b.count:<5} "
                   f"mean PNLL {b.mean_pnll:.4f}{tail}")
    _snapshot(out, "analyze_distance", {"manifest": manifest_path, "out": out,
                                        "methods": ",".join(method_list),
                                        "distance_kind": distance_kind,
                                        "merge_tail_below": merge_tail_below,
                                        "joints_dir": joints_dir, "ag_iters": ag_iters,
                                        "ag_tol": ag_tol, "jobs": jobs})


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 130
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return EXIT_INPUT_ERROR
    except click.ClickException as exc:
        exc.show()
        return EXIT_INPUT_ERROR
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERICAL_ERROR
    except InputError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INPUT_ERROR
    except PairjointError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())

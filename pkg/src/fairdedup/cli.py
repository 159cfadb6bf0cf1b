"""Command-line pipeline: cluster, build-prototypes, dedup, calibrate, audit, synth, study.

Option precedence is flags over config-file values over defaults.  Every
command writes its outputs under --out-dir together with a manifest.json
recording the resolved config, its hash, and the root seed.  Exit codes:
0 success, 2 config/validation error, 3 IO error, 4 calibration target
not attainable.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import dedup, embedstore, fairmetrics, partition, prototypes, synthstudy
from .errors import FairDedupError

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NOT_ATTAINABLE = 4


def _die(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    config_path = Path(path)
    if not config_path.is_file():
        _die(EXIT_CONFIG, f"config file does not exist: {config_path}")
    try:
        data = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        _die(EXIT_CONFIG, f"config file {config_path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        _die(EXIT_CONFIG, f"config file {config_path} must hold a JSON object")
    return data


def _resolve(config: dict, key: str, flag_value, default=None):
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _require(value, name: str):
    if value is None:
        _die(EXIT_CONFIG, f"missing required option --{name.replace('_', '-')}")
    return value


def _require_file(path, name: str) -> Path:
    path = Path(_require(path, name))
    if not path.is_file():
        _die(EXIT_CONFIG, f"--{name.replace('_', '-')}: path does not exist: {path}")
    return path


def _out_dir(path) -> Path:
    out = Path(_require(path, "out_dir"))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _die(EXIT_IO, f"cannot create output directory {out}: {exc}")
    return out


def _write_manifest(out: Path, command: str, resolved: dict, outputs: list[str]):
    # Worker count is an execution knob that never affects outputs; keep it
    # out of the recorded config so runs differing only in --workers produce
    # byte-identical manifests.
    recorded = {k: v for k, v in resolved.items() if k != "workers"}
    canonical = json.dumps(recorded, sort_keys=True, separators=(",", ":"))
    manifest = {
        "command": command,
        "config": recorded,
        "config_hash": hashlib.sha256(canonical.encode("utf-8")).hexdigest(),
        "seed": recorded.get("seed"),
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _guard(fn, *args, **kwargs):
    """Run a step, mapping engine errors to exit 2 and OS errors to exit 3."""
    try:
        return fn(*args, **kwargs)
    except FairDedupError as exc:
        _die(EXIT_CONFIG, str(exc))
    except OSError as exc:
        _die(EXIT_IO, str(exc))


def _positive(value, name: str) -> int:
    value = int(value)
    if value < 1:
        _die(EXIT_CONFIG, f"{name} must be >= 1, got {value}")
    return value


@click.group()
def main():
    """Semantic deduplication pipeline for embedding datasets."""


@main.command()
@click.option("--config", "config_path", default=None, help="JSON config file.")
@click.option("--embeddings", default=None, help="Embedding file (embedstore format).")
@click.option("--k", type=int, default=None, help="Cluster count.")
@click.option("--max-iters", type=int, default=None)
@click.option("--tol", type=float, default=None)
@click.option("--init", type=click.Choice(partition.INIT_METHODS), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out-dir", default=None)
def cluster(config_path, embeddings, k, max_iters, tol, init, seed, workers, out_dir):
    """Partition embeddings with spherical k-means."""
    config = _load_config(config_path)
    resolved = {
        "embeddings": str(_require_file(_resolve(config, "embeddings", embeddings), "embeddings")),
        "k": _require(_resolve(config, "k", k), "k"),
        "max_iters": _resolve(config, "max_iters", max_iters, 100),
        "tol": _resolve(config, "tol", tol, 1e-4),
        "init": _resolve(config, "init", init, "kmeanspp"),
        "seed": _positive(_resolve(config, "seed", seed, 1), "seed"),
        "workers": _positive(_resolve(config, "workers", workers, 1), "workers"),
    }
    out = _out_dir(_resolve(config, "out_dir", out_dir))

    matrix = _guard(embedstore.read_embeddings, resolved["embeddings"])
    cfg = _guard(
        partition.KMeansConfig,
        k=resolved["k"],
        max_iters=resolved["max_iters"],
        tol=resolved["tol"],
        seed=resolved["seed"],
        init=resolved["init"],
    )
    assignment = _guard(partition.kmeans, matrix, cfg)
    _guard(partition.write_assignment, out / "assignment.jsonl", matrix.ids, assignment)
    centroid_ids = [f"centroid{i}" for i in range(assignment.k)]
    _guard(
        embedstore.write_embeddings,
        embedstore.EmbeddingMatrix.create(centroid_ids, assignment.centroids),
        out / "centroids.fddemb",
    )
    _write_manifest(out, "cluster", resolved, ["assignment.jsonl", "centroids.fddemb"])
    click.echo(
        f"clustered {matrix.n} samples into k={assignment.k} "
        f"(empty: {len(assignment.empty_clusters())}), inertia={assignment.inertia:.6f}"
    )


@main.command("build-prototypes")
@click.option("--config", "config_path", default=None)
@click.option("--concepts", default=None, help="Concept spec JSON (default: shipped list).")
@click.option("--captions", default=None, help="Caption embeddings (embedstore format).")
@click.option("--out-dir", default=None)
def build_prototypes(config_path, concepts, captions, out_dir):
    """Average caption embeddings into concept prototypes."""
    config = _load_config(config_path)
    concepts_path = _resolve(config, "concepts", concepts)
    resolved = {
        "concepts": str(_require_file(concepts_path, "concepts")) if concepts_path else "<default>",
        "captions": str(_require_file(_resolve(config, "captions", captions), "captions")),
        "seed": None,
    }
    out = _out_dir(_resolve(config, "out_dir", out_dir))

    spec = (
        _guard(prototypes.ConceptSpec.from_json, concepts_path)
        if concepts_path
        else prototypes.ConceptSpec.default()
    )
    caption_embs = _guard(embedstore.read_embeddings, resolved["captions"])
    protos = _guard(prototypes.build_prototypes, spec, caption_embs)
    _guard(prototypes.write_prototypes, protos, out / "prototypes.fddemb")
    _write_manifest(out, "build-prototypes", resolved, ["prototypes.fddemb"])
    click.echo(f"built {protos.m} prototypes of dimension {protos.d}")


def _load_dedup_inputs(resolved):
    matrix = _guard(embedstore.read_embeddings, resolved["embeddings"])
    ids, clusters = _guard(partition.read_assignment, resolved["assignment"])
    centroid_matrix = _guard(embedstore.read_embeddings, resolved["centroids"])
    assignment = _guard(
        partition.assignment_for_matrix, matrix, ids, clusters, centroid_matrix.rows
    )
    protos = None
    if resolved.get("prototypes"):
        protos = _guard(prototypes.read_prototypes, resolved["prototypes"])
    return matrix, assignment, protos


def _resolve_dedup(config, embeddings, assignment, centroids, heuristic, epsilon,
                   protos_path, seed, visit_order, target_keep, tol, workers):
    resolved = {
        "embeddings": str(_require_file(_resolve(config, "embeddings", embeddings), "embeddings")),
        "assignment": str(_require_file(_resolve(config, "assignment", assignment), "assignment")),
        "centroids": str(_require_file(_resolve(config, "centroids", centroids), "centroids")),
        "heuristic": _resolve(config, "heuristic", heuristic, "semdedup"),
        "epsilon": _resolve(config, "epsilon", epsilon, 0.1),
        "seed": _positive(_resolve(config, "seed", seed, 1), "seed"),
        "visit_order": _resolve(config, "visit_order", visit_order, "random"),
        "target_keep": _resolve(config, "target_keep", target_keep),
        "tol": _resolve(config, "tol", tol, 0.005),
        "workers": _positive(_resolve(config, "workers", workers, 1), "workers"),
    }
    protos_path = _resolve(config, "prototypes", protos_path)
    if resolved["heuristic"] == "fairdedup":
        resolved["prototypes"] = str(_require_file(protos_path, "prototypes"))
    else:
        resolved["prototypes"] = str(protos_path) if protos_path else None
    return resolved


_dedup_options = [
    click.option("--config", "config_path", default=None),
    click.option("--embeddings", default=None),
    click.option("--assignment", default=None, help="assignment.jsonl from `cluster`."),
    click.option("--centroids", default=None, help="centroids.fddemb from `cluster`."),
    click.option("--heuristic", type=click.Choice(dedup.HEURISTICS), default=None),
    click.option("--epsilon", type=float, default=None),
    click.option("--prototypes", "protos_path", default=None),
    click.option("--seed", type=int, default=None),
    click.option("--visit-order", type=click.Choice(dedup.VISIT_ORDERS), default=None),
    click.option("--target-keep", type=float, default=None,
                 help="Calibrate epsilon to hit this keep fraction first."),
    click.option("--tol", type=float, default=None, help="Calibration tolerance."),
    click.option("--workers", type=int, default=None),
    click.option("--out-dir", default=None),
]


def _with_options(options):
    def wrap(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn
    return wrap


@main.command("dedup")
@_with_options(_dedup_options)
def dedup_cmd(config_path, embeddings, assignment, centroids, heuristic, epsilon,
              protos_path, seed, visit_order, target_keep, tol, workers, out_dir):
    """Prune duplicate neighborhoods; writes a keep-list."""
    config = _load_config(config_path)
    resolved = _resolve_dedup(config, embeddings, assignment, centroids, heuristic,
                              epsilon, protos_path, seed, visit_order, target_keep,
                              tol, workers)
    out = _out_dir(_resolve(config, "out_dir", out_dir))
    matrix, assignment_obj, protos = _load_dedup_inputs(resolved)

    cfg = _guard(
        dedup.DedupConfig,
        epsilon=resolved["epsilon"],
        heuristic=resolved["heuristic"],
        seed=resolved["seed"],
        target_keep_fraction=resolved["target_keep"],
        visit_order=resolved["visit_order"],
    )
    outputs = ["keeplist.jsonl"]
    if resolved["target_keep"] is not None:
        calibration = _guard(
            dedup.calibrate_epsilon,
            matrix, assignment_obj, protos, cfg,
            target_keep=resolved["target_keep"],
            tol=resolved["tol"],
            workers=resolved["workers"],
        )
        from dataclasses import replace
        cfg = replace(cfg, epsilon=calibration.epsilon)
        if not calibration.attained:
            _write_manifest(out, "dedup", resolved, [])
            _die(
                EXIT_NOT_ATTAINABLE,
                f"calibration could not attain keep fraction "
                f"{resolved['target_keep']} within {resolved['tol']}; best "
                f"epsilon={calibration.epsilon:.6g} keeps "
                f"{calibration.realized_keep_fraction:.4f}",
            )
        click.echo(f"calibrated epsilon={calibration.epsilon:.6g}")

    keep_list = _guard(
        dedup.dedup_dataset, matrix, assignment_obj, protos, cfg,
        workers=resolved["workers"],
    )
    _guard(dedup.write_keeplist, out / "keeplist.jsonl", matrix.ids, keep_list)
    _write_manifest(out, "dedup", {**resolved, "epsilon": cfg.epsilon}, outputs)
    click.echo(
        f"kept {len(keep_list.kept)}/{keep_list.n_total} samples "
        f"(keep fraction {keep_list.keep_fraction:.4f}, heuristic {cfg.heuristic})"
    )


@main.command()
@_with_options(_dedup_options)
def calibrate(config_path, embeddings, assignment, centroids, heuristic, epsilon,
              protos_path, seed, visit_order, target_keep, tol, workers, out_dir):
    """Find the epsilon whose realized keep fraction matches --target-keep."""
    config = _load_config(config_path)
    resolved = _resolve_dedup(config, embeddings, assignment, centroids, heuristic,
                              epsilon, protos_path, seed, visit_order, target_keep,
                              tol, workers)
    _require(resolved["target_keep"], "target_keep")
    out = _out_dir(_resolve(config, "out_dir", out_dir))
    matrix, assignment_obj, protos = _load_dedup_inputs(resolved)

    cfg = _guard(
        dedup.DedupConfig,
        epsilon=resolved["epsilon"],
        heuristic=resolved["heuristic"],
        seed=resolved["seed"],
        visit_order=resolved["visit_order"],
    )
    calibration = _guard(
        dedup.calibrate_epsilon,
        matrix, assignment_obj, protos, cfg,
        target_keep=resolved["target_keep"],
        tol=resolved["tol"],
        workers=resolved["workers"],
    )
    (out / "calibration.json").write_text(
        json.dumps(
            {
                "epsilon": calibration.epsilon,
                "realized_keep_fraction": calibration.realized_keep_fraction,
                "attained": calibration.attained,
                "evaluations": [list(e) for e in calibration.evaluations],
            },
            indent=2,
        )
        + "\n"
    )
    _write_manifest(out, "calibrate", resolved, ["calibration.json"])
    click.echo(
        f"epsilon={calibration.epsilon:.6g} keeps "
        f"{calibration.realized_keep_fraction:.4f} (attained: {calibration.attained})"
    )
    if not calibration.attained:
        _die(
            EXIT_NOT_ATTAINABLE,
            f"target keep fraction {resolved['target_keep']} not attainable within "
            f"{resolved['tol']}; best epsilon reported in calibration.json",
        )


@main.command()
@click.option("--config", "config_path", default=None)
@click.option("--labels", default=None, help="CSV: id,class,predicted,attr1,...")
@click.option("--disparity", "disparity_specs", multiple=True,
              help="attribute:subgroup1:subgroup2 (repeatable).")
@click.option("--min-support", type=int, default=None)
@click.option("--image-embeddings", default=None)
@click.option("--caption-embeddings", default=None)
@click.option("--k", type=int, default=None, help="Retrieval depth.")
@click.option("--desired", "desired_specs", multiple=True,
              help="attribute=distribution.json (repeatable).")
@click.option("--delta", type=float, default=None, help="Skew smoothing.")
@click.option("--out-dir", default=None)
def audit(config_path, labels, disparity_specs, min_support, image_embeddings,
          caption_embeddings, k, desired_specs, delta, out_dir):
    """Fairness audit: disparity report and/or retrieval skew summary."""
    config = _load_config(config_path)
    resolved = {
        "labels": str(_require_file(_resolve(config, "labels", labels), "labels")),
        "disparity": list(disparity_specs) or config.get("disparity", []),
        "min_support": _resolve(config, "min_support", min_support,
                                fairmetrics.DEFAULT_MIN_SUPPORT),
        "image_embeddings": _resolve(config, "image_embeddings", image_embeddings),
        "caption_embeddings": _resolve(config, "caption_embeddings", caption_embeddings),
        "k": _resolve(config, "k", k),
        "desired": list(desired_specs) or config.get("desired", []),
        "delta": _resolve(config, "delta", delta, fairmetrics.DEFAULT_SMOOTHING),
        "seed": None,
    }
    out = _out_dir(_resolve(config, "out_dir", out_dir))

    table = _guard(fairmetrics.LabeledTable.from_csv, resolved["labels"])
    if not table.records:
        _die(EXIT_CONFIG, f"label table {resolved['labels']} has no records")

    report: dict = {}
    if resolved["disparity"]:
        report["disparity"] = {}
        for spec in resolved["disparity"]:
            parts = str(spec).split(":")
            if len(parts) != 3:
                _die(EXIT_CONFIG, f"--disparity expects attribute:l1:l2, got {spec!r}")
            attribute, l1, l2 = parts
            result = _guard(
                fairmetrics.disparity_report, table, attribute, l1, l2,
                resolved["min_support"],
            )
            report["disparity"][f"{attribute}:{l1}:{l2}"] = result.to_dict()

    if resolved["image_embeddings"] or resolved["caption_embeddings"]:
        image_path = _require_file(resolved["image_embeddings"], "image_embeddings")
        caption_path = _require_file(resolved["caption_embeddings"], "caption_embeddings")
        image_embs = _guard(embedstore.read_embeddings, image_path)
        caption_embs = _guard(embedstore.read_embeddings, caption_path)
        desired = {}
        for spec in resolved["desired"]:
            attribute, _, path = str(spec).partition("=")
            if not path:
                _die(EXIT_CONFIG, f"--desired expects attribute=path, got {spec!r}")
            desired[attribute] = _guard(
                fairmetrics.DesiredDistribution.from_json,
                _require_file(path, "desired"),
            )
        summary = _guard(
            fairmetrics.audit_retrievals,
            list(caption_embs.ids), image_embs, caption_embs, table, desired,
            _require(resolved["k"], "k"), resolved["delta"],
        )
        report["retrieval"] = summary.to_dict()

    if not report:
        _die(EXIT_CONFIG, "nothing to audit: give --disparity and/or retrieval inputs")

    (out / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    _write_manifest(out, "audit", resolved, ["report.json"])
    click.echo(f"audit report written to {out / 'report.json'}")


@main.command()
@click.option("--config", "config_path", default=None)
@click.option("--spec", default=None, help="SynthSpec JSON file.")
@click.option("--seed", type=int, default=None, help="Overrides the spec seed.")
@click.option("--out-dir", default=None)
def synth(config_path, spec, seed, out_dir):
    """Generate a synthetic labeled embedding dataset."""
    config = _load_config(config_path)
    resolved = {
        "spec": str(_require_file(_resolve(config, "spec", spec), "spec")),
        "seed": _resolve(config, "seed", seed),
    }
    out = _out_dir(_resolve(config, "out_dir", out_dir))
    synth_spec = _guard(synthstudy.SynthSpec.from_json, resolved["spec"])
    if resolved["seed"] is not None:
        from dataclasses import replace
        synth_spec = replace(synth_spec, seed=_positive(resolved["seed"], "seed"))
    matrix, table = _guard(synthstudy.generate, synth_spec)
    _guard(embedstore.write_embeddings, matrix, out / "embeddings.fddemb")
    _guard(table.to_csv, out / "labels.csv")
    _write_manifest(
        out, "synth", {**resolved, "seed": synth_spec.seed},
        ["embeddings.fddemb", "labels.csv"],
    )
    click.echo(f"generated {matrix.n} rows of dimension {matrix.d}")


@main.command()
@click.option("--config", "config_path", default=None)
@click.option("--spec", default=None, help="SynthSpec JSON file.")
@click.option("--trials", type=int, default=None)
@click.option("--target-keep", type=float, default=None)
@click.option("--tol", type=float, default=None)
@click.option("--k", type=int, default=None, help="Cluster count (default: spec clusters).")
@click.option("--workers", type=int, default=None)
@click.option("--out-dir", default=None)
def study(config_path, spec, trials, target_keep, tol, k, workers, out_dir):
    """Minority-mass retention study across trial seeds."""
    config = _load_config(config_path)
    resolved = {
        "spec": str(_require_file(_resolve(config, "spec", spec), "spec")),
        "trials": _require(_resolve(config, "trials", trials), "trials"),
        "target_keep": _resolve(config, "target_keep", target_keep, 0.5),
        "tol": _resolve(config, "tol", tol, 0.005),
        "k": _resolve(config, "k", k),
        "workers": _positive(_resolve(config, "workers", workers, 1), "workers"),
        "seed": None,
    }
    out = _out_dir(_resolve(config, "out_dir", out_dir))
    synth_spec = _guard(synthstudy.SynthSpec.from_json, resolved["spec"])
    resolved["seed"] = synth_spec.seed
    report = _guard(
        synthstudy.retention_study,
        synth_spec,
        n_trials=int(resolved["trials"]),
        target_keep=resolved["target_keep"],
        calibration_tol=resolved["tol"],
        k=resolved["k"],
        workers=resolved["workers"],
    )
    (out / "retention_report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    table_text = report.format_table()
    (out / "retention_report.txt").write_text(table_text + "\n", encoding="utf-8")
    _write_manifest(
        out, "study", resolved, ["retention_report.json", "retention_report.txt"]
    )
    click.echo(table_text)


if __name__ == "__main__":
    main()

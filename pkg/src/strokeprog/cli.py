"""Command-line orchestration of the pipeline.

Configuration is a flat UTF-8 key=value file; every key has a matching
``--key`` flag that overrides it (defaults < config file < flags). Every
run writes a manifest (resolved configuration, input hashes, seeds) into
the output directory, and all randomness flows from explicit seeds, so
identical invocations produce identical bytes.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import multiprocessing
import os
import sys
import traceback

import numpy as np

from . import __version__
from .errors import PipelineError, ValidationError
from .evaluation import (
    CVReport,
    ExperimentConfig,
    compare_runs,
    run_experiment,
)
from .explain import importance, occlusion_saliency
from .inference3d import (
    NAMED_SPECS,
    embed_with_cache,
    load_network,
    make_projection_head,
    project,
    random_network_weights,
)
from .lesion import segment_lesion
from .model import load_bundle, save_bundle, train_bundle
from .preprocess import normalize_intensity, resample_trilinear
from .synthcohort import CohortSpec, generate
from .tabular import parse_clinical_csv, impute_median
from .util import dump_json, fnv1a64_hex
from .volume_io import TensorRecord, read_nifti, write_container

# --- configuration plumbing --------------------------------------------------

_DEFAULTS = {
    "output_dir": "out",
    "jobs": "",  # empty -> logical cores
    "volumes_dir": "",
    "clinical_csv": "",
    "weights": "",
    "net": "resnet50",
    "cache_dir": "",  # empty -> <output_dir>/cache
    "target_shape": "24,256,256",
    "threshold": "620",
    "projection_dim": "128",
    "projection_seed": "7",
    "blocks": "mri_j1,clinical,lesion_j1",
    "nihss_days": "j0,j1",
    "folds": "8",
    "fold_seed": "13",
    "svm_seed": "29",
    "grid": "0",
    "masks_out": "0",
    # synth
    "n": "74",
    "seed": "1",
    "prevalence": "0.554",
    "clinical_signal": "0.3",
    "lesion_j0_signal": "0.25",
    "lesion_j1_signal": "0.9",
    "volume_shape": "24,64,64",
    "noise": "0.08",
    "missing_rate": "0.03",
    "weights_out": "",
    "weights_seed": "11",
    # compare
    "report_a": "",
    "report_b": "",
    "alternative": "greater",
    # explain
    "bundle": "",
    "patient": "",
    "timepoint": "J1",
    "window": "4,16,16",
    "stride": "4,16,16",
    "fill": "0",
}

_COMMAND_KEYS = {
    "synth": [
        "output_dir", "n", "seed", "prevalence", "clinical_signal", "lesion_j0_signal",
        "lesion_j1_signal", "volume_shape", "noise", "missing_rate", "weights_out",
        "weights_seed", "net",
    ],
    "preprocess": ["output_dir", "jobs", "volumes_dir", "target_shape"],
    "segment": ["output_dir", "jobs", "volumes_dir", "target_shape", "threshold", "masks_out"],
    "embed": [
        "output_dir", "jobs", "volumes_dir", "weights", "net", "target_shape", "cache_dir",
    ],
    "train": [
        "output_dir", "jobs", "volumes_dir", "clinical_csv", "weights", "net", "target_shape",
        "cache_dir", "threshold", "projection_dim", "projection_seed", "blocks", "nihss_days",
        "svm_seed",
    ],
    "evaluate": [
        "output_dir", "jobs", "volumes_dir", "clinical_csv", "weights", "net", "target_shape",
        "cache_dir", "threshold", "projection_dim", "projection_seed", "blocks", "nihss_days",
        "folds", "fold_seed", "svm_seed", "grid",
    ],
    "compare": ["output_dir", "report_a", "report_b", "alternative"],
    "explain": [
        "output_dir", "jobs", "volumes_dir", "clinical_csv", "weights", "net", "target_shape",
        "cache_dir", "threshold", "projection_dim", "projection_seed", "blocks", "nihss_days",
        "svm_seed", "bundle", "patient", "timepoint", "window", "stride", "fill",
    ],
    "report": ["output_dir"],
}


def load_config_file(path: str) -> dict[str, str]:
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValidationError(f"{path}:{line_no}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in _DEFAULTS:
                    raise ValidationError(f"{path}:{line_no}: unknown config key {key!r}")
                values[key] = value.strip()
    except OSError as exc:
        raise ValidationError(f"config: cannot read {path}: {exc}") from None
    return values


def resolve_config(args: argparse.Namespace, command: str) -> dict[str, str]:
    cfg = {k: _DEFAULTS[k] for k in _COMMAND_KEYS[command]}
    if getattr(args, "config", None):
        file_values = load_config_file(args.config)
        for k, v in file_values.items():
            if k in cfg:
                cfg[k] = v
    for k in _COMMAND_KEYS[command]:
        flag = getattr(args, k, None)
        if flag is not None:
            cfg[k] = flag
    return cfg


def _need_path(cfg: dict[str, str], key: str, kind: str = "path") -> str:
    value = cfg.get(key, "")
    if not value:
        raise ValidationError(f"{key}: required {kind} is not set")
    if not os.path.exists(value):
        raise ValidationError(f"{key}: {kind} does not exist: {value}")
    return value


def _get_int(cfg, key, lo=None, hi=None) -> int:
    try:
        v = int(cfg[key])
    except ValueError:
        raise ValidationError(f"{key}: expected an integer, got {cfg[key]!r}") from None
    if (lo is not None and v < lo) or (hi is not None and v > hi):
        raise ValidationError(f"{key}: {v} outside [{lo}, {hi}]")
    return v


def _get_float(cfg, key) -> float:
    try:
        return float(cfg[key])
    except ValueError:
        raise ValidationError(f"{key}: expected a number, got {cfg[key]!r}") from None


def _get_shape(cfg, key) -> tuple[int, int, int]:
    parts = [p.strip() for p in cfg[key].split(",")]
    if len(parts) != 3:
        raise ValidationError(f"{key}: expected three comma-separated dims, got {cfg[key]!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ValidationError(f"{key}: expected integers, got {cfg[key]!r}") from None
    if any(d < 1 for d in dims):
        raise ValidationError(f"{key}: dims must be positive, got {dims}")
    return dims


def _get_list(cfg, key) -> tuple[str, ...]:
    items = [p.strip() for p in cfg[key].split(",") if p.strip()]
    if len(items) != len(set(items)):
        raise ValidationError(f"{key}: duplicate entries in {cfg[key]!r}")
    return tuple(items)


def _get_net(cfg) -> "NetworkSpec":
    name = cfg["net"]
    if name not in NAMED_SPECS:
        raise ValidationError(f"net: unknown network {name!r} (choose from {sorted(NAMED_SPECS)})")
    return NAMED_SPECS[name]()


def _get_jobs(cfg) -> int:
    if not cfg.get("jobs"):
        return os.cpu_count() or 1
    return _get_int(cfg, "jobs", lo=1)


def write_manifest(cfg: dict[str, str], command: str, out_dir: str, input_paths: list[str]) -> None:
    hashes = {}
    for path in sorted(set(p for p in input_paths if p)):
        with open(path, "rb") as fh:
            hashes[path] = fnv1a64_hex(fh.read())
    doc = {
        "command": command,
        "config": dict(sorted(cfg.items())),
        "input_hashes": hashes,
        "version": __version__,
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"manifest_{command}.json"), "w", encoding="utf-8") as fh:
        fh.write(dump_json(doc))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# --- volume discovery and shared data assembly -------------------------------

def discover_volumes(volumes_dir: str) -> list[tuple[str, str, str]]:
    """(patient_id, timepoint, path) for every {pid}_{J0|J1}.nii[.gz] file."""
    found = []
    for name in sorted(os.listdir(volumes_dir)):
        stem = name
        for suffix in (".nii.gz", ".nii"):
            if name.endswith(suffix):
                stem = name[: -len(suffix)]
                break
        else:
            continue
        if "_" not in stem:
            continue
        pid, _, tp = stem.rpartition("_")
        if tp.upper() in ("J0", "J1"):
            found.append((pid, tp.upper(), os.path.join(volumes_dir, name)))
    return found


_WORKER_STATE: dict = {}


def _init_worker(state: dict) -> None:
    _WORKER_STATE.update(state)


def _embed_one(task: tuple[str, str, str]) -> tuple[str, str, np.ndarray, bool]:
    pid, tp, path = task
    state = _WORKER_STATE
    with open(path, "rb") as fh:
        vol = read_nifti(fh.read())
    canon = resample_trilinear(vol, state["target_shape"], source_id=f"{pid}_{tp}")
    normalized = normalize_intensity(canon)
    emb, hit = embed_with_cache(state["net"], normalized, state["cache_dir"], f"{pid}_{tp}")
    return pid, tp, emb, hit


def _segment_one(task: tuple[str, str, str]):
    pid, tp, path = task
    state = _WORKER_STATE
    with open(path, "rb") as fh:
        vol = read_nifti(fh.read())
    canon = resample_trilinear(vol, state["target_shape"], source_id=f"{pid}_{tp}")
    mask, stats = segment_lesion(
        canon.volume.data, canon.volume.spacing, threshold=state["threshold"]
    )
    return pid, tp, mask if state.get("keep_masks") else None, stats


def _run_pool(fn, tasks, jobs: int, state: dict):
    if jobs <= 1 or len(tasks) <= 1:
        _init_worker(state)
        return [fn(t) for t in tasks]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(processes=jobs, initializer=_init_worker, initargs=(state,)) as pool:
        return pool.map(fn, tasks)


def assemble_features(cfg: dict[str, str], need_mri: bool, need_lesion: bool, out_dir: str):
    """Shared data path for train/evaluate/explain.

    Returns (records, mri dict, lesion dict, weight_hash, net, head).
    """
    clinical_csv = _need_path(cfg, "clinical_csv", "file")
    with open(clinical_csv, "rb") as fh:
        records = parse_clinical_csv(fh.read())
    unlabeled = [r.patient_id for r in records if r.mrs_90 is None]
    if unlabeled:
        _log(f"excluding {len(unlabeled)} records without an outcome label: {unlabeled}")
        records = [r for r in records if r.mrs_90 is not None]

    target_shape = _get_shape(cfg, "target_shape")
    jobs = _get_jobs(cfg)
    blocks = _get_list(cfg, "blocks")
    tps_mri = [tp.upper() for tp in ("j0", "j1") if f"mri_{tp}" in blocks]
    tps_lesion = [tp.upper() for tp in ("j0", "j1") if f"lesion_{tp}" in blocks]

    volumes = {}
    if need_mri or need_lesion:
        volumes_dir = _need_path(cfg, "volumes_dir", "directory")
        volumes = {(pid, tp): path for pid, tp, path in discover_volumes(volumes_dir)}

    mri: dict[tuple[str, str], np.ndarray] = {}
    weight_hash = None
    net = None
    head = None
    if need_mri and tps_mri:
        weights_path = _need_path(cfg, "weights", "file")
        spec = _get_net(cfg)
        with open(weights_path, "rb") as fh:
            net = load_network(fh.read(), spec)
        weight_hash = net.weight_hash
        head = make_projection_head(
            _get_int(cfg, "projection_dim"), _get_int(cfg, "projection_seed"),
            in_dim=net.embedding_dim,
        )
        cache_dir = cfg.get("cache_dir") or os.path.join(out_dir, "cache")
        tasks = []
        for rec in records:
            for tp in tps_mri:
                key = (rec.patient_id, tp)
                if key not in volumes:
                    raise ValidationError(
                        f"volumes_dir: no volume file for patient {rec.patient_id} {tp}"
                    )
                tasks.append((rec.patient_id, tp, volumes[key]))
        state = {"net": net, "target_shape": target_shape, "cache_dir": cache_dir}
        for pid, tp, emb, hit in _run_pool(_embed_one, tasks, jobs, state):
            mri[(pid, tp)] = project(emb, head)
            _log(f"embed {pid}_{tp}: {'cache hit' if hit else 'computed'}")

    lesion: dict[tuple[str, str], object] = {}
    if need_lesion and tps_lesion:
        threshold = _get_float(cfg, "threshold")
        tasks = []
        for rec in records:
            for tp in tps_lesion:
                key = (rec.patient_id, tp)
                if key not in volumes:
                    raise ValidationError(
                        f"volumes_dir: no volume file for patient {rec.patient_id} {tp}"
                    )
                tasks.append((rec.patient_id, tp, volumes[key]))
        state = {"target_shape": target_shape, "threshold": threshold, "keep_masks": False}
        for pid, tp, _mask, stats in _run_pool(_segment_one, tasks, jobs, state):
            lesion[(pid, tp)] = stats

    return records, mri, lesion, weight_hash, net, head


# --- subcommands --------------------------------------------------------------

def cmd_synth(cfg: dict[str, str]) -> int:
    out_dir = cfg["output_dir"]
    spec = CohortSpec(
        n=_get_int(cfg, "n", lo=16),
        seed=_get_int(cfg, "seed"),
        prevalence_favorable=_get_float(cfg, "prevalence"),
        clinical_signal=_get_float(cfg, "clinical_signal"),
        lesion_j0_signal=_get_float(cfg, "lesion_j0_signal"),
        lesion_j1_signal=_get_float(cfg, "lesion_j1_signal"),
        volume_shape=_get_shape(cfg, "volume_shape"),
        noise=_get_float(cfg, "noise"),
        missing_rate=_get_float(cfg, "missing_rate"),
    )
    summary = generate(spec, out_dir)
    _log(f"synth: wrote {summary['n']} patients under {out_dir} "
         f"({summary['n_favorable']} favorable / {summary['n_unfavorable']} unfavorable)")
    if cfg.get("weights_out"):
        spec_net = _get_net(cfg)
        records = random_network_weights(spec_net, seed=_get_int(cfg, "weights_seed"))
        payload = write_container(records)
        os.makedirs(os.path.dirname(cfg["weights_out"]) or ".", exist_ok=True)
        with open(cfg["weights_out"], "wb") as fh:
            fh.write(payload)
        _log(f"synth: wrote {cfg['net']} weights to {cfg['weights_out']} "
             f"(hash {fnv1a64_hex(payload)})")
    write_manifest(cfg, "synth", out_dir, [])
    return 0


def cmd_preprocess(cfg: dict[str, str]) -> int:
    out_dir = cfg["output_dir"]
    volumes_dir = _need_path(cfg, "volumes_dir", "directory")
    target_shape = _get_shape(cfg, "target_shape")
    os.makedirs(out_dir, exist_ok=True)
    tasks = discover_volumes(volumes_dir)
    for pid, tp, path in tasks:
        with open(path, "rb") as fh:
            vol = read_nifti(fh.read())
        canon = resample_trilinear(vol, target_shape, source_id=f"{pid}_{tp}")
        records = [
            TensorRecord.from_array("volume", canon.volume.data),
            TensorRecord.from_array("spacing", np.asarray(canon.volume.spacing)),
        ]
        with open(os.path.join(out_dir, f"{pid}_{tp}.adct"), "wb") as fh:
            fh.write(write_container(records))
        _log(f"preprocess {pid}_{tp}: {vol.shape} -> {tuple(target_shape)}")
    write_manifest(cfg, "preprocess", out_dir, [])
    return 0


def cmd_segment(cfg: dict[str, str]) -> int:
    out_dir = cfg["output_dir"]
    volumes_dir = _need_path(cfg, "volumes_dir", "directory")
    target_shape = _get_shape(cfg, "target_shape")
    threshold = _get_float(cfg, "threshold")
    keep_masks = _get_int(cfg, "masks_out") != 0
    os.makedirs(out_dir, exist_ok=True)
    tasks = discover_volumes(volumes_dir)
    state = {"target_shape": target_shape, "threshold": threshold, "keep_masks": keep_masks}
    results = _run_pool(_segment_one, tasks, _get_jobs(cfg), state)
    lines = ["patient_id,timepoint,threshold,n_voxels,voxel_volume_mm3,volume_mm3,log_volume"]
    for pid, tp, mask, stats in results:
        lines.append(
            f"{pid},{tp},{stats.threshold_used:g},{stats.n_voxels},"
            f"{stats.voxel_volume_mm3!r},{stats.volume_mm3!r},{stats.log_volume!r}"
        )
        if keep_masks and mask is not None:
            rec = TensorRecord.from_array("mask", mask.astype(np.float32))
            with open(os.path.join(out_dir, f"{pid}_{tp}_mask.adct"), "wb") as fh:
                fh.write(write_container([rec]))
    with open(os.path.join(out_dir, "lesion_stats.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    _log(f"segment: {len(results)} volumes -> {out_dir}/lesion_stats.csv")
    write_manifest(cfg, "segment", out_dir, [])
    return 0


def cmd_embed(cfg: dict[str, str]) -> int:
    out_dir = cfg["output_dir"]
    volumes_dir = _need_path(cfg, "volumes_dir", "directory")
    weights_path = _need_path(cfg, "weights", "file")
    target_shape = _get_shape(cfg, "target_shape")
    spec = _get_net(cfg)
    with open(weights_path, "rb") as fh:
        net = load_network(fh.read(), spec)
    cache_dir = cfg.get("cache_dir") or os.path.join(out_dir, "cache")
    tasks = discover_volumes(volumes_dir)
    state = {"net": net, "target_shape": target_shape, "cache_dir": cache_dir}
    results = _run_pool(_embed_one, tasks, _get_jobs(cfg), state)
    hits = 0
    for pid, tp, _emb, hit in results:
        hits += int(hit)
        _log(f"embed {pid}_{tp}: {'cache hit' if hit else 'computed'}")
    _log(f"embed: {len(results)} volumes ({hits} cache hits) -> {cache_dir}")
    write_manifest(cfg, "embed", out_dir, [weights_path])
    return 0


def _experiment_config(cfg: dict[str, str], config_id: str | None = None,
                       blocks: tuple[str, ...] | None = None,
                       nihss_days: tuple[str, ...] | None = None) -> ExperimentConfig:
    blocks = blocks if blocks is not None else _get_list(cfg, "blocks")
    nihss_days = nihss_days if nihss_days is not None else _get_list(cfg, "nihss_days")
    return ExperimentConfig(
        config_id=config_id or "+".join(blocks),
        blocks=blocks,
        nihss_days=nihss_days,
        folds=_get_int(cfg, "folds", lo=2) if "folds" in cfg else 8,
        fold_seed=_get_int(cfg, "fold_seed") if "fold_seed" in cfg else 0,
        svm_seed=_get_int(cfg, "svm_seed"),
    )


GRID_CONFIGS = [
    ("mri_j0", ("mri_j0",), ("j0", "j1")),
    ("mri_j1", ("mri_j1",), ("j0", "j1")),
    ("clinical", ("clinical",), ("j0", "j1")),
    ("clinical_day1", ("clinical",), ("j1",)),
    ("j1_clinical", ("mri_j1", "clinical"), ("j0", "j1")),
    ("clinical_lesion_j0", ("clinical", "lesion_j0"), ("j0", "j1")),
    ("j0_multimodal", ("mri_j0", "clinical", "lesion_j0"), ("j0", "j1")),
    ("j1_multimodal", ("mri_j1", "clinical", "lesion_j1"), ("j0", "j1")),
]


def _write_report(report: CVReport, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"report_{report.config_id}.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_json(report.to_dict()))
    csv_path = os.path.join(out_dir, f"metrics_{report.config_id}.csv")
    lines = ["config_id,fold,split,auc,accuracy,f1"]
    for f in report.folds:
        lines.append(f"{report.config_id},{f.fold},train,{f.train_auc!r},{f.train_accuracy!r},{f.train_f1!r}")
        lines.append(f"{report.config_id},{f.fold},val,{f.val_auc!r},{f.val_accuracy!r},{f.val_f1!r}")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def cmd_evaluate(cfg: dict[str, str]) -> int:
    out_dir = cfg["output_dir"]
    grid = _get_int(cfg, "grid") != 0
    if grid:
        configs = [
            _experiment_config(cfg, config_id=name, blocks=blocks, nihss_days=days)
            for name, blocks, days in GRID_CONFIGS
        ]
    else:
        configs = [_experiment_config(cfg)]

    need_mri = any("mri_j0" in c.blocks or "mri_j1" in c.blocks for c in configs)
    need_lesion = any("lesion_j0" in c.blocks or "lesion_j1" in c.blocks for c in configs)
    union_blocks = sorted({b for c in configs for b in c.blocks})
    data_cfg = dict(cfg)
    data_cfg["blocks"] = ",".join(union_blocks)
    records, mri, lesion, weight_hash, _net, _head = assemble_features(
        data_cfg, need_mri, need_lesion, out_dir
    )

    for config in configs:
        report = run_experiment(config, records, mri, lesion, weight_hash=weight_hash)
        path = _write_report(report, out_dir)
        agg = report.aggregates()["val"]
        _log(
            f"evaluate {config.config_id}: val AUC {agg['auc']['mean']:.3f} +- {agg['auc']['sd']:.3f} "
            f"(report {path})"
        )
    write_manifest(cfg, "evaluate", out_dir,
                   [cfg.get("clinical_csv", ""), cfg.get("weights", "")])
    return 0


def cmd_train(cfg: dict[str, str]) -> int:
    out_dir = cfg["output_dir"]
    config = _experiment_config(cfg)
    need_mri = any(b.startswith("mri_") for b in config.blocks)
    need_lesion = any(b.startswith("lesion_") for b in config.blocks)
    records, mri, lesion, weight_hash, _net, _head = assemble_features(
        cfg, need_mri, need_lesion, out_dir
    )
    from .evaluation import build_features

    train_ids = {r.patient_id for r in records}
    imputed = impute_median(records, train_ids) if "clinical" in config.blocks else records
    features = build_features(config, imputed, mri, lesion)
    bundle = train_bundle(
        features,
        config_id=config.config_id,
        weight_hash=weight_hash,
        svm_seed=config.svm_seed,
    )
    os.makedirs(out_dir, exist_ok=True)
    bundle_path = os.path.join(out_dir, f"bundle_{config.config_id}.adct")
    save_bundle(bundle, bundle_path)
    _log(f"train {config.config_id}: bundle -> {bundle_path} "
         f"(svm converged={bundle.svm.converged}, kkt={bundle.svm.kkt_violation:.2e})")
    write_manifest(cfg, "train", out_dir, [cfg.get("clinical_csv", ""), cfg.get("weights", "")])
    return 0


def cmd_compare(cfg: dict[str, str]) -> int:
    out_dir = cfg["output_dir"]
    path_a = _need_path(cfg, "report_a", "file")
    path_b = _need_path(cfg, "report_b", "file")
    import json

    with open(path_a, encoding="utf-8") as fh:
        report_a = CVReport.from_dict(json.load(fh))
    with open(path_b, encoding="utf-8") as fh:
        report_b = CVReport.from_dict(json.load(fh))
    alternative = cfg["alternative"]
    if alternative not in ("greater", "less", "two-sided"):
        raise ValidationError(f"alternative: must be greater|less|two-sided, got {alternative!r}")
    result = compare_runs(report_a, report_b, alternative=alternative)
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(
        out_dir, f"compare_{report_a.config_id}_vs_{report_b.config_id}.json"
    )
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(dump_json(result))
    print(dump_json(result), end="")
    write_manifest(cfg, "compare", out_dir, [path_a, path_b])
    return 0


def cmd_explain(cfg: dict[str, str]) -> int:
    out_dir = cfg["output_dir"]
    bundle_path = _need_path(cfg, "bundle", "file")
    bundle = load_bundle(bundle_path)
    os.makedirs(out_dir, exist_ok=True)
    table = importance(bundle)
    imp_path = os.path.join(out_dir, f"importance_{bundle.config_id}.csv")
    with open(imp_path, "w", encoding="utf-8") as fh:
        fh.write(table.as_csv())
    _log(f"explain: importance table -> {imp_path}")

    if cfg.get("patient"):
        config = _experiment_config(cfg, config_id=bundle.config_id)
        need_mri = any(b.startswith("mri_") for b in config.blocks)
        need_lesion = any(b.startswith("lesion_") for b in config.blocks)
        records, mri, lesion, _hash, net, head = assemble_features(
            cfg, need_mri, need_lesion, out_dir
        )
        if net is None or head is None:
            raise ValidationError("blocks: saliency needs an MRI block in the configuration")
        pid = cfg["patient"]
        tp = cfg["timepoint"].upper()
        if tp not in ("J0", "J1"):
            raise ValidationError(f"timepoint: must be J0 or J1, got {cfg['timepoint']!r}")
        record = next((r for r in records if r.patient_id == pid), None)
        if record is None:
            raise ValidationError(f"patient: {pid!r} not found in the clinical table")
        from .evaluation import build_features

        imputed = impute_median(records, {r.patient_id for r in records})
        features = build_features(config, imputed, mri, lesion)
        base = next(f for f in features if f.patient_id == pid)
        volumes = {(p, t): path for p, t, path in discover_volumes(cfg["volumes_dir"])}
        with open(volumes[(pid, tp)], "rb") as fh:
            vol = read_nifti(fh.read())
        canon = normalize_intensity(
            resample_trilinear(vol, _get_shape(cfg, "target_shape"), source_id=f"{pid}_{tp}")
        )
        sal = occlusion_saliency(
            net, head, bundle, canon, base,
            window=_get_shape(cfg, "window"),
            stride=_get_shape(cfg, "stride"),
            fill=_get_float(cfg, "fill"),
        )
        sal_path = os.path.join(out_dir, f"saliency_{pid}_{tp}.adct")
        with open(sal_path, "wb") as fh:
            fh.write(write_container([TensorRecord.from_array("saliency", sal.deltas)]))
        csv_path = os.path.join(out_dir, f"saliency_{pid}_{tp}_slices.csv")
        lines = ["slice,max_abs_delta"]
        for i, v in enumerate(sal.per_slice_maxima()):
            lines.append(f"{i},{float(v)!r}")
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        _log(f"explain: saliency -> {sal_path}")
    write_manifest(cfg, "explain", out_dir, [bundle_path])
    return 0


def cmd_report(cfg: dict[str, str], inputs: list[str]) -> int:
    import json

    out_dir = cfg["output_dir"]
    if not inputs:
        raise ValidationError("inputs: report needs at least one report JSON path")
    reports = []
    for path in inputs:
        if not os.path.exists(path):
            raise ValidationError(f"inputs: report file does not exist: {path}")
        with open(path, encoding="utf-8") as fh:
            reports.append(CVReport.from_dict(json.load(fh)))

    headers = ["configuration", "val AUC", "val acc", "val F1", "train AUC", "train acc", "train F1"]
    rows = []
    for rep in reports:
        agg = rep.aggregates()
        row = [rep.config_id]
        for split in ("val", "train"):
            for metric in ("auc", "accuracy", "f1"):
                m = agg[split][metric]
                row.append(f"{m['mean']:.3f} +- {m['sd']:.3f}")
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    table = "\n".join(lines) + "\n"
    print(table, end="")

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary_table.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    csv_lines = ["config_id,split,metric,mean,sd"]
    for rep in reports:
        agg = rep.aggregates()
        for split in ("val", "train"):
            for metric in ("auc", "accuracy", "f1"):
                m = agg[split][metric]
                csv_lines.append(f"{rep.config_id},{split},{metric},{m['mean']!r},{m['sd']!r}")
    with open(os.path.join(out_dir, "summary_aggregates.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(csv_lines) + "\n")
    return 0


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="strokeprog",
        description="ADC diffusion-MRI stroke outcome prediction pipeline",
    )
    parser.add_argument("--version", action="version", version=f"strokeprog {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, keys in _COMMAND_KEYS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="key=value configuration file")
        for key in keys:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
        if command == "report":
            p.add_argument("inputs", nargs="*", help="report JSON files")
    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "segment": cmd_segment,
    "embed": cmd_embed,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "explain": cmd_explain,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args, args.command)
        if args.command == "report":
            return cmd_report(cfg, list(args.inputs))
        return _HANDLERS[args.command](cfg)
    except ValidationError as exc:
        _log(f"error: {exc}")
        return 1
    except PipelineError as exc:
        _log(f"runtime failure: {exc}")
        return 2
    except Exception as exc:  # keep the contract: nonzero + diagnostics
        traceback.print_exc()
        _log(f"runtime failure: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())

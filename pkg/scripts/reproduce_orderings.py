#!/usr/bin/env python3
"""Five-seed ordering study: is day-1 imaging more prognostic than baseline?

For each seed: generate a phantom cohort, evaluate the J0 and J1
multimodal configurations plus the MRI-only baselines, compare the two
multimodal runs with the paired signed-rank test, and re-run everything
with permuted labels as a no-signal calibration. Prints a per-seed table
and the aggregate verdict.

Usage: python scripts/reproduce_orderings.py [--seeds 108 111 113 115 116]
"""

import argparse
import sys
import tempfile
from pathlib import Path

from strokeprog.evaluation import (
    ExperimentConfig,
    compare_runs,
    permute_labels,
    run_experiment,
)
from strokeprog.inference3d import (
    forward_embed,
    load_network,
    make_projection_head,
    project,
    random_network_weights,
    tiny_spec,
)
from strokeprog.lesion import segment_lesion
from strokeprog.preprocess import normalize_intensity, resample_trilinear
from strokeprog.synthcohort import CohortSpec, generate
from strokeprog.tabular import parse_clinical_csv
from strokeprog.volume_io import read_nifti, write_container


def one_seed(seed: int, net, head):
    work = tempfile.mkdtemp(prefix=f"orderings_{seed}_")
    summary = generate(CohortSpec(seed=seed), work)
    records = parse_clinical_csv(Path(summary["clinical_csv"]).read_bytes())
    mri, lesion = {}, {}
    for rec in records:
        for tp in ("J0", "J1"):
            blob = (Path(summary["volumes_dir"]) / f"{rec.patient_id}_{tp}.nii.gz").read_bytes()
            canon = resample_trilinear(read_nifti(blob), (24, 64, 64))
            _, stats = segment_lesion(canon.volume.data, canon.volume.spacing, threshold=620.0)
            lesion[(rec.patient_id, tp)] = stats
            mri[(rec.patient_id, tp)] = project(forward_embed(net, normalize_intensity(canon)), head)

    def run(cid, blocks, recs):
        cfg = ExperimentConfig(config_id=cid, blocks=blocks, folds=8, fold_seed=13, svm_seed=29)
        return run_experiment(cfg, recs, mri, lesion)

    permuted = permute_labels(records, seed=seed + 1000)
    out = {
        "j1m": run("j1m", ("mri_j1", "clinical", "lesion_j1"), records),
        "j0m": run("j0m", ("mri_j0", "clinical", "lesion_j0"), records),
        "mri_j1": run("mri_j1", ("mri_j1",), records),
        "mri_j0": run("mri_j0", ("mri_j0",), records),
        "perm_j1m": run("perm_j1m", ("mri_j1", "clinical", "lesion_j1"), permuted),
    }
    out["compare"] = compare_runs(out["j1m"], out["j0m"])
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[108, 111, 113, 115, 116])
    args = parser.parse_args()

    net = load_network(
        write_container(random_network_weights(tiny_spec(), seed=42)), tiny_spec()
    )
    head = make_projection_head(32, seed=7, in_dim=net.embedding_dim)

    m = lambda rep: rep.aggregates()["val"]["auc"]["mean"]  # noqa: E731
    print(f"{'seed':>5} {'j1_multi':>9} {'j0_multi':>9} {'p(J1>J0)':>9} "
          f"{'mri_j1':>7} {'mri_j0':>7} {'permuted':>9}")
    mean_wins = sig = 0
    for seed in args.seeds:
        r = one_seed(seed, net, head)
        p = r["compare"]["p_value"]
        mean_wins += m(r["j1m"]) > m(r["j0m"])
        sig += p < 0.05
        print(f"{seed:>5} {m(r['j1m']):>9.3f} {m(r['j0m']):>9.3f} {p:>9.4f} "
              f"{m(r['mri_j1']):>7.3f} {m(r['mri_j0']):>7.3f} {m(r['perm_j1m']):>9.3f}")
    n = len(args.seeds)
    print(f"\nJ1 multimodal wins on mean validation AUC in {mean_wins}/{n} seeds; "
          f"signed-rank p < 0.05 in {sig}/{n}.")
    if mean_wins < n or sig < max(1, n - 2):
        sys.exit(1)


if __name__ == "__main__":
    main()

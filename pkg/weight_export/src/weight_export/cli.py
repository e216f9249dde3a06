"""Convert an upstream 3D ResNet checkpoint into an ADCT weight container.

Two modes:

  weight-export --checkpoint ckpt.pth --output weights.adct \
      [--name-map map.json | --arch resnet50] [--strip-prefix module.]
  weight-export --random --arch tiny --seed 7 --output weights.adct

Every exported tensor is down-cast to float32 (round-to-nearest) and
logged to the provenance CSV (canonical name, upstream name, shape,
float32 FNV-1a checksum, upstream and exported L2 norms).
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from .container import fnv1a64, write_container
from .names import Architecture, load_name_map, torch_resnet_name_map, validate_total


class ExportError(Exception):
    pass


class MissingUpstreamTensor(ExportError):
    def __init__(self, canonical, upstream):
        super().__init__(f"checkpoint has no tensor {upstream!r} (needed for {canonical!r})")
        self.canonical = canonical
        self.upstream = upstream


class ShapeMismatch(ExportError):
    def __init__(self, name, expected, got):
        super().__init__(f"tensor {name!r}: expected shape {tuple(expected)}, got {tuple(got)}")
        self.name = name


def load_checkpoint(path: str, strip_prefix: str) -> dict[str, np.ndarray]:
    import torch

    blob = torch.load(path, map_location="cpu", weights_only=False)
    state = blob.get("state_dict", blob) if isinstance(blob, dict) else blob
    tensors = {}
    for key, value in state.items():
        if strip_prefix and key.startswith(strip_prefix):
            key = key[len(strip_prefix):]
        if hasattr(value, "detach"):
            tensors[key] = value.detach().cpu().numpy()
    return tensors


def export_tensors(
    upstream: dict[str, np.ndarray], name_map: dict[str, str], arch: Architecture
) -> tuple[list[tuple[str, np.ndarray]], list[dict]]:
    validate_total(name_map, arch)
    shapes = arch.tensor_shapes()
    records: list[tuple[str, np.ndarray]] = []
    log_rows: list[dict] = []
    for canonical in shapes:  # canonical table order
        upstream_name = name_map[canonical]
        if upstream_name not in upstream:
            raise MissingUpstreamTensor(canonical, upstream_name)
        values = np.asarray(upstream[upstream_name])
        squeezed = values.reshape(values.shape)  # keep as-is; shape must match exactly
        if tuple(squeezed.shape) != shapes[canonical]:
            raise ShapeMismatch(canonical, shapes[canonical], squeezed.shape)
        converted = squeezed.astype(np.float32)  # round-to-nearest down-cast
        records.append((canonical, converted))
        upstream_l2 = float(np.linalg.norm(values.astype(np.float64)))
        exported_l2 = float(np.linalg.norm(converted.astype(np.float64)))
        log_rows.append(
            {
                "canonical": canonical,
                "upstream": upstream_name,
                "shape": "x".join(str(d) for d in converted.shape),
                "checksum": f"{fnv1a64(np.ascontiguousarray(converted, dtype='<f4').tobytes()):016x}",
                "upstream_sum": repr(float(values.astype(np.float64).sum())),
                "exported_sum": repr(float(converted.astype(np.float64).sum())),
                "upstream_l2": repr(upstream_l2),
                "exported_l2": repr(exported_l2),
            }
        )
    return records, log_rows


def random_tensors(arch: Architecture, seed: int) -> tuple[list[tuple[str, np.ndarray]], list[dict]]:
    """Seeded random weights with the canonical shapes (for tests and demos)."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    records = []
    log_rows = []
    for name, shape in arch.tensor_shapes().items():
        if name.endswith(".conv.weight"):
            fan_in = int(np.prod(shape[1:]))
            values = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith((".bn.gamma", ".bn.var")):
            values = rng.uniform(0.5, 1.5, size=shape)
        else:
            values = rng.normal(0.0, 0.1, size=shape)
        converted = values.astype(np.float32)
        records.append((name, converted))
        log_rows.append(
            {
                "canonical": name,
                "upstream": f"random(seed={seed})",
                "shape": "x".join(str(d) for d in converted.shape),
                "checksum": f"{fnv1a64(np.ascontiguousarray(converted, dtype='<f4').tobytes()):016x}",
                "upstream_sum": repr(float(values.sum())),
                "exported_sum": repr(float(converted.astype(np.float64).sum())),
                "upstream_l2": repr(float(np.linalg.norm(values))),
                "exported_l2": repr(float(np.linalg.norm(converted.astype(np.float64)))),
            }
        )
    return records, log_rows


LOG_FIELDS = [
    "canonical", "upstream", "shape", "checksum",
    "upstream_sum", "exported_sum", "upstream_l2", "exported_l2",
]


def write_log(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weight-export",
        description="Convert a pretrained 3D ResNet checkpoint to an ADCT container",
    )
    parser.add_argument("--checkpoint", help="upstream checkpoint path (torch serialization)")
    parser.add_argument("--output", required=True, help="output container path")
    parser.add_argument("--name-map", help="JSON name map (canonical -> upstream)")
    parser.add_argument("--arch", default="resnet50", help="architecture preset (resnet50|tiny)")
    parser.add_argument("--strip-prefix", default="module.", help="prefix stripped from upstream keys")
    parser.add_argument("--random", action="store_true", help="emit seeded random weights instead")
    parser.add_argument("--seed", type=int, default=0, help="seed for --random")
    parser.add_argument("--log", help="provenance log path (default: <output>.provenance.csv)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.name_map:
            doc = load_name_map(args.name_map)
            arch = Architecture.named(doc["architecture"])
            name_map = doc["map"]
        else:
            arch = Architecture.named(args.arch)
            name_map = torch_resnet_name_map(arch)

        if args.random:
            records, log_rows = random_tensors(arch, args.seed)
        else:
            if not args.checkpoint:
                print("error: --checkpoint is required unless --random is given", file=sys.stderr)
                return 1
            if not os.path.exists(args.checkpoint):
                print(f"error: checkpoint does not exist: {args.checkpoint}", file=sys.stderr)
                return 1
            upstream = load_checkpoint(args.checkpoint, args.strip_prefix)
            records, log_rows = export_tensors(upstream, name_map, arch)

        payload = write_container(records)
        os.makedirs(os.path.dirname(args.output) or ".", exist_ok=True)
        with open(args.output, "wb") as fh:
            fh.write(payload)
        log_path = args.log or args.output + ".provenance.csv"
        write_log(log_path, log_rows)
        print(
            f"wrote {len(records)} tensors to {args.output} "
            f"(container hash {fnv1a64(payload):016x}); log {log_path}",
            file=sys.stderr,
        )
        return 0
    except (ExportError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

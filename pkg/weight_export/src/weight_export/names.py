"""Canonical tensor name table and upstream-to-canonical name maps.

The inference engine's weight container names tensors as documented in
docs/weights.md: stem.conv.weight, stem.bn.{gamma,beta,mean,var}, and
stage{S}.block{B}.{reduce,spatial,expand,shortcut} units. A name map
pairs every canonical name with the tensor name used by an upstream
checkpoint; maps are data files (JSON), so supporting another upstream
variant means another map, not code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

ARCHITECTURES = {
    # name -> (in_channels, stem_channels, block_counts, base_channels, expansion)
    "resnet50": (1, 64, (3, 4, 6, 3), (64, 128, 256, 512), 4),
    "tiny": (1, 8, (1,), (8,), 4),
}

_BN_PARAMS = ("gamma", "beta", "mean", "var")


@dataclass(frozen=True)
class Architecture:
    in_channels: int
    stem_channels: int
    block_counts: tuple[int, ...]
    base_channels: tuple[int, ...]
    expansion: int

    @staticmethod
    def named(name: str) -> "Architecture":
        if name not in ARCHITECTURES:
            raise KeyError(f"unknown architecture {name!r} (choose from {sorted(ARCHITECTURES)})")
        return Architecture(*ARCHITECTURES[name])

    def units(self):
        """Yields (prefix, out_channels, in_channels, kernel) per conv+BN unit."""
        yield "stem", self.stem_channels, self.in_channels, 7
        in_ch = self.stem_channels
        for s, (count, base) in enumerate(zip(self.block_counts, self.base_channels), start=1):
            out_ch = base * self.expansion
            for b in range(1, count + 1):
                stride = 2 if (s >= 2 and b == 1) else 1
                prefix = f"stage{s}.block{b}"
                yield f"{prefix}.reduce", base, in_ch, 1
                yield f"{prefix}.spatial", base, base, 3
                yield f"{prefix}.expand", out_ch, base, 1
                if b == 1 and (stride != 1 or in_ch != out_ch):
                    yield f"{prefix}.shortcut", out_ch, in_ch, 1
                in_ch = out_ch

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for prefix, c_out, c_in, k in self.units():
            shapes[f"{prefix}.conv.weight"] = (c_out, c_in, k, k, k)
            for p in _BN_PARAMS:
                shapes[f"{prefix}.bn.{p}"] = (c_out,)
        return shapes


def torch_resnet_name_map(arch: Architecture) -> dict[str, str]:
    """Canonical name -> upstream name for torch-style bottleneck ResNets
    (conv1/bn1, layer{L}.{i}.conv{1,2,3}/bn{1,2,3}, downsample.{0,1})."""
    bn_upstream = {"gamma": "weight", "beta": "bias", "mean": "running_mean", "var": "running_var"}
    mapping: dict[str, str] = {"stem.conv.weight": "conv1.weight"}
    for p, up in bn_upstream.items():
        mapping[f"stem.bn.{p}"] = f"bn1.{up}"
    roles = {"reduce": ("conv1", "bn1"), "spatial": ("conv2", "bn2"), "expand": ("conv3", "bn3")}
    for prefix, _c_out, _c_in, _k in arch.units():
        if prefix == "stem":
            continue
        stage_block, role = prefix.rsplit(".", 1)
        stage = int(stage_block.split(".")[0].removeprefix("stage"))
        block = int(stage_block.split(".")[1].removeprefix("block"))
        up_block = f"layer{stage}.{block - 1}"
        if role == "shortcut":
            mapping[f"{prefix}.conv.weight"] = f"{up_block}.downsample.0.weight"
            for p, up in bn_upstream.items():
                mapping[f"{prefix}.bn.{p}"] = f"{up_block}.downsample.1.{up}"
        else:
            conv_name, bn_name = roles[role]
            mapping[f"{prefix}.conv.weight"] = f"{up_block}.{conv_name}.weight"
            for p, up in bn_upstream.items():
                mapping[f"{prefix}.bn.{p}"] = f"{up_block}.{bn_name}.{up}"
    return mapping


def load_name_map(path: str) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "architecture" not in doc or "map" not in doc:
        raise ValueError(f"{path}: expected {{'architecture': ..., 'map': {{canonical: upstream}}}}")
    return doc


def validate_total(name_map: dict[str, str], arch: Architecture) -> None:
    required = set(arch.tensor_shapes())
    mapped = set(name_map)
    missing = sorted(required - mapped)
    if missing:
        raise ValueError(f"name map does not cover required tensors: {missing[:5]}...")
    extra = sorted(mapped - required)
    if extra:
        raise ValueError(f"name map names unknown tensors: {extra[:5]}...")

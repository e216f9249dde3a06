"""Frozen 3D bottleneck-ResNet forward pass producing pooled embeddings.

The engine is inference-only and self-contained: convolutions run as
im2col + GEMM in float32, batchnorm is folded into the adjacent conv at
load time (w' = w*g/sqrt(v+eps), b' = beta - m*g/sqrt(v+eps)), and the
head is global average pooling over all spatial positions.

The canonical architecture is the 50-layer bottleneck network (stem 64,
blocks [3,4,6,3], bases [64,128,256,512], expansion 4 -> 2048-D embedding);
smaller configurations share every code path and exist for tests and
desk-scale experiments.

Weight containers use the "ADCT" format with the canonical name table
(see docs/weights.md): stem.conv.weight, stem.bn.{gamma,beta,mean,var},
stage{S}.block{B}.{reduce,spatial,expand,shortcut}.conv.weight and
matching .bn.* vectors. The container hash (64-bit FNV-1a over the raw
bytes) is carried through to reports for provenance.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import PipelineError
from .util import fnv1a64
from .volume_io import TensorRecord, read_container, write_container

BN_EPS = 1e-5
PROJECTION_MIN_DIM = 32
PROJECTION_MAX_DIM = 256
DEFAULT_PROJECTION_DIM = 128

MRI_FEATURE_PREFIX = "MRI_feat_"


class InferenceError(PipelineError):
    pass


class MissingTensor(InferenceError):
    def __init__(self, name):
        super().__init__(f"weight container is missing tensor {name!r}")
        self.name = name


class ShapeMismatch(InferenceError):
    def __init__(self, name, expected, got):
        super().__init__(f"tensor {name!r}: expected shape {tuple(expected)}, got {tuple(got)}")
        self.name = name
        self.expected = tuple(expected)
        self.got = tuple(got)


class DimOutOfRange(InferenceError):
    pass


class InvalidTensor(InferenceError):
    def __init__(self, name, why):
        super().__init__(f"tensor {name!r}: {why}")
        self.name = name


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture parameters; the default is the canonical 50-layer net."""

    in_channels: int = 1
    stem_channels: int = 64
    block_counts: tuple[int, ...] = (3, 4, 6, 3)
    base_channels: tuple[int, ...] = (64, 128, 256, 512)
    expansion: int = 4

    def __post_init__(self):
        if len(self.block_counts) != len(self.base_channels):
            raise InferenceError("block_counts and base_channels must have equal length")

    @property
    def embedding_dim(self) -> int:
        if self.block_counts:
            return self.base_channels[-1] * self.expansion
        return self.stem_channels

    def _stage_layout(self):
        """Yields (stage_idx, block_idx, in_ch, base, stride, has_shortcut)."""
        in_ch = self.stem_channels
        for s, (count, base) in enumerate(zip(self.block_counts, self.base_channels), start=1):
            out_ch = base * self.expansion
            for b in range(1, count + 1):
                stride = 2 if (s >= 2 and b == 1) else 1
                shortcut = b == 1 and (stride != 1 or in_ch != out_ch)
                yield s, b, in_ch, base, stride, shortcut
                in_ch = out_ch

    def tensor_table(self) -> list[tuple[str, tuple[int, ...]]]:
        """Canonical (name, shape) pairs every weight container must provide."""

        def conv_bn(prefix, c_out, c_in, k):
            entries = [(f"{prefix}.conv.weight", (c_out, c_in, k, k, k))]
            for p in ("gamma", "beta", "mean", "var"):
                entries.append((f"{prefix}.bn.{p}", (c_out,)))
            return entries

        table = conv_bn("stem", self.stem_channels, self.in_channels, 7)
        for s, b, in_ch, base, _stride, shortcut in self._stage_layout():
            p = f"stage{s}.block{b}"
            table += conv_bn(f"{p}.reduce", base, in_ch, 1)
            table += conv_bn(f"{p}.spatial", base, base, 3)
            table += conv_bn(f"{p}.expand", base * self.expansion, base, 1)
            if shortcut:
                table += conv_bn(f"{p}.shortcut", base * self.expansion, in_ch, 1)
        return table


def resnet50_3d() -> NetworkSpec:
    return NetworkSpec()


def tiny_spec() -> NetworkSpec:
    """Desk-scale network: one bottleneck stage, 32-D embedding."""
    return NetworkSpec(stem_channels=8, block_counts=(1,), base_channels=(8,), expansion=4)


NAMED_SPECS = {"resnet50": resnet50_3d, "tiny": tiny_spec}


@dataclass
class Conv3d:
    weight: np.ndarray  # (C_out, C_in, k, k, k) float32
    bias: np.ndarray  # (C_out,) float32
    stride: int
    padding: int


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = BN_EPS


@dataclass
class _ConvUnit:
    conv: Conv3d
    bn: BatchNorm | None  # present only in unfolded mode


@dataclass
class Bottleneck:
    reduce: _ConvUnit
    spatial: _ConvUnit
    expand: _ConvUnit
    shortcut: _ConvUnit | None


@dataclass
class FrozenNetwork:
    spec: NetworkSpec
    stem: _ConvUnit
    stages: list[list[Bottleneck]]
    weight_hash: int
    folded: bool

    @property
    def embedding_dim(self) -> int:
        return self.spec.embedding_dim


def _out_dim(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv3d_forward(x: np.ndarray, layer: Conv3d) -> np.ndarray:
    """im2col + GEMM convolution; x is (C_in, D, H, W) float32."""
    c_out, c_in, kd, kh, kw = layer.weight.shape
    if x.shape[0] != c_in:
        raise ShapeMismatch("input", (c_in, "*", "*", "*"), x.shape)
    s, p = layer.stride, layer.padding
    dims = [_out_dim(n, k, s, p) for n, k in zip(x.shape[1:], (kd, kh, kw))]
    if any(d < 1 for d in dims):
        raise ShapeMismatch("input", ("spatial dims large enough for the kernel",), x.shape)
    od, oh, ow = dims

    if kd == kh == kw == 1 and p == 0:
        xs = x[:, ::s, ::s, ::s]
        wmat = layer.weight.reshape(c_out, c_in)
        y = wmat @ xs.reshape(c_in, -1)
        y += layer.bias[:, None]
        return y.reshape(c_out, od, oh, ow)

    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))[:, ::s, ::s, ::s]
    cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(od * oh * ow, c_in * kd * kh * kw)
    wmat = layer.weight.reshape(c_out, -1)
    y = cols @ wmat.T
    y += layer.bias
    return np.ascontiguousarray(y.T).reshape(c_out, od, oh, ow)


def maxpool3d(x: np.ndarray, k: int = 3, s: int = 2, p: int = 1) -> np.ndarray:
    dims = [_out_dim(n, k, s, p) for n in x.shape[1:]]
    if any(d < 1 for d in dims):
        raise ShapeMismatch("input", ("spatial dims large enough for the pool",), x.shape)
    od, oh, ow = dims
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)), constant_values=np.float32(-np.inf))
    out = np.full((x.shape[0], od, oh, ow), -np.inf, dtype=np.float32)
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                np.maximum(
                    out,
                    xp[
                        :,
                        dz : dz + (od - 1) * s + 1 : s,
                        dy : dy + (oh - 1) * s + 1 : s,
                        dx : dx + (ow - 1) * s + 1 : s,
                    ],
                    out=out,
                )
    return out


def _bn_apply(x: np.ndarray, bn: BatchNorm) -> np.ndarray:
    scale = (bn.gamma / np.sqrt(bn.var + bn.eps)).astype(np.float32)
    shift = (bn.beta - bn.mean * bn.gamma / np.sqrt(bn.var + bn.eps)).astype(np.float32)
    return x * scale[:, None, None, None] + shift[:, None, None, None]


def _unit_forward(x: np.ndarray, unit: _ConvUnit) -> np.ndarray:
    y = conv3d_forward(x, unit.conv)
    if unit.bn is not None:
        y = _bn_apply(y, unit.bn)
    return y


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0, out=x)


def forward_embed(net: FrozenNetwork, vol) -> np.ndarray:
    """Embedding of one volume: stem -> stages -> global average pooling.

    ``vol`` may be a CanonicalVolume, Volume3D, or a (D, H, W) array.
    """
    data = getattr(vol, "data", vol)
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 3:
        raise ShapeMismatch("input", ("D", "H", "W"), data.shape)
    x = data[None]  # single input channel

    x = _relu(_unit_forward(x, net.stem))
    x = maxpool3d(x)
    for stage in net.stages:
        for block in stage:
            identity = x
            y = _relu(_unit_forward(x, block.reduce))
            y = _relu(_unit_forward(y, block.spatial))
            y = _unit_forward(y, block.expand)
            if block.shortcut is not None:
                identity = _unit_forward(x, block.shortcut)
            y += identity
            x = _relu(y)
    return x.mean(axis=(1, 2, 3), dtype=np.float64).astype(np.float32)


def _fold(conv_w: np.ndarray, bn: BatchNorm) -> tuple[np.ndarray, np.ndarray]:
    inv = bn.gamma.astype(np.float64) / np.sqrt(bn.var.astype(np.float64) + bn.eps)
    w = conv_w.astype(np.float64) * inv[:, None, None, None, None]
    b = bn.beta.astype(np.float64) - bn.mean.astype(np.float64) * inv
    return w.astype(np.float32), b.astype(np.float32)


def load_network(data: bytes, spec: NetworkSpec | None = None, fold: bool = True) -> FrozenNetwork:
    """Validate a weight container against the spec's name table and build
    the frozen network, folding batchnorm into the convolutions by default."""
    if spec is None:
        spec = resnet50_3d()
    records = {r.name: r for r in read_container(data)}
    weight_hash = fnv1a64(data)

    tensors = {}
    for name, shape in spec.tensor_table():
        rec = records.get(name)
        if rec is None:
            raise MissingTensor(name)
        if rec.shape != tuple(shape):
            raise ShapeMismatch(name, shape, rec.shape)
        arr = rec.as_array()
        if not np.all(np.isfinite(arr)):
            raise InvalidTensor(name, "non-finite values")
        if name.endswith(".bn.var") and np.any(arr < 0):
            raise InvalidTensor(name, "negative variance")
        tensors[name] = arr

    def unit(prefix: str, stride: int, padding: int) -> _ConvUnit:
        w = tensors[f"{prefix}.conv.weight"]
        bn = BatchNorm(
            gamma=tensors[f"{prefix}.bn.gamma"],
            beta=tensors[f"{prefix}.bn.beta"],
            mean=tensors[f"{prefix}.bn.mean"],
            var=tensors[f"{prefix}.bn.var"],
        )
        if fold:
            fw, fb = _fold(w, bn)
            return _ConvUnit(Conv3d(fw, fb, stride, padding), None)
        zero_bias = np.zeros(w.shape[0], dtype=np.float32)
        return _ConvUnit(Conv3d(w, zero_bias, stride, padding), bn)

    stem = unit("stem", stride=2, padding=3)
    stages: list[list[Bottleneck]] = [[] for _ in spec.block_counts]
    for s, b, _in_ch, _base, stride, shortcut in spec._stage_layout():
        p = f"stage{s}.block{b}"
        block = Bottleneck(
            reduce=unit(f"{p}.reduce", stride=1, padding=0),
            spatial=unit(f"{p}.spatial", stride=stride, padding=1),
            expand=unit(f"{p}.expand", stride=1, padding=0),
            shortcut=unit(f"{p}.shortcut", stride=stride, padding=0) if shortcut else None,
        )
        stages[s - 1].append(block)
    return FrozenNetwork(spec=spec, stem=stem, stages=stages, weight_hash=weight_hash, folded=fold)


def random_network_weights(
    spec: NetworkSpec, seed: int, zero_shift: bool = False
) -> list[TensorRecord]:
    """Seeded random weights with the canonical names and shapes.

    Conv weights are He-scaled Gaussians; batchnorm statistics are benign
    (variance near 1). ``zero_shift`` zeroes beta and mean so the folded
    network maps zero input to a zero embedding.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    records = []
    for name, shape in spec.tensor_table():
        if name.endswith(".conv.weight"):
            fan_in = int(np.prod(shape[1:]))
            vals = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".bn.gamma"):
            vals = rng.uniform(0.5, 1.5, size=shape)
        elif name.endswith(".bn.var"):
            vals = rng.uniform(0.5, 1.5, size=shape)
        elif name.endswith(".bn.beta"):
            vals = np.zeros(shape) if zero_shift else rng.normal(0.0, 0.1, size=shape)
        else:  # .bn.mean
            vals = np.zeros(shape) if zero_shift else rng.normal(0.0, 0.2, size=shape)
        records.append(TensorRecord.from_array(name, vals.astype(np.float32)))
    return records


@dataclass(frozen=True)
class ProjectionHead:
    """Seeded random orthonormal projection of embeddings to the fused width."""

    target_dim: int
    seed: int
    matrix: np.ndarray = field(repr=False)  # (target_dim, in_dim), orthonormal rows


def make_projection_head(target_dim: int, seed: int, in_dim: int = 2048) -> ProjectionHead:
    if not PROJECTION_MIN_DIM <= target_dim <= PROJECTION_MAX_DIM:
        raise DimOutOfRange(
            f"projection dim must lie in [{PROJECTION_MIN_DIM}, {PROJECTION_MAX_DIM}], got {target_dim}"
        )
    if target_dim > in_dim:
        raise DimOutOfRange(
            f"projection dim {target_dim} exceeds the embedding dim {in_dim}"
        )
    rng = np.random.default_rng(np.random.PCG64(seed))
    gauss = rng.standard_normal((in_dim, target_dim))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))  # fix the sign convention so the head is unique
    return ProjectionHead(target_dim=target_dim, seed=seed, matrix=np.ascontiguousarray(q.T))


def project(embedding: np.ndarray, head: ProjectionHead) -> np.ndarray:
    embedding = np.asarray(embedding, dtype=np.float64).reshape(-1)
    if embedding.size != head.matrix.shape[1]:
        raise ShapeMismatch("embedding", (head.matrix.shape[1],), embedding.shape)
    return head.matrix @ embedding


def mri_feature_names(dim: int, prefix: str = MRI_FEATURE_PREFIX) -> tuple[str, ...]:
    return tuple(f"{prefix}{i}" for i in range(dim))


# --- embedding cache -------------------------------------------------------

def embedding_cache_path(cache_dir: str, volume_id: str, weight_hash: int) -> str:
    return os.path.join(cache_dir, f"{volume_id}.{weight_hash:016x}.adct")


def embed_with_cache(
    net: FrozenNetwork, vol, cache_dir: str, volume_id: str
) -> tuple[np.ndarray, bool]:
    """Embedding for one volume, reusing the on-disk cache when possible.

    Returns (embedding, cache_hit). Cache entries are keyed by volume id and
    weight hash, so stale weights can never satisfy a lookup.
    """
    path = embedding_cache_path(cache_dir, volume_id, net.weight_hash)
    if os.path.exists(path):
        with open(path, "rb") as fh:
            records = read_container(fh.read())
        if len(records) == 1 and records[0].name == "embedding":
            return records[0].as_array().reshape(-1), True
    emb = forward_embed(net, vol)
    os.makedirs(cache_dir, exist_ok=True)
    payload = write_container([TensorRecord.from_array("embedding", emb)])
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    return emb, False

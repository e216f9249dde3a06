import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from weight_export.cli import (
    MissingUpstreamTensor,
    ShapeMismatch,
    export_tensors,
    main,
    random_tensors,
)
from weight_export.container import write_container
from weight_export.names import Architecture, torch_resnet_name_map, validate_total

MAPS_DIR = Path(__file__).parent.parent / "src" / "weight_export" / "maps"


def fabricate_checkpoint(arch: Architecture, seed: int = 0) -> dict[str, torch.Tensor]:
    """A torch-style state dict with upstream names and float64 values."""
    rng = np.random.default_rng(seed)
    name_map = torch_resnet_name_map(arch)
    shapes = arch.tensor_shapes()
    state = {}
    for canonical, upstream in name_map.items():
        if canonical.endswith(".bn.var"):
            values = rng.uniform(0.5, 1.5, size=shapes[canonical])
        else:
            values = rng.normal(size=shapes[canonical])
        state["module." + upstream] = torch.from_numpy(values.astype(np.float64))
    return state


class TestNameMap:
    def test_shipped_maps_are_total(self):
        for path in MAPS_DIR.glob("*.json"):
            doc = json.loads(path.read_text())
            arch = Architecture.named(doc["architecture"])
            validate_total(doc["map"], arch)

    def test_resnet50_table_size(self):
        arch = Architecture.named("resnet50")
        shapes = arch.tensor_shapes()
        # 1 stem + 48 block units + 4 shortcuts, 5 tensors each
        assert len(shapes) == (1 + 16 * 3 + 4) * 5
        assert shapes["stem.conv.weight"] == (64, 1, 7, 7, 7)
        assert shapes["stage2.block1.shortcut.conv.weight"] == (512, 256, 1, 1, 1)

    def test_missing_entry_detected(self):
        arch = Architecture.named("tiny")
        mapping = torch_resnet_name_map(arch)
        mapping.pop("stage1.block1.expand.conv.weight")
        with pytest.raises(ValueError):
            validate_total(mapping, arch)


class TestExport:
    def test_checkpoint_roundtrip_loads_in_pipeline(self, tmp_path):
        arch = Architecture.named("tiny")
        state = fabricate_checkpoint(arch, seed=3)
        ckpt = tmp_path / "upstream.pth"
        torch.save(state, ckpt)
        out = tmp_path / "weights.adct"
        rc = main([
            "--checkpoint", str(ckpt), "--output", str(out), "--arch", "tiny",
        ])
        assert rc == 0
        from strokeprog.inference3d import load_network, tiny_spec

        net = load_network(out.read_bytes(), tiny_spec())
        assert net.embedding_dim == 32

    def test_norms_match_upstream_within_1e4(self, tmp_path):
        arch = Architecture.named("tiny")
        state = fabricate_checkpoint(arch, seed=5)
        upstream = {k.removeprefix("module."): v.numpy() for k, v in state.items()}
        records, log_rows = export_tensors(upstream, torch_resnet_name_map(arch), arch)
        assert len(log_rows) == len(arch.tensor_shapes())
        for row in log_rows:
            up = float(row["upstream_l2"])
            ex = float(row["exported_l2"])
            assert abs(up - ex) <= 1e-4 * max(up, 1e-12)
            up_sum, ex_sum = float(row["upstream_sum"]), float(row["exported_sum"])
            assert abs(up_sum - ex_sum) <= 1e-4 * max(abs(up_sum), 1.0)

    def test_provenance_log_complete(self, tmp_path):
        arch = Architecture.named("tiny")
        state = fabricate_checkpoint(arch, seed=7)
        ckpt = tmp_path / "u.pth"
        torch.save({"state_dict": state}, ckpt)  # wrapped variant
        out = tmp_path / "w.adct"
        log = tmp_path / "prov.csv"
        rc = main(["--checkpoint", str(ckpt), "--output", str(out), "--arch", "tiny",
                   "--log", str(log)])
        assert rc == 0
        lines = log.read_text().splitlines()
        assert lines[0].startswith("canonical,upstream,shape,checksum")
        assert len(lines) == 1 + len(arch.tensor_shapes())
        assert all(len(line.split(",")) == 8 for line in lines[1:])

    def test_missing_upstream_tensor(self):
        arch = Architecture.named("tiny")
        state = fabricate_checkpoint(arch, seed=1)
        upstream = {k.removeprefix("module."): v.numpy() for k, v in state.items()}
        del upstream["layer1.0.conv3.weight"]
        with pytest.raises(MissingUpstreamTensor):
            export_tensors(upstream, torch_resnet_name_map(arch), arch)

    def test_shape_mismatch(self):
        arch = Architecture.named("tiny")
        state = fabricate_checkpoint(arch, seed=1)
        upstream = {k.removeprefix("module."): v.numpy() for k, v in state.items()}
        upstream["conv1.weight"] = np.zeros((8, 1, 3, 3, 3))
        with pytest.raises(ShapeMismatch):
            export_tensors(upstream, torch_resnet_name_map(arch), arch)

    def test_name_map_file_mode(self, tmp_path):
        arch = Architecture.named("tiny")
        state = fabricate_checkpoint(arch, seed=9)
        ckpt = tmp_path / "u.pth"
        torch.save(state, ckpt)
        out = tmp_path / "w.adct"
        rc = main([
            "--checkpoint", str(ckpt), "--output", str(out),
            "--name-map", str(MAPS_DIR / "medicalnet_tiny.json"),
        ])
        assert rc == 0
        from strokeprog.inference3d import load_network, tiny_spec

        load_network(out.read_bytes(), tiny_spec())


class TestRandomMode:
    def test_seeded_determinism(self, tmp_path):
        out_a, out_b = tmp_path / "a.adct", tmp_path / "b.adct"
        assert main(["--random", "--arch", "tiny", "--seed", "7", "--output", str(out_a)]) == 0
        assert main(["--random", "--arch", "tiny", "--seed", "7", "--output", str(out_b)]) == 0
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        out_a, out_b = tmp_path / "a.adct", tmp_path / "b.adct"
        assert main(["--random", "--arch", "tiny", "--seed", "7", "--output", str(out_a)]) == 0
        assert main(["--random", "--arch", "tiny", "--seed", "8", "--output", str(out_b)]) == 0
        assert out_a.read_bytes() != out_b.read_bytes()

    def test_random_resnet50_passes_load_validation(self, tmp_path):
        records, _ = random_tensors(Architecture.named("resnet50"), seed=1)
        payload = write_container(records)
        from strokeprog.inference3d import load_network, resnet50_3d

        net = load_network(payload, resnet50_3d())
        assert net.embedding_dim == 2048

    def test_cli_errors_return_nonzero(self, tmp_path):
        rc = main(["--output", str(tmp_path / "w.adct")])  # no checkpoint, no --random
        assert rc == 1
        rc = main(["--checkpoint", str(tmp_path / "missing.pth"),
                   "--output", str(tmp_path / "w.adct")])
        assert rc == 1


class TestConsoleEntry:
    def test_subprocess(self, tmp_path):
        out = tmp_path / "w.adct"
        proc = subprocess.run(
            [sys.executable, "-m", "weight_export.cli", "--random", "--arch", "tiny",
             "--seed", "3", "--output", str(out)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert out.exists()
        assert Path(str(out) + ".provenance.csv").exists()

import struct

import numpy as np
import pytest

from hawqkit import checkpoint
from hawqkit.data import synth_images
from hawqkit.errors import CheckpointError
from hawqkit.models import ModelSpec, build_model, forward_loss
from hawqkit.planner import PrecisionPlan
from hawqkit.trainer import OptimizerConfig, direct_quantize


@pytest.fixture(scope="module")
def quantized(tiny_resnet):
    model, part = build_model(tiny_resnet, seed=2)
    data = synth_images(40, 3, (1, 6, 6), seed=1)
    plan = PrecisionPlan(part.names, part.sizes, [8, 3, 2, 4], [8, 4, 4, 8])
    qm, _ = direct_quantize(model, plan, OptimizerConfig(lr=0.01, max_epochs=1), data)
    return qm, data


def test_round_trip_is_bit_exact(quantized):
    qm, data = quantized
    blob = checkpoint.dumps(qm, {"note": "x"})
    back, extra = checkpoint.loads(blob)
    assert extra == {"note": "x"}
    assert back.spec == qm.spec
    assert all(np.array_equal(back.params[k].data, qm.params[k].data) for k in qm.params)
    assert {k: (q.bits, q.scale) for k, q in back.weight_quant.items()} == \
        {k: (q.bits, q.scale) for k, q in qm.weight_quant.items()}
    assert back.act_quant
    assert forward_loss(back, data.features, data.labels).item() == \
        forward_loss(qm, data.features, data.labels).item()
    assert checkpoint.dumps(back, {"note": "x"}) == blob


def test_file_round_trip(tmp_path, small_mlp):
    model, _, _ = small_mlp
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, model)
    back, extra = checkpoint.load(path)
    assert extra == {} and back.weight_quant == {} and not back.act_quant
    assert all(np.array_equal(back.params[k].data, v.data) for k, v in model.params.items())


def test_corruption_is_detected(small_mlp):
    model, _, _ = small_mlp
    blob = checkpoint.dumps(model)
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.loads(blob[:8] + struct.pack("<I", 9) + blob[12:])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.loads(blob[:-5])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.loads(blob + b"\0")
    with pytest.raises(CheckpointError):
        checkpoint.load("/nonexistent/path.ckpt")


def test_spec_mismatch(small_mlp):
    model, _, _ = small_mlp
    other, _ = build_model(ModelSpec("mlp", [4, 9, 3]))
    blob = checkpoint.dumps(model)
    meta_len = struct.unpack("<I", blob[12:16])[0]
    head = checkpoint.dumps(other)
    other_len = struct.unpack("<I", head[12:16])[0]
    spliced = head[:16 + other_len] + blob[16 + meta_len:]
    with pytest.raises(CheckpointError, match="does not fit"):
        checkpoint.loads(spliced)

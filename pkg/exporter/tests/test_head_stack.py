import json

import numpy as np
import pytest

featprobe = pytest.importorskip("featprobe")

from conftest import write_images
from featprobe.metrics import classify, load_classifier_head, load_perceptual_stack, \
    lpips_distance
from featprobe.tensorio import FeatureMap, Tensor
from featprobe_exporter.export import export_head, export_perceptual_stack


def test_head_export_196_classes(tmp_path):
    export_head("convnext", tmp_path / "head", pretrained=False, num_classes=196)
    meta = json.loads((tmp_path / "head" / "head.json").read_text())
    assert meta["num_classes"] == 196
    assert meta["channels"] == 1024
    weights = np.load(tmp_path / "head" / "weights.npy")
    assert weights.shape == (196, 1024)
    print("\n[PASS] head export: 196-class head weights are [196, 1024]")


def test_head_loads_and_classifies_in_core(tmp_path, rng=np.random.default_rng(0)):
    export_head("convnext", tmp_path / "head", pretrained=False, num_classes=7)
    head = load_classifier_head(tmp_path / "head")
    f = FeatureMap(Tensor(rng.standard_normal((1024, 9, 9)).astype(np.float32)),
                   "convnext", "feat3")
    probs = classify(head, f)
    assert probs.shape == (7,)
    assert abs(probs.sum() - 1.0) <= 1e-6


def test_swinv2_head_convention_recorded(tmp_path):
    export_head("swinv2", tmp_path / "head", pretrained=False)
    meta = json.loads((tmp_path / "head" / "head.json").read_text())
    assert "pre-pool" in meta["head_convention"]
    assert meta["channels"] == 1024


def test_stack_normalized_and_zero_self_distance(tmp_path):
    from torchvision.models import alexnet

    model = alexnet(weights=None)
    model.eval()
    (paths,) = [write_images(tmp_path / "img", 1, seed=6)]
    export_perceptual_stack(paths[0], tmp_path / "stack", model=model)
    stack = load_perceptual_stack(tmp_path / "stack")
    assert stack.normalized
    assert len(stack.layers) == 5
    for layer in stack.layers:
        norms = np.linalg.norm(layer.features.data, axis=0)
        live = norms > 1e-6  # dead-ReLU locations stay at zero
        assert np.all(np.abs(norms[live] - 1.0) <= 1e-4)
        assert layer.weight == 1.0
    assert lpips_distance(stack, stack) == 0.0
    print("\n[PASS] perceptual stack: unit location norms, lpips(x,x)=0 in core")


def test_stack_distance_positive_for_different_images(tmp_path):
    from torchvision.models import alexnet

    model = alexnet(weights=None)
    model.eval()
    paths = write_images(tmp_path / "img", 2, seed=7)
    export_perceptual_stack(paths[0], tmp_path / "a", model=model)
    export_perceptual_stack(paths[1], tmp_path / "b", model=model)
    a = load_perceptual_stack(tmp_path / "a")
    b = load_perceptual_stack(tmp_path / "b")
    assert lpips_distance(a, b) > 0.0

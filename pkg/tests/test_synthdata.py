import hashlib
import json

import numpy as np
import pytest
import torch

from crtlab import synthdata as sd

import oracles


def heuristic_accuracy(count: int = 10_000, num_classes: int = 8, seed: int = 7) -> float:
    specs = sd.corpus_items(seed, num_classes, count, "train")
    hits = sum(sd.classify_heuristic(sd.render(s, 32), num_classes) == s.class_id for s in specs)
    return hits / count


def bicubic_ramp_error() -> float:
    """4x downscale of a diagonal ramp vs the per-pixel reference implementation."""
    ramp = np.add.outer(np.linspace(-1, 1, 32), 0.5 * np.linspace(-1, 1, 32))
    ours = sd.bicubic_resize(ramp, 8)
    return float(np.abs(ours - oracles.reference_bicubic(ramp, 8)).max())


def test_render_is_deterministic_and_in_range():
    spec = sd.SceneSpec(3, 12345)
    a, b = sd.render(spec, 32), sd.render(spec, 32)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (3, 32, 32) and a.dtype == np.float32
    assert a.min() >= -1 and a.max() <= 1
    other = sd.render(sd.SceneSpec(3, 12346), 32)
    assert hashlib.sha256(a.tobytes()).digest() != hashlib.sha256(other.tobytes()).digest()


def test_render_rejects_bad_input():
    with pytest.raises(ValueError):
        sd.render(sd.SceneSpec(0, 1), 8)
    with pytest.raises(ValueError):
        sd.render(sd.SceneSpec(sd.MAX_CLASSES, 1), 32)


def test_class_heuristic_small_sample():
    assert heuristic_accuracy(400) >= 0.99
    # the 16-class layout (two tone groups) is separable too
    assert heuristic_accuracy(400, num_classes=16) >= 0.99


@pytest.mark.slow
def test_class_heuristic_ten_thousand_renders():
    assert heuristic_accuracy(10_000) >= 0.99


def test_bicubic_identity_constant_and_oracle():
    img = np.random.default_rng(0).uniform(-1, 1, (3, 12, 12))
    assert np.array_equal(sd.bicubic_resize(img, 12), img)
    const = np.full((2, 10, 10), 0.3)
    for target in (3, 10, 17, 40):
        assert np.allclose(sd.bicubic_resize(const, target), 0.3, atol=1e-12)
    assert bicubic_ramp_error() < 1e-6
    up = np.random.default_rng(1).uniform(-1, 1, (7, 7))
    assert np.abs(sd.bicubic_resize(up, 13) - oracles.reference_bicubic(up, 13)).max() < 1e-9
    with pytest.raises(ValueError):
        sd.bicubic_resize(img, 0)


def test_bicubic_torch_in_torch_out():
    x = torch.rand(2, 3, 16, 16)
    y = sd.bicubic_resize(x, 8)
    assert torch.is_tensor(y) and y.shape == (2, 3, 8, 8) and y.dtype == x.dtype


def test_ppm_round_trip_and_header(tmp_path):
    img = sd.render(sd.SceneSpec(1, 5), 32)
    raw = sd.encode_ppm(img)
    assert raw.startswith(b"P6 32 32 255\n")
    q = sd.from_uint8(sd.to_uint8(img))
    sd.write_image(tmp_path / "a.ppm", img)
    back = sd.read_image(tmp_path / "a.ppm")
    assert np.array_equal(back, q)
    assert np.array_equal(sd.to_uint8(back), sd.to_uint8(img))


@pytest.mark.parametrize("raw,msg", [
    (b"P6 2 2 65535\n" + bytes(24), "8-bit"),
    (b"P6 2 2 255\n" + bytes(5), "truncated payload"),
    (b"P5 2 2 255\n" + bytes(4), "P6"),
    (b"P6 2 x 255\n" + bytes(12), "malformed"),
    (b"P6 2", "truncated header"),
])
def test_ppm_rejects_malformed(raw, msg):
    with pytest.raises(sd.ImageFormatError, match=msg):
        sd.decode_ppm(raw)


def test_ppm_accepts_comments():
    raw = b"P6\n# made elsewhere\n1 1\n255\n" + bytes([255, 0, 128])
    img = sd.decode_ppm(raw)
    assert img.shape == (3, 1, 1) and img[0, 0, 0] == 1.0


def test_corpus_build_checksum_disjoint_and_refusal(tmp_path):
    m1 = sd.build_corpus(tmp_path / "a", seed=3, num_classes=4, train=12, val=4, size=16)
    m2 = sd.build_corpus(tmp_path / "b", seed=3, num_classes=4, train=12, val=4, size=16)
    assert m1["checksum"] == m2["checksum"]
    seeds = {s: {it["seed"] for it in m1["items"][s]} for s in ("train", "val")}
    assert not seeds["train"] & seeds["val"]
    assert [it["class"] for it in m1["items"]["train"]][:5] == [0, 1, 2, 3, 0]
    # same corpus again: accepted without rewriting
    assert sd.build_corpus(tmp_path / "a", seed=3, num_classes=4, train=12, val=4, size=16) == m1
    with pytest.raises(sd.CorpusExistsError):
        sd.build_corpus(tmp_path / "a", seed=4, num_classes=4, train=12, val=4, size=16)
    m3 = sd.build_corpus(tmp_path / "a", seed=4, num_classes=4, train=12, val=4, size=16, force=True)
    assert m3["checksum"] != m1["checksum"]
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["checksum"] == m3["checksum"]


def test_load_split_matches_in_memory_render(tmp_path):
    sd.build_corpus(tmp_path, seed=2, num_classes=3, train=6, val=3, size=16)
    imgs, labels = sd.load_split(tmp_path, "val")
    mem_imgs, mem_labels = sd.render_split(2, 3, 3, 16, "val")
    assert torch.equal(imgs, mem_imgs) and torch.equal(labels, mem_labels)


def test_corpus_argument_validation(tmp_path):
    with pytest.raises(ValueError):
        sd.build_corpus(tmp_path, train=0)
    with pytest.raises(ValueError):
        sd.build_corpus(tmp_path, num_classes=sd.MAX_CLASSES + 1, train=1, val=1)

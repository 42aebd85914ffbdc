import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoseg import container
from protoseg.synthdata import (SceneConfig, SceneError, codebook, gen_dataset, gen_scene, gen_scenes,
                                load_dataset)


def test_noise_free_full_grid_scene():
    cfg = SceneConfig(grid=(4, 4), d_raw=5, num_classes=1, classes_per_scene=(1, 1),
                      blob_size=(4, 4), feature_noise=0.0)
    s = gen_scene(cfg, 3)
    assert np.all(s.gt_mask == 1)
    np.testing.assert_array_equal(s.patches, np.tile(codebook(cfg)[1], (16, 1)))
    assert s.caption == [1]


def test_determinism():
    a, b = gen_scene(SceneConfig(), 17), gen_scene(SceneConfig(), 17)
    assert np.array_equal(a.patches, b.patches) and np.array_equal(a.gt_mask, b.gt_mask)
    assert a.caption == b.caption
    assert not np.array_equal(a.patches, gen_scene(SceneConfig(), 18).patches)


def test_nearest_codebook_recovers_mask():
    cfg = SceneConfig(num_classes=2, classes_per_scene=(1, 2))
    book = codebook(cfg)
    hits = total = 0
    for seed in range(50):
        s = gen_scene(cfg, seed)
        d = ((s.patches[:, None, :] - book[None]) ** 2).sum(-1)
        fg = s.gt_mask > 0
        hits += (d.argmin(1)[fg] == s.gt_mask[fg]).sum()
        total += fg.sum()
    assert hits / total >= 0.99


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_caption_matches_mask(seed):
    s = gen_scene(SceneConfig(), seed)
    assert set(np.unique(s.gt_mask)) - {0} == set(s.caption)


def test_blobs_are_rectangles():
    cfg = SceneConfig()
    for seed in range(30):
        mask = gen_scene(cfg, seed).gt_mask.reshape(cfg.grid)
        for k in set(np.unique(mask)) - {0}:
            rows, cols = np.nonzero(mask == k)
            box = mask[rows.min():rows.max() + 1, cols.min():cols.max() + 1]
            assert np.all(box == k)


def test_class_balance():
    cfg = SceneConfig()
    counts = np.zeros(cfg.num_classes + 1)
    for s in gen_scenes(cfg, 1000, 0).captions:
        for k in set(s):
            counts[k] += 1
    freq = counts[1:] / counts[1:].sum()
    uniform = 1 / cfg.num_classes
    assert np.all(np.abs(freq - uniform) <= 0.2 * uniform)


def test_overconstrained():
    with pytest.raises(SceneError, match="scene overconstrained"):
        gen_scene(SceneConfig(grid=(2, 2), blob_size=(3, 3)), 0)
    cfg = SceneConfig(grid=(3, 3), num_classes=4, classes_per_scene=(4, 4), blob_size=(2, 2), max_tries=5)
    with pytest.raises(SceneError, match="scene overconstrained"):
        gen_scene(cfg, 0)


def test_invalid_config():
    with pytest.raises(SceneError):
        SceneConfig(classes_per_scene=(0, 2))
    with pytest.raises(SceneError):
        SceneConfig(feature_noise=-1.0)


def test_caption_noise_repeats_tokens():
    cfg = SceneConfig(caption_noise=2.0)
    s = gen_scene(cfg, 5)
    assert set(s.caption) == set(np.unique(s.gt_mask)) - {0}
    assert len(s.caption) >= len(set(s.caption))


def test_gen_dataset_empty(tmp_path):
    manifest = gen_dataset(SceneConfig(), 0, 0, tmp_path / "d")
    assert manifest["n_scenes"] == 0 and manifest["scenes"] == []
    _, scenes = load_dataset(tmp_path / "d")
    assert len(scenes) == 0


def test_gen_dataset_manifest_and_roundtrip(tmp_path):
    manifest = gen_dataset(SceneConfig(), 100, 40, tmp_path)
    assert [e["seed"] for e in manifest["scenes"]] == list(range(40, 140))
    assert json.loads((tmp_path / "manifest.json").read_text()) == manifest
    _, scenes = load_dataset(tmp_path)
    ref = gen_scenes(SceneConfig(), 100, 40)
    assert np.array_equal(scenes.patches, ref.patches)
    assert np.array_equal(scenes.masks, ref.masks)
    assert scenes.captions == ref.captions


def test_gen_dataset_byte_identical(tmp_path):
    digests = []
    for name in ("a", "b"):
        gen_dataset(SceneConfig(caption_noise=0.5), 30, 7, tmp_path / name)
        digests.append([hashlib.sha256((tmp_path / name / f).read_bytes()).hexdigest()
                        for f in ("scenes.pgt", "manifest.json")])
    assert digests[0] == digests[1]


def test_container_roundtrip_and_errors():
    t = {"a": np.arange(6.0).reshape(2, 3), "scalar": np.array(2.5), "empty": np.zeros((0, 4)),
         "ünï": np.array([-0.0, np.pi])}
    out = container.loads(container.dumps(t))
    assert list(out) == list(t)
    for k in t:
        assert out[k].shape == t[k].shape and np.array_equal(out[k], t[k])
    blob = container.dumps(t)
    with pytest.raises(container.ContainerError, match="bad magic"):
        container.loads(b"XXXX" + blob[4:])
    with pytest.raises(container.ContainerError, match="truncated"):
        container.loads(blob[:-3])
    with pytest.raises(container.ContainerError, match="trailing"):
        container.loads(blob + b"\0")

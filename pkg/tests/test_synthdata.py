import json

import numpy as np
import pytest
from scipy import ndimage

from dcct import cfa, synthdata as sd

SEEDS = range(20)


def mean_pair_corr(img):
    pairs = ((0, 1), (0, 2), (1, 2))
    return np.mean([np.corrcoef(img[..., a].ravel(), img[..., b].ravel())[0, 1] for a, b in pairs])


def chroma_hf_energy(img):
    d = img[..., 0] - img[..., 1]
    return (ndimage.laplace(d)[3:-3, 3:-3] ** 2).sum()


def high_band_fraction(img):
    """Share of (mean-removed) spectral energy with max(|wx|, |wy|) > pi/2."""
    h, w = img.shape[:2]
    fy = np.abs(np.fft.fftfreq(h)) * 2 * np.pi
    fx = np.abs(np.fft.fftfreq(w)) * 2 * np.pi
    hi = (fy[:, None] > np.pi / 2) | (fx[None, :] > np.pi / 2)
    tot = top = 0.0
    for c in range(3):
        e = np.abs(np.fft.fft2(img[..., c] - img[..., c].mean())) ** 2
        tot += e.sum()
        top += e[hi].sum()
    return top / tot


def test_empty_scene_is_mid_grey():
    img = sd.gen_scene(sd.SceneSpec(seed=1, n_blobs=0, noise_std=0.0))
    np.testing.assert_array_equal(img, 0.5)


def test_scene_deterministic_and_in_range():
    a = sd.gen_scene(sd.SceneSpec(seed=7, height=32, width=48))
    b = sd.gen_scene(sd.SceneSpec(seed=7, height=32, width=48))
    assert a.shape == (32, 48, 3)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1


def test_odd_extents_rejected():
    with pytest.raises(ValueError):
        sd.SceneSpec(seed=0, height=31)


def test_scene_channels_correlated():
    corrs = [mean_pair_corr(sd.gen_scene(sd.SceneSpec(seed=s))) for s in SEEDS]
    assert np.mean(corrs) > 0.3


def test_photographic_constant_roundtrip():
    scene = np.full((16, 16, 3), 0.4)
    np.testing.assert_array_equal(sd.gen_photographic(scene), scene)


def test_photographic_attenuates_chroma_detail():
    for s in SEEDS:
        scene = sd.gen_scene(sd.SceneSpec(seed=s))
        assert chroma_hf_energy(sd.gen_photographic(scene)) < chroma_hf_energy(scene), s


def test_photographic_deterministic_with_noise():
    scene = sd.gen_scene(sd.SceneSpec(seed=3, height=32, width=32))
    a = sd.gen_photographic(scene, sigma=0.01, seed=5)
    b = sd.gen_photographic(scene, sigma=0.01, seed=5)
    assert a.tobytes() == b.tobytes()


def test_photographic_matches_cfa_pipeline():
    scene = sd.gen_scene(sd.SceneSpec(seed=4, height=16, width=16))
    want = np.clip(cfa.demosaic_bilinear(cfa.mosaic(scene)), 0, 1)
    np.testing.assert_array_equal(sd.gen_photographic(scene), want)


def test_independent_mode_less_correlated():
    scene = np.mean([mean_pair_corr(sd.gen_scene(sd.SceneSpec(seed=s))) for s in SEEDS])
    indep = np.mean([mean_pair_corr(sd.gen_ai_like(sd.SceneSpec(seed=s), "independent")) for s in SEEDS])
    assert indep < scene


def test_upsampled_mode_low_high_band_energy():
    fr = [high_band_fraction(sd.gen_ai_like(sd.SceneSpec(seed=s), "upsampled")) for s in SEEDS]
    assert max(fr) < 0.10


@pytest.mark.parametrize("mode", sd.AI_MODES)
def test_ai_like_deterministic(mode):
    spec = sd.SceneSpec(seed=9, height=32, width=32)
    a, b = sd.gen_ai_like(spec, mode), sd.gen_ai_like(spec, mode)
    assert a.shape == (32, 32, 3) and a.tobytes() == b.tobytes()


def test_unknown_mode():
    with pytest.raises(ValueError):
        sd.gen_ai_like(sd.SceneSpec(seed=0), "diffusion")


def test_corpus_manifest_and_quantisation():
    imgs, man = sd.make_corpus("generated", 4, seed=2, size=16, mode="upsampled")
    assert man.count == 4 == len(imgs)
    assert len(set(man.seeds)) == 4
    assert man.generator["mode"] == "upsampled"
    for im in imgs:
        np.testing.assert_allclose(im * 255, np.round(im * 255), atol=1e-9)


def test_corpus_splits_and_classes_disjoint():
    seeds = set()
    for tag in sd.CLASS_CODES:
        for split in sd.SPLIT_CODES:
            s = set(sd.corpus_seeds(0, tag, split, 50))
            assert not (s & seeds)
            seeds |= s


def test_write_corpus(tmp_path):
    imgs, man = sd.make_corpus("photographic", 3, seed=0, size=16)
    out = sd.write_corpus(tmp_path, imgs, man)
    files = sorted(p.name for p in (tmp_path / "photographic").glob("*.ppm"))
    assert files == sorted(out.files) and len(files) == out.count
    back = sd.CorpusManifest.from_json((tmp_path / "photographic" / "manifest.json").read_text())
    assert back == out
    json.loads(out.to_json())

import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcct import condmodel as cm, io as dio
from dcct.pipeline import CompatibilityError, TrainConfig
from builders import cond_model, constant_bundle, desk_cfg


# --- PPM -----------------------------------------------------------------------

def test_ppm_minimal():
    px = bytes(range(0, 240, 20))
    img = dio.decode_ppm(b"P6 2 2 255\n" + px)
    assert img.shape == (2, 2, 3)
    np.testing.assert_array_equal(img.reshape(-1) * 255, list(px))


def test_ppm_header_comment():
    img = dio.decode_ppm(b"P6\n# made by hand\n1 1\n255\n" + b"\x00\x80\xff")
    np.testing.assert_allclose(img[0, 0], [0, 128 / 255, 1])


@pytest.mark.parametrize("buf", [
    b"P6 2 2 255\n" + bytes(11),   # truncated payload
    b"P5 2 2 255\n" + bytes(12),   # greyscale magic
    b"P6 2 2 65535\n" + bytes(24),  # 16-bit
    b"P6 2 x 255\n" + bytes(12),
    b"P6 2 2",
    b"P6 0 2 255\n",
])
def test_ppm_malformed(buf):
    with pytest.raises(dio.ParseError):
        dio.decode_ppm(buf)


@given(seed=st.integers(0, 2 ** 31), h=st.integers(1, 9), w=st.integers(1, 9))
def test_image_roundtrip_within_one_step(seed, h, w):
    img = np.random.default_rng(seed).uniform(size=(h, w, 3))
    back = dio.decode_ppm(dio.encode_ppm(img))
    assert np.abs(back - img).max() <= 1 / 255


def test_save_load_image(tmp_path):
    img = np.random.default_rng(0).uniform(size=(6, 4, 3))
    dio.save_image(img, tmp_path / "a.ppm")
    assert np.abs(dio.load_image(tmp_path / "a.ppm") - img).max() <= 1 / 255
    with pytest.raises(dio.ParseError):
        dio.load_image(tmp_path / "a.png")


def test_load_dataset_labels(tmp_path):
    img = np.zeros((4, 4, 3))
    for sub, n in (("photographic", 2), ("generated", 3)):
        for i in range(n):
            dio.save_image(img, tmp_path / sub / f"{i}.ppm")
    (tmp_path / "generated" / "notes.txt").write_text("x")
    paths, labels = dio.load_dataset(tmp_path)
    assert len(paths) == 5
    assert labels.tolist() == [0, 0, 1, 1, 1]
    assert all(p.parent.name == ("photographic", "generated")[l] for p, l in zip(paths, labels))


# --- checkpoints -----------------------------------------------------------------

def test_condmodel_roundtrip_20_random_models():
    r = np.random.default_rng(0)
    for i in range(20):
        ccfg = cm.CondNetConfig.for_bank(int(r.integers(1, 5)), k=int(r.integers(1, 6)),
                                         width=int(r.integers(2, 9)), depth=int(r.integers(1, 4)))
        m = cm.CondModel(ccfg, cm.init_params(ccfg, i), {"t": int(r.integers(1, 8)), "seed": i})
        back = dio.checkpoint_from_bytes(dio.checkpoint_bytes(m))
        assert back.config == m.config and back.meta == m.meta
        for k, v in m.params.items():
            assert back.params[k].data.tobytes() == v.data.tobytes(), k


def test_bundle_roundtrip(tmp_path):
    b = constant_bundle()
    dio.save_checkpoint(b, tmp_path / "b.ckpt")
    back = dio.load_checkpoint(tmp_path / "b.ckpt")
    assert back.config == b.config and back.threshold == b.threshold
    assert back.classifier.param_bytes() == b.classifier.param_bytes()
    assert back.classifier.norm_mu.tobytes() == b.classifier.norm_mu.tobytes()
    for role in ("p", "q"):
        assert getattr(back, role).meta == getattr(b, role).meta


def test_single_model_bundle_roundtrip():
    b = constant_bundle()
    b.q = None
    back = dio.checkpoint_from_bytes(dio.checkpoint_bytes(b))
    assert back.q is None and back.p is not None


def test_wrong_magic():
    buf = dio.checkpoint_bytes(cond_model(desk_cfg()))
    with pytest.raises(dio.ParseError, match="magic"):
        dio.checkpoint_from_bytes(b"XXXX" + buf[4:])


def test_version_mismatch_detected_before_payload():
    buf = dio.checkpoint_bytes(cond_model(desk_cfg()))
    bad = buf[:4] + struct.pack("<H", dio.VERSION + 1) + buf[6:]
    with pytest.raises(dio.CheckpointVersionError):
        dio.checkpoint_from_bytes(bad)
    # header alone is enough to see the version
    with pytest.raises(dio.CheckpointVersionError):
        dio.checkpoint_from_bytes(bad[:10])


def test_truncated_checkpoints_never_crash():
    buf = dio.checkpoint_bytes(cond_model(desk_cfg()))
    for cut in list(range(0, 64)) + [len(buf) // 2, len(buf) - 1]:
        with pytest.raises(dio.ParseError):
            dio.checkpoint_from_bytes(buf[:cut])


def test_directory_overflow():
    buf = dio.write_container({"kind": "condmodel"}, {"w": np.zeros((2, 2), np.float32)})
    # rewrite the single directory entry's shape to something huge
    idx = buf.index(b"\x01\x00w") + 3
    ndim = buf[idx]
    bad = buf[:idx + 1] + struct.pack(f"<{ndim}I", 60000, 60000) + buf[idx + 1 + 4 * ndim:]
    with pytest.raises(dio.ParseError, match="overruns"):
        dio.read_container(bad)


def test_random_garbage_is_parse_error():
    r = np.random.default_rng(3)
    for _ in range(50):
        junk = dio.MAGIC + struct.pack("<H", dio.VERSION) + r.bytes(int(r.integers(0, 80)))
        with pytest.raises(dio.ParseError):
            dio.checkpoint_from_bytes(junk)


def test_t_mismatch_names_both(tmp_path):
    dio.save_checkpoint(cond_model(desk_cfg(t=7)), tmp_path / "m.ckpt")
    with pytest.raises(CompatibilityError) as e:
        dio.load_checkpoint(tmp_path / "m.ckpt", expect_t=3)
    assert "t=7" in str(e.value) and "t=3" in str(e.value)
    assert dio.load_checkpoint(tmp_path / "m.ckpt", expect_t=7).t == 7


def test_atomic_write_leaves_no_temp(tmp_path):
    dio.atomic_write(tmp_path / "x" / "f.txt", "hello")
    assert [p.name for p in (tmp_path / "x").iterdir()] == ["f.txt"]


# --- tables and config -------------------------------------------------------------

def test_csv_six_decimals(tmp_path):
    dio.write_csv(tmp_path / "s.csv", ["path", "score", "label"], [("a.ppm", 0.5, 0), ("b.ppm", np.float32(1 / 3), 1)])
    assert (tmp_path / "s.csv").read_text() == "path,score,label\na.ppm,0.500000,0\nb.ppm,0.333333,1\n"


def test_read_scores_formats(tmp_path):
    (tmp_path / "a.csv").write_text("path,D\nx,1.5\ny,-2\n")
    (tmp_path / "b.txt").write_text("3\n4.25\n\n")
    (tmp_path / "c.csv").write_text("path,score,label\nx,0.1,0\n")
    np.testing.assert_array_equal(dio.read_scores(tmp_path / "a.csv"), [1.5, -2])
    np.testing.assert_array_equal(dio.read_scores(tmp_path / "b.txt"), [3, 4.25])
    np.testing.assert_array_equal(dio.read_scores(tmp_path / "c.csv"), [0.1])
    (tmp_path / "d.txt").write_text("oops\n")
    with pytest.raises(dio.ParseError):
        dio.read_scores(tmp_path / "d.txt")


def test_config_file(tmp_path):
    (tmp_path / "c.cfg").write_text("# desk tweaks\nsteps = 12\nlr=0.01\nbank=reduced\nmask-mode=random\n")
    cfg = dio.load_config(tmp_path / "c.cfg", TrainConfig.desk())
    assert cfg.steps == 12 and cfg.lr == 0.01 and cfg.mask_mode == "random"
    assert cfg.patch_size == 32
    assert TrainConfig.from_kv(cfg.to_kv()) == cfg
    (tmp_path / "bad.cfg").write_text("nonsense_key=1\n")
    with pytest.raises(ValueError):
        dio.load_config(tmp_path / "bad.cfg")

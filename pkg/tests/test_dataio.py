import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sen2lcz import dataio as D


def random_ds(n, seed=0):
    rng = np.random.default_rng(seed)
    return D.PatchDataset(rng.normal(size=(n, 32, 32, 10)).astype(np.float32), rng.integers(1, 18, n))


def test_container_roundtrip_bitwise(tmp_path):
    ds = random_ds(3)
    D.write_container(ds, tmp_path / "a.lczp")
    back = D.read_container(tmp_path / "a.lczp")
    assert back.patches.tobytes() == ds.patches.tobytes()
    assert back.labels.tobytes() == ds.labels.tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 6), st.integers(0, 2 ** 32 - 1))
def test_container_roundtrip_property(tmp_path_factory, n, seed):
    path = tmp_path_factory.mktemp("c") / "x.lczp"
    ds = random_ds(n, seed)
    D.write_container(ds, path)
    back = D.read_container(path)
    assert np.array_equal(back.patches, ds.patches) and np.array_equal(back.labels, ds.labels)


def test_container_layout(tmp_path):
    ds = random_ds(2)
    D.write_container(ds, tmp_path / "a.lczp")
    raw = (tmp_path / "a.lczp").read_bytes()
    assert raw[:4] == b"LCZP"
    assert struct.unpack_from("<HIIII", raw, 4) == (1, 2, 32, 32, 10)
    rec = 32 * 32 * 10 * 4 + 1
    assert len(raw) == 22 + 2 * rec
    first = np.frombuffer(raw, "<f4", count=32 * 32 * 10, offset=22).reshape(32, 32, 10)
    assert np.array_equal(first, ds.patches[0])
    assert raw[22 + rec - 1] == ds.labels[0]


@pytest.mark.parametrize("corrupt", ["magic", "version", "truncated", "trailing", "label", "geometry"])
def test_container_corruption(tmp_path, corrupt):
    D.write_container(random_ds(2), tmp_path / "a.lczp")
    raw = bytearray((tmp_path / "a.lczp").read_bytes())
    if corrupt == "magic":
        raw[:4] = b"XXXX"
    elif corrupt == "version":
        raw[4:6] = struct.pack("<H", 7)
    elif corrupt == "truncated":
        raw = raw[:-5]
    elif corrupt == "trailing":
        raw += b"\0"
    elif corrupt == "label":
        raw[-1] = 18
    else:
        raw[14:18] = struct.pack("<I", 16)
    (tmp_path / "b.lczp").write_bytes(bytes(raw))
    with pytest.raises(D.DataFormatError):
        D.read_container(tmp_path / "b.lczp")


def test_header_count_is_u32():
    hdr = D.pack_container_header(400_673)
    assert struct.unpack_from("<I", hdr, 6)[0] == 400_673


def test_dataset_validation():
    with pytest.raises(D.DataFormatError):
        D.PatchDataset(np.zeros((1, 32, 32, 3)), [1])
    with pytest.raises(D.DataFormatError):
        D.PatchDataset(np.zeros((1, 32, 32, 10)), [18])


def test_class_distribution():
    ds = D.PatchDataset(np.zeros((3, 32, 32, 10)), [1, 1, 17])
    counts = D.class_distribution(ds)
    assert counts[0] == 2 and counts[16] == 1 and counts.sum() == 3 and counts.shape == (17,)


def test_band_table():
    assert len(D.SENTINEL2_BANDS) == 10 and len(D.LCZ_NAMES) == 17


# -- band statistics -----------------------------------------------------------


def test_standardized_training_set_moments():
    rng = np.random.default_rng(1)
    ds = D.PatchDataset((rng.normal(size=(20, 32, 32, 10)) * 300 + 1500).astype(np.float32), np.ones(20))
    z = D.standardize(ds, D.fit_band_stats(ds)).patches.astype(np.float64)
    np.testing.assert_allclose(z.mean(axis=(0, 1, 2)), 0.0, atol=1e-6)
    np.testing.assert_allclose(z.std(axis=(0, 1, 2)), 1.0, atol=1e-4)


def test_identity_stats_and_shift_linearity():
    ds = random_ds(4)
    assert np.array_equal(D.standardize(ds, D.BandStats.identity()).patches, ds.patches)
    stats = D.fit_band_stats(ds)
    shifted = D.PatchDataset(ds.patches + 2.0, ds.labels)
    a = D.standardize(ds, stats).patches.astype(np.float64)
    b = D.standardize(shifted, stats).patches.astype(np.float64)
    np.testing.assert_allclose(b - a, np.broadcast_to(2.0 / stats.std, a.shape), atol=1e-5)


def test_destandardize_inverts():
    rng = np.random.default_rng(4)
    stats = D.BandStats(np.linspace(1000, 2000, 10), np.linspace(50, 500, 10))
    ds = D.PatchDataset(stats.mean + stats.std * rng.normal(size=(3, 32, 32, 10)), [1, 2, 3])
    back = D.destandardize(D.standardize(ds, stats), stats).patches
    np.testing.assert_allclose(back, ds.patches, rtol=1e-6)


def test_zero_variance_band():
    p = np.random.default_rng(2).normal(size=(2, 32, 32, 10)).astype(np.float32)
    p[..., 3] = 5.0
    with pytest.raises(D.DataFormatError, match="B5"):
        D.fit_band_stats(D.PatchDataset(p, [1, 2]))


def test_band_stats_csv(tmp_path):
    stats = D.BandStats(np.arange(10) + 0.1, np.arange(1, 11) * 0.3)
    D.write_band_stats(stats, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "band,mean,std"
    back = D.read_band_stats(tmp_path / "s.csv")
    assert np.array_equal(back.mean, stats.mean) and np.array_equal(back.std, stats.std)


# -- synthetic data ----------------------------------------------------------------


def test_synth_size_and_balance():
    ds = D.synth_generate(0, 40, 6.0)
    assert len(ds) == 680
    assert np.all(D.class_distribution(ds) == 40)


def test_synth_deterministic(tmp_path):
    D.write_container(D.synth_generate(5, 3, 6.0), tmp_path / "a")
    D.write_container(D.synth_generate(5, 3, 6.0), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert not np.array_equal(D.synth_generate(6, 3, 6.0).patches, D.synth_generate(5, 3, 6.0).patches)


def test_prototype_separation():
    means, _ = D.class_prototypes(6.0)
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    assert abs(d[np.triu_indices(17, 1)].min() - 6.0) < 1e-12


def test_nearest_centroid_oracle_separable():
    assert D.nearest_centroid_accuracy(D.synth_generate(0, 40, 6.0), D.synth_generate(1, 20, 6.0)) >= 0.99


def test_synth_rejects_bad_args():
    with pytest.raises(ValueError):
        D.synth_generate(0, 0, 6.0)
    with pytest.raises(ValueError):
        D.synth_generate(0, 1, -1.0)


def test_synth_tile_crop_matches_patch_distribution():
    rng = np.random.default_rng(0)
    tile = D.synth_tile(4, 64, 96, 6.0, rng)
    assert tile.shape == (10, 64, 96)
    means, patterns = D.class_prototypes(6.0)
    # every 32-aligned crop carries the same class pattern, offset by the class mean
    crop = tile[:, 32:64, 64:96].transpose(1, 2, 0)
    resid = crop - means[3] - patterns[3]
    assert abs(resid.mean()) < 0.05 and abs(resid.std() - 1.0) < 0.05


# -- HDF5 importer --------------------------------------------------------------------


def test_import_so2sat_h5(tmp_path):
    h5py = pytest.importorskip("h5py")
    rng = np.random.default_rng(3)
    sen2 = rng.uniform(0, 1, size=(5, 32, 32, 10))
    lab = np.eye(17)[[0, 16, 3, 3, 9]]
    with h5py.File(tmp_path / "s.h5", "w") as h5:
        h5["sen2"] = sen2
        h5["label"] = lab
    n = D.import_so2sat_h5(tmp_path / "s.h5", tmp_path / "s.lczp", chunk=2)
    ds = D.read_container(tmp_path / "s.lczp")
    assert n == 5 and list(ds.labels) == [1, 17, 4, 4, 10]
    np.testing.assert_array_equal(ds.patches, sen2.astype(np.float32))
    assert D.import_so2sat_h5(tmp_path / "s.h5", tmp_path / "t.lczp", limit=2) == 2

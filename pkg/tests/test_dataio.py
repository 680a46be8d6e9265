import struct

import numpy as np
import pytest
import tifffile
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ddtseg import dataio
from ddtseg.dataio import (SynthConfig, decode_map, encode_map, kfold_split, normalize,
                           read_labels_tiff, read_map, read_tiff16, scan_dataset, synth_blobs,
                           write_image, write_map, write_sample, write_tiff16)
from ddtseg.errors import ConfigError, IoError, UnsupportedTiff
from ddtseg.imgcore import compute_tile_grid, connected_components, n_instances


def handmade_tiff(samples, width, height, bits=16, order="<", compression=1, spp=1):
    """Minimal single-strip baseline TIFF assembled byte by byte."""
    fmt = "<" if order == "<" else ">"
    kind = {8: "B", 16: "H"}[bits]
    data = struct.pack(fmt + kind * len(samples), *samples)
    tags = [(256, 3, 1, width), (257, 3, 1, height), (258, 3, 1, bits), (259, 3, 1, compression),
            (262, 3, 1, 1), (273, 4, 1, 0), (277, 3, 1, spp), (278, 3, 1, height),
            (279, 4, 1, len(data))]
    ifd_size = 2 + 12 * len(tags) + 4
    data_offset = 8 + ifd_size
    out = (b"II" if order == "<" else b"MM") + struct.pack(fmt + "HI", 42, 8)
    out += struct.pack(fmt + "H", len(tags))
    for tag, typ, count, value in tags:
        if tag == 273:
            value = data_offset
        if typ == 3:
            out += struct.pack(fmt + "HHIH2x", tag, typ, count, value)
        else:
            out += struct.pack(fmt + "HHII", tag, typ, count, value)
    out += struct.pack(fmt + "I", 0)
    return out + data


@pytest.mark.parametrize("order", ["<", ">"])
def test_read_handmade_16bit(tmp_path, order):
    p = tmp_path / "a.tif"
    p.write_bytes(handmade_tiff([0, 1, 65535, 256], 2, 2, order=order))
    img = read_tiff16(p)
    assert img.dtype == np.uint16
    np.testing.assert_array_equal(img, [[0, 1], [65535, 256]])


def test_read_8bit_widens(tmp_path):
    p = tmp_path / "a.tif"
    p.write_bytes(handmade_tiff([0, 1, 255, 128], 2, 2, bits=8))
    np.testing.assert_array_equal(read_tiff16(p), [[0, 257], [65535, 128 * 257]])


def test_lzw_rejected_with_tag(tmp_path):
    p = tmp_path / "a.tif"
    p.write_bytes(handmade_tiff([1, 2, 3, 4], 2, 2, compression=5))
    with pytest.raises(UnsupportedTiff) as exc:
        read_tiff16(p)
    assert exc.value.tag == "Compression"


def test_rgb_rejected_with_tag(tmp_path):
    p = tmp_path / "rgb.tif"
    tifffile.imwrite(p, np.zeros((4, 4, 3), np.uint16), photometric="rgb")
    with pytest.raises(UnsupportedTiff) as exc:
        read_tiff16(p)
    assert exc.value.tag == "SamplesPerPixel"


def test_missing_and_truncated(tmp_path):
    with pytest.raises(IoError):
        read_tiff16(tmp_path / "nope.tif")
    p = tmp_path / "t.tif"
    full = handmade_tiff(list(range(64)), 8, 8)
    p.write_bytes(full[:len(full) - 40])
    with pytest.raises(IoError):
        read_tiff16(p)


@settings(max_examples=25)
@given(arrays(np.uint16, st.tuples(st.integers(1, 20), st.integers(1, 20))), st.booleans())
def test_tiff_round_trip_bit_exact(tmp_path_factory, img, compress):
    p = tmp_path_factory.mktemp("rt") / "x.tif"
    write_tiff16(p, img, compress=compress)
    np.testing.assert_array_equal(read_tiff16(p), img)


def test_bbbc006_sized_frame(tmp_path):
    img = np.random.default_rng(0).integers(0, 65535, (520, 696)).astype(np.uint16)
    write_tiff16(tmp_path / "f.tif", img)
    out = read_tiff16(tmp_path / "f.tif")
    assert out.shape == (520, 696)


def test_labels_read_raw(tmp_path):
    lab = np.array([[0, 7], [300, 7]], dtype=np.uint16)
    write_tiff16(tmp_path / "g.tif", lab)
    np.testing.assert_array_equal(read_labels_tiff(tmp_path / "g.tif"), lab)


@pytest.mark.parametrize("arr,role", [
    (np.arange(6, dtype=np.uint8).reshape(2, 3), "class"),
    (np.arange(6, dtype=np.uint16).reshape(3, 2), "gray"),
    (np.arange(6, dtype=np.int32).reshape(2, 3) - 2, "instance"),
    (np.linspace(0, 1, 12).reshape(3, 4), "inverse"),
])
def test_map_round_trip(tmp_path, arr, role):
    write_map(tmp_path / "m.map", arr, role)
    out, r = read_map(tmp_path / "m.map")
    assert r == role and out.dtype == arr.dtype
    np.testing.assert_array_equal(out, arr)


def test_map_header_layout():
    data = encode_map(np.ones((2, 3), np.uint8), "class")
    assert data[:8] == b"DDTMAP\x00\x01"
    magic, role, code, reserved, h, w = struct.unpack_from("<8sBBHII", data)
    assert (role, code, reserved, h, w) == (3, 0, 0, 2, 3)
    assert len(data) == 20 + 6


def test_map_rejects_garbage():
    with pytest.raises(IoError):
        decode_map(b"not a map at all, no sir")
    good = encode_map(np.ones((2, 2)), "distance")
    with pytest.raises(IoError):
        decode_map(good[:-1])


def test_render_palettes(tmp_path):
    from PIL import Image

    write_image(np.zeros((4, 4)), tmp_path / "z.png", "heatmap")
    z = np.asarray(Image.open(tmp_path / "z.png"))
    assert len(np.unique(z.reshape(-1, z.shape[-1]), axis=0)) == 1
    assert (z[0, 0] == dataio.HEAT_PALETTE[0]).all()
    cm = np.array([[0, 1], [2, 1]], dtype=np.uint8)
    write_image(cm, tmp_path / "c.png", "class_colors")
    c = np.asarray(Image.open(tmp_path / "c.png"))
    assert len(np.unique(c.reshape(-1, 3), axis=0)) == 3


def test_render_deterministic(tmp_path):
    arr = np.random.default_rng(1).random((16, 16))
    write_image(arr, tmp_path / "a.png", "heatmap")
    write_image(arr, tmp_path / "b.png", "heatmap")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_normalize():
    assert not normalize(np.full((3, 3), 9, np.uint16)).any()
    np.testing.assert_array_equal(normalize(np.array([0, 65535], np.uint16), "fixed16"), [0.0, 1.0])
    np.testing.assert_array_equal(normalize(np.array([100, 200, 300], np.uint16)), [0.0, 0.5, 1.0])


def test_kfold_768_sources():
    sources = [f"s{i:03d}" for i in range(768)]
    split = kfold_split(sources, 5, seed=0)
    sizes = sorted((len(split.fold(i)) for i in range(5)), reverse=True)
    assert sizes == [154, 154, 154, 153, 153]
    tiles_per_frame = len(compute_tile_grid(696, 520, 256, policy="nearest"))
    assert [s * tiles_per_frame for s in sizes] == [924, 924, 924, 918, 918]
    assert 768 * tiles_per_frame == 4608


def test_kfold_small_and_errors():
    split = kfold_split(["a", "b"], 2, seed=3)
    assert sorted(len(split.fold(i)) for i in range(2)) == [1, 1]
    with pytest.raises(ConfigError):
        kfold_split(["a", "b"], 3)


@given(st.integers(2, 40), st.integers(2, 8), st.integers(0, 2**31))
def test_kfold_partition(n, k, seed):
    sources = [f"s{i}" for i in range(n)]
    if k > n:
        with pytest.raises(ConfigError):
            kfold_split(sources, k, seed)
        return
    split = kfold_split(sources, k, seed)
    folds = [split.fold(i) for i in range(k)]
    assert sorted(sum(folds, [])) == sorted(sources)
    assert max(map(len, folds)) - min(map(len, folds)) <= 1
    assert split.assignments == kfold_split(sources, k, seed).assignments
    for i in range(k):
        assert set(split.train_sources(i)).isdisjoint(split.fold(i))


def test_synth_empty():
    img, lab = synth_blobs(SynthConfig(n_blobs=(0, 0), seed=1))
    assert not lab.any()
    assert img.dtype == np.uint16 and img.any()


def test_synth_one_blob_support_matches_labels():
    img, lab = synth_blobs(SynthConfig(n_blobs=(1, 1), noise_sigma=0.0, seed=2))
    np.testing.assert_array_equal(lab > 0, img > 0)


def test_synth_deterministic():
    a = synth_blobs(SynthConfig(seed=11))
    b = synth_blobs(SynthConfig(seed=11))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@given(st.integers(0, 10_000), st.booleans())
def test_synth_labels_connected_and_contiguous(seed, overlap):
    _, lab = synth_blobs(SynthConfig(seed=seed, overlap_allowed=overlap))
    k = n_instances(lab)
    assert set(np.unique(lab[lab > 0]).tolist()) == set(range(1, k + 1))
    for i in range(1, k + 1):
        assert n_instances(connected_components(lab == i, 8)) == 1


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(radius=(5, 2))
    with pytest.raises(ConfigError):
        SynthConfig(noise_sigma=-1)


def test_scan_dataset_pairs_by_stem(tmp_path):
    img, lab = synth_blobs(SynthConfig(seed=0))
    write_sample(tmp_path, "a", img, lab)
    write_sample(tmp_path, "b", img, lab)
    write_tiff16(tmp_path / "images" / "lonely.tif", img)
    index = scan_dataset(tmp_path)
    assert [e[2] for e in index.entries] == ["a", "b"]
    assert index.source_ids == ["a", "b"]

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellcount import kernels
from cellcount.data import (AUGMENT_OPS, DatasetLayout, DensityMap, DotAnnotation, ImageSample,
                            SynthConfig, assign_splits, augment, generate_synthetic,
                            load_dataset, nearest_multiple, pad_and_tile, quadrants_to_tile,
                            rasterize_density, resize_to_tile, write_dataset)
from cellcount.data.augment import transform_array
from cellcount.errors import AnnotationError, ConfigError, IngestionError, ParseError, ShapeError


def blank(h, w, dots=(), c=3, sid="img"):
    return ImageSample(np.zeros((h, w, c), np.float32), DotAnnotation(dots), sid)


def oracle_density(dots, shape, sigma, truncate=4.0):
    """Per-dot renormalized kernels summed in a plain double loop."""
    H, W = shape
    out = np.zeros(shape)
    for x, y in dots:
        k = np.zeros(shape)
        for i in range(H):
            for j in range(W):
                if abs(j - x) <= truncate * sigma and abs(i - y) <= truncate * sigma:
                    k[i, j] = np.exp(-((j - x) ** 2 + (i - y) ** 2) / (2 * sigma ** 2))
        out += k / k.sum()
    return out


# -- rasterize_density ---------------------------------------------------------

def test_rasterize_empty():
    d = rasterize_density([], (64, 64), 3)
    assert d.total == 0 and not d.values.any()


def test_rasterize_single_dot_unit_mass():
    d = rasterize_density([(32.0, 32.0)], (64, 64), 3)
    assert abs(d.total - 1.0) <= 1e-6
    assert np.unravel_index(d.values.argmax(), d.shape) == (32, 32)


def test_rasterize_border_dots_match_oracle():
    dots = [(1.0, 1.0), (40.3, 17.8), (62.9, 0.2)]
    d = rasterize_density(dots, (64, 64), 3)
    ref = oracle_density(dots, (64, 64), 3)
    assert abs(d.total - 3.0) <= 1e-4
    np.testing.assert_allclose(d.values, ref, rtol=1e-10, atol=1e-14)


def test_rasterize_out_of_bounds_names_point():
    with pytest.raises(AnnotationError, match=r"dot 1 at \(x=64.000"):
        rasterize_density([(3, 3), (64.0, 5.0)], (64, 64), 3)


def test_rasterize_nonnegative_and_cached_total(rng):
    dots = rng.uniform(0, 48, (30, 2))
    d = rasterize_density(dots, (48, 48), 2.0)
    assert (d.values >= 0).all()
    assert abs(d.values.sum() - d.total) <= 1e-6 * max(1, d.total)


def test_splat_backends_agree(backend, rng):
    pts = rng.uniform(0, 31.99, (25, 2))
    ref = np.zeros((32, 32))
    kernels.splat_gaussians(ref, pts[:, 0], pts[:, 1], 2.5, impl=kernels._pykernels)
    out = np.zeros((32, 32))
    kernels.splat_gaussians(out, pts[:, 0], pts[:, 1], 2.5, impl=backend)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 39.999), st.floats(0, 23.999)), max_size=25),
       st.floats(0.5, 6.0))
def test_mass_conservation_property(points, sigma):
    d = rasterize_density(points, (24, 40), sigma)
    assert abs(d.total - len(points)) <= 1e-4


# -- generate_synthetic ---------------------------------------------------------

def test_synth_empty():
    assert generate_synthetic(SynthConfig(num_images=0)) == []


def test_synth_deterministic():
    cfg = SynthConfig(num_images=3, seed=7, count_mean=40, count_std=10)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.dots.points.tobytes() == y.dots.points.tobytes()
        assert x.split == y.split


def test_synth_count_statistics():
    samples = generate_synthetic(SynthConfig(num_images=200, count_mean=174, count_std=64, seed=1))
    assert len(samples) == 200
    mean = np.mean([s.count for s in samples])
    assert 150 <= mean <= 198


def test_synth_samples_well_formed():
    for s in generate_synthetic(SynthConfig(num_images=4, seed=3, count_mean=20, count_std=30)):
        assert s.count >= 0
        assert s.image.shape == (256, 256, 3)
        assert s.image.min() >= 0 and s.image.max() <= 1
        s.dots.check_bounds(s.shape)


def test_synth_no_overlap_mode():
    cfg = SynthConfig(num_images=2, count_mean=30, count_std=0, overlap_allowed=False,
                      image_size=(64, 64), seed=2)
    for s in generate_synthetic(cfg):
        p = s.dots.points
        d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1)) + np.eye(len(p)) * 1e9
        assert d.min() >= 2 * cfg.cell_radius_range[0]


@pytest.mark.parametrize("bad", [
    dict(cell_radius_range=(5, 2)),
    dict(blur_sigma_range=(0, 1)),
    dict(num_images=-1),
    dict(count_std=-1),
])
def test_synth_invalid_config(bad):
    with pytest.raises(ConfigError):
        generate_synthetic(SynthConfig(**bad))


# -- pad_and_tile ---------------------------------------------------------------

@pytest.mark.parametrize("side,k", [(150, 1), (256, 1), (322, 1), (383, 1), (384, 2),
                                    (512, 2), (798, 3), (1024, 4)])
def test_nearest_multiple(side, k):
    assert nearest_multiple(side) == k


def test_tile_identity_256(rng):
    img = rng.random((256, 256, 3)).astype(np.float32)
    dots = rng.uniform(0, 256, (17, 2))
    tiles = pad_and_tile(ImageSample(img, DotAnnotation(dots), "a"))
    assert len(tiles) == 1
    np.testing.assert_array_equal(tiles[0].image, img)
    np.testing.assert_array_equal(tiles[0].dots.points, dots)


@pytest.mark.parametrize("h,w,ntiles", [(306, 322, 1), (798, 788, 9)])
def test_tile_dcc_extremes(h, w, ntiles, rng):
    dots = np.stack([rng.uniform(0, w, 41), rng.uniform(0, h, 41)], axis=1)
    tiles = pad_and_tile(blank(h, w, dots))
    assert len(tiles) == ntiles
    assert all(t.shape == (256, 256) for t in tiles)
    assert sum(t.count for t in tiles) == 41
    for t in tiles:
        t.dots.check_bounds(t.shape)
        assert t.parent_id == "img"


def test_tile_dot_geometry():
    # 600 -> pad 600x600 -> k=2 -> 512: scale 512/600
    tiles = pad_and_tile(blank(600, 400, [(300.0, 450.0)]))
    scale = 512 / 600
    owner = [t for t in tiles if t.count]
    assert len(owner) == 1 and owner[0].source_id == "img_r1c1"
    np.testing.assert_allclose(owner[0].dots.points[0],
                               [300 * scale - 256, 450 * scale - 256])


def test_tile_boundary_ownership_half_open():
    tiles = pad_and_tile(blank(512, 512, [(256.0, 0.0), (255.999, 511.999)]))
    counts = {t.source_id: t.count for t in tiles}
    assert counts == {"img_r0c0": 0, "img_r0c1": 1, "img_r1c0": 1, "img_r1c1": 0}


def test_tile_padding_is_zero():
    img = np.ones((300, 200, 1), np.float32)
    t = pad_and_tile(ImageSample(img, DotAnnotation(), "p"))[0]
    # padded columns lie right of 200 * 256/300
    assert t.image[:, 180:].max() == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(100, 900), st.integers(100, 900), st.integers(0, 60), st.integers(0, 2**31))
def test_count_conservation_property(h, w, n, seed):
    r = np.random.default_rng(seed)
    dots = np.stack([r.uniform(0, w, n), r.uniform(0, h, n)], axis=1)
    tiles = pad_and_tile(blank(h, w, dots, c=1))
    assert sum(t.count for t in tiles) == n
    k = nearest_multiple(max(h, w))
    assert len(tiles) == k * k


def test_resize_and_quadrants():
    assert resize_to_tile(blank(150, 150, [(149.9, 0.0)]))[0].count == 1
    quads = quadrants_to_tile(blank(600, 600, [(10, 10), (310, 10), (599, 599)]))
    assert [q.count for q in quads] == [1, 1, 0, 1]
    assert all(q.shape == (256, 256) for q in quads)
    with pytest.raises(ShapeError):
        quadrants_to_tile(blank(600, 400))


# -- augment ----------------------------------------------------------------------

def test_augment_identity(rng):
    s = ImageSample(rng.random((8, 8, 3)), DotAnnotation([(1, 2)]), "x")
    d = DensityMap(rng.random((8, 8)))
    s2, d2 = augment(s, d, "identity")
    assert s2 is s and d2 is d


def test_rot90cw_dot_and_one_hot():
    onehot = np.zeros((256, 256))
    onehot[20, 10] = 1.0
    s = ImageSample(onehot[:, :, None].copy(), DotAnnotation([(10.0, 20.0)]), "x")
    s2, d2 = augment(s, DensityMap(onehot), "rot90cw")
    np.testing.assert_array_equal(s2.dots.points, [[235.0, 10.0]])
    r, c = np.unravel_index(d2.values.argmax(), d2.shape)
    assert (c, r) == (235, 10)
    assert s2.image[10, 235, 0] == 1.0


@pytest.mark.parametrize("op", AUGMENT_OPS[1:])
def test_augment_moves_dots_with_pixels(op, rng):
    # every dot sits on an integer pixel whose one-hot value travels with it
    pts = rng.integers(0, 32, (12, 2)).astype(float)
    img = np.zeros((32, 32, 1))
    img[pts[:, 1].astype(int), pts[:, 0].astype(int), 0] = np.arange(1, 13)
    s2, _ = augment(ImageSample(img, DotAnnotation(pts), "x"), None, op)
    got = s2.image[s2.dots.points[:, 1].astype(int), s2.dots.points[:, 0].astype(int), 0]
    np.testing.assert_array_equal(got, img[pts[:, 1].astype(int), pts[:, 0].astype(int), 0])


@pytest.mark.parametrize("a,b", [("hflip", "hflip"), ("vflip", "vflip"),
                                 ("rot90cw", "rot90ccw"), ("rot90ccw", "rot90cw")])
def test_augment_group_closure(a, b, rng):
    s = ImageSample(rng.random((16, 16, 3)), DotAnnotation(rng.uniform(0, 15, (9, 2))), "x")
    d = rasterize_density(s.dots, s.shape, 1.5)
    s2, d2 = augment(*augment(s, d, a), b)
    assert s2.image.tobytes() == s.image.tobytes()
    assert d2.values.tobytes() == d.values.tobytes()
    # coordinates are recovered up to one rounding of W - 1 - x
    np.testing.assert_allclose(s2.dots.points, s.dots.points, rtol=0, atol=1e-12)


@pytest.mark.parametrize("op", AUGMENT_OPS)
def test_augment_preserves_count_and_mass(op, rng):
    s = ImageSample(rng.random((24, 24, 2)), DotAnnotation(rng.uniform(0, 23, (7, 2))), "x")
    d = rasterize_density(s.dots, s.shape, 2.0)
    s2, d2 = augment(s, d, op)
    assert s2.count == s.count
    assert abs(d2.total - d.total) < 1e-12
    s2.dots.check_bounds(s2.shape)


def test_augment_rotation_requires_square():
    with pytest.raises(ShapeError):
        augment(blank(8, 12), None, "rot90cw")
    augment(blank(8, 12), None, "hflip")


def test_transform_array_unknown():
    with pytest.raises(ValueError):
        transform_array("rot45", np.zeros((2, 2)))


# -- splits / load_dataset ------------------------------------------------------------

def test_split_ratio_20():
    splits = assign_splits([f"id{i}" for i in range(20)], seed=5)
    vals = list(splits.values())
    assert (vals.count("train"), vals.count("test"), vals.count("val")) == (10, 9, 1)


def test_split_is_order_independent():
    ids = [f"id{i}" for i in range(37)]
    assert assign_splits(ids, 3) == assign_splits(ids[::-1], 3)
    assert assign_splits(ids, 3) != assign_splits(ids, 4)


def write_raw(root, n, rng, size=(40, 48)):
    (root / "images").mkdir(parents=True)
    (root / "annotations").mkdir()
    samples = []
    for i in range(n):
        img = (rng.integers(0, 256, size + (3,)) / 255.0).astype(np.float32)
        pts = np.stack([rng.uniform(0, size[1], 5), rng.uniform(0, size[0], 5)], 1)
        samples.append(ImageSample(img, DotAnnotation(pts), f"s{i:02d}"))
    write_dataset(samples, root)
    return samples


def test_load_empty_root_warns(tmp_path):
    with pytest.warns(UserWarning):
        assert load_dataset(tmp_path) == []


def test_load_missing_root(tmp_path):
    with pytest.raises(IngestionError):
        load_dataset(tmp_path / "nope")


def test_load_roundtrip_and_split(tmp_path, rng):
    orig = write_raw(tmp_path, 20, rng)
    a = load_dataset(tmp_path, seed=11)
    b = load_dataset(tmp_path, seed=11)
    assert [s.split for s in a] == [s.split for s in b]
    assert sorted(s.split for s in a).count("train") == 10
    assert [s.split for s in a].count("test") == 9
    assert [s.split for s in a].count("val") == 1
    for o, s in zip(orig, a):
        assert s.source_id == o.source_id
        np.testing.assert_array_equal(s.image, o.image)
        np.testing.assert_array_equal(s.dots.points, o.dots.points)


def test_load_missing_annotation_lists_files(tmp_path, rng):
    write_raw(tmp_path, 3, rng)
    (tmp_path / "annotations" / "s01.json").unlink()
    (tmp_path / "annotations" / "s02.json").unlink()
    with pytest.raises(IngestionError, match="s01.json.*s02.json"):
        load_dataset(tmp_path)


def test_load_parse_error_reports_line(tmp_path, rng):
    write_raw(tmp_path, 2, rng)
    bad = tmp_path / "annotations" / "s01.json"
    bad.write_text('[\n  {"x": 1, "y": 2},\n  {"x": 3}\n]\n')
    with pytest.raises(ParseError) as e:
        load_dataset(tmp_path)
    assert e.value.line == 3 and e.value.path.endswith("s01.json")
    bad.write_text('[\n  {"x": 1, "y": 2},\n  {"x": 3 "y": 4}\n]')
    with pytest.raises(ParseError) as e:
        load_dataset(tmp_path)
    assert e.value.line == 3


def test_load_tif_and_grayscale(tmp_path):
    from PIL import Image
    (tmp_path / "images").mkdir()
    (tmp_path / "annotations").mkdir()
    arr = (np.arange(64 * 64).reshape(64, 64) % 65535).astype(np.uint16)
    Image.fromarray(arr).save(tmp_path / "images" / "g.tif")
    (tmp_path / "annotations" / "g.json").write_text(json.dumps([{"x": 3.5, "y": 60.0}]))
    (s,) = load_dataset(tmp_path)
    assert s.image.shape == (64, 64, 1)
    assert s.image.max() <= 1.0 and s.count == 1


def test_tiles_share_parent_split(tmp_path, rng):
    big = [ImageSample(rng.random((512, 512, 1)).astype(np.float32),
                       DotAnnotation(rng.uniform(0, 512, (8, 2))), f"big{i}") for i in range(6)]
    tiles = [t for s in big for t in pad_and_tile(s)]
    write_dataset(tiles, tmp_path)
    loaded = load_dataset(tmp_path, seed=1)
    by_parent = {}
    for s in loaded:
        by_parent.setdefault(s.parent_id, set()).add(s.split)
    assert len(by_parent) == 6
    assert all(len(v) == 1 for v in by_parent.values())


def test_dataset_layout_custom_dirs(tmp_path, rng):
    lay = DatasetLayout(images_dir="img", annotations_dir="ann")
    s = [ImageSample(np.zeros((8, 8, 3), np.float32), DotAnnotation([(1, 1)]), "a")]
    write_dataset(s, tmp_path, layout=lay)
    assert load_dataset(tmp_path, lay)[0].count == 1


def test_undecodable_image_is_ingestion_error(tmp_path):
    from cellcount.data.io import read_image
    from cellcount.errors import IngestionError
    bad = tmp_path / "x.png"
    bad.write_bytes(b"not an image")
    try:
        import tifffile  # noqa: F401
    except ImportError:
        with pytest.raises(IngestionError, match="x.png"):
            read_image(bad)
    else:
        with pytest.raises(Exception):
            read_image(bad)

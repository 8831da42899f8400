import numpy as np
import pytest

from mddm import metrics
from mddm.gridworld import (
    Codebook,
    GridWorldConfig,
    OracleDenoiser,
    decode_image,
    encode_image,
    enumerate_joint,
    fit_codebook,
    grid_from_image_tokens,
    load_token_records,
    parse_report,
    quantization_error,
    render_pixels,
    render_report,
    sample_pair,
    sample_packed_batch,
    save_token_records,
)

WORLD = GridWorldConfig()  # G=2, C=3, probs (0.5, 0.3, 0.2)


def test_config_validation():
    with pytest.raises(ValueError):
        GridWorldConfig(color_probs=(0.5, 0.5, 0.2))
    with pytest.raises(ValueError):
        GridWorldConfig(n_colors=2)
    with pytest.raises(ValueError):
        GridWorldConfig(color_probs=(1.0, 0.0, 0.0))


def test_all_zero_grid_probability_exact():
    dist = enumerate_joint(WORLD)
    idx = np.where((dist.grids.reshape(81, -1) == 0).all(axis=1))[0]
    assert idx.size == 1
    assert dist.probs[idx[0]] == pytest.approx(0.5**4, abs=1e-15)


def test_all_zero_grid_probability_empirical():
    n = 20_000
    batch = sample_packed_batch(WORLD, n, np.random.default_rng(0))
    hits = int((batch[:, :4] == 0).all(axis=1).sum())
    p = 0.5**4
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(hits - n * p) <= 4 * sigma


def test_degenerate_single_color():
    config = GridWorldConfig(n_colors=1, color_probs=(1.0,))
    rng = np.random.default_rng(0)
    first = sample_pair(config, rng)
    for _ in range(5):
        again = sample_pair(config, rng)
        assert np.array_equal(first.grid, again.grid)
        assert np.array_equal(first.report_ids, again.report_ids)


def test_color_frequencies():
    n = 100_000
    batch = sample_packed_batch(WORLD, n, np.random.default_rng(1))
    cells = batch[:, :4].reshape(-1)
    for color, p in enumerate(WORLD.color_probs):
        count = int((cells == color).sum())
        total = cells.size
        sigma = np.sqrt(total * p * (1 - p))
        assert abs(count - total * p) <= 4 * sigma


def test_enumerate_joint_support():
    dist = enumerate_joint(WORLD)
    assert dist.packed.shape == (81, 8)
    assert abs(dist.probs.sum() - 1.0) <= 1e-12
    # report equals image cells by construction
    assert (dist.packed[:, :4] == dist.packed[:, 4:] - 3).all()


def test_enumerate_joint_uniform_symmetry():
    config = GridWorldConfig(color_probs=(1 / 3, 1 / 3, 1 / 3))
    dist = enumerate_joint(config)
    assert np.allclose(dist.probs, 1.0 / 81, atol=1e-15)


def test_enumerate_joint_random_configs_sum_to_one():
    rng = np.random.default_rng(2)
    for _ in range(20):
        c = int(rng.integers(2, 5))
        raw = rng.random(c) + 0.1
        probs = raw / raw.sum()
        probs[-1] = 1.0 - probs[:-1].sum()  # close the simplex exactly
        config = GridWorldConfig(
            grid_size=int(rng.integers(1, 3)), n_colors=c, color_probs=tuple(probs)
        )
        dist = enumerate_joint(config)
        assert abs(dist.probs.sum() - 1.0) <= 1e-12


def test_enumeration_limit():
    config = GridWorldConfig(
        grid_size=5, n_colors=4, color_probs=(0.25, 0.25, 0.25, 0.25)
    )
    with pytest.raises(ValueError, match="support"):
        enumerate_joint(config)


def test_sampling_matches_enumeration():
    n = 100_000
    batch = sample_packed_batch(WORLD, n, np.random.default_rng(3))
    tv = metrics.tv_distance(
        metrics.counts_from_rows(batch), enumerate_joint(WORLD).as_dict()
    )
    assert tv <= 0.02


# ----------------------------------------------------------------------
# reports


def test_render_report_example():
    grid = np.array([[0, 1], [2, 0]])
    assert render_report(grid, WORLD).tolist() == [0, 1, 2, 0]


def test_parse_render_exhaustive():
    dist = enumerate_joint(WORLD)
    for grid in dist.grids:
        assert np.array_equal(parse_report(render_report(grid, WORLD), WORLD), grid)


def test_parse_report_errors():
    with pytest.raises(ValueError, match="length"):
        parse_report(np.array([0, 1, 2]), WORLD)
    with pytest.raises(ValueError, match="unknown"):
        parse_report(np.array([0, 1, 2, 3]), WORLD)


# ----------------------------------------------------------------------
# codebook


def test_codebook_perfect_fit():
    patches = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    book = fit_codebook(patches, k_img=3, rng=np.random.default_rng(0))
    assert quantization_error(patches, book) == pytest.approx(0.0, abs=1e-24)
    srt = np.sort(book.centroids[:, 0])
    assert np.allclose(srt, [0.0, 1.0, 2.0])


def test_codebook_needs_distinct_patches():
    patches = np.zeros((10, 4))
    with pytest.raises(ValueError, match="distinct"):
        fit_codebook(patches, k_img=2)


def test_lloyd_error_nonincreasing():
    rng = np.random.default_rng(4)
    patches = rng.random((200, 6))
    errors = []
    for iters in range(1, 9):
        book = fit_codebook(patches, k_img=5, max_iters=iters, rng=np.random.default_rng(7))
        errors.append(quantization_error(patches, book))
    for prev, cur in zip(errors, errors[1:]):
        assert cur <= prev + 1e-12


def test_encode_decode_identity_on_centroids():
    config = GridWorldConfig(pixel_mode=True, patch_size=2)
    centroids = np.array([[0.1] * 4, [0.5] * 4, [0.9] * 4])
    book = Codebook(centroids=centroids)
    ids = np.array([0, 2, 1, 0])
    assert np.array_equal(
        encode_image(decode_image(ids, book, config), book, config), ids
    )


def test_encode_tie_breaks_to_lowest_index():
    config = GridWorldConfig(pixel_mode=True, patch_size=1)
    # centroids 0 and 1 are padding; 2 and 5 are equidistant from the patch
    centroids = np.array([[10.0], [11.0], [0.4], [12.0], [13.0], [0.6]])
    book = Codebook(centroids=centroids)
    pixels = np.full((2, 2), 0.5)
    ids = encode_image(pixels, book, config)
    assert (ids == 2).all()


def test_pixel_world_round_trip_and_mse():
    config = GridWorldConfig(pixel_mode=True, patch_size=4, jitter=0.05)
    rng = np.random.default_rng(5)
    patches = []
    grids = []
    for _ in range(300):
        grid = rng.integers(0, 3, size=(2, 2))
        pixels = render_pixels(grid, config, rng)
        patches.append(pixels.reshape(2, 4, 2, 4).transpose(0, 2, 1, 3).reshape(4, 16))
        grids.append(grid)
    patches = np.concatenate(patches, axis=0)
    book = fit_codebook(patches, k_img=3, rng=np.random.default_rng(8))

    # lossless-by-construction world: each centroid sits near a color's mean patch
    base = (np.arange(3) + 0.5) / 3
    centroid_means = np.sort(book.centroids.mean(axis=1))
    assert np.abs(centroid_means - base).max() < config.jitter

    # reconstruction error bounded by the jitter variance
    total_se, total_px = 0.0, 0
    rng2 = np.random.default_rng(6)
    for _ in range(1000):
        grid = rng2.integers(0, 3, size=(2, 2))
        pixels = render_pixels(grid, config, rng2)
        recon = decode_image(encode_image(pixels, book, config), book, config)
        total_se += float(((pixels - recon) ** 2).sum())
        total_px += pixels.size
    assert total_se / total_px <= config.jitter**2 / 3.0

    # encode . decode . encode == encode
    ids = encode_image(render_pixels(grids[0], config, np.random.default_rng(9)), book, config)
    assert np.array_equal(
        encode_image(decode_image(ids, book, config), book, config), ids
    )


def test_grid_from_image_tokens_pixel_mode():
    config = GridWorldConfig(pixel_mode=True, patch_size=2)
    base = (np.arange(3) + 0.5) / 3
    book = Codebook(centroids=np.stack([np.full(4, b) for b in base[::-1]]))
    grid = grid_from_image_tokens(np.array([0, 1, 2, 2]), config, book)
    assert grid.tolist() == [[2, 1], [0, 0]]


def test_sample_pair_pixel_mode_requires_codebook():
    config = GridWorldConfig(pixel_mode=True)
    with pytest.raises(ValueError, match="codebook"):
        sample_pair(config, np.random.default_rng(0))


# ----------------------------------------------------------------------
# oracle denoiser


def test_oracle_prior_marginals():
    oracle = OracleDenoiser(WORLD)
    logits = oracle(np.full(8, 6), 1.0)
    probs = np.exp(logits - np.logaddexp.reduce(logits, axis=-1, keepdims=True))
    for pos in range(8):
        expected = np.zeros(7)
        if pos < 4:
            expected[:3] = WORLD.color_probs
        else:
            expected[3:6] = WORLD.color_probs
        assert np.allclose(probs[pos], expected, atol=1e-12)


def test_oracle_conditions_on_partner_position():
    oracle = OracleDenoiser(WORLD)
    ids = np.full(8, 6)
    ids[0] = 1  # report cell 0 is color 1
    logits = oracle(ids, 0.5)
    probs = np.exp(logits[4] - np.logaddexp.reduce(logits[4]))
    expected = np.zeros(7)
    expected[3 + 1] = 1.0  # image cell 0 must be color 1
    assert np.allclose(probs, expected, atol=1e-12)


def test_oracle_off_support_falls_back_to_prior():
    oracle = OracleDenoiser(WORLD)
    ids = np.full(8, 6)
    ids[0] = 1
    ids[4] = 3 + 2  # contradicts report cell 0
    logits = oracle(ids, 0.5)
    probs = np.exp(logits[1] - np.logaddexp.reduce(logits[1]))
    assert np.allclose(probs[:3], WORLD.color_probs, atol=1e-12)


# ----------------------------------------------------------------------
# token record io


def test_token_records_round_trip(tmp_path):
    arrays = [np.array([1, 2, 3]), np.array([], dtype=np.int64), np.arange(9)]
    path = tmp_path / "records.bin"
    save_token_records(path, arrays)
    loaded = load_token_records(path)
    assert len(loaded) == 3
    for a, b in zip(arrays, loaded):
        assert np.array_equal(a, b)


def test_token_records_truncation(tmp_path):
    path = tmp_path / "records.bin"
    save_token_records(path, [np.array([1, 2, 3])])
    data = path.read_bytes()
    path.write_bytes(data[:-2])
    with pytest.raises(ValueError, match="truncated"):
        load_token_records(path)

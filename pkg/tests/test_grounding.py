import itertools

import numpy as np
import pytest

from cliplite.data import ShapesCorpusSpec, cell_block, gen_captioned_shapes
from cliplite.grounding import (
    SaliencyMap,
    box_from_saliency,
    chance_rate,
    grad_cam,
    grid_csv,
    pointing_hits,
    upsample,
    write_pgm,
)
from cliplite.training import init_model


@pytest.fixture(scope="module")
def small_corpus():
    return gen_captioned_shapes(ShapesCorpusSpec(n=900, seed=1))


def test_untrained_maps_are_finite_and_non_negative(small_corpus):
    model = init_model(0)
    for i in range(5):
        m = grad_cam(model, small_corpus.images[i], small_corpus.captions[i])
        assert m.grid.shape == (8, 8) and m.upsampled.shape == (16, 16)
        assert np.isfinite(m.grid).all()
        assert (m.grid >= 0).all() and (m.upsampled >= 0).all()
    assert all(p.grad is None for p in model.named_params().values())


def test_arbitrary_inputs_give_non_negative_maps():
    rng = np.random.default_rng(0)
    model = init_model(5)
    for _ in range(5):
        m = grad_cam(model, rng.uniform(size=(3, 16, 16)), "a blue cross at 2 2", upsample_mode="bilinear")
        assert (m.grid >= 0).all() and (m.upsampled >= 0).all()


def test_upsample_modes():
    g = np.arange(4.0).reshape(2, 2)
    assert upsample(g, 2).tolist()[0] == [0, 0, 1, 1]
    assert upsample(g, 2, "bilinear").shape == (4, 4)
    with pytest.raises(ValueError):
        upsample(g, 2, "cubic")


def test_single_pixel_box():
    m = np.zeros((16, 16))
    m[5, 9] = 2.0
    assert box_from_saliency(m, 0.5) == (5, 9, 5, 9)


def test_uniform_map_full_mass_is_full_frame():
    assert box_from_saliency(np.ones((16, 16)), 1.0) == (0, 0, 15, 15)


def _min_area_boxes(m, need):
    """All minimum-area boxes holding at least ``need`` mass (exhaustive)."""
    best, boxes = None, []
    H, W = m.shape
    csum = m.cumsum(0).cumsum(1)
    pad = np.pad(csum, ((1, 0), (1, 0)))
    for r0, r1 in itertools.combinations_with_replacement(range(H), 2):
        for c0, c1 in itertools.combinations_with_replacement(range(W), 2):
            mass = pad[r1 + 1, c1 + 1] - pad[r0, c1 + 1] - pad[r1 + 1, c0] + pad[r0, c0]
            if mass >= need - 1e-12:
                area = (r1 - r0 + 1) * (c1 - c0 + 1)
                if best is None or area < best:
                    best, boxes = area, [(r0, c0, r1, c1)]
                elif area == best:
                    boxes.append((r0, c0, r1, c1))
    return best, boxes


def _overlaps(box, r0, c0, r1, c1):
    b0, b1, b2, b3 = box
    return b0 <= r1 and r0 <= b2 and b1 <= c1 and c0 <= b3


@pytest.mark.parametrize("frac", [0.65, 0.7, 0.85, 1.0])
def test_two_blob_box_reaches_both_blobs(frac):
    m = np.zeros((16, 16))
    m[2:4, 2:4] = 0.15  # 0.6 of the mass
    m[10:12, 12:14] = 0.10  # 0.4 of the mass
    box = box_from_saliency(m, frac)
    assert _overlaps(box, 2, 2, 3, 3) and _overlaps(box, 10, 12, 11, 13)
    area, oracle = _min_area_boxes(m, frac * m.sum())
    assert box in oracle
    assert all(_overlaps(b, 2, 2, 3, 3) and _overlaps(b, 10, 12, 11, 13) for b in oracle)
    if frac == 1.0:
        assert box == (2, 2, 11, 13)


def test_box_errors():
    with pytest.raises(ValueError):
        box_from_saliency(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        box_from_saliency(np.ones((4, 4)), 0.0)


def test_uniform_saliency_hits_at_chance(small_corpus):
    maps = [np.ones((16, 16))] * len(small_corpus)
    acc = pointing_hits(maps, small_corpus.labels["row"], small_corpus.labels["col"]).mean()
    assert abs(acc - 1 / 9) <= 0.05
    assert chance_rate() == pytest.approx(36 / 256)


def test_mask_saliency_hits_always(small_corpus):
    maps = small_corpus.masks().astype(float)
    assert pointing_hits(maps, small_corpus.labels["row"], small_corpus.labels["col"]).all()


def test_exports(tmp_path):
    m = SaliencyMap(np.eye(8), np.eye(8), upsample(np.eye(8), 2), "a red square")
    text = write_pgm(tmp_path / "m.pgm", m).read_text().splitlines()
    assert text[0] == "P2" and text[2] == "16 16" and text[3] == "255"
    assert text[4].split()[:3] == ["255", "255", "0"]
    assert grid_csv(m).splitlines()[1] == "0,0,1.0"


@pytest.mark.slow
def test_trained_model_localizes_top_left_square():
    from cliplite.data import render
    from shared import trained

    model = trained("jsd_single_neg", 64, 0).model
    img, _ = render("square", "red", "striped", 0, 0)
    m = grad_cam(model, img, "a red square at 0 0")
    r0, c0, r1, c1 = cell_block(0, 0)
    assert m.upsampled[r0:r1, c0:c1].sum() >= 0.5 * m.upsampled.sum()

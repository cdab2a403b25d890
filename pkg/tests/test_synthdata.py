import numpy as np
import pytest

from pertforge import synthdata
from pertforge.errors import ContractError
from pertforge.synthdata import Dataset, DatasetSpec, dilate, generate, triangle_mask


def small_spec(**kw):
    base = dict(seed=7, n_train=40, n_test=12, style="A")
    base.update(kw)
    return DatasetSpec(**base)


def test_generate_deterministic():
    a = generate(small_spec())
    b = generate(small_spec())
    assert np.array_equal(a.train.images, b.train.images)
    assert np.array_equal(a.test.images, b.test.images)
    assert np.array_equal(a.train.masks, b.train.masks)


def test_generate_balanced():
    split = generate(small_spec(n_train=1000))
    labels = split.train.labels
    assert (labels == 1).sum() == 500
    assert (labels == 0).sum() == 500


def test_labels_and_masks_consistent():
    split = generate(small_spec())
    for img, label, mask in zip(split.train.images, split.train.labels,
                                split.train.masks):
        if label == 1:
            assert mask.sum() == 0
        else:
            assert 0.02 <= mask.mean() <= 0.30
        assert img.min() >= 0 and img.max() <= 255
        assert np.array_equal(img, np.rint(img))  # integer-valued floats


def test_fake_stamp_confined_to_mask():
    # the fake's tint relative to the shared content lives inside the
    # (feathered) mask; both images stay integer-valued in range
    rng = np.random.default_rng(11)
    for _ in range(5):
        real, fake, mask = synthdata.tampered_pair("B", rng)
        assert mask.any()
        assert np.any(real != fake)
        for img in (real, fake):
            assert img.min() >= 0 and img.max() <= 255


def test_styles_differ_in_tamper_fingerprint():
    # style A's tampered patch is tinted +R/-B, style B's -R/+G; real
    # images carry the neutral +G/-B stamp instead
    def mask_tint(split, channel_pair):
        fakes = split.labels == 0
        vals = []
        for img, mask in zip(split.images[fakes], split.masks[fakes]):
            sel = mask.astype(bool)
            c0, c1 = channel_pair
            vals.append((img[c0][sel] - img[c1][sel]).mean())
        return float(np.mean(vals))

    a = generate(small_spec(style="A")).train
    b = generate(small_spec(style="B")).train
    assert mask_tint(a, (0, 2)) > 4.0      # R - B elevated under style A
    assert mask_tint(b, (1, 0)) > 4.0      # G - R elevated under style B

    real_a = a.images[a.labels == 1]
    # neutral real stamp raises G over B on average, leaves R - B centered
    assert float((real_a[:, 1] - real_a[:, 2]).mean()) > 0.3
    assert abs(float((real_a[:, 0] - real_a[:, 1]).mean())) < 1.5


def test_invalid_spec():
    with pytest.raises(ContractError):
        DatasetSpec(seed=0, n_train=0, n_test=1, style="A")
    with pytest.raises(ContractError):
        DatasetSpec(seed=0, n_train=1, n_test=1, style="Z")


def test_triangle_mask_deterministic():
    assert np.array_equal(triangle_mask(123), triangle_mask(123))


def test_triangle_mask_binary_and_area():
    for seed in range(200):
        mask = triangle_mask(seed)
        assert set(np.unique(mask)) <= {0, 1}
        assert 0.05 <= mask.mean() <= 0.30


def test_png_round_trip(tmp_path):
    split = generate(small_spec(n_train=10, n_test=4))
    synthdata.save_dataset(split.train, str(tmp_path))
    back = synthdata.load_dataset(str(tmp_path))
    assert np.array_equal(back.images, split.train.images)
    assert np.array_equal(back.labels, split.train.labels)
    assert np.array_equal(back.masks, split.train.masks)
    assert back.style == "A"
    assert back.ids == split.train.ids

import numpy as np
import pytest

from ringfed.sampling import sample_from_volumes, sample_patches
from ringfed.synthdata import IDENTITY_SHIFT, TaskSpec, generate_volume


def _volume(n_lesions, seed=0):
    spec = TaskSpec(volume_extent=(32, 32), fixed_lesion_count=n_lesions)
    return generate_volume(spec, IDENTITY_SHIFT, np.random.default_rng(seed), "v", seed)


def test_half_of_ten_patches_are_lesion_centred():
    vol = _volume(3)
    b = sample_patches(vol, 10, 9, np.random.default_rng(0))
    assert sum(b.foreground_centered) == 5
    # a lesion-centred patch of odd size has a lesion voxel at its centre
    for t, fg in zip(b.targets, b.foreground_centered):
        if fg:
            assert t[0, 4, 4] == 1


def test_odd_count_rounds_up():
    b = sample_patches(_volume(2), 7, 8, np.random.default_rng(0))
    assert sum(b.foreground_centered) == 4


def test_lesion_free_volume_samples_background_only():
    b = sample_patches(_volume(0), 10, 8, np.random.default_rng(0))
    assert not any(b.foreground_centered)
    assert not b.targets.any()


def test_same_seed_same_patches():
    vol = _volume(2)
    a = sample_patches(vol, 12, 10, np.random.default_rng(4), augment=True)
    b = sample_patches(vol, 12, 10, np.random.default_rng(4), augment=True)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert a.provenance == b.provenance


def test_patch_larger_than_volume_rejected():
    with pytest.raises(ValueError):
        sample_patches(_volume(1), 2, 40, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_patches(_volume(1), 0, 8, np.random.default_rng(0))


def test_border_patches_are_mirrored():
    vol = _volume(0)
    b = sample_patches(vol, 200, 16, np.random.default_rng(1))
    for img, (_, origin) in zip(b.inputs, b.provenance):
        r, c = origin
        if r < 0 and c >= 0 and c + 16 <= 32:
            # row -1 mirrors row 0 ("symmetric" padding repeats the edge)
            k = -r
            np.testing.assert_array_equal(img[0, k - 1], vol.image[0, c:c + 16])
            return
    pytest.fail("no top-border patch drawn")


def test_patches_spread_over_volumes():
    vols = [_volume(1, s) for s in range(3)]
    for i, v in enumerate(vols):
        v.volume_id = f"v{i}"
    b = sample_from_volumes(vols, 10, 8, np.random.default_rng(0))
    owners = [p[0] for p in b.provenance]
    assert sorted(owners.count(f"v{i}") for i in range(3)) == [3, 3, 4]

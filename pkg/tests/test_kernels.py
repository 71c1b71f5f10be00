import numpy as np
import pytest

from groundseg import _kernels_np as knp
from groundseg import kernels

from oracles import flood_fill_count

SHAPES = [
    ((2, 3, 8, 8), 3, 1, 1),
    ((1, 4, 16, 16), 3, 2, 1),
    ((2, 2, 12, 12), 1, 1, 0),
    ((3, 1, 8, 10), 3, 2, 0),
]


@pytest.mark.parametrize("shape,k,stride,pad", SHAPES)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree(shape, k, stride, pad, dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=shape).astype(dtype)
    a = kernels.im2col(x, k, stride, pad)
    b = knp.im2col(x, k, stride, pad)
    assert np.array_equal(a, b)
    cols = np.ascontiguousarray(rng.normal(size=a.shape).astype(dtype))
    ia = kernels.col2im(cols, shape, k, stride, pad)
    ib = knp.col2im(cols, shape, k, stride, pad)
    assert np.allclose(ia, ib, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("shape,k,stride,pad", SHAPES)
def test_col2im_is_adjoint_of_im2col(shape, k, stride, pad):
    rng = np.random.default_rng(1)
    x = rng.normal(size=shape)
    cols = kernels.im2col(x, k, stride, pad)
    c = np.ascontiguousarray(rng.normal(size=cols.shape))
    back = kernels.col2im(c, shape, k, stride, pad)
    # <im2col(x), c> == <x, col2im(c)> for an adjoint pair
    assert np.isclose((cols * c).sum(), (x * back).sum(), rtol=1e-9)


def test_im2col_values_by_hand():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    cols = kernels.im2col(x, 2, 2, 0)
    assert cols.shape == (1, 4, 4)
    # first output position covers the top-left 2x2 window
    assert cols[0, :, 0].tolist() == [0.0, 1.0, 4.0, 5.0]
    assert cols[0, :, 3].tolist() == [10.0, 11.0, 14.0, 15.0]


@pytest.mark.parametrize("impl", [kernels, knp])
def test_label_components_against_flood_fill(impl):
    rng = np.random.default_rng(7)
    for _ in range(30):
        mask = rng.random((rng.integers(1, 20), rng.integers(1, 20))) > 0.6
        _, count = impl.label_components(mask)
        assert count == flood_fill_count(mask.tolist())


def test_label_components_labels_partition_foreground():
    rng = np.random.default_rng(3)
    mask = rng.random((24, 24)) > 0.55
    labels, count = kernels.label_components(mask)
    assert set(np.unique(labels[mask])) == set(range(1, count + 1))
    assert (labels[~mask] == 0).all()


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "numpy")

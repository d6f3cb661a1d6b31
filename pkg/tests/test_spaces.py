import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from flowreg import (
    ConfigurationError,
    DomainError,
    ParameterSpace,
    from_inference,
    log_abs_det_jacobian,
    to_inference,
    unbounded_space,
)


@pytest.fixture
def mixed_space():
    return ParameterSpace(
        lower=[-np.inf, 0.0, 0.0, -np.inf],
        upper=[np.inf, 1.0, np.inf, 2.0],
        plausible_lo=[-1.0, 0.25, 0.5, -1.0],
        plausible_hi=[1.0, 0.75, 2.0, 1.5],
    )


def test_invariant_ordering_enforced():
    with pytest.raises(ConfigurationError):
        ParameterSpace(lower=[0.0], upper=[1.0], plausible_lo=[0.8], plausible_hi=[0.2])
    with pytest.raises(ConfigurationError):
        ParameterSpace(lower=[0.5], upper=[1.0], plausible_lo=[0.2], plausible_hi=[0.8])


def test_unbounded_affine_endpoints():
    space = unbounded_space([-1.0], [1.0])
    assert to_inference(space, np.array([1.0])) == pytest.approx(0.5)
    assert to_inference(space, np.array([-1.0])) == pytest.approx(-0.5)
    assert to_inference(space, np.array([0.0])) == pytest.approx(0.0)
    assert from_inference(space, np.array([0.5]))[0] == pytest.approx(1.0)


def test_bounded_dim_round_trip_center():
    space = ParameterSpace(lower=[0.0], upper=[1.0], plausible_lo=[0.25], plausible_hi=[0.75])
    v = to_inference(space, np.array([0.5]))
    assert from_inference(space, v)[0] == pytest.approx(0.5, abs=1e-12)


def test_bounded_inverse_stays_inside():
    space = ParameterSpace(lower=[0.0], upper=[1.0], plausible_lo=[0.25], plausible_hi=[0.75])
    for v in [-40.0, -3.0, 0.0, 3.0, 40.0]:
        x = from_inference(space, np.array([v]))[0]
        assert 0.0 < x < 1.0


def test_round_trip_random_points(mixed_space):
    rng = np.random.default_rng(0)
    x = np.column_stack([
        rng.normal(0, 2, 1000),
        rng.uniform(0.01, 0.99, 1000),
        rng.uniform(0.05, 5.0, 1000),
        rng.uniform(-3.0, 1.9, 1000),
    ])
    back = from_inference(mixed_space, to_inference(mixed_space, x))
    assert np.abs(back - x).max() < 1e-10


def test_out_of_bounds_rejected(mixed_space):
    x = np.array([0.0, 1.0, 1.0, 0.0])  # second coordinate sits on its bound
    with pytest.raises(DomainError, match="dimension 1"):
        to_inference(mixed_space, x)
    with pytest.raises(DomainError):
        to_inference(mixed_space, np.array([0.0, 0.5, -0.5, 0.0]))


def test_jacobian_affine_constant():
    space = unbounded_space([-2.0, -2.0, -2.0], [2.0, 2.0, 2.0])
    rng = np.random.default_rng(1)
    z = rng.normal(size=(10, 3))
    expected = 3 * np.log(4.0)
    assert np.allclose(log_abs_det_jacobian(space, z), expected)


def test_jacobian_matches_finite_differences(mixed_space):
    rng = np.random.default_rng(2)
    h = 1e-6
    for _ in range(20):
        z = rng.normal(0, 0.7, 4)
        analytic = log_abs_det_jacobian(mixed_space, z)
        numeric = 0.0
        for d in range(4):
            zp, zm = z.copy(), z.copy()
            zp[d] += h
            zm[d] -= h
            numeric += np.log(
                (from_inference(mixed_space, zp)[d] - from_inference(mixed_space, zm)[d])
                / (2 * h)
            )
        assert analytic == pytest.approx(numeric, rel=1e-6)


def test_jacobian_bounded_closed_form_at_center():
    # symmetric plausible range inside (0, 1): at v = 0 the raw coordinate is
    # t = 0, where d/dt [l + (u-l) sigmoid(t)] = (u-l)/4
    space = ParameterSpace(lower=[0.0], upper=[1.0], plausible_lo=[0.25], plausible_hi=[0.75])
    width_t = np.log(3.0) - np.log(1.0 / 3.0)
    expected = np.log(width_t) + np.log(0.25)
    assert log_abs_det_jacobian(space, np.array([0.0])) == pytest.approx(expected, abs=1e-12)


def test_density_integral_preserved_under_transform():
    # Beta(2, 3)-shaped density on (0, 1) integrated in both spaces
    space = ParameterSpace(lower=[0.0], upper=[1.0], plausible_lo=[0.2], plausible_hi=[0.8])

    def density(x):
        return x * (1.0 - x) ** 2

    total_orig, _ = quad(density, 0.0, 1.0, epsabs=1e-12)

    def density_inf(z):
        z = np.array([z])
        x = from_inference(space, z)[0]
        return density(x) * np.exp(log_abs_det_jacobian(space, z))

    total_inf, _ = quad(density_inf, -60.0, 60.0, epsabs=1e-12)
    assert total_inf == pytest.approx(total_orig, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(
    z=st.lists(st.floats(-8.0, 8.0), min_size=4, max_size=4),
)
def test_inverse_forward_property(z):
    space = ParameterSpace(
        lower=[-np.inf, 0.0, 0.0, -np.inf],
        upper=[np.inf, 1.0, np.inf, 2.0],
        plausible_lo=[-1.0, 0.25, 0.5, -1.0],
        plausible_hi=[1.0, 0.75, 2.0, 1.5],
    )
    z = np.asarray(z)
    x = from_inference(space, z)
    assert np.isfinite(x).all()
    assert (x > space.lower).all() and (x < space.upper).all()
    z_back = to_inference(space, x)
    assert np.abs(z_back - z).max() < 1e-8


def test_serialization_round_trip(mixed_space):
    doc = mixed_space.to_dict()
    rebuilt = ParameterSpace.from_dict(doc)
    assert np.array_equal(rebuilt.lower, mixed_space.lower)
    assert np.array_equal(rebuilt.upper, mixed_space.upper)
    assert np.array_equal(rebuilt.plausible_lo, mixed_space.plausible_lo)
    assert np.array_equal(rebuilt.plausible_hi, mixed_space.plausible_hi)

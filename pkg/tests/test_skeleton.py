import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noniso.errors import DegenerateMatrixError, ParameterError, ValidationError
from noniso.skeleton import (
    Skeleton,
    build_adjacency,
    closure_matrix,
    correlation_for_skeleton,
    correlation_from_matrix,
    hop_matrix,
    masked_closure_matrix,
    reconstruction_error,
    skeleton_from_json,
    load_skeleton,
    save_skeleton,
)

from conftest import chain, random_connected


def test_adjacency_small_graphs():
    assert build_adjacency(chain(2)).tolist() == [[0, 1], [1, 0]]
    assert build_adjacency(chain(3)).tolist() == [[0, 1, 0], [1, 0, 1], [0, 1, 0]]
    y = Skeleton(list("abcd"), [(0, 1), (1, 2), (1, 3)], [1, 1, 1])
    assert build_adjacency(y)[1].tolist() == [1, 0, 1, 1]


@pytest.mark.parametrize(
    "edges, needle",
    [
        ([(0, 1), (1, 1)], "(1,1)"),
        ([(0, 1), (1, 5)], "(1,5)"),
        ([(0, 1), (0, 1)], "(0,1)"),
    ],
)
def test_invalid_edges_are_named(edges, needle):
    with pytest.raises(ValidationError) as exc:
        Skeleton(list("abc"), edges, [1.0] * len(edges))
    assert needle in str(exc.value)


def test_disconnected_and_bad_lengths():
    with pytest.raises(ValidationError, match="connect"):
        Skeleton(list("abcd"), [(0, 1), (2, 3)], [1, 1])
    with pytest.raises(ValidationError):
        Skeleton(list("ab"), [(0, 1)], [0.0])
    with pytest.raises(ValidationError):
        Skeleton(["a"], [], [])


def test_closure_matrix_hops():
    R = closure_matrix(chain(3), 0.5)
    assert R[0, 1] == 1 and R[1, 2] == 1 and R[0, 2] == 0.5
    assert np.all(np.diag(R) == 0)
    np.testing.assert_array_equal(closure_matrix(chain(2), 0.3), build_adjacency(chain(2)))
    with pytest.raises(ParameterError):
        closure_matrix(chain(3), 1.0)
    with pytest.raises(ParameterError):
        closure_matrix(chain(3), 0.0)


def test_closure_eta_near_one_saturates():
    R = closure_matrix(chain(3), 1 - 1e-12)
    off = R[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, 1.0, atol=1e-11)


def test_masked_closure_modes():
    sk = chain(3)
    avoid = masked_closure_matrix(sk, 0.5, 1, keep="avoid_hub")
    assert avoid[0, 2] == 0 and avoid[0, 1] == 1 and avoid[1, 2] == 1
    through = masked_closure_matrix(sk, 0.5, 1)
    assert through[0, 2] == 0.5 and through[0, 1] == 0 and through[1, 2] == 0
    # a leaf hub is interior to no shortest path
    np.testing.assert_array_equal(masked_closure_matrix(sk, 0.5, 0, keep="avoid_hub"), closure_matrix(sk, 0.5))
    np.testing.assert_array_equal(masked_closure_matrix(chain(2), 0.5, 0, keep="avoid_hub"), build_adjacency(chain(2)))
    with pytest.raises(ParameterError):
        masked_closure_matrix(sk, 0.5, 7)


def test_masks_partition_closure(rng):
    for _ in range(10):
        sk = random_connected(rng, int(rng.integers(3, 9)))
        hub = int(rng.integers(0, sk.num_joints))
        a = masked_closure_matrix(sk, 0.7, hub, keep="avoid_hub")
        b = masked_closure_matrix(sk, 0.7, hub, keep="through_hub")
        np.testing.assert_array_equal(a + b, closure_matrix(sk, 0.7))


def test_correlation_two_chain():
    c = correlation_from_matrix(build_adjacency(chain(2)))
    np.testing.assert_allclose(c.sigma_n, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(c.eigvals, [0.0, 1.0], atol=1e-15)


def test_correlation_three_chain():
    c = correlation_from_matrix(build_adjacency(chain(3)))
    np.testing.assert_allclose(np.diag(c.sigma_n), 0.5, atol=1e-15)
    assert c.sigma_n[0, 1] == pytest.approx(1 / (2 * np.sqrt(2)), abs=1e-15)
    assert c.sigma_n[0, 2] == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(c.eigvals, [0.0, 0.5, 1.0], atol=1e-12)


def test_scaled_identity_is_degenerate():
    with pytest.raises(DegenerateMatrixError):
        correlation_from_matrix(3.0 * np.eye(4))
    with pytest.raises(ValidationError):
        correlation_from_matrix(np.array([[0.0, 1.0], [0.5, 0.0]]))


def test_frobenius_norm_mean_eigenvalue_one():
    c = correlation_from_matrix(build_adjacency(chain(5)), "frobenius")
    assert c.eigvals.mean() == pytest.approx(1.0, abs=1e-12)
    assert c.eigvals[0] == 0.0


def test_symmetry_is_exact(rng):
    for _ in range(5):
        sk = random_connected(rng, 9)
        for m in (build_adjacency(sk), closure_matrix(sk, 0.6), correlation_for_skeleton(sk, "closure").sigma_n):
            assert np.array_equal(m, m.T)


@settings(max_examples=40, deadline=None)
@given(J=st.integers(2, 12), seed=st.integers(0, 2**31 - 1), base=st.sampled_from(["adjacency", "closure"]))
def test_correlation_invariants(J, seed, base):
    sk = random_connected(np.random.default_rng(seed), J)
    c = correlation_for_skeleton(sk, base)
    U, w = c.eigvecs, c.eigvals
    assert reconstruction_error(c) < 1e-10
    assert np.abs(U.T @ U - np.eye(J)).max() < 1e-10
    assert w[0] == 0.0 and np.all(w >= 0)
    assert abs(w[-1] - 1.0) <= 1e-10
    assert np.all(np.diff(w) >= 0)
    assert np.linalg.norm(c.sigma_n, 2) == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(J=st.integers(2, 10), seed=st.integers(0, 2**31 - 1), shift=st.floats(-5, 5))
def test_diagonal_shift_cancels(J, seed, shift):
    A = build_adjacency(random_connected(np.random.default_rng(seed), J))
    a = correlation_from_matrix(A).sigma_n
    b = correlation_from_matrix(A + shift * np.eye(J)).sigma_n
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_large_order_reconstruction(rng):
    sk = random_connected(rng, 64, p_extra=0.05)
    assert reconstruction_error(correlation_for_skeleton(sk, "closure")) < 1e-10


def test_hop_matrix_chain():
    H = hop_matrix(chain(4))
    assert H[0, 3] == 3 and H[1, 2] == 1 and H[2, 2] == 0


def test_json_round_trip(tmp_path):
    sk = Skeleton(list("abc"), [(0, 1), (1, 2)], [0.5, 0.25], hub_joint=1)
    p = tmp_path / "sk.json"
    save_skeleton(sk, p)
    assert load_skeleton(p) == sk


def test_json_errors_carry_lines():
    text = '{\n "joints": ["a", "b", "c"],\n "edges": [\n  [0, 1],\n  [1, 9]\n ],\n "bone_lengths": [1, 1]\n}'
    with pytest.raises(ValidationError) as exc:
        skeleton_from_json(text)
    assert exc.value.line == 5
    with pytest.raises(ValidationError) as exc:
        skeleton_from_json('{\n "joints": ["a",\n}')
    assert exc.value.line is not None
    with pytest.raises(ValidationError):
        skeleton_from_json(json.dumps({"joints": ["a", "b"], "edges": [[0, 1]]}))

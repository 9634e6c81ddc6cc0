import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctrlinv import sysmodel as sm
from ctrlinv.errors import ConsensusError, ModelFileError, OutputSpecError, ParameterError, ReductionError


def _gen(**kw):
    base = dict(M=0.1, D=0.01, Tdo=6.0, TA=0.05, KA=50.0, xd=0.2, xdp=0.04, delta0=0.0, Eq0=1.0)
    base.update(kw)
    return sm.GeneratorParams(**base)


def test_kron_reduce_matches_schur_complement():
    rng = np.random.default_rng(0)
    adm, _ = sm.synth_network(4, rng, n_load=3)
    xdp = [0.03, 0.04, 0.05, 0.02]
    Ya, Yb = sm.kron_reduce(adm, xdp)
    Y = adm.Y
    expected = Y[:4, :4] - Y[:4, 4:] @ np.linalg.solve(Y[4:, 4:], Y[4:, :4])
    assert np.allclose(Ya, expected, atol=1e-12)
    assert np.allclose(Yb @ (Ya + np.diag(1j * np.array(xdp))), np.eye(4), atol=1e-10)


def test_kron_reduce_without_loads_is_identity_on_Y():
    Y = np.array([[2 - 5j, -1 + 4j], [-1 + 4j, 2 - 5j]])
    Ya, _ = sm.kron_reduce(sm.NetworkAdmittance(Y, 2), [0.1, 0.1])
    assert np.allclose(Ya, Y)


def test_kron_reduce_singular_load_block():
    Y = np.zeros((3, 3), dtype=complex)
    Y[:2, :2] = [[1 - 1j, 0], [0, 1 - 1j]]
    with pytest.raises(ReductionError):
        sm.kron_reduce(sm.NetworkAdmittance(Y, 2), [0.1, 0.1])


def test_admittance_must_be_symmetric():
    with pytest.raises(ParameterError):
        sm.NetworkAdmittance(np.array([[1, 2], [3, 4]], dtype=complex), 2)


@pytest.mark.parametrize("field,value", [("M", 0.0), ("Tdo", -1.0), ("TA", 0.0), ("xdp", 0.3)])
def test_generator_validation(field, value):
    with pytest.raises(ParameterError):
        _gen(**{field: value}).validate()


def test_synthetic_model_invariants(small_model):
    m = small_model
    n = m.n
    A = m.A
    assert A.shape == (4 * n, 4 * n)
    # block sparsity: zero blocks and identity coupling of angle to frequency
    assert np.array_equal(A[:n, :n], np.zeros((n, n)))
    assert np.array_equal(A[:n, n : 2 * n], np.eye(n))
    assert not A[:n, 2 * n :].any()
    assert not A[n : 2 * n, 3 * n :].any()
    assert not A[2 * n : 3 * n, n : 2 * n].any()
    assert not A[3 * n :, n : 2 * n].any()
    for L in (m.L1m, m.L2m, m.L3m):
        assert np.linalg.norm(L @ m.vbar) < 1e-9 * np.linalg.norm(L)
    eigs = m.check()
    n_zero, max_re, _ = sm.consensus_spectrum(A, eigs)
    assert n_zero == 1 and max_re < 0
    assert np.linalg.matrix_rank(m.F1m) == n
    assert np.linalg.norm(A @ m.v0) < 1e-9 * np.linalg.norm(A)


def test_synth_is_reproducible():
    a = sm.synth_random_model(5, seed=11)
    b = sm.synth_random_model(5, seed=11)
    assert np.array_equal(a.A, b.A) and np.array_equal(a.Bd, b.Bd)


def test_synth_rejects_small_n():
    with pytest.raises(ParameterError):
        sm.synth_random_model(1)


def test_check_detects_broken_consensus(small_model):
    d = sm.model_to_dict(small_model)
    L = np.array(d["L1m"])
    L[0, 0] += 1.0
    d["L1m"] = L.tolist()
    with pytest.raises(ConsensusError):
        sm.model_from_dict(d, check=True)


def test_model_roundtrip(tmp_path, small_model):
    p = tmp_path / "m.json"
    sm.save_model(small_model, p)
    m2 = sm.load_model(p, check=True)
    assert np.array_equal(m2.A, small_model.A)
    assert np.array_equal(m2.Bd, small_model.Bd)
    assert m2.meta == small_model.meta


def test_load_model_errors_are_located(tmp_path, small_model):
    p = tmp_path / "bad.json"
    p.write_text("{\n  \"n\": 3,\n  oops\n}")
    with pytest.raises(ModelFileError, match="line 3"):
        sm.load_model(p)
    d = sm.model_to_dict(small_model)
    del d["F2m"]
    p.write_text(json.dumps(d))
    with pytest.raises(ModelFileError, match="F2m"):
        sm.load_model(p)
    d = sm.model_to_dict(small_model)
    d["Dm"] = [[1.0]]
    p.write_text(json.dumps(d))
    with pytest.raises(ModelFileError, match="shape"):
        sm.load_model(p)


def test_with_disturbance(small_model):
    m = small_model.with_disturbance(np.eye(4 * small_model.n))
    assert m.n_d == 4 * small_model.n
    assert np.array_equal(m.A, small_model.A)


def test_build_output_angle_differences():
    M = np.array([1.0, 4.0, 9.0])
    C = sm.build_output(sm.OutputSpec(((1, 3),), frequencies=False), M)
    x = np.zeros(12)
    x[:3] = np.sqrt(M) * np.array([0.5, 0.0, 0.2])  # mass-scaled angles
    assert np.isclose(C @ x, 0.3).all()


@pytest.mark.parametrize("pairs", [((1, 1),), ((0, 2),), ((1, 5),)])
def test_build_output_rejects_bad_pairs(pairs):
    with pytest.raises(OutputSpecError):
        sm.build_output(sm.OutputSpec(pairs, frequencies=False), np.ones(4))


def test_build_output_rejects_empty():
    with pytest.raises(OutputSpecError):
        sm.build_output(sm.OutputSpec((), frequencies=False), np.ones(3))


@settings(max_examples=15, deadline=None)
@given(st.integers(min_value=2, max_value=7), st.integers(min_value=0, max_value=10_000))
def test_random_models_are_consensus_stable(n, seed):
    m = sm.synth_random_model(n, seed=seed)
    n_zero, max_re, _ = sm.consensus_spectrum(m.A)
    assert n_zero == 1 and max_re < 0
    assert np.all(np.abs(m.A[:n, n : 2 * n] - np.eye(n)) == 0)


def test_mass_scaling_is_similarity():
    m, params = sm.synth_random_model(4, seed=2, return_params=True)
    Ya, Yb = sm.kron_reduce(*_network_for(m, params))
    A_unscaled = sm.unscaled_state_matrix(params, sm.linearize(params, Ya, Yb))
    assert np.allclose(np.sort_complex(np.linalg.eigvals(A_unscaled)), np.sort_complex(np.linalg.eigvals(m.A)), atol=1e-6)


def _network_for(model, params):
    rng = np.random.default_rng(model.meta["seed"])
    for _ in range(model.meta["attempt"] + 1):
        sm._draw_params(model.n, rng)
        adm, _ = sm.synth_network(model.n, rng)
        rng.choice(model.n, size=model.n_d, replace=False)
    return adm, [p.xdp for p in params]

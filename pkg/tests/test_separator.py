import numpy as np
import pytest

from lqtse.errors import CorruptCacheError, DimensionError, NonFiniteError
from lqtse.metrics import loss_and_grad
from lqtse.separator import (
    AdamState,
    SeparatorParams,
    adam_step,
    backward,
    forward,
    init_params,
    load_checkpoint,
    n_params_for,
    save_checkpoint,
    sgd_step,
)
from lqtse.signal import analysis, synthesis


def _inputs(seed=0, n=2048, d=64, batch=None):
    rng = np.random.default_rng(seed)
    shape = (n,) if batch is None else (batch, n)
    cshape = (d,) if batch is None else (batch, d)
    return rng.standard_normal(shape), rng.standard_normal(cshape) / np.sqrt(d)


def test_param_count():
    params = init_params(0)
    assert params.n_params() == n_params_for() == 41_537
    assert params.dims == (257, 64, 64)


def test_init_seeded_and_zero_biases():
    a, b = init_params(5), init_params(5)
    assert a.equal(b)
    assert not init_params(6).equal(a)
    for name in ("b1", "bg", "bb", "b2"):
        assert not np.any(getattr(a, name))
    bound = 1 / np.sqrt(257)
    assert np.abs(a.W1).max() <= bound


class TestForward:
    def test_identity_mask(self):
        p = init_params(0)
        p.W2[:] = 0
        p.b2[:] = 30
        x, c = _inputs()
        est, _ = forward(p, x, c)
        assert np.linalg.norm(est - x) / np.linalg.norm(x) < 1e-4

    def test_half_mask(self):
        p = init_params(0)
        p.W2[:] = 0
        x, c = _inputs()
        est, trace = forward(p, x, c)
        np.testing.assert_array_equal(trace.mask, 0.5)
        np.testing.assert_allclose(est, 0.5 * x, atol=1e-10)

    def test_condition_changes_mask(self):
        p = init_params(1)
        x, c = _inputs()
        _, t1 = forward(p, x, c)
        _, t2 = forward(p, x, -c)
        assert np.max(np.abs(t1.mask - t2.mask)) > 0

    def test_mask_bounded_and_magnitude(self):
        p = init_params(2)
        x, c = _inputs(1)
        est, trace = forward(p, x, c)
        assert np.all((trace.mask > 0) & (trace.mask < 1))
        masked = trace.spec * trace.mask.transpose(0, 2, 1)
        assert np.all(np.abs(masked) <= np.abs(trace.spec))

    def test_linear_in_mask(self):
        p = init_params(3)
        x, c = _inputs(2)
        rng = np.random.default_rng(0)
        _, trace = forward(p, x, c)
        m1, m2 = rng.uniform(size=trace.mask.shape), rng.uniform(size=trace.mask.shape)
        a = 0.3
        mixed, _ = forward(p, x, c, mask_override=a * m1 + (1 - a) * m2)
        e1, _ = forward(p, x, c, mask_override=m1)
        e2, _ = forward(p, x, c, mask_override=m2)
        np.testing.assert_allclose(mixed, a * e1 + (1 - a) * e2, atol=1e-10)

    def test_batched_matches_single(self):
        p = init_params(4)
        x, c = _inputs(3, batch=3)
        est, _ = forward(p, x, c)
        for i in range(3):
            np.testing.assert_allclose(est[i], forward(p, x[i], c[i])[0], atol=1e-10)

    def test_bad_condition_dim(self):
        x, _ = _inputs()
        with pytest.raises(DimensionError):
            forward(init_params(0), x, np.ones(32))


def _small_params(seed):
    p = init_params(seed, h=8, d=6)
    rng = np.random.default_rng(seed)
    # nonzero biases so every block gets a generic gradient
    for name in ("b1", "bg", "bb", "b2"):
        getattr(p, name)[:] = 0.3 * rng.standard_normal(getattr(p, name).shape)
    p.bg[:] += 1.0
    return p


def _loss(p, x, c, ref):
    est, _ = forward(p, x, c)
    return loss_and_grad(est, ref)[0]


class TestBackward:
    def test_zero_upstream(self):
        p = init_params(0)
        x, c = _inputs()
        est, trace = forward(p, x, c)
        grads, dc = backward(p, trace, np.zeros_like(est))
        assert all(not np.any(g) for g in grads.arrays().values())
        assert not np.any(dc)

    def test_finite_differences_every_block(self):
        p = _small_params(7)
        rng = np.random.default_rng(8)
        x = rng.standard_normal(1024)
        ref = rng.standard_normal(1024)
        c = rng.standard_normal(6)
        est, trace = forward(p, x, c)
        grads, dc = backward(p, trace, loss_and_grad(est, ref)[1])
        h = 1e-5
        for name, g in grads.arrays().items():
            arr = getattr(p, name)
            for idx in [tuple(rng.integers(s) for s in arr.shape) for _ in range(12)]:
                old = arr[idx]
                arr[idx] = old + h
                up = _loss(p, x, c, ref)
                arr[idx] = old - h
                down = _loss(p, x, c, ref)
                arr[idx] = old
                fd = (up - down) / (2 * h)
                assert abs(g[idx] - fd) <= 1e-4 * max(abs(fd), 1e-3), (name, idx, g[idx], fd)
        for j in range(6):
            cp, cm = c.copy(), c.copy()
            cp[j] += h
            cm[j] -= h
            fd = (_loss(p, x, cp, ref) - _loss(p, x, cm, ref)) / (2 * h)
            assert abs(dc[0, j] - fd) <= 1e-4 * max(abs(fd), 1e-3)

    def test_dead_relu_unit(self):
        p = init_params(1)
        p.bb[5] = -1e6  # unit 5 is never active
        x, c = _inputs()
        est, trace = forward(p, x, c)
        grads, _ = backward(p, trace, np.random.default_rng(0).standard_normal(est.shape))
        assert not np.any(grads.W1[5]) and grads.b1[5] == 0 and grads.bg[5] == 0
        assert not np.any(grads.Wg[5]) and not np.any(grads.W2[:, 5])

    def test_batch_sum(self):
        p = init_params(2)
        x, c = _inputs(4, batch=2)
        g_up = np.random.default_rng(1).standard_normal(x.shape)
        _, trace = forward(p, x, c)
        total, _ = backward(p, trace, g_up)
        parts = [backward(p, forward(p, x[i], c[i])[1], g_up[i])[0] for i in range(2)]
        for name in total.names:
            np.testing.assert_allclose(getattr(total, name), getattr(parts[0], name) + getattr(parts[1], name), atol=1e-9)

    def test_synthesis_adjoint_identity(self):
        from lqtse.signal import synthesis_adjoint

        rng = np.random.default_rng(3)
        spec = analysis(rng.standard_normal(2000))
        z = rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)
        g = rng.standard_normal(2000)
        # <synthesis(z), g> == Re <z, adjoint(g)> with the real inner product on real/imag parts
        lhs = synthesis(z, 2000) @ g
        rhs = np.sum(np.real(z * np.conj(synthesis_adjoint(g[None, :], spec.shape[1])[0])))
        assert abs(lhs - rhs) < 1e-9 * max(1, abs(lhs))


class TestOptimisers:
    def test_adam_zero_gradient(self):
        p = init_params(0)
        new, state = adam_step(p, p.zeros_like(), AdamState.zeros(p), 1e-3)
        assert new.equal(p) and state.t == 1

    def test_adam_quadratic_hand_value(self):
        # first Adam step moves each coordinate by lr * sign(grad)
        p = init_params(0, f=257, h=2, d=2)
        target = p.copy()
        target.W1[:] = 0
        grads = SeparatorParams(**{k: v - getattr(target, k) for k, v in p.arrays().items()})
        new, _ = adam_step(p, grads, AdamState.zeros(p), 0.01)
        expected = p.W1 - 0.01 * np.sign(p.W1) * np.abs(p.W1) / (np.abs(p.W1) + 1e-8)
        np.testing.assert_allclose(new.W1, expected, atol=1e-12)
        assert np.sum(new.W1**2) < np.sum(p.W1**2)

    def test_sgd(self):
        p = init_params(0)
        new = sgd_step(p, p, 0.5)
        np.testing.assert_allclose(new.W1, 0.5 * p.W1)

    def test_nan_gradient(self):
        p = init_params(0)
        g = p.zeros_like()
        g.Wg[0, 0] = np.nan
        with pytest.raises(NonFiniteError) as err:
            adam_step(p, g, AdamState.zeros(p), 1e-3)
        assert err.value.context["block"] == "Wg"

    def test_deterministic_trajectory(self):
        x, c = _inputs(5)
        ref = np.random.default_rng(6).standard_normal(x.shape)

        def run():
            p, s = init_params(9), None
            s = AdamState.zeros(p)
            for _ in range(3):
                est, trace = forward(p, x, c)
                grads, _ = backward(p, trace, loss_and_grad(est, ref)[1])
                p, s = adam_step(p, grads, s, 1e-3)
            return p

        assert run().equal(run())


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = init_params(0)
        save_checkpoint(tmp_path / "a.sep", p)
        raw = (tmp_path / "a.sep").read_bytes()
        assert raw[:4] == b"SEP1" and len(raw) == 24 + 4 * 41_537
        ck = load_checkpoint(tmp_path / "a.sep")
        assert ck.step is None and ck.adam is None
        assert ck.params.equal(p.astype(np.float32))

    def test_resume_block_exact(self, tmp_path):
        p = init_params(0)
        state = AdamState(p.copy(), p.copy(), 7)
        save_checkpoint(tmp_path / "r.sep", p, step=42, adam=state)
        ck = load_checkpoint(tmp_path / "r.sep")
        assert ck.step == 42 and ck.adam.t == 7
        assert ck.exact_params.equal(p) and ck.adam.m.equal(p)

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "t.sep", init_params(0))
        (tmp_path / "t.sep").write_bytes((tmp_path / "t.sep").read_bytes()[:1000])
        with pytest.raises(CorruptCacheError):
            load_checkpoint(tmp_path / "t.sep")
